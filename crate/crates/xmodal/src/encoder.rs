//! Modality encoders and the classification pipeline.
//!
//! Each modality runs the same 1-D conv pattern with its own widths:
//! conv block (conv → batch norm → relu), pool, more conv blocks, pool,
//! dropout. The classifier is encoder → K/Q/V projection → self-attention
//! → mean pool → linear head. Checkpoints are a versioned binary dump of
//! every parameter plus batch-norm running stats; reload reproduces
//! eval-mode outputs bit for bit.

use crate::attention::{self, AttentionTriple, BoundProjection, ProjectionWeights};
use crate::autodiff::{AutodiffError, ConvLayout, PoolKind, Tape, TensorId};
use crate::datagen::Modality;
use crate::rng::{fnv1a64, Rng};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"XMCP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ModelError {
    Autodiff(AutodiffError),
    WindowTooShort { stage: usize, have: usize, need: usize },
    BadConfig(String),
    Io(std::io::Error),
    Corrupt(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Autodiff(e) => write!(f, "{e}"),
            ModelError::WindowTooShort { stage, have, need } => {
                write!(f, "window too short at stage {stage}: {have} rows, stage needs {need}")
            }
            ModelError::BadConfig(s) => write!(f, "invalid encoder config: {s}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
            ModelError::Corrupt(s) => write!(f, "corrupt checkpoint: {s}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Autodiff(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolChoice {
    Max,
    Mean,
}

impl From<PoolChoice> for PoolKind {
    fn from(p: PoolChoice) -> PoolKind {
        match p {
            PoolChoice::Max => PoolKind::Max,
            PoolChoice::Mean => PoolKind::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kind: PoolChoice,
    pub width: usize,
}

/// Conv-stack geometry. Pooling runs after the first and after the last
/// conv stage; dropout closes the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub conv_stages: Vec<ConvSpec>,
    pub pool: PoolSpec,
    pub batch_norm_momentum: f64,
    pub batch_norm_eps: f64,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Small three-stage stack used by the synthetic experiments.
    pub fn default_stack(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            conv_stages: vec![
                ConvSpec { kernel: 9, stride: 1, out_channels: 16 },
                ConvSpec { kernel: 5, stride: 1, out_channels: 16 },
                ConvSpec { kernel: 5, stride: 1, out_channels: 16 },
            ],
            pool: PoolSpec { kind: PoolChoice::Max, width: 2 },
            batch_norm_momentum: 0.9,
            batch_norm_eps: 1e-5,
            dropout_rate: 0.1,
        }
    }

    /// width of the embedding sequence the stack emits
    pub fn d_model(&self) -> usize {
        self.conv_stages.last().map(|s| s.out_channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::BadConfig("in_channels must be positive".into()));
        }
        if self.conv_stages.is_empty() {
            return Err(ModelError::BadConfig("need at least one conv stage".into()));
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(ModelError::BadConfig(format!(
                    "conv stage {i} has a zero kernel/stride/width"
                )));
            }
        }
        if self.pool.width == 0 {
            return Err(ModelError::BadConfig("pool width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.batch_norm_momentum) {
            return Err(ModelError::BadConfig("batch norm momentum must be in [0, 1)".into()));
        }
        if self.batch_norm_eps <= 0.0 {
            return Err(ModelError::BadConfig("batch norm eps must be positive".into()));
        }
        Ok(())
    }

    fn pools_after(&self, stage: usize) -> bool {
        stage == 0 || stage == self.conv_stages.len() - 1
    }

    /// Sequence length after the full stack, checking every stage stays
    /// at least one step long.
    pub fn seq_len_after(&self, window_len: usize) -> Result<usize, ModelError> {
        let mut t = window_len;
        for (i, s) in self.conv_stages.iter().enumerate() {
            if t < s.kernel {
                return Err(ModelError::WindowTooShort { stage: i, have: t, need: s.kernel });
            }
            t = conv_out_len(t, s.kernel, s.stride);
            if self.pools_after(i) {
                if t < self.pool.width {
                    return Err(ModelError::WindowTooShort {
                        stage: i,
                        have: t,
                        need: self.pool.width,
                    });
                }
                t /= self.pool.width;
            }
        }
        Ok(t)
    }
}

/// floor((t − k)/s) + 1
pub fn conv_out_len(t: usize, kernel: usize, stride: usize) -> usize {
    (t - kernel) / stride + 1
}

/// Per-channel affine map of [min, max] onto [−1, 1]; constant channels
/// map to zero.
pub fn min_max_normalize(window: &[f64], t_len: usize, channels: usize) -> Vec<f64> {
    debug_assert_eq!(window.len(), t_len * channels);
    let mut out = vec![0.0; window.len()];
    for c in 0..channels {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..t_len {
            let v = window[t * channels + c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = 2.0 / (hi - lo);
            for t in 0..t_len {
                out[t * channels + c] = (window[t * channels + c] - lo) * scale - 1.0;
            }
        }
    }
    out
}

/// One conv block's parameters and batch-norm state.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// kernel·in_channels × out_channels
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub config: EncoderConfig,
    pub stages: Vec<ConvStage>,
    pub mode: Mode,
}

pub struct BoundStage {
    pub w: TensorId,
    pub b: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
}

pub struct BoundEncoder {
    pub stages: Vec<BoundStage>,
}

pub struct EncoderForward {
    /// n_samples·t_m × d_model
    pub rows: TensorId,
    pub t_m: usize,
    /// per-stage (mean, var) batch statistics, training mode only
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ModalityEncoder {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = config.in_channels;
        for spec in &config.conv_stages {
            let fan_in = spec.kernel * in_ch;
            let bound = (1.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * spec.out_channels)
                .map(|_| rng.range(-bound, bound))
                .collect();
            stages.push(ConvStage {
                kernel: spec.kernel,
                stride: spec.stride,
                in_channels: in_ch,
                out_channels: spec.out_channels,
                w,
                b: vec![0.0; spec.out_channels],
                gamma: vec![1.0; spec.out_channels],
                beta: vec![0.0; spec.out_channels],
                running_mean: vec![0.0; spec.out_channels],
                running_var: vec![1.0; spec.out_channels],
            });
            in_ch = spec.out_channels;
        }
        Ok(ModalityEncoder { config, stages, mode: Mode::Train })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundEncoder, ModelError> {
        let mut stages = Vec::new();
        for s in &self.stages {
            stages.push(BoundStage {
                w: tape.leaf(&[s.kernel * s.in_channels, s.out_channels], s.w.clone(), requires_grad)?,
                b: tape.leaf(&[1, s.out_channels], s.b.clone(), requires_grad)?,
                gamma: tape.leaf(&[1, s.out_channels], s.gamma.clone(), requires_grad)?,
                beta: tape.leaf(&[1, s.out_channels], s.beta.clone(), requires_grad)?,
            });
        }
        Ok(BoundEncoder { stages })
    }

    /// Run the stack over `n_samples` windows stacked as
    /// [n·window_len × in_channels]. Dropout draws from `rng` in training
    /// mode; eval mode is deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        input: TensorId,
        n_samples: usize,
        window_len: usize,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<EncoderForward, ModelError> {
        self.config.seq_len_after(window_len)?;
        let mut rows = input;
        let mut t = window_len;
        let mut batch_stats = Vec::new();
        for (i, (stage, bound_stage)) in self.stages.iter().zip(&bound.stages).enumerate() {
            let layout = ConvLayout {
                n_samples,
                in_len: t,
                in_channels: stage.in_channels,
                kernel: stage.kernel,
                stride: stage.stride,
            };
            let cols = tape.im2col(rows, layout)?;
            let conv = tape.matmul(cols, bound_stage.w)?;
            let conv = tape.add_row_broadcast(conv, bound_stage.b)?;
            t = layout.out_len();
            let (bn, mean, var) = match mode {
                Mode::Train => tape.batch_norm_cols(
                    conv,
                    bound_stage.gamma,
                    bound_stage.beta,
                    self.config.batch_norm_eps,
                    None,
                )?,
                Mode::Eval => tape.batch_norm_cols(
                    conv,
                    bound_stage.gamma,
                    bound_stage.beta,
                    self.config.batch_norm_eps,
                    Some((&stage.running_mean, &stage.running_var)),
                )?,
            };
            if mode == Mode::Train {
                batch_stats.push((mean, var));
            }
            rows = tape.relu(bn)?;
            if self.config.pools_after(i) {
                rows = tape.pool_rows(rows, n_samples, self.config.pool.width, self.config.pool.kind.into())?;
                t /= self.config.pool.width;
            }
        }
        if mode == Mode::Train && self.config.dropout_rate > 0.0 {
            let rng = rng.expect("training-mode dropout needs the run rng");
            rows = tape.dropout(rows, self.config.dropout_rate, rng)?;
        }
        Ok(EncoderForward { rows, t_m: t, batch_stats })
    }

    /// Fold one training batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch_stats: &[(Vec<f64>, Vec<f64>)]) {
        debug_assert_eq!(self.mode, Mode::Train);
        debug_assert_eq!(batch_stats.len(), self.stages.len());
        let m = self.config.batch_norm_momentum;
        for (stage, (mean, var)) in self.stages.iter_mut().zip(batch_stats) {
            for (r, &b) in stage.running_mean.iter_mut().zip(mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, &b) in stage.running_var.iter_mut().zip(var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Eval-mode embedding of a single window; returns (rows, t_m).
    pub fn encode_eval(&self, window: &[f64], window_len: usize) -> Result<(Vec<f64>, usize), ModelError> {
        let mut tape = Tape::new();
        let normalized = min_max_normalize(window, window_len, self.config.in_channels);
        let input = tape.leaf(&[window_len, self.config.in_channels], normalized, false)?;
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bound, input, 1, window_len, Mode::Eval, None)?;
        Ok((tape.data(out.rows).to_vec(), out.t_m))
    }
}

/// Mean-pool over the attention output followed by one linear layer.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub d_out: usize,
    pub classes: usize,
    /// d_out × classes
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(d_out: usize, classes: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / d_out as f64).sqrt();
        ClassifierHead {
            d_out,
            classes,
            w: (0..d_out * classes).map(|_| rng.range(-bound, bound)).collect(),
            b: vec![0.0; classes],
        }
    }
}

pub struct BoundHead {
    pub w: TensorId,
    pub b: TensorId,
}

/// Full single-modality classification pipeline.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub modality: Modality,
    pub encoder: ModalityEncoder,
    pub proj: ProjectionWeights,
    pub head: ClassifierHead,
}

pub struct BoundClassifier {
    pub encoder: BoundEncoder,
    pub proj: BoundProjection,
    pub head: BoundHead,
}

pub struct BatchForward {
    /// n_samples × classes
    pub logits: TensorId,
    /// per-sample K/Q/V on the same tape
    pub triples: Vec<AttentionTriple>,
    pub t_m: usize,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Classifier {
    /// Draw order: conv stages, then projections, then head.
    pub fn init(
        modality: Modality,
        encoder_config: EncoderConfig,
        d_out: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        if d_out == 0 || classes == 0 {
            return Err(ModelError::BadConfig("d_out and classes must be positive".into()));
        }
        let encoder = ModalityEncoder::init(encoder_config, rng)?;
        let d_model = encoder.config.d_model();
        let proj = ProjectionWeights::init(d_model, d_out, rng);
        let head = ClassifierHead::init(d_out, classes, rng);
        Ok(Classifier { modality, encoder, proj, head })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.encoder.mode = mode;
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundClassifier, ModelError> {
        let encoder = self.encoder.bind(tape, requires_grad)?;
        let proj = self.proj.bind(tape, requires_grad)?;
        let head = BoundHead {
            w: tape.leaf(&[self.head.d_out, self.head.classes], self.head.w.clone(), requires_grad)?,
            b: tape.leaf(&[1, self.head.classes], self.head.b.clone(), requires_grad)?,
        };
        Ok(BoundClassifier { encoder, proj, head })
    }

    /// Leaf ids in canonical parameter order, for gradient collection.
    pub fn bound_ids(&self, bound: &BoundClassifier) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for s in &bound.encoder.stages {
            ids.extend([s.w, s.b, s.gamma, s.beta]);
        }
        ids.extend([bound.proj.w_k, bound.proj.w_q, bound.proj.w_v]);
        ids.extend([bound.head.w, bound.head.b]);
        ids
    }

    /// Mutable trainable blocks in the same canonical order as
    /// [`Classifier::bound_ids`].
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        for s in &mut self.encoder.stages {
            f(&mut s.w);
            f(&mut s.b);
            f(&mut s.gamma);
            f(&mut s.beta);
        }
        f(&mut self.proj.w_k);
        f(&mut self.proj.w_q);
        f(&mut self.proj.w_v);
        f(&mut self.head.w);
        f(&mut self.head.b);
    }

    pub fn trainable_count(&self) -> usize {
        self.encoder.stages.len() * 4 + 5
    }

    /// Stack, normalize and run a batch of raw windows.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &BoundClassifier,
        windows: &[&[f64]],
        window_len: usize,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<BatchForward, ModelError> {
        let n = windows.len();
        if n == 0 {
            return Err(ModelError::BadConfig("empty batch".into()));
        }
        let c_in = self.encoder.config.in_channels;
        let mut stacked = Vec::with_capacity(n * window_len * c_in);
        for w in windows {
            if w.len() != window_len * c_in {
                return Err(ModelError::BadConfig(format!(
                    "window has {} values, expected {}",
                    w.len(),
                    window_len * c_in
                )));
            }
            stacked.extend(min_max_normalize(w, window_len, c_in));
        }
        let input = tape.leaf(&[n * window_len, c_in], stacked, false)?;
        let enc = self
            .encoder
            .forward(tape, &bound.encoder, input, n, window_len, mode, rng)?;

        let mut triples = Vec::with_capacity(n);
        let mut logits_rows = Vec::with_capacity(n);
        for s in 0..n {
            let e = tape.slice_rows(enc.rows, s * enc.t_m, enc.t_m)?;
            let triple = attention::project(tape, e, &bound.proj)?;
            let attended = attention::self_attention(tape, &triple)?;
            let pooled = tape.mean_over_rows(attended)?;
            let scores = tape.matmul(pooled, bound.head.w)?;
            let logits = tape.add(scores, bound.head.b)?;
            triples.push(triple);
            logits_rows.push(logits);
        }
        let logits = tape.concat_rows(&logits_rows)?;
        Ok(BatchForward {
            logits,
            triples,
            t_m: enc.t_m,
            batch_stats: enc.batch_stats,
        })
    }

    /// Eval-mode logits for a batch; deterministic, no gradients.
    pub fn predict_batch(
        &self,
        windows: &[&[f64]],
        window_len: usize,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward_batch(&mut tape, &bound, windows, window_len, Mode::Eval, None)?;
        let classes = self.head.classes;
        let data = tape.data(out.logits);
        Ok((0..windows.len())
            .map(|i| data[i * classes..(i + 1) * classes].to_vec())
            .collect())
    }

    /// Eval-mode logits for one window.
    pub fn predict(&self, window: &[f64], window_len: usize) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_batch(&[window], window_len)?.remove(0))
    }

    // ── Checkpointing ────────────────────────────────────────────────

    fn blocks(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut blocks = Vec::new();
        for (i, s) in self.encoder.stages.iter().enumerate() {
            blocks.push((format!("enc{i}.w"), vec![s.kernel * s.in_channels, s.out_channels], s.w.clone()));
            blocks.push((format!("enc{i}.b"), vec![1, s.out_channels], s.b.clone()));
            blocks.push((format!("enc{i}.gamma"), vec![1, s.out_channels], s.gamma.clone()));
            blocks.push((format!("enc{i}.beta"), vec![1, s.out_channels], s.beta.clone()));
            blocks.push((format!("enc{i}.running_mean"), vec![1, s.out_channels], s.running_mean.clone()));
            blocks.push((format!("enc{i}.running_var"), vec![1, s.out_channels], s.running_var.clone()));
        }
        let pd = vec![self.proj.d_model, self.proj.d_out];
        blocks.push(("proj.w_k".into(), pd.clone(), self.proj.w_k.clone()));
        blocks.push(("proj.w_q".into(), pd.clone(), self.proj.w_q.clone()));
        blocks.push(("proj.w_v".into(), pd, self.proj.w_v.clone()));
        blocks.push(("head.w".into(), vec![self.head.d_out, self.head.classes], self.head.w.clone()));
        blocks.push(("head.b".into(), vec![1, self.head.classes], self.head.b.clone()));
        blocks
    }

    pub fn to_bytes(&self, config_hash: u64) -> Vec<u8> {
        let meta = CheckpointMeta {
            modality: self.modality,
            encoder: self.encoder.config.clone(),
            d_out: self.proj.d_out,
            classes: self.head.classes,
        };
        let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&config_hash.to_le_bytes());
        buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_json);
        let blocks = self.blocks();
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Parameter digest: stable across save/load, independent of the
    /// config hash recorded in the file.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.to_bytes(0))
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<(), ModelError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes(config_hash))?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<(Classifier, u64), ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Classifier::from_bytes(&bytes, expected_hash)
    }

    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<(Classifier, u64), ModelError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *pos + n > bytes.len() {
                return Err(ModelError::Corrupt("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(ModelError::Corrupt(format!("unsupported version {version}")));
        }
        let stored_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        if let Some(expected) = expected_hash {
            if stored_hash != expected {
                return Err(ModelError::Corrupt(format!(
                    "config hash mismatch: checkpoint has {stored_hash:016x}, expected {expected:016x}"
                )));
            }
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)
            .map_err(|e| ModelError::Corrupt(format!("bad metadata: {e}")))?;

        let mut model = Classifier::init(
            meta.modality,
            meta.encoder,
            meta.d_out,
            meta.classes,
            &mut Rng::new(0),
        )?;
        let n_blocks = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let expected_blocks = model.blocks();
        if n_blocks != expected_blocks.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} blocks, found {n_blocks}",
                expected_blocks.len()
            )));
        }
        let mut loaded = Vec::with_capacity(n_blocks);
        for (want_name, want_shape, _) in &expected_blocks {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| ModelError::Corrupt("bad block name".into()))?;
            if &name != want_name {
                return Err(ModelError::Corrupt(format!(
                    "block order mismatch: got {name}, expected {want_name}"
                )));
            }
            let ndims = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            if &shape != want_shape {
                return Err(ModelError::Corrupt(format!(
                    "block {name} has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            loaded.push(data);
        }
        if pos != bytes.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        model.assign_blocks(loaded);
        model.set_mode(Mode::Eval);
        Ok((model, stored_hash))
    }

    fn assign_blocks(&mut self, mut blocks: Vec<Vec<f64>>) {
        let mut it = blocks.drain(..);
        for s in &mut self.encoder.stages {
            s.w = it.next().unwrap();
            s.b = it.next().unwrap();
            s.gamma = it.next().unwrap();
            s.beta = it.next().unwrap();
            s.running_mean = it.next().unwrap();
            s.running_var = it.next().unwrap();
        }
        self.proj.w_k = it.next().unwrap();
        self.proj.w_q = it.next().unwrap();
        self.proj.w_v = it.next().unwrap();
        self.head.w = it.next().unwrap();
        self.head.b = it.next().unwrap();
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    modality: Modality,
    encoder: EncoderConfig,
    d_out: usize,
    classes: usize,
}
