//! Optimization loops: pretrain the source classifier on its own modality,
//! freeze it, then train the target classifier against cross-entropy plus
//! the λ-weighted signature alignment loss.
//!
//! A run is a pure function of (config, data): the run seed drives weight
//! init, shuffling and dropout through one stream, and the frozen source
//! never touches that stream, so a transfer run that contributes no
//! alignment gradient (λ = 0, or every sample masked out) walks the exact
//! same parameter trajectory as the uni-modal baseline.

use crate::analysis::{macro_metrics, MetricsReport};
use crate::attention::{signature, AttentionSignature};
use crate::autodiff::{AutodiffError, Tape};
use crate::datagen::{Modality, WindowedSample};
use crate::encoder::{Classifier, EncoderConfig, Mode, ModelError};
use crate::losses::{
    self, compute_mask, cross_entropy, masked_cross_attention_loss, total_loss, CorrectnessMask,
    LossBreakdown, LossConfig,
};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

const EVAL_CHUNK: usize = 64;

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Autodiff(AutodiffError),
    Analysis(crate::analysis::AnalysisError),
    NanGradient { block: usize, step: u64 },
    BadConfig(String),
    EmptySplit(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Autodiff(e) => write!(f, "{e}"),
            TrainError::Analysis(e) => write!(f, "{e}"),
            TrainError::NanGradient { block, step } => {
                write!(f, "non-finite gradient in parameter block {block} at step {step}; run aborted")
            }
            TrainError::BadConfig(s) => write!(f, "invalid training config: {s}"),
            TrainError::EmptySplit(which) => write!(f, "{which} split is empty"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Autodiff(e)
    }
}

impl From<crate::analysis::AnalysisError> for TrainError {
    fn from(e: crate::analysis::AnalysisError) -> Self {
        TrainError::Analysis(e)
    }
}

/// One training run's hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub masking_enabled: bool,
    pub seed: u64,
    pub d_out: usize,
    /// diagnostic mode: drop the cross-entropy term, optimize λ·L_CA alone
    #[serde(default)]
    pub alignment_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 5e-4,
            batch_size: 16,
            dropout: 0.8,
            weight_decay: 0.005,
            lambda: 1.0,
            masking_enabled: true,
            seed: 11,
            d_out: 512,
            alignment_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::BadConfig("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadConfig("dropout must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be non-negative".into()));
        }
        if self.d_out == 0 {
            return Err(TrainError::BadConfig("d_out must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments per parameter block, with bias correction and decoupled
/// weight decay (p ← p − lr·wd·p before the Adam delta).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Update every block in place. Gradients must align with the blocks
    /// produced by `visit`; a non-finite gradient aborts with a diagnostic.
    pub fn step_blocks(
        &mut self,
        grads: &[Vec<f64>],
        lr: f64,
        weight_decay: f64,
        visit: &mut dyn FnMut(&mut dyn FnMut(&mut Vec<f64>)),
    ) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NanGradient { block: i, step: self.step });
            }
        }
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut block = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        visit(&mut |params: &mut Vec<f64>| {
            let g = &grads[block];
            let mb = &mut m[block];
            let vb = &mut v[block];
            for j in 0..params.len() {
                params[j] -= lr * weight_decay * params[j];
                mb[j] = beta1 * mb[j] + (1.0 - beta1) * g[j];
                vb[j] = beta2 * vb[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = mb[j] / bc1;
                let v_hat = vb[j] / bc2;
                params[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            block += 1;
        });
        debug_assert_eq!(block, grads.len());
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Single-parameter-vector Adam update, the same rule as
/// [`AdamState::step_blocks`].
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    let g = vec![grads.to_vec()];
    let mut vecs = vec![params.to_vec()];
    state.step_blocks(&g, lr, weight_decay, &mut |f| {
        f(&mut vecs[0]);
    })?;
    params.copy_from_slice(&vecs[0]);
    Ok(())
}

/// Pretrained source pipeline in eval mode with its parameter digest.
#[derive(Debug, Clone)]
pub struct FrozenSource {
    pub model: Classifier,
    pub digest: u64,
}

impl FrozenSource {
    pub fn freeze(mut model: Classifier) -> Self {
        model.set_mode(Mode::Eval);
        let digest = model.digest();
        FrozenSource { model, digest }
    }

    /// Per-sample attention signatures K_AᵀV_A and the correctness mask,
    /// computed in eval mode with no gradients and no RNG draws.
    pub fn signatures_and_mask(
        &self,
        windows: &[&[f64]],
        window_len: usize,
        labels: &[usize],
    ) -> Result<(Vec<AttentionSignature>, CorrectnessMask), TrainError> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false)?;
        let fwd = self
            .model
            .forward_batch(&mut tape, &bound, windows, window_len, Mode::Eval, None)?;
        let mut sigs = Vec::with_capacity(windows.len());
        for triple in &fwd.triples {
            let sig = signature(&mut tape, triple.k, triple.v)?;
            sigs.push(AttentionSignature::from_tape(&tape, sig));
        }
        let logits = tape.data(fwd.logits);
        let mask = compute_mask(logits, self.model.head.classes, labels)?;
        Ok((sigs, mask))
    }
}

/// Per-epoch record; the serialized form carries exactly the loss terms
/// and validation metrics, never wall-clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_ca: f64,
    pub lambda: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    #[serde(skip)]
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    /// every step's loss decomposition, in execution order
    pub steps: Vec<LossBreakdown>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }
}

/// Train a classifier for `modality` on its own windows. With a frozen
/// source and λ > 0 each step also aligns the target's attention
/// signatures to the source's on source-correct samples. Returns the
/// best-validation-F1 checkpoint.
pub fn train_target(
    cfg: &TrainConfig,
    encoder_config: EncoderConfig,
    modality: Modality,
    classes: usize,
    source: Option<&FrozenSource>,
    train: &[WindowedSample],
    val: &[WindowedSample],
    window_len: usize,
) -> Result<(Classifier, RunLog), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut enc_cfg = encoder_config;
    enc_cfg.dropout_rate = cfg.dropout;
    let mut model = Classifier::init(modality, enc_cfg, cfg.d_out, classes, &mut rng)?;
    model.set_mode(Mode::Train);
    let source_modality = source.map(|s| s.model.modality);

    let mut adam = AdamState::new();
    let mut log = RunLog::default();
    let mut best: Option<(f64, Classifier)> = None;
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        norm_epsilon: 1e-12,
        masking_enabled: cfg.masking_enabled,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64); // l_ce, l_ca, total
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                continue; // drop-last keeps batch-norm statistics stable
            }
            let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|w| w.label).collect();
            let target_raws: Vec<&[f64]> = batch.iter().map(|w| w.raw(modality)).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let fwd = model.forward_batch(
                &mut tape,
                &bound,
                &target_raws,
                window_len,
                Mode::Train,
                Some(&mut rng),
            )?;
            let l_ce = cross_entropy(&mut tape, fwd.logits, &labels)?;

            // the alignment branch is built only when it can contribute:
            // λ = 0 or an empty mask must leave the tape identical to a
            // source-free run
            let mut l_ca = None;
            let mut masked_in = 0usize;
            if let Some(src) = source {
                if cfg.lambda > 0.0 {
                    let src_raws: Vec<&[f64]> =
                        batch.iter().map(|w| w.raw(source_modality.unwrap())).collect();
                    let (sigs_a, mask) =
                        src.signatures_and_mask(&src_raws, window_len, &labels)?;
                    let mask = if cfg.masking_enabled {
                        mask
                    } else {
                        CorrectnessMask::all_set(batch.len())
                    };
                    if mask.count_in() > 0 {
                        let mut sig_ids = Vec::with_capacity(batch.len());
                        for triple in &fwd.triples {
                            sig_ids.push(signature(&mut tape, triple.k, triple.v)?);
                        }
                        let (ca, count) = masked_cross_attention_loss(
                            &mut tape,
                            &sig_ids,
                            &sigs_a,
                            &mask,
                            loss_cfg.norm_epsilon,
                        )?;
                        l_ca = Some(ca);
                        masked_in = count;
                    }
                }
            }

            let (root, breakdown) = if cfg.alignment_only {
                let ca = l_ca.ok_or_else(|| {
                    TrainError::BadConfig(
                        "alignment_only needs a frozen source, λ > 0 and masked-in samples".into(),
                    )
                })?;
                let weighted = tape.scale(ca, cfg.lambda)?;
                let bd = LossBreakdown {
                    l_ce: tape.scalar(l_ce),
                    l_ca: tape.scalar(ca),
                    lambda: cfg.lambda,
                    total: tape.scalar(weighted),
                    masked_in_count: masked_in,
                };
                (weighted, bd)
            } else {
                total_loss(&mut tape, l_ce, l_ca, masked_in, &loss_cfg)?
            };

            tape.backward(root)?;
            let grads: Vec<Vec<f64>> = model
                .bound_ids(&bound)
                .iter()
                .map(|id| tape.grad(*id).expect("backward populates leaves").to_vec())
                .collect();
            adam.step_blocks(&grads, cfg.learning_rate, cfg.weight_decay, &mut |f| {
                model.visit_trainable_mut(f)
            })?;
            model.encoder.update_running_stats(&fwd.batch_stats);

            sums.0 += breakdown.l_ce;
            sums.1 += breakdown.l_ca;
            sums.2 += breakdown.total;
            steps += 1;
            log.steps.push(breakdown);
        }
        if steps == 0 {
            return Err(TrainError::BadConfig(format!(
                "batch_size {} exceeds the {}-window training split",
                cfg.batch_size,
                train.len()
            )));
        }

        let metrics = evaluate(&model, val, window_len)?;
        let n = steps as f64;
        log.epochs.push(EpochRecord {
            epoch,
            l_ce: sums.0 / n,
            l_ca: sums.1 / n,
            lambda: cfg.lambda,
            total: sums.2 / n,
            val_accuracy: metrics.accuracy,
            val_precision: metrics.macro_precision,
            val_recall: metrics.macro_recall,
            val_f1: metrics.macro_f1,
            wall_ms: started.elapsed().as_millis(),
        });
        let is_best = match &best {
            Some((f1, _)) => metrics.macro_f1 > *f1,
            None => true,
        };
        if is_best {
            log.best_epoch = epoch;
            log.best_val_f1 = metrics.macro_f1;
            best = Some((metrics.macro_f1, model.clone()));
        }
    }

    let (_, mut best_model) = best.expect("at least one epoch ran");
    best_model.set_mode(Mode::Eval);
    Ok((best_model, log))
}

/// Cross-entropy-only pretraining of the source classifier, frozen at the
/// best validation F1.
pub fn pretrain_source(
    cfg: &TrainConfig,
    encoder_config: EncoderConfig,
    modality: Modality,
    classes: usize,
    train: &[WindowedSample],
    val: &[WindowedSample],
    window_len: usize,
) -> Result<(FrozenSource, RunLog), TrainError> {
    let mut ce_only = cfg.clone();
    ce_only.lambda = 0.0;
    ce_only.alignment_only = false;
    let (model, log) = train_target(
        &ce_only,
        encoder_config,
        modality,
        classes,
        None,
        train,
        val,
        window_len,
    )?;
    Ok((FrozenSource::freeze(model), log))
}

/// Full eval-mode pass over a split; consumes only the model's own
/// modality and mutates nothing.
pub fn evaluate(
    model: &Classifier,
    windows: &[WindowedSample],
    window_len: usize,
) -> Result<MetricsReport, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let classes = model.head.classes;
    let mut preds = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let raws: Vec<&[f64]> = chunk.iter().map(|w| w.raw(model.modality)).collect();
        let logits = model.predict_batch(&raws, window_len)?;
        for (row, w) in logits.iter().zip(chunk) {
            preds.push(losses::argmax(row));
            labels.push(w.label);
        }
    }
    Ok(macro_metrics(&preds, &labels, classes)?)
}

/// The shipped desk-scale experiment: dataset, split and per-model
/// training configs that the command-line defaults mirror.
#[derive(Debug, Clone)]
pub struct ExperimentProfile {
    pub dataset: crate::datagen::DatasetConfig,
    pub split: crate::datagen::SplitSpec,
    pub source_encoder: EncoderConfig,
    pub target_encoder: EncoderConfig,
    pub source_train: TrainConfig,
    pub target_train: TrainConfig,
}

impl ExperimentProfile {
    pub fn default_synthetic() -> Self {
        let dataset = crate::datagen::DatasetConfig::default_synthetic();
        let split = crate::datagen::SplitSpec {
            kind: crate::datagen::SplitKind::Id,
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 11,
        };
        let source_train = TrainConfig {
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: 16,
            dropout: 0.1,
            weight_decay: 1e-3,
            lambda: 0.0,
            masking_enabled: false,
            seed: 11,
            d_out: 16,
            alignment_only: false,
        };
        let target_train = TrainConfig {
            epochs: 40,
            learning_rate: 5e-3,
            batch_size: 16,
            dropout: 0.0,
            weight_decay: 5e-3,
            lambda: 1.0,
            masking_enabled: true,
            seed: 17,
            d_out: 16,
            alignment_only: false,
        };
        ExperimentProfile {
            dataset,
            split,
            source_encoder: EncoderConfig::default_stack(12),
            target_encoder: EncoderConfig::default_stack(6),
            source_train,
            target_train,
        }
    }
}
