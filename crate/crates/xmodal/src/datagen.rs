//! Synthetic paired-modality dataset: two synchronized sensor views of one
//! latent activity trajectory, with per-subject gain/phase structure so
//! subject-disjoint (OOD) splits mean something.
//!
//! Modality A is the rich view (more channels, higher SNR); modality B is
//! the weak one. Everything is a pure function of the config: class shapes,
//! subject profiles and the mixing matrices derive from the config seed,
//! and per-sample variation is additive noise only, so in the snr → ∞
//! limit each (class, subject) cell collapses to one deterministic signal.

use crate::rng::{fnv1a64, Rng};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const LATENT_CHANNELS: usize = 3;
const FILE_MAGIC: &[u8; 4] = b"XMDS";
const FILE_VERSION: u32 = 1;

/// Which sensor view a pipeline consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => write!(f, "a"),
            Modality::B => write!(f, "b"),
        }
    }
}

#[derive(Debug)]
pub enum DatagenError {
    BadConfig(String),
    InsufficientSubjects { have: usize, need: usize },
    WindowTooLong { window: usize, signal: usize },
    Io(std::io::Error),
    Corrupt(String),
}

impl fmt::Display for DatagenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatagenError::BadConfig(s) => write!(f, "invalid dataset config: {s}"),
            DatagenError::InsufficientSubjects { have, need } => {
                write!(f, "need at least {need} subjects for a subject-disjoint split, have {have}")
            }
            DatagenError::WindowTooLong { window, signal } => {
                write!(f, "window {window} longer than signal {signal}")
            }
            DatagenError::Io(e) => write!(f, "io error: {e}"),
            DatagenError::Corrupt(s) => write!(f, "corrupt dataset file: {s}"),
        }
    }
}

impl std::error::Error for DatagenError {}

impl From<std::io::Error> for DatagenError {
    fn from(e: std::io::Error) -> Self {
        DatagenError::Io(e)
    }
}

/// Generator parameters. `class_weights` is an optional imbalance knob
/// (relative samples per class); the shipped defaults leave it unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub subjects: usize,
    pub samples_per_cell: usize,
    pub channels_a: usize,
    pub channels_b: usize,
    pub t_len: usize,
    pub window_len: usize,
    pub stride: usize,
    pub snr_a: f64,
    pub snr_b: f64,
    pub seed: u64,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl DatasetConfig {
    /// Desk-scale defaults: 8 activity classes, 10 subjects, a 12-channel
    /// strong view and a 6-channel weak view.
    pub fn default_synthetic() -> Self {
        DatasetConfig {
            classes: 8,
            subjects: 10,
            samples_per_cell: 6,
            channels_a: 12,
            channels_b: 6,
            t_len: 140,
            window_len: 70,
            stride: 70,
            snr_a: 6.0,
            snr_b: 0.28,
            seed: 11,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let positive = [
            ("classes", self.classes),
            ("subjects", self.subjects),
            ("samples_per_cell", self.samples_per_cell),
            ("channels_a", self.channels_a),
            ("channels_b", self.channels_b),
            ("t_len", self.t_len),
            ("window_len", self.window_len),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DatagenError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(self.snr_a > 0.0 && self.snr_b > 0.0) {
            return Err(DatagenError::BadConfig("snr values must be positive".into()));
        }
        if self.window_len > self.t_len {
            return Err(DatagenError::WindowTooLong {
                window: self.window_len,
                signal: self.t_len,
            });
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes {
                return Err(DatagenError::BadConfig(format!(
                    "class_weights has {} entries for {} classes",
                    w.len(),
                    self.classes
                )));
            }
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err(DatagenError::BadConfig("class_weights must be positive".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waveform {
    Sine,
    Triangle,
    Pulse,
}

impl Waveform {
    fn eval(self, x: f64) -> f64 {
        match self {
            Waveform::Sine => x.sin(),
            Waveform::Triangle => 2.0 / std::f64::consts::PI * x.sin().asin(),
            Waveform::Pulse => (3.0 * x.sin()).tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tone {
    pub freq: f64,
    pub amp: f64,
    pub shape: Waveform,
}

/// Latent parameters of one activity class.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityClass {
    pub id: usize,
    pub tones: Vec<Tone>,
    pub envelope_rate: f64,
    pub envelope_depth: f64,
}

/// Per-subject rendering of the latent trajectory.
#[derive(Debug, Clone)]
pub struct SubjectProfile {
    pub subject_id: usize,
    pub gains_a: Vec<f64>,
    pub gains_b: Vec<f64>,
    pub phase: f64,
    pub noise_scale: f64,
}

/// Synchronized raw signals from both modalities. `sample_id` is a nonce
/// that travels with the sample through splits and windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub sample_id: u64,
    pub label: usize,
    pub subject: usize,
    /// t_len × channels_a, row-major over time
    pub raw_a: Vec<f64>,
    /// t_len × channels_b
    pub raw_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub config_hash: u64,
    pub samples: Vec<PairedSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// subjects may appear in every partition
    Id,
    /// train/val/test subject sets are pairwise disjoint
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0) {
            return Err(DatagenError::BadConfig("split ratios must be positive".into()));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatagenError::BadConfig(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// A window cut jointly from both modalities of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub sample_id: u64,
    pub label: usize,
    pub subject: usize,
    pub start: usize,
    pub t_len: usize,
    pub raw_a: Vec<f64>,
    pub raw_b: Vec<f64>,
}

// ── Derived generator state ──────────────────────────────────────────

pub fn class_params(cfg: &DatasetConfig) -> Vec<ActivityClass> {
    let mut rng = Rng::new(cfg.seed).derive(0x01);
    (0..cfg.classes)
        .map(|c| {
            let shapes = [Waveform::Sine, Waveform::Triangle, Waveform::Pulse];
            let tones = (0..LATENT_CHANNELS)
                .map(|j| Tone {
                    freq: 1.0 + c as f64 * 1.6 + j as f64 * 2.3 + rng.range(0.0, 0.25),
                    amp: rng.range(0.6, 1.2),
                    shape: shapes[(c + j) % 3],
                })
                .collect();
            ActivityClass {
                id: c,
                tones,
                envelope_rate: 0.5 + c as f64 * 0.35 + rng.range(0.0, 0.2),
                envelope_depth: rng.range(0.2, 0.5),
            }
        })
        .collect()
}

pub fn subject_params(cfg: &DatasetConfig) -> Vec<SubjectProfile> {
    let mut rng = Rng::new(cfg.seed).derive(0x02);
    (0..cfg.subjects)
        .map(|s| SubjectProfile {
            subject_id: s,
            gains_a: (0..cfg.channels_a).map(|_| rng.range(0.8, 1.2)).collect(),
            gains_b: (0..cfg.channels_b).map(|_| rng.range(0.45, 1.75)).collect(),
            // a narrow phase band perturbs class geometry without erasing it
            phase: rng.range(0.0, 0.3),
            noise_scale: rng.range(0.8, 1.25),
        })
        .collect()
}

/// Fixed random linear maps from latent channels to observed channels,
/// seeded by the config (not the run).
fn mixing_matrix(cfg: &DatasetConfig, channels: usize, tag: u64) -> Vec<f64> {
    let mut rng = Rng::new(cfg.seed).derive(tag);
    let scale = 1.0 / (LATENT_CHANNELS as f64).sqrt();
    (0..LATENT_CHANNELS * channels)
        .map(|_| rng.normal() * scale)
        .collect()
}

fn latent_at(class: &ActivityClass, subject: &SubjectProfile, t: usize, t_len: usize) -> [f64; LATENT_CHANNELS] {
    let tau = t as f64 / t_len as f64;
    let env = 1.0
        + class.envelope_depth
            * (2.0 * std::f64::consts::PI * class.envelope_rate * tau + subject.phase * 0.5).sin();
    let mut z = [0.0; LATENT_CHANNELS];
    for (j, tone) in class.tones.iter().enumerate() {
        let x = 2.0 * std::f64::consts::PI * tone.freq * tau + subject.phase;
        z[j] = tone.amp * tone.shape.eval(x) * env;
    }
    z
}

// ── Generation ───────────────────────────────────────────────────────

/// Balanced synthetic set: `samples_per_cell` samples per (class, subject)
/// cell (scaled by `class_weights` when set). Pure in the config.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset, DatagenError> {
    cfg.validate()?;
    let classes = class_params(cfg);
    let subjects = subject_params(cfg);
    let mix_a = mixing_matrix(cfg, cfg.channels_a, 0x03);
    let mix_b = mixing_matrix(cfg, cfg.channels_b, 0x04);
    let mut noise_rng = Rng::new(cfg.seed).derive(0x05);

    let mut samples = Vec::new();
    let mut sample_id = 0u64;
    for class in &classes {
        let per_cell = match &cfg.class_weights {
            Some(w) => ((cfg.samples_per_cell as f64 * w[class.id]).round() as usize).max(1),
            None => cfg.samples_per_cell,
        };
        for subject in &subjects {
            for _ in 0..per_cell {
                let mut raw_a = vec![0.0; cfg.t_len * cfg.channels_a];
                let mut raw_b = vec![0.0; cfg.t_len * cfg.channels_b];
                for t in 0..cfg.t_len {
                    let z = latent_at(class, subject, t, cfg.t_len);
                    for c in 0..cfg.channels_a {
                        let mut v = 0.0;
                        for (j, &zj) in z.iter().enumerate() {
                            v += zj * mix_a[j * cfg.channels_a + c];
                        }
                        v *= subject.gains_a[c];
                        v += noise_rng.normal() * subject.noise_scale / cfg.snr_a;
                        raw_a[t * cfg.channels_a + c] = v;
                    }
                    for c in 0..cfg.channels_b {
                        let mut v = 0.0;
                        for (j, &zj) in z.iter().enumerate() {
                            v += zj * mix_b[j * cfg.channels_b + c];
                        }
                        v *= subject.gains_b[c];
                        v += noise_rng.normal() * subject.noise_scale / cfg.snr_b;
                        raw_b[t * cfg.channels_b + c] = v;
                    }
                }
                samples.push(PairedSample {
                    sample_id,
                    label: class.id,
                    subject: subject.subject_id,
                    raw_a,
                    raw_b,
                });
                sample_id += 1;
            }
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        samples,
    })
}

// ── Splitting ────────────────────────────────────────────────────────

/// Allocate `total` items to three parts by ratio, largest remainder.
fn allocate(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut short = total - counts.iter().sum::<usize>();
    // hand leftovers to the largest fractional parts; ties by index
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Partition samples into train/val/test. ID splits stratify by label;
/// OOD splits partition subjects and move whole subjects.
pub fn split(
    dataset: &Dataset,
    spec: &SplitSpec,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>, Vec<PairedSample>), DatagenError> {
    spec.validate()?;
    let ratios = [spec.train, spec.val, spec.test];
    let mut rng = Rng::new(spec.seed).derive(0x10);
    let mut parts: [Vec<PairedSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    match spec.kind {
        SplitKind::Id => {
            let max_label = dataset.samples.iter().map(|s| s.label).max().unwrap_or(0);
            for label in 0..=max_label {
                let mut idx: Vec<usize> = dataset
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label == label)
                    .map(|(i, _)| i)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                rng.shuffle(&mut idx);
                let counts = allocate(idx.len(), ratios);
                let mut cursor = 0;
                for (p, &count) in counts.iter().enumerate() {
                    for &i in &idx[cursor..cursor + count] {
                        parts[p].push(dataset.samples[i].clone());
                    }
                    cursor += count;
                }
            }
        }
        SplitKind::Ood => {
            let mut subjects: Vec<usize> = {
                let mut s: Vec<usize> = dataset.samples.iter().map(|x| x.subject).collect();
                s.sort_unstable();
                s.dedup();
                s
            };
            if subjects.len() < 3 {
                return Err(DatagenError::InsufficientSubjects {
                    have: subjects.len(),
                    need: 3,
                });
            }
            rng.shuffle(&mut subjects);
            let mut counts = allocate(subjects.len(), ratios);
            // every partition must hold at least one subject
            for i in 0..3 {
                while counts[i] == 0 {
                    let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                    counts[donor] -= 1;
                    counts[i] += 1;
                }
            }
            let mut assignment = vec![0usize; subjects.len()];
            let mut cursor = 0;
            for (p, &count) in counts.iter().enumerate() {
                for a in &mut assignment[cursor..cursor + count] {
                    *a = p;
                }
                cursor += count;
            }
            for sample in &dataset.samples {
                let pos = subjects.iter().position(|&s| s == sample.subject).unwrap();
                parts[assignment[pos]].push(sample.clone());
            }
        }
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}

// ── Windowing ────────────────────────────────────────────────────────

/// Cut one sample into floor((T − w)/s) + 1 joint windows.
pub fn window_sample(
    sample: &PairedSample,
    channels_a: usize,
    channels_b: usize,
    window_len: usize,
    stride: usize,
) -> Result<Vec<WindowedSample>, DatagenError> {
    let t_len = sample.raw_a.len() / channels_a;
    if window_len > t_len {
        return Err(DatagenError::WindowTooLong {
            window: window_len,
            signal: t_len,
        });
    }
    if stride == 0 {
        return Err(DatagenError::BadConfig("stride must be at least 1".into()));
    }
    let count = (t_len - window_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        out.push(WindowedSample {
            sample_id: sample.sample_id,
            label: sample.label,
            subject: sample.subject,
            start,
            t_len: window_len,
            raw_a: sample.raw_a[start * channels_a..(start + window_len) * channels_a].to_vec(),
            raw_b: sample.raw_b[start * channels_b..(start + window_len) * channels_b].to_vec(),
        });
    }
    Ok(out)
}

pub fn window_all(
    samples: &[PairedSample],
    cfg: &DatasetConfig,
) -> Result<Vec<WindowedSample>, DatagenError> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(window_sample(
            s,
            cfg.channels_a,
            cfg.channels_b,
            cfg.window_len,
            cfg.stride,
        )?);
    }
    Ok(out)
}

impl WindowedSample {
    pub fn raw(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::A => &self.raw_a,
            Modality::B => &self.raw_b,
        }
    }

    pub fn channels(&self, modality: Modality) -> usize {
        self.raw(modality).len() / self.t_len
    }
}

// ── Columnar split files ─────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize one split: header (version, config hash, seed, geometry)
/// followed by fixed-width sample records.
pub fn encode_split(cfg: &DatasetConfig, samples: &[PairedSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FILE_MAGIC);
    put_u32(&mut buf, FILE_VERSION);
    put_u64(&mut buf, cfg.hash());
    put_u64(&mut buf, cfg.seed);
    put_u64(&mut buf, samples.len() as u64);
    put_u32(&mut buf, cfg.t_len as u32);
    put_u32(&mut buf, cfg.channels_a as u32);
    put_u32(&mut buf, cfg.channels_b as u32);
    put_u32(&mut buf, cfg.classes as u32);
    put_u32(&mut buf, cfg.subjects as u32);
    for s in samples {
        put_u64(&mut buf, s.sample_id);
        put_u32(&mut buf, s.label as u32);
        put_u32(&mut buf, s.subject as u32);
        for &v in s.raw_a.iter().chain(&s.raw_b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn write_split(path: &Path, cfg: &DatasetConfig, samples: &[PairedSample]) -> Result<(), DatagenError> {
    let bytes = encode_split(cfg, samples);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a split and check it against the expected config hash.
pub fn read_split(path: &Path, expected_hash: u64) -> Result<Vec<PairedSample>, DatagenError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_split(&bytes, expected_hash)
}

pub fn decode_split(bytes: &[u8], expected_hash: u64) -> Result<Vec<PairedSample>, DatagenError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DatagenError> {
        if *pos + n > bytes.len() {
            return Err(DatagenError::Corrupt("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let get_u32 = |pos: &mut usize| -> Result<u32, DatagenError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let get_u64 = |pos: &mut usize| -> Result<u64, DatagenError> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != FILE_MAGIC {
        return Err(DatagenError::Corrupt("bad magic".into()));
    }
    let version = get_u32(&mut pos)?;
    if version != FILE_VERSION {
        return Err(DatagenError::Corrupt(format!("unsupported version {version}")));
    }
    let hash = get_u64(&mut pos)?;
    if hash != expected_hash {
        return Err(DatagenError::Corrupt(format!(
            "config hash mismatch: file has {hash:016x}, expected {expected_hash:016x}"
        )));
    }
    let _seed = get_u64(&mut pos)?;
    let n_samples = get_u64(&mut pos)? as usize;
    let t_len = get_u32(&mut pos)? as usize;
    let c_a = get_u32(&mut pos)? as usize;
    let c_b = get_u32(&mut pos)? as usize;
    let _classes = get_u32(&mut pos)?;
    let _subjects = get_u32(&mut pos)?;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let sample_id = get_u64(&mut pos)?;
        let label = get_u32(&mut pos)? as usize;
        let subject = get_u32(&mut pos)? as usize;
        let mut raw_a = Vec::with_capacity(t_len * c_a);
        for _ in 0..t_len * c_a {
            raw_a.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut raw_b = Vec::with_capacity(t_len * c_b);
        for _ in 0..t_len * c_b {
            raw_b.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        samples.push(PairedSample {
            sample_id,
            label,
            subject,
            raw_a,
            raw_b,
        });
    }
    if pos != bytes.len() {
        return Err(DatagenError::Corrupt("trailing bytes".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            classes: 3,
            subjects: 5,
            samples_per_cell: 2,
            channels_a: 4,
            channels_b: 2,
            t_len: 40,
            window_len: 20,
            stride: 20,
            snr_a: 6.0,
            snr_b: 0.28,
            seed: 7,
            class_weights: None,
        }
    }

    #[test]
    fn same_seed_gives_identical_dataset() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        assert_eq!(encode_split(&cfg, &a.samples), encode_split(&cfg, &b.samples));
    }

    #[test]
    fn infinite_snr_collapses_cells() {
        let mut cfg = small_cfg();
        cfg.snr_a = f64::INFINITY;
        cfg.snr_b = f64::INFINITY;
        let ds = generate(&cfg).unwrap();
        // two samples in the same (class, subject) cell are identical
        for pair in ds.samples.chunks(1) {
            let s = &pair[0];
            for other in &ds.samples {
                if other.label == s.label && other.subject == s.subject {
                    assert_eq!(other.raw_a, s.raw_a);
                    assert_eq!(other.raw_b, s.raw_b);
                }
            }
        }
    }

    #[test]
    fn every_cell_has_exactly_samples_per_cell() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        for c in 0..cfg.classes {
            for s in 0..cfg.subjects {
                let n = ds
                    .samples
                    .iter()
                    .filter(|x| x.label == c && x.subject == s)
                    .count();
                assert_eq!(n, cfg.samples_per_cell);
            }
        }
    }

    #[test]
    fn classes_have_distinct_latent_params() {
        let cfg = small_cfg();
        let classes = class_params(&cfg);
        for i in 0..classes.len() {
            for j in i + 1..classes.len() {
                assert_ne!(classes[i].tones, classes[j].tones);
            }
        }
    }

    #[test]
    fn ood_split_subjects_are_disjoint() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let spec = SplitSpec {
            kind: SplitKind::Ood,
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 3,
        };
        let (train, val, test) = split(&ds, &spec).unwrap();
        let subjects = |xs: &[PairedSample]| -> Vec<usize> {
            let mut s: Vec<usize> = xs.iter().map(|x| x.subject).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let (st, sv, se) = (subjects(&train), subjects(&val), subjects(&test));
        assert!(!st.is_empty() && !sv.is_empty() && !se.is_empty());
        for s in &sv {
            assert!(!st.contains(s) && !se.contains(s));
        }
        for s in &se {
            assert!(!st.contains(s));
        }
        assert_eq!(train.len() + val.len() + test.len(), ds.samples.len());
    }

    #[test]
    fn ood_split_needs_three_subjects() {
        let mut cfg = small_cfg();
        cfg.subjects = 2;
        let ds = generate(&cfg).unwrap();
        let spec = SplitSpec {
            kind: SplitKind::Ood,
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 3,
        };
        assert!(matches!(
            split(&ds, &spec),
            Err(DatagenError::InsufficientSubjects { have: 2, need: 3 })
        ));
    }

    #[test]
    fn id_split_sizes_match_ratios() {
        let mut cfg = small_cfg();
        cfg.classes = 5;
        cfg.subjects = 10;
        cfg.samples_per_cell = 20; // 1000 samples
        let ds = generate(&cfg).unwrap();
        let spec = SplitSpec {
            kind: SplitKind::Id,
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 4,
        };
        let (train, val, test) = split(&ds, &spec).unwrap();
        assert!((train.len() as i64 - 800).abs() <= 1, "train {}", train.len());
        assert!((val.len() as i64 - 100).abs() <= 1, "val {}", val.len());
        assert!((test.len() as i64 - 100).abs() <= 1, "test {}", test.len());
        // stratification: per-class train counts within ±1 of ratio·class_total
        for c in 0..cfg.classes {
            let total = ds.samples.iter().filter(|s| s.label == c).count();
            let in_train = train.iter().filter(|s| s.label == c).count();
            let want = 0.8 * total as f64;
            assert!(
                (in_train as f64 - want).abs() <= 1.0,
                "class {c}: {in_train} vs {want}"
            );
        }
    }

    #[test]
    fn window_counts_match_arithmetic() {
        let cfg = small_cfg();
        let mk = |t_len: usize| PairedSample {
            sample_id: 9,
            label: 1,
            subject: 2,
            raw_a: vec![0.5; t_len * cfg.channels_a],
            raw_b: vec![0.5; t_len * cfg.channels_b],
        };
        // T=100, w=70, s=70 → 1 window
        let w = window_sample(&mk(100), cfg.channels_a, cfg.channels_b, 70, 70).unwrap();
        assert_eq!(w.len(), 1);
        // exact fit
        let w = window_sample(&mk(70), cfg.channels_a, cfg.channels_b, 70, 70).unwrap();
        assert_eq!(w.len(), 1);
        // T=130, w=70, s=30 → 3 windows at 0, 30, 60
        let w = window_sample(&mk(130), cfg.channels_a, cfg.channels_b, 70, 30).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().map(|x| x.start).collect::<Vec<_>>(), vec![0, 30, 60]);
        // window longer than signal
        assert!(matches!(
            window_sample(&mk(50), cfg.channels_a, cfg.channels_b, 70, 70),
            Err(DatagenError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn windowing_preserves_pairing() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let windows = window_all(&ds.samples, &cfg).unwrap();
        for w in &windows {
            let parent = &ds.samples[w.sample_id as usize];
            assert_eq!(w.label, parent.label);
            assert_eq!(w.subject, parent.subject);
            // window content matches the parent slice of both modalities
            let a = &parent.raw_a[w.start * cfg.channels_a..(w.start + w.t_len) * cfg.channels_a];
            let b = &parent.raw_b[w.start * cfg.channels_b..(w.start + w.t_len) * cfg.channels_b];
            assert_eq!(w.raw_a.as_slice(), a);
            assert_eq!(w.raw_b.as_slice(), b);
        }
    }

    #[test]
    fn split_roundtrips_through_file_encoding() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let bytes = encode_split(&cfg, &ds.samples);
        let back = decode_split(&bytes, cfg.hash()).unwrap();
        assert_eq!(back, ds.samples);
        // wrong hash is rejected
        assert!(matches!(
            decode_split(&bytes, cfg.hash() ^ 1),
            Err(DatagenError::Corrupt(_))
        ));
    }

    #[test]
    fn nearest_centroid_oracle_attains_expected_bands() {
        // oracle difficulty calibration for the shipped default config:
        // flatten windows, classify by nearest class centroid
        let cfg = DatasetConfig::default_synthetic();
        let ds = generate(&cfg).unwrap();
        let spec = SplitSpec {
            kind: SplitKind::Id,
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 5,
        };
        let (train, _, test) = split(&ds, &spec).unwrap();
        let train_w = window_all(&train, &cfg).unwrap();
        let test_w = window_all(&test, &cfg).unwrap();

        let accuracy = |modality: Modality| -> f64 {
            let dim = test_w[0].raw(modality).len();
            let mut centroids = vec![vec![0.0; dim]; cfg.classes];
            let mut counts = vec![0usize; cfg.classes];
            for w in &train_w {
                counts[w.label] += 1;
                for (acc, &v) in centroids[w.label].iter_mut().zip(w.raw(modality)) {
                    *acc += v;
                }
            }
            for (c, count) in centroids.iter_mut().zip(&counts) {
                for v in c.iter_mut() {
                    *v /= *count as f64;
                }
            }
            let mut hits = 0usize;
            for w in &test_w {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (ci, c) in centroids.iter().enumerate() {
                    let d: f64 = c
                        .iter()
                        .zip(w.raw(modality))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                if best == w.label {
                    hits += 1;
                }
            }
            hits as f64 / test_w.len() as f64
        };

        let acc_a = accuracy(Modality::A);
        let acc_b = accuracy(Modality::B);
        assert!(acc_a >= 0.9, "modality A oracle accuracy {acc_a}");
        assert!((0.4..=0.8).contains(&acc_b), "modality B oracle accuracy {acc_b}");
    }
}
