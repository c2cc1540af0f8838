//! Training objective: cross-entropy plus the λ-weighted alignment loss
//! between normalized attention signatures, optionally gated per sample by
//! whether the frozen source classified that sample correctly.

use crate::attention::AttentionSignature;
use crate::autodiff::{AutodiffError, Tape, TensorId};

/// Weighting and guards for the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// non-negative weight on the alignment term
    pub lambda: f64,
    /// guard for normalizing near-zero signatures
    pub norm_epsilon: f64,
    /// gate alignment by source correctness
    pub masking_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            norm_epsilon: 1e-12,
            masking_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(AutodiffError::InvalidArg {
                op: "loss_config",
                detail: format!("lambda must be non-negative, got {}", self.lambda),
            });
        }
        if self.norm_epsilon <= 0.0 {
            return Err(AutodiffError::InvalidArg {
                op: "loss_config",
                detail: format!("norm_epsilon must be positive, got {}", self.norm_epsilon),
            });
        }
        Ok(())
    }
}

/// Per-sample bits: 1 iff the frozen source's argmax equals the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMask {
    pub bits: Vec<bool>,
}

impl CorrectnessMask {
    pub fn all_set(n: usize) -> Self {
        CorrectnessMask { bits: vec![true; n] }
    }

    pub fn count_in(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One batch's objective decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_ca: f64,
    pub lambda: f64,
    pub total: f64,
    pub masked_in_count: usize,
}

/// Divide by max(Frobenius norm, eps); plain-matrix variant for the frozen
/// source side and for analysis oracles.
pub fn normalize_signature(sig: &AttentionSignature, eps: f64) -> AttentionSignature {
    let d = sig.frobenius_norm().max(eps);
    AttentionSignature {
        d_out: sig.d_out,
        data: sig.data.iter().map(|v| v / d).collect(),
    }
}

/// ‖norm(sig_b) − norm(sig_a)‖_F on the tape. Gradients flow only into
/// sig_b; the source signature enters as a constant.
pub fn cross_attention_loss(
    tape: &mut Tape,
    sig_b: TensorId,
    sig_a: &AttentionSignature,
    eps: f64,
) -> Result<TensorId, AutodiffError> {
    let shape = tape.shape(sig_b).to_vec();
    if shape != [sig_a.d_out, sig_a.d_out] {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_attention_loss",
            lhs: shape,
            rhs: vec![sig_a.d_out, sig_a.d_out],
        });
    }
    let a_const = tape.constant(&shape, sig_a.data.clone())?;
    let a_norm = tape.normalize_frobenius(a_const, eps)?;
    let b_norm = tape.normalize_frobenius(sig_b, eps)?;
    let diff = tape.sub(b_norm, a_norm)?;
    tape.frobenius_norm(diff)
}

/// Mean of per-sample alignment losses over masked-in samples; zero scalar
/// when every bit is off. Returns the loss node and the masked-in count.
pub fn masked_cross_attention_loss(
    tape: &mut Tape,
    sig_b: &[TensorId],
    sig_a: &[AttentionSignature],
    mask: &CorrectnessMask,
    eps: f64,
) -> Result<(TensorId, usize), AutodiffError> {
    if sig_b.len() != sig_a.len() || sig_b.len() != mask.bits.len() {
        return Err(AutodiffError::BadLength {
            expected: mask.bits.len(),
            got: sig_b.len(),
        });
    }
    let mut acc: Option<TensorId> = None;
    let mut count = 0usize;
    for ((&b, a), &bit) in sig_b.iter().zip(sig_a).zip(&mask.bits) {
        if !bit {
            continue;
        }
        let term = cross_attention_loss(tape, b, a, eps)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
        count += 1;
    }
    match acc {
        Some(sum) => {
            let mean = tape.scale(sum, 1.0 / count as f64)?;
            Ok((mean, count))
        }
        None => Ok((tape.scalar_constant(0.0), 0)),
    }
}

/// Mean negative log-likelihood of the labels under row-softmax logits.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
) -> Result<TensorId, AutodiffError> {
    tape.cross_entropy(logits, labels)
}

/// total = L_CE + λ·L_CA. `l_ca` of None means the alignment branch was
/// not built this step (λ = 0 or nothing masked in); it contributes an
/// exact zero.
pub fn total_loss(
    tape: &mut Tape,
    l_ce: TensorId,
    l_ca: Option<TensorId>,
    masked_in_count: usize,
    cfg: &LossConfig,
) -> Result<(TensorId, LossBreakdown), AutodiffError> {
    cfg.validate()?;
    let (total, l_ca_val) = match l_ca {
        Some(ca) => {
            let weighted = tape.scale(ca, cfg.lambda)?;
            (tape.add(l_ce, weighted)?, tape.scalar(ca))
        }
        None => (l_ce, 0.0),
    };
    let breakdown = LossBreakdown {
        l_ce: tape.scalar(l_ce),
        l_ca: l_ca_val,
        lambda: cfg.lambda,
        total: tape.scalar(total),
        masked_in_count,
    };
    Ok((total, breakdown))
}

/// Bit n = 1 iff argmax(source_logits row n) == labels[n]; argmax ties
/// resolve to the lowest class index.
pub fn compute_mask(
    source_logits: &[f64],
    classes: usize,
    labels: &[usize],
) -> Result<CorrectnessMask, AutodiffError> {
    if classes == 0 || source_logits.len() != labels.len() * classes {
        return Err(AutodiffError::BadLength {
            expected: labels.len() * classes,
            got: source_logits.len(),
        });
    }
    let mut bits = Vec::with_capacity(labels.len());
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let row = &source_logits[n * classes..(n + 1) * classes];
        bits.push(argmax(row) == label);
    }
    Ok(CorrectnessMask { bits })
}

/// Index of the largest entry; first occurrence wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
