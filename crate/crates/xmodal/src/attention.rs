//! Single-head attention: K/Q/V projections, self- and cross-attention,
//! and the d_out×d_out signature KᵀV consumed by the alignment loss.
//!
//! Attention operates per sample; batches iterate. The 1/√d_out scaling
//! lives inside self/cross attention but deliberately NOT inside
//! [`signature`] — the alignment loss compares the raw products.

use crate::autodiff::{AutodiffError, Tape, TensorId};
use crate::rng::Rng;

/// Projection geometry for one modality. d_k = d_v = d_out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// embedding width coming out of the encoder
    pub d_model: usize,
    /// shared width of the key/query/value spaces
    pub d_out: usize,
    /// sequence length produced by the encoder
    pub sl: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.d_model == 0 || self.d_out == 0 || self.sl == 0 {
            return Err(AutodiffError::InvalidArg {
                op: "attention_config",
                detail: format!(
                    "all dimensions must be positive: d_model={} d_out={} sl={}",
                    self.d_model, self.d_out, self.sl
                ),
            });
        }
        Ok(())
    }
}

/// Learnable K/Q/V projection matrices, stored off-tape.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub d_model: usize,
    pub d_out: usize,
    pub w_k: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl ProjectionWeights {
    /// Uniform init in ±√(1/fan_in) with fan_in = d_model.
    pub fn init(d_model: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / d_model as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.range(-bound, bound)).collect()
        };
        let n = d_model * d_out;
        ProjectionWeights {
            d_model,
            d_out,
            w_k: draw(n),
            w_q: draw(n),
            w_v: draw(n),
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundProjection, AutodiffError> {
        let shape = [self.d_model, self.d_out];
        Ok(BoundProjection {
            w_k: tape.leaf(&shape, self.w_k.clone(), requires_grad)?,
            w_q: tape.leaf(&shape, self.w_q.clone(), requires_grad)?,
            w_v: tape.leaf(&shape, self.w_v.clone(), requires_grad)?,
        })
    }
}

/// Projection weights placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub w_k: TensorId,
    pub w_q: TensorId,
    pub w_v: TensorId,
}

/// K, Q, V for one sample, all SL×d_out on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTriple {
    pub k: TensorId,
    pub q: TensorId,
    pub v: TensorId,
}

/// Signature matrix KᵀV evaluated off-tape (frozen source side).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSignature {
    pub d_out: usize,
    pub data: Vec<f64>,
}

impl AttentionSignature {
    pub fn from_tape(tape: &Tape, id: TensorId) -> Self {
        let shape = tape.shape(id);
        debug_assert_eq!(shape.len(), 2);
        debug_assert_eq!(shape[0], shape[1]);
        AttentionSignature {
            d_out: shape[0],
            data: tape.data(id).to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// K = E·W_K, Q = E·W_Q, V = E·W_V.
pub fn project(
    tape: &mut Tape,
    e: TensorId,
    w: &BoundProjection,
) -> Result<AttentionTriple, AutodiffError> {
    Ok(AttentionTriple {
        k: tape.matmul(e, w.w_k)?,
        q: tape.matmul(e, w.w_q)?,
        v: tape.matmul(e, w.w_v)?,
    })
}

/// softmax_rows(Q·Kᵀ/√d_out)·V. Output keeps the input sequence length.
pub fn self_attention(tape: &mut Tape, t: &AttentionTriple) -> Result<TensorId, AutodiffError> {
    cross_attention(tape, t.q, t.k, t.v)
}

/// softmax_rows(Q_B·K_Aᵀ/√d_out)·V_A: queries from the target sequence,
/// keys and values from the source. Output leading dim is the target SL.
pub fn cross_attention(
    tape: &mut Tape,
    q_b: TensorId,
    k_a: TensorId,
    v_a: TensorId,
) -> Result<TensorId, AutodiffError> {
    let d_out = tape.shape(q_b)[1];
    if tape.shape(k_a)[1] != d_out {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_attention",
            lhs: tape.shape(q_b).to_vec(),
            rhs: tape.shape(k_a).to_vec(),
        });
    }
    if tape.shape(k_a)[0] != tape.shape(v_a)[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_attention",
            lhs: tape.shape(k_a).to_vec(),
            rhs: tape.shape(v_a).to_vec(),
        });
    }
    let kt = tape.transpose(k_a)?;
    let scores = tape.matmul(q_b, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_out as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v_a)
}

/// Kᵀ·V without softmax or scaling; the d_out×d_out object the alignment
/// loss compares across modalities.
pub fn signature(tape: &mut Tape, k: TensorId, v: TensorId) -> Result<TensorId, AutodiffError> {
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "signature",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    tape.matmul(kt, v)
}
