//! Evaluation metrics, linear-map recovery between attention factors, and
//! experiment aggregation.
//!
//! The factor-recovery check fits R̂ and Ŝ by least squares so that
//! K_Bᵀ ≈ K_Aᵀ·R̂ and V_B ≈ Ŝ·V_A, and reports relative residuals. When the
//! signature products coincide exactly such maps exist, so small residuals
//! witness that alignment really drove the factors onto each other's span.

use crate::datagen::Modality;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum AnalysisError {
    LengthMismatch { preds: usize, labels: usize },
    ClassOutOfRange { value: usize, classes: usize },
    Singular,
    MissingRuns(Vec<String>),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::LengthMismatch { preds, labels } => {
                write!(f, "{preds} predictions vs {labels} labels")
            }
            AnalysisError::ClassOutOfRange { value, classes } => {
                write!(f, "class {value} out of range for {classes} classes")
            }
            AnalysisError::Singular => write!(f, "singular system"),
            AnalysisError::MissingRuns(cells) => {
                write!(f, "missing ablation cells: {}", cells.join(", "))
            }
        }
    }
}

impl std::error::Error for AnalysisError {}

/// Transfer direction: which modality teaches which.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::AToB => Modality::A,
            Direction::BToA => Modality::B,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Direction::AToB => Modality::B,
            Direction::BToA => Modality::A,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::AToB => write!(f, "a_to_b"),
            Direction::BToA => write!(f, "b_to_a"),
        }
    }
}

/// C×C counts, rows = true class, cols = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        preds: &[usize],
        labels: &[usize],
        classes: usize,
    ) -> Result<Self, AnalysisError> {
        if preds.len() != labels.len() {
            return Err(AnalysisError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        let mut counts = vec![0usize; classes * classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= classes {
                return Err(AnalysisError::ClassOutOfRange { value: p, classes });
            }
            if l >= classes {
                return Err(AnalysisError::ClassOutOfRange { value: l, classes });
            }
            counts[l * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy plus macro (unweighted class-mean) precision/recall/F1.
/// Classes with a zero denominator score 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn macro_metrics(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<MetricsReport, AnalysisError> {
    let cm = ConfusionMatrix::from_predictions(preds, labels, classes)?;
    Ok(metrics_from_confusion(&cm))
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let c = cm.classes;
    let total = cm.total();
    let mut trace = 0usize;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[k * c + k];
        trace += tp;
        let row: usize = (0..c).map(|j| cm.counts[k * c + j]).sum(); // tp + fn
        let col: usize = (0..c).map(|i| cm.counts[i * c + k]).sum(); // tp + fp
        let precision = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
        let recall = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    let n = c as f64;
    MetricsReport {
        accuracy: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
        per_class,
    }
}

// ── Dense helpers (row-major) ────────────────────────────────────────

pub fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

pub fn mat_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Solve A·X = B for X (A k×k, B k×n) by Gaussian elimination with
/// partial pivoting. A and B are consumed as working copies.
fn solve_system(mut a: Vec<f64>, mut b: Vec<f64>, k: usize, n: usize) -> Result<Vec<f64>, AnalysisError> {
    for col in 0..k {
        let mut pivot = col;
        for r in col + 1..k {
            if a[r * k + col].abs() > a[pivot * k + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * k + col].abs() < 1e-300 {
            return Err(AnalysisError::Singular);
        }
        if pivot != col {
            for j in 0..k {
                a.swap(col * k + j, pivot * k + j);
            }
            for j in 0..n {
                b.swap(col * n + j, pivot * n + j);
            }
        }
        let inv = 1.0 / a[col * k + col];
        for r in 0..k {
            if r == col {
                continue;
            }
            let factor = a[r * k + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..k {
                a[r * k + j] -= factor * a[col * k + j];
            }
            for j in 0..n {
                b[r * n + j] -= factor * b[col * n + j];
            }
        }
    }
    let mut x = vec![0.0; k * n];
    for r in 0..k {
        let inv = 1.0 / a[r * k + r];
        for j in 0..n {
            x[r * n + j] = b[r * n + j] * inv;
        }
    }
    Ok(x)
}

const RIDGE: f64 = 1e-10;
const RESIDUAL_GUARD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearFit {
    /// k×k' coefficient matrix
    pub map: Vec<f64>,
    pub residual: f64,
}

/// Least-squares map minimizing ‖y − x·map‖_F via normal equations with a
/// ridge of 1e-10; `residual` is relative to ‖y‖_F.
pub fn fit_linear_map(
    x: &[f64],
    y: &[f64],
    m: usize,
    k: usize,
    k2: usize,
) -> Result<LinearFit, AnalysisError> {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(y.len(), m * k2);
    let xt = mat_transpose(x, m, k);
    let mut xtx = mat_mul(&xt, x, k, m, k);
    for i in 0..k {
        xtx[i * k + i] += RIDGE;
    }
    let xty = mat_mul(&xt, y, k, m, k2);
    let map = solve_system(xtx, xty, k, k2)?;
    let fitted = mat_mul(x, &map, m, k, k2);
    let diff: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let residual = frob(&diff) / frob(y).max(RESIDUAL_GUARD);
    Ok(LinearFit { map, residual })
}

/// Fitted maps realizing K_Bᵀ ≈ K_Aᵀ·R̂ and V_B ≈ Ŝ·V_A, with residuals.
#[derive(Debug, Clone)]
pub struct FactorizationWitness {
    /// sl_a × sl_b
    pub r_hat: Vec<f64>,
    /// sl_b × sl_a
    pub s_hat: Vec<f64>,
    pub r_a: f64,
    pub r_b: f64,
    /// ‖K_BᵀV_B − K_AᵀV_A‖_F / max(‖K_AᵀV_A‖_F, ε)
    pub product_residual: f64,
}

/// All inputs are SL×d_out row-major; source and target sequence lengths
/// may differ.
pub fn verify_theorem1(
    k_a: &[f64],
    v_a: &[f64],
    k_b: &[f64],
    v_b: &[f64],
    sl_a: usize,
    sl_b: usize,
    d_out: usize,
) -> Result<FactorizationWitness, AnalysisError> {
    debug_assert_eq!(k_a.len(), sl_a * d_out);
    debug_assert_eq!(v_a.len(), sl_a * d_out);
    debug_assert_eq!(k_b.len(), sl_b * d_out);
    debug_assert_eq!(v_b.len(), sl_b * d_out);

    // A = K_Aᵀ (d×sl_a), A' = K_Bᵀ (d×sl_b): fit A' ≈ A·R̂
    let a = mat_transpose(k_a, sl_a, d_out);
    let a_prime = mat_transpose(k_b, sl_b, d_out);
    let fit_r = fit_linear_map(&a, &a_prime, d_out, sl_a, sl_b)?;

    // B = V_A, B' = V_B: fit B' ≈ Ŝ·B via the transposed system
    let bt = mat_transpose(v_a, sl_a, d_out); // d × sl_a
    let bt_prime = mat_transpose(v_b, sl_b, d_out); // d × sl_b
    let fit_s = fit_linear_map(&bt, &bt_prime, d_out, sl_a, sl_b)?;
    let s_hat = mat_transpose(&fit_s.map, sl_a, sl_b);

    let prod_a = mat_mul(&a, v_a, d_out, sl_a, d_out);
    let prod_b = mat_mul(&a_prime, v_b, d_out, sl_b, d_out);
    let diff: Vec<f64> = prod_b.iter().zip(&prod_a).map(|(x, y)| x - y).collect();
    let product_residual = frob(&diff) / frob(&prod_a).max(RESIDUAL_GUARD);

    Ok(FactorizationWitness {
        r_hat: fit_r.map,
        s_hat,
        r_a: fit_r.residual,
        r_b: fit_s.residual,
        product_residual,
    })
}

// ── Ablation aggregation ─────────────────────────────────────────────

/// Side-by-side table in the usual comparison layout: one row per
/// metric with baseline / transfer / transfer-without-masking columns.
pub fn comparison_table(
    modality: &str,
    baseline: &MetricsReport,
    ours: &MetricsReport,
    no_masking: Option<&MetricsReport>,
) -> String {
    let mut out = String::from("modality	metric	baseline	ours	no_mcma
");
    let rows = [
        ("accuracy", baseline.accuracy, ours.accuracy, no_masking.map(|m| m.accuracy)),
        ("recall", baseline.macro_recall, ours.macro_recall, no_masking.map(|m| m.macro_recall)),
        (
            "precision",
            baseline.macro_precision,
            ours.macro_precision,
            no_masking.map(|m| m.macro_precision),
        ),
        ("f1", baseline.macro_f1, ours.macro_f1, no_masking.map(|m| m.macro_f1)),
    ];
    for (name, b, o, n) in rows {
        let n_txt = n.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{modality}	{name}	{b:.6}	{o:.6}	{n_txt}
"));
    }
    out
}

/// One completed run's contribution to the λ ablation.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub lambda: f64,
    pub direction: Direction,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub lambda: f64,
    pub direction: Direction,
    pub seeds: usize,
    /// [accuracy, recall, precision, f1]
    pub mean: [f64; 4],
    /// sample standard deviation; 0 for a single seed
    pub spread: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "lambda\tdirection\tseeds\taccuracy\trecall\tprecision\tf1\taccuracy_sd\trecall_sd\tprecision_sd\tf1_sd\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.lambda,
                r.direction,
                r.seeds,
                r.mean[0],
                r.mean[1],
                r.mean[2],
                r.mean[3],
                r.spread[0],
                r.spread[1],
                r.spread[2],
                r.spread[3],
            ));
        }
        out
    }
}

/// Aggregate per-run metrics over the λ grid: one row per (λ, direction),
/// mean ± sample standard deviation over seeds. Every grid cell must be
/// present at least once.
pub fn build_ablation(
    entries: &[AblationEntry],
    lambda_grid: &[f64],
    directions: &[Direction],
) -> Result<AblationTable, AnalysisError> {
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for &dir in directions {
        for &lambda in lambda_grid {
            let cell: Vec<&AblationEntry> = entries
                .iter()
                .filter(|e| e.lambda == lambda && e.direction == dir)
                .collect();
            if cell.is_empty() {
                missing.push(format!("lambda={lambda} direction={dir}"));
                continue;
            }
            let values: Vec<[f64; 4]> = cell
                .iter()
                .map(|e| {
                    [
                        e.metrics.accuracy,
                        e.metrics.macro_recall,
                        e.metrics.macro_precision,
                        e.metrics.macro_f1,
                    ]
                })
                .collect();
            let n = values.len() as f64;
            let mut mean = [0.0; 4];
            for v in &values {
                for i in 0..4 {
                    mean[i] += v[i] / n;
                }
            }
            let mut spread = [0.0; 4];
            if values.len() > 1 {
                for v in &values {
                    for i in 0..4 {
                        spread[i] += (v[i] - mean[i]).powi(2);
                    }
                }
                for s in &mut spread {
                    *s = (*s / (n - 1.0)).sqrt();
                }
            }
            rows.push(AblationRow {
                lambda,
                direction: dir,
                seeds: cell.len(),
                mean,
                spread,
            });
        }
    }
    if !missing.is_empty() {
        return Err(AnalysisError::MissingRuns(missing));
    }
    Ok(AblationTable { rows })
}
