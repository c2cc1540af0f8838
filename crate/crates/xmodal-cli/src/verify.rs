//! The `verify` command: gradient checks, loss invariants, factor-map
//! recovery on constructed instances, checkpoint integrity and the
//! trained-vs-untrained alignment comparison, with one pass/fail line per
//! check and a machine-readable report.

use crate::commands::LoadedData;
use crate::config::{CliError, ExperimentConfig};
use serde::Serialize;
use std::path::Path;
use xmodal::analysis::{mat_mul, mat_transpose, verify_theorem1, Direction};
use xmodal::attention::{signature, AttentionSignature};
use xmodal::autodiff::{finite_diff_check, LeafSpec, Tape, TensorId};
use xmodal::datagen::WindowedSample;
use xmodal::encoder::{Classifier, Mode};
use xmodal::rng::Rng;
use xmodal::training::{EpochRecord, FrozenSource};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub residuals: ResidualSummary,
}

#[derive(Debug, Default, Serialize)]
pub struct ResidualSummary {
    pub trained_r_a: f64,
    pub trained_r_b: f64,
    pub control_r_a: f64,
    pub control_r_b: f64,
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    println!("{} {} — {}", if pass { "PASS" } else { "FAIL" }, name, detail);
    CheckResult {
        name: name.to_string(),
        pass,
        detail,
    }
}

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
}

/// Finite differences over every differentiable op at small shapes.
fn gradcheck_ops() -> CheckResult {
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (m, k, n) = (3, 4, 3);
        let leaves = [
            LeafSpec::grad(&[m, k], rand_vec(&mut rng, m * k)),
            LeafSpec::grad(&[k, n], rand_vec(&mut rng, k * n)),
            LeafSpec::grad(&[m, n], rand_vec(&mut rng, m * n)),
            LeafSpec::grad(&[1, n], rand_vec(&mut rng, n)),
            LeafSpec::grad(&[8, n], rand_vec(&mut rng, 8 * n)),
        ];
        let builders: Vec<Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId, xmodal::autodiff::AutodiffError>>> = vec![
            Box::new(|t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                t.frobenius_norm(p)
            }),
            Box::new(|t, ids| {
                let s = t.softmax_rows(ids[2])?;
                t.frobenius_norm(s)
            }),
            Box::new(|t, ids| {
                let r = t.relu(ids[2])?;
                let a = t.add(r, ids[2])?;
                let d = t.sub(a, ids[2])?;
                let sc = t.scale(d, 0.7)?;
                let tr = t.transpose(sc)?;
                let mn = t.mean_over_rows(tr)?;
                t.frobenius_norm(mn)
            }),
            Box::new(|t, ids| {
                let (bn, _, _) = t.batch_norm_cols(ids[4], ids[3], ids[3], 1e-5, None)?;
                let r = t.relu(bn)?;
                t.frobenius_norm(r)
            }),
            Box::new(|t, ids| {
                let nm = t.normalize_frobenius(ids[2], 1e-12)?;
                let r = t.relu(nm)?;
                t.sum_all(r)
            }),
            Box::new(|t, ids| {
                let labels: Vec<usize> = (0..t.shape(ids[2])[0]).map(|i| i % t.shape(ids[2])[1]).collect();
                t.cross_entropy(ids[2], &labels)
            }),
        ];
        for b in &builders {
            match finite_diff_check(b, &leaves, 1e-6) {
                Ok(err) => worst = worst.max(err),
                Err(e) => return check("gradcheck-ops", false, e.to_string()),
            }
        }
    }
    check(
        "gradcheck-ops",
        worst <= 1e-5,
        format!("max relative error {worst:.3e} (bound 1e-5)"),
    )
}

/// Finite differences through the combined objective on a tiny batch.
fn gradcheck_full_loss() -> CheckResult {
    let mut rng = Rng::new(103);
    let (batch, sl, d_model, d_out, classes) = (2usize, 4usize, 5usize, 3usize, 3usize);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let sig_a: Vec<AttentionSignature> = (0..batch)
        .map(|_| AttentionSignature {
            d_out,
            data: rand_vec(&mut rng, d_out * d_out),
        })
        .collect();
    let mask = xmodal::losses::CorrectnessMask::all_set(batch);
    let leaves = [
        LeafSpec::grad(&[batch * sl, d_model], rand_vec(&mut rng, batch * sl * d_model)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_out, classes], rand_vec(&mut rng, d_out * classes)),
        LeafSpec::grad(&[1, classes], rand_vec(&mut rng, classes)),
    ];
    let build = move |t: &mut Tape, ids: &[TensorId]| {
        let proj = xmodal::attention::BoundProjection {
            w_k: ids[1],
            w_q: ids[2],
            w_v: ids[3],
        };
        let mut logits_rows = Vec::new();
        let mut sig_ids = Vec::new();
        for s in 0..batch {
            let e = t.slice_rows(ids[0], s * sl, sl)?;
            let triple = xmodal::attention::project(t, e, &proj)?;
            let attended = xmodal::attention::self_attention(t, &triple)?;
            let pooled = t.mean_over_rows(attended)?;
            let scores = t.matmul(pooled, ids[4])?;
            logits_rows.push(t.add(scores, ids[5])?);
            sig_ids.push(signature(t, triple.k, triple.v)?);
        }
        let logits = t.concat_rows(&logits_rows)?;
        let l_ce = t.cross_entropy(logits, &labels)?;
        let (l_ca, count) =
            xmodal::losses::masked_cross_attention_loss(t, &sig_ids, &sig_a, &mask, 1e-12)?;
        let cfg = xmodal::losses::LossConfig {
            lambda: 1.0,
            norm_epsilon: 1e-12,
            masking_enabled: true,
        };
        let (total, _) = xmodal::losses::total_loss(t, l_ce, Some(l_ca), count, &cfg)?;
        Ok(total)
    };
    match finite_diff_check(&build, &leaves, 1e-6) {
        Ok(err) => check(
            "gradcheck-objective",
            err <= 1e-5,
            format!("max relative error {err:.3e} (bound 1e-5)"),
        ),
        Err(e) => check("gradcheck-objective", false, e.to_string()),
    }
}

fn loss_invariants() -> CheckResult {
    let mut rng = Rng::new(105);
    let mut ok = true;
    let mut detail = String::new();
    for trial in 0..200 {
        let d = 2 + rng.below(4);
        let a = AttentionSignature {
            d_out: d,
            data: rand_vec(&mut rng, d * d),
        };
        let b = AttentionSignature {
            d_out: d,
            data: rand_vec(&mut rng, d * d),
        };
        let loss = |x: &AttentionSignature, y: &AttentionSignature| -> f64 {
            let mut t = Tape::new();
            let ix = t.leaf(&[d, d], x.data.clone(), true).unwrap();
            let l = xmodal::losses::cross_attention_loss(&mut t, ix, y, 1e-12).unwrap();
            t.scalar(l)
        };
        let self_loss = loss(&a, &a);
        if self_loss != 0.0 {
            ok = false;
            detail = format!("trial {trial}: L(M,M) = {self_loss}");
            break;
        }
        let scaled = AttentionSignature {
            d_out: d,
            data: a.data.iter().map(|v| v * 2.0).collect(),
        };
        let scale_loss = loss(&scaled, &a);
        if scale_loss > 1e-12 {
            ok = false;
            detail = format!("trial {trial}: L(2M,M) = {scale_loss}");
            break;
        }
        let l = loss(&b, &a);
        if !(0.0..=2.0).contains(&l) {
            ok = false;
            detail = format!("trial {trial}: loss {l} outside [0, 2]");
            break;
        }
    }
    if ok {
        detail = "identity, scale invariance and [0, 2] bound over 200 random pairs".into();
    }
    check("loss-invariants", ok, detail)
}

fn theorem_constructed() -> CheckResult {
    let mut rng = Rng::new(107);
    let mut worst_fit = 0.0f64;
    let mut worst_prod = 0.0f64;
    for _ in 0..100 {
        let a: Vec<f64> = rand_vec(&mut rng, 6 * 4).iter().map(|v| v * 2.0).collect();
        let mut r = rand_vec(&mut rng, 16);
        for i in 0..4 {
            r[i * 4 + i] += 2.0;
        }
        // invert r by Gauss-Jordan through the solve in analysis
        let b: Vec<f64> = rand_vec(&mut rng, 4 * 6).iter().map(|v| v * 2.0).collect();
        let a_prime = mat_mul(&a, &r, 6, 4, 4);
        let r_inv = invert4(&r);
        let b_prime = mat_mul(&r_inv, &b, 4, 4, 6);
        let k_a = mat_transpose(&a, 6, 4);
        let k_b = mat_transpose(&a_prime, 6, 4);
        match verify_theorem1(&k_a, &b, &k_b, &b_prime, 4, 4, 6) {
            Ok(w) => {
                worst_fit = worst_fit.max(w.r_a).max(w.r_b);
                worst_prod = worst_prod.max(w.product_residual);
            }
            Err(e) => return check("theorem-constructed", false, e.to_string()),
        }
    }
    check(
        "theorem-constructed",
        worst_fit <= 1e-8 && worst_prod <= 1e-12,
        format!("100 instances: worst fit residual {worst_fit:.3e}, worst product residual {worst_prod:.3e}"),
    )
}

/// 4×4 inverse via cofactor-free Gauss-Jordan.
fn invert4(a: &[f64]) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; 16];
    for i in 0..4 {
        inv[i * 4 + i] = 1.0;
    }
    for col in 0..4 {
        let mut pivot = col;
        for r in col + 1..4 {
            if m[r * 4 + col].abs() > m[pivot * 4 + col].abs() {
                pivot = r;
            }
        }
        for j in 0..4 {
            m.swap(col * 4 + j, pivot * 4 + j);
            inv.swap(col * 4 + j, pivot * 4 + j);
        }
        let d = m[col * 4 + col];
        for j in 0..4 {
            m[col * 4 + j] /= d;
            inv[col * 4 + j] /= d;
        }
        for r in 0..4 {
            if r == col {
                continue;
            }
            let f = m[r * 4 + col];
            for j in 0..4 {
                m[r * 4 + j] -= f * m[col * 4 + j];
                inv[r * 4 + j] -= f * inv[col * 4 + j];
            }
        }
    }
    inv
}

fn checkpoint_integrity(name: &str, path: &Path, cfg: &ExperimentConfig) -> (CheckResult, Option<Classifier>) {
    match Classifier::load(path, Some(cfg.dataset.hash())) {
        Ok((model, _)) => {
            let digest = model.digest();
            (
                check(name, true, format!("digest {digest:016x}")),
                Some(model),
            )
        }
        Err(e) => (check(name, false, e.to_string()), None),
    }
}

fn decoupled_inference(model: &Classifier, test: &[WindowedSample], window_len: usize) -> CheckResult {
    let take = test.len().min(32);
    let clean = match xmodal::training::evaluate(model, &test[..take], window_len) {
        Ok(m) => m,
        Err(e) => return check("decoupled-inference", false, e.to_string()),
    };
    let mut poisoned: Vec<WindowedSample> = test[..take].to_vec();
    for w in &mut poisoned {
        let other = match model.modality {
            xmodal::datagen::Modality::A => &mut w.raw_b,
            xmodal::datagen::Modality::B => &mut w.raw_a,
        };
        for v in other.iter_mut() {
            *v = f64::NAN;
        }
    }
    match xmodal::training::evaluate(model, &poisoned, window_len) {
        Ok(dirty) => check(
            "decoupled-inference",
            clean == dirty,
            "outputs identical with the other modality poisoned to NaN".into(),
        ),
        Err(e) => check("decoupled-inference", false, e.to_string()),
    }
}

fn residual_pair(
    source: &FrozenSource,
    target: &Classifier,
    batch: &[WindowedSample],
    window_len: usize,
) -> Result<(f64, f64), CliError> {
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    for w in batch {
        let mut tape = Tape::new();
        let sb = source.model.bind(&mut tape, false)?;
        let fa = source.model.forward_batch(
            &mut tape,
            &sb,
            &[w.raw(source.model.modality)],
            window_len,
            Mode::Eval,
            None,
        )?;
        let tb = target.bind(&mut tape, false)?;
        let fb = target.forward_batch(
            &mut tape,
            &tb,
            &[w.raw(target.modality)],
            window_len,
            Mode::Eval,
            None,
        )?;
        let (ka, va) = (fa.triples[0].k, fa.triples[0].v);
        let (kb, vb) = (fb.triples[0].k, fb.triples[0].v);
        let sl_a = tape.shape(ka)[0];
        let sl_b = tape.shape(kb)[0];
        let d = tape.shape(ka)[1];
        let witness = verify_theorem1(
            tape.data(ka),
            tape.data(va),
            tape.data(kb),
            tape.data(vb),
            sl_a,
            sl_b,
            d,
        )?;
        ra.push(witness.r_a);
        rb.push(witness.r_b);
    }
    let n = ra.len() as f64;
    Ok((ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n))
}

fn alignment_drop_from_log(dir: &Path) -> CheckResult {
    let path = dir.join("epoch_log.jsonl");
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return check("alignment-drop", false, format!("{}: {e}", path.display())),
    };
    let records: Vec<EpochRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    match (records.first(), records.last()) {
        (Some(first), Some(last)) if first.l_ca > 0.0 => {
            let ratio = last.l_ca / first.l_ca;
            check(
                "alignment-drop",
                ratio <= 0.5,
                format!(
                    "epoch-1 L_CA {:.4} -> final {:.4} (ratio {ratio:.3}, bound 0.5)",
                    first.l_ca, last.l_ca
                ),
            )
        }
        _ => check("alignment-drop", false, "no usable alignment trajectory in the log".into()),
    }
}

pub struct VerifyPaths<'a> {
    pub source: &'a Path,
    pub baseline: &'a Path,
    pub target: &'a Path,
    pub target_dir: &'a Path,
}

pub fn cmd_verify(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    paths: &VerifyPaths<'_>,
) -> Result<(), CliError> {
    let mut checks = Vec::new();
    checks.push(gradcheck_ops());
    checks.push(gradcheck_full_loss());
    checks.push(loss_invariants());
    checks.push(theorem_constructed());

    let (source_check, source_model) = checkpoint_integrity("source-checkpoint", paths.source, cfg);
    checks.push(source_check);
    let (baseline_check, baseline_model) =
        checkpoint_integrity("baseline-checkpoint", paths.baseline, cfg);
    checks.push(baseline_check);
    let (target_check, target_model) = checkpoint_integrity("target-checkpoint", paths.target, cfg);
    checks.push(target_check);

    let mut residuals = ResidualSummary::default();
    if let (Some(source_model), Some(target_model)) = (source_model, target_model) {
        let source = FrozenSource::freeze(source_model);
        checks.push(decoupled_inference(&target_model, &data.test, data.window_len));

        // untrained control drawn from the same init stream the trained
        // run started from
        let direction: Direction = cfg.transfer.direction.into();
        let modality = direction.target();
        let mut rng = Rng::new(cfg.target.seed);
        let mut enc_cfg = cfg.encoder_for(modality);
        enc_cfg.dropout_rate = cfg.target.dropout;
        let control = Classifier::init(
            modality,
            enc_cfg,
            cfg.target.d_out,
            cfg.dataset.classes,
            &mut rng,
        )?;
        let held_out: Vec<WindowedSample> = data.test.iter().take(16).cloned().collect();
        let (t_ra, t_rb) = residual_pair(&source, &target_model, &held_out, data.window_len)?;
        let (c_ra, c_rb) = residual_pair(&source, &control, &held_out, data.window_len)?;
        residuals = ResidualSummary {
            trained_r_a: t_ra,
            trained_r_b: t_rb,
            control_r_a: c_ra,
            control_r_b: c_rb,
        };
        checks.push(check(
            "factor-residuals",
            t_ra <= 0.5 * c_ra && t_rb <= 0.5 * c_rb,
            format!(
                "trained (r_A {t_ra:.4}, r_B {t_rb:.4}) vs control (r_A {c_ra:.4}, r_B {c_rb:.4})"
            ),
        ));
        checks.push(alignment_drop_from_log(paths.target_dir));

        if let Some(baseline_model) = baseline_model {
            let base_metrics = xmodal::training::evaluate(&baseline_model, &data.test, data.window_len)?;
            let ours_metrics = xmodal::training::evaluate(&target_model, &data.test, data.window_len)?;
            let table = xmodal::analysis::comparison_table(
                &modality.to_string(),
                &base_metrics,
                &ours_metrics,
                None,
            );
            std::fs::write(cfg.out_dir.join("comparison.tsv"), table)?;
        }
    }

    let report = VerifyReport {
        checks: checks.clone(),
        residuals,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("verify_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.clone())
        .collect();
    if failed.is_empty() {
        println!("verify: all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::FailedChecks(failed))
    }
}
