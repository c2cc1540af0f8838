//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line with the measured quantity (run with --nocapture to
//! see them). Thresholds are fixed here, not configurable.

use std::time::Instant;
use xmodal::analysis::{mat_mul, mat_transpose, verify_theorem1};
use xmodal::attention::{self, AttentionSignature, BoundProjection};
use xmodal::autodiff::{finite_diff_check, AutodiffError, LeafSpec, Tape, TensorId};
use xmodal::datagen::{self, Modality};
use xmodal::encoder::{Classifier, ConvSpec, EncoderConfig, Mode, PoolChoice, PoolSpec};
use xmodal::losses::{
    cross_attention_loss, masked_cross_attention_loss, total_loss, CorrectnessMask, LossConfig,
};
use xmodal::rng::Rng;
use xmodal::training::{evaluate, pretrain_source, train_target, FrozenSource, TrainConfig};

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
}

fn pass(criterion: &str, detail: String) {
    eprintln!("PASS {criterion} — {detail}");
}

// ── 1. gradient fidelity ─────────────────────────────────────────────

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let mut rng = Rng::new(41);
    let mut worst = 0.0f64;

    // every differentiable operation at random small shapes
    for _ in 0..10 {
        let (m, k, n) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.bernoulli(0.3) { 0.0 } else { 1.0 / 0.7 })
            .collect();
        let bn_rows = 8 + rng.below(4);
        let conv_layout = xmodal::autodiff::ConvLayout {
            n_samples: 2,
            in_len: 8,
            in_channels: 3,
            kernel: 3,
            stride: 1,
        };
        let leaves = [
            LeafSpec::grad(&[m, k], rand_vec(&mut rng, m * k)),
            LeafSpec::grad(&[k, n], rand_vec(&mut rng, k * n)),
            LeafSpec::grad(&[m, n], rand_vec(&mut rng, m * n)),
            LeafSpec::grad(&[1, n], rand_vec(&mut rng, n)),
            LeafSpec::grad(&[bn_rows, n], rand_vec(&mut rng, bn_rows * n)),
            LeafSpec::grad(&[16, 3], rand_vec(&mut rng, 48)),
            LeafSpec::grad(&[9, 4], rand_vec(&mut rng, 36)),
            // batch-norm scale bounded away from zero
            LeafSpec::grad(&[1, n], (0..n).map(|_| 1.0 + 0.3 * rng.range(-1.0, 1.0)).collect()),
        ];
        let mask_for_op = mask.clone();
        let ops: Vec<(&str, Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId, AutodiffError>>)> = vec![
            ("matmul", Box::new(|t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                t.frobenius_norm(p)
            })),
            ("softmax_rows", Box::new(|t, ids| {
                let s = t.softmax_rows(ids[2])?;
                t.frobenius_norm(s)
            })),
            ("frobenius_norm", Box::new(|t, ids| t.frobenius_norm(ids[2]))),
            ("relu", Box::new(|t, ids| {
                let r = t.relu(ids[2])?;
                t.frobenius_norm(r)
            })),
            ("add_sub_scale", Box::new(|t, ids| {
                let a = t.add(ids[2], ids[2])?;
                let s = t.sub(a, ids[2])?;
                let sc = t.scale(s, 1.3)?;
                t.frobenius_norm(sc)
            })),
            ("transpose", Box::new(|t, ids| {
                let tr = t.transpose(ids[2])?;
                t.frobenius_norm(tr)
            })),
            ("mean_over_rows", Box::new(|t, ids| {
                let mn = t.mean_over_rows(ids[2])?;
                t.frobenius_norm(mn)
            })),
            ("sum_all", Box::new(|t, ids| {
                let r = t.relu(ids[2])?;
                t.sum_all(r)
            })),
            ("dropout", Box::new(move |t, ids| {
                let d = t.dropout_with_mask(ids[2], mask_for_op.clone())?;
                t.frobenius_norm(d)
            })),
            ("add_row_broadcast", Box::new(|t, ids| {
                let s = t.add_row_broadcast(ids[2], ids[3])?;
                t.frobenius_norm(s)
            })),
            ("batch_norm_cols", Box::new(|t, ids| {
                let (bn, _, _) = t.batch_norm_cols(ids[4], ids[7], ids[3], 1e-5, None)?;
                let r = t.relu(bn)?;
                t.frobenius_norm(r)
            })),
            ("im2col_pool_slice_concat", Box::new(move |t, ids| {
                let cols = t.im2col(ids[5], conv_layout)?;
                let pooled = t.pool_rows(cols, 2, 2, xmodal::autodiff::PoolKind::Max)?;
                let a = t.slice_rows(pooled, 0, 2)?;
                let b = t.slice_rows(pooled, 2, 2)?;
                let cat = t.concat_rows(&[a, b])?;
                t.frobenius_norm(cat)
            })),
            ("normalize_frobenius", Box::new(|t, ids| {
                let nm = t.normalize_frobenius(ids[2], 1e-12)?;
                let r = t.relu(nm)?;
                t.sum_all(r)
            })),
            ("cross_entropy", Box::new(|t, ids| {
                let labels: Vec<usize> = (0..9).map(|i| i % 4).collect();
                t.cross_entropy(ids[6], &labels)
            })),
        ];
        for (name, build) in &ops {
            let err = finite_diff_check(build, &leaves, 1e-6).unwrap();
            assert!(err <= 1e-5, "op {name}: max rel err {err:.3e}");
            worst = worst.max(err);
        }
    }

    // full objective graph: batch 4, SL 8, d_model 16, d_out 8
    let mut rng = Rng::new(4141);
    let (batch, sl, d_model, d_out, classes) = (4usize, 8usize, 16usize, 8usize, 5usize);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let sig_a: Vec<AttentionSignature> = (0..batch)
        .map(|_| AttentionSignature {
            d_out,
            data: rand_vec(&mut rng, d_out * d_out),
        })
        .collect();
    // one sample masked out to exercise the indicator path
    let mask = CorrectnessMask {
        bits: vec![true, true, true, false],
    };
    let leaves = [
        LeafSpec::grad(&[batch * sl, d_model], rand_vec(&mut rng, batch * sl * d_model)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_model, d_out], rand_vec(&mut rng, d_model * d_out)),
        LeafSpec::grad(&[d_out, classes], rand_vec(&mut rng, d_out * classes)),
        LeafSpec::grad(&[1, classes], rand_vec(&mut rng, classes)),
    ];
    let labels_for_build = labels.clone();
    let build = move |t: &mut Tape, ids: &[TensorId]| {
        let proj = BoundProjection {
            w_k: ids[1],
            w_q: ids[2],
            w_v: ids[3],
        };
        let mut logits_rows = Vec::new();
        let mut sig_ids = Vec::new();
        for s in 0..batch {
            let e = t.slice_rows(ids[0], s * sl, sl)?;
            let triple = attention::project(t, e, &proj)?;
            let attended = attention::self_attention(t, &triple)?;
            let pooled = t.mean_over_rows(attended)?;
            let scores = t.matmul(pooled, ids[4])?;
            logits_rows.push(t.add(scores, ids[5])?);
            sig_ids.push(attention::signature(t, triple.k, triple.v)?);
        }
        let logits = t.concat_rows(&logits_rows)?;
        let l_ce = t.cross_entropy(logits, &labels_for_build)?;
        let (l_ca, count) = masked_cross_attention_loss(t, &sig_ids, &sig_a, &mask, 1e-12)?;
        let cfg = LossConfig {
            lambda: 0.7,
            norm_epsilon: 1e-12,
            masking_enabled: true,
        };
        let (root, _) = total_loss(t, l_ce, Some(l_ca), count, &cfg)?;
        Ok(root)
    };
    let err = finite_diff_check(&build, &leaves, 1e-6).unwrap();
    assert!(err <= 1e-5, "full objective graph: max rel err {err:.3e}");
    worst = worst.max(err);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, bound 30 s");
    pass(
        "criterion 1 (gradient fidelity)",
        format!("max relative error {worst:.3e} ≤ 1e-5 over all ops and the full objective, {elapsed:?} < 30 s"),
    );
}

// ── 2. loss invariants ───────────────────────────────────────────────

#[test]
fn criterion_02_loss_invariants() {
    let mut rng = Rng::new(42);
    let loss_of = |b: &AttentionSignature, a: &AttentionSignature| -> f64 {
        let mut t = Tape::new();
        let ib = t.leaf(&[b.d_out, b.d_out], b.data.clone(), true).unwrap();
        let l = cross_attention_loss(&mut t, ib, a, 1e-12).unwrap();
        t.scalar(l)
    };
    // identity and positive-scale invariance
    let m = AttentionSignature {
        d_out: 4,
        data: rand_vec(&mut rng, 16),
    };
    assert!(loss_of(&m, &m) <= 1e-12);
    for c in [0.5, 2.0, 10.0] {
        let scaled = AttentionSignature {
            d_out: 4,
            data: m.data.iter().map(|v| v * c).collect(),
        };
        let l = loss_of(&scaled, &m);
        assert!(l <= 1e-12, "c = {c}: loss {l}");
    }
    // bounds over 1000 random signature pairs
    let mut max_seen = 0.0f64;
    for _ in 0..1000 {
        let d = 2 + rng.below(5);
        let a = AttentionSignature {
            d_out: d,
            data: rand_vec(&mut rng, d * d),
        };
        let b = AttentionSignature {
            d_out: d,
            data: rand_vec(&mut rng, d * d),
        };
        let l = loss_of(&b, &a);
        assert!((0.0..=2.0).contains(&l), "loss {l} outside [0, 2]");
        max_seen = max_seen.max(l);
    }
    // total = l_ce + λ·l_ca on every logged step of a real masked run
    let (cfg, train, val) = tiny_setup();
    let (source, _) = tiny_source(&cfg, &train, &val);
    let mut tc = tiny_train_cfg(5);
    tc.lambda = 0.8;
    let (_, log) = train_target(
        &tc,
        tiny_stack(cfg.channels_b),
        Modality::B,
        cfg.classes,
        Some(&source),
        &train,
        &val,
        cfg.window_len,
    )
    .unwrap();
    assert!(!log.steps.is_empty());
    for s in &log.steps {
        assert!(
            (s.total - (s.l_ce + s.lambda * s.l_ca)).abs() <= 1e-12,
            "step bookkeeping off: {s:?}"
        );
    }
    pass(
        "criterion 2 (loss invariants)",
        format!(
            "identity/scale losses <= 1e-12, 1000 random pairs in [0, 2] (max {max_seen:.3}), {} steps bookkeeping <= 1e-12",
            log.steps.len()
        ),
    );
}

// ── shared tiny fixtures ─────────────────────────────────────────────

fn tiny_stack(in_channels: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels,
        conv_stages: vec![
            ConvSpec { kernel: 5, stride: 1, out_channels: 8 },
            ConvSpec { kernel: 3, stride: 1, out_channels: 8 },
        ],
        pool: PoolSpec {
            kind: PoolChoice::Max,
            width: 2,
        },
        batch_norm_momentum: 0.9,
        batch_norm_eps: 1e-5,
        dropout_rate: 0.1,
    }
}

fn tiny_setup() -> (
    datagen::DatasetConfig,
    Vec<datagen::WindowedSample>,
    Vec<datagen::WindowedSample>,
) {
    let mut cfg = datagen::DatasetConfig::default_synthetic();
    cfg.classes = 3;
    cfg.subjects = 4;
    cfg.samples_per_cell = 3;
    cfg.t_len = 48;
    cfg.window_len = 24;
    cfg.stride = 24;
    let ds = datagen::generate(&cfg).unwrap();
    let spec = datagen::SplitSpec {
        kind: datagen::SplitKind::Id,
        train: 0.7,
        val: 0.15,
        test: 0.15,
        seed: 3,
    };
    let (train, val, _) = datagen::split(&ds, &spec).unwrap();
    let train_w = datagen::window_all(&train, &cfg).unwrap();
    let val_w = datagen::window_all(&val, &cfg).unwrap();
    (cfg, train_w, val_w)
}

fn tiny_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        batch_size: 8,
        dropout: 0.1,
        weight_decay: 1e-4,
        lambda: 0.0,
        masking_enabled: true,
        seed,
        d_out: 8,
        alignment_only: false,
    }
}

fn tiny_source(
    cfg: &datagen::DatasetConfig,
    train: &[datagen::WindowedSample],
    val: &[datagen::WindowedSample],
) -> (FrozenSource, xmodal::training::RunLog) {
    pretrain_source(
        &tiny_train_cfg(9),
        tiny_stack(cfg.channels_a),
        Modality::A,
        cfg.classes,
        train,
        val,
        cfg.window_len,
    )
    .unwrap()
}

// ── 3. masking semantics ─────────────────────────────────────────────

#[test]
fn criterion_03_masking_semantics() {
    let (cfg, train, val) = tiny_setup();
    // always-wrong source: constant class-0 prediction on label-nonzero data
    let (mut source, _) = tiny_source(&cfg, &train, &val);
    source.model.head.b[0] = 1e6;
    let source = FrozenSource::freeze(source.model);
    let nonzero = |w: &[datagen::WindowedSample]| -> Vec<datagen::WindowedSample> {
        w.iter().filter(|x| x.label != 0).cloned().collect()
    };
    let train_nz = nonzero(&train);
    let val_nz = nonzero(&val);

    let mut masked_cfg = tiny_train_cfg(5);
    masked_cfg.lambda = 1.0;
    let (masked, masked_log) = train_target(
        &masked_cfg,
        tiny_stack(cfg.channels_b),
        Modality::B,
        cfg.classes,
        Some(&source),
        &train_nz,
        &val_nz,
        cfg.window_len,
    )
    .unwrap();
    let mut base_cfg = masked_cfg.clone();
    base_cfg.lambda = 0.0;
    let (baseline, base_log) = train_target(
        &base_cfg,
        tiny_stack(cfg.channels_b),
        Modality::B,
        cfg.classes,
        None,
        &train_nz,
        &val_nz,
        cfg.window_len,
    )
    .unwrap();
    assert_eq!(masked.digest(), baseline.digest(), "trajectories diverged");
    for (a, b) in masked_log.steps.iter().zip(&base_log.steps) {
        assert_eq!(a.l_ce.to_bits(), b.l_ce.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.l_ca, 0.0);
        assert_eq!(a.masked_in_count, 0);
    }

    // perturbing a masked-out sample's raw inputs leaves L_CA untouched;
    // signatures evaluated per sample in eval mode
    let (good_source, _) = tiny_source(&cfg, &train, &val);
    let mut model = Classifier::init(
        Modality::B,
        tiny_stack(cfg.channels_b),
        8,
        cfg.classes,
        &mut Rng::new(77),
    )
    .unwrap();
    model.set_mode(Mode::Eval);
    let w0 = train[0].clone();
    let mut w1 = train[1].clone();
    let mask = CorrectnessMask {
        bits: vec![true, false],
    };
    let l_ca_of = |w1: &datagen::WindowedSample| -> f64 {
        let labels = [w0.label, w1.label];
        let (sigs_a, _) = good_source
            .signatures_and_mask(
                &[w0.raw(Modality::A), w1.raw(Modality::A)],
                cfg.window_len,
                &labels,
            )
            .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let mut sig_ids = Vec::new();
        for raw in [w0.raw(Modality::B), w1.raw(Modality::B)] {
            let fwd = model
                .forward_batch(&mut tape, &bound, &[raw], cfg.window_len, Mode::Eval, None)
                .unwrap();
            sig_ids.push(
                attention::signature(&mut tape, fwd.triples[0].k, fwd.triples[0].v).unwrap(),
            );
        }
        let (l, _) =
            masked_cross_attention_loss(&mut tape, &sig_ids, &sigs_a, &mask, 1e-12).unwrap();
        tape.scalar(l)
    };
    let before = l_ca_of(&w1);
    for v in &mut w1.raw_b {
        *v += 42.0;
    }
    for v in &mut w1.raw_a {
        *v = -*v + 3.5;
    }
    let after = l_ca_of(&w1);
    assert_eq!(before.to_bits(), after.to_bits());
    pass(
        "criterion 3 (masking semantics)",
        format!(
            "always-wrong-source trajectory identical to λ=0 baseline over {} steps; masked-out perturbation changed L_CA by exactly 0",
            base_log.steps.len()
        ),
    );
}

// ── 4. freezing ──────────────────────────────────────────────────────

#[test]
fn criterion_04_freezing() {
    let (cfg, train, val) = tiny_setup();
    let (source, _) = tiny_source(&cfg, &train, &val);
    let digest_before = source.digest;
    let mut tc = tiny_train_cfg(5);
    tc.lambda = 1.0;
    let _ = train_target(
        &tc,
        tiny_stack(cfg.channels_b),
        Modality::B,
        cfg.classes,
        Some(&source),
        &train,
        &val,
        cfg.window_len,
    )
    .unwrap();
    assert_eq!(source.model.digest(), digest_before);

    // source parameters live on a gradient-free tape: after backward on
    // the full objective no source leaf carries a gradient
    let mut tape = Tape::new();
    let bound = source.model.bind(&mut tape, false).unwrap();
    let raws: Vec<&[f64]> = train[..4].iter().map(|w| w.raw(Modality::A)).collect();
    let fwd = source
        .model
        .forward_batch(&mut tape, &bound, &raws, cfg.window_len, Mode::Eval, None)
        .unwrap();
    let labels: Vec<usize> = train[..4].iter().map(|w| w.label).collect();
    let l = tape.cross_entropy(fwd.logits, &labels).unwrap();
    tape.backward(l).unwrap();
    for id in source.model.bound_ids(&bound) {
        let g = tape.grad(id).unwrap();
        assert!(g.iter().all(|&v| v == 0.0), "source gradient leaked");
    }
    pass(
        "criterion 4 (freezing)",
        format!("digest {digest_before:016x} unchanged through transfer; all source gradients zero"),
    );
}

// ── 5. decoupled inference ───────────────────────────────────────────

#[test]
fn criterion_05_decoupled_inference() {
    let (cfg, train, val) = tiny_setup();
    let tc = tiny_train_cfg(6);
    let (model, _) = train_target(
        &tc,
        tiny_stack(cfg.channels_b),
        Modality::B,
        cfg.classes,
        None,
        &train,
        &val,
        cfg.window_len,
    )
    .unwrap();
    let clean = evaluate(&model, &val, cfg.window_len).unwrap();
    let mut poisoned = val.clone();
    for w in &mut poisoned {
        for v in &mut w.raw_a {
            *v = f64::NAN;
        }
    }
    let dirty = evaluate(&model, &poisoned, cfg.window_len).unwrap();
    assert_eq!(clean, dirty);
    // and the per-window logits agree bitwise
    for (c, p) in val.iter().zip(&poisoned) {
        let lc = model.predict(c.raw(Modality::B), cfg.window_len).unwrap();
        let lp = model.predict(p.raw(Modality::B), cfg.window_len).unwrap();
        assert_eq!(
            lc.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lp.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    pass(
        "criterion 5 (decoupled inference)",
        format!(
            "evaluation of {} windows identical with modality-A inputs poisoned to NaN",
            val.len()
        ),
    );
}

// ── 6. factor-map recovery on constructed instances ──────────────────

#[test]
fn criterion_06_theorem_recovery() {
    let started = Instant::now();
    let mut rng = Rng::new(43);
    let mut worst_fit = 0.0f64;
    let mut worst_prod = 0.0f64;
    for i in 0..100 {
        // random full-rank A ∈ R^{6×4}, invertible R ∈ R^{4×4}
        let a: Vec<f64> = rand_vec(&mut rng, 24).iter().map(|v| v * 2.0).collect();
        let mut r = rand_vec(&mut rng, 16);
        for d in 0..4 {
            r[d * 4 + d] += 2.0;
        }
        let b: Vec<f64> = rand_vec(&mut rng, 24).iter().map(|v| v * 2.0).collect();
        let a_prime = mat_mul(&a, &r, 6, 4, 4);
        let r_inv = invert4(&r);
        let b_prime = mat_mul(&r_inv, &b, 4, 4, 6);

        let k_a = mat_transpose(&a, 6, 4);
        let k_b = mat_transpose(&a_prime, 6, 4);
        let w = verify_theorem1(&k_a, &b, &k_b, &b_prime, 4, 4, 6).unwrap();
        assert!(w.r_a <= 1e-8, "instance {i}: r_a {}", w.r_a);
        assert!(w.r_b <= 1e-8, "instance {i}: r_b {}", w.r_b);
        assert!(
            w.product_residual <= 1e-12,
            "instance {i}: product residual {}",
            w.product_residual
        );
        worst_fit = worst_fit.max(w.r_a).max(w.r_b);
        worst_prod = worst_prod.max(w.product_residual);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 5, "took {elapsed:?}, bound 5 s");
    pass(
        "criterion 6 (factor recovery)",
        format!("100 instances: worst fit {worst_fit:.3e} ≤ 1e-8, worst product {worst_prod:.3e} ≤ 1e-12, {elapsed:?} < 5 s"),
    );
}

/// Exact 4×4 inverse by Gauss-Jordan with partial pivoting.
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

// ── 10. metrics oracle equivalence ───────────────────────────────────

#[test]
fn criterion_10_metrics_oracle() {
    // independent brute-force recount, no confusion matrix type
    fn oracle(preds: &[usize], labels: &[usize], classes: usize) -> (f64, f64, f64, f64) {
        let n = preds.len();
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        let mut psum = 0.0;
        let mut rsum = 0.0;
        let mut fsum = 0.0;
        for c in 0..classes {
            let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count() as f64;
            let fp = (0..n).filter(|&i| preds[i] == c && labels[i] != c).count() as f64;
            let fng = (0..n).filter(|&i| preds[i] != c && labels[i] == c).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fng > 0.0 { tp / (tp + fng) } else { 0.0 };
            psum += p;
            rsum += r;
            fsum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let k = classes as f64;
        (correct as f64 / n as f64, psum / k, rsum / k, fsum / k)
    }

    let mut rng = Rng::new(44);
    let mut checked = 0usize;
    for &classes in &[2usize, 8, 9] {
        for _ in 0..334 {
            let n = 50 + rng.below(150);
            let preds: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            let report = xmodal::analysis::macro_metrics(&preds, &labels, classes).unwrap();
            let (acc, p, r, f) = oracle(&preds, &labels, classes);
            assert_eq!(report.accuracy, acc);
            assert_eq!(report.macro_precision, p);
            assert_eq!(report.macro_recall, r);
            assert_eq!(report.macro_f1, f);
            checked += 1;
        }
    }
    let hand = xmodal::analysis::macro_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    assert!((hand.macro_f1 - 0.7333).abs() <= 1e-4, "hand macro F1 {}", hand.macro_f1);
    pass(
        "criterion 10 (metrics oracle)",
        format!("{checked} random vectors match the brute-force recount exactly; hand case macro-F1 {:.4}", hand.macro_f1),
    );
}
