//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (unbuffered, so it shows without `--nocapture`) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use drsfi::campaign::{
    emit_results, run_campaign, run_campaign_detailed, CampaignOutcome, CampaignSpec, ExperimentKind,
    OutputFormat, RunRecord,
};
use drsfi::datagen::gen_labeled;
use drsfi::inject::{apply_error_map, build_error_map, flip_bit_f32, InjectionConfig, TargetSelector};
use drsfi::metrics::{auc_roc, Classification};
use drsfi::mitigate::{abft_gemm, augment_checksums, ClipMode, MitigationKind, MitigationPolicy};
use drsfi::model::{
    batch_gradients, load_checkpoint, save_checkpoint, Component, DummyModelConfig, Head, ModelGraph, Parameter,
};
use drsfi::tensor::{fm_interaction, gemm, Tensor};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

#[test]
fn criterion_01_bit_semantics_anchor() {
    let got = flip_bit_f32(0.625, 30).unwrap();
    let expected = 1.25f32 * 2f32.powi(127);
    let pass = got.to_bits() == expected.to_bits() && got == 2.1267648e38;
    report(1, pass, &format!("flip_bit(0.625, 30) = {got:e}"));
    assert!(pass);
}

#[test]
fn criterion_02_injection_throughput() {
    let setup = Instant::now();
    let cfg = DummyModelConfig {
        mlp_depth: 1,
        mlp_hidden: 512,
        embed_dim: 512,
        dense_dim: 128,
        sparse_dim: 35_500,
    };
    let mut model = ModelGraph::build_dummy(&cfg, 1).unwrap();
    let n = model.parameter_count();
    let icfg = InjectionConfig::new(1e-3, TargetSelector::EntireModel, 7);
    let t = Instant::now();
    let map = build_error_map(&model, &icfg).unwrap();
    apply_error_map(&mut model, &map).unwrap();
    let inject_s = t.elapsed().as_secs_f64();
    let total_s = setup.elapsed().as_secs_f64();
    let pass = n >= 19_000_000 && inject_s <= 10.0 && total_s < 60.0;
    report(
        2,
        pass,
        &format!("{n} params, {} flips, build+apply {inject_s:.2}s, total {total_s:.2}s", map.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_03_distributional_correctness() {
    let model = ModelGraph::from_parameters(vec![Parameter {
        name: "w".into(),
        component: Component::Mlp,
        tensor: Tensor::zeros(&[1000]),
    }])
    .unwrap();
    let (seeds, ber, elements) = (10_000u64, 1e-3, 1000.0);
    let trials = seeds as f64 * elements;
    let sigma = (trials * ber * (1.0 - ber)).sqrt();
    let mut details = Vec::new();
    let mut pass = true;
    for mask in [0u32, 0xFF80_0000] {
        let mut per_bit = [0u64; 32];
        let mut total = 0u64;
        for seed in 0..seeds {
            let map = build_error_map(&model, &InjectionConfig::new(ber, TargetSelector::EntireModel, seed).with_mask(mask))
                .unwrap();
            for (_, _, bit) in map.entries() {
                per_bit[bit as usize] += 1;
            }
            total += map.len() as u64;
        }
        let mut worst = 0.0f64;
        for (bit, &count) in per_bit.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                if count != 0 {
                    pass = false;
                }
            } else {
                let z = (count as f64 - trials * ber) / sigma;
                worst = worst.max(z.abs());
            }
        }
        let unprotected = 32 - mask.count_ones() as u64;
        let n_bits = (trials as u64 * unprotected) as f64;
        let mean_entries = total as f64 / seeds as f64;
        let mean_sigma = (n_bits * ber * (1.0 - ber)).sqrt() / seeds as f64;
        let mean_z = (mean_entries - n_bits * ber / seeds as f64) / mean_sigma;
        pass &= worst <= 4.0 && mean_z.abs() <= 3.0;
        let protected_flips: u64 = (0..32).filter(|b| mask >> b & 1 == 1).map(|b| per_bit[b]).sum();
        details.push(format!(
            "mask {mask:#010x}: worst |z| {worst:.2}, mean entries {mean_entries:.2} (z {mean_z:.2}), protected flips {protected_flips}"
        ));
    }
    report(3, pass, &details.join("; "));
    assert!(pass);
}

fn dummy_spec(depth: usize) -> CampaignSpec {
    let mut spec = CampaignSpec::new(ExperimentKind::DummyRmse);
    spec.grid = DummyModelConfig::width_grid(depth);
    spec.sparsities = vec![0.001];
    spec.targets = vec![TargetSelector::EntireModel];
    spec.runs = 10;
    spec.seed = 2024;
    spec
}

/// Depth-1 grid, full ber sweep, unprotected and SBP-protected.
fn regime_campaign() -> &'static Vec<RunRecord> {
    static CELL: OnceLock<Vec<RunRecord>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut spec = dummy_spec(1);
        spec.mitigations = vec![
            MitigationPolicy::with_kind(MitigationKind::None),
            MitigationPolicy::with_kind(MitigationKind::Sbp),
        ];
        run_campaign(&spec).unwrap()
    })
}

#[test]
fn criterion_04_dummy_rmse_regimes() {
    let recs: Vec<&RunRecord> = regime_campaign().iter().filter(|r| r.mitigation == MitigationKind::None).collect();
    assert!(recs.iter().all(|r| r.error.is_none()));
    let low: Vec<_> = recs.iter().filter(|r| r.ber <= 1e-8).collect();
    let low_ok = low
        .iter()
        .filter(|r| r.classification == Classification::Numeric && r.value < 0.005)
        .count();
    let high: Vec<_> = recs.iter().filter(|r| r.ber >= 1e-5).collect();
    let high_bad = high.iter().filter(|r| r.classification.is_invalid()).count();
    let low_frac = low_ok as f64 / low.len() as f64;
    let high_frac = high_bad as f64 / high.len() as f64;
    let mut per_ber = Vec::new();
    for ber in [1e-5, 1e-4, 1e-3, 1e-2] {
        let at: Vec<_> = recs.iter().filter(|r| r.ber == ber).collect();
        let bad = at.iter().filter(|r| r.classification.is_invalid()).count();
        per_ber.push(format!("{ber:e}: {bad}/{}", at.len()));
    }
    let pass_low = low_frac >= 0.95;
    let pass_high = high_frac >= 0.90;
    report(
        4,
        pass_low && pass_high,
        &format!(
            "ber<=1e-8 rmse<0.005 {low_ok}/{} ({:.1}%) [{}]; ber>=1e-5 inf/nan {high_bad}/{} ({:.1}%) [{}] [{}]",
            low.len(),
            100.0 * low_frac,
            if pass_low { "ok" } else { "below 95%" },
            high.len(),
            100.0 * high_frac,
            if pass_high { "ok" } else { "below 90%" },
            per_ber.join(", ")
        ),
    );
    assert!(pass_low, "low-ber regime");
    assert!(pass_high, "high-ber regime");
}

/// (fraction of runs classified inf/nan, mean RMSE over numeric runs).
fn severity<'a>(runs: impl Iterator<Item = &'a RunRecord>) -> (f64, f64) {
    let runs: Vec<_> = runs.collect();
    let invalid = runs.iter().filter(|r| r.classification.is_invalid()).count();
    let numeric: Vec<f64> = runs
        .iter()
        .filter(|r| !r.classification.is_invalid() && r.value.is_finite())
        .map(|r| r.value)
        .collect();
    let mean = if numeric.is_empty() { 0.0 } else { numeric.iter().sum::<f64>() / numeric.len() as f64 };
    (invalid as f64 / runs.len() as f64, mean)
}

fn more_severe(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

#[test]
fn criterion_05_component_sensitivity() {
    let mut spec = dummy_spec(2);
    spec.bers = vec![1e-6];
    spec.targets = vec![TargetSelector::Mlp, TargetSelector::Embedding];
    let recs = run_campaign(&spec).unwrap();
    let mut wins = 0;
    let mut cells = Vec::new();
    for cfg in &spec.grid {
        let of = |t: &str| severity(recs.iter().filter(|r| r.config() == *cfg && r.target == t));
        let (m, e) = (of("mlp"), of("embedding"));
        if more_severe(m, e) {
            wins += 1;
        }
        cells.push(format!(
            "{}x{} {:.1}/{:.1e} vs {:.1}/{:.1e}",
            cfg.mlp_hidden, cfg.embed_dim, m.0, m.1, e.0, e.1
        ));
    }
    let pass = wins >= 12;
    report(
        5,
        pass,
        &format!("mlp > embedding in {wins}/16 configs (invalid fraction/mean rmse) [{}]", cells.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_06_sparsity_effect() {
    let mut spec = dummy_spec(1);
    spec.bers = vec![1e-6];
    spec.sparsities = vec![0.001, 0.01];
    spec.targets = vec![TargetSelector::Embedding];
    let recs = run_campaign(&spec).unwrap();
    let mut wins = 0;
    for cfg in &spec.grid {
        let of = |s: f64| severity(recs.iter().filter(|r| r.config() == *cfg && r.sparsity == s));
        if more_severe(of(0.01), of(0.001)) {
            wins += 1;
        }
    }
    let pass = wins >= 12;
    report(6, pass, &format!("sparsity 0.01 more severe than 0.001 in {wins}/16 configs"));
    assert!(pass);
}

fn ctr_campaign() -> &'static CampaignOutcome {
    static CELL: OnceLock<CampaignOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut spec = CampaignSpec::new(ExperimentKind::CtrAuc);
        spec.grid = vec![DummyModelConfig {
            mlp_depth: 1,
            mlp_hidden: 256,
            embed_dim: 64,
            dense_dim: 128,
            sparse_dim: 8192,
        }];
        spec.sparsities = vec![0.01];
        spec.targets = vec![TargetSelector::EntireModel];
        spec.mitigations = vec![
            MitigationPolicy::with_kind(MitigationKind::None),
            MitigationPolicy {
                clip_mode: ClipMode::Clamp,
                clip_threshold: 6.0,
                clip_range: Some(6.0),
                ..MitigationPolicy::with_kind(MitigationKind::Clip)
            },
        ];
        spec.runs = 10;
        spec.seed = 7;
        spec.ctr.train_samples = 20_000;
        spec.ctr.use_fm = false;
        run_campaign_detailed(&spec).unwrap()
    })
}

fn mean_auc(out: &CampaignOutcome, kind: MitigationKind, ber: f64) -> f64 {
    let v: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.mitigation == kind && r.ber == ber)
        .map(|r| r.value)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_ctr_degradation_curve() {
    let out = ctr_campaign();
    assert!(out.records.iter().all(|r| r.error.is_none()));
    let baseline = out.baselines[0].value;
    let bers = drsfi::campaign::config::default_bers();
    let curve: Vec<f64> = bers.iter().map(|&b| mean_auc(out, MitigationKind::None, b)).collect();
    let monotone = curve.windows(2).all(|w| w[1] <= w[0] + 0.01);
    let random = bers
        .iter()
        .zip(&curve)
        .filter(|(b, _)| **b >= 1e-3)
        .all(|(_, a)| (a - 0.5).abs() <= 0.05);
    let pass = baseline >= 0.75 && monotone && random;
    let pts: Vec<String> = bers.iter().zip(&curve).map(|(b, a)| format!("{b:e}:{a:.3}")).collect();
    report(
        7,
        pass,
        &format!("baseline AUC {baseline:.3}; mean AUC [{}]; monotone {monotone}; random at >=1e-3 {random}", pts.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_08_clipping_recovery() {
    let out = ctr_campaign();
    let mut pass = true;
    let mut parts = Vec::new();
    for ber in [1e-5, 1e-4] {
        let none = mean_auc(out, MitigationKind::None, ber);
        let clip = mean_auc(out, MitigationKind::Clip, ber);
        pass &= clip >= none + 0.02;
        parts.push(format!("{ber:e}: none {none:.3} clamp {clip:.3} (+{:.3})", clip - none));
    }
    report(8, pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_09_sbp_effect() {
    let recs = regime_campaign();
    let first_invalid = |kind: MitigationKind| {
        recs.iter()
            .filter(|r| r.mitigation == kind && r.classification.is_invalid())
            .map(|r| r.ber)
            .fold(f64::INFINITY, f64::min)
    };
    let (plain, sbp) = (first_invalid(MitigationKind::None), first_invalid(MitigationKind::Sbp));
    let pass = plain.is_finite() && sbp >= 10.0 * plain;
    report(
        9,
        pass,
        &format!("smallest ber with inf/nan: unprotected {plain:e}, sign+exponent protected {sbp:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_abft_properties() {
    let policy = MitigationPolicy {
        abft_tolerance: 1e-4,
        abft_max_retries: 3,
        ..MitigationPolicy::with_kind(MitigationKind::Abft)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random_matrix = |rng: &mut ChaCha8Rng| {
        Tensor::matrix(8, 8, (0..64).map(|_| normal(rng)).collect()).unwrap()
    };

    let (mut exp_cases, mut exp_detected, mut detected_unrecoverable, mut detected_total) = (0u32, 0u32, 0u32, 0u32);
    let (mut man_cases, mut man_detected) = (0u32, 0u32);
    for _ in 0..40 {
        let a = random_matrix(&mut rng);
        let b = random_matrix(&mut rng);
        let clean_aug = augment_checksums(&b).unwrap();
        for elem in 0..64 {
            for bit in 0..32u32 {
                let mut aug = clean_aug.clone();
                let (i, j) = (elem / 8, elem % 8);
                aug.toggle_bit(i * 9 + j, bit);
                let (_, status) = abft_gemm(&a, &aug, &policy).unwrap();
                if (23..=30).contains(&bit) {
                    exp_cases += 1;
                    exp_detected += status.detected as u32;
                } else {
                    man_cases += 1;
                    man_detected += status.detected as u32;
                }
                if status.detected {
                    detected_total += 1;
                    detected_unrecoverable += (status.unrecoverable && status.retries_used == 3) as u32;
                }
            }
        }
    }
    let mut false_pos = 0u32;
    for _ in 0..10_000 {
        let a = random_matrix(&mut rng);
        let b = random_matrix(&mut rng);
        let (_, status) = abft_gemm(&a, &augment_checksums(&b).unwrap(), &policy).unwrap();
        false_pos += status.detected as u32;
    }
    let det_rate = exp_detected as f64 / exp_cases as f64;
    let fp_rate = false_pos as f64 / 10_000.0;
    let pass = det_rate >= 0.99 && fp_rate <= 0.01 && detected_unrecoverable == detected_total;
    report(
        10,
        pass,
        &format!(
            "exponent-bit detection {exp_detected}/{exp_cases} ({:.2}%); mantissa/sign detection {man_detected}/{man_cases} ({:.2}%); clean false positives {false_pos}/10000; unrecoverable {detected_unrecoverable}/{detected_total}",
            100.0 * det_rate,
            100.0 * man_detected as f64 / man_cases as f64
        ),
    );
    assert!(pass);
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f32> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += a.get(i, l) * b.get(l, j);
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut gt, mut ties, mut pairs) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                if scores[i] > scores[j] {
                    gt += 1;
                } else if scores[i] == scores[j] {
                    ties += 1;
                }
            }
        }
    }
    (gt as f64 + 0.5 * ties as f64) / pairs as f64
}

/// Independent f64 forward pass of a CTR model: mean BCE and ReLU sign pattern.
fn oracle_loss(
    params: &HashMap<String, (Vec<usize>, Vec<f64>)>,
    batch: &drsfi::datagen::SyntheticBatch,
    fm: bool,
) -> (f64, Vec<bool>) {
    let layer = |x: &[f64], name: &str, relu: bool, signs: &mut Vec<bool>| -> Vec<f64> {
        let (shape, w) = &params[&format!("{name}.weight")];
        let b = &params[&format!("{name}.bias")].1;
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(rows, x.len());
        (0..cols)
            .map(|j| {
                let v = b[j] + (0..rows).map(|i| x[i] * w[i * cols + j]).sum::<f64>();
                if relu {
                    signs.push(v > 0.0);
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    };
    let count = |prefix: &str| params.keys().filter(|k| k.starts_with(prefix) && k.ends_with(".weight")).count();
    let (n_bottom, n_top) = (count("bottom."), count("top."));
    let (eshape, table) = &params["embedding.weight"];
    let e = eshape[1];
    let mut signs = Vec::new();
    let mut loss = 0.0;
    let labels = batch.labels.as_ref().unwrap();
    for s in 0..batch.len() {
        let mut x: Vec<f64> = batch.dense.row(s).iter().map(|&v| v as f64).collect();
        for i in 0..n_bottom {
            x = layer(&x, &format!("bottom.{i}"), true, &mut signs);
        }
        let rows: Vec<&[f64]> = batch.sparse[s].iter().map(|&f| &table[f * e..(f + 1) * e]).collect();
        let pooled: Vec<f64> = (0..e).map(|k| rows.iter().map(|r| r[k]).sum()).collect();
        x.extend(&pooled);
        for i in 0..n_top {
            x = layer(&x, &format!("top.{i}"), i + 1 < n_top, &mut signs);
        }
        let mut z = x[0];
        if fm {
            for a in 0..rows.len() {
                for b in a + 1..rows.len() {
                    z += (0..e).map(|k| rows[a][k] * rows[b][k]).sum::<f64>();
                }
            }
        }
        let y = labels[s] as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    (loss / batch.len() as f64, signs)
}

#[test]
fn criterion_11_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parts = Vec::new();

    let mut gemm_ok = true;
    for _ in 0..500 {
        let (m, k, n) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
        let a = Tensor::matrix(m, k, (0..m * k).map(|_| normal(&mut rng)).collect()).unwrap();
        let b = Tensor::matrix(k, n, (0..k * n).map(|_| normal(&mut rng)).collect()).unwrap();
        let c = gemm(&a, &b).unwrap();
        gemm_ok &= c.data().iter().zip(triple_loop(&a, &b)).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    parts.push(format!("gemm bit-exact {gemm_ok}"));

    let mut auc_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..25) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        auc_ok &= auc_roc(&scores, &labels).unwrap() == pairwise_auc(&scores, &labels);
    }
    parts.push(format!("auc exact {auc_ok}"));

    let mut fm_worst = 0.0f64;
    for _ in 0..500 {
        let (count, d) = (rng.random_range(0..40), rng.random_range(1..=64));
        let vecs: Vec<Vec<f32>> = (0..count).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let refs: Vec<&[f32]> = vecs.iter().map(Vec::as_slice).collect();
        let got = fm_interaction(&refs).unwrap() as f64;
        let mut oracle = 0.0f64;
        for i in 0..count {
            for j in i + 1..count {
                oracle += vecs[i].iter().zip(&vecs[j]).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
            }
        }
        let rel = if oracle == 0.0 { got.abs() } else { ((got - oracle) / oracle).abs() };
        fm_worst = fm_worst.max(rel);
    }
    let fm_ok = fm_worst <= 1e-5;
    parts.push(format!("fm worst rel {fm_worst:.2e}"));

    let cfg = DummyModelConfig {
        mlp_depth: 2,
        mlp_hidden: 6,
        embed_dim: 3,
        dense_dim: 5,
        sparse_dim: 20,
    };
    let model = ModelGraph::build_ctr(&cfg, true, 3).unwrap();
    let Head::Sigmoid { fm } = model.head() else { unreachable!() };
    let batch = gen_labeled(16, &cfg, 0.2, 1.0, 4).unwrap();
    let labels = batch.labels.clone().unwrap();
    let (_, grads) = batch_gradients(&model, &batch.dense, &batch.sparse, &labels).unwrap();
    let base: HashMap<String, (Vec<usize>, Vec<f64>)> = model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), (p.tensor.shape().to_vec(), p.tensor.data().iter().map(|&v| v as f64).collect())))
        .collect();
    let (_, base_signs) = oracle_loss(&base, &batch, fm);
    let active: Vec<usize> = {
        let mut v: Vec<usize> = batch.sparse.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let h = 1e-3;
    let (mut checked, mut skipped, mut grad_worst) = (0, 0, 0.0f64);
    let mut grad_ok = true;
    while checked < 60 {
        let pi = rng.random_range(0..model.parameters().len());
        let p = &model.parameters()[pi];
        let elem = if p.component == Component::Embedding {
            active[rng.random_range(0..active.len())] * p.tensor.cols() + rng.random_range(0..p.tensor.cols())
        } else {
            rng.random_range(0..p.tensor.len())
        };
        let mut plus = base.clone();
        plus.get_mut(&p.name).unwrap().1[elem] += h;
        let mut minus = base.clone();
        minus.get_mut(&p.name).unwrap().1[elem] -= h;
        let (lp, sp) = oracle_loss(&plus, &batch, fm);
        let (lm, sm) = oracle_loss(&minus, &batch, fm);
        if sp != base_signs || sm != base_signs {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.materialize(&model, pi).data()[elem] as f64;
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-6 { 0.0 } else { (analytic - numeric).abs() / scale };
        grad_worst = grad_worst.max(rel);
        grad_ok &= rel <= 1e-2;
        checked += 1;
    }
    parts.push(format!("gradients {checked} params worst rel {grad_worst:.2e} ({skipped} kink resamples)"));

    let pass = gemm_ok && auc_ok && fm_ok && grad_ok;
    report(11, pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_12_determinism_and_involution() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = CampaignSpec::new(ExperimentKind::DummyRmse);
    spec.grid = vec![DummyModelConfig { mlp_hidden: 64, embed_dim: 64, ..Default::default() }];
    spec.bers = vec![1e-6, 1e-4, 1e-2];
    spec.runs = 3;
    spec.mitigations = vec![
        MitigationPolicy::with_kind(MitigationKind::None),
        MitigationPolicy::with_kind(MitigationKind::Clip),
    ];
    let mut bytes = Vec::new();
    for (i, workers) in [1usize, 2].into_iter().enumerate() {
        spec.workers = workers;
        let path = dir.path().join(format!("r{i}.csv"));
        emit_results(&run_campaign(&spec).unwrap(), OutputFormat::Csv, &path, false).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    let results_identical = bytes[0] == bytes[1];

    let golden = ModelGraph::build_dummy(&DummyModelConfig::default(), 5).unwrap();
    let mut model = golden.clone();
    let map = build_error_map(&model, &InjectionConfig::new(1e-3, TargetSelector::EntireModel, 5)).unwrap();
    apply_error_map(&mut model, &map).unwrap();
    let changed = model.checksum() != golden.checksum();
    apply_error_map(&mut model, &map).unwrap();
    let involution = changed && model.checksum() == golden.checksum() && model.bit_eq(&golden);

    let mut corrupted = golden.clone();
    apply_error_map(&mut corrupted, &map).unwrap();
    let w = corrupted.find("top.0.weight").unwrap();
    corrupted.tensor_mut(w).set_word(0, f32::INFINITY.to_bits());
    corrupted.tensor_mut(w).set_word(1, 0x7fc0_1234);
    corrupted.tensor_mut(w).set_word(2, f32::NEG_INFINITY.to_bits());
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&corrupted, &ckpt).unwrap();
    let round_trip = load_checkpoint(&ckpt).unwrap().bit_eq(&corrupted);

    let pass = results_identical && involution && round_trip;
    report(
        12,
        pass,
        &format!(
            "results byte-identical {results_identical} ({} bytes); double apply restores checksum {involution}; checkpoint round-trip with non-finite words {round_trip}",
            bytes[0].len()
        ),
    );
    assert!(pass);
}
