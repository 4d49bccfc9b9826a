//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use hrt::commands::{ablate, evaluate_model, gradcheck, train_dataset, AblationAxis};
use hrt::config::ExperimentConfig;
use hrt_core::capsule::{em_routing_from, inverted_routing, CapsuleSet, InvertedRoutingParams};
use hrt_core::encoder::encode;
use hrt_core::gradcheck::GradCheckOptions;
use hrt_core::loss::{
    attribute_regression_loss, calibration_loss, cross_entropy, predict, total_loss, GammaProfile, LossConfig,
};
use hrt_core::metrics::{evaluate_scores, harmonic_mean, EvalMode};
use hrt_core::synthetic::{generate_synthetic, synthetic_basis, SyntheticSpec};
use hrt_core::{SeededRng, Tensor};

/// Epochs for the end-to-end run; the synthetic task converges in a handful.
const E2E_EPOCHS: usize = 25;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let config = ExperimentConfig::tiny();
    let opts = GradCheckOptions { step: 1e-5, tolerance: 1e-4, ..GradCheckOptions::default() };
    let start = Instant::now();
    let report = gradcheck(&config, &opts).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.passed && report.max_relative_error < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {:.2e} over {} groups in {:.2?}", report.max_relative_error, report.groups.len(), elapsed),
    )
}

fn routing_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let instances = 120;
    for seed in 0..instances {
        let c = em_case(seed);
        let got = em_routing_from(&c.children, &c.params, None).map_err(|e| e.to_string())?;
        let want = run_em_oracle(&c, None);
        worst = worst
            .max(max_diff(&want.poses, got.parents.poses()))
            .max(max_diff_vec(&want.activations, got.parents.activations().data()))
            .max(max_diff(&want.responsibilities, &got.responsibilities));

        let mut rng = SeededRng::new(1000 + seed);
        let (r, a, d, iterations) = (1 + rng.index(6), 1 + rng.index(5), 2 + rng.index(5), 1 + rng.index(4));
        let children = CapsuleSet::new(rng.normal_tensor(&[r, d], 1.0), Tensor::filled(&[r], 1.0)).unwrap();
        let init = rng.normal_tensor(&[a, d], 1.0);
        let w = rng.normal_tensor(&[a, d, d], 1.0 / (d as f64).sqrt());
        let params = InvertedRoutingParams::new(w.clone(), iterations);
        let got = inverted_routing(&children, &init, &params).map_err(|e| e.to_string())?;
        let wj: Vec<Vec<f64>> = (0..a).map(|j| w.data()[j * d * d..(j + 1) * d * d].to_vec()).collect();
        let want = inverted_oracle(&to_mat(children.poses()), &to_mat(&init), &wj, iterations, params.layer_norm_eps);
        worst = worst
            .max(max_diff(&want.parents, &got.parents))
            .max(max_diff(&want.agreement, &got.agreement))
            .max(max_diff(&want.routing, &got.routing));
    }
    check(worst < 1e-9, format!("{instances} EM + {instances} inverted instances, max deviation {worst:.2e}"))
}

fn simplex_invariants() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for seed in 0..250u64 {
        let model = small_model(seed, 1 + (seed as usize % 5), 2);
        let mut rng = SeededRng::new(seed + 7);
        for _ in 0..4 {
            let r = 1 + rng.index(9);
            let scale = 1.0 + 5.0 * rng.next_f64();
            let f = rng.normal_tensor(&[r, 6], scale);
            let out = encode(&f, &model.semantics, &model.encoder, &model.config.encoder).map_err(|e| e.to_string())?;
            worst = worst.max(out.invariant_error(&f).map_err(|e| e.to_string())?);
            n += 1;
        }
    }
    check(n >= 1000 && worst < 1e-9, format!("{n} encoder evaluations, max deviation {worst:.2e}"))
}

fn loss_identities() -> Outcome {
    let mut cal_vs_ce: f64 = 0.0;
    let mut additivity: f64 = 0.0;
    let mut shifts = 0;
    for seed in 0..200u64 {
        let mut rng = SeededRng::new(seed);
        let c = 2 + rng.index(7);
        let s = rng.normal_tensor(&[c], 3.0);
        let zero = Tensor::zeros(&[c]);
        for label in 0..c {
            let a = calibration_loss(&s, label, &zero).unwrap();
            cal_vs_ce = cal_vs_ce.max((a - cross_entropy(&s, label).unwrap()).abs());
        }

        // Quarter steps keep sums exact.
        let grid = Tensor::vector((0..c).map(|_| rng.index(40) as f64 / 4.0).collect()).unwrap();
        let shift = rng.index(200) as f64 / 4.0 - 25.0;
        let gamma = GammaProfile::CUB_SUN.offsets(c, &[c - 1]).unwrap();
        if predict(&grid, &gamma).unwrap() != predict(&grid.map(|x| x + shift), &gamma).unwrap() {
            return Err(format!("prediction moved under a shift of {shift} (seed {seed})"));
        }
        shifts += 1;

        let model = small_model(seed, 4, 5);
        let f = rng.normal_tensor(&[3, 6], 1.0);
        let (seen, unseen) = ([0usize, 1, 2], [3usize, 4]);
        let mut cfg = LossConfig::new(5, &seen, &unseen, GammaProfile::CUB_SUN).unwrap();
        cfg.lambda1 = rng.uniform(0.0, 1.0);
        cfg.lambda2 = rng.uniform(0.0, 1.0);
        let label = rng.index(3);
        let fw = model.forward(&f).unwrap();
        let seen_scores = Tensor::vector(seen.iter().map(|&k| fw.scores.data()[k]).collect()).unwrap();
        let ce = cross_entropy(&seen_scores, label).unwrap();
        let cal = calibration_loss(&fw.scores, label, &cfg.gamma_per_class).unwrap();
        let z = Tensor::vector(model.semantics.class_attr().row(label).to_vec()).unwrap();
        let reg = attribute_regression_loss(&fw.psi, &z).unwrap();
        let total = total_loss(&model, &f, label, &cfg).unwrap().total;
        additivity = additivity.max((total - (ce + cfg.lambda1 * cal + cfg.lambda2 * reg)).abs());
    }
    check(
        cal_vs_ce < 1e-10 && additivity < 1e-10,
        format!("cal(γ=0) vs ce {cal_vs_ce:.1e}, additivity {additivity:.1e}, {shifts} exact shift checks"),
    )
}

fn metric_anchors() -> Outcome {
    let a = harmonic_mean(0.635, 0.621);
    let b = harmonic_mean(0.787, 0.589);
    check((a - 0.628).abs() <= 5e-4 && (b - 0.674).abs() <= 5e-4, format!("h(0.635, 0.621) = {a:.4}, h(0.787, 0.589) = {b:.4}"))
}

/// Cosine between each class attribute row and the strongest response of
/// every attribute direction over the patches.
fn nearest_attribute_scores(f: &Tensor, basis: &Tensor, z: &Tensor) -> Tensor {
    let detected: Vec<f64> = (0..basis.rows())
        .map(|k| {
            (0..f.rows())
                .map(|p| f.row(p).iter().zip(basis.row(k)).map(|(x, y)| x * y).sum::<f64>())
                .fold(f64::MIN, f64::max)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Tensor::vector(
        (0..z.rows())
            .map(|c| z.row(c).iter().zip(&detected).map(|(x, y)| x * y).sum::<f64>() / (norm(z.row(c)) * norm(&detected)))
            .collect(),
    )
    .unwrap()
}

fn end_to_end() -> Outcome {
    let mut config = ExperimentConfig::default();
    let spec = config.synthetic;
    let expected = SyntheticSpec {
        seen_classes: 8,
        unseen_classes: 4,
        num_attributes: 12,
        num_patches: 9,
        feature_dim: 64,
        samples_per_class: 40,
        noise_std: 0.1,
        ..spec
    };
    if spec != expected || config.data_seed != 0 || config.loss.gamma.profile() != GammaProfile::CUB_SUN {
        return Err("default configuration does not describe the acceptance task".into());
    }
    let start = Instant::now();
    let ds = generate_synthetic(&spec, 0).map_err(|e| e.to_string())?;
    let basis = synthetic_basis(&spec, 0).map_err(|e| e.to_string())?;
    let oracle = evaluate_scores(&ds, EvalMode::Both, GammaProfile::ZERO, |f| Ok(nearest_attribute_scores(f, &basis, ds.class_attr())))
        .map_err(|e| e.to_string())?;
    let (ot1, oh) = (oracle.t1.unwrap(), oracle.h.unwrap());
    if ot1 < 0.6 || oh < 0.5 {
        return Err(format!("thresholds unreachable: oracle t1 {ot1:.3}, h {oh:.3}"));
    }
    config.train.epochs = E2E_EPOCHS;
    let (model, _) = train_dataset(&config, &ds, |_| {}).map_err(|e| e.to_string())?;
    let m = evaluate_model(&config, &model, &ds, EvalMode::Both).map_err(|e| e.to_string())?.metrics;
    let (t1, h) = (m.t1.unwrap(), m.h.unwrap());
    let elapsed = start.elapsed();
    check(
        t1 >= 0.6 && h >= 0.5 && elapsed < Duration::from_secs(600),
        format!(
            "{E2E_EPOCHS} epochs: t1 {t1:.3} tr {:.3} ts {:.3} h {h:.3} (oracle t1 {ot1:.3}, h {oh:.3}) in {elapsed:.1?}",
            m.tr.unwrap(),
            m.ts.unwrap()
        ),
    )
}

fn run_pipeline(root: &Path, config: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let bin = env!("CARGO_BIN_EXE_hrt");
    let (data, run, eval) = (root.join("data"), root.join("run"), root.join("eval"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let steps: [Vec<String>; 3] = [
        vec!["gen".into(), "--out".into(), s(&data)],
        vec!["train".into(), "--data".into(), s(&data), "--out".into(), s(&run), "--quiet".into()],
        vec!["eval".into(), "--checkpoint".into(), s(&run.join("checkpoint.bin")), "--data".into(), s(&data), "--out".into(), s(&eval)],
    ];
    for args in steps {
        let out = Command::new(bin).arg("--config").arg(config).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
    Ok((read(&eval.join("metrics.json"))?, read(&run.join("history.csv"))?))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig::tiny();
    config.synthetic.samples_per_class = 6;
    config.train.epochs = 3;
    let path = dir.path().join("config.json");
    fs::write(&path, config.to_json()).map_err(|e| e.to_string())?;
    let a = run_pipeline(&dir.path().join("a"), &path)?;
    let b = run_pipeline(&dir.path().join("b"), &path)?;
    check(a == b, format!("metrics.json {} bytes, history.csv {} bytes, identical: {}", a.0.len(), a.1.len(), a == b))
}

fn ablation() -> Outcome {
    let mut config = ExperimentConfig::default();
    config.train.epochs = 1;
    let start = Instant::now();
    let rows = ablate(&config, AblationAxis::Both, |_| {}).map_err(|e| e.to_string())?;
    let finite = rows.iter().filter(|r| r.metrics.is_finite() && r.metrics.h.is_some()).count();
    check(rows.len() == 10 && finite == 10, format!("{finite}/{} runs finite in {:.1?}", rows.len(), start.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("routing oracle equivalence", routing_oracles),
        ("simplex invariants", simplex_invariants),
        ("loss identities", loss_identities),
        ("metric formula anchors", metric_anchors),
        ("end-to-end learning", end_to_end),
        ("determinism", determinism),
        ("ablation harness", ablation),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
