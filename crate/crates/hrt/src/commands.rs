//! The work behind each CLI subcommand, callable in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hrt_core::dataset::{Split, ZslDataset};
use hrt_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use hrt_core::loss::{total_loss, total_loss_with_grad};
use hrt_core::metrics::{evaluate, EvalMode, Metrics};
use hrt_core::model::HrtModel;
use hrt_core::synthetic::generate_synthetic;
use hrt_core::train::{train_with, EpochRecord, History};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset_io::{load_dataset, write_dataset, Dtype};
use crate::error::{HrtError, Result};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HrtError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HrtError::io(path, e))
}

/// Generates the configured synthetic dataset into `out`.
pub fn gen(config: &ExperimentConfig, out: &Path, dtype: Dtype) -> Result<ZslDataset> {
    config.validate()?;
    let ds = generate_synthetic(&config.synthetic, config.data_seed)?;
    ensure_dir(out)?;
    write_dataset(out, &ds, dtype)?;
    config.write(out)?;
    Ok(ds)
}

/// Trains a fresh model on the dataset in `data` and writes
/// `checkpoint.bin`, `history.csv` and `config.json` into `out`.
pub fn train<F>(config: &ExperimentConfig, data: &Path, out: &Path, on_epoch: F) -> Result<(HrtModel, History)>
where
    F: FnMut(&EpochRecord),
{
    let ds = load_dataset(data)?;
    let (model, history) = train_dataset(config, &ds, on_epoch)?;
    ensure_dir(out)?;
    save_checkpoint(&out.join("checkpoint.bin"), &model, config.init_seed, &config.hash())?;
    write_text(&out.join("history.csv"), &history.to_csv())?;
    config.write(out)?;
    Ok((model, history))
}

/// Builds and trains a model in memory.
pub fn train_dataset<F>(config: &ExperimentConfig, ds: &ZslDataset, on_epoch: F) -> Result<(HrtModel, History)>
where
    F: FnMut(&EpochRecord),
{
    let mut model = config.build_model(ds)?;
    let loss = config.loss_config(ds)?;
    let history = train_with(ds, &mut model, &loss, config.optimizer, &config.train, on_epoch)?;
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub gamma_seen: f64,
    pub gamma_unseen: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialise");
        s.push('\n');
        s
    }
}

pub fn evaluate_model(config: &ExperimentConfig, model: &HrtModel, ds: &ZslDataset, mode: EvalMode) -> Result<MetricsReport> {
    let profile = config.loss.gamma.profile();
    let metrics = evaluate(model, ds, mode, profile)?;
    Ok(MetricsReport {
        mode,
        gamma_seen: profile.seen,
        gamma_unseen: profile.unseen,
        metrics,
    })
}

/// Evaluates a checkpoint and writes `metrics.json` and `config.json`.
pub fn eval(config: &ExperimentConfig, checkpoint: &Path, data: &Path, mode: EvalMode, out: &Path) -> Result<MetricsReport> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate_model(config, &model, &ds, mode)?;
    ensure_dir(out)?;
    write_text(&out.join("metrics.json"), &report.to_json())?;
    config.write(out)?;
    Ok(report)
}

/// Finite-difference check of the full loss gradient on the first training
/// sample of the configured synthetic dataset.
pub fn gradcheck(config: &ExperimentConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let ds = generate_synthetic(&config.synthetic, config.data_seed)?;
    let model = config.build_model(&ds)?;
    gradcheck_model(config, &ds, &model, opts)
}

pub fn gradcheck_model(config: &ExperimentConfig, ds: &ZslDataset, model: &HrtModel, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let loss = config.loss_config(ds)?;
    let sample = ds
        .split(Split::Train)
        .next()
        .ok_or_else(|| hrt_core::Error::Config("training split is empty".into()))?;
    let analytic = total_loss_with_grad(model, &sample.features, sample.label, &loss)?;
    let mut probe = model.clone();
    let report = grad_check(
        |p| {
            probe.set_parameters(p)?;
            Ok(total_loss(&probe, &sample.features, sample.label, &loss)?.total)
        },
        &model.parameters(),
        &analytic.grads,
        &HrtModel::parameter_names(),
        opts,
    )?;
    Ok(report)
}

pub fn gradcheck_text(report: &GradCheckReport) -> String {
    let mut s = String::new();
    for g in &report.groups {
        let _ = writeln!(
            s,
            "{:<18} n={:<6} max_rel_err={:.3e} (index {}, analytic {:.6e}, numeric {:.6e})",
            g.name, g.count, g.max_relative_error, g.worst_index, g.analytic, g.numeric
        );
    }
    let _ = writeln!(
        s,
        "{}: max relative error {:.3e}, tolerance {:.1e}",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_relative_error,
        report.tolerance
    );
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    KTd,
    KEm,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: usize,
    pub metrics: Metrics,
}

pub const ABLATION_VALUES: [usize; 5] = [1, 2, 3, 4, 5];

/// Trains and evaluates once per iteration count on the configured
/// synthetic dataset.
pub fn ablate<F>(config: &ExperimentConfig, axis: AblationAxis, mut on_row: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    let ds = generate_synthetic(&config.synthetic, config.data_seed)?;
    let mut axes = Vec::new();
    if axis != AblationAxis::KEm {
        axes.push("k_td");
    }
    if axis != AblationAxis::KTd {
        axes.push("k_em");
    }
    let mut rows = Vec::new();
    for name in axes {
        for value in ABLATION_VALUES {
            let mut c = *config;
            match name {
                "k_td" => c.model.encoder.td_iterations = value,
                _ => c.model.encoder.em.iterations = value,
            }
            let (model, _) = train_dataset(&c, &ds, |_| {})?;
            let report = evaluate_model(&c, &model, &ds, EvalMode::Both)?;
            let row = AblationRow { axis: name, value, metrics: report.metrics };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "axis,value,t1,tr,ts,h";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    let f = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in rows {
        let m = r.metrics;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.axis, r.value, f(m.t1), f(m.tr), f(m.ts), f(m.h));
    }
    s
}

/// Writes the agreement map `Φ` of every selected sample as CSV rows
/// `sample_index,label,split,patch,<one column per attribute>`.
pub fn report(checkpoint: &Path, data: &Path, split: Option<Split>, limit: Option<usize>, out: &Path) -> Result<usize> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let text = agreement_csv(&model, &ds, split, limit)?;
    ensure_dir(out)?;
    write_text(&out.join("agreement.csv"), &text.0)?;
    Ok(text.1)
}

pub fn agreement_csv(model: &HrtModel, ds: &ZslDataset, split: Option<Split>, limit: Option<usize>) -> Result<(String, usize)> {
    let mut s = String::from("sample_index,label,split,patch");
    for a in 0..ds.num_attributes() {
        let _ = write!(s, ",a{a}");
    }
    s.push('\n');
    let mut n = 0;
    for (i, sample) in ds.samples().iter().enumerate() {
        if split.is_some_and(|sp| sp != sample.split) {
            continue;
        }
        if limit.is_some_and(|l| n >= l) {
            break;
        }
        let phi = model.forward(&sample.features)?.aligned.agreement;
        for r in 0..phi.rows() {
            let _ = write!(s, "{i},{},{},{r}", sample.label, sample.split.as_str());
            for &x in phi.row(r) {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
        n += 1;
    }
    Ok((s, n))
}
