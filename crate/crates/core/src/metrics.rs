//! Per-class top-1 accuracy, the harmonic mean, and ZSL / GZSL evaluation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, ZslDataset};
use crate::error::{Error, Result};
use crate::loss::{predict, predict_among, GammaProfile};
use crate::model::HrtModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Unseen test samples, candidates restricted to unseen classes.
    Zsl,
    /// Both test splits, all classes with calibration offsets.
    Gzsl,
    Both,
}

/// Accuracies in `[0, 1]`; fields the mode did not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub t1: Option<f64>,
    pub tr: Option<f64>,
    pub ts: Option<f64>,
    pub h: Option<f64>,
}

impl Metrics {
    pub fn is_finite(&self) -> bool {
        [self.t1, self.tr, self.ts, self.h].iter().flatten().all(|x| x.is_finite())
    }
}

/// `2·tr·ts / (tr + ts)`, and 0 when both are 0.
pub fn harmonic_mean(tr: f64, ts: f64) -> f64 {
    if tr + ts == 0.0 {
        0.0
    } else {
        2.0 * tr * ts / (tr + ts)
    }
}

/// Unweighted mean over classes of per-class top-1 accuracy. `pairs` are
/// `(true label, predicted label)`; classes without samples are skipped.
pub fn per_class_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("accuracy over an empty set".into()));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(y, p) in pairs {
        let e = counts.entry(y).or_default();
        e.0 += usize::from(y == p);
        e.1 += 1;
    }
    let sum: f64 = counts.values().map(|&(ok, n)| ok as f64 / n as f64).sum();
    Ok(sum / counts.len() as f64)
}

/// Evaluates any scorer mapping patch features to `C` class scores.
pub fn evaluate_scores<F>(dataset: &ZslDataset, mode: EvalMode, profile: GammaProfile, mut score: F) -> Result<Metrics>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let c = dataset.num_classes();
    let gamma = profile.offsets(c, dataset.unseen_classes())?;
    let want_zsl = mode != EvalMode::Gzsl;
    let want_gzsl = mode != EvalMode::Zsl;
    let mut zsl = Vec::new();
    let mut seen_pairs = Vec::new();
    let mut unseen_pairs = Vec::new();
    for s in dataset.samples() {
        if s.split == Split::Train || (s.split == Split::TestSeen && !want_gzsl) {
            continue;
        }
        let scores = score(&s.features)?;
        if scores.len() != c {
            return Err(Error::shape("evaluate scores", &[c], scores.shape()));
        }
        scores.ensure_finite("class scores")?;
        if want_zsl && s.split == Split::TestUnseen {
            let p = predict_among(&scores, dataset.unseen_classes()).expect("unseen classes are nonempty");
            zsl.push((s.label, p));
        }
        if want_gzsl {
            let p = predict(&scores, &gamma)?;
            match s.split {
                Split::TestSeen => seen_pairs.push((s.label, p)),
                _ => unseen_pairs.push((s.label, p)),
            }
        }
    }
    let mut m = Metrics::default();
    if want_zsl {
        m.t1 = Some(per_class_accuracy(&zsl)?);
    }
    if want_gzsl {
        let tr = per_class_accuracy(&seen_pairs)?;
        let ts = per_class_accuracy(&unseen_pairs)?;
        m.tr = Some(tr);
        m.ts = Some(ts);
        m.h = Some(harmonic_mean(tr, ts));
    }
    Ok(m)
}

/// Evaluates `model` on the test splits of `dataset`.
pub fn evaluate(model: &HrtModel, dataset: &ZslDataset, mode: EvalMode, profile: GammaProfile) -> Result<Metrics> {
    if model.num_classes() != dataset.num_classes() || model.semantics.num_attributes() != dataset.num_attributes() {
        return Err(Error::shape(
            "evaluate",
            &[model.num_classes(), model.semantics.num_attributes()],
            &[dataset.num_classes(), dataset.num_attributes()],
        ));
    }
    evaluate_scores(dataset, mode, profile, |f| model.scores(f))
}
