//! Training objective: cross-entropy, calibrated cross-entropy and attribute
//! regression, plus calibrated prediction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::HrtModel;
use crate::tensor::{log_sum_exp_minus, Tensor};

/// Per-class score offsets `γ_c`: one value for seen classes, one for
/// unseen classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaProfile {
    pub seen: f64,
    pub unseen: f64,
}

impl GammaProfile {
    /// Fine-grained profile: seen −0.5, unseen +1.
    pub const CUB_SUN: GammaProfile = GammaProfile { seen: -0.5, unseen: 1.0 };
    /// Coarse-grained profile: seen −0.8, unseen +1.
    pub const AWA2: GammaProfile = GammaProfile { seen: -0.8, unseen: 1.0 };
    pub const ZERO: GammaProfile = GammaProfile { seen: 0.0, unseen: 0.0 };

    /// Offsets for `num_classes` classes, `unseen` listing the unseen ones.
    pub fn offsets(&self, num_classes: usize, unseen: &[usize]) -> Result<Tensor> {
        let mut g = alloc::vec![self.seen; num_classes];
        for &c in unseen {
            *g.get_mut(c).ok_or(Error::Index { index: c, len: num_classes })? = self.unseen;
        }
        Tensor::vector(g)
    }
}

impl Default for GammaProfile {
    fn default() -> Self {
        GammaProfile::CUB_SUN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the calibration term.
    pub lambda1: f64,
    /// Weight of the attribute-regression term.
    pub lambda2: f64,
    /// `γ_c` for every class.
    pub gamma_per_class: Tensor,
    /// Classes the plain cross-entropy normalises over; all classes when
    /// `None`. Training sets this to the seen classes.
    pub ce_classes: Option<Vec<usize>>,
}

impl LossConfig {
    pub const LAMBDA1: f64 = 0.1;
    pub const LAMBDA2: f64 = 0.033;

    /// Default weights with offsets from `profile`, cross-entropy over the
    /// seen classes.
    pub fn new(num_classes: usize, seen: &[usize], unseen: &[usize], profile: GammaProfile) -> Result<Self> {
        Ok(LossConfig {
            lambda1: Self::LAMBDA1,
            lambda2: Self::LAMBDA2,
            gamma_per_class: profile.offsets(num_classes, unseen)?,
            ce_classes: Some(seen.to_vec()),
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {} and {}", self.lambda1, self.lambda2)));
        }
        if self.gamma_per_class.len() != num_classes {
            return Err(Error::shape("gamma_per_class", &[num_classes], self.gamma_per_class.shape()));
        }
        if let Some(cs) = &self.ce_classes {
            if cs.is_empty() {
                return Err(Error::Config("cross-entropy class set is empty".into()));
            }
            if let Some(&bad) = cs.iter().find(|&&c| c >= num_classes) {
                return Err(Error::Index { index: bad, len: num_classes });
            }
        }
        Ok(())
    }

    /// Position of `label` among the cross-entropy classes.
    fn ce_position(&self, label: usize) -> Result<usize> {
        match &self.ce_classes {
            None => Ok(label),
            Some(cs) => cs
                .iter()
                .position(|&c| c == label)
                .ok_or_else(|| Error::Config(format!("label {label} is not a training class"))),
        }
    }
}

/// `−log softmax(s)[label]`.
pub fn cross_entropy(s: &Tensor, label: usize) -> Result<f64> {
    if label >= s.len() {
        return Err(Error::Index { index: label, len: s.len() });
    }
    Ok(log_sum_exp_minus(s.data(), label))
}

/// Cross-entropy of the offset scores `s + γ`.
pub fn calibration_loss(s: &Tensor, label: usize, gamma: &Tensor) -> Result<f64> {
    if gamma.len() != s.len() {
        return Err(Error::shape("calibration_loss", s.shape(), gamma.shape()));
    }
    let shifted = Tensor::vector(s.data().iter().zip(gamma.data()).map(|(a, b)| a + b).collect())?;
    cross_entropy(&shifted, label)
}

/// `Σ_a (ψ_a − z_a)²`.
pub fn attribute_regression_loss(psi: &Tensor, z_true: &Tensor) -> Result<f64> {
    if psi.len() != z_true.len() {
        return Err(Error::shape("attribute_regression_loss", psi.shape(), z_true.shape()));
    }
    Ok(psi.data().iter().zip(z_true.data()).map(|(p, z)| (p - z) * (p - z)).sum())
}

/// `argmax_c (s^c + γ_c)`, lowest index on ties.
pub fn predict(s: &Tensor, gamma: &Tensor) -> Result<usize> {
    if gamma.len() != s.len() {
        return Err(Error::shape("predict", s.shape(), gamma.shape()));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, (x, g)) in s.data().iter().zip(gamma.data()).enumerate() {
        let v = x + g;
        if v > best_v {
            best = c;
            best_v = v;
        }
    }
    Ok(best)
}

/// Plain argmax restricted to `candidates`, lowest class index on ties.
pub fn predict_among(s: &Tensor, candidates: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        let v = s.data()[c];
        match best {
            Some((bc, bv)) if v < bv || (v == bv && c > bc) => {}
            _ => best = Some((c, v)),
        }
    }
    best.map(|b| b.0)
}

/// The three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cal: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(ce: f64, cal: f64, reg: f64, config: &LossConfig) -> Self {
        LossBreakdown {
            ce,
            cal,
            reg,
            total: ce + config.lambda1 * cal + config.lambda2 * reg,
        }
    }
}

/// Loss of one labelled sample together with its gradient for every model
/// parameter (in [`PARAMETER_NAMES`](crate::model::PARAMETER_NAMES) order).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
    pub scores: Tensor,
}

fn record_loss(model: &HrtModel, features: &Tensor, label: usize, config: &LossConfig, trainable: bool) -> Result<(Graph, crate::model::ForwardNodes, [crate::autodiff::Var; 4])> {
    let c = model.num_classes();
    config.validate(c)?;
    if label >= c {
        return Err(Error::Index { index: label, len: c });
    }
    let mut g = Graph::new();
    let nodes = model.record(&mut g, features, trainable)?;
    let scores = nodes.decoder.scores;
    let ce = match &config.ce_classes {
        None => g.cross_entropy(scores, label)?,
        Some(cs) => {
            let pos = config.ce_position(label)?;
            let picked = g.gather(scores, cs)?;
            g.cross_entropy(picked, pos)?
        }
    };
    let gamma = g.constant(&config.gamma_per_class);
    let shifted = g.add(scores, gamma)?;
    let cal = g.cross_entropy(shifted, label)?;
    let z = g.constant(&Tensor::from_parts(alloc::vec![1, model.semantics.num_attributes()], model.semantics.class_attr().row(label).to_vec()));
    let diff = g.sub(nodes.decoder.psi, z)?;
    let sq = g.square(diff);
    let reg = g.sum_all(sq);
    let wcal = g.scale(cal, config.lambda1);
    let wreg = g.scale(reg, config.lambda2);
    let total = g.add(ce, wcal)?;
    let total = g.add(total, wreg)?;
    Ok((g, nodes, [ce, cal, reg, total]))
}

/// Forward value of the three-part loss for one sample.
pub fn total_loss(model: &HrtModel, features: &Tensor, label: usize, config: &LossConfig) -> Result<LossBreakdown> {
    let (g, _, [ce, cal, reg, total]) = record_loss(model, features, label, config, false)?;
    let out = LossBreakdown {
        ce: g.scalar_value(ce),
        cal: g.scalar_value(cal),
        reg: g.scalar_value(reg),
        total: g.scalar_value(total),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {out:?}")));
    }
    Ok(out)
}

/// Three-part loss for one sample and its gradient.
pub fn total_loss_with_grad(model: &HrtModel, features: &Tensor, label: usize, config: &LossConfig) -> Result<LossWithGrad> {
    let (g, nodes, [ce, cal, reg, total]) = record_loss(model, features, label, config, true)?;
    let grads = g.backward(total)?;
    let grads = nodes
        .leaves()
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| grads.get_or_zeros(&g, v).reshape(p.shape()))
        .collect::<Result<Vec<Tensor>>>()?;
    let n = model.num_classes();
    Ok(LossWithGrad {
        loss: LossBreakdown {
            ce: g.scalar_value(ce),
            cal: g.scalar_value(cal),
            reg: g.scalar_value(reg),
            total: g.scalar_value(total),
        },
        grads,
        scores: Tensor::from_parts(alloc::vec![n], g.data(nodes.decoder.scores).to_vec()),
    })
}
