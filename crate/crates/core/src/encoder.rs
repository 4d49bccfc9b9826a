//! Encoder: patch features → patch capsules (EM routing) → attribute
//! capsules (inverted routing initialised from the compact attribute
//! vectors) → attribute-aligned features `H = V · softmax_R(Φ)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::capsule::{em_routing_graph, inverted_routing_graph, primary_capsules_graph, EmConfig};
use crate::error::{Error, Result};
use crate::semantics::SemanticSpace;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub em: EmConfig,
    /// Iterations of top-down routing.
    pub td_iterations: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            em: EmConfig::default(),
            td_iterations: 2,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

/// Learned encoder tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `D × (N·d)` primary-capsule pose projection.
    pub proj: Tensor,
    /// `D × N` primary-capsule activation projection.
    pub act_proj: Tensor,
    /// `[N, q, q]` EM vote transforms, one per primary capsule.
    pub em_transforms: Tensor,
    pub beta: f64,
    pub gamma: f64,
    /// `[A, d, d]` top-down vote transforms, one per attribute.
    pub vote_transforms: Tensor,
}

impl EncoderParams {
    pub fn num_primary(&self) -> usize {
        self.act_proj.cols()
    }

    pub fn capsule_dim(&self) -> usize {
        self.proj.cols() / self.num_primary()
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.rows()
    }

    /// Puts every encoder tensor on the tape, as parameters when
    /// `trainable`, otherwise as constants.
    pub fn record(&self, g: &mut Graph, trainable: bool) -> Result<EncoderVars> {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let [n, q, _] = *self.em_transforms.shape() else {
            return Err(Error::shape("em transforms", self.em_transforms.shape(), &[0, 0, 0]));
        };
        let t2 = self.em_transforms.reshape(&[n * q, q])?;
        let [a, d, _] = *self.vote_transforms.shape() else {
            return Err(Error::shape("vote transforms", self.vote_transforms.shape(), &[0, 0, 0]));
        };
        let w2 = self.vote_transforms.reshape(&[a * d, d])?;
        Ok(EncoderVars {
            proj: leaf(g, &self.proj),
            act_proj: leaf(g, &self.act_proj),
            em_transforms: leaf(g, &t2),
            beta: leaf(g, &Tensor::scalar(self.beta)),
            gamma: leaf(g, &Tensor::scalar(self.gamma)),
            vote_transforms: leaf(g, &w2),
        })
    }
}

/// Tape handles for [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub proj: Var,
    pub act_proj: Var,
    pub em_transforms: Var,
    pub beta: Var,
    pub gamma: Var,
    pub vote_transforms: Var,
}

/// Tape handles for one encoded sample.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    /// `D × A`.
    pub h: Var,
    /// `R × A`, softmax of the agreement over patches.
    pub attention: Var,
    /// `R × A` agreement `Φ` of the last top-down iteration.
    pub agreement: Var,
    /// `R × d` patch capsules.
    pub patch_capsules: Var,
}

/// Records the encoder for `features` (`R × D`, a constant) with parents
/// initialised to `compact` (`A × d`).
pub fn encode_graph(
    g: &mut Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    features: &Tensor,
    compact: &Tensor,
) -> Result<EncoderNodes> {
    let (_, d_feat) = features.dims2()?;
    let (proj_rows, _) = g.dims(vars.proj);
    if proj_rows != d_feat {
        return Err(Error::shape("encode features", features.shape(), &[proj_rows]));
    }
    let f = g.constant(features);
    let primaries = primary_capsules_graph(g, f, vars.proj, vars.act_proj)?;
    let d = g.dims(primaries[0].0).1;
    if compact.cols() != d {
        return Err(Error::shape("encode capsule dimension", &[d], compact.shape()));
    }
    let mut patches = Vec::with_capacity(primaries.len());
    for &(poses, acts) in &primaries {
        let em = em_routing_graph(g, poses, acts, vars.em_transforms, vars.beta, vars.gamma, 1, &config.em, None, false)?;
        patches.push(em.poses);
    }
    let children = g.concat_rows(&patches)?;
    let init = g.constant(compact);
    let routed = inverted_routing_graph(g, children, init, vars.vote_transforms, config.td_iterations, config.layer_norm_eps)?;
    let attention = g.softmax_cols(routed.agreement);
    let ft = g.transpose(f);
    let h = g.matmul(ft, attention)?;
    Ok(EncoderNodes {
        h,
        attention,
        agreement: routed.agreement,
        patch_capsules: children,
    })
}

/// Attribute-aligned features of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedFeatures {
    /// `D × A`; column `a` is `h_a`.
    pub h: Tensor,
    /// `R × A`; each column is a distribution over patches.
    pub attention: Tensor,
    /// `R × A` agreement `Φ` the attention was computed from.
    pub agreement: Tensor,
}

impl AlignedFeatures {
    /// Builds `H = Vᵀ · softmax_R(Φ)` directly from an agreement matrix.
    pub fn from_agreement(features: &Tensor, agreement: &Tensor) -> Result<Self> {
        let attention = agreement.softmax(0)?;
        let h = features.transpose()?.matmul(&attention)?;
        Ok(AlignedFeatures {
            h,
            attention,
            agreement: agreement.clone(),
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.h.cols()
    }

    /// Largest deviation from the two invariants: every attention column a
    /// distribution over patches, and `h` equal to `Vᵀ · attention`.
    pub fn invariant_error(&self, features: &Tensor) -> Result<f64> {
        let (r, a) = self.attention.dims2()?;
        let mut worst: f64 = 0.0;
        for j in 0..a {
            let mut s = 0.0;
            for i in 0..r {
                let x = self.attention.at(i, j);
                if x < 0.0 {
                    worst = worst.max(-x);
                }
                s += x;
            }
            worst = worst.max(libm::fabs(s - 1.0));
        }
        let h = features.transpose()?.matmul(&self.attention)?;
        Ok(worst.max(h.max_abs_diff(&self.h)))
    }
}

/// Encodes `patch_features` (`R × D`).
pub fn encode(
    patch_features: &Tensor,
    semantics: &SemanticSpace,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<AlignedFeatures> {
    let a = semantics.num_attributes();
    if params.vote_transforms.shape()[0] != a {
        return Err(Error::shape("encode attributes", &[a], params.vote_transforms.shape()));
    }
    let mut g = Graph::new();
    let vars = params.record(&mut g, false)?;
    let nodes = encode_graph(&mut g, &vars, config, patch_features, semantics.compact_vectors())?;
    let out = AlignedFeatures {
        h: g.value(nodes.h),
        attention: g.value(nodes.attention),
        agreement: g.value(nodes.agreement),
    };
    out.h.ensure_finite("encoder output")?;
    Ok(out)
}
