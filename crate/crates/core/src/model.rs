//! The full model: encoder and decoder parameters plus the cached semantic
//! space they were built for.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{decode_graph, DecoderNodes, DecoderParams, DecoderVars};
use crate::encoder::{encode_graph, AlignedFeatures, EncoderConfig, EncoderNodes, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::semantics::SemanticSpace;
use crate::tensor::Tensor;

/// Names of the trainable tensors, in the order used by
/// [`HrtModel::parameters`] and by gradients.
pub const PARAMETER_NAMES: [&str; 8] = [
    "primary_proj",
    "primary_act_proj",
    "em_transforms",
    "em_beta",
    "em_gamma",
    "vote_transforms",
    "w_beta",
    "w_d",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch feature dimension `D`.
    pub feature_dim: usize,
    /// Primary capsules per patch.
    pub num_primary: usize,
    /// Capsule dimension `d`, shared by patch and attribute capsules.
    pub capsule_dim: usize,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            num_primary: 128,
            capsule_dim: 16,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrtModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub semantics: SemanticSpace,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub aligned: AlignedFeatures,
    /// `A` attribute gates.
    pub gates: Tensor,
    /// `A` content-aware attribute scores.
    pub psi: Tensor,
    /// `C × A`.
    pub z_tilde: Tensor,
    /// `C` class scores.
    pub scores: Tensor,
}

/// Tape handles of a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub encoder_vars: EncoderVars,
    pub decoder_vars: DecoderVars,
    pub encoder: EncoderNodes,
    pub decoder: DecoderNodes,
}

impl ForwardNodes {
    /// Parameter leaves in [`PARAMETER_NAMES`] order.
    pub fn leaves(&self) -> [Var; 8] {
        let e = &self.encoder_vars;
        let d = &self.decoder_vars;
        [e.proj, e.act_proj, e.em_transforms, e.beta, e.gamma, e.vote_transforms, d.w_beta, d.w_d]
    }
}

impl HrtModel {
    /// Seeded initialisation: every weight uniform in `±1/√fan_in`, the EM
    /// `β` and `γ` zero.
    pub fn init(config: ModelConfig, semantics: SemanticSpace, seed: u64) -> Result<Self> {
        config.encoder.em.validate()?;
        if config.encoder.td_iterations == 0 {
            return Err(Error::Config("top-down routing needs at least one iteration".into()));
        }
        if config.feature_dim == 0 || config.num_primary == 0 || config.capsule_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if semantics.compact_dim() != config.capsule_dim {
            return Err(Error::shape("compact vectors vs capsule dimension", &[config.capsule_dim], semantics.compact_vectors().shape()));
        }
        let (_, q) = config.encoder.em.vote_mode.factors(config.capsule_dim)?;
        let (d_feat, n, d) = (config.feature_dim, config.num_primary, config.capsule_dim);
        let a = semantics.num_attributes();
        let tau = semantics.semantic_dim();
        let mut rng = SeededRng::new(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / libm::sqrt(fan_in as f64);
            rng.uniform_tensor(shape, -b, b)
        };
        let encoder = EncoderParams {
            proj: uniform(&[d_feat, n * d], d_feat),
            act_proj: uniform(&[d_feat, n], d_feat),
            em_transforms: uniform(&[n, q, q], q),
            beta: 0.0,
            gamma: 0.0,
            vote_transforms: uniform(&[a, d, d], d),
        };
        let decoder = DecoderParams {
            w_beta: uniform(&[tau, d_feat], d_feat),
            w_d: uniform(&[d_feat, tau], tau),
        };
        Ok(HrtModel {
            config,
            encoder,
            decoder,
            semantics,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.semantics.num_classes()
    }

    /// Trainable tensors in [`PARAMETER_NAMES`] order; `β` and `γ` are
    /// `1 × 1`.
    pub fn parameters(&self) -> Vec<Tensor> {
        vec![
            self.encoder.proj.clone(),
            self.encoder.act_proj.clone(),
            self.encoder.em_transforms.clone(),
            Tensor::scalar(self.encoder.beta),
            Tensor::scalar(self.encoder.gamma),
            self.encoder.vote_transforms.clone(),
            self.decoder.w_beta.clone(),
            self.decoder.w_d.clone(),
        ]
    }

    pub fn parameter_names() -> Vec<String> {
        PARAMETER_NAMES.iter().map(|s| String::from(*s)).collect()
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let current = self.parameters();
        if params.len() != current.len() {
            return Err(Error::shape("set_parameters", &[current.len()], &[params.len()]));
        }
        for ((new, old), name) in params.iter().zip(&current).zip(PARAMETER_NAMES) {
            if new.shape() != old.shape() {
                return Err(Error::shape("set_parameters", old.shape(), new.shape()));
            }
            new.ensure_finite(&format!("parameter {name}"))?;
        }
        let mut it = params.iter().cloned();
        let mut next = || it.next().expect("length checked");
        self.encoder.proj = next();
        self.encoder.act_proj = next();
        self.encoder.em_transforms = next();
        self.encoder.beta = next().data()[0];
        self.encoder.gamma = next().data()[0];
        self.encoder.vote_transforms = next();
        self.decoder.w_beta = next();
        self.decoder.w_d = next();
        Ok(())
    }

    /// Records one forward pass of `features` (`R × D`) on `g`.
    pub fn record(&self, g: &mut Graph, features: &Tensor, trainable: bool) -> Result<ForwardNodes> {
        let (_, d_feat) = features.dims2()?;
        if d_feat != self.config.feature_dim {
            return Err(Error::shape("model features", &[self.config.feature_dim], features.shape()));
        }
        let encoder_vars = self.encoder.record(g, trainable)?;
        let decoder_vars = self.decoder.record(g, trainable);
        let encoder = encode_graph(g, &encoder_vars, &self.config.encoder, features, self.semantics.compact_vectors())?;
        let decoder = decode_graph(g, &decoder_vars, encoder.h, &self.semantics)?;
        Ok(ForwardNodes {
            encoder_vars,
            decoder_vars,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Forward> {
        let mut g = Graph::new();
        let nodes = self.record(&mut g, features, false)?;
        let flat = |t: Tensor| {
            let n = t.len();
            t.reshape(&[n])
        };
        let out = Forward {
            aligned: AlignedFeatures {
                h: g.value(nodes.encoder.h),
                attention: g.value(nodes.encoder.attention),
                agreement: g.value(nodes.encoder.agreement),
            },
            gates: flat(g.value(nodes.decoder.gates))?,
            psi: flat(g.value(nodes.decoder.psi))?,
            z_tilde: g.value(nodes.decoder.z_tilde),
            scores: flat(g.value(nodes.decoder.scores))?,
        };
        out.scores.ensure_finite("class scores")?;
        Ok(out)
    }

    /// Class scores only.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward(features)?.scores)
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(Tensor::is_finite)
    }
}
