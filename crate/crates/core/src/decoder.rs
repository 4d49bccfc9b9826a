//! Static-routing decoder. Attribute gates `sigmoid(v_aᵀ W_β h_a)` rescale
//! the class attribute vectors, content scores `ψ_a = h_aᵀ W^d v_a` measure
//! how strongly each attribute is present, and the class score is
//! `s^c = Σ_a ψ_a z̃^c_a`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::AlignedFeatures;
use crate::error::{Error, Result};
use crate::semantics::SemanticSpace;
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// `W_β`, `τ × D`.
    pub w_beta: Tensor,
    /// `W^d`, `D × τ`.
    pub w_d: Tensor,
}

impl DecoderParams {
    fn check(&self, h: &Tensor, semantics: &SemanticSpace) -> Result<()> {
        let (d_feat, a) = h.dims2()?;
        let tau = semantics.semantic_dim();
        if a != semantics.num_attributes() {
            return Err(Error::shape("decoder attributes", h.shape(), semantics.attr_vectors().shape()));
        }
        if self.w_beta.shape() != [tau, d_feat] {
            return Err(Error::shape("decoder W_beta", &[tau, d_feat], self.w_beta.shape()));
        }
        if self.w_d.shape() != [d_feat, tau] {
            return Err(Error::shape("decoder W_d", &[d_feat, tau], self.w_d.shape()));
        }
        Ok(())
    }

    pub fn record(&self, g: &mut Graph, trainable: bool) -> DecoderVars {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        DecoderVars {
            w_beta: leaf(g, &self.w_beta),
            w_d: leaf(g, &self.w_d),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w_beta: Var,
    pub w_d: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    /// `1 × A` attribute gates.
    pub gates: Var,
    /// `1 × A` content-aware attribute scores `ψ`.
    pub psi: Var,
    /// `C × A` adjusted class attributes `z̃`.
    pub z_tilde: Var,
    /// `1 × C` class scores.
    pub scores: Var,
}

/// Records the decoder on top of `h` (`D × A`).
pub fn decode_graph(g: &mut Graph, vars: &DecoderVars, h: Var, semantics: &SemanticSpace) -> Result<DecoderNodes> {
    let lambda = g.constant(&semantics.attr_vectors().transpose()?);
    let class_attr = g.constant(semantics.class_attr());
    let (c, a) = g.dims(class_attr);
    let wh = g.matmul(vars.w_beta, h)?;
    let gate_in = g.mul(wh, lambda)?;
    let gate_in = g.sum_rows(gate_in);
    let gates = g.sigmoid(gate_in);
    let wv = g.matmul(vars.w_d, lambda)?;
    let hv = g.mul(h, wv)?;
    let psi = g.sum_rows(hv);
    let gb = g.broadcast(gates, c, a)?;
    let z_tilde = g.mul(class_attr, gb)?;
    let psi_t = g.transpose(psi);
    let s = g.matmul(z_tilde, psi_t)?;
    let scores = g.transpose(s);
    Ok(DecoderNodes {
        gates,
        psi,
        z_tilde,
        scores,
    })
}

/// `z̃^c_a = sigmoid(v_aᵀ W_β h_a) · z^c_a` for every class, `C × A`.
pub fn adjust_class_attributes(h: &AlignedFeatures, semantics: &SemanticSpace, params: &DecoderParams) -> Result<Tensor> {
    params.check(&h.h, semantics)?;
    // Only the diagonal of Λᵀ W_β H is needed.
    let wh = params.w_beta.matmul(&h.h)?;
    let v = semantics.attr_vectors();
    let gates: Vec<f64> = (0..h.num_attributes())
        .map(|a| sigmoid(v.row(a).iter().enumerate().map(|(t, x)| x * wh.at(t, a)).sum()))
        .collect();
    let z = semantics.class_attr();
    Ok(Tensor::from_fn(z.rows(), z.cols(), |c, a| gates[a] * z.at(c, a)))
}

/// `ψ_a = h_aᵀ W^d v_a`, the diagonal of `Hᵀ W^d Λ`.
pub fn content_attribute_scores(h: &AlignedFeatures, semantics: &SemanticSpace, params: &DecoderParams) -> Result<Tensor> {
    params.check(&h.h, semantics)?;
    let wv = params.w_d.matmul(&semantics.attr_vectors().transpose()?)?;
    let (d_feat, a) = h.h.dims2()?;
    let psi = (0..a).map(|j| (0..d_feat).map(|i| h.h.at(i, j) * wv.at(i, j)).sum()).collect();
    Tensor::vector(psi)
}

/// `s^c = Σ_a ψ_a z̃^c_a`.
pub fn class_scores(psi: &Tensor, z_tilde: &Tensor) -> Result<Tensor> {
    let (c, a) = z_tilde.dims2()?;
    if psi.len() != a {
        return Err(Error::shape("class_scores", psi.shape(), z_tilde.shape()));
    }
    let s = (0..c)
        .map(|k| z_tilde.row(k).iter().zip(psi.data()).map(|(z, p)| z * p).sum())
        .collect();
    Tensor::vector(s)
}
