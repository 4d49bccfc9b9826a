//! Capsule layers: primary capsules from a patch feature, bottom-up EM
//! routing into patch capsules, and top-down inverted dot-product routing
//! towards attribute capsules.
//!
//! Each routine exists twice: as a builder that records onto an
//! [`autodiff::Graph`](crate::autodiff::Graph) (used by the model so that
//! gradients flow), and as a plain function over tensors that evaluates the
//! same builder with constant leaves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

const TWO_PI: f64 = 2.0 * core::f64::consts::PI;

/// Poses (`N × d`) and activations (`N`, each in `[0, 1]`) of one capsule layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSet {
    poses: Tensor,
    activations: Tensor,
}

impl CapsuleSet {
    pub fn new(poses: Tensor, activations: Tensor) -> Result<Self> {
        let (n, _) = poses.dims2()?;
        if activations.len() != n {
            return Err(Error::shape("capsule set", poses.shape(), activations.shape()));
        }
        if let Some(a) = activations.data().iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("capsule activation {a} outside [0, 1]")));
        }
        let activations = activations.reshape(&[n])?;
        Ok(CapsuleSet { poses, activations })
    }

    pub fn poses(&self) -> &Tensor {
        &self.poses
    }

    pub fn activations(&self) -> &Tensor {
        &self.activations
    }

    pub fn len(&self) -> usize {
        self.poses.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.poses.cols()
    }
}

/// How a child pose casts its vote through a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VoteMode {
    /// The `d`-vector is a row-major `√d × √d` pose matrix `M`, the vote is
    /// `M · T` with `T` of size `√d × √d`.
    #[default]
    MatrixProduct,
    /// The `d`-vector is a row vector `m`, the vote is `m · T` with `T` of
    /// size `d × d`.
    VectorTransform,
}

impl VoteMode {
    /// `(p, q)` such that a pose of dimension `dim` is a `p × q` matrix and
    /// transforms are `q × q`.
    pub fn factors(self, dim: usize) -> Result<(usize, usize)> {
        match self {
            VoteMode::VectorTransform => Ok((1, dim)),
            VoteMode::MatrixProduct => {
                let side = libm::round(libm::sqrt(dim as f64)) as usize;
                if side * side != dim {
                    return Err(Error::Config(format!(
                        "matrix-product votes need a square pose dimension, got {dim}"
                    )));
                }
                Ok((side, side))
            }
        }
    }
}

/// Hyper-parameters of EM routing that are not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Inverse temperature `λ` of the parent activation.
    pub lambda: f64,
    pub iterations: usize,
    /// Lower bound on every per-dimension variance.
    pub sigma_floor: f64,
    pub vote_mode: VoteMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            lambda: 1.0,
            iterations: 5,
            sigma_floor: 1e-6,
            vote_mode: VoteMode::MatrixProduct,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("EM routing needs at least one iteration".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Learned and fixed parameters of one EM routing layer.
///
/// `transforms` is `[N, q, q]` for a single parent, or `[J, N, q, q]` for
/// `J` parents, one transform per child/parent pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRoutingParams {
    pub transforms: Tensor,
    pub beta: f64,
    pub gamma: f64,
    pub config: EmConfig,
}

impl EmRoutingParams {
    pub fn parents(&self) -> usize {
        if self.transforms.rank() == 4 {
            self.transforms.shape()[0]
        } else {
            1
        }
    }
}

/// Result of EM routing: the parent capsules and the responsibilities an
/// E-step assigns after the final M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmOutcome {
    pub parents: CapsuleSet,
    pub responsibilities: Tensor,
}

/// Graph nodes of an EM routing layer.
#[derive(Debug, Clone, Copy)]
pub struct EmNodes {
    /// `J × d` parent poses (the Gaussian means).
    pub poses: Var,
    /// `J × 1` parent activations.
    pub activations: Var,
    /// `N × J` responsibilities from an E-step after the last M-step, when
    /// requested.
    pub responsibilities: Option<Var>,
}

/// Records EM routing.
///
/// * `poses`: `N × d` child poses, `acts`: `N × 1` child activations.
/// * `transforms`: `(J·N·q) × q`, parent-major then child-major.
/// * `beta`, `gamma`: `1 × 1`.
/// * `initial_r`: `N × J` starting responsibilities; uniform when `None`.
///
/// Each iteration runs an M-step; E-steps run between iterations, and once
/// more at the end when `final_e_step` is set.
#[allow(clippy::too_many_arguments)]
pub fn em_routing_graph(
    g: &mut Graph,
    poses: Var,
    acts: Var,
    transforms: Var,
    beta: Var,
    gamma: Var,
    parents: usize,
    config: &EmConfig,
    initial_r: Option<Var>,
    final_e_step: bool,
) -> Result<EmNodes> {
    config.validate()?;
    let (n, d) = g.dims(poses);
    if g.dims(acts) != (n, 1) {
        let (r, c) = g.dims(acts);
        return Err(Error::shape("em_routing activations", &[n, d], &[r, c]));
    }
    let (p, q) = config.vote_mode.factors(d)?;
    if parents == 0 || g.dims(transforms) != (parents * n * q, q) {
        let (r, c) = g.dims(transforms);
        return Err(Error::shape("em_routing transforms", &[parents, n, q, q], &[r, c]));
    }
    let mut votes = Vec::with_capacity(parents);
    for j in 0..parents {
        let t = g.slice_rows(transforms, j * n * q, n * q)?;
        votes.push(g.pose_transform(poses, t, p, q)?);
    }
    let mut r = match initial_r {
        Some(r) => {
            if g.dims(r) != (n, parents) {
                let (a, b) = g.dims(r);
                return Err(Error::shape("em_routing responsibilities", &[n, parents], &[a, b]));
            }
            r
        }
        None => g.constant(&Tensor::filled(&[n, parents], 1.0 / parents as f64)),
    };
    let mut out_poses = Vec::new();
    let mut out_acts = Vec::new();
    let mut log_probs = Vec::new();
    for it in 0..config.iterations {
        out_poses.clear();
        out_acts.clear();
        log_probs.clear();
        for (j, &v) in votes.iter().enumerate() {
            // M-step: responsibilities scaled by child activations.
            let rj = g.column(r, j)?;
            let w = g.mul(rj, acts)?;
            let sw = g.sum_all(w);
            let swb = g.broadcast(sw, 1, d)?;
            let wb = g.broadcast(w, n, d)?;
            let wv = g.mul(wb, v)?;
            let wv_sum = g.sum_rows(wv);
            let mu = g.div(wv_sum, swb)?;
            let mub = g.broadcast(mu, n, d)?;
            let diff = g.sub(v, mub)?;
            let d2 = g.square(diff);
            let wd2 = g.mul(wb, d2)?;
            let wd2_sum = g.sum_rows(wd2);
            let var = g.div(wd2_sum, swb)?;
            let var = g.clamp_min(var, config.sigma_floor);
            // ln P = -½ ln(2πσ²) - (O - μ)² / 2σ²
            let norm = g.scale(var, TWO_PI);
            let norm = g.ln(norm);
            let norm = g.scale(norm, -0.5);
            let norm = g.broadcast(norm, n, d)?;
            let two_var = g.scale(var, 2.0);
            let two_var = g.broadcast(two_var, n, d)?;
            let quad = g.div(d2, two_var)?;
            let ln_p = g.sub(norm, quad)?;
            let wlp = g.mul(wb, ln_p)?;
            let cost = g.sum_all(wlp);
            let cost = g.scale(cost, -1.0);
            // a = logistic(λ(β - γ Σ r - Σ_h cost_h))
            let used = g.mul(gamma, sw)?;
            let x = g.sub(beta, used)?;
            let x = g.sub(x, cost)?;
            let x = g.scale(x, config.lambda);
            out_poses.push(mu);
            out_acts.push(x);
            log_probs.push(ln_p);
        }
        let last = it + 1 == config.iterations;
        if !last || final_e_step {
            // E-step: r_ij ∝ a_j Π_h P^h_ij, normalised over parents.
            let mut logits = Vec::with_capacity(parents);
            for (&x, &lp) in out_acts.iter().zip(&log_probs) {
                let la = g.log_sigmoid(x);
                let la = g.broadcast(la, n, 1)?;
                let lp = g.sum_cols(lp);
                logits.push(g.add(la, lp)?);
            }
            let joined = g.concat_cols(&logits)?;
            r = g.softmax_rows(joined);
        }
    }
    let acts_out: Vec<Var> = out_acts.iter().map(|&x| g.sigmoid(x)).collect();
    let poses_out = g.concat_rows(&out_poses)?;
    let acts_out = g.concat_rows(&acts_out)?;
    for v in [poses_out, acts_out] {
        if let Some(bad) = g.data(v).iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("EM routing produced {bad}")));
        }
    }
    Ok(EmNodes {
        poses: poses_out,
        activations: acts_out,
        responsibilities: final_e_step.then_some(r),
    })
}

fn em_transforms_2d(params: &EmRoutingParams, n: usize, d: usize) -> Result<Tensor> {
    let (_, q) = params.config.vote_mode.factors(d)?;
    let j = params.parents();
    let expected = if params.transforms.rank() == 4 { vec![j, n, q, q] } else { vec![n, q, q] };
    if params.transforms.shape() != expected.as_slice() {
        return Err(Error::shape("em_routing transforms", &expected, params.transforms.shape()));
    }
    params.transforms.reshape(&[j * n * q, q])
}

/// EM routing from `children` to `params.parents()` parent capsules.
pub fn em_routing(children: &CapsuleSet, params: &EmRoutingParams) -> Result<CapsuleSet> {
    Ok(em_routing_from(children, params, None)?.parents)
}

/// EM routing starting from the given `N × J` responsibilities (uniform
/// when `None`). Returns the parents together with the responsibilities of
/// an E-step run after the final M-step, so that calls can be chained.
pub fn em_routing_from(
    children: &CapsuleSet,
    params: &EmRoutingParams,
    initial_r: Option<&Tensor>,
) -> Result<EmOutcome> {
    let (n, d) = (children.len(), children.dim());
    let t2 = em_transforms_2d(params, n, d)?;
    let mut g = Graph::new();
    let poses = g.constant(children.poses());
    let acts = g.constant(&children.activations().reshape(&[n, 1])?);
    let t = g.constant(&t2);
    let beta = g.scalar(params.beta);
    let gamma = g.scalar(params.gamma);
    let r0 = match initial_r {
        Some(r) => Some(g.constant(r)),
        None => None,
    };
    let nodes = em_routing_graph(&mut g, poses, acts, t, beta, gamma, params.parents(), &params.config, r0, true)?;
    let parents = CapsuleSet::new(g.value(nodes.poses), g.value(nodes.activations))?;
    let responsibilities = g.value(nodes.responsibilities.expect("final E-step requested"));
    Ok(EmOutcome { parents, responsibilities })
}

/// Parameters of top-down inverted dot-product routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedRoutingParams {
    /// `[A, d, d]`: one vote transform per parent, shared by all children.
    pub vote_transforms: Tensor,
    pub iterations: usize,
    pub layer_norm_eps: f64,
}

impl InvertedRoutingParams {
    pub fn new(vote_transforms: Tensor, iterations: usize) -> Self {
        InvertedRoutingParams {
            vote_transforms,
            iterations,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

/// Graph nodes produced by inverted routing.
#[derive(Debug, Clone, Copy)]
pub struct InvertedNodes {
    /// `A × d` parent capsules after the last update.
    pub parents: Var,
    /// `R × A` agreements `o_ij` of the last iteration.
    pub agreement: Var,
    /// `R × A` routing weights of the last iteration, each row a softmax
    /// over parents.
    pub routing: Var,
}

/// Records inverted dot-product routing.
///
/// `children` is `R × d`, `parent_init` is `A × d`, and `vote_transforms`
/// is `(A·d) × d` holding `W_j` in rows `j·d..(j+1)·d`. The vote of child
/// `i` for parent `j` is `W_j p_i`; the agreement is `p_jᵀ ν_ij`; routing
/// is a softmax of agreements over parents; parents become the layer norm
/// of their routed vote sums.
pub fn inverted_routing_graph(
    g: &mut Graph,
    children: Var,
    parent_init: Var,
    vote_transforms: Var,
    iterations: usize,
    eps: f64,
) -> Result<InvertedNodes> {
    if iterations == 0 {
        return Err(Error::Config("inverted routing needs at least one iteration".into()));
    }
    let (r, d) = g.dims(children);
    let (a, d2) = g.dims(parent_init);
    if d2 != d {
        return Err(Error::shape("inverted_routing", &[r, d], &[a, d2]));
    }
    if g.dims(vote_transforms) != (a * d, d) {
        let (x, y) = g.dims(vote_transforms);
        return Err(Error::shape("inverted_routing transforms", &[a, d, d], &[x, y]));
    }
    let mut votes = Vec::with_capacity(a);
    for j in 0..a {
        let w = g.slice_rows(vote_transforms, j * d, d)?;
        let wt = g.transpose(w);
        votes.push(g.matmul(children, wt)?);
    }
    let mut parents = parent_init;
    let mut agreement = parent_init;
    let mut routing = parent_init;
    for _ in 0..iterations {
        let mut cols = Vec::with_capacity(a);
        for (j, &v) in votes.iter().enumerate() {
            let pj = g.slice_rows(parents, j, 1)?;
            let pjt = g.transpose(pj);
            cols.push(g.matmul(v, pjt)?);
        }
        agreement = g.concat_cols(&cols)?;
        routing = g.softmax_rows(agreement);
        let mut updated = Vec::with_capacity(a);
        for (j, &v) in votes.iter().enumerate() {
            let rj = g.column(routing, j)?;
            let rjt = g.transpose(rj);
            let s = g.matmul(rjt, v)?;
            updated.push(g.layer_norm_rows(s, eps));
        }
        parents = g.concat_rows(&updated)?;
    }
    Ok(InvertedNodes {
        parents,
        agreement,
        routing,
    })
}

/// Output of [`inverted_routing`].
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedOutcome {
    pub parents: Tensor,
    pub agreement: Tensor,
    pub routing: Tensor,
}

/// Inverted dot-product routing with parents initialised exactly to
/// `parent_init`.
pub fn inverted_routing(
    children: &CapsuleSet,
    parent_init: &Tensor,
    params: &InvertedRoutingParams,
) -> Result<InvertedOutcome> {
    let d = children.dim();
    let (a, _) = parent_init.dims2()?;
    if params.vote_transforms.shape() != [a, d, d] {
        return Err(Error::shape("inverted_routing transforms", &[a, d, d], params.vote_transforms.shape()));
    }
    let mut g = Graph::new();
    let c = g.constant(children.poses());
    let p = g.constant(parent_init);
    let w = g.constant(&params.vote_transforms.reshape(&[a * d, d])?);
    let nodes = inverted_routing_graph(&mut g, c, p, w, params.iterations, params.layer_norm_eps)?;
    let out = InvertedOutcome {
        parents: g.value(nodes.parents),
        agreement: g.value(nodes.agreement),
        routing: g.value(nodes.routing),
    };
    for t in [&out.parents, &out.agreement, &out.routing] {
        t.ensure_finite("inverted routing")?;
    }
    Ok(out)
}

/// Records primary capsules for every row of `features` (`R × D`).
///
/// `proj` is `D × (N·d)` and `act_proj` is `D × N`. Returns, per patch, the
/// `N × d` poses and `N × 1` activations.
pub fn primary_capsules_graph(
    g: &mut Graph,
    features: Var,
    proj: Var,
    act_proj: Var,
) -> Result<Vec<(Var, Var)>> {
    let (r, _) = g.dims(features);
    let (_, nd) = g.dims(proj);
    let (_, n) = g.dims(act_proj);
    if n == 0 || nd % n != 0 {
        return Err(Error::shape("primary_capsules", &[nd], &[n]));
    }
    let d = nd / n;
    let poses = g.matmul(features, proj)?;
    let logits = g.matmul(features, act_proj)?;
    let acts = g.sigmoid(logits);
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = g.slice_rows(poses, i, 1)?;
        let p = g.reshape(row, n, d)?;
        let arow = g.slice_rows(acts, i, 1)?;
        let a = g.reshape(arow, n, 1)?;
        out.push((p, a));
    }
    Ok(out)
}

/// Primary capsules of one patch feature `f` (`D`): poses are `f · proj`
/// split into `N` consecutive capsules of dimension `d`, activations are
/// `sigmoid(f · act_proj)`.
pub fn primary_capsules(f: &Tensor, proj: &Tensor, act_proj: &Tensor) -> Result<CapsuleSet> {
    let dim = f.len();
    let (pd, _) = proj.dims2()?;
    let (ad, _) = act_proj.dims2()?;
    if pd != dim || ad != dim {
        return Err(Error::shape("primary_capsules", f.shape(), proj.shape()));
    }
    let mut g = Graph::new();
    let fv = g.constant(&f.reshape(&[1, dim])?);
    let p = g.constant(proj);
    let a = g.constant(act_proj);
    let caps = primary_capsules_graph(&mut g, fv, p, a)?;
    let (poses, acts) = caps[0];
    CapsuleSet::new(g.value(poses), g.value(acts))
}
