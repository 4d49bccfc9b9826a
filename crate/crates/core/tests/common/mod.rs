//! Straight-loop reference implementations shared by the integration tests.
//! They work on nested `Vec`s and follow the defining equations one index
//! at a time, without the tape or any tensor helper from the crate.

#![allow(dead_code)]

use hrt_core::capsule::{CapsuleSet, EmConfig, EmRoutingParams, VoteMode};
use hrt_core::{SeededRng, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (j, x) in row.iter().enumerate() {
            m = m.max((x - b.at(i, j)).abs());
        }
    }
    m
}

pub fn max_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ln_sigm(x: f64) -> f64 {
    if x < 0.0 {
        x - x.exp().ln_1p()
    } else {
        -(-x).exp().ln_1p()
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub struct EmOracle {
    /// `J × d`.
    pub poses: Mat,
    /// `J`.
    pub activations: Vec<f64>,
    /// `N × J`, from one more E-step after the last M-step.
    pub responsibilities: Mat,
}

/// EM routing. `transforms[j][i]` is the `q × q` matrix of child `i` for
/// parent `j`, row-major; each pose is a row-major `p × q` matrix.
#[allow(clippy::too_many_arguments)]
pub fn em_oracle(
    poses: &Mat,
    acts: &[f64],
    transforms: &[Vec<Vec<f64>>],
    p: usize,
    q: usize,
    beta: f64,
    gamma: f64,
    lambda: f64,
    iterations: usize,
    floor: f64,
    initial_r: Option<&Mat>,
) -> EmOracle {
    let n = poses.len();
    let parents = transforms.len();
    let d = p * q;
    // votes[j][i][h]
    let mut votes = vec![vec![vec![0.0; d]; n]; parents];
    for j in 0..parents {
        for i in 0..n {
            let t = &transforms[j][i];
            for row in 0..p {
                for col in 0..q {
                    let mut s = 0.0;
                    for k in 0..q {
                        s += poses[i][row * q + k] * t[k * q + col];
                    }
                    votes[j][i][row * q + col] = s;
                }
            }
        }
    }
    let mut r: Mat = match initial_r {
        Some(r) => r.clone(),
        None => vec![vec![1.0 / parents as f64; parents]; n],
    };
    let mut mu = vec![vec![0.0; d]; parents];
    let mut x = vec![0.0; parents];
    let mut lnp = vec![vec![vec![0.0; d]; n]; parents];
    for it in 0..=iterations {
        if it > 0 {
            // E-step
            for i in 0..n {
                let logits: Vec<f64> = (0..parents)
                    .map(|j| ln_sigm(x[j]) + lnp[j][i].iter().sum::<f64>())
                    .collect();
                r[i] = softmax(&logits);
            }
        }
        if it == iterations {
            break;
        }
        // M-step
        for j in 0..parents {
            let w: Vec<f64> = (0..n).map(|i| r[i][j] * acts[i]).collect();
            let sw: f64 = w.iter().sum();
            let mut cost = 0.0;
            for h in 0..d {
                let m = (0..n).map(|i| w[i] * votes[j][i][h]).sum::<f64>() / sw;
                let v = ((0..n).map(|i| w[i] * (votes[j][i][h] - m).powi(2)).sum::<f64>() / sw).max(floor);
                mu[j][h] = m;
                for i in 0..n {
                    let l = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (votes[j][i][h] - m).powi(2) / (2.0 * v);
                    lnp[j][i][h] = l;
                    cost -= w[i] * l;
                }
            }
            x[j] = lambda * (beta - gamma * sw - cost);
        }
    }
    EmOracle {
        poses: mu,
        activations: x.iter().map(|&v| sigm(v)).collect(),
        responsibilities: r,
    }
}

pub struct InvertedOracle {
    pub parents: Mat,
    pub agreement: Mat,
    pub routing: Mat,
}

/// Inverted dot-product routing; `w[j]` is a row-major `d × d` matrix and
/// the vote of child `i` for parent `j` is `w[j] · children[i]`.
pub fn inverted_oracle(children: &Mat, init: &Mat, w: &[Vec<f64>], iterations: usize, eps: f64) -> InvertedOracle {
    let r = children.len();
    let a = init.len();
    let d = init[0].len();
    let mut votes = vec![vec![vec![0.0; d]; a]; r];
    for i in 0..r {
        for j in 0..a {
            for k in 0..d {
                votes[i][j][k] = (0..d).map(|l| w[j][k * d + l] * children[i][l]).sum();
            }
        }
    }
    let mut parents = init.clone();
    let mut agreement = vec![vec![0.0; a]; r];
    let mut routing = vec![vec![0.0; a]; r];
    for _ in 0..iterations {
        for i in 0..r {
            for j in 0..a {
                agreement[i][j] = (0..d).map(|k| parents[j][k] * votes[i][j][k]).sum();
            }
            routing[i] = softmax(&agreement[i]);
        }
        for j in 0..a {
            let s: Vec<f64> = (0..d).map(|k| (0..r).map(|i| routing[i][j] * votes[i][j][k]).sum()).collect();
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            parents[j] = s.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect();
        }
    }
    InvertedOracle { parents, agreement, routing }
}

/// Primary capsule poses (`N × d`) and activations of one feature row.
pub fn primary_oracle(f: &[f64], proj: &Mat, act_proj: &Mat, n: usize) -> (Mat, Vec<f64>) {
    let nd = proj[0].len();
    let d = nd / n;
    let flat: Vec<f64> = (0..nd).map(|c| f.iter().enumerate().map(|(k, x)| x * proj[k][c]).sum()).collect();
    let poses = (0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect();
    let acts = (0..n).map(|c| sigm(f.iter().enumerate().map(|(k, x)| x * act_proj[k][c]).sum())).collect();
    (poses, acts)
}

pub struct EncodeOracle {
    pub h: Mat,
    pub attention: Mat,
    pub agreement: Mat,
}

/// The full encoder composed from the primitive oracles above.
#[allow(clippy::too_many_arguments)]
pub fn encode_oracle(
    features: &Mat,
    proj: &Mat,
    act_proj: &Mat,
    n: usize,
    em_transforms: &[Vec<f64>],
    p: usize,
    q: usize,
    beta: f64,
    gamma: f64,
    lambda: f64,
    em_iterations: usize,
    floor: f64,
    compact: &Mat,
    vote_transforms: &[Vec<f64>],
    td_iterations: usize,
    eps: f64,
) -> EncodeOracle {
    let children: Mat = features
        .iter()
        .map(|f| {
            let (poses, acts) = primary_oracle(f, proj, act_proj, n);
            let t = vec![em_transforms.to_vec()];
            em_oracle(&poses, &acts, &t, p, q, beta, gamma, lambda, em_iterations, floor, None).poses.remove(0)
        })
        .collect();
    let inv = inverted_oracle(&children, compact, vote_transforms, td_iterations, eps);
    let r = features.len();
    let a = compact.len();
    let mut attention = vec![vec![0.0; a]; r];
    for j in 0..a {
        let col: Vec<f64> = (0..r).map(|i| inv.agreement[i][j]).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            attention[i][j] = v;
        }
    }
    let dim = features[0].len();
    let h = (0..dim)
        .map(|k| (0..a).map(|j| (0..r).map(|i| features[i][k] * attention[i][j]).sum()).collect())
        .collect();
    EncodeOracle { h, attention, agreement: inv.agreement }
}

pub struct DecodeOracle {
    pub gates: Vec<f64>,
    pub psi: Vec<f64>,
    pub z_tilde: Mat,
    pub scores: Vec<f64>,
}

/// Decoder: `h` is `D × A`, `v` is `A × τ`, `w_beta` is `τ × D`, `w_d` is
/// `D × τ`, `z` is `C × A`.
pub fn decode_oracle(h: &Mat, v: &Mat, w_beta: &Mat, w_d: &Mat, z: &Mat) -> DecodeOracle {
    let dim = h.len();
    let a = v.len();
    let tau = v[0].len();
    let mut gates = vec![0.0; a];
    let mut psi = vec![0.0; a];
    for j in 0..a {
        let mut g = 0.0;
        let mut s = 0.0;
        for t in 0..tau {
            for k in 0..dim {
                g += v[j][t] * w_beta[t][k] * h[k][j];
                s += h[k][j] * w_d[k][t] * v[j][t];
            }
        }
        gates[j] = sigm(g);
        psi[j] = s;
    }
    let z_tilde: Mat = z.iter().map(|row| row.iter().zip(&gates).map(|(x, g)| x * g).collect()).collect();
    let scores = z_tilde.iter().map(|row| row.iter().zip(&psi).map(|(x, p)| x * p).sum()).collect();
    DecodeOracle { gates, psi, z_tilde, scores }
}

/// A small randomly initialised model: `D = 6`, `N = 3`, `d = 4`, `A`
/// attributes, `τ = 5`, `C` classes, EM with vector votes.
pub fn small_model(seed: u64, a: usize, c: usize) -> hrt_core::model::HrtModel {
    use hrt_core::model::{HrtModel, ModelConfig};
    use hrt_core::semantics::SemanticSpace;
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let semantics = SemanticSpace::new(
        rng.normal_tensor(&[a, 5], 1.0),
        rng.normal_tensor(&[a, 4], 1.0),
        rng.uniform_tensor(&[c, a], 0.0, 1.0),
    )
    .unwrap();
    let mut config = ModelConfig { feature_dim: 6, num_primary: 3, capsule_dim: 4, ..ModelConfig::default() };
    config.encoder.em.vote_mode = VoteMode::VectorTransform;
    config.encoder.em.iterations = 2;
    HrtModel::init(config, semantics, seed).unwrap()
}

/// A random EM routing instance: 1 to 6 children, 1 to 3 parents, either
/// vote mode.
pub struct EmCase {
    pub children: CapsuleSet,
    pub params: EmRoutingParams,
    pub p: usize,
    pub q: usize,
}

pub fn em_case(seed: u64) -> EmCase {
    let mut rng = SeededRng::new(seed);
    let n = 1 + rng.index(6);
    let parents = 1 + rng.index(3);
    let (mode, d) = if rng.index(2) == 0 {
        (VoteMode::MatrixProduct, [4, 9][rng.index(2)])
    } else {
        (VoteMode::VectorTransform, 2 + rng.index(4))
    };
    let (p, q) = mode.factors(d).unwrap();
    let poses = rng.normal_tensor(&[n, d], 1.0);
    let acts = rng.uniform_tensor(&[n], 0.05, 1.0);
    let shape: Vec<usize> = if parents == 1 && rng.index(2) == 0 { vec![n, q, q] } else { vec![parents, n, q, q] };
    let transforms = rng.normal_tensor(&shape, 1.0 / (q as f64).sqrt());
    let config = EmConfig {
        lambda: rng.uniform(0.2, 2.0),
        iterations: 1 + rng.index(4),
        sigma_floor: 1e-6,
        vote_mode: mode,
    };
    EmCase {
        children: CapsuleSet::new(poses, acts).unwrap(),
        params: EmRoutingParams { transforms, beta: rng.uniform(-1.0, 1.0), gamma: rng.uniform(-0.5, 0.5), config },
        p,
        q,
    }
}

pub fn oracle_transforms(params: &EmRoutingParams, n: usize, q: usize) -> Vec<Vec<Vec<f64>>> {
    let parents = params.parents();
    let flat = params.transforms.data();
    (0..parents)
        .map(|j| (0..n).map(|i| flat[(j * n + i) * q * q..(j * n + i + 1) * q * q].to_vec()).collect())
        .collect()
}

pub fn run_em_oracle(c: &EmCase, initial_r: Option<&Mat>) -> EmOracle {
    let n = c.children.len();
    let cfg = &c.params.config;
    em_oracle(
        &to_mat(c.children.poses()),
        c.children.activations().data(),
        &oracle_transforms(&c.params, n, c.q),
        c.p,
        c.q,
        c.params.beta,
        c.params.gamma,
        cfg.lambda,
        cfg.iterations,
        cfg.sigma_floor,
        initial_r,
    )
}
