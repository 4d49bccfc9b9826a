//! Attribute semantics: the `τ`-dimensional attribute vectors, their
//! `d`-dimensional compaction, and the class attribute matrix.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attribute vectors `v_a` (`A × τ`), compact vectors `ṽ_a` (`A × d`) and
/// class attributes `z^c` (`C × A`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSpace {
    attr_vectors: Tensor,
    compact_vectors: Tensor,
    class_attr: Tensor,
    attribute_names: Option<Vec<String>>,
}

impl SemanticSpace {
    pub fn new(attr_vectors: Tensor, compact_vectors: Tensor, class_attr: Tensor) -> Result<Self> {
        let (a, _) = attr_vectors.dims2()?;
        let (a2, _) = compact_vectors.dims2()?;
        let (c, a3) = class_attr.dims2()?;
        if a2 != a {
            return Err(Error::shape("semantic space compact vectors", attr_vectors.shape(), compact_vectors.shape()));
        }
        if a3 != a {
            return Err(Error::shape("semantic space class attributes", attr_vectors.shape(), class_attr.shape()));
        }
        if c < 2 {
            return Err(Error::Config(format!("need at least two classes, got {c}")));
        }
        for (t, name) in [(&attr_vectors, "attribute vectors"), (&compact_vectors, "compact vectors"), (&class_attr, "class attributes")] {
            t.ensure_finite(name)?;
        }
        Ok(SemanticSpace {
            attr_vectors,
            compact_vectors,
            class_attr,
            attribute_names: None,
        })
    }

    /// Builds the space, deriving the compact vectors from `attr_vectors`.
    pub fn compacted(attr_vectors: Tensor, class_attr: Tensor, compaction: &CompactionConfig, supplied: Option<&Tensor>) -> Result<Self> {
        let compact = compact_semantics(&attr_vectors, compaction, supplied)?;
        SemanticSpace::new(attr_vectors, compact, class_attr)
    }

    pub fn with_attribute_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_attributes() {
            return Err(Error::shape("attribute names", &[names.len()], &[self.num_attributes()]));
        }
        self.attribute_names = Some(names);
        Ok(self)
    }

    pub fn attr_vectors(&self) -> &Tensor {
        &self.attr_vectors
    }

    pub fn compact_vectors(&self) -> &Tensor {
        &self.compact_vectors
    }

    pub fn class_attr(&self) -> &Tensor {
        &self.class_attr
    }

    pub fn attribute_names(&self) -> Option<&[String]> {
        self.attribute_names.as_deref()
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_vectors.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_attr.rows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.attr_vectors.cols()
    }

    pub fn compact_dim(&self) -> usize {
        self.compact_vectors.cols()
    }

    /// Same space with the compact vectors replaced.
    pub fn with_compact_vectors(&self, compact: Tensor) -> Result<Self> {
        let mut s = SemanticSpace::new(self.attr_vectors.clone(), compact, self.class_attr.clone())?;
        s.attribute_names = self.attribute_names.clone();
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CompactionMethod {
    #[default]
    FactorAnalysis,
    Pca,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompactionConfig {
    pub method: CompactionMethod,
    /// Target dimension `d`.
    pub dim: usize,
    /// EM iterations for factor analysis.
    pub iterations: usize,
}

impl Default for CompactionConfig {
    fn default() -> Self {
        CompactionConfig {
            method: CompactionMethod::FactorAnalysis,
            dim: 16,
            iterations: 50,
        }
    }
}

/// Reduces `v` (`A × τ`) to `A × d` compact attribute vectors.
///
/// `supplied` is returned unchanged for [`CompactionMethod::Precomputed`]
/// and ignored otherwise.
pub fn compact_semantics(v: &Tensor, config: &CompactionConfig, supplied: Option<&Tensor>) -> Result<Tensor> {
    let (a, tau) = v.dims2()?;
    let d = config.dim;
    match config.method {
        CompactionMethod::Precomputed => {
            let s = supplied.ok_or_else(|| Error::Config("precomputed compaction without supplied vectors".into()))?;
            if s.shape() != [a, d] {
                return Err(Error::shape("precomputed compact vectors", &[a, d], s.shape()));
            }
            Ok(s.clone())
        }
        CompactionMethod::Pca => {
            check_reducible(a, tau, d)?;
            pca_scores(v, d)
        }
        CompactionMethod::FactorAnalysis => {
            check_reducible(a, tau, d)?;
            Ok(factor_analysis(v, d, config.iterations)?.scores)
        }
    }
}

fn check_reducible(a: usize, tau: usize, d: usize) -> Result<()> {
    if d == 0 || tau < d {
        return Err(Error::shape("compact_semantics", &[tau], &[d]));
    }
    if a < 2 {
        return Err(Error::Degenerate(format!("{a} attribute vector(s); need at least 2")));
    }
    Ok(())
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Column-centred rows and their population covariance.
fn centred_covariance(v: &Tensor) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let x = to_matrix(v);
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let cov = xc.transpose() * &xc / n;
    if cov.trace() <= f64::EPSILON * (1.0 + cov.norm()) {
        return Err(Error::Degenerate("attribute vectors have zero variance".into()));
    }
    Ok((xc, cov))
}

/// Top-`d` eigenpairs of a symmetric matrix, eigenvalues descending. Each
/// eigenvector is signed so its largest-magnitude entry is positive.
fn top_eigen(cov: &DMatrix<f64>, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let p = cov.nrows();
    let mut vecs = DMatrix::zeros(p, d);
    let mut vals = Vec::with_capacity(d);
    for (k, &i) in order.iter().take(d).enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let pivot = col.iter().copied().fold(0.0_f64, |m, x| if libm::fabs(x) > libm::fabs(m) { x } else { m });
        if pivot < 0.0 {
            col = -col;
        }
        vecs.set_column(k, &col);
        vals.push(eig.eigenvalues[i]);
    }
    (vals, vecs)
}

/// Projections of the centred rows onto the top-`d` principal axes.
pub fn pca_scores(v: &Tensor, d: usize) -> Result<Tensor> {
    let (xc, cov) = centred_covariance(v)?;
    let (_, axes) = top_eigen(&cov, d);
    Ok(from_matrix(&(xc * axes)))
}

/// A fitted `d`-factor model `x = μ + Λ z + ε`, `ε ~ N(0, diag(ψ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorAnalysisFit {
    /// `τ × d`.
    pub loadings: Tensor,
    /// Diagonal of `Ψ`, length `τ`.
    pub noise_variance: Tensor,
    /// Posterior means `E[z | x_a]`, `A × d`.
    pub scores: Tensor,
    /// Average log-likelihood per row before each EM iteration and after
    /// the last one (`iterations + 1` entries).
    pub log_likelihood: Vec<f64>,
}

/// Terms of the factor model that every step needs, computed through the
/// `d × d` Woodbury form instead of inverting `Σ = ΛΛᵀ + Ψ` directly.
struct Posterior {
    /// `β = Λᵀ Σ⁻¹` (`d × τ`).
    beta: DMatrix<f64>,
    log_likelihood: f64,
}

fn posterior(loadings: &DMatrix<f64>, psi: &[f64], cov: &DMatrix<f64>) -> Result<Posterior> {
    let (p, d) = loadings.shape();
    let mut lt_psi_inv = loadings.transpose();
    for j in 0..p {
        lt_psi_inv.column_mut(j).scale_mut(1.0 / psi[j]);
    }
    let inner = DMatrix::identity(d, d) + &lt_psi_inv * loadings;
    let chol = inner
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("factor model posterior covariance is not positive definite".into()))?;
    let g = chol.inverse();
    let beta = &g * &lt_psi_inv;
    let log_det_inner: f64 = 2.0 * chol.l().diagonal().iter().map(|x| libm::log(*x)).sum::<f64>();
    let log_det = psi.iter().map(|x| libm::log(*x)).sum::<f64>() + log_det_inner;
    // tr(Σ⁻¹ S) = tr(Ψ⁻¹ S) - tr(Ψ⁻¹ Λ β S)
    let tr_psi_s: f64 = (0..p).map(|j| cov[(j, j)] / psi[j]).sum();
    let lbs = loadings * (&beta * cov);
    let tr_corr: f64 = (0..p).map(|j| lbs[(j, j)] / psi[j]).sum();
    let ll = -0.5 * (p as f64 * libm::log(2.0 * core::f64::consts::PI) + log_det + tr_psi_s - tr_corr);
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("factor analysis log-likelihood {ll}")));
    }
    Ok(Posterior { beta, log_likelihood: ll })
}

/// Fits a `d`-factor model to the rows of `v` by EM and returns posterior
/// factor scores per row. Initialised from the principal axes.
pub fn factor_analysis(v: &Tensor, d: usize, iterations: usize) -> Result<FactorAnalysisFit> {
    let (a, tau) = v.dims2()?;
    check_reducible(a, tau, d)?;
    let (xc, cov) = centred_covariance(v)?;
    let floor = 1e-6 * (cov.trace() / tau as f64);
    let (vals, axes) = top_eigen(&cov, d);
    let mut loadings = axes.clone();
    for (k, val) in vals.iter().enumerate() {
        loadings.column_mut(k).scale_mut(libm::sqrt(val.max(0.0)) * 0.9);
    }
    let mut psi: Vec<f64> = (0..tau)
        .map(|j| (cov[(j, j)] - loadings.row(j).norm_squared()).max(floor).max(0.1 * cov[(j, j)]))
        .collect();
    let mut history = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let post = posterior(&loadings, &psi, &cov)?;
        history.push(post.log_likelihood);
        let beta = post.beta;
        // E[zzᵀ] averaged over rows: I - βΛ + β S βᵀ.
        let bs = &beta * &cov;
        let ezz = DMatrix::identity(d, d) - &beta * &loadings + &bs * beta.transpose();
        let ezz_inv = ezz
            .cholesky()
            .ok_or_else(|| Error::Degenerate("factor second moment is not positive definite".into()))?
            .inverse();
        loadings = bs.transpose() * ezz_inv;
        let lbs = &loadings * &bs;
        for j in 0..tau {
            psi[j] = (cov[(j, j)] - lbs[(j, j)]).max(floor);
        }
    }
    let post = posterior(&loadings, &psi, &cov)?;
    history.push(post.log_likelihood);
    let scores = xc * post.beta.transpose();
    Ok(FactorAnalysisFit {
        loadings: from_matrix(&loadings),
        noise_variance: Tensor::from_parts(alloc::vec![tau], psi),
        scores: from_matrix(&scores),
        log_likelihood: history,
    })
}
