//! Seeded synthetic zero-shot task.
//!
//! Each attribute owns a unit direction `b_a` in feature space. A sample of
//! class `c` carries `z^c_a · b_a` in a few random patches for every
//! attribute with `z^c_a > 0.5`, on top of Gaussian noise. Seen classes
//! `0..C_s` are split into train and test_seen; unseen classes
//! `C_s..C_s+C_u` appear only in test_unseen.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, Split, ZslDataset};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub num_attributes: usize,
    pub num_patches: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub signal_patches_per_attribute: usize,
    /// Attributes switched on (`z > 0.5`) per class.
    pub attributes_per_class: usize,
    /// Fraction of each seen class held out as test_seen.
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seen_classes: 8,
            unseen_classes: 4,
            num_attributes: 12,
            num_patches: 9,
            feature_dim: 64,
            semantic_dim: 32,
            samples_per_class: 40,
            noise_std: 0.1,
            signal_patches_per_attribute: 2,
            attributes_per_class: 4,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.seen_classes < 2 {
            return err("need at least two seen classes");
        }
        if self.unseen_classes < 1 {
            return err("need at least one unseen class");
        }
        if self.num_attributes < 2 {
            return err("need at least two attributes");
        }
        if self.samples_per_class < 2 {
            return err("need at least two samples per class for a train/test split");
        }
        if self.num_patches == 0 || self.feature_dim == 0 || self.semantic_dim == 0 {
            return err("dimensions must be positive");
        }
        if self.attributes_per_class == 0 || self.attributes_per_class > self.num_attributes {
            return err("attributes_per_class must lie in 1..=num_attributes");
        }
        if self.signal_patches_per_attribute == 0 || self.signal_patches_per_attribute > self.num_patches {
            return err("signal_patches_per_attribute must lie in 1..=num_patches");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be finite and nonnegative");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err("test_fraction must lie in (0, 1)");
        }
        if binomial_at_least(self.num_attributes, self.attributes_per_class, self.num_classes()) {
            Ok(())
        } else {
            err("not enough distinct attribute supports for the requested classes")
        }
    }

    /// Held-out samples per seen class.
    pub fn test_per_class(&self) -> usize {
        let n = libm::round(self.samples_per_class as f64 * self.test_fraction) as usize;
        n.clamp(1, self.samples_per_class - 1)
    }
}

/// Whether `n choose k ≥ at_least`, without overflow.
fn binomial_at_least(n: usize, k: usize, at_least: usize) -> bool {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc >= at_least as u128 {
            return true;
        }
    }
    acc >= at_least as u128
}

/// Orthonormalised (Gram-Schmidt) Gaussian directions; past `dim` vectors
/// they are only normalised.
fn attribute_basis(rng: &mut SeededRng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if out.len() < dim {
            for b in &out {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Class attribute rows with pairwise distinct supports.
fn class_attributes(rng: &mut SeededRng, spec: &SyntheticSpec) -> Tensor {
    let (c, a, k) = (spec.num_classes(), spec.num_attributes, spec.attributes_per_class);
    let mut used = BTreeSet::new();
    let mut z = Tensor::zeros(&[c, a]);
    let mut row = 0;
    while row < c {
        let mut support = rng.choose_distinct(a, k);
        support.sort_unstable();
        if !used.insert(support.clone()) {
            continue;
        }
        for j in 0..a {
            let v = if support.contains(&j) { rng.uniform(0.6, 1.0) } else { rng.uniform(0.0, 0.2) };
            z.set(row, j, v);
        }
        row += 1;
    }
    z
}

/// Generates the dataset described by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<ZslDataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let basis = attribute_basis(&mut rng, spec.num_attributes, spec.feature_dim);
    let z = class_attributes(&mut rng, spec);
    let attr_vectors = rng.normal_tensor(&[spec.num_attributes, spec.semantic_dim], 1.0);
    let (r, dim) = (spec.num_patches, spec.feature_dim);
    let n_test = spec.test_per_class();
    let mut samples = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    for c in 0..spec.num_classes() {
        let seen = c < spec.seen_classes;
        for i in 0..spec.samples_per_class {
            let mut f = Tensor::zeros(&[r, dim]);
            for a in 0..spec.num_attributes {
                let za = z.at(c, a);
                if za <= 0.5 {
                    continue;
                }
                for p in rng.choose_distinct(r, spec.signal_patches_per_attribute) {
                    let row = &mut f.data_mut()[p * dim..(p + 1) * dim];
                    for (x, b) in row.iter_mut().zip(&basis[a]) {
                        *x += za * b;
                    }
                }
            }
            if spec.noise_std > 0.0 {
                for x in f.data_mut() {
                    *x += spec.noise_std * rng.normal();
                }
            }
            let split = match (seen, i < n_test) {
                (false, _) => Split::TestUnseen,
                (true, true) => Split::TestSeen,
                (true, false) => Split::Train,
            };
            samples.push(Sample { features: f, label: c, split });
        }
    }
    let seen = (0..spec.seen_classes).collect();
    let unseen = (spec.seen_classes..spec.num_classes()).collect();
    ZslDataset::new(samples, attr_vectors, z, seen, unseen)
}

/// The unit attribute directions `b_a` used by [`generate_synthetic`] for
/// `spec` and `seed`, `A × D`.
pub fn synthetic_basis(spec: &SyntheticSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let basis = attribute_basis(&mut rng, spec.num_attributes, spec.feature_dim);
    Tensor::matrix(spec.num_attributes, spec.feature_dim, basis.concat())
}
