//! Labelled patch-feature samples with seen/unseen class partition and
//! train / test splits.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{CompactionConfig, SemanticSpace};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestSeen, Split::TestUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `R × D` patch features.
    pub features: Tensor,
    pub label: usize,
    pub split: Split,
}

/// A zero-shot dataset. Attribute vectors and class attributes are kept
/// raw; the compacted [`SemanticSpace`] is built for a model on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZslDataset {
    samples: Vec<Sample>,
    /// `A × τ`.
    attr_vectors: Tensor,
    /// `C × A`.
    class_attr: Tensor,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl ZslDataset {
    /// Validates every invariant: consistent sample shapes, finite values,
    /// disjoint class sets covering every class, training and seen-test
    /// labels seen, unseen-test labels unseen.
    pub fn new(samples: Vec<Sample>, attr_vectors: Tensor, class_attr: Tensor, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        let (a, _) = attr_vectors.dims2()?;
        let (c, a2) = class_attr.dims2()?;
        if a2 != a {
            return Err(Error::shape("dataset class attributes", attr_vectors.shape(), class_attr.shape()));
        }
        attr_vectors.ensure_finite("attribute vectors")?;
        class_attr.ensure_finite("class attributes")?;
        let seen_set: BTreeSet<usize> = seen.iter().copied().collect();
        let unseen_set: BTreeSet<usize> = unseen.iter().copied().collect();
        if seen_set.len() != seen.len() || unseen_set.len() != unseen.len() {
            return Err(Error::Config("duplicate class index in seen or unseen set".into()));
        }
        if let Some(c) = seen_set.intersection(&unseen_set).next() {
            return Err(Error::Config(format!("class {c} is both seen and unseen")));
        }
        if seen.len() + unseen.len() != c || seen_set.union(&unseen_set).any(|&k| k >= c) {
            return Err(Error::Config(format!("seen and unseen sets must partition the {c} classes")));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Config("need at least one seen and one unseen class".into()));
        }
        let mut shape: Option<&[usize]> = None;
        for (i, s) in samples.iter().enumerate() {
            s.features.dims2()?;
            match shape {
                None => shape = Some(s.features.shape()),
                Some(sh) if sh != s.features.shape() => {
                    return Err(Error::Config(format!("sample {i}: features shaped {:?}, expected {sh:?}", s.features.shape())));
                }
                _ => {}
            }
            s.features.ensure_finite(&format!("sample {i} features"))?;
            if s.label >= c {
                return Err(Error::Config(format!("sample {i}: label {} out of range for {c} classes", s.label)));
            }
            let ok = match s.split {
                Split::Train | Split::TestSeen => seen_set.contains(&s.label),
                Split::TestUnseen => unseen_set.contains(&s.label),
            };
            if !ok {
                return Err(Error::Config(format!("sample {i}: class {} not allowed in split {}", s.label, s.split.as_str())));
            }
        }
        let mut seen = seen;
        let mut unseen = unseen;
        seen.sort_unstable();
        unseen.sort_unstable();
        Ok(ZslDataset {
            samples,
            attr_vectors,
            class_attr,
            seen,
            unseen,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn attr_vectors(&self) -> &Tensor {
        &self.attr_vectors
    }

    pub fn class_attr(&self) -> &Tensor {
        &self.class_attr
    }

    /// Seen classes, ascending.
    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    /// Unseen classes, ascending.
    pub fn unseen_classes(&self) -> &[usize] {
        &self.unseen
    }

    pub fn num_classes(&self) -> usize {
        self.class_attr.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.class_attr.cols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.attr_vectors.cols()
    }

    /// `(R, D)` of every sample, `None` for an empty dataset.
    pub fn feature_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.features.rows(), s.features.cols()))
    }

    /// Semantic space with compact vectors derived by `compaction`.
    pub fn semantic_space(&self, compaction: &CompactionConfig, supplied: Option<&Tensor>) -> Result<SemanticSpace> {
        SemanticSpace::compacted(self.attr_vectors.clone(), self.class_attr.clone(), compaction, supplied)
    }
}
