//! Mini-batch training on the seen-class training split.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, ZslDataset};
use crate::error::{Error, Result};
use crate::loss::{predict_among, total_loss_with_grad, LossConfig};
use crate::model::HrtModel;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Means over the epoch's samples, measured before each sample's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub cal: f64,
    pub reg: f64,
    pub total: f64,
    /// Fraction of training samples whose highest-scoring training class
    /// was the label.
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,L_ce,L_cal,L_reg,total,train_acc";

    /// CSV text with a header row; floats use the shortest exact form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.epoch, r.ce, r.cal, r.reg, r.total, r.train_acc);
        }
        s
    }
}

/// Trains `model` in place and returns the per-epoch history. The
/// gradient of a batch is the mean of its per-sample gradients, summed in
/// sample order.
pub fn train(
    dataset: &ZslDataset,
    model: &mut HrtModel,
    loss: &LossConfig,
    optimizer: OptimizerConfig,
    config: &TrainConfig,
) -> Result<History> {
    train_with(dataset, model, loss, optimizer, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(
    dataset: &ZslDataset,
    model: &mut HrtModel,
    loss: &LossConfig,
    optimizer: OptimizerConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<History>
where
    F: FnMut(&EpochRecord),
{
    let train_idx: Vec<usize> = dataset
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::shape("train classes", &[model.num_classes()], &[dataset.num_classes()]));
    }
    loss.validate(model.num_classes())?;
    let candidates: Vec<usize> = loss.ce_classes.clone().unwrap_or_else(|| (0..model.num_classes()).collect());
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let mut params = model.parameters();
    let mut state = OptimizerState::new(optimizer, &params)?;
    let mut rng = SeededRng::new(config.seed);
    let mut order = train_idx;
    let samples = dataset.samples();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<crate::tensor::Tensor>> = None;
            for &i in batch {
                let s = &samples[i];
                let out = total_loss_with_grad(model, &s.features, s.label, loss)?;
                for (k, v) in [out.loss.ce, out.loss.cal, out.loss.reg, out.loss.total].into_iter().enumerate() {
                    sums[k] += v;
                }
                if predict_among(&out.scores, &candidates) == Some(s.label) {
                    correct += 1;
                }
                match &mut acc {
                    None => acc = Some(out.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&out.grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(g.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("batches are nonempty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            state
                .step(&mut params, &grads)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            model.set_parameters(&params)?;
        }
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch,
            ce: sums[0] / n,
            cal: sums[1] / n,
            reg: sums[2] / n,
            total: sums[3] / n,
            train_acc: correct as f64 / n,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
