mod common;

use common::small_model;
use hrt_core::dataset::{Sample, Split, ZslDataset};
use hrt_core::loss::{GammaProfile, LossConfig};
use hrt_core::model::HrtModel;
use hrt_core::optim::OptimizerConfig;
use hrt_core::train::{train, History, TrainConfig};
use hrt_core::{Error, SeededRng};

fn dataset(model: &HrtModel, splits: &[(usize, Split)], seed: u64) -> ZslDataset {
    let mut rng = SeededRng::new(seed);
    let samples = splits
        .iter()
        .map(|&(label, split)| Sample { features: rng.normal_tensor(&[3, 6], 1.0), label, split })
        .collect();
    ZslDataset::new(
        samples,
        model.semantics.attr_vectors().clone(),
        model.semantics.class_attr().clone(),
        vec![0, 1, 2],
        vec![3],
    )
    .unwrap()
}

fn mixed(model: &HrtModel) -> ZslDataset {
    let mut splits = Vec::new();
    for c in 0..3 {
        splits.extend([(c, Split::Train), (c, Split::Train), (c, Split::Train), (c, Split::TestSeen)]);
    }
    splits.push((3, Split::TestUnseen));
    dataset(model, &splits, 9)
}

fn loss_for(ds: &ZslDataset) -> LossConfig {
    LossConfig::new(4, ds.seen_classes(), ds.unseen_classes(), GammaProfile::CUB_SUN).unwrap()
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let mut model = small_model(1, 3, 4);
    let before = model.clone();
    let ds = mixed(&model);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let h = train(&ds, &mut model, &loss_for(&ds), OptimizerConfig::default(), &cfg).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(model, before);
    assert_eq!(h.to_csv(), format!("{}\n", History::CSV_HEADER));
}

#[test]
fn a_single_sample_is_memorised() {
    let mut model = small_model(2, 3, 4);
    let ds = dataset(&model, &[(1, Split::Train), (3, Split::TestUnseen)], 4);
    let mut loss = loss_for(&ds);
    loss.lambda1 = 0.0;
    loss.lambda2 = 0.0;
    // Heavy-ball momentum overshoots near the minimum; plain RMSprop descends
    // monotonically.
    let opt = OptimizerConfig { learning_rate: 1e-2, momentum: 0.0, ..OptimizerConfig::default() };
    let cfg = TrainConfig { epochs: 50, batch_size: 1, seed: 0 };
    let h = train(&ds, &mut model, &loss, opt, &cfg).unwrap();
    let totals: Vec<f64> = h.epochs.iter().map(|r| r.total).collect();
    assert_eq!(totals.len(), 50);
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    assert!(totals[49] < 0.1, "final loss {}", totals[49]);
    assert!(model.is_finite());
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = small_model(3, 3, 4);
        let ds = mixed(&model);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 11 };
        let h = train(&ds, &mut model, &loss_for(&ds), OptimizerConfig::default(), &cfg).unwrap();
        (h.to_csv(), model)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let bits = |m: &HrtModel| m.parameters().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.1), bits(&b.1));
}

#[test]
fn training_moves_every_parameter_group_but_the_em_scalars() {
    let mut model = small_model(5, 3, 4);
    let before = model.parameters();
    let ds = mixed(&model);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 0 };
    train(&ds, &mut model, &loss_for(&ds), OptimizerConfig::default(), &cfg).unwrap();
    for ((name, a), b) in HrtModel::parameter_names().iter().zip(&before).zip(model.parameters()) {
        let moved = a.max_abs_diff(&b) > 0.0;
        // One parent per patch makes the EM activation independent of β, γ.
        assert_eq!(moved, !name.starts_with("em_beta") && !name.starts_with("em_gamma"), "{name}");
    }
}

#[test]
fn an_empty_training_split_is_rejected() {
    let mut model = small_model(4, 3, 4);
    let ds = dataset(&model, &[(0, Split::TestSeen), (3, Split::TestUnseen)], 1);
    let r = train(&ds, &mut model, &loss_for(&ds), OptimizerConfig::default(), &TrainConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn a_zero_batch_size_is_rejected() {
    let mut model = small_model(4, 3, 4);
    let ds = mixed(&model);
    let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(train(&ds, &mut model, &loss_for(&ds), OptimizerConfig::default(), &cfg).is_err());
}
