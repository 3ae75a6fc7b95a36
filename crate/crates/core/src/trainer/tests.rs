use super::*;
use crate::embstore::{gen_synthetic, SyntheticData, SyntheticParams};
use crate::model::{encode_checkpoint, RbeConfig};

fn smoke_data() -> SyntheticData {
    gen_synthetic(&SyntheticParams::new(64, 4, 16, 0.15, 11).with_latent_dim(6)).unwrap()
}

fn smoke_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        queue_len: 64,
        hard_top_k: 8,
        epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn smoke_model() -> RbeModel {
    RbeModel::new(RbeConfig::new(16, 8, 1), 3).unwrap()
}

#[test]
fn defaults_and_echo() {
    let cfg = TrainConfig::parse("learning_rate=0.02\ntemperature=0.07\n# comment\ngrad_clip_norm=5\n").unwrap();
    assert_eq!(cfg, TrainConfig::default());
    let csv = report_csv(&cfg, &[]);
    for line in ["# learning_rate=0.02", "# temperature=0.07", "# grad_clip_norm=5"] {
        assert!(csv.lines().any(|l| l == line), "{line} missing from\n{csv}");
    }
    assert_eq!(csv.lines().last(), Some(REPORT_COLUMNS));
    assert_eq!(TrainConfig::parse(&cfg.to_kv_text()).unwrap(), cfg);
}

#[test]
fn invalid_configs() {
    for bad in [
        "queue_len=100",
        "hard_top_k=5000",
        "momentum_coef=1",
        "learning_rate=0",
        "batch_size=1\nqueue_len=1",
        "nope=3",
        "epochs=x",
    ] {
        assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn zero_epochs_is_identity() {
    let data = smoke_data();
    let model = smoke_model();
    let cfg = TrainConfig { epochs: 0, ..smoke_cfg() };
    let out = train(&model, &data.set, &data.pairs, &cfg).unwrap();
    assert_eq!(out.model, model);
    assert!(out.epochs.is_empty());
}

#[test]
fn loss_drops_and_runs_are_reproducible() {
    let data = smoke_data();
    let model = smoke_model();
    let cfg = smoke_cfg();
    let a = train(&model, &data.set, &data.pairs, &cfg).unwrap();
    assert_eq!(a.epochs.len(), 3);
    assert_eq!(a.steps.len(), 3 * (256 / 16));
    let first = a.epochs[0].loss;
    let last = a.epochs[2].loss;
    assert!(last < first, "{first} -> {last}");
    assert!(a.steps.iter().all(|s| s.loss.is_finite() && s.bc_loss == 0.0));
    let b = train(&model, &data.set, &data.pairs, &cfg).unwrap();
    assert_eq!(encode_checkpoint(&a.model), encode_checkpoint(&b.model));
}

#[test]
fn queue_fills_then_stays_full() {
    let data = smoke_data();
    let out = train(&smoke_model(), &data.set, &data.pairs, &TrainConfig { epochs: 1, ..smoke_cfg() }).unwrap();
    let fills: Vec<usize> = out.steps.iter().map(|s| s.queue_fill).collect();
    assert_eq!(&fills[..5], &[16, 32, 48, 64, 64]);
    assert!(fills[4..].iter().all(|&f| f == 64));
}

#[test]
fn validation_recall_column() {
    let data = smoke_data();
    let cfg = TrainConfig { epochs: 1, val_queries: 20, ..smoke_cfg() };
    let out = train(&smoke_model(), &data.set, &data.pairs, &cfg).unwrap();
    let r = out.epochs[0].recall_at_10_val.unwrap();
    assert!((0.0..=1.0).contains(&r));
    let csv = report_csv(&cfg, &out.epochs);
    let row = csv.lines().last().unwrap();
    assert_eq!(row.split(',').count(), 6);
}

#[test]
fn non_finite_loss_aborts() {
    let data = smoke_data();
    let mut model = smoke_model();
    model.params_mut()[0][0] = f32::NAN;
    let err = train(&model, &data.set, &data.pairs, &smoke_cfg()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn too_few_pairs_for_a_batch() {
    let data = gen_synthetic(&SyntheticParams::new(2, 4, 16, 0.1, 1)).unwrap();
    assert!(train(&smoke_model(), &data.set, &data.pairs, &smoke_cfg()).is_err());
}

#[test]
fn compat_with_identical_models_matches_main_loss() {
    let data = smoke_data();
    let model = smoke_model();
    let cfg = TrainConfig { epochs: 1, ..smoke_cfg() };
    let out = train_backward_compatible(&model, &model, &data.set, &data.set, &data.pairs, &cfg).unwrap();
    let s0 = &out.steps[0];
    assert!(s0.loss.is_finite() && s0.bc_loss.is_finite());
    assert_eq!(s0.loss, s0.bc_loss);
}

#[test]
fn compat_checks_shapes() {
    let data = smoke_data();
    let other = RbeModel::new(RbeConfig::new(16, 4, 1), 0).unwrap();
    assert!(train_backward_compatible(&smoke_model(), &other, &data.set, &data.set, &data.pairs, &smoke_cfg()).is_err());
    let wide = RbeModel::new(RbeConfig::new(24, 8, 1), 0).unwrap();
    assert!(matches!(
        train_backward_compatible(&smoke_model(), &wide, &data.set, &data.set, &data.pairs, &smoke_cfg()),
        Err(Error::DimensionMismatch { .. })
    ));
}
