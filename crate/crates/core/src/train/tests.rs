use std::path::Path;

use super::checkpoint::{lookup, AnyTensor};
use super::*;
use crate::data::synth::{generate, SynthConfig, CLASS_NAMES};
use crate::error::Error;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

fn one_param(theta: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(theta), ParamKind::Trainable).unwrap();
    (store, id)
}

#[test]
fn sgd_hand_example() {
    let (mut store, id) = one_param(1.0);
    let mut st = OptimState::new(OptimConfig::default(), &store).unwrap();
    sgd_step(&mut store, &[(id, Tensor::scalar(1.0))], &mut st).unwrap();
    assert!((st.velocity_of(id).unwrap().item().unwrap() - 1.0001).abs() < 1e-12);
    assert!((store.value(id).item().unwrap() - 0.9989999).abs() < 1e-7);
}

#[test]
fn sgd_second_velocity_for_constant_gradient() {
    let (mut store, id) = one_param(0.0);
    let cfg = OptimConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    let mut st = OptimState::new(cfg, &store).unwrap();
    let g = 0.37;
    for _ in 0..2 {
        sgd_step(&mut store, &[(id, Tensor::scalar(g))], &mut st).unwrap();
    }
    assert!((st.velocity_of(id).unwrap().item().unwrap() - 1.9 * g).abs() < 1e-15);
}

#[test]
fn sgd_vanilla_and_frozen_cases() {
    let (mut store, id) = one_param(2.0);
    let mut st = OptimState::new(OptimConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, &store).unwrap();
    sgd_step(&mut store, &[(id, Tensor::scalar(3.0))], &mut st).unwrap();
    assert!((store.value(id).item().unwrap() - 1.7).abs() < 1e-15);

    // zero gradients with weight decay off leave parameters untouched
    let mut st = OptimState::new(OptimConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }, &store).unwrap();
    let before = store.value(id).clone();
    for _ in 0..3 {
        sgd_step(&mut store, &[(id, Tensor::scalar(0.0))], &mut st).unwrap();
        sgd_step(&mut store, &[], &mut st).unwrap();
    }
    assert!(store.value(id).bitwise_eq(&before));
}

#[test]
fn sgd_shape_mismatch_is_state_error() {
    let (mut store, id) = one_param(1.0);
    let mut st = OptimState::new(OptimConfig::default(), &store).unwrap();
    let g = Tensor::zeros(&[2]).unwrap();
    assert!(matches!(sgd_step(&mut store, &[(id, g)], &mut st), Err(Error::State(_))));
    assert!(OptimState::new(OptimConfig { lr: -1.0, ..Default::default() }, &store).is_err());
}

#[test]
fn config_defaults_overrides_and_errors() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.optim, OptimConfig::default());
    assert_eq!(cfg.network.encoder.stage_channels, [16, 32, 64]);

    let text = "# run\noptim.lr = 0.01  # faster\ntrain.checkpoint = out/model.ckpt\nnet.stage_channels = 8,16,32\n";
    let cfg = TrainConfig::parse(text, Path::new("/cfgdir")).unwrap();
    assert_eq!(cfg.optim.lr, 0.01);
    assert_eq!(cfg.checkpoint.as_deref(), Some(Path::new("/cfgdir/out/model.ckpt")));
    assert_eq!(cfg.network.psa[0].channels, 8);

    let err = TrainConfig::parse("optimizer.lr_sched = 1", Path::new(".")).unwrap_err();
    assert!(err.to_string().contains("optimizer.lr_sched"), "{err}");
    for bad in
        ["train.batch_size = 0", "train.epochs = 0", "loss.levels = 2", "optim.lr = x", "augment.crop = 3", "nonsense"]
    {
        assert!(matches!(TrainConfig::parse(bad, Path::new(".")), Err(Error::Config(_))), "{bad}");
    }
    let mut cfg = TrainConfig::parse("net.num_classes = 5", Path::new(".")).unwrap();
    assert!(cfg.resolve_classes(4).is_err());
    assert!(cfg.resolve_classes(5).is_ok());
}

#[test]
fn canonical_text_round_trips() {
    let text = "net.preset = tiny\nnet.num_classes = 4\naugment.crop = none\naugment.rare_class = 3\naugment.rare_factor = 2\n\
                loss.dice_squared = true\ntrain.history = h.csv\noptim.momentum = 0.5\n";
    let cfg = TrainConfig::parse(text, Path::new("/base")).unwrap();
    let canon = cfg.to_canonical_text();
    let back = TrainConfig::parse(&canon, Path::new("/elsewhere")).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_canonical_text(), canon);
    assert_eq!(parse_pairs(&canon).unwrap().len(), KEYS.len());
}

fn tiny_config(extra: &str) -> TrainConfig {
    let text = format!(
        "net.preset = tiny\naugment.crop = 32,32\ntrain.batch_size = 4\ntrain.epochs = 4\ntrain.validate_every = 2\n{extra}"
    );
    TrainConfig::parse(&text, Path::new(".")).unwrap()
}

fn tiny_trainer(extra: &str) -> Trainer {
    let samples = generate(&SynthConfig { count: 6, size: 32, ..Default::default() }).unwrap();
    let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let (train, val) = samples.split_at(5);
    Trainer::from_samples(tiny_config(extra), names, train.to_vec(), val.to_vec()).unwrap()
}

fn params_equal(a: &TrainState, b: &TrainState) -> bool {
    a.model
        .store
        .entries()
        .iter()
        .zip(b.model.store.entries())
        .all(|(x, y)| x.name == y.name && x.value.bitwise_eq(&y.value))
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let mut a = tiny_trainer("");
    let mut b = tiny_trainer("");
    let ha = a.run().unwrap().to_vec();
    let hb = b.run().unwrap().to_vec();
    let bits = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ha), bits(&hb));
    assert!(params_equal(&a.state, &b.state));
    assert_eq!(ha.iter().filter(|r| r.val_miou.is_some()).count(), 2);
    assert!(ha.iter().all(|r| r.train_loss.is_finite()));

    let mut c = tiny_trainer("train.seed = 1");
    assert_ne!(bits(&ha), bits(c.run().unwrap()));
}

#[test]
fn class_weights_refresh_only_at_validation() {
    let mut t = tiny_trainer("");
    let w0 = t.state.weights.clone();
    t.run_epoch().unwrap();
    assert_eq!(t.state.weights, w0);
    let r = t.run_epoch().unwrap();
    assert!(r.val_iou.is_some());
    assert!((t.state.weights.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let expected = w0.refreshed(r.val_iou.as_ref().unwrap()).unwrap();
    assert_eq!(t.state.weights, expected);

    let mut fixed = tiny_trainer("loss.adaptive_weights = false");
    fixed.run().unwrap();
    assert_eq!(fixed.state.weights, w0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut t = tiny_trainer("");
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let file = t.state.to_checkpoint().unwrap();
    let bytes = file.to_bytes();
    let parsed = CheckpointFile::from_bytes(&bytes).unwrap();
    assert_eq!(parsed.to_bytes(), bytes);

    let restored = TrainState::from_checkpoint(&parsed).unwrap();
    assert!(params_equal(&restored, &t.state));
    assert_eq!(restored.optim, t.state.optim);
    assert_eq!(restored.weights, t.state.weights);
    assert_eq!((restored.epoch, restored.step), (t.state.epoch, t.state.step));
    assert_eq!(restored.history, t.state.history);
    assert_eq!(restored.to_checkpoint().unwrap().to_bytes(), bytes);

    let x = Tensor::<f32>::from_fn(&[2, 3, 32, 32], |i| ((i * 7919) % 251) as f32 / 251.0).unwrap();
    let a = t.state.model.predict_logits(&x).unwrap();
    let b = restored.model.predict_logits(&x).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full = tiny_trainer("");
    full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = tiny_trainer("");
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    first.state.save(&path).unwrap();
    drop(first);

    let fresh = tiny_trainer("");
    let state = TrainState::load(&path).unwrap();
    let mut resumed = Trainer::with_state(state, fresh.class_names.clone(), fresh_train(&fresh), fresh_val()).unwrap();
    resumed.run().unwrap();
    let bits = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.state.history), bits(&full.state.history));
    assert!(params_equal(&resumed.state, &full.state));
    assert_eq!(resumed.state.weights, full.state.weights);
}

fn fresh_train(t: &Trainer) -> Vec<std::sync::Arc<crate::data::SegmentationSample>> {
    t.train_samples().to_vec()
}

fn fresh_val() -> Vec<crate::data::SegmentationSample> {
    generate(&SynthConfig { count: 6, size: 32, ..Default::default() }).unwrap()[5..].to_vec()
}

#[test]
fn checkpoint_corruption_is_detected() {
    let t = tiny_trainer("");
    let bytes = t.state.to_checkpoint().unwrap().to_bytes();
    assert!(matches!(CheckpointFile::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_))));
    assert!(matches!(CheckpointFile::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(CheckpointFile::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(CheckpointFile::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    let mid = bad.len() - 20;
    bad[mid] ^= 1;
    assert!(matches!(CheckpointFile::from_bytes(&bad), Err(Error::Integrity(_))));
}

#[test]
fn checkpoint_header_layout() {
    let t = tiny_trainer("");
    let file = t.state.to_checkpoint().unwrap();
    let bytes = file.to_bytes();
    assert_eq!(&bytes[..4], b"MSEG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + len], file.config_text.as_bytes());
    let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    assert_eq!(checksum, checkpoint::fnv1a64(&bytes[..bytes.len() - 8]));
    let stem = lookup(&file.params, "encoder.stem.conv.weight").expect("stem weight stored");
    assert!(matches!(stem, AnyTensor::F32(_)));
}

#[test]
fn mismatched_network_names_first_offending_tensor() {
    let t = tiny_trainer("");
    let mut file = t.state.to_checkpoint().unwrap();
    let other =
        TrainConfig::parse("net.preset = tiny\nnet.num_classes = 4\nnet.stage_channels = 8,16,48", Path::new(""))
            .unwrap();
    file.config_text = other.to_canonical_text();
    let err = TrainState::from_checkpoint(&file).unwrap_err();
    let Error::Format(msg) = err else { panic!("expected a format error, got {err:?}") };
    let first_bad = TrainState::new(other)
        .unwrap()
        .model
        .store
        .entries()
        .iter()
        .find(|e| lookup(&file.params, &e.name).is_none_or(|t| t.shape() != e.value.shape()))
        .unwrap()
        .name
        .clone();
    assert!(msg.contains(&first_bad), "{msg} should name {first_bad}");
}

#[test]
fn evaluate_twice_is_identical_and_history_csv_has_columns() {
    let mut t = tiny_trainer("");
    t.run().unwrap();
    let a = t.evaluate_train().unwrap();
    let b = t.evaluate_train().unwrap();
    assert_eq!(a, b);
    let csv = history_csv(&t.state.history, &t.class_names);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_miou,iou_soil,iou_sand,iou_bedrock,iou_big_rock");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
    assert!(rows[0].ends_with(",,,,,"));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut t = tiny_trainer("optim.lr = 1e30");
    let err = t.run().unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, worst_tensor, .. } => {
            assert!(epoch >= 1);
            assert!(!worst_tensor.is_empty());
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}
