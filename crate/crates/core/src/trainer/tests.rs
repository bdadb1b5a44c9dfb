use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::msa::MsaConfig;
use crate::policy::PolicyConfig;
use crate::simenv::generate_dataset;

fn tiny_dataset() -> Dataset {
    let sim = SimConfig {
        image_h: 8,
        image_w: 8,
        episode_len: 24,
        ..SimConfig::default()
    };
    generate_dataset(&sim, 6, 11, 0.3).unwrap()
}

fn tiny_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::with_steps(steps);
    cfg.batch = 2;
    cfg.lr = 1e-2;
    cfg.model = ModelConfig {
        msa: MsaConfig {
            n_points: 2,
            stage_channels: [4, 4, 4],
            ..MsaConfig::default()
        },
        policy: PolicyConfig {
            n_points: 2,
            robot_dim: ROBOT_DIM,
            hidden_points: 6,
            hidden_joint: 6,
            hidden_high: 8,
        },
        ..ModelConfig::default()
    };
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn normalizer_examples() {
    let n = Normalizer::new(vec![0.0, 3.0], vec![2.0, 3.0]).unwrap();
    assert_eq!(n.normalize(&[1.0, 3.0]), vec![0.5, 0.5]);
    assert_eq!(n.normalize(&[0.0, 100.0])[1], 0.5);
    assert_eq!(n.denormalize(&[0.25, 0.9]), vec![0.5, 3.0]);
    assert!(Normalizer::new(vec![1.0], vec![0.0]).is_err());
}

proptest! {
    #[test]
    fn normalizer_round_trips(
        lo in -10.0f64..10.0, span in 1e-3f64..20.0, t in -0.5f64..1.5,
    ) {
        let n = Normalizer::new(vec![lo], vec![lo + span]).unwrap();
        let x = lo + t * span;
        let y = n.normalize(&[x]);
        prop_assert!((n.denormalize(&y)[0] - x).abs() < 1e-6);
        if (0.0..=1.0).contains(&t) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&y[0]));
        }
    }
}

#[test]
fn config_round_trips_and_rejects_bad_values() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!((cfg.steps, cfg.batch, cfg.lr, cfg.weight_decay), (5000, 4, 1e-3, 1e-5));
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());

    let mut c = cfg.clone();
    c.steps = 100;
    assert!(c.validate().is_err());
    c.set_steps(100);
    c.validate().unwrap();
    c.lr = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn first_adam_step_moves_by_lr_against_gradient_sign() {
    // With zero moments, the bias-corrected first update is lr * g / (|g| + eps').
    let mut store = ParamStore::<f32>::new();
    let id = store
        .add_param("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&store, &cfg);
    adam.step(&mut store, &[(id, vec![4.0, -0.5, 1e-3])]);
    let w = store.get(id).data();
    let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
    for (a, b) in w.iter().zip(expect) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn weight_decay_modes_differ_and_both_shrink_weights() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add_param("w", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..TrainConfig::default()
    };
    let run = |decoupled: bool| {
        let mut c = cfg.clone();
        c.decoupled_weight_decay = decoupled;
        let mut s = store.clone();
        let mut adam = Adam::new(&s, &c);
        for _ in 0..5 {
            adam.step(&mut s, &[(id, vec![0.0])]);
        }
        s.get(id).data()[0]
    };
    let (l2, decoupled) = (run(false), run(true));
    assert!(l2 < 1.0 && decoupled < 1.0);
    assert_ne!(l2, decoupled);
}

#[test]
fn batches_are_time_major() {
    let data = tiny_dataset();
    let norm = Normalizer::from_stats(&data.summary.stats).unwrap();
    let prep = PreparedData::new(&data, &norm).unwrap();
    let b = prep.batch(&[3, 1]).unwrap();
    let frame = 3 * 8 * 8;
    assert_eq!(b.left.shape(), &[24 * 2, 3, 8, 8]);
    for t in [0, 5, 23] {
        for (slot, ep) in [3usize, 1].into_iter().enumerate() {
            let row = &b.left.data()[(t * 2 + slot) * frame..][..frame];
            assert_eq!(row, data.episodes[ep].observations[t].left.data());
            let row = &b.right.data()[(t * 2 + slot) * frame..][..frame];
            assert_eq!(row, data.episodes[ep].observations[t].right.data());
            let want: Vec<f32> = norm
                .normalize(&data.episodes[ep].observations[t].robot)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            assert_eq!(&b.robot[t].data()[slot * ROBOT_DIM..][..ROBOT_DIM], want.as_slice());
        }
    }
    assert_eq!(b.targets.len(), 23);
}

#[test]
fn single_query_backbone_has_fewer_parameters() {
    let sim = SimConfig::default();
    let mut cfg = TrainConfig::default();
    let (_, msa) = Model::init::<f32>(&cfg.resolved_model(&sim), 0).unwrap();
    cfg.ablation.backbone = Backbone::Sa;
    let (_, sa) = Model::init::<f32>(&cfg.resolved_model(&sim), 0).unwrap();
    assert!(sa.num_parameters() < msa.num_parameters());
    cfg.ablation.input = InputMode::Mono;
    assert_eq!(cfg.resolved_model(&sim).input, InputMode::Mono);
}

#[test]
fn seeded_runs_are_bit_identical_and_log_the_schedule() {
    let data = tiny_dataset();
    let cfg = tiny_config(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&data, &cfg, Some(a.path())).unwrap();
    let rb = train(&data, &cfg, Some(b.path())).unwrap();
    let (bin_a, man_a) = checkpoint_paths(a.path(), 4);
    let (bin_b, man_b) = checkpoint_paths(b.path(), 4);
    assert_eq!(ra.checkpoint.as_deref(), Some(bin_a.as_path()));
    assert_eq!(read(&bin_a), read(&bin_b));
    assert_eq!(read(&man_a), read(&man_b));
    assert_eq!(ra.log.first().unwrap().alpha, 1e-4);
    assert_eq!(ra.log.last().unwrap().alpha, 0.1);
    for (x, y) in ra.log.iter().zip(&rb.log) {
        assert_eq!((x.total, x.grad_norm), (y.total, y.grad_norm));
        assert!(x.grad_norm.is_finite());
    }
    let csv = std::fs::read_to_string(a.path().join("training_log.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn short_training_reduces_loss() {
    let data = tiny_dataset();
    let out = train(&data, &tiny_config(60), None).unwrap();
    let head: f64 = out.log[..5].iter().map(|r| r.joint).sum();
    let tail: f64 = out.log[55..].iter().map(|r| r.joint).sum();
    assert!(tail < head, "joint loss went from {head} to {tail}");
}

#[test]
fn checkpoints_round_trip_and_reject_tampering() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&data, &tiny_config(2), Some(dir.path())).unwrap();
    let (bin, manifest) = checkpoint_paths(dir.path(), 2);
    let ck = load_checkpoint(&bin).unwrap();
    for (x, y) in ck.store.entries().iter().zip(out.store.entries()) {
        assert_eq!(x.value, y.value);
    }
    assert_eq!(ck.manifest.normalizer, out.normalizer);

    let again = dir.path().join("copy.bin");
    ck.save(&again).unwrap();
    assert_eq!(read(&bin), read(&again));
    assert_eq!(read(&manifest), read(&dir.path().join("copy.manifest.json")));

    // Config digest no longer matching the stored config.
    let text = std::fs::read_to_string(&manifest).unwrap();
    let digest = &ck.manifest.config_digest;
    let tampered = text.replace(digest.as_str(), &"0".repeat(digest.len()));
    std::fs::write(dir.path().join("copy.manifest.json"), tampered).unwrap();
    let err = load_checkpoint(&again).unwrap_err();
    assert!(err.to_string().contains("digest"), "{err}");

    // Truncated blob.
    std::fs::write(dir.path().join("copy.manifest.json"), &text).unwrap();
    let bytes = read(&bin);
    std::fs::write(&again, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&again), Err(Error::Checkpoint(_))));

    // A wider first stage than the checkpoint holds.
    let mut other = ck.manifest.config.clone();
    other.msa.stage_channels[0] = 5;
    let err = load_checkpoint_as(&bin, &other).unwrap_err().to_string();
    assert!(err.contains("msa.stage1") && err.contains("[4,"), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let mut data = tiny_dataset();
    for ep in &mut data.episodes {
        ep.observations[3].left.data_mut()[0] = f32::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let err = train(&data, &tiny_config(3), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    assert!(dir.path().join("divergence.json").exists());
}
