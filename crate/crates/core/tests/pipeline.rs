//! The library pipeline end to end through the public API, at toy scale.

use msarnn::evalkit::{closed_loop_rollout, collect_traces, pca_hidden, success_rate_suite, RolloutSpec, TrialSet};
use msarnn::model::ModelConfig;
use msarnn::msa::MsaConfig;
use msarnn::policy::PolicyConfig;
use msarnn::simenv::{
    expert_action, generate_dataset, make_scene, read_dataset, step_dynamics, success_check, write_dataset, Condition,
    SimConfig, SimState, Variant,
};
use msarnn::trainer::{checkpoint_paths, load_checkpoint, train, Normalizer, TrainConfig};

fn toy_sim() -> SimConfig {
    SimConfig {
        image_h: 8,
        image_w: 8,
        episode_len: 24,
        ..SimConfig::default()
    }
}

fn toy_train(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::with_steps(steps);
    cfg.batch = 2;
    cfg.model = ModelConfig {
        msa: MsaConfig {
            n_points: 2,
            stage_channels: [3, 3, 3],
            ..MsaConfig::default()
        },
        policy: PolicyConfig {
            n_points: 2,
            hidden_points: 4,
            hidden_joint: 4,
            hidden_high: 6,
            ..PolicyConfig::default()
        },
        ..ModelConfig::default()
    };
    cfg
}

#[test]
fn dataset_to_checkpoint_to_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&toy_sim(), 6, 2, 0.3).unwrap();
    write_dataset(&dir.path().join("data"), &data).unwrap();
    let data = read_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(data.episodes.len(), 6);

    let run = dir.path().join("run");
    let out = train(&data, &toy_train(5), Some(&run)).unwrap();
    assert_eq!(out.log.len(), 5);
    let ck = load_checkpoint(&checkpoint_paths(&run, 5).0).unwrap();
    assert_eq!(ck.manifest.sim, data.summary.sim);
    assert_eq!(ck.model.config().msa.image_h, 8);

    let spec = RolloutSpec {
        seed: 1,
        variant: Variant::Left,
        distance: 0.3,
        condition: Condition::UnseenBackground,
    };
    let r = closed_loop_rollout(&ck, &spec, None).unwrap();
    assert_eq!(r.episode.observations.len(), 24);
    assert!(r.final_state.base_forward >= 0.0);

    let sets = [TrialSet {
        condition: Condition::None,
        trials: 3,
        distance: 0.3,
    }];
    let report = success_rate_suite(&ck, &sets, 4).unwrap();
    assert_eq!(report.rows[0].trials, 3);
    assert_eq!(report.config_digest, ck.manifest.config_digest);

    let traces = collect_traces(&ck, Variant::ALL, 2, 0.3, 9).unwrap();
    assert_eq!(traces.len(), 6);
    let pca = pca_hidden(&traces, 2).unwrap();
    assert_eq!(pca.projections.len(), 6);
}

/// Expert commands squeezed through the normaliser, as a trained policy's
/// outputs are, still complete the task.
#[test]
fn normalised_expert_commands_still_succeed() {
    let sim = SimConfig::default();
    let data = generate_dataset(&sim, 6, 3, 0.5).unwrap();
    let norm = Normalizer::from_stats(&data.summary.stats).unwrap();
    for (i, &variant) in Variant::ALL.iter().enumerate() {
        let scene = make_scene(100 + i as u64, variant, 0.5, &sim).unwrap();
        let mut state = SimState::initial(&scene, &sim);
        for _ in 1..sim.episode_len {
            let a = expert_action(&scene, &state, &sim);
            let through = norm.denormalize(&norm.normalize(&a));
            state = step_dynamics(&state, &std::array::from_fn(|d| through[d]), &sim);
        }
        assert!(success_check(&scene, &state, &sim), "{variant}");
    }
}
