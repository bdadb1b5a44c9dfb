#![allow(clippy::needless_range_loop)] // Jacobi rotations read clearer with explicit indices

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::msa::MsaConfig;
use crate::policy::PolicyConfig;
use crate::simenv::{generate_dataset, generate_episode, SimConfig};
use crate::trainer::{checkpoint_paths, load_checkpoint, train, TrainConfig};

/// `(k, n, low %, high %)` as printed in the success-rate tables.
const TABLE: &[(usize, usize, f64, f64)] = &[
    (36, 50, 53.8, 85.0),
    (49, 50, 85.0, 99.8),
    (0, 50, 0.0, 11.7),
    (46, 50, 76.6, 97.6),
    (0, 30, 0.0, 18.1),
    (24, 50, 31.1, 65.3),
    (37, 50, 55.9, 86.5),
    (3, 50, 1.5, 20.8),
    (28, 50, 38.3, 72.3),
    (21, 50, 26.0, 59.9),
    (7, 50, 5.6, 30.8),
    (2, 50, 0.8, 18.0),
    (27, 50, 36.5, 70.6),
    (8, 50, 6.8, 33.1),
    (39, 50, 60.2, 89.3),
    (8, 30, 11.6, 50.2),
    (11, 30, 18.4, 59.7),
    (20, 30, 43.4, 83.9),
    (6, 30, 7.6, 43.3),
    (2, 30, 1.3, 27.7),
    (12, 30, 20.9, 62.7),
    (20, 50, 24.4, 58.0),
];

fn round1(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

#[test]
fn wilson_matches_printed_intervals() {
    for &(k, n, lo, hi) in TABLE {
        let (l, h) = wilson_ci(k, n, Z_99).unwrap();
        assert_eq!((round1(l), round1(h)), (lo, hi), "{k}/{n}");
    }
}

#[test]
fn wilson_rejects_bad_counts() {
    assert!(wilson_ci(0, 0, Z_99).is_err());
    assert!(wilson_ci(4, 3, Z_99).is_err());
}

proptest! {
    #[test]
    fn wilson_brackets_rate_and_narrows_with_n(n in 1usize..400, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as usize;
        let (l, h) = wilson_ci(k, n, Z_99).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= l && l <= p && p <= h && h <= 1.0);
        let (l2, h2) = wilson_ci(2 * k, 2 * n, Z_99).unwrap();
        prop_assert!(h2 - l2 < h - l);
    }
}

#[test]
fn silhouette_matches_hand_computation() {
    // 1-D clusters {0, 1} and {10, 11}.
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
    let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
    let s0 = 1.0 - 1.0 / 10.5; // a = 1, b = (10 + 11) / 2
    let s1 = 1.0 - 1.0 / 9.5; // a = 1, b = (9 + 10) / 2
    assert!((s - (s0 + s1) / 2.0).abs() < 1e-12);
    let mixed = silhouette(&pts, &[0, 1, 0, 1]).unwrap();
    assert!(mixed < 0.0);
    assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
}

fn trace(id: usize, variant: Variant, states: Vec<Vec<f32>>) -> HiddenTrace {
    HiddenTrace { id, variant, states }
}

fn plane_traces(seed: u64, width: usize) -> Vec<HiddenTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let offset: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..4)
        .map(|id| {
            let states = (0..15)
                .map(|_| {
                    let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                    (0..width)
                        .map(|j| (offset[j] + a * basis[0][j] + b * basis[1][j]) as f32)
                        .collect()
                })
                .collect();
            trace(id, Variant::ALL[id % 3], states)
        })
        .collect()
}

#[test]
fn pca_reconstructs_rank_two_data() {
    let traces = plane_traces(3, 8);
    let pca = pca_hidden(&traces, 2).unwrap();
    for (t, proj) in traces.iter().zip(&pca.projections) {
        for (s, p) in t.states.iter().zip(proj) {
            for j in 0..8 {
                let rec = pca.mean[j] + p[0] * pca.components[0][j] + p[1] * pca.components[1][j];
                assert!((rec - s[j] as f64).abs() < 1e-5);
            }
        }
    }
    assert!((pca.explained_ratio() - 1.0).abs() < 1e-6);
    for c in &pca.components {
        let lead = c
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_is_stable_under_duplication_and_reordering() {
    let traces = plane_traces(5, 6);
    let pca = pca_hidden(&traces, 2).unwrap();
    let doubled: Vec<HiddenTrace> = traces.iter().chain(&traces).cloned().collect();
    let pd = pca_hidden(&doubled, 2).unwrap();
    let mut reversed = traces.clone();
    reversed.reverse();
    let pr = pca_hidden(&reversed, 2).unwrap();
    for i in 0..traces.len() {
        for (a, (b, c)) in pca.projections[i]
            .iter()
            .zip(pd.projections[i].iter().zip(&pr.projections[traces.len() - 1 - i]))
        {
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-9 && (a[k] - c[k]).abs() < 1e-9);
            }
        }
    }
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn explained_variance_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let width = 7;
    let traces: Vec<HiddenTrace> = (0..3)
        .map(|id| {
            let states = (0..20)
                .map(|_| {
                    (0..width)
                        .map(|j| rng.gen_range(-1.0..1.0f32) * (j + 1) as f32)
                        .collect()
                })
                .collect();
            trace(id, Variant::ALL[id], states)
        })
        .collect();
    let pca = pca_hidden(&traces, 2).unwrap();
    let rows: Vec<&Vec<f32>> = traces.iter().flat_map(|t| &t.states).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..width)
        .map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / n)
        .collect();
    let cov: Vec<Vec<f64>> = (0..width)
        .map(|i| {
            (0..width)
                .map(|j| {
                    rows.iter()
                        .map(|r| (r[i] as f64 - mean[i]) * (r[j] as f64 - mean[j]))
                        .sum::<f64>()
                        / n
                })
                .collect()
        })
        .collect();
    let ev = jacobi_eigenvalues(cov);
    let total: f64 = ev.iter().sum();
    assert!((pca.explained[0] - ev[0]).abs() < 1e-9 && (pca.explained[1] - ev[1]).abs() < 1e-9);
    assert!((pca.explained_ratio() - (ev[0] + ev[1]) / total).abs() < 1e-9);
}

#[test]
fn pca_degenerate_inputs() {
    let flat = vec![
        trace(0, Variant::Left, vec![vec![1.0; 4]; 3]),
        trace(1, Variant::Right, vec![vec![1.0; 4]; 3]),
    ];
    let pca = pca_hidden(&flat, 2).unwrap();
    assert!(pca.projections.iter().flatten().flatten().all(|&v| v == 0.0));
    assert!(pca_hidden(&flat[..1], 2).is_err());
    assert!(pca_hidden(&flat, 5).is_err());
}

fn pts(v: &[[f32; 2]]) -> AttentionPoints {
    AttentionPoints { points: v.to_vec() }
}

fn random_steps(seed: u64, len: usize) -> Vec<StepPoints> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = || {
        pts(&(0..3)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect::<Vec<_>>())
    };
    (0..len)
        .map(|_| StepPoints {
            extracted: [p(), p()],
            predicted: [p(), p()],
        })
        .collect()
}

#[test]
fn static_points_have_no_drift_and_perfect_forecasts_no_residual() {
    let fixed = pts(&[[0.2, 0.3], [0.5, 0.5]]);
    let steps: Vec<StepPoints> = (0..10)
        .map(|_| StepPoints {
            extracted: [fixed.clone(), fixed.clone()],
            predicted: [fixed.clone(), fixed.clone()],
        })
        .collect();
    let d = attention_drift(&steps);
    assert!(d.left.displacement.iter().chain(&d.right.residual).all(|&x| x < 1e-3));

    let mut steps = random_steps(4, 12);
    for t in 0..11 {
        steps[t].predicted = steps[t + 1].extracted.clone();
    }
    let d = attention_drift(&steps);
    assert!(d.left.residual.iter().chain(&d.right.residual).all(|&x| x == 0.0));
}

#[test]
fn residual_matches_direct_recomputation() {
    let steps = random_steps(9, 8);
    let d = attention_drift(&steps);
    for (view, stats) in [(0, &d.left), (1, &d.right)] {
        for c in 0..3 {
            let mut acc = 0.0;
            for t in 0..7 {
                let a = steps[t].predicted[view].points[c];
                let b = steps[t + 1].extracted[view].points[c];
                acc += ((a[0] as f64 - b[0] as f64).powi(2) + (a[1] as f64 - b[1] as f64).powi(2)).sqrt();
            }
            assert!((stats.residual[c] - acc / 7.0).abs() < 1e-12);
        }
    }
}

#[test]
fn expert_movement_is_the_travel_distance() {
    let ep = generate_episode(3, Variant::Left, 0.5, Condition::None, &SimConfig::default()).unwrap();
    let cm = movement_distance(&ep);
    assert!((cm - 50.0).abs() <= 2.0, "{cm}");

    let mut first = ep.clone();
    first.base_forward.truncate(30);
    let mut second = ep.clone();
    second.base_forward.drain(..29);
    assert!((movement_distance(&first) + movement_distance(&second) - cm).abs() < 1e-9);

    let mut still = ep;
    still.base_forward.iter_mut().for_each(|x| *x = 0.25);
    assert_eq!(movement_distance(&still), 0.0);
}

fn tiny_checkpoint(dir: &std::path::Path) -> crate::trainer::Checkpoint {
    let sim = SimConfig {
        image_h: 8,
        image_w: 8,
        episode_len: 20,
        ..SimConfig::default()
    };
    let data = generate_dataset(&sim, 3, 1, 0.3).unwrap();
    let mut cfg = TrainConfig::with_steps(2);
    cfg.batch = 1;
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
            hidden_high: 4,
            ..PolicyConfig::default()
        },
        ..ModelConfig::default()
    };
    train(&data, &cfg, Some(dir)).unwrap();
    load_checkpoint(&checkpoint_paths(dir, 2).0).unwrap()
}

#[test]
fn rollouts_respect_the_horizon_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let spec = RolloutSpec {
        seed: 5,
        variant: Variant::Right,
        distance: 0.3,
        condition: Condition::Distractor,
    };
    let r = closed_loop_rollout(&ck, &spec, None).unwrap();
    assert_eq!(r.episode.observations.len(), 20);
    assert_eq!(r.episode.actions.len(), 19);
    assert_eq!(r.latency_ms.len(), 19);
    assert_eq!(r.trace.states.len(), 19);
    assert_eq!(r.trace.states[0].len(), 4);
    assert!(r
        .points
        .iter()
        .all(|p| p.extracted.iter().chain(&p.predicted).all(|x| x.in_unit_square())));
    let again = closed_loop_rollout(&ck, &spec, None).unwrap();
    assert_eq!(r.episode, again.episode);
    assert_eq!(r.points, again.points);

    let csv = dir.path().join("rollout.csv");
    write_rollout_csv(&csv, &r).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.lines().all(|l| l.split(',').count() == 11));
}

#[test]
fn suite_rows_follow_requested_sets_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let sets = [
        TrialSet {
            condition: Condition::None,
            trials: 4,
            distance: 0.3,
        },
        TrialSet {
            condition: Condition::LowLight,
            trials: 3,
            distance: 0.3,
        },
    ];
    let a = success_rate_suite(&ck, &sets, 8).unwrap();
    let b = success_rate_suite(&ck, &sets, 8).unwrap();
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.without_timing(), b.without_timing());
    for (row, set) in a.rows.iter().zip(&sets) {
        assert_eq!(row.trials, set.trials);
        assert_eq!(row.rate, row.successes as f64 / row.trials as f64);
        assert!(row.ci_low <= row.rate && row.rate <= row.ci_high);
    }
    assert_eq!(
        standard_suite(0.5).iter().map(|s| s.trials).collect::<Vec<_>>(),
        [50, 30, 30, 30]
    );
    let lat = latency_profile(&ck, 20, 10).unwrap();
    assert!(lat.mean > 0.0 && lat.std >= 0.0);
}

#[test]
fn overlay_marks_points_in_colour() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::full(&[3, 4, 4], 0.5f32);
    let path = dir.path().join("o.ppm");
    write_overlay_ppm(&path, &img, &pts(&[[0.0, 0.0]]), &pts(&[[1.0, 1.0]]), 4).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P6\n16 16\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), 16 * 16 * 3);
    assert_eq!(&body[..3], &[255, 0, 0]);
    assert_eq!(&body[body.len() - 3..], &[0, 0, 255]);
    assert_eq!(&body[8 * 16 * 3..8 * 16 * 3 + 3], &[128, 128, 128]);
}
