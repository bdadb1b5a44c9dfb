//! Closed-loop evaluation, success statistics, attention drift, hidden-state
//! PCA and latency profiling.

mod pca;
mod stats;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::model::StereoFrame;
use crate::msa::AttentionPoints;
use crate::policy::init_state;
use crate::simenv::{
    apply_disturbance, derive_seed, make_scene, render_stereo, step_dynamics, success_check, Condition, Episode,
    RobotState, SimState, StereoObservation, Variant, ROBOT_DIM,
};
use crate::trainer::Checkpoint;
use crate::{Error, Result};

pub use pca::{pca_hidden, HiddenTrace, PcaResult};
pub use stats::{mean_std, silhouette, wilson_ci, Z_99};

/// Per-step wall-clock budget of a 10 Hz controller.
pub const STEP_BUDGET_MS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub seed: u64,
    pub variant: Variant,
    pub distance: f64,
    pub condition: Condition,
}

/// Attention points seen and forecast at one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPoints {
    /// Left and right extracted points at this step.
    pub extracted: [AttentionPoints; 2],
    /// Left and right forecasts for the next step.
    pub predicted: [AttentionPoints; 2],
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub spec: RolloutSpec,
    pub episode: Episode,
    pub trace: HiddenTrace,
    pub latency_ms: Vec<f64>,
    /// Policy steps that exceeded [`STEP_BUDGET_MS`].
    pub over_budget: usize,
    pub points: Vec<StepPoints>,
    pub final_state: SimState,
}

/// Runs the checkpointed policy in a fresh scene for the configured horizon:
/// render, predict, denormalise, integrate. With `export`, the extractor's
/// maps for every step are written to `export/step_<t>`.
pub fn closed_loop_rollout(ckpt: &Checkpoint, spec: &RolloutSpec, export: Option<&Path>) -> Result<Rollout> {
    let sim = &ckpt.manifest.sim;
    let norm = &ckpt.manifest.normalizer;
    let model = &ckpt.model;
    let scene = apply_disturbance(
        &make_scene(spec.seed, spec.variant, spec.distance, sim)?,
        spec.condition,
    );
    let mut state = SimState::initial(&scene, sim);
    let mut policy = init_state::<f32>(1, &model.config().policy)?;
    let horizon = sim.episode_len;
    let mut observations = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon - 1);
    let mut base_forward = Vec::with_capacity(horizon);
    let mut hidden = Vec::with_capacity(horizon - 1);
    let mut latency_ms = Vec::with_capacity(horizon - 1);
    let mut points = Vec::with_capacity(horizon - 1);
    for t in 0..horizon {
        let (left, right) = render_stereo(&scene, &state)?;
        let robot = state.robot();
        base_forward.push(state.base_forward);
        if t + 1 < horizon {
            let frame = StereoFrame {
                left: left.clone(),
                right: right.clone(),
                robot: norm.normalize(&robot).into_iter().map(|v| v as f32).collect(),
            };
            let dir = export.map(|d| d.join(format!("step_{t:03}")));
            let step = model.closed_loop_step(&ckpt.store, &frame, &policy, dir.as_deref())?;
            let raw = norm.denormalize(&step.action.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let action: RobotState = std::array::from_fn(|d| raw[d]);
            latency_ms.push(step.latency.as_secs_f64() * 1e3);
            hidden.push(step.hidden_joint);
            points.push(StepPoints {
                extracted: [step.extracted_left, step.extracted_right],
                predicted: [step.predicted_left, step.predicted_right],
            });
            policy = step.state;
            actions.push(action);
            observations.push(StereoObservation { left, right, robot, t });
            state = step_dynamics(&state, &action, sim);
        } else {
            observations.push(StereoObservation { left, right, robot, t });
        }
    }
    let over_budget = latency_ms.iter().filter(|&&ms| ms > STEP_BUDGET_MS).count();
    if over_budget > 0 {
        log::warn!("{over_budget} policy steps exceeded the {STEP_BUDGET_MS} ms budget");
    }
    Ok(Rollout {
        spec: *spec,
        episode: Episode {
            observations,
            actions,
            base_forward,
            success: success_check(&scene, &state, sim),
            seed: spec.seed,
            variant: spec.variant,
            distance: spec.distance,
            condition: spec.condition,
        },
        trace: HiddenTrace {
            id: 0,
            variant: spec.variant,
            states: hidden,
        },
        latency_ms,
        over_budget,
        points,
        final_state: state,
    })
}

/// Total base travel in centimetres.
pub fn movement_distance(episode: &Episode) -> f64 {
    episode
        .base_forward
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum::<f64>()
        * 100.0
}

/// Per-channel attention statistics for one camera view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewDrift {
    /// Mean per-step displacement of the extracted points.
    pub displacement: Vec<f64>,
    /// Mean distance between each forecast and the next extracted point.
    pub residual: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub left: ViewDrift,
    pub right: ViewDrift,
}

fn point_dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    let dy = a[0] as f64 - b[0] as f64;
    let dx = a[1] as f64 - b[1] as f64;
    (dy * dy + dx * dx).sqrt()
}

fn view_drift(steps: &[StepPoints], view: usize) -> ViewDrift {
    let n = steps.first().map(|s| s.extracted[view].len()).unwrap_or(0);
    let mut displacement = vec![0.0; n];
    let mut residual = vec![0.0; n];
    let pairs = steps.len().saturating_sub(1);
    for w in steps.windows(2) {
        let (now, next) = (&w[0], &w[1]);
        for c in 0..n {
            displacement[c] += point_dist(next.extracted[view].points[c], now.extracted[view].points[c]);
            residual[c] += point_dist(now.predicted[view].points[c], next.extracted[view].points[c]);
        }
    }
    if pairs > 0 {
        displacement
            .iter_mut()
            .chain(residual.iter_mut())
            .for_each(|x| *x /= pairs as f64);
    }
    ViewDrift { displacement, residual }
}

/// Drift of extracted points and forecast error, per channel and view.
pub fn attention_drift(steps: &[StepPoints]) -> DriftStats {
    DriftStats {
        left: view_drift(steps, 0),
        right: view_drift(steps, 1),
    }
}

fn mean_of(stats: &[DriftStats]) -> DriftStats {
    let avg = |pick: &dyn Fn(&DriftStats) -> &Vec<f64>| -> Vec<f64> {
        let Some(first) = stats.first() else { return Vec::new() };
        let mut out = vec![0.0; pick(first).len()];
        for s in stats {
            out.iter_mut().zip(pick(s)).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= stats.len() as f64);
        out
    };
    DriftStats {
        left: ViewDrift {
            displacement: avg(&|s| &s.left.displacement),
            residual: avg(&|s| &s.left.residual),
        },
        right: ViewDrift {
            displacement: avg(&|s| &s.right.displacement),
            residual: avg(&|s| &s.right.residual),
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub distance: f64,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub movement_cm: MeanStd,
    pub latency_ms: MeanStd,
    pub over_budget_steps: usize,
    pub drift: DriftStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub seed: u64,
    pub confidence: f64,
    pub rows: Vec<ConditionReport>,
}

impl EvalReport {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.latency_ms = MeanStd::default();
            row.over_budget_steps = 0;
        }
        r
    }
}

/// Evaluation workload for one condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub condition: Condition,
    pub trials: usize,
    pub distance: f64,
}

/// The standard suite: 50 undisturbed trials and 30 per disturbance.
pub fn standard_suite(distance: f64) -> Vec<TrialSet> {
    Condition::ALL
        .iter()
        .map(|&condition| TrialSet {
            condition,
            trials: if condition == Condition::None { 50 } else { 30 },
            distance,
        })
        .collect()
}

/// Deterministic scene seeds and variants for a trial set. Row `row` of a
/// suite draws from its own seed stream.
pub fn trial_specs(set: &TrialSet, seed: u64, row: usize) -> Vec<RolloutSpec> {
    (0..set.trials)
        .map(|i| {
            let s = derive_seed(derive_seed(seed, 0xe7a1_0000 + row as u64), i as u64);
            RolloutSpec {
                seed: s,
                variant: Variant::ALL[(derive_seed(s, 1) % Variant::ALL.len() as u64) as usize],
                distance: set.distance,
                condition: set.condition,
            }
        })
        .collect()
}

fn summarize(set: &TrialSet, rollouts: &[Rollout]) -> Result<ConditionReport> {
    let successes = rollouts.iter().filter(|r| r.episode.success).count();
    let trials = rollouts.len();
    let (ci_low, ci_high) = wilson_ci(successes, trials, Z_99)?;
    let moves: Vec<f64> = rollouts.iter().map(|r| movement_distance(&r.episode)).collect();
    let lat: Vec<f64> = rollouts.iter().flat_map(|r| r.latency_ms.iter().copied()).collect();
    let drifts: Vec<DriftStats> = rollouts.iter().map(|r| attention_drift(&r.points)).collect();
    Ok(ConditionReport {
        condition: set.condition,
        distance: set.distance,
        successes,
        trials,
        rate: successes as f64 / trials as f64,
        ci_low,
        ci_high,
        movement_cm: MeanStd::of(&moves),
        latency_ms: MeanStd::of(&lat),
        over_budget_steps: rollouts.iter().map(|r| r.over_budget).sum(),
        drift: mean_of(&drifts),
    })
}

/// Runs every trial set on the current rayon pool and aggregates each into a
/// report row with a 99% Wilson interval.
pub fn success_rate_suite(ckpt: &Checkpoint, sets: &[TrialSet], seed: u64) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(sets.len());
    for (row, set) in sets.iter().enumerate() {
        if set.trials == 0 {
            return Err(Error::InvalidArgument(format!(
                "no trials requested for {}",
                set.condition
            )));
        }
        let specs = trial_specs(set, seed, row);
        let rollouts = specs
            .par_iter()
            .map(|spec| closed_loop_rollout(ckpt, spec, None))
            .collect::<Result<Vec<_>>>()?;
        let report = summarize(set, &rollouts)?;
        log::info!(
            "{} at {} m: {}/{} ({:.1}%, 99% CI {:.1}-{:.1})",
            set.condition,
            set.distance,
            report.successes,
            report.trials,
            100.0 * report.rate,
            100.0 * report.ci_low,
            100.0 * report.ci_high
        );
        rows.push(report);
    }
    Ok(EvalReport {
        config_digest: ckpt.manifest.config_digest.clone(),
        seed,
        confidence: 0.99,
        rows,
    })
}

/// Hidden traces of undisturbed rollouts, `per_variant` for each variant.
pub fn collect_traces(
    ckpt: &Checkpoint,
    variants: &[Variant],
    per_variant: usize,
    distance: f64,
    seed: u64,
) -> Result<Vec<HiddenTrace>> {
    let specs: Vec<RolloutSpec> = variants
        .iter()
        .flat_map(|&variant| {
            (0..per_variant).map(move |i| RolloutSpec {
                seed: derive_seed(derive_seed(seed, 0x9ca0), (variant as u64) * 1_000_003 + i as u64),
                variant,
                distance,
                condition: Condition::None,
            })
        })
        .collect();
    specs
        .par_iter()
        .enumerate()
        .map(|(id, spec)| {
            let mut trace = closed_loop_rollout(ckpt, spec, None)?.trace;
            trace.id = id;
            Ok(trace)
        })
        .collect()
}

/// Mean and standard deviation of single-step policy latency in milliseconds,
/// after `warmup` discarded steps. Runs on the calling thread.
pub fn latency_profile(ckpt: &Checkpoint, n_steps: usize, warmup: usize) -> Result<MeanStd> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("latency profile needs at least one step".into()));
    }
    let sim = &ckpt.manifest.sim;
    let scene = make_scene(0, Variant::Center, 0.5, sim)?;
    let state = SimState::initial(&scene, sim);
    let (left, right) = render_stereo(&scene, &state)?;
    let frame = StereoFrame {
        left,
        right,
        robot: ckpt
            .manifest
            .normalizer
            .normalize(&state.robot())
            .into_iter()
            .map(|v| v as f32)
            .collect(),
    };
    let mut policy = init_state::<f32>(1, &ckpt.model.config().policy)?;
    let mut samples = Vec::with_capacity(n_steps);
    for i in 0..warmup + n_steps {
        let step = ckpt.model.closed_loop_step(&ckpt.store, &frame, &policy, None)?;
        policy = step.state;
        if i >= warmup {
            samples.push(step.latency.as_secs_f64() * 1e3);
        }
    }
    Ok(MeanStd::of(&samples))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the report with wall-clock fields zeroed, so identical runs produce
/// identical files. [`write_timing`] records the latencies separately.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(&report.without_timing())? + "\n"))
}

#[derive(Serialize)]
struct RowTiming<'a> {
    condition: Condition,
    distance: f64,
    latency_ms: &'a MeanStd,
    over_budget_steps: usize,
    budget_ms: f64,
}

/// Per-row latency statistics of a report.
pub fn write_timing(path: &Path, report: &EvalReport) -> Result<()> {
    let rows: Vec<RowTiming<'_>> = report
        .rows
        .iter()
        .map(|r| RowTiming {
            condition: r.condition,
            distance: r.distance,
            latency_ms: &r.latency_ms,
            over_budget_steps: r.over_budget_steps,
            budget_ms: STEP_BUDGET_MS,
        })
        .collect();
    write_text(path, &(serde_json::to_string_pretty(&rows)? + "\n"))
}

/// Per-step state, commanded action and latency of a rollout.
pub fn write_rollout_csv(path: &Path, rollout: &Rollout) -> Result<()> {
    let mut out = String::from(
        "t,base_forward,base_velocity,arm_x,arm_y,gripper,cmd_base_velocity,cmd_arm_x,cmd_arm_y,cmd_gripper,latency_ms\n",
    );
    let ep = &rollout.episode;
    for (t, obs) in ep.observations.iter().enumerate() {
        let _ = write!(out, "{t},{}", ep.base_forward[t]);
        for v in obs.robot {
            let _ = write!(out, ",{v}");
        }
        match ep.actions.get(t) {
            Some(a) => {
                for v in a {
                    let _ = write!(out, ",{v}");
                }
                let _ = writeln!(out, ",{:.3}", rollout.latency_ms[t]);
            }
            None => {
                out.push_str(&",".repeat(ROBOT_DIM + 1));
                out.push('\n');
            }
        }
    }
    write_text(path, &out)
}

/// Writes `image` upscaled by `scale` as a binary PPM with extracted points
/// in red and forecasts in blue.
pub fn write_overlay_ppm(
    path: &Path,
    image: &Tensor<f32>,
    extracted: &AttentionPoints,
    predicted: &AttentionPoints,
    scale: usize,
) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || scale == 0 {
        return Err(Error::shape("overlay", format!("expected [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let (oh, ow) = (h * scale, w * scale);
    let mut rgb = vec![0u8; oh * ow * 3];
    let px = image.data();
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let v = px[(c * h + y / scale) * w + x / scale];
                rgb[(y * ow + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let radius = (scale as i64 / 2).max(1);
    let mut mark = |p: [f32; 2], color: [u8; 3]| {
        let cy = (p[0] as f64 * (oh - 1) as f64).round() as i64;
        let cx = (p[1] as f64 * (ow - 1) as f64).round() as i64;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (y, x) = (cy + dy, cx + dx);
                if (0..oh as i64).contains(&y) && (0..ow as i64).contains(&x) {
                    let i = (y as usize * ow + x as usize) * 3;
                    rgb[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    };
    extracted.points.iter().for_each(|&p| mark(p, [255, 0, 0]));
    predicted.points.iter().for_each(|&p| mark(p, [0, 0, 255]));
    let mut bytes = format!("P6\n{ow} {oh}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `trace_id,variant,step,pc1,pc2,...` for every projected hidden state.
pub fn write_pca_csv(path: &Path, traces: &[HiddenTrace], pca: &PcaResult) -> Result<()> {
    let dims = pca.components.len();
    let mut out = String::from("trace_id,variant,step");
    for k in 1..=dims {
        let _ = write!(out, ",pc{k}");
    }
    out.push('\n');
    for (trace, proj) in traces.iter().zip(&pca.projections) {
        for (t, p) in proj.iter().enumerate() {
            let _ = write!(out, "{},{},{t}", trace.id, trace.variant);
            for v in p {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests;
