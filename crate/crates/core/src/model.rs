//! The complete predictor: a weight-shared extractor for both views feeding the
//! hierarchical policy.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{grad_check_params, Float, ParamId, ParamStore, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::msa::{export_diagnostics, AttentionPoints, Msa, MsaConfig};
use crate::objective::{attention_loss_var, joint_loss_var, total_loss_var, LossBreakdown};
use crate::policy::{init_state, Policy, PolicyConfig, PolicyState};

/// Whether the right view is observed or replaced by a copy of the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Stereo,
    Mono,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub msa: MsaConfig,
    pub policy: PolicyConfig,
    pub input: InputMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.msa.validate()?;
        self.policy.validate()?;
        if self.msa.n_points != self.policy.n_points {
            return Err(Error::InvalidArgument(format!(
                "extractor emits {} points but the policy expects {}",
                self.msa.n_points, self.policy.n_points
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Training sequences for `B` episodes of `T` frames, time-major.
#[derive(Clone, Debug)]
pub struct SequenceBatch<F> {
    pub batch: usize,
    pub steps: usize,
    /// `[T * B, 3, H, W]`, row `t * B + b`.
    pub left: Tensor<F>,
    pub right: Tensor<F>,
    /// `T` tensors of `[B, D_r]` normalised robot states.
    pub robot: Vec<Tensor<F>>,
    /// `T - 1` tensors of `[B, D_r]` next-step targets.
    pub targets: Vec<Tensor<F>>,
}

/// Loss terms recorded on a session tape.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLoss {
    pub total: Var,
    pub joint: Var,
    pub attention: Var,
    pub breakdown: LossBreakdown,
}

/// Frame observed by a closed-loop controller.
#[derive(Clone, Debug)]
pub struct StereoFrame {
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// Normalised robot state.
    pub robot: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ClosedLoopStep {
    /// Predicted next robot state, clamped to `[0, 1]`.
    pub action: Vec<f32>,
    pub state: PolicyState<f32>,
    pub extracted_left: AttentionPoints,
    pub extracted_right: AttentionPoints,
    pub predicted_left: AttentionPoints,
    pub predicted_right: AttentionPoints,
    /// Hidden state of the joint LSTM after this step.
    pub hidden_joint: Vec<f32>,
    pub latency: Duration,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub msa: Msa,
    pub policy: Policy,
}

impl Model {
    pub fn new<F: Float>(cfg: &ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msa = Msa::new(store, "msa", &cfg.msa, &mut rng)?;
        let policy = Policy::new(store, "policy", &cfg.policy, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            msa,
            policy,
        })
    }

    /// Builds the model and a freshly initialised parameter store.
    pub fn init<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn stack_views<F: Float>(&self, left: &Tensor<F>, right: &Tensor<F>) -> Result<Tensor<F>> {
        let right = match self.cfg.input {
            InputMode::Stereo => right,
            InputMode::Mono => left,
        };
        if left.shape() != right.shape() || left.shape().len() != 4 {
            return Err(Error::shape(
                "model",
                format!("views {:?} and {:?}", left.shape(), right.shape()),
            ));
        }
        let mut shape = left.shape().to_vec();
        shape[0] *= 2;
        let mut data = Vec::with_capacity(left.numel() * 2);
        data.extend_from_slice(left.data());
        data.extend_from_slice(right.data());
        Tensor::new(&shape, data)
    }

    /// Unrolls the extractor and policy over whole sequences and records the
    /// weighted loss. With `detach_targets` the extracted next-step points are
    /// treated as constants in the attention loss.
    pub fn sequence_loss<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        batch: &SequenceBatch<F>,
        alpha: f64,
        detach_targets: bool,
    ) -> Result<SequenceLoss> {
        let (b, steps) = (batch.batch, batch.steps);
        if steps < 2 || batch.robot.len() != steps || batch.targets.len() != steps - 1 {
            return Err(Error::shape(
                "sequence_loss",
                format!(
                    "{steps} steps, {} states, {} targets",
                    batch.robot.len(),
                    batch.targets.len()
                ),
            ));
        }
        if batch.left.shape()[0] != steps * b {
            return Err(Error::shape(
                "sequence_loss",
                format!("images {:?} for {steps}x{b}", batch.left.shape()),
            ));
        }
        let images = self.stack_views(&batch.left, &batch.right)?;
        let images = s.tape.constant(images);
        let out = self.msa.extract_points(s, images)?;
        let width = 2 * self.cfg.msa.n_points;
        let flat = s.tape.reshape(out.points, &[2 * steps * b, width])?;
        let mut points = |view: usize, t: usize| -> Result<Var> {
            let first = (view * steps + t) * b;
            let rows: Vec<usize> = (first..first + b).collect();
            s.tape.select_rows(flat, &rows)
        };
        let mut extracted = [Vec::with_capacity(steps), Vec::with_capacity(steps)];
        for (view, list) in extracted.iter_mut().enumerate() {
            for t in 0..steps {
                list.push(points(view, t)?);
            }
        }

        let mut state = init_state::<F>(b, &self.cfg.policy)?.bind(&mut s.tape);
        let mut pred_joint = Vec::with_capacity(steps - 1);
        let mut targets = Vec::with_capacity(steps - 1);
        let mut pred_points = [Vec::with_capacity(steps - 1), Vec::with_capacity(steps - 1)];
        let mut next_points = [Vec::with_capacity(steps - 1), Vec::with_capacity(steps - 1)];
        for t in 0..steps - 1 {
            let robot = s.tape.constant(batch.robot[t].clone());
            let (pred, next) = self
                .policy
                .policy_step(s, extracted[0][t], extracted[1][t], robot, &state)?;
            state = next;
            pred_joint.push(pred.joints);
            targets.push(s.tape.constant(batch.targets[t].clone()));
            pred_points[0].push(pred.points_left);
            pred_points[1].push(pred.points_right);
            for view in 0..2 {
                let target = extracted[view][t + 1];
                next_points[view].push(if detach_targets {
                    s.tape.constant(s.tape.value(target).clone())
                } else {
                    target
                });
            }
        }
        let joint = joint_loss_var(&mut s.tape, &pred_joint, &targets)?;
        let attention = attention_loss_var(
            &mut s.tape,
            &pred_points[0],
            &pred_points[1],
            &next_points[0],
            &next_points[1],
        )?;
        let total = total_loss_var(&mut s.tape, joint, attention, alpha)?;
        let value = |v: Var| s.tape.value(v).data()[0].as_f64();
        let breakdown = LossBreakdown {
            total: value(total),
            joint: value(joint),
            attention: value(attention),
            alpha,
        };
        Ok(SequenceLoss {
            total,
            joint,
            attention,
            breakdown,
        })
    }

    /// One control step: extract points from both views, advance the policy and
    /// return the clamped next-state prediction. When `export` is set, the left
    /// view's attention maps are written there.
    pub fn closed_loop_step(
        &self,
        store: &ParamStore<f32>,
        frame: &StereoFrame,
        state: &PolicyState<f32>,
        export: Option<&Path>,
    ) -> Result<ClosedLoopStep> {
        let start = Instant::now();
        let (h, w) = (self.cfg.msa.image_h, self.cfg.msa.image_w);
        let left = frame.left.clone().reshape(&[1, 3, h, w])?;
        let right = frame.right.clone().reshape(&[1, 3, h, w])?;
        let d = self.cfg.policy.robot_dim;
        if frame.robot.len() != d {
            return Err(Error::shape(
                "closed_loop_step",
                format!("robot state of {} dims, expected {d}", frame.robot.len()),
            ));
        }
        let mut s = Session::eval(store);
        let images = s.tape.constant(self.stack_views(&left, &right)?);
        let out = self.msa.extract_points(&mut s, images)?;
        let width = 2 * self.cfg.msa.n_points;
        let flat = s.tape.reshape(out.points, &[2, width])?;
        let p_left = s.tape.select_rows(flat, &[0])?;
        let p_right = s.tape.select_rows(flat, &[1])?;
        let robot = s.tape.constant(Tensor::new(&[1, d], frame.robot.clone())?);
        let bound = state.bind(&mut s.tape);
        let (pred, next) = self.policy.policy_step(&mut s, p_left, p_right, robot, &bound)?;
        let action: Vec<f32> = s
            .tape
            .value(pred.joints)
            .data()
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let latency = start.elapsed();
        if let Some(dir) = export {
            export_diagnostics(dir, &self.msa, &s.tape, &out, 0)?;
        }
        let points = |v: Var| AttentionPoints::from_flat(s.tape.value(v).data());
        Ok(ClosedLoopStep {
            action,
            extracted_left: points(p_left)?,
            extracted_right: points(p_right)?,
            predicted_left: points(pred.points_left)?,
            predicted_right: points(pred.points_right)?,
            hidden_joint: s.tape.value(next.joint.0).data().to_vec(),
            state: next.values(&s.tape),
            latency,
        })
    }
}

/// Smallest stereo model exercising every layer: 8x8 images, two points, width 4.
pub fn tiny_config(temperature: f64) -> ModelConfig {
    ModelConfig {
        msa: MsaConfig {
            n_points: 2,
            image_h: 8,
            image_w: 8,
            stage_channels: [4, 4, 4],
            temperature,
            ..MsaConfig::default()
        },
        policy: PolicyConfig {
            n_points: 2,
            robot_dim: 3,
            hidden_points: 4,
            hidden_joint: 4,
            hidden_high: 4,
        },
        input: InputMode::Stereo,
    }
}

/// Uniform [0, 1) frames, robot states and targets.
fn random_batch<F: Float>(cfg: &ModelConfig, b: usize, steps: usize, seed: u64) -> SequenceBatch<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (cfg.msa.image_h, cfg.msa.image_w, cfg.policy.robot_dim);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| F::lit(rng.gen_range(0.0..1.0))).collect()).unwrap()
    };
    SequenceBatch {
        batch: b,
        steps,
        left: rand(&[steps * b, 3, h, w]),
        right: rand(&[steps * b, 3, h, w]),
        robot: (0..steps).map(|_| rand(&[b, d])).collect(),
        targets: (0..steps - 1).map(|_| rand(&[b, d])).collect(),
    }
}

/// Acceptance threshold for [`composed_grad_check`].
pub const COMPOSED_TOL: f64 = 1e-2;

/// Worst relative error of the full stereo sequence loss (extractor, policy,
/// joint and attention terms) against finite differences, probing the first
/// and last coordinate of every parameter of [`tiny_config`] in f64.
pub fn composed_grad_check(seed: u64, temperature: f64) -> Result<f64> {
    let cfg = tiny_config(temperature);
    let (model, store) = Model::init::<f64>(&cfg, seed)?;
    let batch = random_batch::<f64>(&cfg, 2, 3, seed.wrapping_add(1));
    let coords: Vec<(ParamId, usize)> = store
        .parameter_ids()
        .flat_map(|id| {
            let n = store.get(id).numel();
            [(id, 0), (id, n - 1)]
        })
        .collect();
    grad_check_params(
        &store,
        &coords,
        |s| Ok(model.sequence_loss(s, &batch, 0.5, false)?.total),
        1e-5,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.msa.temperature = 0.01;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let mut bad = a.clone();
        bad.policy.n_points = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn breakdown_matches_tape() {
        let cfg = tiny_config(0.001);
        let (model, store) = Model::init::<f32>(&cfg, 1).unwrap();
        let batch = random_batch(&cfg, 2, 4, 2);
        let mut s = Session::train(&store);
        let l = model.sequence_loss(&mut s, &batch, 0.1, false).unwrap();
        let b = l.breakdown;
        assert!((b.total - (b.joint + b.alpha * b.attention)).abs() < 1e-6);
        assert!(b.joint >= 0.0 && b.attention >= 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let err = composed_grad_check(4, 0.001).unwrap();
        assert!(err < COMPOSED_TOL, "relative error {err} at the default temperature");
        let err = composed_grad_check(4, 0.5).unwrap();
        assert!(err < COMPOSED_TOL, "relative error {err} at a soft temperature");
    }

    #[test]
    fn attention_loss_reaches_the_extractor() {
        let cfg = tiny_config(0.5);
        let (model, store) = Model::init::<f64>(&cfg, 5).unwrap();
        let batch = random_batch::<f64>(&cfg, 2, 3, 6);
        let key = store.find("msa.key.conv.weight").unwrap();
        let grad_of = |detach: bool| {
            let mut s = Session::train(&store);
            let l = model.sequence_loss(&mut s, &batch, 0.1, detach).unwrap();
            s.tape.backward(l.attention).unwrap();
            s.param_grads()
                .into_iter()
                .find(|(id, _)| *id == key)
                .map(|(_, g)| g.to_vec())
                .unwrap()
        };
        let coupled = grad_of(false);
        let detached = grad_of(true);
        assert!(coupled.iter().any(|&g| g != 0.0));
        assert_ne!(coupled, detached);
    }

    #[test]
    fn closed_loop_step_contract() {
        let cfg = tiny_config(0.001);
        let (model, store) = Model::init::<f32>(&cfg, 7).unwrap();
        let batch = random_batch::<f32>(&cfg, 1, 2, 8);
        let frame = StereoFrame {
            left: Tensor::new(&[3, 8, 8], batch.left.data()[..192].to_vec()).unwrap(),
            right: Tensor::new(&[3, 8, 8], batch.right.data()[..192].to_vec()).unwrap(),
            robot: batch.robot[0].data().to_vec(),
        };
        let state = init_state(1, &cfg.policy).unwrap();
        let a = model.closed_loop_step(&store, &frame, &state, None).unwrap();
        assert_eq!(a.action.len(), 3);
        assert!(a.action.iter().all(|v| (0.0..=1.0).contains(v)));
        let pts = [
            &a.extracted_left,
            &a.extracted_right,
            &a.predicted_left,
            &a.predicted_right,
        ];
        assert!(pts.iter().all(|p| p.len() == 2 && p.in_unit_square()));
        assert_eq!(a.hidden_joint.len(), 4);
        let b = model.closed_loop_step(&store, &frame, &state, None).unwrap();
        assert_eq!(a.action, b.action);
        assert_eq!(a.state, b.state);
        let same = StereoFrame {
            right: frame.left.clone(),
            ..frame.clone()
        };
        let c = model.closed_loop_step(&store, &same, &state, None).unwrap();
        assert_eq!(c.extracted_left, c.extracted_right);
    }
}
