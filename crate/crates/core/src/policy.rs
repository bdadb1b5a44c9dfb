//! Hierarchical recurrent motion predictor.
//!
//! Three low-level LSTMs read the left points, the right points and the robot
//! state. Their cells are concatenated into the cell of one high-level LSTM whose
//! input is the concatenation of their hidden states; the updated cell is split
//! back and replaces the low-level cells for the next timestep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Linear, LstmCell, ParamStore, Session, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_points: usize,
    pub robot_dim: usize,
    /// Width of each point LSTM.
    pub hidden_points: usize,
    pub hidden_joint: usize,
    pub hidden_high: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            n_points: 6,
            robot_dim: 4,
            hidden_points: 32,
            hidden_joint: 32,
            hidden_high: 64,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_points,
            self.robot_dim,
            self.hidden_points,
            self.hidden_joint,
            self.hidden_high,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "policy widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Cell width of the high-level LSTM.
    pub fn high_cell(&self) -> usize {
        2 * self.hidden_points + self.hidden_joint
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Left | Modality::Right => 2 * self.n_points,
            Modality::Joint => self.robot_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Left,
    Right,
    Joint,
}

/// Recurrent state held between tapes: every tensor is `[B, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState<F> {
    pub left: (Tensor<F>, Tensor<F>),
    pub right: (Tensor<F>, Tensor<F>),
    pub joint: (Tensor<F>, Tensor<F>),
    pub high_h: Tensor<F>,
}

pub fn init_state<F: Float>(batch: usize, cfg: &PolicyConfig) -> Result<PolicyState<F>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    let pair = |w: usize| (Tensor::zeros(&[batch, w]), Tensor::zeros(&[batch, w]));
    Ok(PolicyState {
        left: pair(cfg.hidden_points),
        right: pair(cfg.hidden_points),
        joint: pair(cfg.hidden_joint),
        high_h: Tensor::zeros(&[batch, cfg.hidden_high]),
    })
}

impl<F: Float> PolicyState<F> {
    pub fn bind(&self, tape: &mut Tape<F>) -> StateVars {
        let mut pair = |p: &(Tensor<F>, Tensor<F>)| (tape.constant(p.0.clone()), tape.constant(p.1.clone()));
        StateVars {
            left: pair(&self.left),
            right: pair(&self.right),
            joint: pair(&self.joint),
            high_h: tape.constant(self.high_h.clone()),
        }
    }

    /// Concatenated low-level cells, the high-level cell state.
    pub fn high_cell(&self) -> Vec<F> {
        let batch = self.high_h.shape()[0];
        let mut out = Vec::new();
        for b in 0..batch {
            for c in [&self.left.1, &self.right.1, &self.joint.1] {
                let w = c.shape()[1];
                out.extend_from_slice(&c.data()[b * w..(b + 1) * w]);
            }
        }
        out
    }
}

/// Recurrent state recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub left: (Var, Var),
    pub right: (Var, Var),
    pub joint: (Var, Var),
    pub high_h: Var,
}

impl StateVars {
    pub fn values<F: Float>(&self, tape: &Tape<F>) -> PolicyState<F> {
        let pair = |p: (Var, Var)| (tape.value(p.0).clone(), tape.value(p.1).clone());
        PolicyState {
            left: pair(self.left),
            right: pair(self.right),
            joint: pair(self.joint),
            high_h: tape.value(self.high_h).clone(),
        }
    }
}

/// Next-step predictions on a tape: joints `[B, D_r]`, points `[B, 2N]`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    pub joints: Var,
    pub points_left: Var,
    pub points_right: Var,
}

#[derive(Clone, Debug)]
struct LowLevel {
    lstm: LstmCell,
    head: Linear,
    squash: bool,
}

#[derive(Clone, Debug)]
pub struct Policy {
    cfg: PolicyConfig,
    left: LowLevel,
    right: LowLevel,
    joint: LowLevel,
    high: LstmCell,
}

impl Policy {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &PolicyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut low = |name: &str, d: usize, hidden: usize, squash: bool| -> Result<LowLevel> {
            Ok(LowLevel {
                lstm: LstmCell::new(store, &format!("{prefix}.{name}.lstm"), d, hidden, hidden, rng)?,
                head: Linear::new(store, &format!("{prefix}.{name}.head"), hidden, d, rng)?,
                squash,
            })
        };
        let left = low("left", 2 * cfg.n_points, cfg.hidden_points, true)?;
        let right = low("right", 2 * cfg.n_points, cfg.hidden_points, true)?;
        let joint = low("joint", cfg.robot_dim, cfg.hidden_joint, false)?;
        let high_in = 2 * cfg.hidden_points + cfg.hidden_joint;
        let high = LstmCell::new(
            store,
            &format!("{prefix}.high.lstm"),
            high_in,
            cfg.hidden_high,
            cfg.high_cell(),
            rng,
        )?;
        Ok(Policy {
            cfg: cfg.clone(),
            left,
            right,
            joint,
            high,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn low(&self, modality: Modality) -> &LowLevel {
        match modality {
            Modality::Left => &self.left,
            Modality::Right => &self.right,
            Modality::Joint => &self.joint,
        }
    }

    /// One low-level update followed by its prediction head, which reads `h'`.
    pub fn low_level_step<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        modality: Modality,
        input: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var)> {
        let want = self.cfg.input_dim(modality);
        if s.tape.shape(input).last() != Some(&want) {
            return Err(Error::shape(
                "low_level_step",
                format!("{modality:?} input {:?}, expected width {want}", s.tape.shape(input)),
            ));
        }
        let unit = self.low(modality);
        let (h, c) = unit.lstm.forward(s, input, h, c)?;
        let mut pred = unit.head.forward(s, h)?;
        if unit.squash {
            pred = s.tape.sigmoid(pred);
        }
        Ok((h, c, pred))
    }

    /// High-level exchange: returns the new high-level hidden state and the
    /// three cells that replace the low-level ones.
    #[allow(clippy::too_many_arguments)]
    pub fn high_level_step<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        h_high: Var,
        c_left: Var,
        c_right: Var,
        c_joint: Var,
        h_left: Var,
        h_right: Var,
        h_joint: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let (hp, hj) = (self.cfg.hidden_points, self.cfg.hidden_joint);
        for (v, w) in [(c_left, hp), (c_right, hp), (c_joint, hj)] {
            if s.tape.shape(v).last() != Some(&w) {
                return Err(Error::shape(
                    "high_level_step",
                    format!("cell {:?}, expected width {w}", s.tape.shape(v)),
                ));
            }
        }
        let input = s.tape.concat_cols(&[h_left, h_right, h_joint])?;
        let cell = s.tape.concat_cols(&[c_left, c_right, c_joint])?;
        let (h_next, c_next) = self.high.forward(s, input, h_high, cell)?;
        let c_l = s.tape.slice_cols(c_next, 0, hp)?;
        let c_r = s.tape.slice_cols(c_next, hp, hp)?;
        let c_j = s.tape.slice_cols(c_next, 2 * hp, hj)?;
        Ok((h_next, c_l, c_r, c_j))
    }

    /// Low-level updates, then the high-level exchange.
    pub fn policy_step<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        points_left: Var,
        points_right: Var,
        robot: Var,
        state: &StateVars,
    ) -> Result<(PolicyOutput, StateVars)> {
        let (h_l, c_l, p_l) = self.low_level_step(s, Modality::Left, points_left, state.left.0, state.left.1)?;
        let (h_r, c_r, p_r) = self.low_level_step(s, Modality::Right, points_right, state.right.0, state.right.1)?;
        let (h_j, c_j, p_j) = self.low_level_step(s, Modality::Joint, robot, state.joint.0, state.joint.1)?;
        let (h_high, c_l, c_r, c_j) = self.high_level_step(s, state.high_h, c_l, c_r, c_j, h_l, h_r, h_j)?;
        Ok((
            PolicyOutput {
                joints: p_j,
                points_left: p_l,
                points_right: p_r,
            },
            StateVars {
                left: (h_l, c_l),
                right: (h_r, c_r),
                joint: (h_j, c_j),
                high_h: h_high,
            },
        ))
    }

    /// [`Policy::policy_step`] without the high-level exchange; low-level cells
    /// pass through unchanged. Used to check that the exchange matters.
    pub fn policy_step_without_exchange<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        points_left: Var,
        points_right: Var,
        robot: Var,
        state: &StateVars,
    ) -> Result<(PolicyOutput, StateVars)> {
        let (h_l, c_l, p_l) = self.low_level_step(s, Modality::Left, points_left, state.left.0, state.left.1)?;
        let (h_r, c_r, p_r) = self.low_level_step(s, Modality::Right, points_right, state.right.0, state.right.1)?;
        let (h_j, c_j, p_j) = self.low_level_step(s, Modality::Joint, robot, state.joint.0, state.joint.1)?;
        Ok((
            PolicyOutput {
                joints: p_j,
                points_left: p_l,
                points_right: p_r,
            },
            StateVars {
                left: (h_l, c_l),
                right: (h_r, c_r),
                joint: (h_j, c_j),
                high_h: state.high_h,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::{grad_check_params, ParamId};

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            n_points: 2,
            robot_dim: 3,
            hidden_points: 4,
            hidden_joint: 4,
            hidden_high: 5,
        }
    }

    fn zero_store(store: &mut ParamStore<f64>) {
        let ids: Vec<ParamId> = store.parameter_ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn init_state_examples() {
        let cfg = PolicyConfig::default();
        let a = init_state::<f32>(2, &cfg).unwrap();
        assert_eq!(a.high_cell().len(), 2 * 96);
        assert_eq!(cfg.high_cell(), 96);
        assert!(a.high_cell().iter().chain(a.high_h.data()).all(|&v| v == 0.0));
        assert_eq!(a, init_state(2, &cfg).unwrap());
        assert!(init_state::<f32>(0, &cfg).is_err());
    }

    #[test]
    fn zero_parameters_predict_head_bias() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_store(&mut store);
        let mut s = Session::train(&store);
        let state = init_state::<f64>(1, &cfg).unwrap().bind(&mut s.tape);
        for (m, st) in [(Modality::Left, state.left), (Modality::Joint, state.joint)] {
            let x = s.tape.constant(Tensor::full(&[1, cfg.input_dim(m)], 0.3));
            let (h, _, pred) = policy.low_level_step(&mut s, m, x, st.0, st.1).unwrap();
            assert!(s.tape.value(h).data().iter().all(|&v| v == 0.0));
            let want = if m == Modality::Joint { 0.0 } else { 0.5 };
            assert!(s.tape.value(pred).data().iter().all(|&v| v == want));
            assert_eq!(s.tape.shape(pred), &[1, cfg.input_dim(m)]);
        }
        let bad = s.tape.constant(Tensor::zeros(&[1, 5]));
        assert!(policy
            .low_level_step(&mut s, Modality::Left, bad, state.left.0, state.left.1)
            .is_err());
    }

    #[test]
    fn zero_parameters_halve_exchanged_cells() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_store(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::train(&store);
        let cells: Vec<Tensor<f64>> = [4, 4, 4]
            .iter()
            .map(|&w| random(&[2, w], -1.0, 1.0, &mut rng))
            .collect();
        let c: Vec<Var> = cells.iter().map(|t| s.tape.constant(t.clone())).collect();
        let h: Vec<Var> = (0..3)
            .map(|_| s.tape.constant(random(&[2, 4], -1.0, 1.0, &mut rng)))
            .collect();
        let hh = s.tape.constant(random(&[2, 5], -1.0, 1.0, &mut rng));
        let (h_next, cl, cr, cj) = policy
            .high_level_step(&mut s, hh, c[0], c[1], c[2], h[0], h[1], h[2])
            .unwrap();
        assert_eq!(s.tape.shape(h_next), &[2, 5]);
        for (out, orig) in [cl, cr, cj].iter().zip(&cells) {
            assert_eq!(s.tape.shape(*out), orig.shape());
            for (a, b) in s.tape.value(*out).data().iter().zip(orig.data()) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    fn unroll(
        policy: &Policy,
        s: &mut Session<'_, f64>,
        inputs: &[(Tensor<f64>, Tensor<f64>, Tensor<f64>)],
        exchange: bool,
    ) -> Vec<PolicyOutput> {
        let cfg = policy.config();
        let mut state = init_state::<f64>(inputs[0].0.shape()[0], cfg)
            .unwrap()
            .bind(&mut s.tape);
        let mut outs = Vec::new();
        for (l, r, j) in inputs {
            let (l, r, j) = (
                s.tape.constant(l.clone()),
                s.tape.constant(r.clone()),
                s.tape.constant(j.clone()),
            );
            let (out, next) = if exchange {
                policy.policy_step(s, l, r, j, &state).unwrap()
            } else {
                policy.policy_step_without_exchange(s, l, r, j, &state).unwrap()
            };
            outs.push(out);
            state = next;
        }
        outs
    }

    fn random_inputs(
        cfg: &PolicyConfig,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        (0..steps)
            .map(|_| {
                (
                    random(&[2, 2 * cfg.n_points], 0.0, 1.0, rng),
                    random(&[2, 2 * cfg.n_points], 0.0, 1.0, rng),
                    random(&[2, cfg.robot_dim], 0.0, 1.0, rng),
                )
            })
            .collect()
    }

    #[test]
    fn step_shapes_determinism_and_range() {
        let cfg = PolicyConfig::default();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let inputs = random_inputs(&cfg, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let run = || {
            let mut s = Session::eval(&store);
            let outs = unroll(&policy, &mut s, &inputs, true);
            outs.iter()
                .map(|o| {
                    assert_eq!(s.tape.shape(o.joints), &[2, 4]);
                    assert_eq!(s.tape.shape(o.points_left), &[2, 12]);
                    let pts = [o.points_left, o.points_right];
                    assert!(pts
                        .iter()
                        .all(|&p| s.tape.value(p).data().iter().all(|v| (0.0..=1.0).contains(v))));
                    s.tape.value(o.joints).data().to_vec()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exchange_changes_predictions() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let inputs = random_inputs(&cfg, 6, &mut ChaCha8Rng::seed_from_u64(5));
        let mut s = Session::eval(&store);
        let with = unroll(&policy, &mut s, &inputs, true);
        let without = unroll(&policy, &mut s, &inputs, false);
        let last = |o: &PolicyOutput| s.tape.value(o.joints).data().to_vec();
        // The exchange only acts from the second step on.
        assert_eq!(last(&with[0]), last(&without[0]));
        assert_ne!(last(&with[5]), last(&without[5]));
    }

    fn sequence_loss(
        policy: &Policy,
        s: &mut Session<'_, f64>,
        inputs: &[(Tensor<f64>, Tensor<f64>, Tensor<f64>)],
    ) -> Var {
        let outs = unroll(policy, s, inputs, true);
        let mut total: Option<Var> = None;
        for (o, (l, _, j)) in outs.iter().zip(inputs) {
            let tj = s.tape.constant(j.clone());
            let tl = s.tape.constant(l.clone());
            let a = s.tape.mse(o.joints, tj).unwrap();
            let b = s.tape.mse(o.points_left, tl).unwrap();
            let step = s.tape.add(a, b).unwrap();
            total = Some(match total {
                Some(t) => s.tape.add(t, step).unwrap(),
                None => step,
            });
        }
        total.unwrap()
    }

    #[test]
    fn bptt_reaches_first_step() {
        let cfg = PolicyConfig::default();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let inputs = random_inputs(&cfg, 30, &mut ChaCha8Rng::seed_from_u64(7));
        let mut s = Session::train(&store);
        let mut state = init_state::<f64>(2, &cfg).unwrap().bind(&mut s.tape);
        // Only the last prediction enters the loss, so any gradient on the
        // first input travelled through all 30 steps.
        let first = s.tape.leaf(inputs[0].2.clone(), true);
        let mut last = None;
        for (t, (l, r, j)) in inputs.iter().enumerate() {
            let (l, r) = (s.tape.constant(l.clone()), s.tape.constant(r.clone()));
            let j = if t == 0 { first } else { s.tape.constant(j.clone()) };
            let (out, next) = policy.policy_step(&mut s, l, r, j, &state).unwrap();
            state = next;
            last = Some(out.joints);
        }
        let loss = s.tape.sum(last.unwrap());
        s.tape.backward(loss).unwrap();
        assert!(s.tape.grad(first).unwrap().iter().any(|&g| g != 0.0));
        let grads = s.param_grads();
        for name in [
            "policy.joint.lstm.w_ih",
            "policy.high.lstm.w_hh",
            "policy.left.lstm.w_hh",
        ] {
            let id = store.find(name).unwrap();
            let g = grads.iter().find(|(i, _)| *i == id).unwrap().1;
            assert!(g.iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn low_level_parameters_receive_gradient() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let inputs = random_inputs(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let mut s = Session::train(&store);
        let loss = sequence_loss(&policy, &mut s, &inputs);
        s.tape.backward(loss).unwrap();
        let grads = s.param_grads();
        for name in [
            "policy.left.lstm.w_ih",
            "policy.left.head.weight",
            "policy.joint.head.bias",
        ] {
            let id = store.find(name).unwrap();
            assert!(
                grads
                    .iter()
                    .find(|(i, _)| *i == id)
                    .unwrap()
                    .1
                    .iter()
                    .any(|&v| v != 0.0),
                "{name}"
            );
        }
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(&mut store, "policy", &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let inputs = random_inputs(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(11));
        let coords: Vec<(ParamId, usize)> = store
            .parameter_ids()
            .flat_map(|id| {
                let n = store.get(id).numel();
                [(id, 0), (id, n / 2), (id, n - 1)]
            })
            .collect();
        let err = grad_check_params(&store, &coords, |s| Ok(sequence_loss(&policy, s, &inputs)), 1e-5).unwrap();
        assert!(err < 1e-2, "relative error {err}");
    }
}
