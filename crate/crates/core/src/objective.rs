//! Training losses: joint prediction with smoothing, the attention-point loss,
//! their weighted sum, and the weight schedule.
//!
//! Each loss has a plain-slice form for reporting and a tape form for training.
//! Both reduce by the mean over every coordinate and timestep.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Tape, Var};
use crate::error::{Error, Result};

/// Weight of the consecutive-prediction smoothing term.
pub const SMOOTHING_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub joint: f64,
    pub attention: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            alpha_start: 1e-4,
            alpha_end: 0.1,
            total_steps: 5000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start > 0.0 && self.alpha_start <= self.alpha_end && self.alpha_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < alpha_start <= alpha_end, got {} and {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("schedule total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation `start * (end / start)^(step / total)`.
///
/// The endpoints are returned exactly.
pub fn alpha_at(step: usize, sched: &ScheduleConfig) -> Result<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    if step == 0 {
        return Ok(sched.alpha_start);
    }
    if step == sched.total_steps {
        return Ok(sched.alpha_end);
    }
    let frac = step as f64 / sched.total_steps as f64;
    let alpha = sched.alpha_start * (sched.alpha_end / sched.alpha_start).powf(frac);
    Ok(alpha.clamp(sched.alpha_start, sched.alpha_end))
}

fn check_aligned(op: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape(op, "sequences are not aligned".to_string()));
    }
    Ok(())
}

fn mean_sq(a: &[f64], b: &[f64]) -> (f64, usize) {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(), a.len())
}

/// Prediction error plus the weighted squared difference of consecutive predictions.
///
/// `pred[t]` and `target[t]` are the prediction and target for the same step.
/// The smoothing term starts at the second prediction.
pub fn joint_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    check_aligned("joint_loss", pred, target)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("joint_loss needs at least one step".into()));
    }
    let (mut err, mut n) = (0.0, 0);
    for (p, t) in pred.iter().zip(target) {
        let (s, c) = mean_sq(p, t);
        err += s;
        n += c;
    }
    let (mut smooth, mut m) = (0.0, 0);
    for w in pred.windows(2) {
        let (s, c) = mean_sq(&w[1], &w[0]);
        smooth += s;
        m += c;
    }
    let err = if n == 0 { 0.0 } else { err / n as f64 };
    let smooth = if m == 0 { 0.0 } else { smooth / m as f64 };
    Ok(err + SMOOTHING_WEIGHT * smooth)
}

/// Mean squared coordinate error of the left view plus that of the right view.
pub fn attention_loss(
    pred_left: &[f64],
    pred_right: &[f64],
    extracted_left: &[f64],
    extracted_right: &[f64],
) -> Result<f64> {
    let sizes = [
        pred_left.len(),
        pred_right.len(),
        extracted_left.len(),
        extracted_right.len(),
    ];
    if sizes.iter().any(|&s| s != sizes[0]) || sizes[0] == 0 {
        return Err(Error::shape("attention_loss", format!("coordinate counts {sizes:?}")));
    }
    let m = sizes[0] as f64;
    Ok(mean_sq(pred_left, extracted_left).0 / m + mean_sq(pred_right, extracted_right).0 / m)
}

pub fn total_loss(joint: f64, attention: f64, alpha: f64) -> Result<LossBreakdown> {
    for (name, v) in [("joint", joint), ("attention", attention), ("alpha", alpha)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} loss term must be nonnegative, got {v}"
            )));
        }
    }
    Ok(LossBreakdown {
        total: joint + alpha * attention,
        joint,
        attention,
        alpha,
    })
}

fn sum_all<F: Float>(tape: &mut Tape<F>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn sq_sum<F: Float>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<(Var, usize)> {
    let d = tape.sub(a, b)?;
    let n = tape.value(d).numel();
    let sq = tape.square(d);
    Ok((tape.sum(sq), n))
}

/// Tape form of [`joint_loss`]; each element of `pred` and `target` is `[B, D]`.
pub fn joint_loss_var<F: Float>(tape: &mut Tape<F>, pred: &[Var], target: &[Var]) -> Result<Var> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(
            "joint_loss",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    let mut err = Vec::with_capacity(pred.len());
    let mut n = 0;
    for (&p, &t) in pred.iter().zip(target) {
        let (s, c) = sq_sum(tape, p, t)?;
        err.push(s);
        n += c;
    }
    let err = sum_all(tape, &err)?;
    let mut loss = tape.scale(err, F::lit(1.0 / n as f64));
    if pred.len() > 1 {
        let mut smooth = Vec::with_capacity(pred.len() - 1);
        let mut m = 0;
        for w in pred.windows(2) {
            let (s, c) = sq_sum(tape, w[1], w[0])?;
            smooth.push(s);
            m += c;
        }
        let smooth = sum_all(tape, &smooth)?;
        let smooth = tape.scale(smooth, F::lit(SMOOTHING_WEIGHT / m as f64));
        loss = tape.add(loss, smooth)?;
    }
    Ok(loss)
}

/// Tape form of [`attention_loss`] over a sequence; every element is `[B, 2N]`.
pub fn attention_loss_var<F: Float>(
    tape: &mut Tape<F>,
    pred_left: &[Var],
    pred_right: &[Var],
    extracted_left: &[Var],
    extracted_right: &[Var],
) -> Result<Var> {
    let len = pred_left.len();
    if len == 0
        || [pred_right.len(), extracted_left.len(), extracted_right.len()]
            .iter()
            .any(|&l| l != len)
    {
        return Err(Error::shape("attention_loss", "sequence lengths differ".to_string()));
    }
    let mut view = |pred: &[Var], ext: &[Var]| -> Result<Var> {
        let mut terms = Vec::with_capacity(len);
        let mut n = 0;
        for (&p, &e) in pred.iter().zip(ext) {
            let (s, c) = sq_sum(tape, p, e)?;
            terms.push(s);
            n += c;
        }
        let s = sum_all(tape, &terms)?;
        Ok(tape.scale(s, F::lit(1.0 / n as f64)))
    };
    let left = view(pred_left, extracted_left)?;
    let right = view(pred_right, extracted_right)?;
    tape.add(left, right)
}

/// `joint + alpha * attention` on the tape.
pub fn total_loss_var<F: Float>(tape: &mut Tape<F>, joint: Var, attention: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(attention, F::lit(alpha));
    tape.add(joint, weighted)
}
