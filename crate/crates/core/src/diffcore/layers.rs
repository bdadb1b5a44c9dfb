//! Parameterised layers built on the tape primitives.

use rand::Rng;

use super::params::{ParamId, ParamStore, Session};
use super::tape::{LstmVars, NormMode, RunningStats, Var};
use super::tensor::{Float, Tensor};
use crate::error::Result;

fn uniform<F: Float, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Same-size convolution with `k ∈ {1, 3}`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights (`sqrt(6 / fan_in)`), zero bias.
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let w = uniform(rng, &[c_out, c_in, kernel, kernel], (6.0 / fan_in).sqrt());
        Ok(Conv2d {
            weight: store.add_param(&format!("{name}.weight"), w)?,
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            kernel,
        })
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv2d(x, w, Some(b), (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], F::one()))?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], F::one()))?,
        })
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let mut stats: RunningStats<F> = s.running_stats(self.running_mean, self.running_var);
        let mode = s.mode();
        let y = s.tape.batchnorm2d(x, gamma, beta, &mut stats, mode)?;
        if mode == NormMode::Train {
            s.record_stats(self.running_mean, self.running_var, stats);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = uniform(rng, &[d_out, d_in], 1.0 / (d_in as f64).sqrt());
        Ok(Linear {
            weight: store.add_param(&format!("{name}.weight"), w)?,
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(x, w, Some(b))
    }
}

/// LSTM cell whose hidden width may differ from its cell width via a projection.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub proj: Option<ParamId>,
    pub input: usize,
    pub hidden: usize,
    pub cell: usize,
}

impl LstmCell {
    /// Weights uniform in `±1/sqrt(cell)`, zero bias. A projection from the
    /// cell width to `hidden` is added when the two differ.
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        cell: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (cell as f64).sqrt();
        let w_ih = store.add_param(&format!("{name}.w_ih"), uniform(rng, &[4 * cell, input], bound))?;
        let w_hh = store.add_param(&format!("{name}.w_hh"), uniform(rng, &[4 * cell, hidden], bound))?;
        let bias = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[4 * cell]))?;
        let proj = if hidden != cell {
            let p = uniform(rng, &[hidden, cell], 1.0 / (cell as f64).sqrt());
            Some(store.add_param(&format!("{name}.proj"), p)?)
        } else {
            None
        };
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            proj,
            input,
            hidden,
            cell,
        })
    }

    pub fn bind<F: Float>(&self, s: &mut Session<'_, F>) -> LstmVars {
        LstmVars {
            w_ih: s.param(self.w_ih),
            w_hh: s.param(self.w_hh),
            bias: s.param(self.bias),
            proj: self.proj.map(|p| s.param(p)),
        }
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let vars = self.bind(s);
        s.tape.lstm_cell(x, h, c, &vars)
    }
}
