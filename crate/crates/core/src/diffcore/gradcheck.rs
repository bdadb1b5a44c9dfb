//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use super::tape::{LstmVars, NormMode, RunningStats, Tape, Var};
use super::tensor::{Float, Tensor};
use crate::error::Result;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with the given step.
pub fn grad_check<F, Fun>(mut f: Fun, x: &Tensor<F>, step: f64) -> Result<f64>
where
    F: Float,
    Fun: FnMut(&mut Tape<F>, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the error is the max over all coordinates.
#[allow(clippy::needless_range_loop)] // coordinate i indexes the probe and the analytic gradient alike
pub fn grad_check_many<F, Fun>(mut f: Fun, inputs: &[Tensor<F>], step: f64) -> Result<f64>
where
    F: Float,
    Fun: FnMut(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[F]>::to_vec)
                .unwrap_or_else(|| vec![F::zero(); t.numel()])
        })
        .collect();

    let mut eval = |probe: &[Tensor<F>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0].as_f64())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<F>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = F::lit(orig.as_f64() + step);
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = F::lit(orig.as_f64() - step);
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k][i].as_f64(), numeric));
        }
    }
    Ok(worst)
}

/// Gradient check of a model loss with respect to selected parameter coordinates.
///
/// `loss` builds the scalar loss in a training session over `store`. Batch-norm
/// statistic updates are discarded, so every evaluation sees the same store.
pub fn grad_check_params<F, Fun>(
    store: &ParamStore<F>,
    coords: &[(ParamId, usize)],
    mut loss: Fun,
    step: f64,
) -> Result<f64>
where
    F: Float,
    Fun: FnMut(&mut Session<'_, F>) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let mut s = Session::train(store);
        let l = loss(&mut s)?;
        s.tape.backward(l)?;
        let grads = s.param_grads();
        coords
            .iter()
            .map(|&(id, i)| {
                grads
                    .iter()
                    .find(|(gid, _)| *gid == id)
                    .map_or(0.0, |(_, g)| g[i].as_f64())
            })
            .collect()
    };

    let mut probe = store.clone();
    let mut eval = |p: &ParamStore<F>| -> Result<f64> {
        let mut s = Session::train(p);
        let l = loss(&mut s)?;
        Ok(s.tape.value(l).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = F::lit(orig.as_f64() + step);
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = F::lit(orig.as_f64() - step);
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// Acceptance threshold for [`primitive_suite`].
pub const PRIMITIVE_TOL: f64 = 1e-3;
const SUITE_STEP: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
        .expect("shape matches length")
}

/// Magnitudes in [0.1, 1) so ReLU kinks are never straddled by the probe.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).expect("shape matches length")
}

/// `sum(w * y)` with a fixed random `w`, so every output coordinate matters.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.constant(random(t.shape(y), &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Checks every differentiable primitive on random f64 inputs drawn from
/// `seed`. Returns the worst relative error per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = random_off_zero(&[2, 3, 3], &mut rng);
    out.push((
        "relu",
        grad_check(
            |t, x| {
                let y = t.relu(x);
                project(t, y, seed)
            },
            &x,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[2, 5, 5], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    out.push((
        "conv2d 3x3",
        grad_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
                project(t, y, seed)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[2, 4, 3, 3], &mut rng),
        random(&[2, 4, 1, 1], &mut rng),
        random(&[2], &mut rng),
    ];
    out.push((
        "conv2d 1x1",
        grad_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 0)?;
                project(t, y, seed)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[2, 3, 2, 2], &mut rng),
        random(&[3], &mut rng),
        random(&[3], &mut rng),
    ];
    out.push((
        "batchnorm2d train",
        grad_check_many(
            |t, v| {
                let mut stats = RunningStats::new(3);
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, NormMode::Train)?;
                project(t, y, seed)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));
    out.push((
        "batchnorm2d eval",
        grad_check_many(
            |t, v| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, NormMode::Eval)?;
                project(t, y, seed)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[3, 4], &mut rng),
        random(&[2, 4], &mut rng),
        random(&[2], &mut rng),
    ];
    out.push((
        "linear",
        grad_check_many(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, seed)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[2, 3], &mut rng),
        random(&[2, 2], &mut rng),
        random(&[2, 3], &mut rng),
        random(&[12, 3], &mut rng),
        random(&[12, 2], &mut rng),
        random(&[12], &mut rng),
        random(&[2, 3], &mut rng),
    ];
    out.push((
        "lstm_cell",
        grad_check_many(
            |t, v| {
                let p = LstmVars {
                    w_ih: v[3],
                    w_hh: v[4],
                    bias: v[5],
                    proj: Some(v[6]),
                };
                let (h, c) = t.lstm_cell(v[0], v[1], v[2], &p)?;
                let lh = project(t, h, seed)?;
                let lc = project(t, c, seed + 1)?;
                t.add(lh, lc)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let x = random(&[2, 3, 4], &mut rng);
    out.push((
        "softmax2d",
        grad_check(
            |t, x| {
                let y = t.softmax2d_tempered(x, 0.5)?;
                project(t, y, seed)
            },
            &x,
            SUITE_STEP,
        )?,
    ));

    let p = random(&[2, 2, 3], &mut rng);
    let rows: Vec<f64> = (0..6).map(|i| (i / 3) as f64).collect();
    let cols: Vec<f64> = (0..6).map(|i| (i % 3) as f64 * 0.5).collect();
    out.push((
        "spatial_expect",
        grad_check(
            |t, x| {
                let y = t.spatial_expect(x, &rows, &cols)?;
                project(t, y, seed)
            },
            &p,
            SUITE_STEP,
        )?,
    ));

    let x = random(&[2, 2, 3], &mut rng);
    out.push((
        "softmax_expect",
        grad_check(
            |t, x| {
                let y = t.softmax_expect(x, 0.5, &rows, &cols)?;
                project(t, y, seed)
            },
            &x,
            SUITE_STEP,
        )?,
    ));

    let inputs = [
        random(&[4, 3], &mut rng),
        random(&[4, 2], &mut rng),
        random(&[4, 3], &mut rng),
    ];
    out.push((
        "structural and pointwise",
        grad_check_many(
            |t, v| {
                let cat = t.concat_cols(&[v[0], v[1]])?;
                let part = t.slice_cols(cat, 1, 3)?;
                let rows = t.select_rows(part, &[3, 0, 3])?;
                let m = t.mean_of(&[v[2], v[0]])?;
                let s = t.sigmoid(m);
                let th = t.tanh(rows);
                let sq = t.square(th);
                let a = project(t, s, seed)?;
                let b = project(t, sq, seed + 7)?;
                let d = t.sub(a, b)?;
                let sc = t.scale(d, 1.5);
                Ok(t.add_scalar(sc, 0.25))
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    let inputs = [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
    out.push((
        "mse and mean",
        grad_check_many(
            |t, v| {
                let e = t.mse(v[0], v[1])?;
                let m = t.mean(v[0]);
                let r = t.reshape(v[1], &[12])?;
                let r = project(t, r, seed + 3)?;
                let w = t.mul_scaled(e, m, 2.0)?;
                t.add(w, r)
            },
            &inputs,
            SUITE_STEP,
        )?,
    ));

    Ok(out)
}
