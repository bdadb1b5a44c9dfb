//! Optimisation loop: normalisation, batch assembly, Adam and checkpointing.

mod checkpoint;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Session, Tensor};
use crate::model::{InputMode, Model, ModelConfig, SequenceBatch};
use crate::msa::Backbone;
use crate::objective::{alpha_at, LossBreakdown, ScheduleConfig};
use crate::simenv::{derive_seed, Dataset, JointStats, SimConfig, ROBOT_DIM};
use crate::{Error, Result};

pub use checkpoint::{
    checkpoint_paths, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointManifest,
    CheckpointMeta, ManifestEntry,
};

/// Below this range a dimension is treated as constant.
const DEGENERATE_RANGE: f64 = 1e-12;

/// Per-dimension min-max scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.iter().zip(&max).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(
                "normalizer needs min <= max per dimension".into(),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn from_stats(stats: &JointStats) -> Result<Self> {
        Self::new(stats.min.clone(), stats.max.clone())
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    fn range(&self, d: usize) -> Option<f64> {
        let r = self.max[d] - self.min[d];
        (r > DEGENERATE_RANGE).then_some(r)
    }

    /// Constant dimensions map to 0.5.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(d, &x)| match self.range(d) {
                Some(r) => (x - self.min[d]) / r,
                None => 0.5,
            })
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .enumerate()
            .map(|(d, &y)| match self.range(d) {
                Some(r) => self.min[d] + y * r,
                None => self.min[d],
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub backbone: Backbone,
    pub input: InputMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            backbone: Backbone::Msa,
            input: InputMode::Stereo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of optimiser updates.
    pub steps: usize,
    pub batch: usize,
    /// Defaults to 1e-3: ten times the usual rate for a run ten times shorter.
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of as an L2 gradient term.
    pub decoupled_weight_decay: bool,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub ablation: Ablation,
    /// Attention-loss weight schedule; `total_steps` must equal `steps - 1`.
    pub schedule: ScheduleConfig,
    /// Treat next-step extracted points as constants in the attention loss.
    pub detach_targets: bool,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Architecture. Image size and robot width are taken from the dataset and
    /// the backbone and input mode from `ablation`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(5000)
    }
}

impl TrainConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            batch: 4,
            lr: 1e-3,
            weight_decay: 1e-5,
            decoupled_weight_decay: false,
            optimizer: AdamConfig::default(),
            seed: 7,
            ablation: Ablation::default(),
            schedule: ScheduleConfig {
                total_steps: steps.saturating_sub(1),
                ..ScheduleConfig::default()
            },
            detach_targets: false,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }

    /// Changes the run length and keeps the schedule spanning it.
    pub fn set_steps(&mut self, steps: usize) {
        self.steps = steps;
        self.schedule.total_steps = steps.saturating_sub(1);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("train config: {msg}")));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.schedule.total_steps != self.steps - 1 {
            return bad(format!(
                "schedule.total_steps is {} but must be steps - 1 = {}",
                self.schedule.total_steps,
                self.steps - 1
            ));
        }
        self.schedule.validate()
    }

    /// Model configuration after applying dataset shapes and ablation flags.
    pub fn resolved_model(&self, sim: &SimConfig) -> ModelConfig {
        let mut m = self.model.clone();
        m.msa.image_h = sim.image_h;
        m.msa.image_w = sim.image_w;
        m.msa.backbone = self.ablation.backbone;
        m.policy.robot_dim = ROBOT_DIM;
        m.input = self.ablation.input;
        m
    }
}

/// Adam with L2 or decoupled weight decay. Moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, train: &TrainConfig) -> Self {
        let sizes: Vec<usize> = store.entries().iter().map(|e| e.value.numel()).collect();
        Self {
            cfg: train.optimizer,
            lr: train.lr,
            weight_decay: train.weight_decay,
            decoupled: train.decoupled_weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step_size = (self.lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        let wd = self.weight_decay as f32;
        let shrink = 1.0 - (self.lr * self.weight_decay) as f32;
        for (id, g) in grads {
            let i = id.index();
            let w = store.get_mut(*id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                let gj = if self.decoupled { g[j] } else { g[j] + wd * w[j] };
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                if self.decoupled {
                    w[j] *= shrink;
                }
                w[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Episodes flattened into contiguous normalised arrays.
#[derive(Clone, Debug)]
pub struct PreparedData {
    steps: usize,
    frame_shape: [usize; 3],
    episodes: Vec<PreparedEpisode>,
}

#[derive(Clone, Debug)]
struct PreparedEpisode {
    left: Vec<f32>,
    right: Vec<f32>,
    robot: Vec<f32>,
    targets: Vec<f32>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, norm: &Normalizer) -> Result<Self> {
        let first = dataset
            .episodes
            .first()
            .ok_or_else(|| Error::Dataset("dataset has no episodes".into()))?;
        let steps = first.observations.len();
        let shape = first.observations[0].left.shape().to_vec();
        if shape.len() != 3 || norm.dims() != ROBOT_DIM {
            return Err(Error::Dataset(format!("unexpected frame shape {shape:?}")));
        }
        let frame_shape = [shape[0], shape[1], shape[2]];
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32);
        let episodes = dataset
            .episodes
            .iter()
            .map(|ep| {
                if ep.observations.len() != steps || ep.actions.len() + 1 != steps {
                    return Err(Error::Dataset(format!("episode {} has a different length", ep.seed)));
                }
                let mut p = PreparedEpisode {
                    left: Vec::with_capacity(steps * first.observations[0].left.numel()),
                    right: Vec::new(),
                    robot: Vec::with_capacity(steps * ROBOT_DIM),
                    targets: Vec::with_capacity((steps - 1) * ROBOT_DIM),
                };
                for o in &ep.observations {
                    if o.left.shape() != frame_shape || o.right.shape() != frame_shape {
                        return Err(Error::Dataset(format!("episode {} has mixed frame shapes", ep.seed)));
                    }
                    p.left.extend_from_slice(o.left.data());
                    p.right.extend_from_slice(o.right.data());
                    p.robot.extend(to_f32(norm.normalize(&o.robot)));
                }
                for a in &ep.actions {
                    p.targets.extend(to_f32(norm.normalize(a)));
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            steps,
            frame_shape,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time-major batch of the given episodes.
    pub fn batch(&self, indices: &[usize]) -> Result<SequenceBatch<f32>> {
        let b = indices.len();
        let (t_len, d) = (self.steps, ROBOT_DIM);
        let frame: usize = self.frame_shape.iter().product();
        let mut left = Vec::with_capacity(t_len * b * frame);
        let mut right = Vec::with_capacity(t_len * b * frame);
        for t in 0..t_len {
            for &i in indices {
                let ep = &self.episodes[i];
                left.extend_from_slice(&ep.left[t * frame..(t + 1) * frame]);
                right.extend_from_slice(&ep.right[t * frame..(t + 1) * frame]);
            }
        }
        let rows = |t: usize, pick: fn(&PreparedEpisode) -> &Vec<f32>| {
            let data = indices
                .iter()
                .flat_map(|&i| pick(&self.episodes[i])[t * d..(t + 1) * d].iter().copied())
                .collect();
            Tensor::new(&[b, d], data)
        };
        let [c, h, w] = self.frame_shape;
        Ok(SequenceBatch {
            batch: b,
            steps: t_len,
            left: Tensor::new(&[t_len * b, c, h, w], left)?,
            right: Tensor::new(&[t_len * b, c, h, w], right)?,
            robot: (0..t_len).map(|t| rows(t, |e| &e.robot)).collect::<Result<_>>()?,
            targets: (0..t_len - 1).map(|t| rows(t, |e| &e.targets)).collect::<Result<_>>()?,
        })
    }
}

/// One row of `training_log.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub joint: f64,
    pub attention: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Columns of `training_log.csv`. Wall-clock time lives in `timing.csv` so the
/// log itself is reproducible byte for byte.
pub const LOG_HEADER: &str = "step,total,joint,attention,alpha,grad_norm";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.total, self.joint, self.attention, self.alpha, self.grad_norm
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub normalizer: Normalizer,
    pub log: Vec<LogRow>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

struct Output {
    dir: PathBuf,
    log: BufWriter<fs::File>,
    timing: BufWriter<fs::File>,
}

fn create_csv(path: &Path, header: &str) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(w)
}

impl Output {
    fn open(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("train.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: create_csv(&dir.join("training_log.csv"), LOG_HEADER)?,
            timing: create_csv(&dir.join("timing.csv"), "step,wall_ms")?,
        })
    }

    fn row(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.log, "{}", row.csv()).map_err(|e| Error::io(self.dir.join("training_log.csv"), e))?;
        writeln!(self.timing, "{},{:.3}", row.step, row.wall_ms).map_err(|e| Error::io(self.dir.join("timing.csv"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log
            .flush()
            .map_err(|e| Error::io(self.dir.join("training_log.csv"), e))?;
        self.timing
            .flush()
            .map_err(|e| Error::io(self.dir.join("timing.csv"), e))
    }
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    breakdown: LossBreakdown,
    grad_norm: f64,
    batch: &'a [usize],
    non_finite_parameters: Vec<&'a str>,
}

fn dump_divergence(dir: Option<&Path>, dump: &DivergenceDump<'_>) -> Error {
    let detail = format!(
        "loss {} (joint {}, attention {}), grad norm {}",
        dump.breakdown.total, dump.breakdown.joint, dump.breakdown.attention, dump.grad_norm
    );
    if let Some(dir) = dir {
        let path = dir.join("divergence.json");
        match serde_json::to_string_pretty(dump) {
            Ok(text) => {
                if let Err(e) = fs::write(&path, text) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not encode divergence dump: {e}"),
        }
    }
    Error::Diverged {
        step: dump.step,
        detail,
    }
}

/// Trains from scratch. With `out` set, writes `train.json`,
/// `training_log.csv` and checkpoints there.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sim = &dataset.summary.sim;
    let model_cfg = cfg.resolved_model(sim);
    let normalizer = Normalizer::from_stats(&dataset.summary.stats)?;
    let data = PreparedData::new(dataset, &normalizer)?;
    let (model, mut store) = Model::init::<f32>(&model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&store, cfg);
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5a11));
    let mut output = out.map(|dir| Output::open(dir, cfg)).transpose()?;
    let mut log = Vec::with_capacity(cfg.steps);
    let meta = |step: usize, metrics: Option<LossBreakdown>| CheckpointMeta {
        step,
        sim: sim.clone(),
        normalizer: normalizer.clone(),
        metrics,
    };
    log::info!(
        "training {} parameters on {} episodes for {} steps",
        store.num_parameters(),
        data.len(),
        cfg.steps
    );

    let mut last = None;
    for step in 0..cfg.steps {
        let started = Instant::now();
        let indices: Vec<usize> = (0..cfg.batch).map(|_| sampler.gen_range(0..data.len())).collect();
        let batch = data.batch(&indices)?;
        let alpha = alpha_at(step, &cfg.schedule)?;
        let (breakdown, grads, stats) = {
            let mut s = Session::train(&store);
            let loss = model.sequence_loss(&mut s, &batch, alpha, cfg.detach_targets)?;
            s.tape.backward(loss.total)?;
            let grads: Vec<(ParamId, Vec<f32>)> = s.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
            (loss.breakdown, grads, s.take_stat_updates())
        };
        let grad_norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !(breakdown.total.is_finite() && grad_norm.is_finite()) {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
                .map(|(id, _)| store.entry(*id).name.as_str())
                .collect();
            return Err(dump_divergence(
                out,
                &DivergenceDump {
                    step,
                    breakdown,
                    grad_norm,
                    batch: &indices,
                    non_finite_parameters: bad,
                },
            ));
        }
        adam.step(&mut store, &grads);
        store.apply_stat_updates(stats);
        let row = LogRow {
            step,
            total: breakdown.total,
            joint: breakdown.joint,
            attention: breakdown.attention,
            alpha,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(o) = output.as_mut() {
            o.row(&row)?;
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                o.flush()?;
                let (bin, _) = checkpoint_paths(&o.dir, step + 1);
                save_checkpoint(&bin, &model, &store, &meta(step + 1, Some(breakdown)))?;
            }
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: total {:.5} joint {:.5} attention {:.5} alpha {:.2e} |g| {:.3e}",
                row.total,
                row.joint,
                row.attention,
                alpha,
                grad_norm
            );
        }
        log.push(row);
        last = Some(breakdown);
    }

    let checkpoint = match output.as_mut() {
        Some(o) => {
            o.flush()?;
            let (bin, _) = checkpoint_paths(&o.dir, cfg.steps);
            save_checkpoint(&bin, &model, &store, &meta(cfg.steps, last))?;
            Some(bin)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        store,
        normalizer,
        log,
        checkpoint,
    })
}

#[cfg(test)]
mod tests;
