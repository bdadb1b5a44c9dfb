use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

use super::{generate_episode, Condition, Episode, RobotState, SimConfig, StereoObservation, Variant, ROBOT_DIM};

/// Give up on an episode slot after this many rejected expert rollouts.
const MAX_ATTEMPTS: u64 = 16;

/// Per-dimension minimum and maximum of raw robot values, taken after
/// rounding to `f32` so they agree with what the blobs store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl JointStats {
    fn empty() -> Self {
        Self {
            min: vec![f64::INFINITY; ROBOT_DIM],
            max: vec![f64::NEG_INFINITY; ROBOT_DIM],
        }
    }

    fn include(&mut self, r: &RobotState) {
        for (d, &v) in r.iter().enumerate() {
            let v = v as f32 as f64;
            self.min[d] = self.min[d].min(v);
            self.max[d] = self.max[d].max(v);
        }
    }

    /// Range over every robot state and action in `episode`.
    pub fn of_episode(episode: &Episode) -> Self {
        let mut s = Self::empty();
        episode.observations.iter().for_each(|o| s.include(&o.robot));
        episode.actions.iter().for_each(|a| s.include(a));
        s
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            min: self.min.iter().zip(&other.min).map(|(a, b)| a.min(*b)).collect(),
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub seed: u64,
    pub variant: Variant,
    pub condition: Condition,
    pub distance: f64,
    pub steps: usize,
    /// Per-frame image shape `[3, H, W]`.
    pub image_shape: [usize; 3],
    pub robot_dim: usize,
    pub stats: JointStats,
    pub success: bool,
    pub base_forward: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub distance: f64,
    pub sim: SimConfig,
    pub episodes: Vec<String>,
    pub stats: JointStats,
    /// Expert rollouts rejected for failing the success check.
    pub rejected: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub summary: DatasetSummary,
    pub episodes: Vec<Episode>,
}

/// SplitMix64 step; maps `(base, stream)` to a well-mixed 64-bit seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `count` expert episodes with variants assigned round-robin, so
/// counts divisible by three split evenly. Runs on the current rayon pool; the
/// result does not depend on the number of threads.
pub fn generate_dataset(cfg: &SimConfig, count: usize, seed: u64, distance: f64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("episode count must be positive".into()));
    }
    let slots: Vec<(Episode, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let variant = Variant::ALL[i % Variant::ALL.len()];
            for attempt in 0..MAX_ATTEMPTS {
                let ep_seed = derive_seed(seed, (i as u64) + attempt * count as u64);
                let ep = generate_episode(ep_seed, variant, distance, Condition::None, cfg)?;
                if ep.success {
                    return Ok((ep, attempt as usize));
                }
            }
            Err(Error::Dataset(format!(
                "expert failed {MAX_ATTEMPTS} times for episode {i}"
            )))
        })
        .collect::<Result<_>>()?;

    let rejected: usize = slots.iter().map(|(_, r)| r).sum();
    if rejected > 0 {
        log::warn!("rejected {rejected} failed expert episodes during generation");
    }
    let episodes: Vec<Episode> = slots.into_iter().map(|(e, _)| e).collect();
    let stats = episodes
        .iter()
        .map(JointStats::of_episode)
        .fold(JointStats::empty(), |a, b| a.merge(&b));
    let names = (0..count).map(episode_dir_name).collect();
    Ok(Dataset {
        summary: DatasetSummary {
            seed,
            distance,
            sim: cfg.clone(),
            episodes: names,
            stats,
            rejected,
        },
        episodes,
    })
}

fn episode_dir_name(i: usize) -> String {
    format!("episode_{i:04}")
}

fn write_blob(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, ep) in dataset.summary.episodes.iter().zip(&dataset.episodes) {
        let ep_dir = dir.join(name);
        fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
        let shape = ep.observations[0].left.shape();
        let manifest = EpisodeManifest {
            seed: ep.seed,
            variant: ep.variant,
            condition: ep.condition,
            distance: ep.distance,
            steps: ep.observations.len(),
            image_shape: [shape[0], shape[1], shape[2]],
            robot_dim: ROBOT_DIM,
            stats: JointStats::of_episode(ep),
            success: ep.success,
            base_forward: ep.base_forward.clone(),
        };
        write_json(&ep_dir.join("manifest.json"), &manifest)?;
        let obs = &ep.observations;
        write_blob(
            &ep_dir.join("left.f32"),
            obs.iter().flat_map(|o| o.left.data().iter().copied()),
        )?;
        write_blob(
            &ep_dir.join("right.f32"),
            obs.iter().flat_map(|o| o.right.data().iter().copied()),
        )?;
        write_blob(
            &ep_dir.join("robot.f32"),
            obs.iter().flat_map(|o| o.robot.map(|v| v as f32)),
        )?;
        write_blob(
            &ep_dir.join("actions.f32"),
            ep.actions.iter().flat_map(|a| a.map(|v| v as f32)),
        )?;
    }
    write_json(&dir.join("dataset.json"), &dataset.summary)
}

fn robot_rows(values: &[f32]) -> Vec<RobotState> {
    values
        .chunks_exact(ROBOT_DIM)
        .map(|r| std::array::from_fn(|d| r[d] as f64))
        .collect()
}

/// Loads a dataset directory. Robot values come back rounded to `f32`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let summary: DatasetSummary = read_json(&dir.join("dataset.json"))?;
    if summary.episodes.is_empty() {
        return Err(Error::Dataset(format!("{} lists no episodes", dir.display())));
    }
    let mut episodes = Vec::with_capacity(summary.episodes.len());
    for name in &summary.episodes {
        let ep_dir = dir.join(name);
        let m: EpisodeManifest = read_json(&ep_dir.join("manifest.json"))?;
        if m.robot_dim != ROBOT_DIM || m.steps < 2 || m.base_forward.len() != m.steps {
            return Err(Error::Dataset(format!("{name}: inconsistent manifest")));
        }
        let frame: usize = m.image_shape.iter().product();
        let left = read_blob(&ep_dir.join("left.f32"), m.steps * frame)?;
        let right = read_blob(&ep_dir.join("right.f32"), m.steps * frame)?;
        let robot = robot_rows(&read_blob(&ep_dir.join("robot.f32"), m.steps * ROBOT_DIM)?);
        let actions = robot_rows(&read_blob(&ep_dir.join("actions.f32"), (m.steps - 1) * ROBOT_DIM)?);
        let observations = (0..m.steps)
            .map(|t| {
                let span = t * frame..(t + 1) * frame;
                Ok(StereoObservation {
                    left: Tensor::new(&m.image_shape, left[span.clone()].to_vec())?,
                    right: Tensor::new(&m.image_shape, right[span].to_vec())?,
                    robot: robot[t],
                    t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        episodes.push(Episode {
            observations,
            actions,
            base_forward: m.base_forward,
            success: m.success,
            seed: m.seed,
            variant: m.variant,
            distance: m.distance,
            condition: m.condition,
        });
    }
    Ok(Dataset { summary, episodes })
}
