//! Synthetic stereo approach-and-reach environment with a scripted expert.
//!
//! A mobile base drives a stereo camera toward a rectangular target, then an
//! arm moves to the target's grasp location and closes its gripper. Everything
//! is a pure function of `(seed, SimConfig)`, so episodes are bit-reproducible.
//!
//! Robot state vector layout (`ROBOT_DIM` = 4), all in raw units:
//! `[base velocity (m/tick), arm x, arm y, gripper]`. Arm coordinates and the
//! gripper already live in `[0, 1]`; the base velocity lives in
//! `[0, base_speed]`. Travelled distance is kept in [`SimState::base_forward`]
//! and is not part of the vector, so a policy stops the base by predicting a
//! zero velocity rather than an absolute position.

mod dataset;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

pub use dataset::{
    derive_seed, generate_dataset, read_dataset, write_dataset, Dataset, DatasetSummary, EpisodeManifest, JointStats,
};
pub use render::{project, render_stereo, Projection};

pub const ROBOT_DIM: usize = 4;
pub const BASE: usize = 0;
pub const ARM_X: usize = 1;
pub const ARM_Y: usize = 2;
pub const GRIPPER: usize = 3;

/// Gripper opening at or above which the gripper counts as engaged.
pub const GRIPPER_ENGAGED: f64 = 0.5;

const PHASE_TOL: f64 = 1e-9;

pub type RobotState = [f64; ROBOT_DIM];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Focal length in pixels as a multiple of the image width.
    pub focal_scale: f64,
    pub baseline: f64,
    /// Camera-to-target depth at which the base has finished its approach.
    pub standoff: f64,
    /// The base never brings the camera closer to the target than this.
    pub min_clearance: f64,
    pub episode_len: usize,
    /// Base velocity limit, also the expert's cruise speed (m/tick).
    pub base_speed: f64,
    /// Expert arm speed (Euclidean, normalized units per tick).
    pub arm_speed: f64,
    /// Per-axis arm velocity limit.
    pub arm_limit: f64,
    /// Gripper speed and limit (units per tick).
    pub gripper_speed: f64,
    /// Target half-size range (m).
    pub target_size: [f64; 2],
    /// Lateral offset magnitude for left/right variants (m).
    pub lateral_offset: f64,
    pub lateral_jitter: f64,
    /// Target height below the optical axis (m).
    pub target_height: f64,
    pub height_jitter: f64,
    /// Metres of lateral or vertical offset per unit of arm reach coordinate.
    pub reach_scale: f64,
    pub arm_home: [f64; 2],
    pub success_eps: f64,
    pub brightness_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_h: 20,
            image_w: 20,
            focal_scale: 0.6,
            baseline: 0.08,
            standoff: 0.3,
            min_clearance: 0.15,
            episode_len: 60,
            base_speed: 0.05,
            arm_speed: 0.04,
            arm_limit: 0.05,
            gripper_speed: 0.25,
            target_size: [0.045, 0.06],
            lateral_offset: 0.12,
            lateral_jitter: 0.015,
            target_height: 0.05,
            height_jitter: 0.01,
            reach_scale: 0.5,
            arm_home: [0.5, 0.3],
            success_eps: 0.05,
            brightness_jitter: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("sim config: {msg}")));
        if self.image_h < 2 || self.image_w < 2 {
            return bad("image sides must be at least 2");
        }
        if self.episode_len < 2 {
            return bad("episode_len must be at least 2");
        }
        if self.min_clearance <= self.baseline || self.standoff < self.min_clearance {
            return bad("need baseline < min_clearance <= standoff");
        }
        let positive = [
            self.focal_scale,
            self.base_speed,
            self.arm_speed,
            self.arm_limit,
            self.gripper_speed,
            self.reach_scale,
            self.success_eps,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("speeds, focal, reach scale and eps must be positive");
        }
        if self.arm_speed > self.arm_limit || self.target_size[0] <= 0.0 || self.target_size[0] > self.target_size[1] {
            return bad("arm speed above limit or bad target size range");
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return bad("brightness_jitter must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.focal_scale * self.image_w as f64
    }

    pub fn camera(&self) -> Camera {
        Camera {
            focal: self.focal(),
            baseline: self.baseline,
            image_h: self.image_h,
            image_w: self.image_w,
        }
    }
}

macro_rules! named_enum {
    ($name:ident, $what:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", $what, " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

named_enum!(Variant, "variant", {
    Left => "left",
    Center => "center",
    Right => "right",
});

named_enum!(Condition, "condition", {
    None => "none",
    Distractor => "distractor",
    LowLight => "low_light",
    UnseenBackground => "unseen_background",
});

impl Variant {
    /// Sign of the target's lateral offset; positive is to the camera's right.
    pub fn lateral_sign(self) -> f64 {
        match self {
            Variant::Left => -1.0,
            Variant::Center => 0.0,
            Variant::Right => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub baseline: f64,
    pub image_h: usize,
    pub image_w: usize,
}

/// Axis-aligned square facing the camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Horizontal offset from the optical axis (m), positive right.
    pub lateral_offset: f64,
    /// Vertical offset from the optical axis (m), positive down.
    pub height: f64,
    /// Depth from the camera at the start of the episode (m).
    pub depth: f64,
    /// Half the side length (m).
    pub size: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub variant: Variant,
    /// Base travel needed to reach the target (m).
    pub distance: f64,
    pub condition: Condition,
    pub target: SceneObject,
    pub distractors: Vec<SceneObject>,
    pub background: [f64; 3],
    pub brightness: f64,
    pub camera: Camera,
}

impl Scene {
    /// Arm reach coordinates at which the target is grasped.
    pub fn grasp_location(&self, cfg: &SimConfig) -> [f64; 2] {
        [
            0.5 + self.target.lateral_offset / cfg.reach_scale,
            0.5 + self.target.height / cfg.reach_scale,
        ]
    }

    pub fn depth_remaining(&self, state: &SimState) -> f64 {
        self.target.depth - state.base_forward
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub base_forward: f64,
    pub base_velocity: f64,
    pub arm: [f64; 2],
    pub gripper: f64,
    pub t: usize,
    /// Upper bound on `base_forward` that keeps the camera clear of the target.
    pub max_travel: f64,
}

impl SimState {
    pub fn initial(scene: &Scene, cfg: &SimConfig) -> Self {
        Self {
            base_forward: 0.0,
            base_velocity: 0.0,
            arm: cfg.arm_home,
            gripper: 0.0,
            t: 0,
            max_travel: scene.target.depth - cfg.min_clearance,
        }
    }

    pub fn robot(&self) -> RobotState {
        [self.base_velocity, self.arm[0], self.arm[1], self.gripper]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoObservation {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub robot: RobotState,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Vec<StereoObservation>,
    /// Expert next-state targets; one fewer than observations.
    pub actions: Vec<RobotState>,
    /// Base travel at each observation (m).
    pub base_forward: Vec<f64>,
    pub success: bool,
    pub seed: u64,
    pub variant: Variant,
    pub distance: f64,
    pub condition: Condition,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn make_scene(seed: u64, variant: Variant, distance: f64, cfg: &SimConfig) -> Result<Scene> {
    cfg.validate()?;
    if !(0.3..=2.0).contains(&distance) {
        return Err(Error::InvalidArgument(format!(
            "distance {distance} m outside [0.3, 2.0]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lateral =
        variant.lateral_sign() * cfg.lateral_offset + uniform(&mut rng, -cfg.lateral_jitter, cfg.lateral_jitter);
    let height = cfg.target_height + uniform(&mut rng, -cfg.height_jitter, cfg.height_jitter);
    let size = uniform(&mut rng, cfg.target_size[0], cfg.target_size[1]);
    let color = [
        uniform(&mut rng, 0.8, 0.95),
        uniform(&mut rng, 0.1, 0.2),
        uniform(&mut rng, 0.05, 0.15),
    ];
    let grey = uniform(&mut rng, 0.4, 0.5);
    let background = [
        grey + uniform(&mut rng, -0.03, 0.03),
        grey + uniform(&mut rng, -0.03, 0.03),
        grey + uniform(&mut rng, -0.03, 0.03),
    ];
    let brightness = uniform(&mut rng, 1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter);
    Ok(Scene {
        seed,
        variant,
        distance,
        condition: Condition::None,
        target: SceneObject {
            lateral_offset: lateral,
            height,
            depth: distance + cfg.standoff,
            size,
            color,
        },
        distractors: Vec::new(),
        background,
        brightness,
        camera: cfg.camera(),
    })
}

const DISTRACTOR_COLORS: [[f64; 3]; 2] = [[0.9, 0.85, 0.1], [0.85, 0.1, 0.85]];
const UNSEEN_BACKGROUND: [f64; 3] = [0.12, 0.22, 0.7];
const LOW_LIGHT: f64 = 0.5;

/// Returns a copy of `scene` with `condition` applied. Randomness comes from
/// the scene's own seed, so the result is reproducible.
pub fn apply_disturbance(scene: &Scene, condition: Condition) -> Scene {
    let mut out = scene.clone();
    out.condition = condition;
    match condition {
        Condition::None => {}
        Condition::LowLight => out.brightness = LOW_LIGHT,
        Condition::UnseenBackground => out.background = UNSEEN_BACKGROUND,
        Condition::Distractor => {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xd157_7ac7_0000_0001);
            let count = rng.gen_range(1..=2usize);
            let t = scene.target;
            // First distractor goes toward the image centre so it stays visible.
            let inward = if t.lateral_offset > 0.0 { -1.0 } else { 1.0 };
            for i in 0..count {
                let side = if i == 0 { inward } else { -inward };
                let size = t.size * uniform(&mut rng, 0.7, 1.0);
                let gap = uniform(&mut rng, 1.5, 2.5) * t.size;
                out.distractors.push(SceneObject {
                    lateral_offset: t.lateral_offset + side * (t.size + size + gap),
                    height: t.height + uniform(&mut rng, -0.5, 0.5) * t.size,
                    depth: t.depth,
                    size,
                    color: DISTRACTOR_COLORS[rng.gen_range(0..DISTRACTOR_COLORS.len())],
                });
            }
        }
    }
    out
}

/// Scripted next-state target for the current state.
pub fn expert_action(scene: &Scene, state: &SimState, cfg: &SimConfig) -> RobotState {
    let mut next = state.robot();
    let travel_left = scene.depth_remaining(state) - cfg.standoff;
    if travel_left > PHASE_TOL {
        next[BASE] = cfg.base_speed.min(travel_left);
        return next;
    }
    next[BASE] = 0.0;
    let goal = scene.grasp_location(cfg);
    let dx = goal[0] - state.arm[0];
    let dy = goal[1] - state.arm[1];
    let dist = dx.hypot(dy);
    if dist > PHASE_TOL {
        if dist <= cfg.arm_speed {
            next[ARM_X] = goal[0];
            next[ARM_Y] = goal[1];
        } else {
            let s = cfg.arm_speed / dist;
            next[ARM_X] = state.arm[0] + dx * s;
            next[ARM_Y] = state.arm[1] + dy * s;
        }
        return next;
    }
    next[GRIPPER] = (state.gripper + cfg.gripper_speed).min(1.0);
    next
}

fn step_toward(current: f64, target: f64, limit: f64) -> f64 {
    let delta = target - current;
    if delta.abs() <= limit {
        target
    } else {
        current + limit.copysign(delta)
    }
}

/// Advances one control tick toward `action`, a raw robot-state target.
pub fn step_dynamics(state: &SimState, action: &RobotState, cfg: &SimConfig) -> SimState {
    let finite = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
    let velocity = finite(action[BASE], 0.0).clamp(0.0, cfg.base_speed);
    let base_forward = (state.base_forward + velocity).min(state.max_travel.max(state.base_forward));
    let arm_x = step_toward(
        state.arm[0],
        finite(action[ARM_X], state.arm[0]).clamp(0.0, 1.0),
        cfg.arm_limit,
    );
    let arm_y = step_toward(
        state.arm[1],
        finite(action[ARM_Y], state.arm[1]).clamp(0.0, 1.0),
        cfg.arm_limit,
    );
    let gripper = step_toward(
        state.gripper,
        finite(action[GRIPPER], state.gripper).clamp(0.0, 1.0),
        cfg.gripper_speed,
    );
    SimState {
        base_forward,
        base_velocity: velocity,
        arm: [arm_x, arm_y],
        gripper,
        t: state.t + 1,
        max_travel: state.max_travel,
    }
}

/// Distance of the end effector from the grasp location in reach units. The
/// depth axis measures how far the camera stopped from the standoff depth.
pub fn grasp_error(scene: &Scene, state: &SimState, cfg: &SimConfig) -> f64 {
    let goal = scene.grasp_location(cfg);
    let dz = (scene.depth_remaining(state) - cfg.standoff) / cfg.reach_scale;
    let dx = state.arm[0] - goal[0];
    let dy = state.arm[1] - goal[1];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn success_check(scene: &Scene, state: &SimState, cfg: &SimConfig) -> bool {
    grasp_error(scene, state, cfg) <= cfg.success_eps && state.gripper >= GRIPPER_ENGAGED
}

/// Rolls the scripted expert in a freshly generated scene.
pub fn generate_episode(
    seed: u64,
    variant: Variant,
    distance: f64,
    condition: Condition,
    cfg: &SimConfig,
) -> Result<Episode> {
    let scene = apply_disturbance(&make_scene(seed, variant, distance, cfg)?, condition);
    let mut state = SimState::initial(&scene, cfg);
    let mut observations = Vec::with_capacity(cfg.episode_len);
    let mut actions = Vec::with_capacity(cfg.episode_len - 1);
    let mut base_forward = Vec::with_capacity(cfg.episode_len);
    for t in 0..cfg.episode_len {
        let (left, right) = render_stereo(&scene, &state)?;
        observations.push(StereoObservation {
            left,
            right,
            robot: state.robot(),
            t,
        });
        base_forward.push(state.base_forward);
        if t + 1 < cfg.episode_len {
            let action = expert_action(&scene, &state, cfg);
            state = step_dynamics(&state, &action, cfg);
            actions.push(action);
        }
    }
    Ok(Episode {
        observations,
        actions,
        base_forward,
        success: success_check(&scene, &state, cfg),
        seed,
        variant,
        distance,
        condition,
    })
}
