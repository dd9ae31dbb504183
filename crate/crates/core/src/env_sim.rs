//! Kinematic arm-and-ball environments.
//!
//! Two variants share one planar chain model:
//!
//! * `ArmBall`: a 6-joint arm and a ball that can only move along a ring
//!   centred on the arm base. Once grasped, the ball is dragged along the
//!   ring by the angular position of the end effector.
//! * `Arm2Balls`: a 7-joint arm, a graspable ball that sticks to the end
//!   effector, and a distractor ball performing a random walk the arm cannot
//!   influence.
//!
//! Joints track their commanded targets instantly; there is no dynamics.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::renderer::{render, Image, RenderConfig};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVariant {
    ArmBall,
    #[serde(rename = "arm2_balls")]
    Arm2Balls,
}

impl EnvVariant {
    pub fn name(self) -> &'static str {
        match self {
            EnvVariant::ArmBall => "arm_ball",
            EnvVariant::Arm2Balls => "arm2_balls",
        }
    }

    /// Length of the engineered feature vector.
    pub fn feature_len(self) -> usize {
        match self {
            EnvVariant::ArmBall => 4,
            EnvVariant::Arm2Balls => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub variant: EnvVariant,
    pub n_joints: usize,
    /// Per-link lengths; they must sum to one so the reach is the unit disk.
    pub link_lengths: Vec<f64>,
    /// Symmetric per-joint limits in radians, relative to the parent link.
    pub joint_limits: Vec<f64>,
    pub grasp_radius: f64,
    /// Radius of the ball ring (`ArmBall` only).
    pub ring_radius: f64,
    /// Per-step standard deviation of the distractor walk (`Arm2Balls` only).
    pub distractor_step_sigma: f64,
    pub episode_steps: usize,
    /// Ball position at reset. For `ArmBall` it must lie on the ring.
    pub ball_init: Point,
    /// Distractor position at reset (`Arm2Balls` only).
    pub distractor_init: Point,
}

impl EnvConfig {
    pub fn arm_ball() -> Self {
        let n = 6;
        let ring_radius = 0.6;
        Self {
            variant: EnvVariant::ArmBall,
            n_joints: n,
            link_lengths: vec![1.0 / n as f64; n],
            joint_limits: vec![FRAC_PI_2; n],
            grasp_radius: 0.1,
            ring_radius,
            distractor_step_sigma: 0.0,
            episode_steps: 50,
            ball_init: [0.0, ring_radius],
            distractor_init: [0.0, 0.0],
        }
    }

    pub fn arm_two_balls() -> Self {
        let n = 7;
        Self {
            variant: EnvVariant::Arm2Balls,
            n_joints: n,
            link_lengths: vec![1.0 / n as f64; n],
            joint_limits: vec![FRAC_PI_2; n],
            grasp_radius: 0.1,
            ring_radius: 0.6,
            distractor_step_sigma: 0.02,
            episode_steps: 50,
            ball_init: [0.3, 0.5],
            distractor_init: [-0.5, -0.5],
        }
    }

    pub fn for_variant(variant: EnvVariant) -> Self {
        match variant {
            EnvVariant::ArmBall => Self::arm_ball(),
            EnvVariant::Arm2Balls => Self::arm_two_balls(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 {
            return Err(argument("n_joints must be at least 1"));
        }
        if self.link_lengths.len() != self.n_joints || self.joint_limits.len() != self.n_joints {
            return Err(argument(format!(
                "expected {} link lengths and joint limits, got {} and {}",
                self.n_joints,
                self.link_lengths.len(),
                self.joint_limits.len()
            )));
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(argument("link lengths must be positive"));
        }
        let reach: f64 = self.link_lengths.iter().sum();
        if (reach - 1.0).abs() > 1e-9 {
            return Err(argument(format!("link lengths sum to {reach}, expected 1")));
        }
        if self
            .joint_limits
            .iter()
            .any(|&l| !(l > 0.0) || !l.is_finite())
        {
            return Err(argument("joint limits must be positive and finite"));
        }
        if !(self.grasp_radius > 0.0) {
            return Err(argument("grasp_radius must be positive"));
        }
        if self.episode_steps == 0 {
            return Err(argument("episode_steps must be at least 1"));
        }
        match self.variant {
            EnvVariant::ArmBall => {
                if !(self.ring_radius > 0.0 && self.ring_radius < 1.0) {
                    return Err(argument("ring_radius must lie in (0, 1)"));
                }
                let r = self.ball_init[0].hypot(self.ball_init[1]);
                if (r - self.ring_radius).abs() > 1e-9 {
                    return Err(argument("ball_init must lie on the ring"));
                }
            }
            EnvVariant::Arm2Balls => {
                if !(self.distractor_step_sigma >= 0.0) {
                    return Err(argument("distractor_step_sigma must be non-negative"));
                }
                for p in [self.ball_init, self.distractor_init] {
                    if p.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                        return Err(argument("initial positions must lie in [-1, 1]^2"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Scene at the start of every episode.
    pub fn initial_state(&self) -> SceneState {
        SceneState {
            joint_angles: vec![0.0; self.n_joints],
            ball_pos: self.ball_init,
            grasped: false,
            distractor_pos: match self.variant {
                EnvVariant::ArmBall => None,
                EnvVariant::Arm2Balls => Some(self.distractor_init),
            },
        }
    }

    fn clip_joint(&self, joint: usize, angle: f64) -> f64 {
        let lim = self.joint_limits[joint];
        angle.clamp(-lim, lim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub joint_angles: Vec<f64>,
    pub ball_pos: Point,
    pub grasped: bool,
    pub distractor_pos: Option<Point>,
}

impl SceneState {
    pub fn end_effector(&self, link_lengths: &[f64]) -> Point {
        chain_positions(&self.joint_angles, link_lengths)
            .last()
            .copied()
            .unwrap_or([0.0, 0.0])
    }
}

/// Joint-angle trajectory, one row of `n_joints` angles per tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_joints: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_joints = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_joints) {
            return Err(argument("trajectory rows have unequal lengths"));
        }
        Ok(Self {
            n_joints,
            data: rows.concat(),
        })
    }

    pub(crate) fn from_flat(n_joints: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len() % n_joints.max(1), 0);
        Self { n_joints, data }
    }

    pub fn steps(&self) -> usize {
        self.data.len().checked_div(self.n_joints).unwrap_or(0)
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.n_joints..(step + 1) * self.n_joints]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_joints.max(1))
    }
}

/// Result of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub final_scene: SceneState,
    pub image: Image,
    pub engineered_features: Vec<f64>,
}

impl Outcome {
    pub fn end_effector(&self, link_lengths: &[f64]) -> Point {
        self.final_scene.end_effector(link_lengths)
    }
}

/// Positions of every link tip, base excluded, for cumulative-relative angles.
pub fn chain_positions(joint_angles: &[f64], link_lengths: &[f64]) -> Vec<Point> {
    let mut heading = 0.0;
    let mut p = [0.0, 0.0];
    joint_angles
        .iter()
        .zip(link_lengths)
        .map(|(&a, &l)| {
            heading += a;
            p = [p[0] + l * heading.cos(), p[1] + l * heading.sin()];
            p
        })
        .collect()
}

pub fn forward_kinematics(joint_angles: &[f64], link_lengths: &[f64]) -> Result<Point> {
    if joint_angles.len() != link_lengths.len() {
        return Err(argument(format!(
            "{} joint angles for {} links",
            joint_angles.len(),
            link_lengths.len()
        )));
    }
    Ok(chain_positions(joint_angles, link_lengths)
        .last()
        .copied()
        .unwrap_or([0.0, 0.0]))
}

/// One random-walk step of the distractor, clipped to the scene.
///
/// Always consumes exactly two normal draws so the stream position does not
/// depend on the input.
pub fn distractor_step<R: Rng + ?Sized>(pos: Point, sigma: f64, rng: &mut R) -> Point {
    let dx: f64 = StandardNormal.sample(rng);
    let dy: f64 = StandardNormal.sample(rng);
    [
        (pos[0] + sigma * dx).clamp(-1.0, 1.0),
        (pos[1] + sigma * dy).clamp(-1.0, 1.0),
    ]
}

/// Advances the scene by one tick.
pub fn step<R: Rng + ?Sized>(
    state: &SceneState,
    joint_targets: &[f64],
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<SceneState> {
    if joint_targets.len() != cfg.n_joints {
        return Err(argument(format!(
            "{} joint targets for {} joints",
            joint_targets.len(),
            cfg.n_joints
        )));
    }
    let joint_angles: Vec<f64> = joint_targets
        .iter()
        .enumerate()
        .map(|(j, &t)| cfg.clip_joint(j, t))
        .collect();
    let end = forward_kinematics(&joint_angles, &cfg.link_lengths)?;

    let mut grasped = state.grasped;
    if !grasped {
        let d = (end[0] - state.ball_pos[0]).hypot(end[1] - state.ball_pos[1]);
        grasped = d <= cfg.grasp_radius;
    }
    let ball_pos = if grasped {
        match cfg.variant {
            EnvVariant::ArmBall => {
                let phi = end[1].atan2(end[0]);
                [cfg.ring_radius * phi.cos(), cfg.ring_radius * phi.sin()]
            }
            EnvVariant::Arm2Balls => [end[0].clamp(-1.0, 1.0), end[1].clamp(-1.0, 1.0)],
        }
    } else {
        state.ball_pos
    };
    let distractor_pos = state
        .distractor_pos
        .map(|p| distractor_step(p, cfg.distractor_step_sigma, rng));

    Ok(SceneState {
        joint_angles,
        ball_pos,
        grasped,
        distractor_pos,
    })
}

/// Runs one episode and renders its final scene.
pub fn rollout<R: Rng + ?Sized>(
    cfg: &EnvConfig,
    render_cfg: &RenderConfig,
    trajectory: &Trajectory,
    initial: &SceneState,
    rng: &mut R,
) -> Result<Outcome> {
    if trajectory.steps() != cfg.episode_steps || trajectory.n_joints() != cfg.n_joints {
        return Err(argument(format!(
            "trajectory is {}x{}, expected {}x{}",
            trajectory.steps(),
            trajectory.n_joints(),
            cfg.episode_steps,
            cfg.n_joints
        )));
    }
    let mut scene = initial.clone();
    for targets in trajectory.rows() {
        scene = step(&scene, targets, cfg, rng)?;
    }
    let image = render(&scene, &cfg.link_lengths, render_cfg);
    let engineered_features = engineered_features(&scene, cfg);
    Ok(Outcome {
        final_scene: scene,
        image,
        engineered_features,
    })
}

/// Angle of a point in `[0, 2π)`, with no wrap-around metric.
pub fn polar_angle(p: Point) -> f64 {
    let mut phi = p[1].atan2(p[0]);
    if phi < 0.0 {
        phi += TAU;
    }
    if phi >= TAU {
        phi = 0.0;
    }
    phi
}

/// Hand-designed features of a scene.
///
/// `ArmBall`: `[end_x, end_y, ball_r, ball_phi]`.
/// `Arm2Balls`: `[end_x, end_y, ball_x, ball_y, distractor_x, distractor_y]`.
pub fn engineered_features(scene: &SceneState, cfg: &EnvConfig) -> Vec<f64> {
    let end = scene.end_effector(&cfg.link_lengths);
    let ball = scene.ball_pos;
    match cfg.variant {
        EnvVariant::ArmBall => vec![end[0], end[1], ball[0].hypot(ball[1]), polar_angle(ball)],
        EnvVariant::Arm2Balls => {
            let d = scene.distractor_pos.unwrap_or([0.0, 0.0]);
            vec![end[0], end[1], ball[0], ball[1], d[0], d[1]]
        }
    }
}
