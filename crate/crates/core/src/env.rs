//! "Paddle-bot": a cheap articulated locomotion task whose dynamics commute
//! with rotations about gravity.
//!
//! Joints are driven as damped double integrators. Motion about each limb's
//! y-axis paddles the body forward along its heading, sided motion about the
//! z-axis steers, and rolling about the x-axis lowers the body until it falls.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{joint_scalars, target_direction, yaw_matrix, GeometricState, LimbObservation, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::morphology::{LimbType, MorphGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RMode {
    /// Target 10 km away.
    Far,
    /// Target between 10 m and 20 m away.
    V2,
}

impl std::str::FromStr for RMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "far" => Ok(RMode::Far),
            "v2" => Ok(RMode::V2),
            _ => Err(Error::Contract(format!("unknown target mode `{s}` (far or v2)"))),
        }
    }
}

pub const FAR_RADIUS: f64 = 10_000.0;
pub const V2_RADIUS: (f64, f64) = (10.0, 20.0);

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub morphology: MorphGraph,
    pub dt: f64,
    pub r_mode: RMode,
    pub max_steps: usize,
    pub gravity: f64,
    /// Joint acceleration per unit action (rad/s²).
    pub torque_scale: f64,
    /// Joint velocity damping (1/s).
    pub damping: f64,
    /// Forward speed gained per rad/s of paddling.
    pub thrust_gain: f64,
    pub yaw_gain: f64,
    /// Planar velocity retained per step.
    pub velocity_decay: f64,
    pub base_height: f64,
    /// Falling below this fraction of the base height ends the episode.
    pub fall_fraction: f64,
    pub arrival_radius: f64,
    pub alive_bonus: f64,
    pub forward_reward: bool,
    pub seed: u64,
}

impl EnvConfig {
    /// Defaults for `morphology`. Cheetah-like bodies get no alive bonus and
    /// hopper-like bodies no forward reward.
    pub fn new(morphology: MorphGraph) -> Self {
        let name = morphology.name().to_ascii_lowercase();
        Self {
            alive_bonus: if name.contains("cheetah") { 0.0 } else { 1.0 },
            forward_reward: !name.contains("hopper"),
            morphology,
            dt: 0.05,
            r_mode: RMode::Far,
            max_steps: 1000,
            gravity: 9.81,
            torque_scale: 40.0,
            damping: 4.0,
            thrust_gain: 0.8,
            yaw_gain: 0.6,
            velocity_decay: 0.9,
            base_height: 1.0,
            fall_fraction: 0.5,
            arrival_radius: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("gravity", self.gravity),
            ("torque_scale", self.torque_scale),
            ("damping", self.damping),
            ("thrust_gain", self.thrust_gain),
            ("yaw_gain", self.yaw_gain),
            ("velocity_decay", self.velocity_decay),
            ("base_height", self.base_height),
            ("arrival_radius", self.arrival_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fall_fraction > 0.0 && self.fall_fraction < 1.0) {
            return Err(Error::Contract(format!("fall fraction {} outside (0, 1)", self.fall_fraction)));
        }
        if self.max_steps == 0 {
            return Err(Error::Contract("max_steps must be positive".into()));
        }
        Ok(())
    }

    fn roll_limit(&self) -> f64 {
        let limbs = &self.morphology.limbs()[1..];
        if limbs.is_empty() {
            return 1.0;
        }
        limbs.iter().map(|l| l.joint_ranges[0][0].abs().max(l.joint_ranges[0][1].abs())).sum::<f64>() / limbs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub torso_xy: [f64; 2],
    pub height: f64,
    pub yaw: f64,
    pub velocity: [f64; 2],
    /// Per limb, torso first (the torso's entries stay zero).
    pub angles: Vec<[f64; 3]>,
    pub rates: Vec<[f64; 3]>,
    /// Limb world positions at the previous observation.
    pub prev_positions: Vec<Vec3>,
    pub target: [f64; 2],
    pub steps: usize,
    /// Number of action entries clipped into [-1, 1].
    pub clipped: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBreakdown {
    pub alive: f64,
    pub locomotion: f64,
    /// Magnitude of the control penalty, subtracted from the total.
    pub control_cost: f64,
    pub forward: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.alive, self.locomotion, self.control_cost, self.forward, self.total]
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: GeometricState,
    pub reward: RewardBreakdown,
    /// Episode over (fall or step cap).
    pub done: bool,
    /// Ended by falling, as opposed to reaching the step cap.
    pub fell: bool,
}

fn rotate2(v: [f64; 2], delta: f64) -> [f64; 2] {
    let (s, c) = delta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn draw_radius(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> f64 {
    match cfg.r_mode {
        RMode::Far => FAR_RADIUS,
        RMode::V2 => rng.random_range(V2_RADIUS.0..=V2_RADIUS.1),
    }
}

pub fn reset(cfg: &EnvConfig) -> Result<(EnvState, GeometricState)> {
    reset_seeded(cfg, cfg.seed)
}

pub fn reset_seeded(cfg: &EnvConfig, seed: u64) -> Result<(EnvState, GeometricState)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng.random_range(0.0..TAU);
    let radius = draw_radius(cfg, &mut rng);
    let bearing: f64 = rng.random_range(0.0..TAU);
    let n = cfg.morphology.len();
    let angles = cfg
        .morphology
        .limbs()
        .iter()
        .map(|l| if l.limb_type == LimbType::Torso { [0.0; 3] } else { l.joint_ranges.map(|[lo, hi]| 0.5 * (lo + hi)) })
        .collect();
    let mut st = EnvState {
        torso_xy: [0.0, 0.0],
        height: cfg.base_height,
        yaw,
        velocity: [0.0, 0.0],
        angles,
        rates: vec![[0.0; 3]; n],
        prev_positions: Vec::new(),
        target: [radius * bearing.cos(), radius * bearing.sin()],
        steps: 0,
        clipped: 0,
        rng,
    };
    st.prev_positions = limb_positions(&st, cfg);
    let obs = observe(&st, cfg);
    Ok((st, obs))
}

fn limb_positions(st: &EnvState, cfg: &EnvConfig) -> Vec<Vec3> {
    let rw = yaw_matrix(st.yaw);
    let torso = Vec3::new(st.torso_xy[0], st.torso_xy[1], st.height);
    cfg.morphology.limbs().iter().map(|l| torso + rw * Vec3::from(l.nominal_offset)).collect()
}

fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

pub fn observe(st: &EnvState, cfg: &EnvConfig) -> GeometricState {
    let rw = yaw_matrix(st.yaw);
    let positions = limb_positions(st, cfg);
    let limbs = cfg
        .morphology
        .limbs()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let [ax, ay, az] = st.angles[i];
            let frame = rw * axis_rotation(2, az) * axis_rotation(1, ay) * axis_rotation(0, ax);
            let (angles, ranges, omega) = if l.limb_type == LimbType::Torso {
                ([0.0; 3], [[-PI, PI]; 3], Vec3::zeros())
            } else {
                (st.angles[i], l.joint_ranges, rw * Vec3::from(st.rates[i]))
            };
            LimbObservation {
                position: positions[i],
                velocity: (positions[i] - st.prev_positions[i]) / cfg.dt,
                angular_velocity: omega,
                axes: [frame.column(0).into(), frame.column(1).into(), frame.column(2).into()],
                scalars: joint_scalars(angles, ranges, l.limb_type),
            }
        })
        .collect();
    GeometricState {
        limbs,
        gravity: crate::encoding::gravity(),
        target_dir: target_direction(st.torso_xy, st.target),
    }
}

pub fn step(st: &EnvState, actions: &[[f64; 3]], cfg: &EnvConfig) -> Result<StepResult> {
    let n = cfg.morphology.len();
    if actions.len() != n {
        return Err(Error::Contract(format!("{} actions for {n} limbs", actions.len())));
    }
    if actions.iter().flatten().any(|a| a.is_nan()) {
        return Err(Error::Numeric("NaN action".into()));
    }
    let dt = cfg.dt;
    let mut next = st.clone();
    next.prev_positions = limb_positions(st, cfg);

    // Joint dynamics; the torso's action is ignored.
    let mut control = 0.0;
    for (i, limb) in cfg.morphology.limbs().iter().enumerate().skip(1) {
        for k in 0..3 {
            let raw = actions[i][k];
            let a = raw.clamp(-1.0, 1.0);
            if a != raw {
                next.clipped += 1;
            }
            control += a * a;
            let acc = cfg.torque_scale * a - cfg.damping * next.rates[i][k];
            next.rates[i][k] += acc * dt;
            next.angles[i][k] += next.rates[i][k] * dt;
            let [lo, hi] = limb.joint_ranges[k];
            if next.angles[i][k] < lo {
                next.angles[i][k] = lo;
                next.rates[i][k] = 0.0;
            } else if next.angles[i][k] > hi {
                next.angles[i][k] = hi;
                next.rates[i][k] = 0.0;
            }
        }
    }

    // Paddling and steering.
    let limbs = &cfg.morphology.limbs()[1..];
    let thrust: f64 = cfg.thrust_gain
        * limbs.iter().enumerate().map(|(j, _)| next.rates[j + 1][1] * next.angles[j + 1][1].cos()).sum::<f64>();
    let yaw_rate: f64 =
        cfg.yaw_gain * limbs.iter().enumerate().map(|(j, l)| f64::from(l.side) * next.rates[j + 1][2]).sum::<f64>();
    next.yaw = (next.yaw + yaw_rate * dt).rem_euclid(TAU);
    let (s, c) = next.yaw.sin_cos();
    next.velocity = [
        cfg.velocity_decay * next.velocity[0] + thrust * dt * c,
        cfg.velocity_decay * next.velocity[1] + thrust * dt * s,
    ];
    let before = planar_distance(st.torso_xy, st.target);
    next.torso_xy = [next.torso_xy[0] + next.velocity[0] * dt, next.torso_xy[1] + next.velocity[1] * dt];
    let after = planar_distance(next.torso_xy, next.target);

    // Roll lowers the body.
    let roll = if limbs.is_empty() {
        0.0
    } else {
        limbs.iter().enumerate().map(|(j, _)| next.angles[j + 1][0].abs()).sum::<f64>() / limbs.len() as f64
    };
    next.height = cfg.base_height * (1.0 - roll / cfg.roll_limit());
    next.steps += 1;
    let fell = next.height < cfg.fall_fraction * cfg.base_height;
    let done = fell || next.steps >= cfg.max_steps;

    let moved = [next.torso_xy[0] - st.torso_xy[0], next.torso_xy[1] - st.torso_xy[1]];
    let mut reward = RewardBreakdown {
        alive: if fell { 0.0 } else { cfg.alive_bonus },
        locomotion: (before - after) / dt,
        control_cost: 0.001 * control,
        forward: if cfg.forward_reward { (moved[0] * c + moved[1] * s) / dt } else { 0.0 },
        total: 0.0,
    };
    reward.total = reward.alive + reward.locomotion - reward.control_cost + reward.forward;

    if after < cfg.arrival_radius {
        let radius = draw_radius(cfg, &mut next.rng);
        let bearing = next.yaw + next.rng.random_range(0.0..TAU);
        next.target = [next.torso_xy[0] + radius * bearing.cos(), next.torso_xy[1] + radius * bearing.sin()];
    }

    let observation = observe(&next, cfg);
    Ok(StepResult { state: next, observation, reward, done, fell })
}

/// Rotates the whole world about the vertical axis through the origin.
pub fn rotate_env_state(st: &EnvState, delta: f64) -> EnvState {
    let mut out = st.clone();
    out.yaw = (st.yaw + delta).rem_euclid(TAU);
    out.torso_xy = rotate2(st.torso_xy, delta);
    out.velocity = rotate2(st.velocity, delta);
    out.target = rotate2(st.target, delta);
    let r = yaw_matrix(delta);
    out.prev_positions = st.prev_positions.iter().map(|p| r * p).collect();
    out
}

/// One row of a trajectory dump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub reward: RewardBreakdown,
}

pub const TRAJECTORY_HEADER: &str = "step,x,y,yaw,alive,locomotion,control_cost,forward,total";

pub fn write_trajectory_csv(mut w: impl Write, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let b = r.reward;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.x, r.y, r.yaw, b.alive, b.locomotion, b.control_cost, b.forward, b.total
        )?;
    }
    Ok(())
}
