//! Parameterized predator-prey pursuit environments.
//!
//! A predator moves inside the hypercube `[0, S]^D` and is rewarded for
//! closing to within the interception distance `I` of a prey that follows one
//! of six scripted motion policies. Observations carry an explicit
//! goal decomposition (`state`, `achieved_goal`, `desired_goal`) so episodes
//! can be relabeled after the fact.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::str::FromStr;

use crate::error::CoreError;

/// Scripted prey motion policy, ordered roughly from easiest to hardest to
/// intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreyPolicy {
    /// Moves towards the predator at an angle sampled from [6°, 90°].
    Attract,
    /// Moves in a fresh random direction at a random speed every step.
    Random,
    /// Moves in one random direction, fixed for the whole episode.
    RandomDirection,
    /// Moves away from the predator at an angle sampled from [-90°, 90°].
    Repel,
    /// Moves directly away from the predator.
    StraightAway,
    /// Does not move.
    Static,
}

impl PreyPolicy {
    pub const ALL: [PreyPolicy; 6] = [
        PreyPolicy::Attract,
        PreyPolicy::Random,
        PreyPolicy::RandomDirection,
        PreyPolicy::Repel,
        PreyPolicy::StraightAway,
        PreyPolicy::Static,
    ];
}

impl fmt::Display for PreyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PreyPolicy::Attract => "attract",
            PreyPolicy::Random => "random",
            PreyPolicy::RandomDirection => "random_direction",
            PreyPolicy::Repel => "repel",
            PreyPolicy::StraightAway => "straight_away",
            PreyPolicy::Static => "static",
        };
        f.write_str(name)
    }
}

impl FromStr for PreyPolicy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attract" => Ok(PreyPolicy::Attract),
            "random" => Ok(PreyPolicy::Random),
            "random_direction" => Ok(PreyPolicy::RandomDirection),
            "repel" => Ok(PreyPolicy::Repel),
            "straight_away" => Ok(PreyPolicy::StraightAway),
            "static" => Ok(PreyPolicy::Static),
            other => Err(CoreError::ConfigParse(format!(
                "unknown prey policy {other:?} (expected one of attract, random, \
                 random_direction, repel, straight_away, static)"
            ))),
        }
    }
}

/// Where the predator and prey start an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnPolicy {
    /// Both positions i.i.d. uniform over the arena.
    RandomSpawn,
    /// Predator at the origin, prey at `[0, …, 0, S/2]`.
    Apart,
}

impl fmt::Display for SpawnPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpawnPolicy::RandomSpawn => "random",
            SpawnPolicy::Apart => "apart",
        })
    }
}

impl FromStr for SpawnPolicy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" | "random_spawn" => Ok(SpawnPolicy::RandomSpawn),
            "apart" => Ok(SpawnPolicy::Apart),
            other => Err(CoreError::ConfigParse(format!(
                "unknown spawn policy {other:?} (expected random or apart)"
            ))),
        }
    }
}

/// Full parameterization of one environment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Number of spatial dimensions D.
    pub dims: usize,
    /// Arena side length S (arbitrary units).
    pub size: f64,
    /// Interception distance I.
    pub intercept_dist: f64,
    pub prey_policy: PreyPolicy,
    pub spawn_policy: SpawnPolicy,
    /// Episode horizon in steps.
    pub max_steps: usize,
    /// Seed for the environment's private random stream.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dims: 3,
            size: 10.0,
            intercept_dist: 1.0,
            prey_policy: PreyPolicy::Static,
            spawn_policy: SpawnPolicy::RandomSpawn,
            max_steps: 20,
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// Maximum per-step predator displacement, the 2-norm of a D-vector of 1s.
    pub fn pred_speed(&self) -> f64 {
        (self.dims as f64).sqrt()
    }

    /// Maximum prey speed (half the predator's).
    pub fn prey_speed(&self) -> f64 {
        self.pred_speed() / 2.0
    }

    /// Length of the flattened observation vector: 3D state + D achieved + D desired.
    pub fn obs_len(&self) -> usize {
        5 * self.dims
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.dims < 1 {
            return Err(CoreError::InvalidEnvConfig("dims must be >= 1".into()));
        }
        if !(self.size > 0.0) {
            return Err(CoreError::InvalidEnvConfig("size must be > 0".into()));
        }
        if !(self.intercept_dist > 0.0) {
            return Err(CoreError::InvalidEnvConfig(
                "intercept_dist must be > 0".into(),
            ));
        }
        if self.max_steps < 1 {
            return Err(CoreError::InvalidEnvConfig("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mutable state of one episode. Velocities are realized displacements per
/// step, i.e. what actually happened after wall clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pred_pos: Vec<f64>,
    pub pred_vel: Vec<f64>,
    pub prey_pos: Vec<f64>,
    pub prey_vel: Vec<f64>,
    pub step_count: usize,
    /// Unit direction held for the whole episode; only used by
    /// [`PreyPolicy::RandomDirection`].
    pub prey_fixed_dir: Option<Vec<f64>>,
}

/// Goal-decomposed observation: `achieved_goal` is the predator position
/// (duplicated from the head of `state`), `desired_goal` the prey position.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalObservation {
    /// Predator position ++ predator velocity ++ prey velocity (length 3D).
    pub state: Vec<f64>,
    /// Predator position (length D).
    pub achieved_goal: Vec<f64>,
    /// Prey position (length D).
    pub desired_goal: Vec<f64>,
}

impl GoalObservation {
    /// Flatten to the network input layout: state ++ achieved ++ desired (5D).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.state.len() + 2 * self.achieved_goal.len());
        out.extend_from_slice(&self.state);
        out.extend_from_slice(&self.achieved_goal);
        out.extend_from_slice(&self.desired_goal);
        out
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: GoalObservation,
    /// 1 on interception, -1 on horizon exhaustion, 0 otherwise.
    pub reward: f64,
    /// Goal reached.
    pub terminated: bool,
    /// Horizon exhausted without reaching the goal.
    pub truncated: bool,
}

/// Sparse goal-conditioned reward, shared by live stepping and hindsight
/// relabeling. Success means the Euclidean distance between achieved and
/// desired goal is at most `intercept_dist` (boundary inclusive).
pub fn compute_reward(
    achieved: &[f64],
    desired: &[f64],
    cfg: &EnvConfig,
    step_count: usize,
) -> (f64, bool, bool) {
    let dist = euclidean(achieved, desired);
    if dist <= cfg.intercept_dist {
        (1.0, true, false)
    } else if step_count >= cfg.max_steps {
        (-1.0, false, true)
    } else {
        (0.0, false, false)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform random unit vector in D dimensions (Gaussian normalize).
pub fn sample_unit_vector(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Rotate a unit vector by `theta` radians inside a uniformly random plane
/// containing it. The result `u` satisfies `|u| = 1` and
/// `dot(u, dir) = cos(theta)`.
///
/// For D = 1 there is no rotation plane; the result is `dir * sign(cos theta)`.
pub fn rotate_within_angle(
    dir: &[f64],
    theta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CoreError> {
    let n = norm(dir);
    if (n - 1.0).abs() > 1e-9 {
        return Err(CoreError::NonUnitDirection { norm: n });
    }
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(CoreError::BadRotationAngle { theta });
    }
    if dir.len() == 1 {
        return Ok(vec![dir[0] * theta.cos().signum()]);
    }
    // Orthonormal second axis, uniform over the complement of dir.
    let axis = loop {
        let g = sample_unit_vector(dir.len(), rng);
        let proj: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
        let perp: Vec<f64> = g.iter().zip(dir).map(|(a, b)| a - proj * b).collect();
        let pn = norm(&perp);
        if pn > 1e-12 {
            break perp.iter().map(|x| x / pn).collect::<Vec<f64>>();
        }
    };
    let (sin_t, cos_t) = theta.sin_cos();
    Ok(dir
        .iter()
        .zip(&axis)
        .map(|(d, w)| cos_t * d + sin_t * w)
        .collect())
}

const DEG: f64 = std::f64::consts::PI / 180.0;

/// Prey displacement for this step, before wall clamping.
///
/// Falls back to a uniform random direction when a direction-dependent policy
/// sees coincident predator and prey positions.
pub fn prey_velocity(
    policy: PreyPolicy,
    state: &EnvState,
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = cfg.dims;
    let speed = cfg.prey_speed();
    let separation: Vec<f64> = state
        .prey_pos
        .iter()
        .zip(&state.pred_pos)
        .map(|(a, b)| a - b)
        .collect();
    let sep_norm = norm(&separation);

    let direction_or_fallback = |reference: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        if sep_norm > 1e-12 {
            reference
        } else {
            log::debug!("coincident predator/prey positions; using random prey direction");
            sample_unit_vector(d, rng)
        }
    };

    match policy {
        PreyPolicy::Static => vec![0.0; d],
        PreyPolicy::StraightAway => {
            let away = direction_or_fallback(
                separation.iter().map(|x| x / sep_norm.max(1e-300)).collect(),
                rng,
            );
            away.iter().map(|x| speed * x).collect()
        }
        PreyPolicy::Repel => {
            let away = direction_or_fallback(
                separation.iter().map(|x| x / sep_norm.max(1e-300)).collect(),
                rng,
            );
            let theta: f64 = rng.random_range(-90.0 * DEG..=90.0 * DEG);
            let dir = rotate_within_angle(&away, theta.abs(), rng)
                .expect("away direction is unit length");
            dir.iter().map(|x| speed * x).collect()
        }
        PreyPolicy::Attract => {
            let toward = direction_or_fallback(
                separation.iter().map(|x| -x / sep_norm.max(1e-300)).collect(),
                rng,
            );
            let theta: f64 = rng.random_range(6.0 * DEG..=90.0 * DEG);
            let dir = rotate_within_angle(&toward, theta, rng)
                .expect("toward direction is unit length");
            dir.iter().map(|x| speed * x).collect()
        }
        PreyPolicy::Random => {
            let dir = sample_unit_vector(d, rng);
            let s: f64 = rng.random_range(0.0..=speed);
            dir.iter().map(|x| s * x).collect()
        }
        PreyPolicy::RandomDirection => {
            let dir = state
                .prey_fixed_dir
                .as_ref()
                .expect("RandomDirection requires prey_fixed_dir set at reset");
            dir.iter().map(|x| speed * x).collect()
        }
    }
}

/// One pursuit episode generator with a private seeded random stream.
#[derive(Debug, Clone)]
pub struct PredatorPreyEnv {
    cfg: EnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
    done: bool,
}

impl PredatorPreyEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let d = cfg.dims;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(PredatorPreyEnv {
            cfg,
            state: EnvState {
                pred_pos: vec![0.0; d],
                pred_vel: vec![0.0; d],
                prey_pos: vec![0.0; d],
                prey_vel: vec![0.0; d],
                step_count: 0,
                prey_fixed_dir: None,
            },
            rng,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Start a new episode and return the initial observation.
    pub fn reset(&mut self) -> GoalObservation {
        let d = self.cfg.dims;
        let s = self.cfg.size;
        match self.cfg.spawn_policy {
            SpawnPolicy::RandomSpawn => {
                // Predator coordinates are drawn before prey coordinates.
                self.state.pred_pos = (0..d).map(|_| self.rng.random_range(0.0..=s)).collect();
                self.state.prey_pos = (0..d).map(|_| self.rng.random_range(0.0..=s)).collect();
            }
            SpawnPolicy::Apart => {
                self.state.pred_pos = vec![0.0; d];
                let mut prey = vec![0.0; d];
                prey[d - 1] = s / 2.0;
                self.state.prey_pos = prey;
            }
        }
        self.state.pred_vel = vec![0.0; d];
        self.state.prey_vel = vec![0.0; d];
        self.state.step_count = 0;
        self.state.prey_fixed_dir = if self.cfg.prey_policy == PreyPolicy::RandomDirection {
            Some(sample_unit_vector(d, &mut self.rng))
        } else {
            None
        };
        self.done = false;
        self.observation()
    }

    /// Apply one predator action (each component clamped to [-1, 1]).
    ///
    /// The predator moves first, interception is tested, and only then does
    /// the prey move; this way the reward reflects the action that was just
    /// taken regardless of the prey policy.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, CoreError> {
        if self.done {
            return Err(CoreError::EpisodeFinished);
        }
        let d = self.cfg.dims;
        if action.len() != d {
            return Err(CoreError::ActionLength {
                got: action.len(),
                expected: d,
            });
        }
        let s = self.cfg.size;

        for i in 0..d {
            let a = action[i].clamp(-1.0, 1.0);
            let new_pos = (self.state.pred_pos[i] + a).clamp(0.0, s);
            self.state.pred_vel[i] = new_pos - self.state.pred_pos[i];
            self.state.pred_pos[i] = new_pos;
        }
        self.state.step_count += 1;

        let (reward, terminated, truncated) = compute_reward(
            &self.state.pred_pos,
            &self.state.prey_pos,
            &self.cfg,
            self.state.step_count,
        );

        if terminated {
            // Prey does not move on the interception step.
            self.state.prey_vel = vec![0.0; d];
        } else {
            let v = prey_velocity(self.cfg.prey_policy, &self.state, &self.cfg, &mut self.rng);
            for i in 0..d {
                let new_pos = (self.state.prey_pos[i] + v[i]).clamp(0.0, s);
                self.state.prey_vel[i] = new_pos - self.state.prey_pos[i];
                self.state.prey_pos[i] = new_pos;
            }
        }

        self.done = terminated || truncated;
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            terminated,
            truncated,
        })
    }

    pub fn observation(&self) -> GoalObservation {
        let mut state = Vec::with_capacity(3 * self.cfg.dims);
        state.extend_from_slice(&self.state.pred_pos);
        state.extend_from_slice(&self.state.pred_vel);
        state.extend_from_slice(&self.state.prey_vel);
        GoalObservation {
            state,
            achieved_goal: self.state.pred_pos.clone(),
            desired_goal: self.state.prey_pos.clone(),
        }
    }

    /// Episode over (terminated or truncated); stepping again is an error.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Test/demo hook: overwrite the positional state mid-episode.
    pub fn set_positions(&mut self, pred: &[f64], prey: &[f64]) {
        self.state.pred_pos = pred.to_vec();
        self.state.prey_pos = prey.to_vec();
    }
}
