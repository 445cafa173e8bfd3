//! Scripted demonstrators.
//!
//! The expert is a proportional controller toward the current sub-goal.
//! A non-expert is the same controller with each action replaced, with
//! probability `p`, by a uniform random action; `p` is found by bisection to
//! hit a target success rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::Policy;
use crate::envs::{EnvError, GoalEnv, GoalTaskState, Geometry, Observation, Point, TaskKind};
use crate::replay::{DemoDataset, DemoMetadata, Transition, DEMO_FORMAT_VERSION};

/// Minimum rollouts per candidate during calibration.
pub const CALIBRATION_ROLLOUTS: usize = 500;
/// Episodes attempted per requested episode before giving up.
pub const ATTEMPTS_PER_EPISODE: usize = 100;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("n_episodes must be positive")]
    NoEpisodes,
    #[error("collected {collected} of {requested} successful episodes in {attempts} attempts (measured success rate {rate:.3})")]
    Unreachable {
        requested: usize,
        collected: usize,
        attempts: usize,
        rate: f64,
    },
    #[error("target rate {0} must lie in (0, 1]")]
    TargetRate(f64),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("bisection does not bracket {target}: rate {rate_at_zero:.3} at p=0, {rate_at_one:.3} at p=1")]
    NotBracketed {
        target: f64,
        rate_at_zero: f64,
        rate_at_one: f64,
    },
    #[error("no corruption level within tolerance after {iterations} bisection steps (last p={p:.4}, rate {rate:.3})")]
    NoConvergence { iterations: usize, p: f64, rate: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T, E = DemoError> = std::result::Result<T, E>;

/// Scripted controller for one task, optionally corrupted.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub task: TaskKind,
    pub corruption: f64,
    pub geometry: Geometry,
    rng: ChaCha8Rng,
}

impl ScriptedPolicy {
    pub fn expert(task: TaskKind, geometry: Geometry) -> Self {
        Self::corrupted(task, 0.0, geometry, 0)
    }

    pub fn corrupted(task: TaskKind, p: f64, geometry: Geometry, seed: u64) -> Self {
        ScriptedPolicy {
            task,
            corruption: p.clamp(0.0, 1.0),
            geometry,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn policy_id(&self) -> String {
        if self.corruption == 0.0 {
            "expert".to_string()
        } else {
            format!("corrupted-p{:.4}", self.corruption)
        }
    }

    pub fn action(&mut self, state: &GoalTaskState) -> Vec<f64> {
        if self.corruption > 0.0 && self.rng.random::<f64>() < self.corruption {
            return (0..self.task.action_dim())
                .map(|_| self.rng.random_range(-1.0..=1.0))
                .collect();
        }
        expert_action(state, &self.geometry)
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _obs: &Observation, state: &GoalTaskState) -> Vec<f64> {
        self.action(state)
    }
}

/// Gain in action units per unit of displacement. With a step scale of 0.05
/// this closes about 20% of the remaining gap per step, so demonstrations
/// are long enough to cover the approach to the goal.
pub const EXPERT_GAIN: f64 = 4.0;

/// Distance from the object, in grip radii, inside which the pickplace
/// expert commands the grip closed.
pub const PREGRASP_RADII: f64 = 3.0;

/// Proportional step, clipped per component.
fn proportional(delta: Point) -> [f64; 2] {
    let k = EXPERT_GAIN;
    [(k * delta[0]).clamp(-1.0, 1.0), (k * delta[1]).clamp(-1.0, 1.0)]
}

/// Action that moves the agent by `delta` if reachable in one step,
/// otherwise a full-speed step along the same direction.
fn toward(delta: Point, geom: &Geometry) -> [f64; 2] {
    let a = [delta[0] / geom.step_scale, delta[1] / geom.step_scale];
    let m = a[0].abs().max(a[1].abs());
    if m > 1.0 {
        [a[0] / m, a[1] / m]
    } else {
        a
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

/// Noise-free controller action for `state`.
pub fn expert_action(state: &GoalTaskState, geom: &Geometry) -> Vec<f64> {
    match state.task {
        TaskKind::Reach => proportional(sub(state.goal_pos, state.agent_pos)).to_vec(),
        TaskKind::PickPlace => pickplace_action(state, geom),
        TaskKind::Push => push_action(state, geom).to_vec(),
    }
}

fn pickplace_action(state: &GoalTaskState, geom: &Geometry) -> Vec<f64> {
    let obj = state.object();
    if state.grip_closed {
        // carry: put the object on the goal, keeping the grip offset
        let d = proportional(sub(state.goal_pos, obj));
        vec![d[0], d[1], 1.0]
    } else {
        // close the hand on the final approach; the grip only takes once
        // the agent is within grip_radius, so closing early is harmless
        let d = proportional(sub(obj, state.agent_pos));
        let grip = if norm(sub(obj, state.agent_pos)) <= geom.grip_radius * PREGRASP_RADII {
            1.0
        } else {
            -1.0
        };
        vec![d[0], d[1], grip]
    }
}

fn push_action(state: &GoalTaskState, geom: &Geometry) -> [f64; 2] {
    let obj = state.object();
    let to_goal = sub(state.goal_pos, obj);
    let dist_goal = norm(to_goal);
    if dist_goal < 1e-9 {
        return [0.0, 0.0];
    }
    let u = [to_goal[0] / dist_goal, to_goal[1] / dist_goal];
    let n = [-u[1], u[0]];
    let rel = sub(state.agent_pos, obj);
    let along = rel[0] * u[0] + rel[1] * u[1];
    let perp = rel[0] * n[0] + rel[1] * n[1];
    let contact = geom.grip_radius;
    let standoff = contact + 0.03;
    let clearance = 2.0 * contact;

    let target = if along <= -contact * 0.5 && perp.abs() <= 0.01 {
        // behind and aligned: drive the object down the line, perp corrected
        let advance = dist_goal.min(geom.step_scale);
        [
            state.agent_pos[0] + u[0] * advance - n[0] * perp,
            state.agent_pos[1] + u[1] * advance - n[1] * perp,
        ]
    } else if along <= -(contact + 0.01) {
        // behind: slide sideways onto the push line at the standoff distance
        [obj[0] - u[0] * standoff, obj[1] - u[1] * standoff]
    } else if perp.abs() < clearance - 1e-9 {
        // beside or ahead, too close to the line: step away from it
        let side = if perp >= 0.0 { 1.0 } else { -1.0 };
        let out = clearance - perp.abs();
        [
            state.agent_pos[0] + n[0] * side * out,
            state.agent_pos[1] + n[1] * side * out,
        ]
    } else {
        // clear of the object: go back past it, keeping the lateral offset
        [
            obj[0] + n[0] * perp - u[0] * standoff,
            obj[1] + n[1] * perp - u[1] * standoff,
        ]
    };
    toward(sub(target, state.agent_pos), geom)
}

/// Runs one episode of `policy` from `seed`; returns its transitions and success.
pub fn rollout<P: Policy + ?Sized>(policy: &mut P, env: &mut GoalEnv, seed: u64) -> Result<(Vec<Transition>, bool)> {
    let mut obs = env.reset(seed);
    let mut out = Vec::new();
    loop {
        let a: Vec<f64> = policy
            .act(&obs, env.state())
            .into_iter()
            .map(|x| x.clamp(-1.0, 1.0))
            .collect();
        let r = env.step(&a)?;
        out.push(Transition {
            s: obs.features,
            a,
            r: r.reward,
            s_next: r.observation.features.clone(),
            done: r.done,
        });
        if r.done {
            return Ok((out, r.success));
        }
        obs = r.observation;
    }
}

/// Rolls out `policy` for `n_episodes`.
///
/// With `require_success`, failed episodes are discarded until `n_episodes`
/// successes are collected. The metadata success rate is that of the raw
/// policy over every attempted episode.
pub fn generate_demos(
    policy: &mut ScriptedPolicy,
    env: &mut GoalEnv,
    n_episodes: usize,
    require_success: bool,
    seed: u64,
) -> Result<DemoDataset> {
    if n_episodes == 0 {
        return Err(DemoError::NoEpisodes);
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    policy.reseed(seeds.random());
    let budget = n_episodes * ATTEMPTS_PER_EPISODE;
    let mut episodes = Vec::with_capacity(n_episodes);
    let (mut attempts, mut successes) = (0, 0);
    while episodes.len() < n_episodes {
        if attempts == budget {
            return Err(DemoError::Unreachable {
                requested: n_episodes,
                collected: episodes.len(),
                attempts,
                rate: successes as f64 / attempts as f64,
            });
        }
        let (ep, ok) = rollout(policy, env, seeds.random())?;
        attempts += 1;
        if ok {
            successes += 1;
        }
        if ok || !require_success {
            episodes.push(ep);
        }
    }
    Ok(DemoDataset {
        metadata: DemoMetadata {
            task: env.task.name().to_string(),
            gsi: env.gsi,
            policy_id: policy.policy_id(),
            success_rate: successes as f64 / attempts as f64,
            obs_dim: env.obs_dim(),
            act_dim: env.action_dim(),
            format_version: DEMO_FORMAT_VERSION,
        },
        episodes,
    })
}

/// Success rate of the corrupted controller over `episodes` seeded rollouts.
///
/// The same seed gives the same episode starts and corruption draws for
/// every `p` (common random numbers).
pub fn measure_success(task: TaskKind, p: f64, geometry: Geometry, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = GoalEnv::new(task, false, geometry);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    for _ in 0..episodes {
        let mut pol = ScriptedPolicy::corrupted(task, p, geometry, seeds.random());
        if rollout(&mut pol, &mut env, seeds.random())?.1 {
            ok += 1;
        }
    }
    Ok(ok as f64 / episodes as f64)
}

pub const MAX_BISECTION_STEPS: usize = 40;

/// Corruption probability whose measured success lies within `tolerance` of `target_rate`.
pub fn calibrate_corruption(task: TaskKind, target_rate: f64, tolerance: f64, seed: u64) -> Result<f64> {
    calibrate_corruption_with(task, target_rate, tolerance, Geometry::default(), CALIBRATION_ROLLOUTS, seed)
}

pub fn calibrate_corruption_with(
    task: TaskKind,
    target_rate: f64,
    tolerance: f64,
    geometry: Geometry,
    rollouts: usize,
    seed: u64,
) -> Result<f64> {
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(DemoError::TargetRate(target_rate));
    }
    if !(tolerance > 0.0) {
        return Err(DemoError::Tolerance(tolerance));
    }
    let rollouts = rollouts.max(CALIBRATION_ROLLOUTS);
    let rate = |p: f64| measure_success(task, p, geometry, rollouts, seed);
    let within = |r: f64| (r - target_rate).abs() <= tolerance;

    let rate_at_zero = rate(0.0)?;
    if within(rate_at_zero) {
        return Ok(0.0);
    }
    let rate_at_one = rate(1.0)?;
    if within(rate_at_one) {
        return Ok(1.0);
    }
    if !(rate_at_zero > target_rate && rate_at_one < target_rate) {
        return Err(DemoError::NotBracketed {
            target: target_rate,
            rate_at_zero,
            rate_at_one,
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut p, mut r) = (0.5, f64::NAN);
    for _ in 0..MAX_BISECTION_STEPS {
        p = 0.5 * (lo + hi);
        r = rate(p)?;
        if within(r) {
            return Ok(p);
        }
        if r > target_rate {
            lo = p;
        } else {
            hi = p;
        }
    }
    Err(DemoError::NoConvergence {
        iterations: MAX_BISECTION_STEPS,
        p,
        rate: r,
    })
}
