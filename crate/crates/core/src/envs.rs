//! Deterministic 2-D kinematic goal tasks with sparse ±1 reward.
//!
//! Three tasks share one workspace `[0, 1]²` and one [`Geometry`]:
//!
//! - `reach`: move the agent point onto the goal.
//! - `pickplace`: reach the object, close the gripper on it, carry it to the
//!   goal and hold it there (stage S2).
//! - `push`: shove the object into the goal; the agent has no gripper and
//!   displaces the object along the contact normal.
//!
//! Observation layout (all reals, grip flag as 0/1):
//!
//! | task      | base features                              | len |
//! |-----------|--------------------------------------------|-----|
//! | reach     | agent.xy, goal.xy                          | 4   |
//! | pickplace | agent.xy, object.xy, goal.xy, grip         | 7   |
//! | push      | agent.xy, object.xy, goal.xy               | 6   |
//!
//! With goal-aware state information enabled, five features follow: the
//! displacement `goal - object` (for `reach`, `goal - agent`) and a one-hot
//! stage indicator over S0/S1/S2. For `pickplace` the stage is [`stage_of`];
//! `reach` uses S0 until the agent is at the goal (S2); `push` uses S1 while
//! the agent is in contact with the object.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GSI_FEATURES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown task `{0}` (expected reach, pickplace or push)")]
    UnknownTask(String),
    #[error("action has {actual} components, task expects {expected}")]
    ActionDim { expected: usize, actual: usize },
    #[error("non-finite action component {index}")]
    NonFiniteAction { index: usize },
    #[error("episode already finished")]
    EpisodeOver,
    #[error("stage labels are only defined for pickplace, not {0}")]
    NoStages(TaskKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reach,
    PickPlace,
    Push,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Reach, TaskKind::PickPlace, TaskKind::Push];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::PickPlace => "pickplace",
            TaskKind::Push => "push",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            TaskKind::PickPlace => 3,
            TaskKind::Reach | TaskKind::Push => 2,
        }
    }

    pub fn obs_dim(self, gsi: bool) -> usize {
        let base = match self {
            TaskKind::Reach => 4,
            TaskKind::PickPlace => 7,
            TaskKind::Push => 6,
        };
        if gsi {
            base + GSI_FEATURES
        } else {
            base
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "pickplace" => Ok(TaskKind::PickPlace),
            "push" => Ok(TaskKind::Push),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

/// Shared geometry constants, in workspace units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub step_scale: f64,
    pub success_radius: f64,
    pub grip_radius: f64,
    pub horizon: usize,
    /// Minimum initial distance between the goal and whatever must reach it.
    pub min_separation: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            step_scale: 0.05,
            success_radius: 0.05,
            grip_radius: 0.05,
            horizon: 100,
            min_separation: 0.15,
        }
    }
}

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_box(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    S0,
    S1,
    S2,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::S0 => 0,
            Stage::S1 => 1,
            Stage::S2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTaskState {
    pub task: TaskKind,
    pub agent_pos: Point,
    /// `None` for reach.
    pub object_pos: Option<Point>,
    pub goal_pos: Point,
    pub grip_closed: bool,
    pub step_count: usize,
    pub done: bool,
}

impl GoalTaskState {
    pub fn object(&self) -> Point {
        self.object_pos.unwrap_or(self.agent_pos)
    }

    /// Task-specific goal predicate.
    pub fn is_success(&self, geom: &Geometry) -> bool {
        match self.task {
            TaskKind::Reach => dist(self.agent_pos, self.goal_pos) <= geom.success_radius,
            TaskKind::PickPlace => {
                self.grip_closed && dist(self.object(), self.goal_pos) <= geom.success_radius
            }
            TaskKind::Push => dist(self.object(), self.goal_pos) <= geom.success_radius,
        }
    }

    fn in_contact(&self, geom: &Geometry) -> bool {
        dist(self.agent_pos, self.object()) <= geom.grip_radius + 1e-9
    }
}

/// Stage label of a pickplace state: S0 open, S1 holding away from goal,
/// S2 holding at the goal.
pub fn stage_of(state: &GoalTaskState, geom: &Geometry) -> Result<Stage, EnvError> {
    if state.task != TaskKind::PickPlace {
        return Err(EnvError::NoStages(state.task));
    }
    Ok(pickplace_stage(state, geom))
}

fn pickplace_stage(state: &GoalTaskState, geom: &Geometry) -> Stage {
    if !state.grip_closed {
        Stage::S0
    } else if dist(state.object(), state.goal_pos) <= geom.success_radius {
        Stage::S2
    } else {
        Stage::S1
    }
}

fn observation_stage(state: &GoalTaskState, geom: &Geometry) -> Stage {
    match state.task {
        TaskKind::PickPlace => pickplace_stage(state, geom),
        TaskKind::Reach => {
            if state.is_success(geom) {
                Stage::S2
            } else {
                Stage::S0
            }
        }
        TaskKind::Push => {
            if state.is_success(geom) {
                Stage::S2
            } else if state.in_contact(geom) {
                Stage::S1
            } else {
                Stage::S0
            }
        }
    }
}

/// Agent-visible feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub gsi: bool,
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// The goal-aware block, when present.
    pub fn gsi_block(&self) -> Option<&[f64]> {
        self.gsi.then(|| &self.features[self.features.len() - GSI_FEATURES..])
    }
}

pub fn observe(state: &GoalTaskState, gsi: bool, geom: &Geometry) -> Observation {
    let mut f = Vec::with_capacity(state.task.obs_dim(gsi));
    f.extend(state.agent_pos);
    if let Some(obj) = state.object_pos {
        f.extend(obj);
    }
    f.extend(state.goal_pos);
    if state.task == TaskKind::PickPlace {
        f.push(if state.grip_closed { 1.0 } else { 0.0 });
    }
    if gsi {
        let obj = state.object();
        f.push(state.goal_pos[0] - obj[0]);
        f.push(state.goal_pos[1] - obj[1]);
        let mut one_hot = [0.0; 3];
        one_hot[observation_stage(state, geom).index()] = 1.0;
        f.extend(one_hot);
    }
    Observation { features: f, gsi }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

fn sample_point<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Point {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Initial state for `task` from `seed`.
///
/// Positions are uniform with rejection sampling so that the goal starts at
/// least `min_separation` from the agent (reach) or object (pickplace, push).
/// Push samples object and goal in `[0.2, 0.8]²` so the object can always be
/// approached from behind, and keeps the agent out of contact.
pub fn initial_state(task: TaskKind, seed: u64, geom: &Geometry) -> GoalTaskState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (agent_pos, object_pos, goal_pos) = match task {
        TaskKind::Reach => loop {
            let a = sample_point(&mut rng, 0.05, 0.95);
            let g = sample_point(&mut rng, 0.1, 0.9);
            if dist(a, g) >= geom.min_separation {
                break (a, None, g);
            }
        },
        TaskKind::PickPlace => loop {
            let a = sample_point(&mut rng, 0.05, 0.95);
            let o = sample_point(&mut rng, 0.1, 0.9);
            let g = sample_point(&mut rng, 0.1, 0.9);
            if dist(o, g) >= geom.min_separation {
                break (a, Some(o), g);
            }
        },
        TaskKind::Push => loop {
            let a = sample_point(&mut rng, 0.05, 0.95);
            let o = sample_point(&mut rng, 0.2, 0.8);
            let g = sample_point(&mut rng, 0.2, 0.8);
            if dist(o, g) >= geom.min_separation && dist(a, o) >= 2.0 * geom.grip_radius {
                break (a, Some(o), g);
            }
        },
    };
    GoalTaskState {
        task,
        agent_pos,
        object_pos,
        goal_pos,
        grip_closed: false,
        step_count: 0,
        done: false,
    }
}

/// Advances `state` by one clipped action.
pub fn step(state: &mut GoalTaskState, action: &[f64], gsi: bool, geom: &Geometry) -> Result<StepResult, EnvError> {
    let expected = state.task.action_dim();
    if action.len() != expected {
        return Err(EnvError::ActionDim {
            expected,
            actual: action.len(),
        });
    }
    if let Some(index) = action.iter().position(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction { index });
    }
    if state.done {
        return Err(EnvError::EpisodeOver);
    }
    let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();

    let old_agent = state.agent_pos;
    let new_agent = clamp_box([
        old_agent[0] + geom.step_scale * a[0],
        old_agent[1] + geom.step_scale * a[1],
    ]);
    state.agent_pos = new_agent;

    match state.task {
        TaskKind::Reach => {}
        TaskKind::PickPlace => {
            let grip_cmd = a[2] > 0.0;
            let obj = state.object();
            if state.grip_closed && grip_cmd {
                let moved = [
                    obj[0] + new_agent[0] - old_agent[0],
                    obj[1] + new_agent[1] - old_agent[1],
                ];
                state.object_pos = Some(clamp_box(moved));
            } else if grip_cmd {
                state.grip_closed = dist(new_agent, obj) <= geom.grip_radius;
            } else {
                state.grip_closed = false;
            }
        }
        TaskKind::Push => {
            let obj = state.object();
            let d = dist(new_agent, obj);
            if d < geom.grip_radius {
                let normal = if d > 1e-12 {
                    [(obj[0] - new_agent[0]) / d, (obj[1] - new_agent[1]) / d]
                } else {
                    let m = dist(new_agent, old_agent).max(1e-12);
                    [(new_agent[0] - old_agent[0]) / m, (new_agent[1] - old_agent[1]) / m]
                };
                state.object_pos = Some(clamp_box([
                    new_agent[0] + normal[0] * geom.grip_radius,
                    new_agent[1] + normal[1] * geom.grip_radius,
                ]));
            }
        }
    }

    state.step_count += 1;
    let success = state.is_success(geom);
    state.done = success || state.step_count >= geom.horizon;
    Ok(StepResult {
        observation: observe(state, gsi, geom),
        reward: if success { 1.0 } else { -1.0 },
        done: state.done,
        success,
    })
}

/// One task instance: task kind, observation mode, geometry and live state.
#[derive(Debug, Clone)]
pub struct GoalEnv {
    pub task: TaskKind,
    pub gsi: bool,
    pub geometry: Geometry,
    state: GoalTaskState,
}

impl GoalEnv {
    pub fn new(task: TaskKind, gsi: bool, geometry: Geometry) -> Self {
        let state = initial_state(task, 0, &geometry);
        GoalEnv {
            task,
            gsi,
            geometry,
            state,
        }
    }

    pub fn from_name(name: &str, gsi: bool, geometry: Geometry) -> Result<Self, EnvError> {
        Ok(Self::new(name.parse()?, gsi, geometry))
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.state = initial_state(self.task, seed, &self.geometry);
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        step(&mut self.state, action, self.gsi, &self.geometry)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, self.gsi, &self.geometry)
    }

    pub fn state(&self) -> &GoalTaskState {
        &self.state
    }

    pub fn set_state(&mut self, state: GoalTaskState) {
        self.state = state;
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim(self.gsi)
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }
}

/// `reset` as a free function: fresh state and its observation.
pub fn reset(task: TaskKind, gsi: bool, seed: u64, geom: &Geometry) -> (GoalTaskState, Observation) {
    let s = initial_state(task, seed, geom);
    let o = observe(&s, gsi, geom);
    (s, o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::default()
    }

    fn pickplace(agent: Point, object: Point, goal: Point, grip: bool) -> GoalTaskState {
        GoalTaskState {
            task: TaskKind::PickPlace,
            agent_pos: agent,
            object_pos: Some(object),
            goal_pos: goal,
            grip_closed: grip,
            step_count: 0,
            done: false,
        }
    }

    #[test]
    fn registry_names() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert!(matches!("fetch".parse::<TaskKind>(), Err(EnvError::UnknownTask(_))));
    }

    #[test]
    fn reset_is_deterministic() {
        for t in TaskKind::ALL {
            assert_eq!(reset(t, true, 42, &geom()), reset(t, true, 42, &geom()));
        }
    }

    #[test]
    fn gsi_adds_five_features() {
        for t in TaskKind::ALL {
            let (_, plain) = reset(t, false, 1, &geom());
            let (_, rich) = reset(t, true, 1, &geom());
            assert_eq!(rich.len() - plain.len(), 2 + 3);
            assert_eq!(plain.len(), t.obs_dim(false));
            assert!(plain.gsi_block().is_none());
        }
    }

    #[test]
    fn reach_one_step_to_goal() {
        let g = geom();
        let mut s = initial_state(TaskKind::Reach, 0, &g);
        s.goal_pos = [0.5, 0.5];
        s.agent_pos = [0.5 - g.step_scale, 0.5];
        let r = step(&mut s, &[1.0, 0.0], false, &g).unwrap();
        assert!(r.success && r.done);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn zero_action_keeps_positions() {
        let g = geom();
        for t in TaskKind::ALL {
            let mut s = initial_state(t, 9, &g);
            let before = s.clone();
            let zero = vec![0.0; t.action_dim()];
            let r = step(&mut s, &zero, false, &g).unwrap();
            assert_eq!(s.agent_pos, before.agent_pos);
            assert_eq!(s.object_pos, before.object_pos);
            assert_eq!(r.reward, -1.0);
        }
    }

    #[test]
    fn actions_are_clipped() {
        let g = geom();
        let mut a = initial_state(TaskKind::Reach, 5, &g);
        let mut b = a.clone();
        a.agent_pos = [0.5, 0.5];
        b.agent_pos = [0.5, 0.5];
        step(&mut a, &[7.0, -3.0], false, &g).unwrap();
        step(&mut b, &[1.0, -1.0], false, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grip_out_of_range_stays_open() {
        let g = geom();
        let mut s = pickplace([0.2, 0.2], [0.6, 0.6], [0.9, 0.1], false);
        step(&mut s, &[0.0, 0.0, 1.0], true, &g).unwrap();
        assert!(!s.grip_closed);
        assert_eq!(stage_of(&s, &g).unwrap(), Stage::S0);
    }

    #[test]
    fn grip_carry_and_release() {
        let g = geom();
        let mut s = pickplace([0.5, 0.5], [0.52, 0.5], [0.9, 0.5], false);
        step(&mut s, &[0.0, 0.0, 1.0], false, &g).unwrap();
        assert!(s.grip_closed);
        step(&mut s, &[1.0, 0.0, 1.0], false, &g).unwrap();
        assert!((s.object()[0] - 0.57).abs() < 1e-12);
        step(&mut s, &[1.0, 0.0, -1.0], false, &g).unwrap();
        assert!(!s.grip_closed);
        assert!((s.object()[0] - 0.57).abs() < 1e-12);
    }

    #[test]
    fn stage_labels() {
        let g = geom();
        let open = pickplace([0.5, 0.5], [0.5, 0.5], [0.5, 0.5], false);
        assert_eq!(stage_of(&open, &g).unwrap(), Stage::S0);
        let far = pickplace([0.2, 0.2], [0.2, 0.2], [0.8, 0.8], true);
        assert_eq!(stage_of(&far, &g).unwrap(), Stage::S1);
        let there = pickplace([0.8, 0.8], [0.81, 0.8], [0.8, 0.8], true);
        assert_eq!(stage_of(&there, &g).unwrap(), Stage::S2);
        let reach = initial_state(TaskKind::Reach, 0, &g);
        assert_eq!(stage_of(&reach, &g), Err(EnvError::NoStages(TaskKind::Reach)));
    }

    #[test]
    fn observe_gsi_block() {
        let g = geom();
        let at_goal = pickplace([0.3, 0.3], [0.4, 0.6], [0.4, 0.6], false);
        let o = observe(&at_goal, true, &g);
        assert_eq!(&o.gsi_block().unwrap()[..2], &[0.0, 0.0]);
        let far = pickplace([0.2, 0.2], [0.2, 0.2], [0.8, 0.8], true);
        let o = observe(&far, true, &g);
        assert_eq!(&o.gsi_block().unwrap()[2..], &[0.0, 1.0, 0.0]);
        let plain = observe(&far, false, &g);
        assert_eq!(plain.len(), 7);
    }

    #[test]
    fn push_moves_object_along_normal() {
        let g = geom();
        let mut s = GoalTaskState {
            task: TaskKind::Push,
            agent_pos: [0.4, 0.5],
            object_pos: Some([0.48, 0.5]),
            goal_pos: [0.9, 0.5],
            grip_closed: false,
            step_count: 0,
            done: false,
        };
        step(&mut s, &[1.0, 0.0], false, &g).unwrap();
        assert!((s.agent_pos[0] - 0.45).abs() < 1e-12);
        assert!((s.object()[0] - 0.5).abs() < 1e-12);
        assert!((s.object()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let g = geom();
        let mut s = initial_state(TaskKind::Reach, 0, &g);
        assert_eq!(
            step(&mut s, &[f64::NAN, 0.0], false, &g),
            Err(EnvError::NonFiniteAction { index: 0 })
        );
        assert_eq!(
            step(&mut s, &[0.0, 0.0, 0.0], false, &g),
            Err(EnvError::ActionDim { expected: 2, actual: 3 })
        );
    }

    #[test]
    fn horizon_ends_episode_and_step_after_done_fails() {
        let g = geom();
        let mut s = initial_state(TaskKind::Push, 3, &g);
        let mut n = 0;
        loop {
            let r = step(&mut s, &[0.0, 0.0], false, &g).unwrap();
            n += 1;
            if r.done {
                break;
            }
        }
        assert_eq!(n, g.horizon);
        assert_eq!(step(&mut s, &[0.0, 0.0], false, &g), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn resets_never_start_successful() {
        let g = geom();
        for t in TaskKind::ALL {
            for seed in 0..1000 {
                let s = initial_state(t, seed, &g);
                assert!(!s.is_success(&g), "{t} seed {seed}");
            }
        }
    }
}
