//! TD3, behaviour cloning, TD3+BC and the scheduled offline-to-online agent.
//!
//! All learners share one actor-critic substrate, [`Td3Agent`]. What differs
//! between them is how the behaviour-cloning weight `f(t)` and the
//! exploration weight `g(t)` evolve with the update counter `t`, captured by
//! [`Blend`]:
//!
//! - [`Blend::Unified`]: `f` is 1 through the offline budget, then decays
//!   linearly to 0 over the transition length; `g = 1 - f` after the offline
//!   budget and 0 before it.
//! - [`Blend::Switch`]: the same, with a zero-length transition (`f` drops
//!   1 → 0 and `g` jumps 0 → 1 right after the offline budget).
//! - [`Blend::Online`]: `f ≡ 0`, `g ≡ 1` (plain TD3).
//!
//! The actor maximises `mean[Q1(s, π(s)) - f(t)/λ · |π(s) - a|²]` with
//! `λ = α / mean|Q1(s, a)|` computed on each batch. `t` counts update
//! iterations across both phases; online training performs one update per
//! environment step.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, GoalEnv, GoalTaskState, Observation};
use crate::nncore::{adam_step, soft_update, AdamState, MlpNet, NnError, OutputActivation, ParamVector};
use crate::replay::{Batch, ReplayBuffer, ReplayError, Transition};

/// Floor on `mean|Q|` in the λ denominator.
pub const LAMBDA_Q_FLOOR: f64 = 1e-6;
pub const AGENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite {what} at update step {t}")]
    NonFinite { what: &'static str, t: u64 },
    #[error("invalid hyperparameter: {0}")]
    Invalid(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub policy_delay: u64,
    pub hidden: Vec<usize>,
    /// Treat horizon timeouts as non-terminal when bootstrapping.
    pub bootstrap_timeouts: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            gamma: 0.98,
            tau: 0.005,
            alpha: 2.5,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            policy_delay: 2,
            hidden: vec![64, 64],
            bootstrap_timeouts: false,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.batch_size == 0 || self.policy_delay == 0 {
            return bad("batch_size and policy_delay must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Offline update budget `N_off`.
    pub n_off: u64,
    /// Offline-to-online transition length `Δ_trans`, in updates.
    pub delta_trans: u64,
    /// Target-policy smoothing noise std.
    pub sigma: f64,
    /// Smoothing noise clip bound.
    pub noise_clip: f64,
    /// Exploration noise std.
    pub eta_std: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            n_off: 10_000,
            delta_trans: 5_000,
            sigma: 0.2,
            noise_clip: 0.5,
            eta_std: 0.1,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.delta_trans == 0 {
            return Err(AgentError::Invalid("delta_trans must be positive".into()));
        }
        if !(self.noise_clip > 0.0) || !(self.sigma >= 0.0) || !(self.eta_std >= 0.0) {
            return Err(AgentError::Invalid("need noise_clip > 0, sigma >= 0, eta_std >= 0".into()));
        }
        Ok(())
    }
}

/// Behaviour-cloning weight: 1 up to `n_off`, linear decay over `delta_trans`, then 0.
pub fn f_weight(t: u64, s: &ScheduleParams) -> f64 {
    if t <= s.n_off {
        1.0
    } else if t <= s.n_off + s.delta_trans {
        1.0 - (t - s.n_off) as f64 / s.delta_trans as f64
    } else {
        0.0
    }
}

/// Exploration weight: 0 up to `n_off`, linear ramp to 1 over `delta_trans`, then 1.
pub fn g_weight(t: u64, s: &ScheduleParams) -> f64 {
    if t <= s.n_off {
        0.0
    } else if t <= s.n_off + s.delta_trans {
        1.0 - f_weight(t, s)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    Unified,
    Switch,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Exploit,
    Explore,
}

/// What an update iteration trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Critics every step, actor (with the scheduled BC term) every `policy_delay`.
    ActorCritic,
    /// Actor regression onto batch actions; critics untouched.
    BehaviorCloning,
}

/// Diagnostics of one update iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: Option<(f64, f64)>,
    pub actor_objective: Option<f64>,
    pub lambda: Option<f64>,
}

/// Target values and the intermediates they were computed from.
#[derive(Debug, Clone)]
pub struct TargetDetail {
    pub y: Vec<f64>,
    /// Smoothed, clipped target action per batch row.
    pub smoothed_actions: Array2<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    /// Per-row `1 - terminal` factor applied to the bootstrap term.
    pub not_terminal: Vec<f64>,
}

/// Which parts of the actor objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorTerms {
    pub use_q: bool,
    /// `f(t)`. With `use_q` the penalty coefficient is `bc_weight / λ`,
    /// without it `bc_weight` (λ only balances against Q).
    pub bc_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorOutcome {
    pub objective: f64,
    pub lambda: Option<f64>,
}

/// Anything that maps an observation (and, for scripted controllers, the
/// underlying state) to an action.
pub trait Policy {
    fn act(&mut self, obs: &Observation, state: &GoalTaskState) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: MlpNet,
    pub actor_target: MlpNet,
    pub critic1: MlpNet,
    pub critic2: MlpNet,
    pub critic1_target: MlpNet,
    pub critic2_target: MlpNet,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
    pub hyper: Hyper,
    pub schedule: ScheduleParams,
    pub blend: Blend,
    t: u64,
}

fn stack_sa(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[s.view(), a.view()]).expect("batch rows agree")
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hyper: Hyper,
        schedule: ScheduleParams,
        blend: Blend,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        schedule.validate()?;
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend(&hyper.hidden);
        actor_sizes.push(act_dim);
        let mut critic_sizes = vec![obs_dim + act_dim];
        critic_sizes.extend(&hyper.hidden);
        critic_sizes.push(1);

        let actor = MlpNet::new(&actor_sizes, OutputActivation::Tanh, rng)?;
        let critic1 = MlpNet::new(&critic_sizes, OutputActivation::Identity, rng)?;
        let critic2 = MlpNet::new(&critic_sizes, OutputActivation::Identity, rng)?;
        Ok(Td3Agent {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_opt: AdamState::new(&actor),
            critic1_opt: AdamState::new(&critic1),
            critic2_opt: AdamState::new(&critic2),
            actor,
            critic1,
            critic2,
            hyper,
            schedule,
            blend,
            t: 0,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Replaces both critics (and their targets and optimizers) with fresh nets.
    pub fn reset_critics<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let sizes = self.critic1.layer_sizes().to_vec();
        self.critic1 = MlpNet::new(&sizes, OutputActivation::Identity, rng)?;
        self.critic2 = MlpNet::new(&sizes, OutputActivation::Identity, rng)?;
        self.critic1_target = self.critic1.clone();
        self.critic2_target = self.critic2.clone();
        self.critic1_opt = AdamState::new(&self.critic1);
        self.critic2_opt = AdamState::new(&self.critic2);
        Ok(())
    }

    /// BC weight `f` at step `t` under this agent's blend.
    pub fn bc_weight(&self, t: u64) -> f64 {
        match self.blend {
            Blend::Unified => f_weight(t, &self.schedule),
            Blend::Switch => {
                if t <= self.schedule.n_off {
                    1.0
                } else {
                    0.0
                }
            }
            Blend::Online => 0.0,
        }
    }

    /// Exploration weight `g` at step `t` under this agent's blend.
    pub fn explore_weight(&self, t: u64) -> f64 {
        match self.blend {
            Blend::Unified => g_weight(t, &self.schedule),
            Blend::Switch => {
                if t <= self.schedule.n_off {
                    0.0
                } else {
                    1.0
                }
            }
            Blend::Online => 1.0,
        }
    }

    pub fn act_greedy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.actor.forward(obs)?)
    }

    /// `π(obs)`, or `clip(π(obs) + g(t)·N(0, η), -1, 1)` when exploring.
    ///
    /// Exploring always draws the noise, so the RNG stream does not depend on `g`.
    pub fn select_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R, mode: ActionMode) -> Result<Vec<f64>> {
        let mut a = self.actor.forward(obs)?;
        if mode == ActionMode::Explore {
            let g = self.explore_weight(self.t);
            for x in &mut a {
                let n: f64 = StandardNormal.sample(rng);
                *x = (*x + g * self.schedule.eta_std * n).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    /// Clipped double-Q targets with target-policy smoothing.
    pub fn compute_target<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.compute_target_detail(batch, rng)?.y)
    }

    pub fn compute_target_detail<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<TargetDetail> {
        if batch.is_empty() {
            return Err(AgentError::Precondition("empty batch".into()));
        }
        let c = self.schedule.noise_clip;
        let sigma = self.schedule.sigma;
        let mut smoothed = self.actor_target.forward_batch(&batch.next_states)?;
        smoothed.mapv_inplace(|a| {
            let n: f64 = StandardNormal.sample(rng);
            let eps = (sigma * n).clamp(-c, c);
            (a + eps).clamp(-1.0, 1.0)
        });
        let sa = stack_sa(&batch.next_states, &smoothed);
        let q1: Vec<f64> = self.critic1_target.forward_batch(&sa)?.column(0).to_vec();
        let q2: Vec<f64> = self.critic2_target.forward_batch(&sa)?.column(0).to_vec();
        let not_terminal: Vec<f64> = batch
            .dones
            .iter()
            .zip(&batch.rewards)
            .map(|(&done, &r)| {
                let terminal = done && (r > 0.0 || !self.hyper.bootstrap_timeouts);
                if terminal {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let y = (0..batch.len())
            .map(|i| batch.rewards[i] + self.hyper.gamma * not_terminal[i] * q1[i].min(q2[i]))
            .collect();
        Ok(TargetDetail {
            y,
            smoothed_actions: smoothed,
            q1,
            q2,
            not_terminal,
        })
    }

    /// One Adam step of both critics on mean squared error to the shared targets.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<(f64, f64)> {
        let y = self.compute_target(batch, rng)?;
        let sa = stack_sa(&batch.states, &batch.actions);
        let lr = self.hyper.critic_lr;
        let t = self.t;
        let l1 = critic_step(&mut self.critic1, &mut self.critic1_opt, &sa, &y, lr, t)?;
        let l2 = critic_step(&mut self.critic2, &mut self.critic2_opt, &sa, &y, lr, t)?;
        Ok((l1, l2))
    }

    /// `λ = α / max(mean|Q1(s, a)|, floor)` on the batch's dataset actions.
    pub fn lambda(&self, batch: &Batch) -> Result<f64> {
        let q = self.critic1.forward_batch(&stack_sa(&batch.states, &batch.actions))?;
        let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / batch.len() as f64;
        Ok(self.hyper.alpha / mean_abs.max(LAMBDA_Q_FLOOR))
    }

    /// Gradient of the negated actor objective w.r.t. actor parameters,
    /// plus the objective value and λ. Does not modify the agent.
    pub fn actor_gradient(&self, batch: &Batch, terms: ActorTerms) -> Result<(ParamVector, ActorOutcome)> {
        if batch.is_empty() {
            return Err(AgentError::Precondition("empty batch".into()));
        }
        let n = batch.len() as f64;
        let cache = self.actor.forward_cached(&batch.states)?;
        let pi = cache.output();
        let diff = pi - &batch.actions;
        let sq = diff.iter().map(|d| d * d).sum::<f64>() / n;

        let (lambda, coef) = if terms.use_q {
            let lambda = self.lambda(batch)?;
            (Some(lambda), terms.bc_weight / lambda)
        } else {
            (None, terms.bc_weight)
        };

        // d(-J)/dπ
        let mut upstream = diff.mapv(|d| 2.0 * coef * d / n);
        let mut q_mean = 0.0;
        if terms.use_q {
            let sa = stack_sa(&batch.states, pi);
            let qc = self.critic1.forward_cached(&sa)?;
            q_mean = qc.output().sum() / n;
            let ones = Array2::from_elem((batch.len(), 1), 1.0 / n);
            let g = self.critic1.backward_batch(&qc, &ones)?;
            let obs_dim = batch.states.ncols();
            upstream -= &g.input.slice(ndarray::s![.., obs_dim..]);
        }
        let grads = self.actor.backward_batch(&cache, &upstream)?;
        Ok((
            grads.params,
            ActorOutcome {
                objective: q_mean - coef * sq,
                lambda,
            },
        ))
    }

    /// One gradient-ascent step on the actor objective; targets are not touched.
    pub fn actor_step(&mut self, batch: &Batch, terms: ActorTerms) -> Result<ActorOutcome> {
        let (grads, outcome) = self.actor_gradient(batch, terms)?;
        if !outcome.objective.is_finite() {
            return Err(AgentError::NonFinite {
                what: "actor objective",
                t: self.t,
            });
        }
        adam_step(&mut self.actor, &grads, &mut self.actor_opt, self.hyper.actor_lr)?;
        Ok(outcome)
    }

    /// Actor step with `f(t)` at the current step, followed by soft updates
    /// of all three target networks.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<ActorOutcome> {
        let terms = ActorTerms {
            use_q: true,
            bc_weight: self.bc_weight(self.t),
        };
        let out = self.actor_step(batch, terms)?;
        self.soft_update_targets()?;
        Ok(out)
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.hyper.tau;
        soft_update(&mut self.actor_target, &self.actor, tau)?;
        soft_update(&mut self.critic1_target, &self.critic1, tau)?;
        soft_update(&mut self.critic2_target, &self.critic2, tau)?;
        Ok(())
    }

    /// One update iteration: advances `t`, samples a batch and trains.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R, mode: UpdateMode) -> Result<UpdateStats> {
        let batch = buffer.sample(self.hyper.batch_size, rng)?;
        self.t += 1;
        let mut stats = UpdateStats::default();
        match mode {
            UpdateMode::ActorCritic => {
                stats.critic_loss = Some(self.critic_update(&batch, rng)?);
                if self.t.is_multiple_of(self.hyper.policy_delay) {
                    let out = self.actor_update(&batch)?;
                    stats.actor_objective = Some(out.objective);
                    stats.lambda = out.lambda;
                }
            }
            UpdateMode::BehaviorCloning => {
                let out = self.actor_step(
                    &batch,
                    ActorTerms {
                        use_q: false,
                        bc_weight: 1.0,
                    },
                )?;
                soft_update(&mut self.actor_target, &self.actor, self.hyper.tau)?;
                stats.actor_objective = Some(out.objective);
            }
        }
        Ok(stats)
    }

    /// Offline phase: `n_steps` update iterations on `buffer`, no interaction.
    ///
    /// `hook` runs after every iteration.
    pub fn train_offline<R, E, H>(
        &mut self,
        buffer: &ReplayBuffer,
        n_steps: u64,
        mode: UpdateMode,
        rng: &mut R,
        mut hook: H,
    ) -> Result<(), E>
    where
        R: Rng + ?Sized,
        E: From<AgentError>,
        H: FnMut(&Self, &UpdateStats) -> Result<(), E>,
    {
        if self.t != 0 {
            return Err(AgentError::Precondition(format!("offline training starts at t = 0, agent is at {}", self.t)).into());
        }
        if n_steps > 0 && buffer.is_empty() {
            return Err(AgentError::Replay(ReplayError::Empty).into());
        }
        for _ in 0..n_steps {
            let stats = self.update(buffer, rng, mode)?;
            hook(self, &stats)?;
        }
        Ok(())
    }

    /// Online phase: act with exploration, store, one update per env step.
    ///
    /// Episodes restart from seeds drawn from `rng`; `hook` runs after every update.
    pub fn train_online<R, E, H>(
        &mut self,
        env: &mut GoalEnv,
        buffer: &mut ReplayBuffer,
        n_env_steps: u64,
        rng: &mut R,
        mut hook: H,
    ) -> Result<(), E>
    where
        R: Rng + ?Sized,
        E: From<AgentError>,
        H: FnMut(&Self, &UpdateStats) -> Result<(), E>,
    {
        if self.blend != Blend::Online && self.t < self.schedule.n_off {
            return Err(AgentError::Precondition(format!(
                "online training needs t >= n_off ({}), agent is at {}",
                self.schedule.n_off, self.t
            ))
            .into());
        }
        let mut obs = env.reset(rng.random());
        for _ in 0..n_env_steps {
            let a = self.select_action(obs.as_slice(), rng, ActionMode::Explore)?;
            let res = env.step(&a).map_err(AgentError::from)?;
            buffer
                .push(Transition {
                    s: obs.features,
                    a,
                    r: res.reward,
                    s_next: res.observation.features.clone(),
                    done: res.done,
                })
                .map_err(AgentError::from)?;
            obs = if res.done { env.reset(rng.random()) } else { res.observation };
            let stats = self.update(buffer, rng, UpdateMode::ActorCritic)?;
            hook(self, &stats)?;
        }
        Ok(())
    }

    /// Serialized agent: all six nets, optimizer moments, `t`, schedule and hyperparameters.
    pub fn to_checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            format_version: AGENT_FORMAT_VERSION,
            t: self.t,
            blend: self.blend,
            hyper: self.hyper.clone(),
            schedule: self.schedule.clone(),
            actor: NetSnapshot::of(&self.actor),
            actor_target: NetSnapshot::of(&self.actor_target),
            critic1: NetSnapshot::of(&self.critic1),
            critic2: NetSnapshot::of(&self.critic2),
            critic1_target: NetSnapshot::of(&self.critic1_target),
            critic2_target: NetSnapshot::of(&self.critic2_target),
            actor_opt: self.actor_opt.clone(),
            critic1_opt: self.critic1_opt.clone(),
            critic2_opt: self.critic2_opt.clone(),
        }
    }

    pub fn from_checkpoint(c: AgentCheckpoint) -> Result<Self> {
        if c.format_version != AGENT_FORMAT_VERSION {
            return Err(AgentError::Checkpoint(format!("unsupported format_version {}", c.format_version)));
        }
        let agent = Td3Agent {
            actor: c.actor.restore()?,
            actor_target: c.actor_target.restore()?,
            critic1: c.critic1.restore()?,
            critic2: c.critic2.restore()?,
            critic1_target: c.critic1_target.restore()?,
            critic2_target: c.critic2_target.restore()?,
            actor_opt: c.actor_opt,
            critic1_opt: c.critic1_opt,
            critic2_opt: c.critic2_opt,
            hyper: c.hyper,
            schedule: c.schedule,
            blend: c.blend,
            t: c.t,
        };
        if agent.actor.layer_sizes() != agent.actor_target.layer_sizes()
            || agent.critic1.layer_sizes() != agent.critic1_target.layer_sizes()
            || agent.critic2.layer_sizes() != agent.critic2_target.layer_sizes()
        {
            return Err(AgentError::Checkpoint("target architecture differs from online net".into()));
        }
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: AgentCheckpoint = serde_json::from_str(&text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(c)
    }
}

fn critic_step(
    critic: &mut MlpNet,
    opt: &mut AdamState,
    sa: &Array2<f64>,
    y: &[f64],
    lr: f64,
    t: u64,
) -> Result<f64> {
    let n = y.len() as f64;
    let cache = critic.forward_cached(sa)?;
    let q = cache.output();
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((y.len(), 1));
    for (i, &target) in y.iter().enumerate() {
        let err = q[[i, 0]] - target;
        loss += err * err;
        upstream[[i, 0]] = 2.0 * err / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(AgentError::NonFinite { what: "critic loss", t });
    }
    let g = critic.backward_batch(&cache, &upstream)?;
    adam_step(critic, &g.params, opt, lr)?;
    Ok(loss)
}

/// Greedy view of an agent, for evaluation.
pub struct Greedy<'a>(pub &'a Td3Agent);

impl Policy for Greedy<'_> {
    fn act(&mut self, obs: &Observation, _state: &GoalTaskState) -> Vec<f64> {
        self.0.actor.forward(obs.as_slice()).expect("observation matches actor input")
    }
}

/// Uniform random actions in `[-1, 1]`.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    act_dim: usize,
}

impl RandomPolicy {
    pub fn new(act_dim: usize, seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            act_dim,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation, _state: &GoalTaskState) -> Vec<f64> {
        (0..self.act_dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub layer_sizes: Vec<usize>,
    pub output: OutputActivation,
    pub params: Vec<f64>,
}

impl NetSnapshot {
    pub fn of(net: &MlpNet) -> Self {
        NetSnapshot {
            layer_sizes: net.layer_sizes().to_vec(),
            output: net.output_activation(),
            params: net.to_params().0,
        }
    }

    pub fn restore(&self) -> Result<MlpNet> {
        Ok(MlpNet::from_params(&self.layer_sizes, self.output, &ParamVector(self.params.clone()))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub format_version: u32,
    pub t: u64,
    pub blend: Blend,
    pub hyper: Hyper,
    pub schedule: ScheduleParams,
    pub actor: NetSnapshot,
    pub actor_target: NetSnapshot,
    pub critic1: NetSnapshot,
    pub critic2: NetSnapshot,
    pub critic1_target: NetSnapshot,
    pub critic2_target: NetSnapshot,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
}
