//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops over `Vec<f64>` and reads
//! parameters through the public accessors, so it shares no arithmetic
//! with the library's batched forward/backward code.

#![allow(dead_code)]

use ndarray::Array2;
use o2o_core::agents::{Blend, Hyper, ScheduleParams, Td3Agent, UpdateMode};
use o2o_core::nncore::{AdamState, MlpNet, OutputActivation};
use o2o_core::replay::{Batch, ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loop-based copy of an `MlpNet`: ReLU hidden layers, identity or tanh head.
#[derive(Debug, Clone)]
pub struct RefNet {
    /// `w[l][o][i]`
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    pub tanh: bool,
}

pub struct RefPass {
    /// Layer inputs; `acts[0]` is the network input.
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl RefNet {
    pub fn of(net: &MlpNet) -> Self {
        let layers = net.layer_sizes().len() - 1;
        RefNet {
            w: (0..layers)
                .map(|l| net.weights(l).outer_iter().map(|row| row.to_vec()).collect())
                .collect(),
            b: (0..layers).map(|l| net.biases(l).to_vec()).collect(),
            tanh: net.output_activation() == OutputActivation::Tanh,
        }
    }

    /// Parameters in the library's flat order: per layer, row-major weights then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            for row in w {
                v.extend(row);
            }
            v.extend(b);
        }
        v
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let mut k = 0;
        for (w, b) in self.w.iter_mut().zip(self.b.iter_mut()) {
            for row in w.iter_mut() {
                for x in row.iter_mut() {
                    *x = p[k];
                    k += 1;
                }
            }
            for x in b.iter_mut() {
                *x = p[k];
                k += 1;
            }
        }
        assert_eq!(k, p.len());
    }

    pub fn forward(&self, x: &[f64]) -> RefPass {
        let last = self.w.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::new();
        for l in 0..self.w.len() {
            let input = &acts[l];
            let z: Vec<f64> = self.w[l]
                .iter()
                .zip(&self.b[l])
                .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect();
            let a: Vec<f64> = if l == last {
                if self.tanh {
                    z.iter().map(|v| v.tanh()).collect()
                } else {
                    z.clone()
                }
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        let out = acts.pop().unwrap();
        RefPass { acts, pre, out }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).out
    }

    /// Gradients of `upstream · output(x)` w.r.t. flat parameters and the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pass = self.forward(x);
        let last = self.w.len() - 1;
        let mut delta: Vec<f64> = if self.tanh {
            upstream.iter().zip(&pass.out).map(|(u, y)| u * (1.0 - y * y)).collect()
        } else {
            upstream.to_vec()
        };
        let mut per_layer = vec![Vec::new(); self.w.len()];
        for l in (0..=last).rev() {
            let input = &pass.acts[l];
            let mut g = Vec::new();
            for d in &delta {
                g.extend(input.iter().map(|x| d * x));
            }
            g.extend(&delta);
            per_layer[l] = g;
            let mut dx = vec![0.0; input.len()];
            for (o, d) in delta.iter().enumerate() {
                for (i, w) in self.w[l][o].iter().enumerate() {
                    dx[i] += d * w;
                }
            }
            if l > 0 {
                for (g, z) in dx.iter_mut().zip(&pass.pre[l - 1]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        (per_layer.concat(), delta)
    }

    /// Sign pattern of every hidden pre-activation.
    pub fn relu_pattern(&self, x: &[f64]) -> Vec<bool> {
        let pass = self.forward(x);
        pass.pre[..pass.pre.len() - 1].iter().flatten().map(|z| *z > 0.0).collect()
    }
}

/// Textbook bias-corrected Adam step; `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct RefAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RefAdam {
    pub fn of(state: &AdamState) -> Self {
        RefAdam {
            m: state.m.clone(),
            v: state.v.clone(),
            step: state.step as i32,
            beta1: state.config.beta1,
            beta2: state.config.beta2,
            eps: state.config.eps,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.step));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.step));
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Gradient of `-mean_i Q1(s_i, π(s_i))` w.r.t. actor parameters.
pub fn td3_actor_grad(actor: &RefNet, critic: &RefNet, states: &[Vec<f64>]) -> Vec<f64> {
    let n = states.len() as f64;
    let obs_dim = states[0].len();
    let mut total = vec![0.0; actor.flat().len()];
    for s in states {
        let a = actor.output(s);
        let (_, dq) = critic.backward(&concat(s, &a), &[1.0]);
        let up: Vec<f64> = dq[obs_dim..].iter().map(|g| -g / n).collect();
        let (g, _) = actor.backward(s, &up);
        total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
    }
    total
}

/// Gradient of `mean_i ||π(s_i) - a_i||²` w.r.t. actor parameters.
pub fn regression_grad(actor: &RefNet, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
    let n = states.len() as f64;
    let mut total = vec![0.0; actor.flat().len()];
    for (s, a) in states.iter().zip(actions) {
        let pi = actor.output(s);
        let up: Vec<f64> = pi.iter().zip(a).map(|(p, x)| 2.0 * (p - x) / n).collect();
        let (g, _) = actor.backward(s, &up);
        total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
    }
    total
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, obs_dim: usize, act_dim: usize) -> Batch {
    let ts: Vec<Transition> = (0..n).map(|_| random_transition(rng, obs_dim, act_dim)).collect();
    Batch::from_transitions(&ts)
}

pub fn random_transition<R: Rng>(rng: &mut R, obs_dim: usize, act_dim: usize) -> Transition {
    let done = rng.random_bool(0.3);
    Transition {
        s: (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
        a: (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        r: if rng.random_bool(0.2) { 1.0 } else { -1.0 },
        s_next: (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
        done,
    }
}

pub fn small_hyper() -> Hyper {
    Hyper {
        hidden: vec![16, 16],
        batch_size: 16,
        ..Hyper::default()
    }
}

pub fn schedule(n_off: u64, delta_trans: u64) -> ScheduleParams {
    ScheduleParams {
        n_off,
        delta_trans,
        ..ScheduleParams::default()
    }
}

/// Worst relative error of `net`'s backward pass against central differences of
/// `L = sum_rows c · net(x)` over a batch.
///
/// Coordinates whose ±h probe flips a ReLU are skipped: the loss is not
/// differentiable across a kink and the difference quotient is meaningless there.
pub fn finite_difference_error(net: &MlpNet, inputs: &Array2<f64>, c: &Array2<f64>, h: f64) -> f64 {
    let xs = rows(inputs);
    let cs = rows(c);
    let loss = |r: &RefNet, xs: &[Vec<f64>]| -> f64 {
        xs.iter()
            .zip(&cs)
            .map(|(x, c)| r.output(x).iter().zip(c).map(|(y, c)| y * c).sum::<f64>())
            .sum()
    };
    let patterns = |r: &RefNet, xs: &[Vec<f64>]| -> Vec<Vec<bool>> { xs.iter().map(|x| r.relu_pattern(x)).collect() };
    let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-5);

    let cache = net.forward_cached(inputs).unwrap();
    let grads = net.backward_batch(&cache, c).unwrap();
    let base = RefNet::of(net);
    let p0 = base.flat();
    assert_eq!(p0, net.to_params().0, "flat order agrees");

    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        probe.set_flat(&p);
        let (up, pat_up) = (loss(&probe, &xs), patterns(&probe, &xs));
        p[i] = p0[i] - h;
        probe.set_flat(&p);
        let (down, pat_down) = (loss(&probe, &xs), patterns(&probe, &xs));
        if pat_up != pat_down {
            continue;
        }
        worst = worst.max(rel(grads.params.0[i], (up - down) / (2.0 * h)));
    }
    for r in 0..xs.len() {
        for j in 0..xs[r].len() {
            let mut shifted = xs.clone();
            shifted[r][j] = xs[r][j] + h;
            let (up, pat_up) = (loss(&base, &shifted), patterns(&base, &shifted));
            shifted[r][j] = xs[r][j] - h;
            let (down, pat_down) = (loss(&base, &shifted), patterns(&base, &shifted));
            if pat_up != pat_down {
                continue;
            }
            worst = worst.max(rel(grads.input[[r, j]], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// A random net with 1 to 3 hidden layers of width at most 16, plus a batch and
/// loss weights for it.
pub fn random_net_case<R: Rng>(rng: &mut R) -> (MlpNet, Array2<f64>, Array2<f64>) {
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=6)];
    for _ in 0..depth {
        sizes.push(rng.random_range(1..=16));
    }
    sizes.push(rng.random_range(1..=4));
    let head = if rng.random_bool(0.5) {
        OutputActivation::Tanh
    } else {
        OutputActivation::Identity
    };
    let net = MlpNet::new(&sizes, head, rng).unwrap();
    let n = rng.random_range(1..=4);
    let x = Array2::from_shape_simple_fn((n, sizes[0]), || rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_simple_fn((n, *sizes.last().unwrap()), || rng.random_range(-1.0..1.0));
    (net, x, c)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A fresh agent whose step counter is moved to `t` through a checkpoint.
pub fn agent_at(obs_dim: usize, act_dim: usize, blend: Blend, sched: ScheduleParams, t: u64, seed: u64) -> Td3Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = Td3Agent::new(obs_dim, act_dim, small_hyper(), sched, blend, &mut rng).unwrap();
    let mut c = agent.to_checkpoint();
    c.t = t;
    Td3Agent::from_checkpoint(c).unwrap()
}

/// Worst per-parameter gap between the unified actor update at `f = 0` and a
/// reference TD3 actor step, over several consecutive steps.
pub fn td3_gate_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (od, ad) = (rng.random_range(2..8), rng.random_range(1..4));
    let sched = schedule(100, 50);
    let mut agent = agent_at(od, ad, Blend::Unified, sched, 151, seed);
    assert_eq!(agent.bc_weight(agent.t()), 0.0);
    let mut actor = RefNet::of(&agent.actor);
    let critic = RefNet::of(&agent.critic1);
    let mut opt = RefAdam::of(&agent.actor_opt);
    let mut p = actor.flat();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let b = random_batch(&mut rng, 16, od, ad);
        agent.actor_update(&b).unwrap();
        let g = td3_actor_grad(&actor, &critic, &rows(&b.states));
        opt.apply(&mut p, &g, agent.hyper.actor_lr);
        actor.set_flat(&p);
        worst = worst.max(max_abs_diff(&agent.actor.to_params().0, &p));
    }
    worst
}

/// Worst per-parameter gap between the behaviour-cloning update (Q-term off,
/// `f = 1`) and a reference mean-squared-error regression step.
pub fn regression_gate_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (od, ad) = (rng.random_range(2..8), rng.random_range(1..4));
    let mut agent = agent_at(od, ad, Blend::Unified, schedule(100, 50), 0, seed);
    let mut buffer = ReplayBuffer::new(1000).unwrap();
    for _ in 0..200 {
        buffer.push(random_transition(&mut rng, od, ad)).unwrap();
    }
    let mut actor = RefNet::of(&agent.actor);
    let mut opt = RefAdam::of(&agent.actor_opt);
    let mut p = actor.flat();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let b = buffer.sample(agent.hyper.batch_size, &mut rng.clone()).unwrap();
        agent.update(&buffer, &mut rng, UpdateMode::BehaviorCloning).unwrap();
        let g = regression_grad(&actor, &rows(&b.states), &rows(&b.actions));
        opt.apply(&mut p, &g, agent.hyper.actor_lr);
        actor.set_flat(&p);
        worst = worst.max(max_abs_diff(&agent.actor.to_params().0, &p));
    }
    worst
}

/// Checks the clipped double-Q target on one random batch against the target
/// nets evaluated by the reference at the returned smoothed actions. Returns
/// the number of violated elements.
pub fn clipped_double_q_violations(agent: &Td3Agent, batch: &Batch, rng: &mut ChaCha8Rng) -> usize {
    let d = agent.compute_target_detail(batch, rng).unwrap();
    let q1 = RefNet::of(&agent.critic1_target);
    let q2 = RefNet::of(&agent.critic2_target);
    let pi = RefNet::of(&agent.actor_target);
    let gamma = agent.hyper.gamma;
    let c = agent.schedule.noise_clip;
    let mut bad = 0;
    for i in 0..batch.len() {
        let s2 = batch.next_states.row(i).to_vec();
        let a = d.smoothed_actions.row(i).to_vec();
        let terminal = batch.dones[i] && (batch.rewards[i] > 0.0 || !agent.hyper.bootstrap_timeouts);
        let nt = if terminal { 0.0 } else { 1.0 };
        let r = batch.rewards[i];
        let b1 = r + gamma * nt * q1.output(&concat(&s2, &a))[0];
        let b2 = r + gamma * nt * q2.output(&concat(&s2, &a))[0];
        let slack = 1e-12 * (1.0 + b1.abs().max(b2.abs()));
        let in_box = a.iter().all(|x| (-1.0..=1.0).contains(x));
        let near_target = pi.output(&s2).iter().zip(&a).all(|(p, x)| (p - x).abs() <= c + 1e-12);
        if !(d.y[i] <= b1 + slack && d.y[i] <= b2 + slack && (d.y[i] - b1.min(b2)).abs() <= slack && in_box && near_target) {
            bad += 1;
        }
    }
    bad
}
