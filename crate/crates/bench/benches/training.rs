use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use o2o_core::agents::{Blend, Hyper, ScheduleParams, Td3Agent, UpdateMode};
use o2o_core::demogen::{generate_demos, ScriptedPolicy};
use o2o_core::envs::{Geometry, GoalEnv, TaskKind};
use o2o_core::nncore::{MlpNet, OutputActivation};
use o2o_core::replay::init_from_demos;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = MlpNet::new(&[16, 64, 64, 3], OutputActivation::Tanh, &mut rng).unwrap();
    let x = Array2::from_shape_simple_fn((64, 16), || rng.random_range(-1.0..1.0));
    let up = Array2::from_elem((64, 3), 1.0 / 64.0);
    c.bench_function("mlp_forward_batch64", |b| b.iter(|| net.forward_batch(black_box(&x)).unwrap()));
    c.bench_function("mlp_forward_backward_batch64", |b| {
        b.iter(|| {
            let cache = net.forward_cached(black_box(&x)).unwrap();
            net.backward_batch(&cache, &up).unwrap()
        })
    });
}

fn updates(c: &mut Criterion) {
    let geom = Geometry::default();
    let task = TaskKind::PickPlace;
    let mut env = GoalEnv::new(task, true, geom);
    let demos = generate_demos(&mut ScriptedPolicy::expert(task, geom), &mut env, 10, true, 0).unwrap();
    let buffer = init_from_demos(&demos, 10_000).unwrap();
    let hyper = Hyper {
        batch_size: 64,
        ..Hyper::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agent = Td3Agent::new(env.obs_dim(), env.action_dim(), hyper, ScheduleParams::default(), Blend::Unified, &mut rng).unwrap();
    // two updates: one full policy-delay cycle
    for (name, mode) in [("update_cycle_actor_critic", UpdateMode::ActorCritic), ("update_cycle_behavior_cloning", UpdateMode::BehaviorCloning)] {
        c.bench_function(name, |b| {
            b.iter_batched_ref(
                || (agent.clone(), ChaCha8Rng::seed_from_u64(2)),
                |(a, r)| {
                    for _ in 0..2 {
                        a.update(&buffer, r, mode).unwrap();
                    }
                },
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group!(benches, mlp, updates);
criterion_main!(benches);
