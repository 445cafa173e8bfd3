use o2o_core::envs::{observe, stage_of, EnvError, Geometry, GoalEnv, Stage, TaskKind, GSI_FEATURES};
use proptest::prelude::*;

fn task_strategy() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Reach), Just(TaskKind::PickPlace), Just(TaskKind::Push)]
}

fn in_box(p: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

proptest! {
    #[test]
    fn random_episodes_keep_invariants(
        task in task_strategy(),
        gsi in any::<bool>(),
        seed in any::<u64>(),
        actions in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..150),
    ) {
        let geom = Geometry::default();
        let mut env = GoalEnv::new(task, gsi, geom);
        let obs = env.reset(seed);
        prop_assert_eq!(obs.len(), task.obs_dim(gsi));
        prop_assert!(!env.state().is_success(&geom));
        for (k, a) in actions.iter().enumerate() {
            let before = env.state().clone();
            let res = env.step(&a[..task.action_dim()]).unwrap();
            let s = env.state();
            prop_assert!(in_box(s.agent_pos));
            prop_assert!(s.object_pos.is_none_or(in_box));
            prop_assert_eq!(s.goal_pos, before.goal_pos);
            // one step moves the agent at most step_scale per axis
            prop_assert!((s.agent_pos[0] - before.agent_pos[0]).abs() <= geom.step_scale + 1e-12);
            prop_assert!((s.agent_pos[1] - before.agent_pos[1]).abs() <= geom.step_scale + 1e-12);
            prop_assert_eq!(res.reward == 1.0, res.success);
            prop_assert!(res.reward == 1.0 || res.reward == -1.0);
            prop_assert_eq!(res.success, s.is_success(&geom));
            prop_assert_eq!(res.done, res.success || k + 1 == geom.horizon);
            prop_assert_eq!(&res.observation, &observe(s, gsi, &geom));
            if let Some(block) = res.observation.gsi_block() {
                prop_assert_eq!(block.len(), GSI_FEATURES);
                prop_assert_eq!(block[2..].iter().sum::<f64>(), 1.0);
            }
            if task == TaskKind::PickPlace && before.grip_closed && s.grip_closed {
                let moved = dist(s.object(), before.object());
                prop_assert!(moved <= dist(s.agent_pos, before.agent_pos) + 1e-12);
            }
            if res.done {
                prop_assert_eq!(env.step(&a[..task.action_dim()]), Err(EnvError::EpisodeOver));
                break;
            }
        }
    }

    #[test]
    fn resets_are_pure_functions_of_the_seed(task in task_strategy(), seed in any::<u64>()) {
        let geom = Geometry::default();
        let mut a = GoalEnv::new(task, true, geom);
        let mut b = GoalEnv::new(task, true, geom);
        b.reset(seed.wrapping_add(1));
        prop_assert_eq!(a.reset(seed), b.reset(seed));
        let s = a.state();
        let mover = if task == TaskKind::Reach { s.agent_pos } else { s.object() };
        prop_assert!(dist(mover, s.goal_pos) >= geom.min_separation);
    }

    #[test]
    fn pickplace_stage_follows_grip_and_goal(seed in any::<u64>()) {
        let geom = Geometry::default();
        let mut env = GoalEnv::new(TaskKind::PickPlace, true, geom);
        env.reset(seed);
        let s = env.state().clone();
        prop_assert_eq!(stage_of(&s, &geom).unwrap(), Stage::S0);
        let mut held = s.clone();
        held.grip_closed = true;
        held.agent_pos = held.object();
        prop_assert_eq!(stage_of(&held, &geom).unwrap(), Stage::S1);
        held.object_pos = Some(held.goal_pos);
        prop_assert_eq!(stage_of(&held, &geom).unwrap(), Stage::S2);
        prop_assert!(held.is_success(&geom));
    }
}

#[test]
fn malformed_actions_are_rejected() {
    let mut env = GoalEnv::new(TaskKind::PickPlace, false, Geometry::default());
    env.reset(0);
    assert_eq!(env.step(&[0.0, 0.0]), Err(EnvError::ActionDim { expected: 3, actual: 2 }));
    assert_eq!(env.step(&[0.0, f64::NAN, 0.0]), Err(EnvError::NonFiniteAction { index: 1 }));
    assert!(GoalEnv::from_name("stack", false, Geometry::default()).is_err());
}
