//! Randomized invariants, each checked on [`CASES`] generated inputs.

use std::f64::consts::PI;

use kinoplan::environments::{voxelize, workspace_for, GRID_SIZE};
use kinoplan::planners::SearchTree;
use kinoplan::steering::{cem_steer_observed, random_shoot, CemParams};
use kinoplan::systems::wrap_angle;
use kinoplan::{Control, Environment, Obstacle, Step, SystemKind, SystemModel, Trajectory};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

pub type Property = fn() -> Result<(), String>;

pub const PROPERTIES: [(&str, Property); 6] = [
    ("tree replay", tree_replay),
    ("trajectory replay", trajectory_replay),
    ("angle wrapping", angle_wrapping),
    ("quaternion norm", quaternion_norm),
    ("cem monotone best score", cem_monotone_best),
    ("voxel monotonicity", voxel_monotonicity),
];

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn any_system() -> impl Strategy<Value = SystemModel> {
    prop::sample::select(SystemKind::ALL.to_vec()).prop_map(SystemModel::builtin)
}

fn random_step(s: &SystemModel, x: &kinoplan::State, rng: &mut ChaCha8Rng) -> (Step, kinoplan::State) {
    let u = s.sample_control(rng);
    let d = rng.random_range(s.duration_bounds.lo..=s.duration_bounds.hi);
    let next = s.propagate(x, &u, d);
    (Step { state: x.clone(), control: u, duration: d }, next)
}

pub fn tree_replay() -> Result<(), String> {
    run((any_system(), any::<u64>(), 1usize..25), |(system, seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = SearchTree::new(&system, system.sample_state(&mut rng));
        for _ in 0..n {
            let parent = rng.random_range(0..tree.len());
            let mut x = tree.node(parent).state.clone();
            let mut steps = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                let (step, next) = random_step(&system, &x, &mut rng);
                steps.push(step);
                x = next;
            }
            tree.add(parent, Trajectory { steps, terminal_state: x });
        }
        let (state_err, cost_err) = tree.audit(&system);
        prop_assert!(state_err <= 1e-9 && cost_err <= 1e-9);
        let leaf = tree.len() - 1;
        let path = tree.extract_path(leaf).unwrap();
        prop_assert_eq!(path.start_state(), &tree.node(0).state);
        prop_assert_eq!(&path.terminal_state, &tree.node(leaf).state);
        prop_assert!(path.replay_error(&system) <= 1e-9);
        prop_assert!((path.total_duration() - tree.node(leaf).cost).abs() <= 1e-9);
        Ok(())
    })
}

pub fn trajectory_replay() -> Result<(), String> {
    run((any_system(), any::<u64>(), 0usize..6), |(system, seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = system.sample_state(&mut rng);
        let mut steps = Vec::new();
        for _ in 0..n {
            let (step, next) = random_step(&system, &x, &mut rng);
            steps.push(step);
            x = next;
        }
        let t = Trajectory { steps, terminal_state: x };
        prop_assert_eq!(t.replay_error(&system), 0.0);
        let env = Environment::empty(system.kind);
        let target = system.sample_state(&mut rng);
        let r = random_shoot(&system, &env, t.start_state(), &target, 3, &mut rng);
        prop_assert_eq!(r.trajectory.replay_error(&system), 0.0);
        Ok(())
    })
}

pub fn angle_wrapping() -> Result<(), String> {
    run(-1e4f64..1e4, |a| {
        let w = wrap_angle(a);
        prop_assert!((-PI..PI).contains(&w));
        prop_assert!((w.sin() - a.sin()).abs() <= 1e-9 && (w.cos() - a.cos()).abs() <= 1e-9);
        prop_assert_eq!(wrap_angle(w), w);
        Ok(())
    })
}

pub fn quaternion_norm() -> Result<(), String> {
    let s = SystemModel::builtin(SystemKind::Quadrotor);
    let q = s.quaternion_offset().expect("quadrotor has a quaternion");
    run((any::<u64>(), 0.0f64..2.0), |(seed, duration)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = s.sample_state(&mut rng);
        let u = Control(s.control_bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect());
        let y = s.propagate(&x, &u, duration);
        let norm = y.0[q..q + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-9, "norm {}", norm);
        Ok(())
    })
}

pub fn cem_monotone_best() -> Result<(), String> {
    run((any_system(), any::<u64>()), |(system, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = Environment::empty(system.kind);
        let start = system.sample_state(&mut rng);
        let target = system.sample_state(&mut rng);
        let params = CemParams { horizon: 2, population: 8, elites: 2, iterations: 4, ..CemParams::for_system(&system) };
        let mut seen = Vec::new();
        let r = cem_steer_observed(&system, &env, &start, &target, &params, &mut rng, |it| seen.push(it.best_score));
        prop_assert!(!seen.is_empty());
        prop_assert!(seen.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(r.best_score, *seen.last().unwrap());
        Ok(())
    })
}

pub fn voxel_monotonicity() -> Result<(), String> {
    let kinds = prop::sample::select(vec![SystemKind::Car, SystemKind::Quadrotor]);
    run((kinds, any::<u64>(), 0usize..4), |(kind, seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ws = workspace_for(kind);
        let random_box = |rng: &mut ChaCha8Rng| {
            let center = ws.iter().map(|b| rng.random_range(b.lo..b.hi)).collect();
            let half = ws.iter().map(|b| rng.random_range(0.01..0.2) * b.width()).collect();
            Obstacle::new(center, half)
        };
        let obstacles: Vec<Obstacle> = (0..n).map(|_| random_box(&mut rng)).collect();
        let env = Environment::new(kind, ws.clone(), obstacles, seed).unwrap();
        let bigger = env.with_obstacle(random_box(&mut rng)).unwrap();
        let a = voxelize(&env, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = voxelize(&bigger, &mut ChaCha8Rng::seed_from_u64(seed));
        for x in 0..GRID_SIZE {
            for y in 0..GRID_SIZE {
                for z in 0..GRID_SIZE {
                    prop_assert!(!a.get(x, y, z) || b.get(x, y, z));
                }
            }
        }
        Ok(())
    })
}
