use super::*;
use crate::environments::{voxelize, Obstacle, VoxelGrid, GRID_SIZE};
use crate::neuro::{Discriminator, Encoder, Generator, ModelBundle, ModelConfig, TrainConfig};
use crate::systems::{Control, Step};
use rand::SeedableRng;

fn car() -> SystemModel {
    SystemModel::builtin(SystemKind::Car)
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: vec![32, 32],
        latent: 8,
        dropout: 0.1,
        conv_channels: [4, 4],
    }
}

fn untrained_bundle(system: &SystemModel, with_disc: bool) -> ModelBundle {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let encoder = Encoder::for_grid(GRID_SIZE, &cfg, &mut rng);
    let generator = Generator::new(system, &cfg, &mut rng);
    let b = ModelBundle::new(system.name(), cfg.clone()).with_generator(encoder, generator, TrainConfig::default());
    if with_disc {
        let d = Discriminator::new(system, &cfg, &mut rng);
        b.with_discriminator(d, TrainConfig::default())
    } else {
        b
    }
}

fn empty_grid(env: &Environment) -> VoxelGrid {
    voxelize(env, &mut ChaCha8Rng::seed_from_u64(0))
}

fn traj_of(system: &SystemModel, from: &State, u: Vec<f64>, duration: f64) -> Trajectory {
    let u = Control(u);
    let next = system.propagate(from, &u, duration);
    Trajectory {
        steps: vec![Step { state: from.clone(), control: u, duration }],
        terminal_state: next,
    }
}

#[test]
fn extract_path_of_root_is_empty() {
    let s = car();
    let tree = SearchTree::new(&s, State(vec![0.0, 0.0, 0.0]));
    let p = tree.extract_path(SearchTree::ROOT).unwrap();
    assert!(p.is_empty());
    assert_eq!(p.terminal_state, State(vec![0.0, 0.0, 0.0]));
}

#[test]
fn extract_path_concatenates_edges() {
    let s = car();
    let mut tree = SearchTree::new(&s, State(vec![0.0, 0.0, 0.0]));
    let mut id = SearchTree::ROOT;
    for d in [1.0, 2.0, 3.0] {
        let from = tree.node(id).state.clone();
        id = tree.add(id, traj_of(&s, &from, vec![1.0, 0.0], d));
    }
    let p = tree.extract_path(id).unwrap();
    assert_eq!(p.steps.len(), 3);
    assert!((p.total_duration() - 6.0).abs() < 1e-12);
    assert!((tree.node(id).cost - 6.0).abs() < 1e-12);
    assert!((p.terminal_state[0] - 6.0).abs() < 1e-9);
    assert!(p.replay_error(&s) < 1e-9);
}

#[test]
fn reached_picks_cheapest_then_lowest_id() {
    let s = car();
    let mut tree = SearchTree::new(&s, State(vec![0.0, 0.0, 0.0]));
    let root = tree.node(0).state.clone();
    // Two nodes at x = 2 with equal cost, and one at x = 2.1 via a slower route.
    let a = tree.add(0, traj_of(&s, &root, vec![2.0, 0.0], 1.0));
    let b = tree.add(0, traj_of(&s, &root, vec![2.0, 0.0], 1.0));
    let slow = tree.add(0, traj_of(&s, &root, vec![1.05, 0.0], 2.0));
    let goal = State(vec![2.0, 0.0, 0.0]);
    assert_eq!(reached(&mut tree, &goal, 0.5), Some(a));
    tree.deactivate(a);
    assert_eq!(reached(&mut tree, &goal, 0.5), Some(b));
    tree.deactivate(b);
    assert_eq!(reached(&mut tree, &goal, 0.5), Some(slow));
    assert_eq!(reached(&mut tree, &State(vec![20.0, 0.0, 0.0]), 0.5), None);
}

#[test]
fn prune_removes_childless_inactive_ancestors() {
    let s = car();
    let mut tree = SearchTree::new(&s, State(vec![0.0, 0.0, 0.0]));
    let r = tree.node(0).state.clone();
    let a = tree.add(0, traj_of(&s, &r, vec![1.0, 0.0], 1.0));
    let sa = tree.node(a).state.clone();
    let b = tree.add(a, traj_of(&s, &sa, vec![1.0, 0.0], 1.0));
    let c = tree.add(a, traj_of(&s, &sa, vec![1.0, 0.5], 1.0));
    tree.deactivate(a);
    tree.deactivate(b);
    assert_eq!(tree.prune_from(b), 1);
    assert!(tree.node(b).removed);
    assert!(!tree.node(a).removed, "a still has child c");
    tree.deactivate(c);
    assert_eq!(tree.prune_from(c), 2);
    assert!(tree.node(a).removed);
    assert!(!tree.node(0).removed, "root is never removed");
    assert_eq!(tree.len(), 1);
    assert!(tree.extract_path(b).is_err());
}

#[test]
fn linear_and_kd_queries_agree() {
    let s = car();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lin = NnIndex::new(&s, NnMode::Linear);
    let mut kd = NnIndex::new(&s, NnMode::KdTree);
    for i in 0..4000 {
        let x = s.sample_state(&mut rng);
        assert_eq!(lin.insert(&x), kd.insert(&x));
        if i % 7 == 3 {
            lin.deactivate(i / 2);
            kd.deactivate(i / 2);
        }
        if i % 50 == 0 {
            let q = s.sample_state(&mut rng);
            assert_eq!(lin.nearest(&q), kd.nearest(&q));
            assert_eq!(lin.within(&q, 3.0), kd.within(&q, 3.0));
        }
    }
    for _ in 0..200 {
        let q = s.sample_state(&mut rng);
        let (id, d) = kd.nearest(&q).unwrap();
        assert_eq!(lin.nearest(&q), Some((id, d)));
        let brute = lin
            .active_ids()
            .iter()
            .map(|&i| s.distance(lin.state(i), &q))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(d, brute);
    }
}

#[test]
fn nearest_ties_go_to_lowest_id() {
    let s = car();
    let mut idx = NnIndex::new(&s, NnMode::KdTree);
    for _ in 0..3 {
        idx.insert(&State(vec![1.0, 1.0, 0.0]));
    }
    assert_eq!(idx.nearest(&[0.0, 0.0, 0.0]).unwrap().0, 0);
    idx.deactivate(0);
    assert_eq!(idx.nearest(&[0.0, 0.0, 0.0]).unwrap().0, 1);
}

#[test]
fn witness_dominance_example() {
    let s = car();
    let costs = [5.0, 6.0, 5.0, 4.0];
    let cost_of = |i: usize| costs[i];
    let mut w = Witnesses::new(&s, 0.3);
    let x = State(vec![0.0, 0.0, 0.0]);
    let Offer::Accept { witness, displaced: None } = w.offer(&x, 5.0, cost_of) else { panic!("first offer") };
    w.assign(witness, 0);
    let near = State(vec![0.1, 0.1, 0.0]);
    assert_eq!(w.offer(&near, 6.0, cost_of), Offer::Reject);
    assert_eq!(w.offer(&near, 5.0, cost_of), Offer::Reject, "ties keep the incumbent");
    assert_eq!(w.offer(&near, 4.0, cost_of), Offer::Accept { witness, displaced: Some(0) });
    w.assign(witness, 3);
    let far = State(vec![1.0, 0.0, 0.0]);
    match w.offer(&far, 9.0, cost_of) {
        Offer::Accept { witness: w2, displaced: None } => assert_ne!(w2, witness),
        other => panic!("{other:?}"),
    }
}

#[test]
fn edges_stop_inside_the_goal_region() {
    let s = car();
    let start = State(vec![0.0, 0.0, 0.0]);
    let goal = State(vec![1.0, 0.0, 0.0]);
    let t = traj_of(&s, &start, vec![2.0, 0.0], 1.0);
    let cut = stop_at_goal(&s, t, &goal, 0.5);
    let d = cut.total_duration();
    // First substep at or past x = 0.5 is at t = 0.26 (13 steps of 0.02 s).
    assert!((d - 0.26).abs() < 1e-12, "{d}");
    assert!(s.distance(&cut.terminal_state, &goal) <= 0.5);
    assert!(cut.replay_error(&s) == 0.0);
    let off = traj_of(&s, &start, vec![2.0, 0.0], 1.0);
    let same = stop_at_goal(&s, off.clone(), &State(vec![9.0, 9.0, 0.0]), 0.5);
    assert_eq!(same, off);
}

fn di_problem() -> (SystemModel, Environment, State, State) {
    let s = SystemModel::builtin(SystemKind::DoubleIntegrator);
    let env = Environment::empty(SystemKind::DoubleIntegrator);
    (s, env, State(vec![0.0, 0.0]), State(vec![1.0, 0.0]))
}

#[test]
fn sst_solves_double_integrator_with_valid_tree() {
    let (s, env, a, b) = di_problem();
    let cfg = PlannerConfig { max_iterations: 20_000, seed: 1, ..Default::default() };
    let sst = SstConfig { audit: true, ..SstConfig::for_system(s.kind) };
    let r = sst_plan(&s, &env, &a, &b, &cfg, &sst).unwrap();
    assert!(r.solved(), "{:?}", r.status);
    assert_eq!(r.stats.witness_violations, 0);
    let t = r.trajectory.unwrap();
    assert!(s.distance(&t.terminal_state, &b) <= s.goal_radius);
    assert!(env.valid_trajectory(&s, &t));
    assert!(t.replay_error(&s) < 1e-9);
    assert!((r.cost.unwrap() - t.total_duration()).abs() < 1e-12);
}

#[test]
fn sst_is_deterministic() {
    let (s, env, a, b) = di_problem();
    let cfg = PlannerConfig { max_iterations: 3000, seed: 5, ..Default::default() };
    let sst = SstConfig::for_system(s.kind);
    let r1 = sst_plan(&s, &env, &a, &b, &cfg, &sst).unwrap();
    let r2 = sst_plan(&s, &env, &a, &b, &cfg, &sst).unwrap();
    assert!(r1.same_outcome(&r2));
}

#[test]
fn start_in_collision_fails_immediately() {
    let s = car();
    let env = Environment::empty(SystemKind::Car)
        .with_obstacle(Obstacle::new(vec![0.0, 0.0], vec![1.0, 1.0]))
        .unwrap();
    let cfg = PlannerConfig { max_iterations: 100, ..Default::default() };
    let r = sst_plan(&s, &env, &State(vec![0.0, 0.0, 0.0]), &State(vec![5.0, 0.0, 0.0]), &cfg, &SstConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Failed);
    assert_eq!(r.iterations, 0);
    assert!(r.trajectory.is_none());
}

#[test]
fn start_in_goal_is_solved_at_iteration_zero() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let cfg = PlannerConfig { max_iterations: 100, ..Default::default() };
    let a = State(vec![0.0, 0.0, 0.0]);
    let r = sst_plan(&s, &env, &a, &State(vec![0.2, 0.0, 0.0]), &cfg, &SstConfig::default()).unwrap();
    assert!(r.solved());
    assert_eq!(r.iterations, 0);
    assert_eq!(r.cost, Some(0.0));
    assert!(r.trajectory.unwrap().is_empty());
}

#[test]
fn enclosed_goal_is_never_reached() {
    let s = car();
    let env = Environment::empty(SystemKind::Car)
        .with_obstacle(Obstacle::new(vec![5.0, 0.0], vec![1.5, 1.5]))
        .unwrap();
    let cfg = PlannerConfig { max_iterations: 3000, ..Default::default() };
    let r = sst_plan(&s, &env, &State(vec![0.0, 0.0, 0.0]), &State(vec![5.0, 0.0, 0.0]), &cfg, &SstConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Failed);
    assert_eq!(r.iterations, 3000);
}

#[test]
fn time_budget_reports_timeout() {
    let (s, env, a, _) = di_problem();
    let cfg = PlannerConfig { max_iterations: 1000, time_budget_secs: 0.0, ..Default::default() };
    let r = sst_plan(&s, &env, &a, &State(vec![9.0, 0.0]), &cfg, &SstConfig::for_system(s.kind)).unwrap();
    assert_eq!(r.status, PlanStatus::Timeout);
}

#[test]
fn neural_planners_need_models() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let cfg = PlannerConfig { max_iterations: 10, ..Default::default() };
    let a = State(vec![0.0, 0.0, 0.0]);
    let e = staged_explore(PlannerKind::MpTree, &s, &env, None, &a, &State(vec![5.0, 0.0, 0.0]), &cfg, &SstConfig::default());
    assert!(e.is_err());
}

#[test]
fn tree_grows_at_most_batch_size_per_iteration() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let bundle = untrained_bundle(&s, false);
    let grid = empty_grid(&env);
    let sampler = NeuralSampler::new(&bundle, &grid).unwrap();
    let cfg = PlannerConfig { max_iterations: 3, batch_size: 4, ..PlannerConfig::for_planner(PlannerKind::MpTree) };
    let r = mpnet_tree_plan(&s, &env, &sampler, &State(vec![0.0, 0.0, 0.0]), &State(vec![20.0, 20.0, 0.0]), &cfg).unwrap();
    assert!(r.tree_size <= 1 + 3 * 4);
    assert!(r.stats.max_insertions_per_iteration <= 4);
    assert_eq!(r.stats.generator_calls, r.iterations * 4);
}

#[test]
fn path_planner_generator_calls_follow_ablation() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let bundle = untrained_bundle(&s, true);
    let grid = empty_grid(&env);
    let sampler = NeuralSampler::new(&bundle, &grid).unwrap();
    let a = State(vec![0.0, 0.0, 0.0]);
    let b = State(vec![20.0, 20.0, 0.0]);
    let with = PlannerConfig { max_iterations: 4, batch_size: 8, ..Default::default() };
    let r = mpnet_path_plan(&s, &env, &sampler, &a, &b, &with).unwrap();
    assert_eq!(r.stats.generator_calls, 8 * r.iterations);
    assert_eq!(r.stats.discriminator_calls, 8 * r.iterations);
    assert!(r.tree_size <= 1 + r.iterations);
    let without = PlannerConfig { use_discriminator: false, ..with };
    let r = mpnet_path_plan(&s, &env, &sampler, &a, &b, &without).unwrap();
    assert_eq!(r.stats.generator_calls, r.iterations);
    assert_eq!(r.stats.discriminator_calls, 0);
}

#[test]
fn staged_with_full_stages_equals_base_planner() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let bundle = untrained_bundle(&s, true);
    let grid = empty_grid(&env);
    let sampler = NeuralSampler::new(&bundle, &grid).unwrap();
    let a = State(vec![0.0, 0.0, 0.0]);
    let b = State(vec![3.0, 1.0, 0.5]);
    let n = 5;
    for kind in [PlannerKind::MpPath, PlannerKind::MpTree] {
        let cfg = PlannerConfig {
            max_iterations: n,
            batch_size: 4,
            stage1: Some(n),
            stage2: Some(n),
            seed: 11,
            ..Default::default()
        };
        let base = match kind {
            PlannerKind::MpPath => mpnet_path_plan(&s, &env, &sampler, &a, &b, &cfg).unwrap(),
            _ => mpnet_tree_plan(&s, &env, &sampler, &a, &b, &cfg).unwrap(),
        };
        let staged = staged_explore(kind, &s, &env, Some(&sampler), &a, &b, &cfg, &SstConfig::default()).unwrap();
        assert!(base.same_outcome(&staged), "{kind:?}");
    }
}

#[test]
fn staged_with_zero_stages_equals_sst() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let bundle = untrained_bundle(&s, false);
    let grid = empty_grid(&env);
    let sampler = NeuralSampler::new(&bundle, &grid).unwrap();
    let a = State(vec![0.0, 0.0, 0.0]);
    let b = State(vec![3.0, 1.0, 0.5]);
    let cfg = PlannerConfig { max_iterations: 2000, stage1: Some(0), stage2: Some(0), seed: 4, ..Default::default() };
    let sst = SstConfig::default();
    let r1 = staged_explore(PlannerKind::MpTree, &s, &env, Some(&sampler), &a, &b, &cfg, &sst).unwrap();
    let r2 = sst_plan(&s, &env, &a, &b, &cfg, &sst).unwrap();
    assert!(r1.same_outcome(&r2));
    let r3 = staged_explore(PlannerKind::MpPath, &s, &env, None, &a, &b, &cfg, &sst).unwrap();
    assert!(r3.same_outcome(&r2));
}

#[test]
fn staged_phases_keep_tree_consistent() {
    let s = car();
    let env = Environment::empty(SystemKind::Car);
    let bundle = untrained_bundle(&s, true);
    let grid = empty_grid(&env);
    let sampler = NeuralSampler::new(&bundle, &grid).unwrap();
    let a = State(vec![0.0, 0.0, 0.0]);
    let b = State(vec![20.0, -20.0, 0.0]);
    let cfg = PlannerConfig { max_iterations: 400, batch_size: 4, stage1: Some(5), stage2: Some(10), seed: 2, ..Default::default() };
    let sst = SstConfig { audit: true, ..SstConfig::default() };
    for kind in [PlannerKind::MpPath, PlannerKind::MpTree] {
        let r = staged_explore(kind, &s, &env, Some(&sampler), &a, &b, &cfg, &sst).unwrap();
        assert_eq!(r.stats.witness_violations, 0, "{kind:?}");
        assert!(r.stats.steer_calls >= r.iterations);
    }
}

#[test]
fn planner_names_round_trip() {
    for k in [PlannerKind::MpPath, PlannerKind::MpTree, PlannerKind::Sst] {
        assert_eq!(PlannerKind::from_name(k.name()).unwrap(), k);
    }
    assert!(PlannerKind::from_name("rrt").is_err());
}

#[test]
fn stage_defaults_and_validation() {
    let cfg = PlannerConfig { max_iterations: 1000, ..Default::default() };
    assert_eq!(cfg.stages(), (600, 800));
    let bad = PlannerConfig { stage1: Some(900), stage2: Some(800), ..cfg.clone() };
    assert!(bad.validate().is_err());
    let bad = PlannerConfig { batch_size: 0, ..cfg };
    assert!(bad.validate().is_err());
}
