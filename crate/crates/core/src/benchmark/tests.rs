use super::*;
use crate::environments::GRID_SIZE;
use crate::neuro::{Discriminator, Encoder, Generator, ModelConfig, TrainConfig};

fn bundle(system: &SystemModel) -> ModelBundle {
    let cfg = ModelConfig {
        hidden: vec![16, 16],
        latent: 4,
        dropout: 0.1,
        conv_channels: [2, 2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = Encoder::for_grid(GRID_SIZE, &cfg, &mut rng);
    let g = Generator::new(system, &cfg, &mut rng);
    let d = Discriminator::new(system, &cfg, &mut rng);
    ModelBundle::new(system.name(), cfg)
        .with_generator(e, g, TrainConfig::default())
        .with_discriminator(d, TrainConfig::default())
}

fn specs() -> Vec<SceneSpec> {
    vec![
        SceneSpec { seed: 1, unseen: false, empty: true },
        SceneSpec { seed: 2, unseen: true, empty: false },
    ]
}

fn quick_settings() -> BenchSettings {
    let small = |kind| PlannerConfig { max_iterations: 30, batch_size: 4, ..PlannerConfig::for_planner(kind) };
    BenchSettings {
        mp_path: small(PlannerKind::MpPath),
        mp_tree: small(PlannerKind::MpTree),
        sst: PlannerConfig { max_iterations: 300, ..Default::default() },
        ..Default::default()
    }
}

fn strip_time(rows: &[Row]) -> Vec<Row> {
    rows.iter().map(|r| Row { time: 0.0, ..r.clone() }).collect()
}

#[test]
fn stats_examples() {
    assert_eq!(mean(&[]), None);
    assert_eq!(mean(&[1.0, 2.0, 3.0]), Some(2.0));
    assert_eq!(std_dev(&[5.0]), Some(0.0));
    assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]).unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    let q = quantiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    assert_eq!(quantiles(&[]), None);
}

#[test]
fn sign_test_examples() {
    // Three wins of three: 1/8.
    assert!((sign_test_p(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]) - 0.125).abs() < 1e-12);
    // Ties are dropped; no informative pair gives 1.
    assert_eq!(sign_test_p(&[1.0], &[1.0]), 1.0);
    // Two wins of three: (3 + 1) / 8.
    assert!((sign_test_p(&[1.0, 1.0, 3.0], &[2.0, 2.0, 2.0]) - 0.5).abs() < 1e-12);
    // Binomial tail oracle for n = 20, wins = 15.
    let oracle: f64 = (15..=20u64)
        .map(|k| {
            let c = (1..=k).fold(1.0, |acc, i| acc * (20 - k + i) as f64 / i as f64);
            c / 2f64.powi(20)
        })
        .sum();
    let a: Vec<f64> = (0..20).map(|i| if i < 15 { 0.0 } else { 2.0 }).collect();
    assert!((sign_test_p(&a, &[1.0; 20]) - oracle).abs() < 1e-12);
}

#[test]
fn suites_extend_without_changing_earlier_problems() {
    let s = SystemModel::builtin(SystemKind::Car);
    let a = ProblemSuite::new(&s, specs(), 5, 100, Some(6.0)).unwrap();
    let b = ProblemSuite::new(&s, specs(), 8, 100, Some(6.0)).unwrap();
    assert_eq!(a.problems[..], b.problems[..5]);
    for p in &b.problems {
        let env = b.env(p);
        assert!(env.collision_free(&s, &p.start) && env.collision_free(&s, &p.goal));
        assert!(s.distance(&p.start, &p.goal) <= 6.0);
        assert_eq!(p.seed, 100 + p.index as u64);
    }
    assert!(ProblemSuite::new(&s, vec![], 1, 0, None).is_err());
}

#[test]
fn report_rows_aggregates_and_exports_agree() {
    let s = SystemModel::builtin(SystemKind::Car);
    let suite = ProblemSuite::new(&s, specs(), 4, 7, Some(3.0)).unwrap();
    let b = bundle(&s);
    let planners = [PlannerKind::MpPath, PlannerKind::MpTree, PlannerKind::Sst];
    let report = run_benchmark(&planners, &suite, &quick_settings(), Some(&b)).unwrap();
    assert_eq!(report.rows.len(), 4 * 3);
    assert!(report.warnings.is_empty());
    // Aggregates recomputed from the rows.
    for a in &report.aggregates {
        let sel: Vec<&Row> = report
            .rows
            .iter()
            .filter(|r| r.planner == a.planner && (a.scene_class == "pooled" || r.scene_class == a.scene_class))
            .collect();
        let solved: Vec<&&Row> = sel.iter().filter(|r| r.solved()).collect();
        assert_eq!(a.problems, sel.len());
        assert_eq!(a.success_rate, solved.len() as f64 / sel.len() as f64);
        let t: Vec<f64> = solved.iter().map(|r| r.time).collect();
        match (a.solved_time_mean, mean(&t)) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9),
            (x, y) => assert_eq!(x, y),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    export(&report, dir.path()).unwrap();
    let rows = read_rows(&dir.path().join(ROWS_FILE)).unwrap();
    assert_eq!(rows.len(), suite.problems.len() * planners.len());
    assert_eq!(rows, report.rows);
    let q = read_quantiles(&dir.path().join(QUANTILES_FILE)).unwrap();
    assert_eq!(q, quantile_rows(&rows));
    for qr in &q {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.planner == qr.planner && r.solved())
            .filter(|r| qr.scene_class == "pooled" || r.scene_class == qr.scene_class)
            .map(|r| if qr.metric == "time" { r.time } else { r.cost.unwrap() })
            .collect();
        let z = quantiles(&vals).unwrap();
        assert_eq!((qr.min, qr.median, qr.max), (z.min, z.median, z.max));
    }
    let again = run_benchmark(&planners, &suite, &quick_settings(), Some(&b)).unwrap();
    assert_eq!(strip_time(&again.rows), strip_time(&report.rows));
}

#[test]
fn failed_cells_omit_means() {
    let s = SystemModel::builtin(SystemKind::Car);
    let suite = ProblemSuite::new(&s, specs(), 2, 3, None).unwrap();
    let settings = BenchSettings {
        sst: PlannerConfig { max_iterations: 1, ..Default::default() },
        ..quick_settings()
    };
    let report = run_benchmark(&[PlannerKind::Sst], &suite, &settings, None).unwrap();
    assert!(report.rows.iter().all(|r| !r.solved()));
    let dir = tempfile::tempdir().unwrap();
    export(&report, dir.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(AGGREGATES_FILE)).unwrap()).unwrap();
    for cell in json.as_array().unwrap() {
        assert_eq!(cell["success_rate"], 0.0);
        assert!(cell.get("solved_time_mean").is_none());
        assert!(cell.get("solved_cost_mean").is_none());
    }
    assert!(quantile_rows(&report.rows).is_empty());
}

#[test]
fn missing_checkpoint_skips_neural_planners() {
    let s = SystemModel::builtin(SystemKind::Car);
    let suite = ProblemSuite::new(&s, specs(), 2, 3, Some(3.0)).unwrap();
    let r = run_benchmark(&[PlannerKind::MpTree, PlannerKind::Sst], &suite, &quick_settings(), None).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.rows.iter().all(|x| x.planner == "sst"));
}

#[test]
fn parallel_rows_match_sequential_outcomes() {
    let s = SystemModel::builtin(SystemKind::Car);
    let suite = ProblemSuite::new(&s, specs(), 4, 11, Some(3.0)).unwrap();
    let seq = run_benchmark(&[PlannerKind::Sst], &suite, &quick_settings(), None).unwrap();
    let par = run_benchmark(&[PlannerKind::Sst], &suite, &BenchSettings { workers: 3, ..quick_settings() }, None).unwrap();
    assert!(par.rows.iter().all(|r| r.contended));
    let unmark = |rows: &[Row]| strip_time(rows).into_iter().map(|r| Row { contended: false, ..r }).collect::<Vec<_>>();
    assert_eq!(unmark(&seq.rows), unmark(&par.rows));
}

#[test]
fn ablation_variants_share_problems_and_differ_in_calls() {
    let s = SystemModel::builtin(SystemKind::Car);
    let suite = ProblemSuite::new(&s, specs(), 3, 21, Some(3.0)).unwrap();
    let b = bundle(&s);
    let cfg = PlannerConfig { max_iterations: 10, batch_size: 6, ..Default::default() };
    let rep = run_ablation(&suite, &cfg, &b, 1).unwrap();
    assert_eq!(rep.pairs.len(), 3);
    for (p, prob) in rep.pairs.iter().zip(&suite.problems) {
        assert_eq!((p.problem, p.seed, &p.start, &p.goal), (prob.index, prob.seed, &prob.start, &prob.goal));
        assert_eq!(p.without.seed, p.with.seed);
        assert_eq!(p.without.generator_calls, p.without.iterations);
        assert_eq!(p.with.generator_calls, 6 * p.with.iterations);
    }
    assert_eq!(rep.summary, summarize_ablation(&rep.pairs));
    let no_disc = ModelBundle { discriminator: None, ..b };
    assert!(run_ablation(&suite, &cfg, &no_disc, 1).is_err());
}

#[test]
fn bench_config_parses_from_toml() {
    let text = r#"
system = "car"
planners = ["mp-tree", "sst"]
problems = 3
base_seed = 40
max_pair_distance = 5.0

[[scenes]]
seed = 1
unseen = false
empty = true

[settings.sst]
max_iterations = 200
"#;
    let c = BenchConfig::from_toml(text).unwrap();
    assert_eq!(c.planners, vec![PlannerKind::MpTree, PlannerKind::Sst]);
    assert_eq!(c.settings.sst.max_iterations, 200);
    assert_eq!(c.settings.mp_tree, PlannerConfig::for_planner(PlannerKind::MpTree));
    let suite = c.suite(&SystemModel::builtin(SystemKind::Car)).unwrap();
    assert_eq!(suite.problems.len(), 3);
    assert!(BenchConfig::from_toml("system = 1").is_err());
}
