//! Benchmark harness: problem suites, planner comparison, the discriminator
//! ablation, summary statistics and exports.

mod stats;

pub use stats::{mean, quantiles, sign_test_p, std_dev, Quantiles};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_scene, sample_pair, scene_grid, SceneData};
use crate::environments::{workspace_for, Environment};
use crate::error::{KinoError, Result};
use crate::neuro::{ModelBundle, NeuralSampler};
use crate::planners::{
    mpnet_path_plan, mpnet_tree_plan, sst_plan, staged_explore, PlanResult, PlanStatus, PlannerConfig, PlannerKind,
    SstConfig,
};
use crate::systems::{State, SystemKind, SystemModel};

#[cfg(test)]
mod tests;

/// One scene of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub unseen: bool,
    /// Use the obstacle-free workspace instead of a generated scene.
    #[serde(default)]
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub index: usize,
    pub scene: usize,
    pub start: State,
    pub goal: State,
    pub seed: u64,
}

/// Scenes plus start/goal pairs. Problem `i` lives in scene `i mod n` and
/// draws its pair and planner seed from `base_seed + i`, so growing a suite
/// keeps earlier problems unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSuite {
    pub system: SystemModel,
    pub specs: Vec<SceneSpec>,
    pub scenes: Vec<SceneData>,
    pub problems: Vec<Problem>,
}

impl ProblemSuite {
    pub fn new(
        system: &SystemModel,
        specs: Vec<SceneSpec>,
        n_problems: usize,
        base_seed: u64,
        max_pair_distance: Option<f64>,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(KinoError::InvalidConfig("suite needs at least one scene".into()));
        }
        let scenes = specs.iter().map(|s| load_scene_spec(system.kind, s)).collect::<Result<Vec<_>>>()?;
        let mut problems = Vec::with_capacity(n_problems);
        for index in 0..n_problems {
            let scene = index % scenes.len();
            let seed = base_seed.wrapping_add(index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (start, goal) = sample_pair(system, &scenes[scene].env, max_pair_distance, &mut rng)?;
            problems.push(Problem { index, scene, start, goal, seed });
        }
        Ok(ProblemSuite {
            system: system.clone(),
            specs,
            scenes,
            problems,
        })
    }

    pub fn unseen(&self, p: &Problem) -> bool {
        self.specs[p.scene].unseen
    }

    pub fn env(&self, p: &Problem) -> &Environment {
        &self.scenes[p.scene].env
    }
}

fn load_scene_spec(system: SystemKind, spec: &SceneSpec) -> Result<SceneData> {
    if spec.empty {
        let env = Environment::new(system, workspace_for(system), Vec::new(), spec.seed)?;
        let grid = scene_grid(&env);
        Ok(SceneData { env, grid })
    } else {
        make_scene(system, spec.seed)
    }
}

/// Planner settings used by a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub mp_path: PlannerConfig,
    pub mp_tree: PlannerConfig,
    pub sst: PlannerConfig,
    pub sst_params: Option<SstConfig>,
    /// Run neural planners through the staged schedule.
    pub staged: bool,
    /// Problems solved concurrently; above 1, timings are marked contended.
    pub workers: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            mp_path: PlannerConfig::for_planner(PlannerKind::MpPath),
            mp_tree: PlannerConfig::for_planner(PlannerKind::MpTree),
            sst: PlannerConfig {
                max_iterations: 50_000,
                ..PlannerConfig::for_planner(PlannerKind::Sst)
            },
            sst_params: None,
            staged: false,
            workers: 1,
        }
    }
}

impl BenchSettings {
    pub fn config(&self, kind: PlannerKind) -> &PlannerConfig {
        match kind {
            PlannerKind::MpPath => &self.mp_path,
            PlannerKind::MpTree => &self.mp_tree,
            PlannerKind::Sst => &self.sst,
        }
    }
}

/// Benchmark description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub system: String,
    #[serde(default = "all_planners")]
    pub planners: Vec<PlannerKind>,
    pub problems: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub max_pair_distance: Option<f64>,
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub settings: BenchSettings,
}

fn all_planners() -> Vec<PlannerKind> {
    vec![PlannerKind::MpPath, PlannerKind::MpTree, PlannerKind::Sst]
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn suite(&self, system: &SystemModel) -> Result<ProblemSuite> {
        ProblemSuite::new(system, self.scenes.clone(), self.problems, self.base_seed, self.max_pair_distance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub planner: String,
    pub system: String,
    pub scene_class: String,
    pub problem: usize,
    pub seed: u64,
    pub status: PlanStatus,
    /// Seconds, including the scene encoding for neural planners.
    pub time: f64,
    pub cost: Option<f64>,
    pub iterations: usize,
    pub tree_size: usize,
    pub generator_calls: usize,
    pub contended: bool,
}

impl Row {
    pub fn solved(&self) -> bool {
        self.status == PlanStatus::Solved
    }
}

/// Statistics of one (planner, system, scene class) cell. Time and cost
/// statistics cover solved problems only and are absent when none solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub planner: String,
    pub system: String,
    pub scene_class: String,
    pub problems: usize,
    pub solved: usize,
    pub success_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solved_time_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solved_time_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solved_cost_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solved_cost_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub warnings: Vec<String>,
}

/// Scene classes reported per cell.
pub const SCENE_CLASSES: [&str; 3] = ["seen", "unseen", "pooled"];

fn class_of(unseen: bool) -> &'static str {
    if unseen {
        "unseen"
    } else {
        "seen"
    }
}

/// Aggregates over `rows` for every (planner, system, class) present.
pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut cells: BTreeMap<(String, String), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.planner.clone(), r.system.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((planner, system), rs) in cells {
        for class in SCENE_CLASSES {
            let sel: Vec<&Row> = rs.iter().copied().filter(|r| class == "pooled" || r.scene_class == class).collect();
            if sel.is_empty() {
                continue;
            }
            out.push(cell(&planner, &system, class, &sel));
        }
    }
    out
}

fn cell(planner: &str, system: &str, class: &str, rows: &[&Row]) -> Aggregate {
    let solved: Vec<&Row> = rows.iter().copied().filter(|r| r.solved()).collect();
    let times: Vec<f64> = solved.iter().map(|r| r.time).collect();
    let costs: Vec<f64> = solved.iter().filter_map(|r| r.cost).collect();
    Aggregate {
        planner: planner.to_string(),
        system: system.to_string(),
        scene_class: class.to_string(),
        problems: rows.len(),
        solved: solved.len(),
        success_rate: solved.len() as f64 / rows.len() as f64,
        solved_time_mean: mean(&times),
        solved_time_std: std_dev(&times),
        solved_cost_mean: mean(&costs),
        solved_cost_std: std_dev(&costs),
    }
}

/// Runs one planner on one problem, timing the encoder pass with it.
pub fn solve(
    kind: PlannerKind,
    suite: &ProblemSuite,
    problem: &Problem,
    cfg: &PlannerConfig,
    sst: &SstConfig,
    staged: bool,
    bundle: Option<&ModelBundle>,
) -> Result<(PlanResult, f64)> {
    let cfg = PlannerConfig { seed: problem.seed, ..cfg.clone() };
    let env = suite.env(problem);
    let system = &suite.system;
    let t0 = Instant::now();
    let sampler = match (kind, bundle) {
        (PlannerKind::Sst, _) => None,
        (_, Some(b)) => Some(NeuralSampler::new(b, &suite.scenes[problem.scene].grid)?),
        (_, None) => return Err(KinoError::InvalidConfig(format!("{} requires trained models", kind.name()))),
    };
    let encode = t0.elapsed().as_secs_f64();
    let (s, g) = (&problem.start, &problem.goal);
    let r = match (kind, sampler.as_ref()) {
        (PlannerKind::Sst, _) => sst_plan(system, env, s, g, &cfg, sst)?,
        (k, Some(sm)) if staged => staged_explore(k, system, env, Some(sm), s, g, &cfg, sst)?,
        (PlannerKind::MpPath, Some(sm)) => mpnet_path_plan(system, env, sm, s, g, &cfg)?,
        (PlannerKind::MpTree, Some(sm)) => mpnet_tree_plan(system, env, sm, s, g, &cfg)?,
        _ => unreachable!("neural planners always have a sampler here"),
    };
    let time = encode + r.wall_time;
    Ok((r, time))
}

fn row_of(kind: PlannerKind, suite: &ProblemSuite, p: &Problem, r: &PlanResult, time: f64, contended: bool) -> Row {
    Row {
        planner: kind.name().to_string(),
        system: suite.system.name().to_string(),
        scene_class: class_of(suite.unseen(p)).to_string(),
        problem: p.index,
        seed: p.seed,
        status: r.status,
        time,
        cost: r.cost,
        iterations: r.iterations,
        tree_size: r.tree_size,
        generator_calls: r.stats.generator_calls,
        contended,
    }
}

fn run_problems<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| KinoError::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Every planner on every problem of the suite, planner by planner.
/// Neural planners are skipped with a warning when `bundle` is missing.
pub fn run_benchmark(
    planners: &[PlannerKind],
    suite: &ProblemSuite,
    settings: &BenchSettings,
    bundle: Option<&ModelBundle>,
) -> Result<BenchmarkReport> {
    let sst = settings
        .sst_params
        .clone()
        .unwrap_or_else(|| SstConfig::for_system(suite.system.kind));
    let contended = settings.workers > 1;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &kind in planners {
        if kind != PlannerKind::Sst && bundle.is_none() {
            warnings.push(format!("skipped {}: no checkpoint", kind.name()));
            continue;
        }
        let cfg = settings.config(kind);
        let results = run_problems(settings.workers, suite.problems.len(), |i| {
            let p = &suite.problems[i];
            let (r, t) = solve(kind, suite, p, cfg, &sst, settings.staged, bundle)?;
            Ok(row_of(kind, suite, p, &r, t, contended))
        })?;
        rows.extend(results);
    }
    Ok(BenchmarkReport {
        aggregates: aggregate(&rows),
        rows,
        warnings,
    })
}

/// The path planner with a single generated waypoint (`without`) and with
/// discriminator selection among `batch_size` waypoints (`with`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub problem: usize,
    pub scene: usize,
    pub seed: u64,
    pub start: State,
    pub goal: State,
    pub without: Row,
    pub with: Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub pairs: usize,
    /// Pairs solved by both variants; time and cost statistics use these.
    pub both_solved: usize,
    pub success_without: f64,
    pub success_with: f64,
    pub mean_time_without: Option<f64>,
    pub mean_time_with: Option<f64>,
    pub mean_cost_without: Option<f64>,
    pub mean_cost_with: Option<f64>,
    /// One-sided sign-test p-value for "with is faster".
    pub time_sign_p: f64,
    /// One-sided sign-test p-value for "with is cheaper".
    pub cost_sign_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub pairs: Vec<AblationPair>,
    pub summary: AblationSummary,
}

pub fn run_ablation(
    suite: &ProblemSuite,
    cfg: &PlannerConfig,
    bundle: &ModelBundle,
    workers: usize,
) -> Result<AblationReport> {
    if bundle.discriminator.is_none() {
        return Err(KinoError::InvalidConfig("ablation needs a discriminator checkpoint".into()));
    }
    let sst = SstConfig::for_system(suite.system.kind);
    let contended = workers > 1;
    let without_cfg = PlannerConfig { use_discriminator: false, ..cfg.clone() };
    let with_cfg = PlannerConfig { use_discriminator: true, ..cfg.clone() };
    let pairs = run_problems(workers, suite.problems.len(), |i| {
        let p = &suite.problems[i];
        let kind = PlannerKind::MpPath;
        let (ra, ta) = solve(kind, suite, p, &without_cfg, &sst, false, Some(bundle))?;
        let (rb, tb) = solve(kind, suite, p, &with_cfg, &sst, false, Some(bundle))?;
        Ok(AblationPair {
            problem: p.index,
            scene: p.scene,
            seed: p.seed,
            start: p.start.clone(),
            goal: p.goal.clone(),
            without: row_of(kind, suite, p, &ra, ta, contended),
            with: row_of(kind, suite, p, &rb, tb, contended),
        })
    })?;
    Ok(AblationReport {
        summary: summarize_ablation(&pairs),
        pairs,
    })
}

pub fn summarize_ablation(pairs: &[AblationPair]) -> AblationSummary {
    let n = pairs.len().max(1) as f64;
    let both: Vec<&AblationPair> = pairs.iter().filter(|p| p.with.solved() && p.without.solved()).collect();
    let series = |f: &dyn Fn(&Row) -> f64| -> (Vec<f64>, Vec<f64>) {
        (both.iter().map(|p| f(&p.without)).collect(), both.iter().map(|p| f(&p.with)).collect())
    };
    let (ta, tb) = series(&|r| r.time);
    let (ca, cb) = series(&|r| r.cost.unwrap_or(f64::NAN));
    AblationSummary {
        pairs: pairs.len(),
        both_solved: both.len(),
        success_without: pairs.iter().filter(|p| p.without.solved()).count() as f64 / n,
        success_with: pairs.iter().filter(|p| p.with.solved()).count() as f64 / n,
        mean_time_without: mean(&ta),
        mean_time_with: mean(&tb),
        mean_cost_without: mean(&ca),
        mean_cost_with: mean(&cb),
        time_sign_p: sign_test_p(&tb, &ta),
        cost_sign_p: sign_test_p(&cb, &ca),
    }
}

/// Box-plot row for one cell and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub planner: String,
    pub system: String,
    pub scene_class: String,
    pub metric: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantiles of solved-problem time and cost for every cell.
pub fn quantile_rows(rows: &[Row]) -> Vec<QuantileRow> {
    let mut out = Vec::new();
    for a in aggregate(rows) {
        let sel: Vec<&Row> = rows
            .iter()
            .filter(|r| {
                r.planner == a.planner
                    && r.system == a.system
                    && (a.scene_class == "pooled" || r.scene_class == a.scene_class)
                    && r.solved()
            })
            .collect();
        let metrics: [(&str, Vec<f64>); 2] = [
            ("time", sel.iter().map(|r| r.time).collect()),
            ("cost", sel.iter().filter_map(|r| r.cost).collect()),
        ];
        for (metric, values) in metrics {
            if let Some(q) = quantiles(&values) {
                out.push(QuantileRow {
                    planner: a.planner.clone(),
                    system: a.system.clone(),
                    scene_class: a.scene_class.clone(),
                    metric: metric.to_string(),
                    n: values.len(),
                    min: q.min,
                    q1: q.q1,
                    median: q.median,
                    q3: q.q3,
                    max: q.max,
                });
            }
        }
    }
    out
}

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const QUANTILES_FILE: &str = "quantiles.csv";

/// Writes `rows.csv`, `aggregates.json` and `quantiles.csv` into `dir`.
pub fn export(report: &BenchmarkReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KinoError::io(dir, e))?;
    write_csv(&dir.join(ROWS_FILE), &report.rows)?;
    let agg = dir.join(AGGREGATES_FILE);
    std::fs::write(&agg, serde_json::to_string_pretty(&report.aggregates)?).map_err(|e| KinoError::io(&agg, e))?;
    write_csv(&dir.join(QUANTILES_FILE), &quantile_rows(&report.rows))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| KinoError::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(KinoError::from)).collect()
}

pub fn read_quantiles(path: &Path) -> Result<Vec<QuantileRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(KinoError::from)).collect()
}

impl BenchmarkReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| KinoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
