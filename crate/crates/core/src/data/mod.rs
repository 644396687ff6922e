//! Demonstration generation with SST, dataset assembly with cost-to-go
//! labels and negative augmentation, splits and on-disk layout.
//!
//! A data directory looks like
//!
//! ```text
//! manifest.json
//! scenes/scene_<seed>.json     obstacle scene
//! voxels/scene_<seed>.kpvx     voxel grid (binary)
//! demos/scene_<seed>.json      demonstrations for the scene
//! train.json, test.json        dataset samples
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environments::{generate_scene, voxelize, Environment, VoxelGrid};
use crate::error::{KinoError, Result};
use crate::neuro::DatasetSample;
use crate::planners::{sst_plan, PlannerConfig, SstConfig};
use crate::steering::batch_rng;
use crate::systems::{State, SystemKind, SystemModel, Trajectory};


pub const MANIFEST_VERSION: u32 = 1;

/// Attempts at drawing a collision-free state before giving up.
const SAMPLE_ATTEMPTS: usize = 10_000;

/// An SST solution between two collision-free states of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub system: String,
    pub scene_seed: u64,
    pub x_init: State,
    pub x_goal: State,
    pub trajectory: Trajectory,
}

impl Demonstration {
    /// Waypoints `x_0..=x_T`.
    pub fn waypoints(&self) -> Vec<State> {
        self.trajectory.waypoints().cloned().collect()
    }

    /// Step durations `d_1..=d_T`.
    pub fn durations(&self) -> Vec<f64> {
        self.trajectory.steps.iter().map(|s| s.duration).collect()
    }

    pub fn cost(&self) -> f64 {
        self.trajectory.total_duration()
    }
}

/// Scene plus its voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub env: Environment,
    pub grid: VoxelGrid,
}

impl SceneData {
    pub fn seed(&self) -> u64 {
        self.env.seed
    }
}

/// Voxelizes with a stream derived from the scene seed, so a scene seed
/// alone determines its grid.
pub fn scene_grid(env: &Environment) -> VoxelGrid {
    voxelize(env, &mut ChaCha8Rng::seed_from_u64(env.seed))
}

pub fn make_scene(system: SystemKind, seed: u64) -> Result<SceneData> {
    let env = generate_scene(system, seed)?;
    let grid = scene_grid(&env);
    Ok(SceneData { env, grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub sst: Option<SstConfig>,
    pub max_iterations: usize,
    pub time_budget_secs: f64,
    /// Upper bound on the metric distance between start and goal. `None`
    /// samples goals uniformly over the whole state space.
    pub max_pair_distance: Option<f64>,
    /// SST runs per pair, each with a fresh seed, until one solves it.
    pub attempts: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            sst: None,
            max_iterations: 100_000,
            time_budget_secs: 60.0,
            max_pair_distance: None,
            attempts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub demos: Vec<Demonstration>,
    pub requested: usize,
    /// Pairs whose SST run did not reach the goal.
    pub failed: usize,
}

fn sample_free<R: Rng + ?Sized>(system: &SystemModel, env: &Environment, rng: &mut R) -> Result<State> {
    for _ in 0..SAMPLE_ATTEMPTS {
        let x = system.sample_state(rng);
        if env.collision_free(system, &x) {
            return Ok(x);
        }
    }
    Err(KinoError::InvalidConfig(format!(
        "no collision-free state found in {SAMPLE_ATTEMPTS} draws"
    )))
}

/// Draws a start and goal, both collision-free and farther apart than the
/// goal radius.
pub fn sample_pair<R: Rng + ?Sized>(
    system: &SystemModel,
    env: &Environment,
    max_distance: Option<f64>,
    rng: &mut R,
) -> Result<(State, State)> {
    let a = sample_free(system, env, rng)?;
    for _ in 0..SAMPLE_ATTEMPTS {
        let b = sample_free(system, env, rng)?;
        let d = system.distance(&a, &b);
        if d > system.goal_radius && max_distance.is_none_or(|m| d <= m) {
            return Ok((a, b));
        }
    }
    Err(KinoError::InvalidConfig("no goal within the pair distance limit".into()))
}

/// Solves `n_pairs` random problems with SST and keeps the solved ones.
/// Pair `i` draws from its own stream, so results do not depend on the
/// worker count.
pub fn generate_demonstrations(
    system: &SystemModel,
    scene: &SceneData,
    n_pairs: usize,
    cfg: &DemoConfig,
    seed: u64,
) -> Result<DemoReport> {
    if n_pairs == 0 {
        return Err(KinoError::InvalidConfig("n_pairs must be at least 1".into()));
    }
    let sst = cfg.sst.clone().unwrap_or_else(|| SstConfig::for_system(system.kind));
    let results: Vec<Result<Option<Demonstration>>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = batch_rng(seed, i);
            let (a, b) = sample_pair(system, &scene.env, cfg.max_pair_distance, &mut rng)?;
            for _ in 0..cfg.attempts.max(1) {
                let pc = PlannerConfig {
                    max_iterations: cfg.max_iterations,
                    time_budget_secs: cfg.time_budget_secs,
                    seed: rng.random(),
                    ..Default::default()
                };
                let r = sst_plan(system, &scene.env, &a, &b, &pc, &sst)?;
                if let (true, Some(trajectory)) = (r.solved(), r.trajectory) {
                    return Ok(Some(Demonstration {
                        system: system.name().to_string(),
                        scene_seed: scene.seed(),
                        x_init: a,
                        x_goal: b,
                        trajectory,
                    }));
                }
            }
            Ok(None)
        })
        .collect();
    let mut demos = Vec::new();
    for r in results {
        demos.extend(r?);
    }
    Ok(DemoReport {
        failed: n_pairs - demos.len(),
        requested: n_pairs,
        demos,
    })
}

/// Remaining duration from each waypoint: `ctg[j] = Σ_{k ≥ j} d[k]`.
pub fn suffix_sums(durations: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; durations.len()];
    let mut acc = 0.0;
    for (o, d) in out.iter_mut().zip(durations).rev() {
        acc += d;
        *o = acc;
    }
    out
}

/// One sample per step of `demo`.
pub fn positives(demo: &Demonstration, scene: usize, demo_id: usize) -> Vec<DatasetSample> {
    let w = demo.waypoints();
    let ctg = suffix_sums(&demo.durations());
    ctg.iter()
        .enumerate()
        .map(|(j, &c)| DatasetSample {
            scene,
            demo_id,
            x_t: w[j].clone(),
            x_goal: demo.x_goal.clone(),
            x_next: w[j + 1].clone(),
            cost_to_go: c,
            valid: true,
        })
        .collect()
}

/// Penalty label for negatives: twice the largest demonstration cost.
pub fn penalty(demos: &[Vec<Demonstration>]) -> f64 {
    2.0 * demos.iter().flatten().map(Demonstration::cost).fold(0.0, f64::max)
}

/// Positives for every demonstration followed by as many negatives.
///
/// `demos[k]` belongs to `scenes[k]`; demonstration ids run in that order.
/// A negative is an in-collision state of its scene (when the scene has
/// obstacles, chosen with probability 1/2) or a transition whose target is
/// a waypoint of a different demonstration. Both carry [`penalty`].
pub fn build_samples(
    system: &SystemModel,
    scenes: &[SceneData],
    demos: &[Vec<Demonstration>],
    seed: u64,
) -> Result<Vec<DatasetSample>> {
    if demos.len() != scenes.len() {
        return Err(KinoError::DimensionMismatch {
            what: "demonstration groups",
            expected: scenes.len(),
            got: demos.len(),
        });
    }
    let flat: Vec<(usize, &Demonstration)> = demos
        .iter()
        .enumerate()
        .flat_map(|(k, ds)| ds.iter().map(move |d| (k, d)))
        .collect();
    if flat.is_empty() {
        return Err(KinoError::EmptyDataset);
    }
    if flat.iter().any(|(_, d)| d.trajectory.is_empty()) {
        return Err(KinoError::Format {
            what: "demonstration",
            reason: "trajectory has no steps".into(),
        });
    }
    let mut samples = Vec::new();
    for (id, (k, d)) in flat.iter().enumerate() {
        samples.extend(positives(d, *k, id));
    }
    let p = penalty(demos);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = samples.len();
    let mut negatives = Vec::with_capacity(n_pos);
    for _ in 0..n_pos {
        let id = rng.random_range(0..flat.len());
        let (k, d) = flat[id];
        let env = &scenes[k].env;
        let w = d.waypoints();
        let x_t = w[rng.random_range(0..w.len() - 1)].clone();
        let collide = !env.obstacles.is_empty() && rng.random_bool(0.5);
        let neg = if collide {
            colliding_state(system, env, &mut rng).map(|x| (x.clone(), x))
        } else {
            None
        };
        let (x_t, x_next) = match neg {
            Some(pair) => pair,
            None if flat.len() > 1 => {
                let other = (id + rng.random_range(1..flat.len())) % flat.len();
                let ow = flat[other].1.waypoints();
                (x_t, ow[rng.random_range(0..ow.len())].clone())
            }
            None => continue,
        };
        negatives.push(DatasetSample {
            scene: k,
            demo_id: id,
            x_t,
            x_goal: d.x_goal.clone(),
            x_next,
            cost_to_go: p,
            valid: false,
        });
    }
    samples.extend(negatives);
    Ok(samples)
}

fn colliding_state<R: Rng + ?Sized>(system: &SystemModel, env: &Environment, rng: &mut R) -> Option<State> {
    (0..SAMPLE_ATTEMPTS)
        .map(|_| system.sample_state(rng))
        .find(|x| !env.collision_free(system, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub seed: u64,
    pub unseen: bool,
    pub demos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub system: String,
    /// Seen scenes first, then unseen ones.
    pub scenes: Vec<SceneEntry>,
    /// Demonstration ids assigned to the test split.
    pub test_demos: Vec<usize>,
    /// Fraction of seen-scene samples held out for testing.
    pub test_fraction: f64,
    /// True when counts are reduced from the full-scale protocol.
    pub desk_scale: bool,
}

impl DatasetManifest {
    pub fn new(system: &str, scenes: Vec<SceneEntry>, desk_scale: bool) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            system: system.to_string(),
            scenes,
            test_demos: Vec::new(),
            test_fraction: 0.15,
            desk_scale,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(KinoError::Format {
                what: "manifest",
                reason: format!("version {} (expected {MANIFEST_VERSION})", m.version),
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<DatasetSample>,
    pub test: Vec<DatasetSample>,
    pub test_demos: Vec<usize>,
}

/// Splits by demonstration. Unseen-scene demonstrations all go to test;
/// seen-scene demonstrations are shuffled and moved to test until the
/// held-out share of seen-scene samples reaches `manifest.test_fraction`.
pub fn split(samples: &[DatasetSample], manifest: &DatasetManifest, seed: u64) -> Result<Split> {
    let n_demos = samples.iter().map(|s| s.demo_id + 1).max().unwrap_or(0);
    let mut count = vec![0usize; n_demos];
    let mut scene_of = vec![usize::MAX; n_demos];
    for s in samples {
        if s.scene >= manifest.scenes.len() {
            return Err(KinoError::Format {
                what: "dataset",
                reason: format!("sample references scene {} outside the manifest", s.scene),
            });
        }
        count[s.demo_id] += 1;
        scene_of[s.demo_id] = s.scene;
    }
    let present: Vec<usize> = (0..n_demos).filter(|&d| count[d] > 0).collect();
    let (mut seen, unseen): (Vec<usize>, Vec<usize>) =
        present.into_iter().partition(|&d| !manifest.scenes[scene_of[d]].unseen);
    let seen_total: usize = seen.iter().map(|&d| count[d]).sum();
    seen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_demos = unseen;
    let mut held = 0usize;
    for &d in &seen {
        if (held as f64) >= manifest.test_fraction * seen_total as f64 {
            break;
        }
        held += count[d];
        test_demos.push(d);
    }
    test_demos.sort_unstable();
    let mut is_test = vec![false; n_demos];
    for &d in &test_demos {
        is_test[d] = true;
    }
    let (test, train) = samples.iter().cloned().partition(|s| is_test[s.demo_id]);
    Ok(Split { train, test, test_demos })
}

/// Paths of a data directory.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn scene(&self, seed: u64) -> PathBuf {
        self.root.join("scenes").join(format!("scene_{seed}.json"))
    }

    pub fn voxels(&self, seed: u64) -> PathBuf {
        self.root.join("voxels").join(format!("scene_{seed}.kpvx"))
    }

    pub fn demos(&self, seed: u64) -> PathBuf {
        self.root.join("demos").join(format!("scene_{seed}.json"))
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train.json")
    }

    pub fn test(&self) -> PathBuf {
        self.root.join("test.json")
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["scenes", "voxels", "demos"] {
            let p = self.root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| KinoError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn save_scene(&self, scene: &SceneData) -> Result<()> {
        scene.env.save(&self.scene(scene.seed()))?;
        scene.grid.save(&self.voxels(scene.seed()))
    }

    pub fn load_scene(&self, seed: u64) -> Result<SceneData> {
        Ok(SceneData {
            env: Environment::load(&self.scene(seed))?,
            grid: VoxelGrid::load(&self.voxels(seed))?,
        })
    }

    pub fn save_demos(&self, seed: u64, demos: &[Demonstration]) -> Result<()> {
        write_json(&self.demos(seed), &demos)
    }

    pub fn load_demos(&self, seed: u64) -> Result<Vec<Demonstration>> {
        read_json(&self.demos(seed))
    }

    /// Scenes listed in the manifest, in manifest order.
    pub fn load_scenes(&self, manifest: &DatasetManifest) -> Result<Vec<SceneData>> {
        manifest.scenes.iter().map(|s| self.load_scene(s.seed)).collect()
    }

    /// Seeds whose stored grid differs from a fresh voxelization.
    pub fn voxel_mismatches(&self, manifest: &DatasetManifest) -> Result<Vec<u64>> {
        let system = SystemKind::from_name(&manifest.system)?;
        let mut bad = Vec::new();
        for s in &manifest.scenes {
            let scene = self.load_scene(s.seed)?;
            let fresh = make_scene(system, s.seed)?;
            if fresh.env != scene.env || fresh.grid != scene.grid {
                bad.push(s.seed);
            }
        }
        Ok(bad)
    }
}

pub fn save_samples(path: &Path, samples: &[DatasetSample]) -> Result<()> {
    write_json(path, &samples)
}

pub fn load_samples(path: &Path) -> Result<Vec<DatasetSample>> {
    read_json(path)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| KinoError::io(dir, e))?;
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| KinoError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
