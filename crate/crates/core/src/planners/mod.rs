//! Tree planners: neural path and tree planners steered by CEM, the SST
//! baseline and the staged schedule combining them.

mod nn;
mod tree;
mod witness;

pub use nn::{NnIndex, NnMode, LINEAR_SCAN_LIMIT};
pub use tree::{reached, Node, SearchTree};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{KinoError, Result};
use crate::neuro::NeuralSampler;
use crate::steering::{batch_cem_steer, batch_random_shoot, cem_steer, random_shoot, CemParams, SteerResult};
use crate::systems::{State, SystemKind, SystemModel, Trajectory};
use witness::{Offer, Witnesses};

#[cfg(test)]
mod tests;

/// Which neural planner a staged run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    MpPath,
    MpTree,
    Sst,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::MpPath => "mp-path",
            PlannerKind::MpTree => "mp-tree",
            PlannerKind::Sst => "sst",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mp-path" => Ok(PlannerKind::MpPath),
            "mp-tree" => Ok(PlannerKind::MpTree),
            "sst" => Ok(PlannerKind::Sst),
            other => Err(KinoError::InvalidConfig(format!("unknown planner {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub max_iterations: usize,
    /// Waypoint candidates per iteration (path planner) or parallel
    /// extensions per iteration (tree planner).
    pub batch_size: usize,
    /// Overrides the system's goal radius.
    pub goal_radius: Option<f64>,
    /// Last iteration of the neural + CEM phase; defaults to 0.6·n.
    pub stage1: Option<usize>,
    /// Last iteration of the neural + shooting phase; defaults to 0.8·n.
    pub stage2: Option<usize>,
    pub time_budget_secs: f64,
    pub seed: u64,
    /// Steering parameters; defaults to the system's CEM defaults.
    pub cem: Option<CemParams>,
    /// CEM results farther than this multiple of the goal radius from the
    /// requested waypoint are rejected by the path planner.
    pub acceptance_factor: f64,
    /// Path planner only: rank `batch_size` candidates with the
    /// discriminator instead of drawing a single waypoint.
    pub use_discriminator: bool,
    /// Samples per random-shoot extension in the shooting phase.
    pub shoot_samples: usize,
    /// Apply witness pruning in the neural phases as well.
    pub prune_all_phases: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            max_iterations: 1000,
            batch_size: 32,
            goal_radius: None,
            stage1: None,
            stage2: None,
            time_budget_secs: 60.0,
            seed: 0,
            cem: None,
            acceptance_factor: 2.0,
            use_discriminator: true,
            shoot_samples: 8,
            prune_all_phases: false,
        }
    }
}

impl PlannerConfig {
    /// Defaults with the batch size for `kind`.
    pub fn for_planner(kind: PlannerKind) -> Self {
        PlannerConfig {
            batch_size: if kind == PlannerKind::MpTree { 16 } else { 32 },
            ..Default::default()
        }
    }

    /// Stage thresholds `(N_1, N_2)`.
    pub fn stages(&self) -> (usize, usize) {
        let n = self.max_iterations;
        let n1 = self.stage1.unwrap_or((0.6 * n as f64).round() as usize);
        let n2 = self.stage2.unwrap_or((0.8 * n as f64).round() as usize);
        (n1, n2)
    }

    pub fn validate(&self) -> Result<()> {
        let (n1, n2) = self.stages();
        if n1 > n2 || n2 > self.max_iterations {
            return Err(KinoError::InvalidConfig("stage thresholds must satisfy N_1 <= N_2 <= n".into()));
        }
        if self.batch_size == 0 {
            return Err(KinoError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SstConfig {
    /// δ_BN: radius for best-near selection.
    pub selection_radius: f64,
    /// δ_v: witness radius.
    pub witness_radius: f64,
    pub shoot_samples: usize,
    /// Probability of sampling the goal instead of a uniform state.
    pub goal_bias: f64,
    /// Check the witness invariant after every insertion (slow).
    pub audit: bool,
}

impl Default for SstConfig {
    fn default() -> Self {
        SstConfig::for_system(SystemKind::Car)
    }
}

impl SstConfig {
    pub fn for_system(kind: SystemKind) -> Self {
        let (selection_radius, witness_radius) = match kind {
            SystemKind::Acrobot => (1.0, 0.5),
            SystemKind::Cartpole => (2.0, 1.0),
            SystemKind::Car => (1.0, 0.3),
            SystemKind::Quadrotor => (1.0, 0.5),
            SystemKind::DoubleIntegrator => (0.2, 0.05),
        };
        SstConfig {
            selection_radius,
            witness_radius,
            shoot_samples: 1,
            goal_bias: 0.05,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.selection_radius > 0.0 && self.witness_radius > 0.0) {
            return Err(KinoError::InvalidConfig("SST radii must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Solved,
    Failed,
    Timeout,
}

/// Counters gathered during one planning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub generator_calls: usize,
    pub discriminator_calls: usize,
    pub steer_calls: usize,
    pub insertions: usize,
    pub pruned: usize,
    /// Witness-invariant violations seen when auditing is enabled.
    pub witness_violations: usize,
    /// Largest number of insertions in one iteration.
    pub max_insertions_per_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: PlanStatus,
    pub trajectory: Option<Trajectory>,
    /// Sum of segment durations of the solution.
    pub cost: Option<f64>,
    pub iterations: usize,
    pub wall_time: f64,
    pub tree_size: usize,
    pub stats: PlanStats,
}

impl PlanResult {
    pub fn solved(&self) -> bool {
        self.status == PlanStatus::Solved
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &PlanResult) -> bool {
        PlanResult {
            wall_time: 0.0,
            ..self.clone()
        } == PlanResult {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    NeuralCem,
    NeuralShoot,
    Sst,
}

struct Engine<'a> {
    system: &'a SystemModel,
    env: &'a Environment,
    goal: &'a State,
    radius: f64,
    cfg: &'a PlannerConfig,
    sst: &'a SstConfig,
    cem: CemParams,
    sampler: Option<&'a NeuralSampler<'a>>,
    tree: SearchTree,
    witnesses: Option<Witnesses>,
    rng: ChaCha8Rng,
    stats: PlanStats,
    found_goal: bool,
    current: usize,
}

impl<'a> Engine<'a> {
    fn random_active(&mut self) -> usize {
        let ids = self.tree.active_ids();
        ids[self.rng.random_range(0..ids.len())]
    }

    /// Inserts `traj` below `parent`, honoring witness pruning when active.
    fn insert(&mut self, parent: usize, traj: Trajectory, prune: bool) -> Option<usize> {
        if self.tree.node(parent).removed {
            return None;
        }
        let traj = stop_at_goal(self.system, traj, self.goal, self.radius);
        let cost = self.tree.node(parent).cost + traj.total_duration();
        let mut offer = None;
        if prune {
            if let Some(w) = self.witnesses.as_mut() {
                let nodes = &self.tree.nodes;
                match w.offer(&traj.terminal_state, cost, |i| nodes[i].cost) {
                    Offer::Reject => return None,
                    accept => offer = Some(accept),
                }
            }
        }
        let terminal_close = self.system.distance(&traj.terminal_state, self.goal) <= self.radius;
        let id = self.tree.add(parent, traj);
        self.stats.insertions += 1;
        if let Some(Offer::Accept { witness, displaced }) = offer {
            let w = self.witnesses.as_mut().expect("offer came from witnesses");
            w.assign(witness, id);
            if let Some(old) = displaced {
                self.tree.deactivate(old);
                self.stats.pruned += self.tree.prune_from(old);
            }
            if self.sst.audit {
                self.stats.witness_violations += self.witness_violations();
            }
        }
        self.found_goal |= terminal_close;
        Some(id)
    }

    fn witness_violations(&self) -> usize {
        let Some(w) = &self.witnesses else { return 0 };
        let nodes = &self.tree.nodes;
        w.violations(self.tree.active_ids(), |i| nodes[i].active, |i| nodes[i].cost)
    }

    /// Starts witness pruning, offering existing active nodes in id order.
    fn start_witnesses(&mut self) {
        let mut w = Witnesses::new(self.system, self.sst.witness_radius);
        let mut ids = self.tree.active_ids().to_vec();
        ids.sort_unstable();
        for id in ids {
            if !self.tree.node(id).active {
                continue;
            }
            let nodes = &self.tree.nodes;
            match w.offer(&nodes[id].state, nodes[id].cost, |i| nodes[i].cost) {
                Offer::Accept { witness, displaced } => {
                    w.assign(witness, id);
                    if let Some(old) = displaced {
                        self.tree.deactivate(old);
                        self.stats.pruned += self.tree.prune_from(old);
                    }
                }
                Offer::Reject => {
                    self.tree.deactivate(id);
                    self.stats.pruned += self.tree.prune_from(id);
                }
            }
        }
        self.witnesses = Some(w);
    }

    fn accepts(&self, r: &SteerResult, phase: Phase, check_radius: bool) -> bool {
        let close = !check_radius
            || phase != Phase::NeuralCem
            || r.terminal_distance <= self.cfg.acceptance_factor * self.radius;
        !r.in_collision && !r.trajectory.is_empty() && close
    }

    fn sampler(&self) -> &'a NeuralSampler<'a> {
        self.sampler.expect("neural phases require a sampler")
    }

    fn path_step(&mut self, phase: Phase) {
        let sampler = self.sampler();
        let cur = self.tree.node(self.current).state.clone();
        let k = if self.cfg.use_discriminator { self.cfg.batch_size } else { 1 };
        let starts = vec![cur.clone(); k];
        let mut candidates = sampler.generator.generate_batch(&sampler.z, &starts, self.goal, true, &mut self.rng);
        self.stats.generator_calls += k;
        let waypoint = match (self.cfg.use_discriminator, sampler.discriminator) {
            (true, Some(d)) => {
                self.stats.discriminator_calls += k;
                let i = d.select_min_cost(&sampler.z, &candidates, self.goal).expect("k >= 1");
                candidates.swap_remove(i)
            }
            _ => candidates.swap_remove(0),
        };
        self.stats.steer_calls += 1;
        let r = match phase {
            Phase::NeuralCem => cem_steer(self.system, self.env, &cur, &waypoint, &self.cem, &mut self.rng),
            _ => random_shoot(self.system, self.env, &cur, &waypoint, self.cfg.shoot_samples, &mut self.rng),
        };
        let inserted = if self.accepts(&r, phase, true) {
            self.insert(self.current, r.trajectory, self.cfg.prune_all_phases)
        } else {
            None
        };
        self.stats.max_insertions_per_iteration =
            self.stats.max_insertions_per_iteration.max(usize::from(inserted.is_some()));
        self.current = match inserted {
            Some(id) => id,
            None => self.random_active(),
        };
    }

    fn tree_step(&mut self, phase: Phase) {
        let sampler = self.sampler();
        let n = self.cfg.batch_size;
        let mut parents = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.system.sample_state(&mut self.rng);
            parents.push(self.tree.nearest_active(&x).expect("tree has an active node").0);
        }
        let starts: Vec<State> = parents.iter().map(|&p| self.tree.node(p).state.clone()).collect();
        let waypoints = sampler.generator.generate_batch(&sampler.z, &starts, self.goal, true, &mut self.rng);
        self.stats.generator_calls += n;
        self.stats.steer_calls += n;
        let seed: u64 = self.rng.random();
        let results = match phase {
            Phase::NeuralCem => batch_cem_steer(self.system, self.env, &starts, &waypoints, &self.cem, seed),
            _ => batch_random_shoot(self.system, self.env, &starts, &waypoints, self.cfg.shoot_samples, seed),
        }
        .expect("equal-length batch");
        let mut added = 0;
        for (parent, r) in parents.into_iter().zip(results) {
            if self.accepts(&r, phase, false)
                && self.insert(parent, r.trajectory, self.cfg.prune_all_phases).is_some()
            {
                added += 1;
            }
        }
        self.stats.max_insertions_per_iteration = self.stats.max_insertions_per_iteration.max(added);
    }

    fn sst_step(&mut self) {
        let target = if self.rng.random::<f64>() < self.sst.goal_bias {
            self.goal.clone()
        } else {
            self.system.sample_state(&mut self.rng)
        };
        let near = self.tree.active_within(&target, self.sst.selection_radius);
        let mut parent = None;
        for (id, _) in near {
            if parent.is_none_or(|p: usize| self.tree.node(id).cost < self.tree.node(p).cost) {
                parent = Some(id);
            }
        }
        let parent = match parent {
            Some(p) => p,
            None => self.tree.nearest_active(&target).expect("tree has an active node").0,
        };
        let start = self.tree.node(parent).state.clone();
        self.stats.steer_calls += 1;
        let r = random_shoot(self.system, self.env, &start, &target, self.sst.shoot_samples, &mut self.rng);
        let added = if !r.in_collision && !r.trajectory.is_empty() {
            self.insert(parent, r.trajectory, true).is_some()
        } else {
            false
        };
        self.stats.max_insertions_per_iteration =
            self.stats.max_insertions_per_iteration.max(usize::from(added));
    }
}

/// Cuts an edge at the first substep inside the goal region. Cut durations
/// are whole multiples of `dt` so replaying the edge lands on the same state.
fn stop_at_goal(system: &SystemModel, traj: Trajectory, goal: &State, radius: f64) -> Trajectory {
    for (i, step) in traj.steps.iter().enumerate() {
        let mut x = step.state.0.clone();
        let mut k = 0usize;
        let mut hit = false;
        system.integrate(&mut x, &step.control, step.duration, |s| {
            k += 1;
            hit = system.distance(s, goal) <= radius;
            !hit
        });
        if !hit {
            continue;
        }
        if i + 1 == traj.steps.len() && k == system.substep_count(step.duration) {
            return traj;
        }
        let mut steps = traj.steps;
        steps.truncate(i + 1);
        let last = steps.last_mut().expect("truncated to a non-empty prefix");
        if k < system.substep_count(last.duration) {
            last.duration = k as f64 * system.dt;
        }
        let terminal_state = system.propagate(&last.state, &last.control, last.duration);
        return Trajectory { steps, terminal_state };
    }
    traj
}

/// Runs the phase schedule: iterations `1..=n1` use `base` with CEM,
/// `n1+1..=n2` use `base` with random shooting, and later iterations run
/// SST extensions with witness pruning on the same tree.
#[allow(clippy::too_many_arguments)]
fn run(
    base: PlannerKind,
    system: &SystemModel,
    env: &Environment,
    sampler: Option<&NeuralSampler<'_>>,
    start: &State,
    goal: &State,
    cfg: &PlannerConfig,
    sst: &SstConfig,
    stages: (usize, usize),
) -> Result<PlanResult> {
    cfg.validate()?;
    sst.validate()?;
    let timer = Instant::now();
    let radius = cfg.goal_radius.unwrap_or(system.goal_radius);
    let (n1, n2) = if base == PlannerKind::Sst { (0, 0) } else { stages };
    if n2 > 0 && sampler.is_none() {
        return Err(KinoError::InvalidConfig(format!("{} requires trained models", base.name())));
    }
    let cem = cfg.cem.clone().unwrap_or_else(|| CemParams::for_system(system));
    let mut e = Engine {
        system,
        env,
        goal,
        radius,
        cfg,
        sst,
        cem,
        sampler,
        tree: SearchTree::new(system, start.clone()),
        witnesses: None,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        stats: PlanStats::default(),
        found_goal: system.distance(start, goal) <= radius,
        current: SearchTree::ROOT,
    };
    let finish = |e: &mut Engine, status: PlanStatus, iterations: usize| {
        let (trajectory, cost) = if status == PlanStatus::Solved {
            let node = reached(&mut e.tree, goal, radius).expect("goal node recorded");
            let t = e.tree.extract_path(node).expect("live node");
            let c = t.total_duration();
            (Some(t), Some(c))
        } else {
            (None, None)
        };
        PlanResult {
            status,
            trajectory,
            cost,
            iterations,
            wall_time: timer.elapsed().as_secs_f64(),
            tree_size: e.tree.len(),
            stats: std::mem::take(&mut e.stats),
        }
    };
    if !env.collision_free(system, start) {
        return Ok(finish(&mut e, PlanStatus::Failed, 0));
    }
    if e.found_goal {
        return Ok(finish(&mut e, PlanStatus::Solved, 0));
    }
    for it in 1..=cfg.max_iterations {
        if timer.elapsed().as_secs_f64() > cfg.time_budget_secs {
            return Ok(finish(&mut e, PlanStatus::Timeout, it - 1));
        }
        let phase = if it <= n1 {
            Phase::NeuralCem
        } else if it <= n2 {
            Phase::NeuralShoot
        } else {
            Phase::Sst
        };
        let wants_witnesses = phase == Phase::Sst || cfg.prune_all_phases;
        if wants_witnesses && e.witnesses.is_none() {
            e.start_witnesses();
            if e.tree.node(e.current).removed || !e.tree.node(e.current).active {
                e.current = SearchTree::ROOT;
            }
        }
        match (phase, base) {
            (Phase::Sst, _) | (_, PlannerKind::Sst) => e.sst_step(),
            (p, PlannerKind::MpPath) => e.path_step(p),
            (p, PlannerKind::MpTree) => e.tree_step(p),
        }
        if base == PlannerKind::MpPath && phase != Phase::Sst && e.path_current_invalid() {
            e.current = e.random_active();
        }
        if e.found_goal {
            return Ok(finish(&mut e, PlanStatus::Solved, it));
        }
    }
    Ok(finish(&mut e, PlanStatus::Failed, cfg.max_iterations))
}

impl Engine<'_> {
    fn path_current_invalid(&self) -> bool {
        let n = self.tree.node(self.current);
        n.removed || !n.active
    }
}

/// Neural path planner: one greedy chain toward the goal, restarting from a
/// random tree node whenever steering fails.
pub fn mpnet_path_plan(
    system: &SystemModel,
    env: &Environment,
    sampler: &NeuralSampler<'_>,
    start: &State,
    goal: &State,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let n = cfg.max_iterations;
    run(PlannerKind::MpPath, system, env, Some(sampler), start, goal, cfg, &SstConfig::for_system(system.kind), (n, n))
}

/// Neural tree planner: extends `batch_size` nearest nodes per iteration
/// with batched CEM steering.
pub fn mpnet_tree_plan(
    system: &SystemModel,
    env: &Environment,
    sampler: &NeuralSampler<'_>,
    start: &State,
    goal: &State,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let n = cfg.max_iterations;
    run(PlannerKind::MpTree, system, env, Some(sampler), start, goal, cfg, &SstConfig::for_system(system.kind), (n, n))
}

/// Stable sparse RRT.
pub fn sst_plan(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    goal: &State,
    cfg: &PlannerConfig,
    sst: &SstConfig,
) -> Result<PlanResult> {
    run(PlannerKind::Sst, system, env, None, start, goal, cfg, sst, (0, 0))
}

/// Neural planner followed by shooting and SST phases at the configured
/// stage thresholds.
#[allow(clippy::too_many_arguments)]
pub fn staged_explore(
    base: PlannerKind,
    system: &SystemModel,
    env: &Environment,
    sampler: Option<&NeuralSampler<'_>>,
    start: &State,
    goal: &State,
    cfg: &PlannerConfig,
    sst: &SstConfig,
) -> Result<PlanResult> {
    run(base, system, env, sampler, start, goal, cfg, sst, cfg.stages())
}
