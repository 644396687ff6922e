//! Local steering: cross-entropy MPC over control/duration sequences and
//! uniform random shooting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{KinoError, Result};
use crate::systems::{Bounds, Control, State, Step, SystemModel, Trajectory};


/// CEM hyperparameters and the initial per-segment sampling distribution.
///
/// Every segment starts from the same Gaussian over controls and durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemParams {
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Weight of the elite statistics in the smoothed refit.
    pub smoothing: f64,
    pub duration_bounds: Bounds,
    pub collision_weight: f64,
    pub converge_eps: f64,
    pub control_mean: Vec<f64>,
    pub control_std: Vec<f64>,
    pub duration_mean: f64,
    pub duration_std: f64,
}

impl CemParams {
    /// Defaults for a system: distributions centered in the control box with
    /// a standard deviation of half its width.
    pub fn for_system(system: &SystemModel) -> Self {
        let d = system.duration_bounds;
        CemParams {
            horizon: 3,
            population: 64,
            elites: 8,
            iterations: 20,
            smoothing: 0.7,
            duration_bounds: d,
            collision_weight: 100.0,
            converge_eps: system.goal_radius / 4.0,
            control_mean: system.control_bounds.iter().map(Bounds::mid).collect(),
            control_std: system.control_bounds.iter().map(|b| b.width() / 2.0).collect(),
            duration_mean: d.mid(),
            duration_std: d.width() / 2.0,
        }
    }

    pub fn validate(&self, system: &SystemModel) -> Result<()> {
        let bad = |m: &str| Err(KinoError::InvalidConfig(format!("cem: {m}")));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.elites == 0 || self.elites > self.population {
            return bad("elite count must be in 1..=population");
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1]");
        }
        if !(self.duration_bounds.lo > 0.0) || self.duration_bounds.hi < self.duration_bounds.lo {
            return bad("duration bounds must satisfy 0 < lo <= hi");
        }
        let m = system.control_dim();
        if self.control_mean.len() != m || self.control_std.len() != m {
            return Err(KinoError::DimensionMismatch {
                what: "cem control distribution",
                expected: m,
                got: self.control_mean.len().min(self.control_std.len()),
            });
        }
        if self.control_std.iter().any(|s| !(*s >= 0.0)) || !(self.duration_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        Ok(())
    }
}

/// Outcome of one steering call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    pub trajectory: Trajectory,
    pub terminal_distance: f64,
    pub in_collision: bool,
    pub iterations_used: usize,
    /// Lowest trajectory score seen while optimizing.
    pub best_score: f64,
}

/// Distance from the end of `traj` to `target` plus `w_c` times the fraction
/// of integration substeps in collision.
pub fn trajectory_score(
    system: &SystemModel,
    env: &Environment,
    traj: &Trajectory,
    target: &State,
    w_c: f64,
) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for step in &traj.steps {
        let mut x = step.state.0.clone();
        total += system.integrate(&mut x, &step.control, step.duration, |s| {
            hits += usize::from(!env.collision_free(system, s));
            true
        });
    }
    score_terms(system, &traj.terminal_state, target, hits, total, w_c)
}

fn score_terms(
    system: &SystemModel,
    terminal: &[f64],
    target: &[f64],
    hits: usize,
    total: usize,
    w_c: f64,
) -> f64 {
    let frac = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    system.distance(terminal, target) + w_c * frac
}

/// A sampled control sequence: `controls` is row-major `horizon × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub controls: Vec<f64>,
    pub durations: Vec<f64>,
}

impl Candidate {
    fn control(&self, seg: usize, m: usize) -> &[f64] {
        &self.controls[seg * m..(seg + 1) * m]
    }
}

/// Snapshot handed to a CEM observer after each iteration.
#[derive(Debug)]
pub struct CemIteration<'a> {
    pub iteration: usize,
    pub population: &'a [Candidate],
    pub scores: &'a [f64],
    pub best_score: f64,
    pub control_mean: &'a [f64],
    pub control_std: &'a [f64],
    pub duration_mean: &'a [f64],
    pub duration_std: &'a [f64],
}

fn rollout_score(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    cand: &Candidate,
    target: &State,
    w_c: f64,
) -> f64 {
    let m = system.control_dim();
    let mut x = start.0.clone();
    let mut total = 0usize;
    let mut hits = 0usize;
    for (seg, &tau) in cand.durations.iter().enumerate() {
        total += system.integrate(&mut x, cand.control(seg, m), tau, |s| {
            hits += usize::from(!env.collision_free(system, s));
            true
        });
    }
    score_terms(system, &x, target, hits, total, w_c)
}

/// Replays `cand` and cuts it at the collision-free substep closest to the
/// target. Cut points fall on whole integration steps so the truncated
/// segments replay exactly.
fn truncated_prefix(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    cand: &Candidate,
    target: &State,
) -> (Trajectory, bool) {
    if !env.collision_free(system, start) {
        return (Trajectory::empty(start.clone()), true);
    }
    let m = system.control_dim();
    // (segment, substeps into it); (0, 0) is the start itself.
    let mut best = (0usize, 0usize);
    let mut best_d = system.distance(start, target);
    let mut x = start.0.clone();
    'segments: for (seg, &tau) in cand.durations.iter().enumerate() {
        let mut k = 0usize;
        let mut blocked = false;
        system.integrate(&mut x, cand.control(seg, m), tau, |s| {
            k += 1;
            if !env.collision_free(system, s) {
                blocked = true;
                return false;
            }
            let d = system.distance(s, target);
            if d < best_d {
                best_d = d;
                best = (seg, k);
            }
            true
        });
        if blocked {
            break 'segments;
        }
    }

    let (last_seg, k) = best;
    let mut steps = Vec::new();
    let mut x = start.clone();
    for seg in 0..=last_seg {
        if seg == last_seg && k == 0 {
            break;
        }
        let tau = cand.durations[seg];
        let duration = if seg < last_seg || k == system.substep_count(tau) {
            tau
        } else {
            k as f64 * system.dt
        };
        let u = Control(cand.control(seg, m).to_vec());
        let next = system.propagate(&x, &u, duration);
        steps.push(Step {
            state: x,
            control: u,
            duration,
        });
        x = next;
    }
    (
        Trajectory {
            steps,
            terminal_state: x,
        },
        false,
    )
}

fn clipped_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, b: Bounds) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    b.clamp(mean + std * z)
}

/// CEM model-predictive steering from `start` toward `target`.
pub fn cem_steer<R: Rng + ?Sized>(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    target: &State,
    params: &CemParams,
    rng: &mut R,
) -> SteerResult {
    cem_steer_observed(system, env, start, target, params, rng, |_| {})
}

/// [`cem_steer`] with a callback invoked after every iteration.
pub fn cem_steer_observed<R, F>(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    target: &State,
    params: &CemParams,
    rng: &mut R,
    mut observe: F,
) -> SteerResult
where
    R: Rng + ?Sized,
    F: FnMut(&CemIteration<'_>),
{
    let m = system.control_dim();
    let h = params.horizon;
    let mut mean: Vec<f64> = (0..h).flat_map(|_| params.control_mean.iter().copied()).collect();
    let mut std: Vec<f64> = (0..h).flat_map(|_| params.control_std.iter().copied()).collect();
    let mut dmean = vec![params.duration_mean; h];
    let mut dstd = vec![params.duration_std; h];
    let db = params.duration_bounds;

    let mut best: Option<(f64, Candidate)> = None;
    let mut iterations = 0;
    let n_e = params.elites.min(params.population).max(1);

    for it in 0..params.iterations {
        iterations = it + 1;
        let population: Vec<Candidate> = (0..params.population)
            .map(|_| {
                let mut controls = Vec::with_capacity(h * m);
                let mut durations = Vec::with_capacity(h);
                for seg in 0..h {
                    for j in 0..m {
                        let i = seg * m + j;
                        controls.push(clipped_normal(rng, mean[i], std[i], system.control_bounds[j]));
                    }
                    durations.push(clipped_normal(rng, dmean[seg], dstd[seg], db));
                }
                Candidate { controls, durations }
            })
            .collect();
        let scores: Vec<f64> = population
            .par_iter()
            .map(|c| rollout_score(system, env, start, c, target, params.collision_weight))
            .collect();

        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        if let Some(&top) = order.first() {
            if best.as_ref().is_none_or(|(s, _)| scores[top] < *s) {
                best = Some((scores[top], population[top].clone()));
            }
        }

        let elites = &order[..n_e.min(order.len())];
        let alpha = params.smoothing;
        let refit = |vals: &dyn Fn(usize) -> f64, mu: &mut f64, sigma: &mut f64| {
            let n = elites.len() as f64;
            // Shifted by the first elite so identical elites reproduce exactly.
            let v0 = vals(elites[0]);
            let em = v0 + elites.iter().map(|&e| vals(e) - v0).sum::<f64>() / n;
            let ev = elites.iter().map(|&e| (vals(e) - em).powi(2)).sum::<f64>() / n;
            *mu = alpha * em + (1.0 - alpha) * *mu;
            *sigma = alpha * ev.sqrt() + (1.0 - alpha) * *sigma;
        };
        for i in 0..h * m {
            refit(&|e| population[e].controls[i], &mut mean[i], &mut std[i]);
        }
        for seg in 0..h {
            refit(&|e| population[e].durations[seg], &mut dmean[seg], &mut dstd[seg]);
        }

        let best_score = best.as_ref().map_or(f64::INFINITY, |(s, _)| *s);
        observe(&CemIteration {
            iteration: it,
            population: &population,
            scores: &scores,
            best_score,
            control_mean: &mean,
            control_std: &std,
            duration_mean: &dmean,
            duration_std: &dstd,
        });
        if best_score < params.converge_eps {
            break;
        }
    }

    let (best_score, cand) = best.unwrap_or_else(|| {
        (
            f64::INFINITY,
            Candidate {
                controls: Vec::new(),
                durations: Vec::new(),
            },
        )
    });
    let (trajectory, in_collision) = truncated_prefix(system, env, start, &cand, target);
    SteerResult {
        terminal_distance: system.distance(&trajectory.terminal_state, target),
        trajectory,
        in_collision,
        iterations_used: iterations,
        best_score,
    }
}

/// Rng stream used for element `index` of a batch seeded with `seed`.
pub fn batch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Steers every `(start, target)` pair independently, element `i` drawing
/// from [`batch_rng`]`(seed, i)`. Results are in input order.
pub fn batch_cem_steer(
    system: &SystemModel,
    env: &Environment,
    starts: &[State],
    targets: &[State],
    params: &CemParams,
    seed: u64,
) -> Result<Vec<SteerResult>> {
    check_batch(starts, targets)?;
    Ok(starts
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (s, t))| cem_steer(system, env, s, t, params, &mut batch_rng(seed, i)))
        .collect())
}

/// Batch counterpart of [`random_shoot`] with the same stream convention as
/// [`batch_cem_steer`].
pub fn batch_random_shoot(
    system: &SystemModel,
    env: &Environment,
    starts: &[State],
    targets: &[State],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SteerResult>> {
    check_batch(starts, targets)?;
    Ok(starts
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (s, t))| random_shoot(system, env, s, t, n_samples, &mut batch_rng(seed, i)))
        .collect())
}

fn check_batch(starts: &[State], targets: &[State]) -> Result<()> {
    if starts.len() != targets.len() {
        return Err(KinoError::DimensionMismatch {
            what: "steering batch",
            expected: starts.len(),
            got: targets.len(),
        });
    }
    Ok(())
}

/// Collision penalty weight used when ranking shooting candidates.
pub const SHOOT_COLLISION_WEIGHT: f64 = 100.0;

/// Samples `n_samples` single segments with uniform control and duration and
/// returns the best-scoring one whole. `in_collision` reports whether any of
/// its substeps collides.
pub fn random_shoot<R: Rng + ?Sized>(
    system: &SystemModel,
    env: &Environment,
    start: &State,
    target: &State,
    n_samples: usize,
    rng: &mut R,
) -> SteerResult {
    let db = system.duration_bounds;
    let mut best: Option<(f64, bool, Trajectory)> = None;
    for _ in 0..n_samples.max(1) {
        let u = system.sample_control(rng);
        let tau = rng.random_range(db.lo..=db.hi);
        let mut x = start.0.clone();
        let mut hits = 0usize;
        let total = system.integrate(&mut x, &u, tau, |s| {
            hits += usize::from(!env.collision_free(system, s));
            true
        });
        let score = score_terms(system, &x, target, hits, total, SHOOT_COLLISION_WEIGHT);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            let colliding = hits > 0 || !env.collision_free(system, start);
            let traj = Trajectory {
                steps: vec![Step {
                    state: start.clone(),
                    control: u,
                    duration: tau,
                }],
                terminal_state: State(x),
            };
            best = Some((score, colliding, traj));
        }
    }
    let (best_score, in_collision, trajectory) = best.expect("at least one sample");
    SteerResult {
        terminal_distance: system.distance(&trajectory.terminal_state, target),
        trajectory,
        in_collision,
        iterations_used: 1,
        best_score,
    }
}
