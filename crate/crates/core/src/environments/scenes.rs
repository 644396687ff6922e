//! Seeded procedural scene generators, one per system.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Aabb, Environment, Obstacle};
use crate::error::{KinoError, Result};
use crate::systems::{Bounds, SystemKind};

/// Nominal clearance of the car used to size passages between obstacles.
pub const CAR_CLEARANCE: f64 = 1.0;
/// Half edge length of the quadrotor's axis-aligned collision box.
pub const QUADROTOR_HALF_EXTENT: f64 = 0.25;

const MAX_ATTEMPTS: usize = 1000;
const ACROBOT_ANNULUS: (f64, f64) = (1.0, 2.0);
const ACROBOT_HANGING_CLEARANCE: f64 = 0.1;
const QUADROTOR_MIN_FREE_FRACTION: f64 = 0.3;

pub fn workspace_for(system: SystemKind) -> Vec<Bounds> {
    let b = Bounds::new;
    match system {
        SystemKind::Acrobot => vec![b(-2.5, 2.5), b(-2.5, 2.5)],
        SystemKind::Cartpole => vec![b(-30.0, 30.0), b(-1.5, 1.5)],
        SystemKind::Car => vec![b(-25.0, 25.0), b(-35.0, 35.0)],
        SystemKind::Quadrotor => vec![b(-5.0, 5.0); 3],
        SystemKind::DoubleIntegrator => vec![b(-10.0, 10.0), b(-1.0, 1.0)],
    }
}

/// Number of obstacles placed for each system.
pub fn obstacle_count(system: SystemKind) -> usize {
    match system {
        SystemKind::Acrobot => 4,
        SystemKind::Cartpole => 7,
        SystemKind::Car => 5,
        SystemKind::Quadrotor => 10,
        SystemKind::DoubleIntegrator => 0,
    }
}

/// Generates a scene deterministically from `seed` by rejection sampling.
pub fn generate_scene(system: SystemKind, seed: u64) -> Result<Environment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workspace = workspace_for(system);
    let want = obstacle_count(system);
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(want);
    let mut attempts = 0;
    while obstacles.len() < want {
        if attempts >= MAX_ATTEMPTS {
            return Err(KinoError::SceneGeneration {
                system: system.to_string(),
                attempts,
            });
        }
        attempts += 1;
        let candidate = match system {
            SystemKind::Acrobot => acrobot_candidate(&mut rng),
            SystemKind::Cartpole => cartpole_candidate(&mut rng),
            SystemKind::Car => car_candidate(&mut rng, &obstacles),
            SystemKind::Quadrotor => quadrotor_candidate(&mut rng),
            SystemKind::DoubleIntegrator => unreachable!("no obstacles"),
        };
        if accept(system, &workspace, &obstacles, &candidate) {
            obstacles.push(candidate);
        }
    }
    Environment::new(system, workspace, obstacles, seed)
}

fn acrobot_candidate(rng: &mut ChaCha8Rng) -> Obstacle {
    let r = rng.random_range(ACROBOT_ANNULUS.0..=ACROBOT_ANNULUS.1);
    let a = rng.random_range(-PI..PI);
    let half = vec![rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)];
    Obstacle::new(vec![r * a.cos(), r * a.sin()], half)
}

fn cartpole_candidate(rng: &mut ChaCha8Rng) -> Obstacle {
    // Obstacles hang above the track so the cart itself can always move and
    // the pole has to avoid them.
    let half = vec![rng.random_range(0.5..2.0), rng.random_range(0.1..0.4)];
    let cy = rng.random_range(0.5..1.3);
    Obstacle::new(vec![rng.random_range(-25.0..25.0), cy], half)
}

fn car_candidate(rng: &mut ChaCha8Rng, placed: &[Obstacle]) -> Obstacle {
    let half = vec![rng.random_range(1.5..5.0), rng.random_range(1.5..5.0)];
    let Some(anchor) = placed.get(rng.random_range(0..placed.len().max(1))) else {
        return Obstacle::new(
            vec![rng.random_range(-15.0..15.0), rng.random_range(-25.0..25.0)],
            half,
        );
    };
    // Place beside the anchor with a passage of controlled width, sharing
    // part of its extent on the other axis.
    let gap = rng.random_range(1.5 * CAR_CLEARANCE..4.0 * CAR_CLEARANCE);
    let axis = rng.random_range(0..2);
    let other = 1 - axis;
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut center = vec![0.0; 2];
    center[axis] = anchor.center[axis] + side * (anchor.half_extents[axis] + gap + half[axis]);
    let reach = anchor.half_extents[other] + half[other];
    center[other] = anchor.center[other] + rng.random_range(-0.8 * reach..0.8 * reach);
    Obstacle::new(center, half)
}

fn quadrotor_candidate(rng: &mut ChaCha8Rng) -> Obstacle {
    let center = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
    let half = (0..3).map(|_| rng.random_range(0.3..1.0)).collect();
    Obstacle::new(center, half)
}

fn accept(system: SystemKind, workspace: &[Bounds], placed: &[Obstacle], o: &Obstacle) -> bool {
    let dims = workspace.len();
    let inside = (0..dims).all(|a| o.lo(a) > workspace[a].lo && o.hi(a) < workspace[a].hi);
    if !inside {
        return false;
    }
    let b = Aabb::from_obstacle(o, dims);
    match system {
        SystemKind::Acrobot => {
            let down = Aabb {
                lo: [-ACROBOT_HANGING_CLEARANCE, -2.0 - ACROBOT_HANGING_CLEARANCE, 0.0],
                hi: [ACROBOT_HANGING_CLEARANCE, ACROBOT_HANGING_CLEARANCE, 0.0],
            };
            !b.overlaps(&down, dims)
        }
        SystemKind::Car => placed.iter().all(|p| {
            b.gap(&Aabb::from_obstacle(p, dims), dims) >= 1.5 * CAR_CLEARANCE
        }) && (placed.is_empty()
            || placed
                .iter()
                .map(|p| b.gap(&Aabb::from_obstacle(p, dims), dims))
                .fold(f64::INFINITY, f64::min)
                <= 4.0 * CAR_CLEARANCE),
        SystemKind::Quadrotor => {
            let ws_volume: f64 = workspace.iter().map(Bounds::width).product();
            let used: f64 = placed.iter().map(Obstacle::volume).sum::<f64>() + o.volume();
            used <= (1.0 - QUADROTOR_MIN_FREE_FRACTION) * ws_volume
        }
        SystemKind::Cartpole | SystemKind::DoubleIntegrator => true,
    }
}
