//! Obstacle scenes, collision checking, scene generation and voxelization.

mod scenes;
mod voxel;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KinoError, Result};
use crate::systems::{Bounds, Component, Physics, SystemKind, SystemModel, Trajectory};

pub use scenes::{generate_scene, workspace_for, CAR_CLEARANCE, QUADROTOR_HALF_EXTENT};
pub use voxel::{voxelize, VoxelGrid, GRID_SIZE, VOXEL_POINTS};

/// Axis-aligned box given by center and positive half extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub half_extents: Vec<f64>,
}

impl Obstacle {
    pub fn new(center: Vec<f64>, half_extents: Vec<f64>) -> Self {
        Obstacle {
            center,
            half_extents,
        }
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Self {
        Obstacle {
            center: lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            half_extents: lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect(),
        }
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.half_extents[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.half_extents[axis]
    }

    pub fn volume(&self) -> f64 {
        self.half_extents.iter().map(|h| 2.0 * h).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    fn from_obstacle(o: &Obstacle, dims: usize) -> Self {
        let mut b = Aabb {
            lo: [0.0; 3],
            hi: [0.0; 3],
        };
        for a in 0..dims {
            b.lo[a] = o.lo(a);
            b.hi[a] = o.hi(a);
        }
        b
    }

    #[inline]
    pub fn contains(&self, p: &[f64; 3], dims: usize) -> bool {
        (0..dims).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    #[inline]
    fn overlaps(&self, other: &Aabb, dims: usize) -> bool {
        (0..dims).all(|a| self.lo[a] <= other.hi[a] && other.lo[a] <= self.hi[a])
    }

    #[inline]
    fn encloses(&self, inner: &Aabb, dims: usize) -> bool {
        (0..dims).all(|a| inner.lo[a] >= self.lo[a] && inner.hi[a] <= self.hi[a])
    }

    /// Liang–Barsky clip of the segment `a -> b` against the box.
    pub fn hits_segment(&self, a: &[f64; 3], b: &[f64; 3], dims: usize) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..dims {
            let d = b[axis] - a[axis];
            if d.abs() < 1e-15 {
                if a[axis] < self.lo[axis] || a[axis] > self.hi[axis] {
                    return false;
                }
                continue;
            }
            let mut ta = (self.lo[axis] - a[axis]) / d;
            let mut tb = (self.hi[axis] - a[axis]) / d;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Euclidean distance between two boxes, zero when they touch.
    pub fn gap(&self, other: &Aabb, dims: usize) -> f64 {
        (0..dims)
            .map(|a| {
                let d = (other.lo[a] - self.hi[a]).max(self.lo[a] - other.hi[a]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Robot geometry as seen by the collision checker.
enum Footprint {
    Point([f64; 3]),
    Segments(Vec<([f64; 3], [f64; 3])>),
    Box(Aabb),
}

/// An obstacle scene in a 2D or 3D workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneFile", into = "SceneFile")]
pub struct Environment {
    pub system: SystemKind,
    pub workspace: Vec<Bounds>,
    pub obstacles: Vec<Obstacle>,
    pub seed: u64,
    boxes: Vec<Aabb>,
    bounds_box: Aabb,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    system: SystemKind,
    workspace: Vec<Bounds>,
    obstacles: Vec<Obstacle>,
    seed: u64,
}

impl TryFrom<SceneFile> for Environment {
    type Error = KinoError;
    fn try_from(f: SceneFile) -> Result<Self> {
        Environment::new(f.system, f.workspace, f.obstacles, f.seed)
    }
}

impl From<Environment> for SceneFile {
    fn from(e: Environment) -> Self {
        SceneFile {
            system: e.system,
            workspace: e.workspace,
            obstacles: e.obstacles,
            seed: e.seed,
        }
    }
}

impl Environment {
    pub fn new(
        system: SystemKind,
        workspace: Vec<Bounds>,
        obstacles: Vec<Obstacle>,
        seed: u64,
    ) -> Result<Self> {
        let dims = workspace.len();
        let bad = |r: String| Err(KinoError::Format { what: "scene", reason: r });
        if !(2..=3).contains(&dims) {
            return bad(format!("workspace must be 2D or 3D, got {dims}D"));
        }
        if workspace.iter().any(|b| !(b.lo < b.hi)) {
            return bad("workspace bounds need lo < hi".into());
        }
        let mut bounds_box = Aabb {
            lo: [0.0; 3],
            hi: [0.0; 3],
        };
        for (a, b) in workspace.iter().enumerate() {
            bounds_box.lo[a] = b.lo;
            bounds_box.hi[a] = b.hi;
        }
        let mut boxes = Vec::with_capacity(obstacles.len());
        for (i, o) in obstacles.iter().enumerate() {
            if o.center.len() != dims || o.half_extents.len() != dims {
                return bad(format!("obstacle {i} has the wrong dimension"));
            }
            if o.half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad(format!("obstacle {i} needs positive half extents"));
            }
            let b = Aabb::from_obstacle(o, dims);
            if !b.overlaps(&bounds_box, dims) {
                return bad(format!("obstacle {i} lies outside the workspace"));
            }
            boxes.push(b);
        }
        Ok(Environment {
            system,
            workspace,
            obstacles,
            seed,
            boxes,
            bounds_box,
        })
    }

    /// Scene without obstacles in the system's default workspace.
    pub fn empty(system: SystemKind) -> Self {
        Environment::new(system, workspace_for(system), Vec::new(), 0)
            .expect("default workspace is valid")
    }

    pub fn dims(&self) -> usize {
        self.workspace.len()
    }

    /// Returns a copy with one more obstacle.
    pub fn with_obstacle(&self, obstacle: Obstacle) -> Result<Self> {
        let mut obstacles = self.obstacles.clone();
        obstacles.push(obstacle);
        Environment::new(self.system, self.workspace.clone(), obstacles, self.seed)
    }

    pub(crate) fn boxes(&self) -> &[Aabb] {
        &self.boxes
    }

    pub(crate) fn bounds_box(&self) -> &Aabb {
        &self.bounds_box
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| KinoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
        Self::from_json(&text)
    }

    fn footprint(&self, system: &SystemModel, x: &[f64]) -> Footprint {
        match (&system.physics, system.kind) {
            (Physics::Acrobot { l1, l2, .. }, _) => {
                let (s1, c1) = x[0].sin_cos();
                let (s12, c12) = (x[0] + x[1]).sin_cos();
                let elbow = [l1 * s1, -l1 * c1, 0.0];
                let tip = [elbow[0] + l2 * s12, elbow[1] - l2 * c12, 0.0];
                Footprint::Segments(vec![([0.0; 3], elbow), (elbow, tip)])
            }
            (Physics::Cartpole { half_length, .. }, _) => {
                let base = [x[0], 0.0, 0.0];
                let (s, c) = x[2].sin_cos();
                let tip = [x[0] + 2.0 * half_length * s, 2.0 * half_length * c, 0.0];
                Footprint::Segments(vec![(base, tip)])
            }
            (Physics::Quadrotor { .. }, _) => {
                let h = QUADROTOR_HALF_EXTENT;
                Footprint::Box(Aabb {
                    lo: [x[0] - h, x[1] - h, x[2] - h],
                    hi: [x[0] + h, x[1] + h, x[2] + h],
                })
            }
            (_, SystemKind::DoubleIntegrator) => Footprint::Point([x[0], 0.0, 0.0]),
            _ => Footprint::Point([x[0], x[1], 0.0]),
        }
    }

    /// True iff the robot footprint at `x` stays inside the workspace, no
    /// obstacle touches it and every position component is within bounds.
    pub fn collision_free(&self, system: &SystemModel, x: &[f64]) -> bool {
        let positions_ok = system
            .components
            .iter()
            .zip(&system.state_bounds)
            .zip(x)
            .all(|((c, b), v)| *c != Component::Position || b.contains(*v));
        if !positions_ok {
            return false;
        }
        let dims = self.dims();
        let ws = &self.bounds_box;
        match self.footprint(system, x) {
            Footprint::Point(p) => {
                ws.contains(&p, dims) && !self.boxes.iter().any(|b| b.contains(&p, dims))
            }
            Footprint::Segments(segs) => segs.iter().all(|(a, b)| {
                ws.contains(a, dims)
                    && ws.contains(b, dims)
                    && !self.boxes.iter().any(|o| o.hits_segment(a, b, dims))
            }),
            Footprint::Box(r) => {
                ws.encloses(&r, dims) && !self.boxes.iter().any(|o| o.overlaps(&r, dims))
            }
        }
    }

    /// True iff the start state and every integration substep along the
    /// trajectory are collision free.
    pub fn valid_trajectory(&self, system: &SystemModel, traj: &Trajectory) -> bool {
        if !self.collision_free(system, traj.start_state()) {
            return false;
        }
        for step in &traj.steps {
            let mut x = step.state.0.clone();
            let mut ok = true;
            system.integrate(&mut x, &step.control, step.duration, |s| {
                ok = self.collision_free(system, s);
                ok
            });
            if !ok {
                return false;
            }
        }
        true
    }
}
