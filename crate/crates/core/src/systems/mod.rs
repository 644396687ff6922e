//! Dynamical systems: bounded state and control spaces, fixed-step
//! propagation and the state-space metric.

mod dynamics;

use std::f64::consts::PI;
use std::ops::{Deref, Index};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dynamics::Physics;

use crate::error::{KinoError, Result};

const TAU: f64 = 2.0 * PI;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - TAU * ((a + PI) / TAU).floor();
    if w >= PI {
        w - TAU
    } else if w < -PI {
        w + TAU
    } else {
        w
    }
}

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi
    }
}

impl From<[f64; 2]> for Bounds {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Bounds { lo, hi }
    }
}

impl From<Bounds> for [f64; 2] {
    fn from(b: Bounds) -> Self {
        [b.lo, b.hi]
    }
}

macro_rules! real_vector {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                $name(values)
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }

        impl<const N: usize> From<[f64; N]> for $name {
            fn from(v: [f64; N]) -> Self {
                $name(v.to_vec())
            }
        }
    };
}

real_vector!(
    /// A point in a system's state space.
    State
);
real_vector!(
    /// A control input held constant over one trajectory segment.
    Control
);

/// One constant-control segment of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub control: Control,
    pub duration: f64,
}

/// Sequence of `(state, control, duration)` segments plus the state reached
/// at the end of the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal_state: State,
}

impl Trajectory {
    pub fn empty(at: State) -> Self {
        Trajectory {
            steps: Vec::new(),
            terminal_state: at,
        }
    }

    pub fn start_state(&self) -> &State {
        self.steps
            .first()
            .map(|s| &s.state)
            .unwrap_or(&self.terminal_state)
    }

    pub fn total_duration(&self) -> f64 {
        self.steps.iter().map(|s| s.duration).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Segment start states followed by the terminal state.
    pub fn waypoints(&self) -> impl Iterator<Item = &State> {
        self.steps
            .iter()
            .map(|s| &s.state)
            .chain(std::iter::once(&self.terminal_state))
    }

    /// Largest componentwise deviation between the stored states and a fresh
    /// replay of the controls from the first state.
    pub fn replay_error(&self, system: &SystemModel) -> f64 {
        let mut worst = 0.0f64;
        for (i, step) in self.steps.iter().enumerate() {
            let next = system.propagate(&step.state, &step.control, step.duration);
            let expected = self
                .steps
                .get(i + 1)
                .map(|s| &s.state)
                .unwrap_or(&self.terminal_state);
            for (a, b) in next.iter().zip(expected.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Appends another trajectory that starts where this one ends.
    pub fn extend(&mut self, other: Trajectory) {
        self.steps.extend(other.steps);
        self.terminal_state = other.terminal_state;
    }

    /// CSV with columns `t, x0.., u0.., duration`: one row per step giving
    /// its start time, start state, control and duration, then a final row
    /// with the terminal state and empty control and duration fields.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let n = self.terminal_state.len();
        let m = self.steps.first().map_or(0, |s| s.control.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("duration".into());
        w.write_record(&header)?;
        let mut t = 0.0;
        for s in &self.steps {
            let mut rec = vec![t.to_string()];
            rec.extend(s.state.iter().map(f64::to_string));
            rec.extend(s.control.iter().map(f64::to_string));
            rec.push(s.duration.to_string());
            w.write_record(&rec)?;
            t += s.duration;
        }
        let mut rec = vec![t.to_string()];
        rec.extend(self.terminal_state.iter().map(f64::to_string));
        rec.extend(std::iter::repeat_n(String::new(), m + 1));
        w.write_record(&rec)?;
        w.flush().map_err(|e| KinoError::io("<trajectory csv>", e))
    }
}

/// How a state component is treated by propagation and the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Workspace position; bound violations are collisions, never clamped.
    Position,
    /// Angle wrapped into `[-π, π)`.
    Angle,
    /// Rate clamped to its bounds after every integration step.
    Velocity,
    /// Member of a unit quaternion block, renormalized after every step.
    Quaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Acrobot,
    Cartpole,
    Car,
    Quadrotor,
    DoubleIntegrator,
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] = [
        SystemKind::Acrobot,
        SystemKind::Cartpole,
        SystemKind::Car,
        SystemKind::Quadrotor,
        SystemKind::DoubleIntegrator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Acrobot => "acrobot",
            SystemKind::Cartpole => "cartpole",
            SystemKind::Car => "car",
            SystemKind::Quadrotor => "quadrotor",
            SystemKind::DoubleIntegrator => "double_integrator",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        let normalized = name.replace('-', "_").to_ascii_lowercase();
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == normalized)
            .ok_or_else(|| KinoError::UnknownSystem(name.to_string()))
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A robot: dynamics, bounded spaces, integration step and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub kind: SystemKind,
    pub state_bounds: Vec<Bounds>,
    pub control_bounds: Vec<Bounds>,
    pub components: Vec<Component>,
    /// Integration step in seconds.
    pub dt: f64,
    pub distance_weights: Vec<f64>,
    pub goal_radius: f64,
    /// Range of segment durations used by the steering functions.
    pub duration_bounds: Bounds,
    pub physics: Physics,
}

impl SystemModel {
    pub fn builtin(kind: SystemKind) -> Self {
        let b = Bounds::new;
        use Component::*;
        match kind {
            SystemKind::Acrobot => SystemModel {
                kind,
                state_bounds: vec![b(-PI, PI), b(-PI, PI), b(-6.0, 6.0), b(-6.0, 6.0)],
                control_bounds: vec![b(-4.0, 4.0)],
                components: vec![Angle, Angle, Velocity, Velocity],
                dt: 0.002,
                distance_weights: vec![1.0; 4],
                goal_radius: 2.0,
                duration_bounds: b(0.05, 0.5),
                physics: Physics::Acrobot {
                    m1: 1.0,
                    m2: 1.0,
                    l1: 1.0,
                    l2: 1.0,
                    lc1: 0.5,
                    lc2: 0.5,
                    i1: 1.0 / 12.0,
                    i2: 1.0 / 12.0,
                    gravity: 9.81,
                },
            },
            SystemKind::Cartpole => SystemModel {
                kind,
                state_bounds: vec![b(-30.0, 30.0), b(-40.0, 40.0), b(-PI, PI), b(-2.0, 2.0)],
                control_bounds: vec![b(-300.0, 300.0)],
                components: vec![Position, Velocity, Angle, Velocity],
                dt: 0.002,
                distance_weights: vec![1.0; 4],
                goal_radius: 1.5,
                duration_bounds: b(0.05, 0.5),
                physics: Physics::Cartpole {
                    cart_mass: 1.0,
                    pole_mass: 0.1,
                    half_length: 0.5,
                    gravity: 9.81,
                },
            },
            SystemKind::Car => SystemModel {
                kind,
                state_bounds: vec![b(-25.0, 25.0), b(-35.0, 35.0), b(-PI, PI)],
                control_bounds: vec![b(0.0, 2.0), b(-0.5, 0.5)],
                components: vec![Position, Position, Angle],
                dt: 0.02,
                distance_weights: vec![1.0; 3],
                goal_radius: 0.5,
                duration_bounds: b(0.1, 1.0),
                physics: Physics::Car,
            },
            SystemKind::Quadrotor => {
                let mut components = vec![Position; 3];
                components.extend([Quaternion; 4]);
                components.extend([Velocity; 6]);
                let mut weights = vec![1.0; 3];
                weights.extend([0.5; 4]);
                weights.extend([1.0; 3]);
                weights.extend([0.2; 3]);
                let mut state_bounds = vec![b(-5.0, 5.0); 3];
                state_bounds.extend([b(-1.0, 1.0); 4]);
                state_bounds.extend([b(-1.0, 1.0); 6]);
                SystemModel {
                    kind,
                    state_bounds,
                    control_bounds: vec![b(-15.0, -5.0), b(-1.0, 1.0), b(-1.0, 1.0), b(-1.0, 1.0)],
                    components,
                    dt: 0.02,
                    distance_weights: weights,
                    goal_radius: 2.0,
                    duration_bounds: b(0.1, 1.0),
                    physics: Physics::Quadrotor {
                        mass: 1.0,
                        inertia: [1.0, 1.0, 2.0],
                        gravity: 9.81,
                    },
                }
            }
            SystemKind::DoubleIntegrator => SystemModel {
                kind,
                state_bounds: vec![b(-10.0, 10.0), b(-2.0, 2.0)],
                control_bounds: vec![b(-1.0, 1.0)],
                components: vec![Position, Velocity],
                dt: 0.002,
                distance_weights: vec![1.0; 2],
                goal_radius: 0.1,
                duration_bounds: b(0.05, 0.5),
                physics: Physics::DoubleIntegrator,
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::builtin(SystemKind::from_name(name)?))
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_bounds.len()
    }

    pub fn angular_mask(&self) -> Vec<bool> {
        self.components
            .iter()
            .map(|c| *c == Component::Angle)
            .collect()
    }

    /// First index of the quaternion block, if the state has one.
    pub fn quaternion_offset(&self) -> Option<usize> {
        self.components
            .iter()
            .position(|c| *c == Component::Quaternion)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let bad = |msg: String| Err(KinoError::InvalidConfig(format!("{}: {msg}", self.name())));
        if self.components.len() != n || self.distance_weights.len() != n {
            return bad("components and distance_weights must match state_bounds".into());
        }
        if !self.state_bounds.iter().chain(&self.control_bounds).all(Bounds::is_valid) {
            return bad("bounds must be finite with lo < hi".into());
        }
        if !(self.dt > 0.0) || !(self.goal_radius > 0.0) {
            return bad("dt and goal_radius must be positive".into());
        }
        if !(self.duration_bounds.lo > 0.0) || !self.duration_bounds.is_valid() {
            return bad("duration bounds must satisfy 0 < lo < hi".into());
        }
        if self.distance_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("distance weights must be non-negative".into());
        }
        let expected = Self::builtin(self.kind);
        if expected.state_dim() != n || expected.control_dim() != self.control_dim() {
            return bad(format!(
                "expected {} state and {} control dimensions",
                expected.state_dim(),
                expected.control_dim()
            ));
        }
        Ok(())
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(KinoError::DimensionMismatch {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(KinoError::DimensionMismatch {
                what: "control",
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluates `f(x, u)`.
    pub fn derivative(&self, x: &State, u: &Control) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut out = vec![0.0; self.state_dim()];
        self.physics.derivative(x, u, &mut out);
        Ok(out)
    }

    /// Splits a duration into whole integration steps plus a remainder.
    pub fn step_plan(&self, duration: f64) -> (usize, f64) {
        if !(duration > 0.0) {
            return (0, 0.0);
        }
        let full = (duration / self.dt + 1e-9).floor() as usize;
        let rem = duration - full as f64 * self.dt;
        (full, if rem > 1e-12 { rem } else { 0.0 })
    }

    /// Projects a state back onto the valid set: wraps angles, clamps rates
    /// and renormalizes the quaternion block.
    pub fn normalize_in_place(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            match self.components[i] {
                Component::Angle => x[i] = wrap_angle(x[i]),
                Component::Velocity => x[i] = self.state_bounds[i].clamp(x[i]),
                Component::Position | Component::Quaternion => {}
            }
        }
        if let Some(q) = self.quaternion_offset() {
            let norm = x[q..q + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                x[q..q + 4].iter_mut().for_each(|v| *v /= norm);
            } else {
                x[q..q + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[inline]
    fn euler_step(&self, x: &mut [f64], u: &[f64], h: f64, scratch: &mut [f64]) {
        self.physics.derivative(x, u, scratch);
        for (xi, di) in x.iter_mut().zip(scratch.iter()) {
            *xi += h * di;
        }
        self.normalize_in_place(x);
    }

    /// Integrates `x` in place for `duration` seconds, calling `visit` after
    /// every substep. Stops early when `visit` returns `false`. Returns the
    /// number of substeps taken.
    pub fn integrate<F>(&self, x: &mut [f64], u: &[f64], duration: f64, mut visit: F) -> usize
    where
        F: FnMut(&[f64]) -> bool,
    {
        let mut scratch = [0.0f64; 16];
        let scratch = &mut scratch[..x.len()];
        let (full, rem) = self.step_plan(duration);
        for k in 0..full {
            self.euler_step(x, u, self.dt, scratch);
            if !visit(x) {
                return k + 1;
            }
        }
        if rem > 0.0 {
            self.euler_step(x, u, rem, scratch);
            visit(x);
            return full + 1;
        }
        full
    }

    /// Number of substeps `integrate` takes for `duration`.
    pub fn substep_count(&self, duration: f64) -> usize {
        let (full, rem) = self.step_plan(duration);
        full + usize::from(rem > 0.0)
    }

    /// Explicit Euler propagation with step `dt` and a final partial step.
    pub fn propagate(&self, x: &State, u: &Control, duration: f64) -> State {
        let mut s = x.0.clone();
        self.integrate(&mut s, u, duration, |_| true);
        State(s)
    }

    /// Weighted Euclidean metric; angles differ modulo 2π and the quaternion
    /// block contributes its geodesic angle.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.distance_sq(a, b).sqrt()
    }

    pub(crate) fn distance_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut i = 0;
        while i < a.len() {
            match self.components[i] {
                Component::Quaternion => {
                    let dot: f64 = (0..4).map(|k| a[i + k] * b[i + k]).sum();
                    let angle = 2.0 * dot.abs().min(1.0).acos();
                    let w = self.distance_weights[i] * angle;
                    sum += w * w;
                    i += 4;
                    continue;
                }
                Component::Angle => {
                    let d = self.distance_weights[i] * wrap_angle(a[i] - b[i]);
                    sum += d * d;
                }
                _ => {
                    let d = self.distance_weights[i] * (a[i] - b[i]);
                    sum += d * d;
                }
            }
            i += 1;
        }
        sum
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let mut x: Vec<f64> = self
            .state_bounds
            .iter()
            .zip(&self.components)
            .map(|(b, c)| match c {
                Component::Angle => rng.random_range(-PI..PI),
                _ => rng.random_range(b.lo..b.hi),
            })
            .collect();
        if let Some(q) = self.quaternion_offset() {
            // Shoemake's uniform rotation sampling.
            let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            x[q] = a * (TAU * u2).sin();
            x[q + 1] = a * (TAU * u2).cos();
            x[q + 2] = b * (TAU * u3).sin();
            x[q + 3] = b * (TAU * u3).cos();
        }
        State(x)
    }

    pub fn sample_control<R: Rng + ?Sized>(&self, rng: &mut R) -> Control {
        Control(
            self.control_bounds
                .iter()
                .map(|b| rng.random_range(b.lo..b.hi))
                .collect(),
        )
    }

    pub fn clamp_control(&self, u: &mut [f64]) {
        for (v, b) in u.iter_mut().zip(&self.control_bounds) {
            *v = b.clamp(*v);
        }
    }

    /// Checks the state invariants: bounds, wrapped angles, unit quaternion.
    pub fn is_valid_state(&self, x: &[f64]) -> bool {
        if x.len() != self.state_dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let in_bounds = x.iter().zip(&self.state_bounds).zip(&self.components).all(
            |((v, b), c)| match c {
                Component::Angle => (-PI..PI).contains(v),
                _ => b.contains(*v),
            },
        );
        let unit_quat = self.quaternion_offset().is_none_or(|q| {
            let n: f64 = x[q..q + 4].iter().map(|v| v * v).sum();
            (n.sqrt() - 1.0).abs() < 1e-6
        });
        in_bounds && unit_quat
    }
}

/// All system definitions, as stored in a TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemCatalog {
    pub systems: Vec<SystemModel>,
}

impl Default for SystemCatalog {
    fn default() -> Self {
        SystemCatalog {
            systems: SystemKind::ALL.into_iter().map(SystemModel::builtin).collect(),
        }
    }
}

impl SystemCatalog {
    pub fn from_toml(text: &str) -> Result<Self> {
        let catalog: SystemCatalog = toml::from_str(text)?;
        for s in &catalog.systems {
            s.validate()?;
        }
        Ok(catalog)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("system catalog serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn get(&self, name: &str) -> Result<&SystemModel> {
        let kind = SystemKind::from_name(name)?;
        self.systems
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| KinoError::UnknownSystem(name.to_string()))
    }
}
