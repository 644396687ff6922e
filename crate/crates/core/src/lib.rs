//! Kinodynamic motion planning with learned waypoint sampling.
//!
//! The crate is organized bottom-up:
//!
//! * [`systems`] dynamics, propagation and the state metric,
//! * [`environments`] obstacle scenes, collision checks and voxelization,
//! * [`steering`] CEM model-predictive steering and random shooting,
//! * [`neuro`] encoder, waypoint generator and time-to-reach discriminator,
//! * [`planners`] the search tree and the path, tree and SST planners,
//! * [`data`] demonstration generation and dataset assembly,
//! * [`benchmark`] comparison and ablation harness with exports.

pub mod benchmark;
pub mod data;
pub mod environments;
pub mod error;
pub mod neuro;
pub mod planners;
pub mod steering;
pub mod systems;

pub use error::{KinoError, Result};
pub use environments::{Environment, Obstacle, VoxelGrid};
pub use systems::{Bounds, Control, State, Step, SystemKind, SystemModel, Trajectory};
