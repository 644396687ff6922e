//! Learned sampling: a voxel encoder, a dropout-stochastic waypoint
//! generator and a time-to-reach discriminator, all trained from scratch.

mod checkpoint;
mod layers;
mod train;

pub use checkpoint::{ModelBundle, CHECKPOINT_VERSION};
pub use layers::{Adam, Conv2d, Dense, Encoder, EncoderCache, Mlp, MlpCache};
pub use train::{
    discriminator_gradients, discriminator_loss, generator_gradients, generator_loss, spearman,
    train_discriminator, train_generator, TrainConfig, TrainOutcome,
};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environments::{VoxelGrid, GRID_SIZE};
use crate::error::{KinoError, Result};
use crate::systems::{wrap_angle, Component, State, SystemModel};

#[cfg(test)]
mod tests;

/// Network sizes shared by the generator and discriminator trunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub dropout: f64,
    pub conv_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![512, 512, 512],
            latent: 64,
            dropout: 0.2,
            conv_channels: [16, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KinoError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.hidden.iter().chain([&self.latent]).any(|w| *w == 0)
            || self.conv_channels.contains(&0)
        {
            return Err(KinoError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised example. `scene` indexes the voxel grid list passed to
/// training; `demo_id` groups samples into demonstration paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub scene: usize,
    pub demo_id: usize,
    pub x_t: State,
    pub x_goal: State,
    pub x_next: State,
    pub cost_to_go: f64,
    pub valid: bool,
}

impl DatasetSample {
    /// State the discriminator labels: `x_t` for positives, the unreachable
    /// target `x_next` for negatives.
    pub fn scored_state(&self) -> &State {
        if self.valid { &self.x_t } else { &self.x_next }
    }
}

/// Affine map from the state box to `[-1, 1]` per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub components: Vec<Component>,
}

impl Normalizer {
    pub fn for_system(system: &SystemModel) -> Self {
        Normalizer {
            lo: system.state_bounds.iter().map(|b| b.lo).collect(),
            hi: system.state_bounds.iter().map(|b| b.hi).collect(),
            components: system.components.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = 2.0 * (x[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0;
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }

    /// Normalized step from `from` to `to`, taking the short way around
    /// angles.
    pub fn delta_into(&self, from: &[f64], to: &[f64], out: &mut [f64]) {
        for i in 0..from.len() {
            let mut d = to[i] - from[i];
            if self.components[i] == Component::Angle {
                d = wrap_angle(d);
            }
            out[i] = 2.0 * d / (self.hi[i] - self.lo[i]);
        }
    }

    /// Inverse map without projection.
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        (0..y.len())
            .map(|i| self.lo[i] + (y[i] + 1.0) * 0.5 * (self.hi[i] - self.lo[i]))
            .collect()
    }

    /// Inverse map followed by clamping to the box, angle wrapping and
    /// quaternion renormalization.
    pub fn to_state(&self, y: &[f64]) -> State {
        let mut x = self.denormalize(y);
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
            if self.components[i] == Component::Angle {
                x[i] = wrap_angle(x[i]);
            }
        }
        if let Some(q) = self.components.iter().position(|c| *c == Component::Quaternion) {
            let n = x[q..q + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                x[q..q + 4].iter_mut().for_each(|v| *v /= n);
            } else {
                x[q..q + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
        State(x)
    }
}

/// Latent scene embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding(pub Vec<f64>);

/// Grid as `(depth channels, x, y)`.
pub fn voxel_tensor(grid: &VoxelGrid) -> Array3<f64> {
    let n = GRID_SIZE;
    Array3::from_shape_fn((n, n, n), |(z, x, y)| f64::from(u8::from(grid.get(x, y, z))))
}

impl Encoder {
    pub fn for_grid<R: Rng + ?Sized>(side: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Encoder::new((side, side, side), cfg.conv_channels, cfg.latent, rng)
    }

    pub fn encode(&self, grid: &VoxelGrid) -> Encoding {
        Encoding(self.forward(&voxel_tensor(grid)).to_vec())
    }
}

/// Gain on the goal-relative input block.
pub const RELATIVE_GAIN: f64 = 10.0;

/// Input width for a scene latent of size `latent` and state dimension `d`.
pub(crate) fn input_width(latent: usize, d: usize) -> usize {
    latent + 3 * d
}

/// Builds the `[Z, norm(x), norm(goal), gain · (goal − x)]` input rows, the
/// last block in normalized units with angles wrapped.
fn input_rows<'a>(
    z: &[f64],
    norm: &Normalizer,
    xs: impl ExactSizeIterator<Item = (&'a State, &'a State)>,
) -> Array2<f64> {
    let d = norm.dim();
    let width = input_width(z.len(), d);
    let mut out = Array2::zeros((xs.len(), width));
    for (r, (x, goal)) in xs.enumerate() {
        let mut row = out.row_mut(r);
        let row = row.as_slice_mut().expect("row-major");
        row[..z.len()].copy_from_slice(z);
        norm.normalize_into(x, &mut row[z.len()..z.len() + d]);
        norm.normalize_into(goal, &mut row[z.len() + d..z.len() + 2 * d]);
        let rel = &mut row[z.len() + 2 * d..];
        norm.delta_into(x, goal, rel);
        rel.iter_mut().for_each(|v| *v *= RELATIVE_GAIN);
    }
    out
}

/// Predicts the next waypoint in normalized state space as
/// `norm(x_t) + step_scale · mlp(inputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub mlp: Mlp,
    pub norm: Normalizer,
    pub step_scale: f64,
}

/// Network output units per normalized state unit.
pub const GENERATOR_STEP_SCALE: f64 = 0.1;

impl Generator {
    pub fn new<R: Rng + ?Sized>(system: &SystemModel, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = system.state_dim();
        let widths: Vec<usize> = std::iter::once(input_width(cfg.latent, d))
            .chain(cfg.hidden.iter().copied())
            .chain(std::iter::once(d))
            .collect();
        Generator {
            mlp: Mlp::new(&widths, cfg.dropout, rng),
            norm: Normalizer::for_system(system),
            step_scale: GENERATOR_STEP_SCALE,
        }
    }

    /// One waypoint; dropout masks come from `rng` when `stochastic`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        z: &Encoding,
        x_t: &State,
        goal: &State,
        stochastic: bool,
        rng: &mut R,
    ) -> State {
        self.generate_batch(z, std::slice::from_ref(x_t), goal, stochastic, rng)
            .pop()
            .expect("one row")
    }

    /// One waypoint per start state, sharing the scene and goal.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        z: &Encoding,
        starts: &[State],
        goal: &State,
        stochastic: bool,
        rng: &mut R,
    ) -> Vec<State> {
        let x = input_rows(&z.0, &self.norm, starts.iter().zip(std::iter::repeat_n(goal, starts.len())));
        let y = if stochastic {
            self.mlp.forward(&x, Some(rng))
        } else {
            self.mlp.forward::<R>(&x, None)
        };
        let d = self.norm.dim();
        let mut base = vec![0.0; d];
        y.rows()
            .into_iter()
            .zip(starts)
            .map(|(r, x_t)| {
                self.norm.normalize_into(x_t, &mut base);
                let out: Vec<f64> = base.iter().zip(r).map(|(b, v)| b + self.step_scale * v).collect();
                self.norm.to_state(&out)
            })
            .collect()
    }
}

/// Predicts time-to-reach; the network regresses `cost / cost_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub mlp: Mlp,
    pub norm: Normalizer,
    pub cost_scale: f64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(system: &SystemModel, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = system.state_dim();
        let widths: Vec<usize> = std::iter::once(input_width(cfg.latent, d))
            .chain(cfg.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Discriminator {
            mlp: Mlp::new(&widths, cfg.dropout, rng),
            norm: Normalizer::for_system(system),
            cost_scale: 1.0,
        }
    }

    pub fn discriminate(&self, z: &Encoding, x: &State, goal: &State) -> f64 {
        self.discriminate_batch(z, std::slice::from_ref(x), goal)[0]
    }

    pub fn discriminate_batch(&self, z: &Encoding, xs: &[State], goal: &State) -> Vec<f64> {
        let x = input_rows(&z.0, &self.norm, xs.iter().zip(std::iter::repeat_n(goal, xs.len())));
        self.mlp
            .forward::<rand_chacha::ChaCha8Rng>(&x, None)
            .column(0)
            .iter()
            .map(|v| v * self.cost_scale)
            .collect()
    }

    /// Index of the candidate with the lowest predicted cost; ties go to
    /// the lowest index.
    pub fn select_min_cost(&self, z: &Encoding, candidates: &[State], goal: &State) -> Result<usize> {
        if candidates.is_empty() {
            return Err(KinoError::EmptyCandidates);
        }
        let costs = self.discriminate_batch(z, candidates, goal);
        Ok(argmin(&costs))
    }
}

/// First index of the smallest value.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Encoder, generator and optional discriminator trained together.
pub struct NeuralSampler<'a> {
    pub generator: &'a Generator,
    pub discriminator: Option<&'a Discriminator>,
    pub z: Encoding,
}

impl<'a> NeuralSampler<'a> {
    pub fn new(bundle: &'a ModelBundle, grid: &VoxelGrid) -> Result<Self> {
        let encoder = bundle.encoder.as_ref().ok_or_else(|| missing("encoder"))?;
        let generator = bundle.generator.as_ref().ok_or_else(|| missing("generator"))?;
        Ok(NeuralSampler {
            generator,
            discriminator: bundle.discriminator.as_ref(),
            z: encoder.encode(grid),
        })
    }
}

fn missing(what: &str) -> KinoError {
    KinoError::Format {
        what: "checkpoint",
        reason: format!("bundle has no {what}"),
    }
}
