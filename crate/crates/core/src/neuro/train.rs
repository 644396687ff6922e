//! Losses and mini-batch Adam training loops.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{input_rows, input_width, voxel_tensor, Adam, DatasetSample, Discriminator, Encoder, Encoding, Generator, ModelConfig};
use crate::environments::{VoxelGrid, GRID_SIZE};
use crate::error::{KinoError, Result};
use crate::systems::SystemModel;

/// Optimizer settings shared by both training routines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Trained parameters plus the loss at the end of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub losses: Vec<f64>,
}

/// Per-sample weights `1 / (N_p · T_i)` for the path-averaged loss, where
/// paths are identified by `demo_id` within `samples`.
pub(crate) fn path_weights(samples: &[&DatasetSample]) -> Vec<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.demo_id).or_default() += 1;
    }
    let paths = counts.len() as f64;
    samples
        .iter()
        .map(|s| 1.0 / (paths * counts[&s.demo_id] as f64))
        .collect()
}

/// Generator loss and, when `train` is set, accumulated gradients for the
/// encoder and generator on one batch. Dropout is active iff `rng` is given.
pub(crate) fn generator_batch(
    encoder: &mut Encoder,
    generator: &mut Generator,
    tensors: &[Array3<f64>],
    batch: &[&DatasetSample],
    rng: Option<&mut ChaCha8Rng>,
    train: bool,
) -> f64 {
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for s in batch {
        let next = slots.len();
        slots.entry(s.scene).or_insert(next);
    }
    let mut order: Vec<(usize, usize)> = slots.iter().map(|(&sc, &sl)| (sl, sc)).collect();
    order.sort();
    let encoded: Vec<_> = order
        .iter()
        .map(|&(_, scene)| encoder.forward_cached(&tensors[scene]))
        .collect();
    let latent = encoder.latent();

    let norm = &generator.norm;
    let d = norm.dim();
    let mut x = Array2::zeros((batch.len(), input_width(latent, d)));
    let mut y = Array2::zeros((batch.len(), d));
    for (r, s) in batch.iter().enumerate() {
        let z = &encoded[slots[&s.scene]].0;
        let row = input_rows(z.as_slice().expect("contiguous"), norm, std::iter::once((&s.x_t, &s.x_goal)));
        x.row_mut(r).assign(&row.row(0));
        let mut yr = y.row_mut(r);
        norm.delta_into(&s.x_t, &s.x_next, yr.as_slice_mut().expect("row-major"));
    }
    let (out, cache) = generator.mlp.forward_cached(&x, rng);
    let w = path_weights(batch);
    let scale = generator.step_scale;
    let diff = &out * scale - &y;
    let loss: f64 = diff
        .rows()
        .into_iter()
        .zip(&w)
        .map(|(r, wi)| wi * r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    if train {
        let mut dy = diff;
        for (mut r, wi) in dy.rows_mut().into_iter().zip(&w) {
            r.mapv_inplace(|v| 2.0 * wi * scale * v);
        }
        let dx = generator.mlp.backward(&cache, &dy);
        let mut dz = vec![Array1::<f64>::zeros(latent); encoded.len()];
        for (r, s) in batch.iter().enumerate() {
            let slot = slots[&s.scene];
            dz[slot] += &dx.row(r).slice(ndarray::s![..latent]);
        }
        for (slot, (_, cache)) in encoded.iter().enumerate() {
            encoder.backward(cache, &dz[slot]);
        }
    }
    loss
}

/// Discriminator loss `mean((D/P − label/P)²)` and optional gradients.
pub(crate) fn discriminator_batch(
    disc: &mut Discriminator,
    encodings: &[Encoding],
    batch: &[&DatasetSample],
    rng: Option<&mut ChaCha8Rng>,
    train: bool,
) -> f64 {
    let norm = &disc.norm;
    let d = norm.dim();
    let latent = encodings.first().map_or(0, |z| z.0.len());
    let mut x = Array2::zeros((batch.len(), input_width(latent, d)));
    let mut y = Array2::zeros((batch.len(), 1));
    for (r, s) in batch.iter().enumerate() {
        let row = input_rows(&encodings[s.scene].0, norm, std::iter::once((s.scored_state(), &s.x_goal)));
        x.row_mut(r).assign(&row.row(0));
        y[[r, 0]] = s.cost_to_go / disc.cost_scale;
    }
    let (pred, cache) = disc.mlp.forward_cached(&x, rng);
    let diff = &pred - &y;
    let n = batch.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    if train {
        let dy = diff.mapv(|v| 2.0 * v / n);
        disc.mlp.backward(&cache, &dy);
    }
    loss
}

fn check_nonempty(samples: &[DatasetSample]) -> Result<()> {
    if samples.is_empty() {
        Err(KinoError::EmptyDataset)
    } else {
        Ok(())
    }
}

fn check_scenes(samples: &[DatasetSample], grids: usize) -> Result<()> {
    match samples.iter().find(|s| s.scene >= grids) {
        Some(s) => Err(KinoError::InvalidConfig(format!(
            "sample refers to scene {} but only {grids} grids were given",
            s.scene
        ))),
        None => Ok(()),
    }
}

/// Exact path-averaged generator loss over `samples`, dropout disabled.
pub fn generator_loss(
    encoder: &Encoder,
    generator: &Generator,
    grids: &[VoxelGrid],
    samples: &[DatasetSample],
) -> f64 {
    let tensors: Vec<_> = grids.iter().map(voxel_tensor).collect();
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let (mut e, mut g) = (encoder.clone(), generator.clone());
    generator_batch(&mut e, &mut g, &tensors, &refs, None, false)
}

/// Mean squared error in units of the cost scale, dropout disabled.
pub fn discriminator_loss(disc: &Discriminator, encodings: &[Encoding], samples: &[DatasetSample]) -> f64 {
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let mut d = disc.clone();
    discriminator_batch(&mut d, encodings, &refs, None, false)
}

/// Dropout-free generator loss with the analytic gradients, returned as
/// copies of the models whose gradient buffers hold `∂L_G/∂θ`.
pub fn generator_gradients(
    encoder: &Encoder,
    generator: &Generator,
    grids: &[VoxelGrid],
    samples: &[DatasetSample],
) -> (f64, Encoder, Generator) {
    let tensors: Vec<_> = grids.iter().map(voxel_tensor).collect();
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let (mut e, mut g) = (encoder.clone(), generator.clone());
    e.zero_grad();
    g.mlp.zero_grad();
    let loss = generator_batch(&mut e, &mut g, &tensors, &refs, None, true);
    (loss, e, g)
}

/// Dropout-free discriminator loss with the analytic gradients in the
/// returned copy's gradient buffers.
pub fn discriminator_gradients(
    disc: &Discriminator,
    encodings: &[Encoding],
    samples: &[DatasetSample],
) -> (f64, Discriminator) {
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let mut d = disc.clone();
    d.mlp.zero_grad();
    let loss = discriminator_batch(&mut d, encodings, &refs, None, true);
    (loss, d)
}

/// Trains the encoder and generator end to end on valid samples.
pub fn train_generator(
    system: &SystemModel,
    grids: &[VoxelGrid],
    samples: &[DatasetSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<(Encoder, Generator)>> {
    model.validate()?;
    let valid: Vec<DatasetSample> = samples.iter().filter(|s| s.valid).cloned().collect();
    check_nonempty(&valid)?;
    check_scenes(&valid, grids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Encoder::for_grid(GRID_SIZE, model, &mut rng);
    let mut generator = Generator::new(system, model, &mut rng);
    let tensors: Vec<_> = grids.iter().map(voxel_tensor).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..valid.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let all: Vec<&DatasetSample> = valid.iter().collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&DatasetSample> = chunk.iter().map(|&i| &valid[i]).collect();
            encoder.zero_grad();
            generator.mlp.zero_grad();
            generator_batch(&mut encoder, &mut generator, &tensors, &batch, Some(&mut rng), true);
            let mut params = encoder.params();
            params.extend(generator.mlp.params());
            adam.step(params);
        }
        losses.push(generator_batch(&mut encoder, &mut generator, &tensors, &all, None, false));
    }
    Ok(TrainOutcome {
        model: (encoder, generator),
        losses,
    })
}

/// Trains the discriminator on a frozen encoder. The cost scale is the
/// largest label in `samples`.
pub fn train_discriminator(
    system: &SystemModel,
    encoder: &Encoder,
    grids: &[VoxelGrid],
    samples: &[DatasetSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<Discriminator>> {
    model.validate()?;
    check_nonempty(samples)?;
    check_scenes(samples, grids.len())?;
    let encodings: Vec<Encoding> = grids.iter().map(|g| encoder.encode(g)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = Discriminator::new(system, model, &mut rng);
    disc.cost_scale = samples
        .iter()
        .map(|s| s.cost_to_go)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let all: Vec<&DatasetSample> = samples.iter().collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&DatasetSample> = chunk.iter().map(|&i| &samples[i]).collect();
            disc.mlp.zero_grad();
            discriminator_batch(&mut disc, &encodings, &batch, Some(&mut rng), true);
            adam.step(disc.mlp.params());
        }
        losses.push(discriminator_batch(&mut disc, &encodings, &all, None, false));
    }
    Ok(TrainOutcome { model: disc, losses })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
