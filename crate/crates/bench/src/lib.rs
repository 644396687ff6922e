//! Shared fixtures for the criterion benches.

use kinoplan::data::{make_scene, SceneData};
use kinoplan::environments::GRID_SIZE;
use kinoplan::neuro::{Discriminator, Encoder, Generator, ModelBundle, ModelConfig, TrainConfig};
use kinoplan::{State, SystemKind, SystemModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn car() -> SystemModel {
    SystemModel::builtin(SystemKind::Car)
}

/// Generated car scene with a fixed seed.
pub fn car_scene() -> SceneData {
    make_scene(SystemKind::Car, 7).expect("car scenes generate")
}

/// A start and a goal 5 m apart in free space.
pub fn car_pair() -> (State, State) {
    (State(vec![0.0, 0.0, 0.0]), State(vec![4.0, 3.0, 0.5]))
}

/// Untrained bundle with the default architecture.
pub fn untrained_bundle(system: &SystemModel, model: ModelConfig) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = Encoder::for_grid(GRID_SIZE, &model, &mut rng);
    let g = Generator::new(system, &model, &mut rng);
    let d = Discriminator::new(system, &model, &mut rng);
    ModelBundle::new(system.name(), model)
        .with_generator(e, g, TrainConfig::default())
        .with_discriminator(d, TrainConfig::default())
}
