use super::train::{discriminator_batch, generator_batch};
use super::*;
use crate::environments::{generate_scene, voxelize, Environment, Obstacle};
use crate::systems::SystemKind;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn car() -> SystemModel {
    SystemModel::builtin(SystemKind::Car)
}

fn grid_for(env: &Environment) -> VoxelGrid {
    voxelize(env, &mut rng(env.seed))
}

#[test]
fn normalization_round_trip() {
    for kind in SystemKind::ALL {
        let s = SystemModel::builtin(kind);
        let n = Normalizer::for_system(&s);
        let mut r = rng(1);
        for _ in 0..100 {
            let x = s.sample_state(&mut r);
            let y = n.normalize(&x);
            assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = n.denormalize(&y);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn empty_scenes_share_an_encoding() {
    let cfg = ModelConfig::default();
    let mut enc = Encoder::for_grid(32, &cfg, &mut rng(2));
    enc.conv1.b.mapv_inplace(|_| 0.3);
    enc.conv2.b.mapv_inplace(|_| -0.1);
    enc.dense.b.mapv_inplace(|_| 0.05);
    let a = enc.encode(&grid_for(&Environment::empty(SystemKind::Car)));
    let b = enc.encode(&grid_for(&Environment::empty(SystemKind::Acrobot)));
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 64);
    assert_eq!(enc.forward(&Array3::zeros((32, 32, 32))).to_vec(), a.0);
}

#[test]
fn encodings_are_deterministic_and_scene_sensitive() {
    let cfg = ModelConfig::default();
    let enc = Encoder::for_grid(32, &cfg, &mut rng(3));
    let env = generate_scene(SystemKind::Car, 1).unwrap();
    let g = grid_for(&env);
    assert_eq!(enc.encode(&g), enc.encode(&g));
    let more = env.with_obstacle(Obstacle::new(vec![10.0, 20.0], vec![2.0, 2.0])).unwrap();
    let z2 = enc.encode(&grid_for(&more));
    assert_ne!(enc.encode(&g), z2);
    assert!(z2.0.iter().all(|v| v.is_finite()));
}

#[test]
fn generator_output_modes() {
    let s = car();
    let cfg = ModelConfig::default();
    let enc = Encoder::for_grid(32, &cfg, &mut rng(4));
    let gen = Generator::new(&s, &cfg, &mut rng(5));
    let z = enc.encode(&grid_for(&generate_scene(SystemKind::Car, 2).unwrap()));
    let x = State::from([1.0, 2.0, 0.3]);
    let goal = State::from([10.0, -5.0, 1.0]);
    let det: Vec<State> = (0..5).map(|i| gen.generate(&z, &x, &goal, false, &mut rng(i))).collect();
    assert!(det.iter().all(|d| *d == det[0]));
    let mut r = rng(6);
    let sto: Vec<State> = (0..100).map(|_| gen.generate(&z, &x, &goal, true, &mut r)).collect();
    let mut distinct = sto.clone();
    distinct.dedup();
    assert!(distinct.len() >= 2);
    for w in det.iter().chain(&sto) {
        assert!(s.is_valid_state(w), "{w:?}");
    }
}

#[test]
fn outputs_are_projected_into_bounds() {
    let s = SystemModel::builtin(SystemKind::Quadrotor);
    let n = Normalizer::for_system(&s);
    let x = n.to_state(&[5.0, -7.0, 0.0, 3.0, 3.0, -3.0, 3.0, 9.0, 0.0, 0.0, 0.0, 0.0, -4.0]);
    assert!(s.is_valid_state(&x));
    let c = SystemModel::builtin(SystemKind::Car);
    assert!(c.is_valid_state(&Normalizer::for_system(&c).to_state(&[0.0, 0.0, 1.0])));
}

#[test]
fn dropout_expectation_matches_deterministic_pass() {
    let mut r = rng(7);
    let mlp = Mlp::new(&[6, 32, 4], 0.2, &mut r);
    let hidden = Mlp {
        layers: vec![mlp.layers[0].clone()],
        dropout: 0.2,
    };
    // Hidden activations: drop the output layer by probing a one-layer
    // trunk with an identity readout.
    let mut probe = hidden.clone();
    probe.layers.push(Dense {
        w: Array2::eye(32),
        b: Array1::zeros(32),
        gw: Array2::zeros((32, 32)),
        gb: Array1::zeros(32),
    });
    let x = Array2::from_shape_fn((1, 6), |_| r.random_range(-1.0..1.0));
    let exact = probe.forward::<ChaCha8Rng>(&x, None);
    let masks = 10_000;
    let mut sum = Array2::<f64>::zeros((1, 32));
    let mut sq = Array2::<f64>::zeros((1, 32));
    for _ in 0..masks {
        let y = probe.forward(&x, Some(&mut r));
        sq += &(&y * &y);
        sum += &y;
    }
    let n = masks as f64;
    for j in 0..32 {
        let mean = sum[[0, j]] / n;
        let var = sq[[0, j]] / n - mean * mean;
        let se = (var / n).sqrt();
        assert!((mean - exact[[0, j]]).abs() <= 3.0 * se + 1e-12, "unit {j}");
    }
}

#[test]
fn discriminator_and_selection() {
    let s = car();
    let cfg = ModelConfig::default();
    let enc = Encoder::for_grid(32, &cfg, &mut rng(8));
    let disc = Discriminator::new(&s, &cfg, &mut rng(9));
    let z = enc.encode(&grid_for(&generate_scene(SystemKind::Car, 3).unwrap()));
    let goal = State::from([0.0, 0.0, 0.0]);
    let mut r = rng(10);
    let cands: Vec<State> = (0..20).map(|_| s.sample_state(&mut r)).collect();
    assert_eq!(disc.discriminate(&z, &cands[0], &goal), disc.discriminate(&z, &cands[0], &goal));
    assert_eq!(disc.select_min_cost(&z, &cands[..1], &goal).unwrap(), 0);
    assert!(disc.select_min_cost(&z, &[], &goal).is_err());
    let costs = disc.discriminate_batch(&z, &cands, &goal);
    let best = disc.select_min_cost(&z, &cands, &goal).unwrap();
    assert!(costs.iter().all(|c| costs[best] <= *c));
    let mut shuffled = cands.clone();
    shuffled.reverse();
    let alt = disc.select_min_cost(&z, &shuffled, &goal).unwrap();
    assert_eq!(disc.discriminate(&z, &shuffled[alt], &goal), costs[best]);
    for (i, c) in cands.iter().enumerate() {
        assert_eq!(disc.discriminate(&z, c, &goal), costs[i]);
    }
}

#[test]
fn argmin_breaks_ties_low() {
    assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), 1);
    assert_eq!(argmin(&[0.5]), 0);
}

fn sample(scene: usize, demo: usize, x: [f64; 2], next: [f64; 2], ctg: f64) -> DatasetSample {
    DatasetSample {
        scene,
        demo_id: demo,
        x_t: State::from(x),
        x_goal: State::from([5.0, 0.0]),
        x_next: State::from(next),
        cost_to_go: ctg,
        valid: true,
    }
}

/// Generator whose network output is the constant `c`, so each waypoint is
/// `norm(x_t) + step_scale · c`.
fn constant_generator(s: &SystemModel, c: [f64; 2]) -> (Encoder, Generator) {
    let cfg = ModelConfig {
        hidden: vec![4],
        latent: 4,
        dropout: 0.0,
        conv_channels: [2, 2],
    };
    let enc = Encoder::for_grid(32, &cfg, &mut rng(0));
    let mut gen = Generator::new(s, &cfg, &mut rng(0));
    for l in &mut gen.mlp.layers {
        l.w.fill(0.0);
        l.b.fill(0.0);
    }
    gen.mlp.layers[1].b = Array1::from(c.to_vec());
    (enc, gen)
}

#[test]
fn generator_loss_is_mean_of_per_path_errors() {
    let s = SystemModel::builtin(SystemKind::DoubleIntegrator);
    let grids = [grid_for(&Environment::empty(SystemKind::DoubleIntegrator))];
    let (enc, gen) = constant_generator(&s, [0.0, 0.0]);
    // Normalized steps are (Δp / 10, Δv / 2); the zero output predicts x_t.
    let samples = vec![
        sample(0, 0, [0.0, 0.0], [5.0, 1.0], 2.0),  // 0.25 + 0.25
        sample(0, 0, [5.0, 1.0], [2.0, -1.0], 1.0), // 0.09 + 1.0
        sample(0, 1, [0.0, 0.0], [-10.0, 0.0], 2.0), // 1.0
        sample(0, 1, [1.0, 2.0], [0.0, 2.0], 1.0),  // 0.01
    ];
    let hand = 0.5 * ((0.5 + 1.09) / 2.0 + (1.0 + 0.01) / 2.0);
    assert!((generator_loss(&enc, &gen, &grids, &samples) - hand).abs() < 1e-9);

    // Unequal path lengths weight each path, not each sample.
    let uneven = vec![samples[0].clone(), samples[2].clone(), samples[3].clone(), sample(0, 1, [0.0, 0.0], [0.0, 0.0], 0.5)];
    let hand = 0.5 * (0.5 + (1.0 + 0.01 + 0.0) / 3.0);
    assert!((generator_loss(&enc, &gen, &grids, &uneven) - hand).abs() < 1e-9);
}

fn mini_encoder(r: &mut ChaCha8Rng) -> Encoder {
    let mut e = Encoder::new((4, 8, 8), [3, 2], 4, r);
    for p in e.params() {
        p.0.iter_mut().for_each(|v| *v += 0.1 * r.random_range(-1.0..1.0));
    }
    e
}

fn perturbed_params<T: Clone>(
    model: &T,
    tensor: usize,
    index: usize,
    delta: f64,
    params: impl Fn(&mut T) -> Vec<(&mut [f64], &[f64])>,
) -> T {
    let mut m = model.clone();
    params(&mut m)[tensor].0[index] += delta;
    m
}

/// Fourth-order central difference of `f` along one coordinate.
fn central_diff(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Relative error against the stencil at `h`, retried once with a stencil
/// ten times narrower in case the wider one straddles a ReLU kink.
fn fd_err(analytic: f64, h: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let num = central_diff(h, &f);
    if rel_err(analytic, num) < 1e-4 {
        return (rel_err(analytic, num), num);
    }
    let num = central_diff(h / 10.0, &f);
    (rel_err(analytic, num), num)
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn random_batch(r: &mut ChaCha8Rng, s: &SystemModel) -> Vec<DatasetSample> {
    (0..6)
        .map(|i| DatasetSample {
            scene: i % 2,
            demo_id: i % 3,
            x_t: s.sample_state(r),
            x_goal: s.sample_state(r),
            x_next: s.sample_state(r),
            cost_to_go: r.random_range(0.0..5.0),
            valid: true,
        })
        .collect()
}

#[test]
fn generator_gradients_match_finite_differences() {
    let s = SystemModel::builtin(SystemKind::DoubleIntegrator);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for probe in 0..100 {
        let mut r = rng(100 + probe);
        let enc = mini_encoder(&mut r);
        let cfg = ModelConfig {
            hidden: vec![8, 8],
            latent: 4,
            dropout: 0.2,
            conv_channels: [3, 2],
        };
        let mut gen = Generator::new(&s, &cfg, &mut r);
        gen.step_scale = r.random_range(0.5..2.0);
        for l in &mut gen.mlp.layers {
            l.b.mapv_inplace(|_| r.random_range(-0.2..0.2));
        }
        let tensors: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((4, 8, 8), |_| f64::from(u8::from(r.random_bool(0.3)))))
            .collect();
        let batch = random_batch(&mut r, &s);
        let refs: Vec<&DatasetSample> = batch.iter().collect();
        let loss = |e: &Encoder, g: &Generator| {
            let (mut e, mut g) = (e.clone(), g.clone());
            generator_batch(&mut e, &mut g, &tensors, &refs, None, false)
        };

        let (mut ea, mut ga) = (enc.clone(), gen.clone());
        ea.zero_grad();
        ga.mlp.zero_grad();
        generator_batch(&mut ea, &mut ga, &tensors, &refs, None, true);
        let enc_grads: Vec<Vec<f64>> = ea.params().iter().map(|p| p.1.to_vec()).collect();
        let gen_grads: Vec<Vec<f64>> = ga.mlp.params().iter().map(|p| p.1.to_vec()).collect();

        for (k, g) in enc_grads.iter().enumerate() {
            for i in 0..g.len() {
                let (err, num) = fd_err(g[i], h, |t| loss(&perturbed_params(&enc, k, i, t, |m| m.params()), &gen));
                worst = worst.max(err);
                assert!(err < 1e-4, "probe {probe} enc {k}[{i}]: {} vs {num}", g[i]);
            }
        }
        for (k, g) in gen_grads.iter().enumerate() {
            for i in 0..g.len() {
                let (err, num) = fd_err(g[i], h, |t| loss(&enc, &perturbed_params(&gen, k, i, t, |m| m.mlp.params())));
                worst = worst.max(err);
                assert!(err < 1e-4, "probe {probe} gen {k}[{i}]: {} vs {num}", g[i]);
            }
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let s = car();
    let h = 1e-5;
    for probe in 0..100 {
        let mut r = rng(500 + probe);
        let cfg = ModelConfig {
            hidden: vec![8, 8],
            latent: 4,
            dropout: 0.2,
            conv_channels: [3, 2],
        };
        let mut disc = Discriminator::new(&s, &cfg, &mut r);
        disc.cost_scale = 5.0;
        for l in &mut disc.mlp.layers {
            l.b.mapv_inplace(|_| r.random_range(-0.2..0.2));
        }
        let encodings: Vec<Encoding> = (0..2)
            .map(|_| Encoding((0..4).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let batch = random_batch(&mut r, &s);
        let refs: Vec<&DatasetSample> = batch.iter().collect();
        let loss = |d: &Discriminator| {
            let mut d = d.clone();
            discriminator_batch(&mut d, &encodings, &refs, None, false)
        };
        let mut da = disc.clone();
        da.mlp.zero_grad();
        discriminator_batch(&mut da, &encodings, &refs, None, true);
        let grads: Vec<Vec<f64>> = da.mlp.params().iter().map(|p| p.1.to_vec()).collect();
        for (k, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let (err, num) = fd_err(g[i], h, |t| loss(&perturbed_params(&disc, k, i, t, |m| m.mlp.params())));
                assert!(err < 1e-4, "probe {probe} disc {k}[{i}]: {} vs {num}", g[i]);
            }
        }
    }
}

#[test]
fn single_sample_is_memorized() {
    let s = car();
    let env = generate_scene(SystemKind::Car, 4).unwrap();
    let grids = [grid_for(&env)];
    let one = vec![DatasetSample {
        scene: 0,
        demo_id: 0,
        x_t: State::from([1.0, 1.0, 0.2]),
        x_goal: State::from([10.0, 10.0, 1.0]),
        x_next: State::from([2.0, 1.5, 0.4]),
        cost_to_go: 3.0,
        valid: true,
    }];
    let model = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2000,
        ..TrainConfig::default()
    };
    let out = train_generator(&s, &grids, &one, &model, &cfg).unwrap();
    assert!(*out.losses.last().unwrap() < 1e-3, "{:?}", out.losses.last());
}

fn toy_car_dataset(n: usize, seed: u64) -> (Vec<VoxelGrid>, Vec<DatasetSample>) {
    let s = car();
    let grids: Vec<VoxelGrid> = (0..2).map(|i| grid_for(&generate_scene(SystemKind::Car, i).unwrap())).collect();
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut demo = 0;
    while out.len() < n {
        let goal = s.sample_state(&mut r);
        let mut x = s.sample_state(&mut r);
        for k in 0..10 {
            let u = s.sample_control(&mut r);
            let next = s.propagate(&x, &u, 0.5);
            out.push(DatasetSample {
                scene: demo % 2,
                demo_id: demo,
                x_t: x.clone(),
                x_goal: goal.clone(),
                x_next: next.clone(),
                cost_to_go: 0.5 * (10 - k) as f64,
                valid: true,
            });
            x = next;
        }
        demo += 1;
    }
    out.truncate(n);
    (grids, out)
}

#[test]
fn training_reduces_losses() {
    let s = car();
    let (grids, samples) = toy_car_dataset(1000, 11);
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let g = train_generator(&s, &grids, &samples, &model, &cfg).unwrap();
    assert_eq!(g.losses.len(), 4);
    assert!(g.losses[3] < g.losses[0], "{:?}", g.losses);
    let d = train_discriminator(&s, &g.model.0, &grids, &samples, &model, &cfg).unwrap();
    assert_eq!(d.model.cost_scale, 5.0);
    assert!(d.losses[3] < d.losses[0], "{:?}", d.losses);
}

#[test]
fn training_is_seed_deterministic_and_rejects_empty_sets() {
    let s = car();
    let (grids, samples) = toy_car_dataset(200, 12);
    let model = ModelConfig {
        hidden: vec![32, 32],
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = train_generator(&s, &grids, &samples, &model, &cfg).unwrap();
    let b = train_generator(&s, &grids, &samples, &model, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.1, b.model.1);
    assert!(matches!(
        train_generator(&s, &grids, &[], &model, &cfg),
        Err(KinoError::EmptyDataset)
    ));
    assert!(train_discriminator(&s, &a.model.0, &grids, &[], &model, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let s = car();
    let model = ModelConfig {
        hidden: vec![16],
        ..ModelConfig::default()
    };
    let enc = Encoder::for_grid(32, &model, &mut rng(1));
    let gen = Generator::new(&s, &model, &mut rng(2));
    let disc = Discriminator::new(&s, &model, &mut rng(3));
    let bundle = ModelBundle::new("car", model)
        .with_generator(enc, gen, TrainConfig::default())
        .with_discriminator(disc, TrainConfig { seed: 4, ..TrainConfig::default() });
    let back = ModelBundle::from_json(&bundle.to_json()).unwrap();
    assert_eq!(back, bundle);
    let tampered = bundle.to_json().replacen("\"seed\":4", "\"seed\":5", 1);
    assert!(ModelBundle::from_json(&tampered).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    bundle.save(&path).unwrap();
    assert_eq!(ModelBundle::load(&path).unwrap(), bundle);
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // Hand-ranked with ties: ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4).
    let r = spearman(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 3.0, 4.0]);
    assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
}
