use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kinoplan::benchmark::{self, BenchConfig, BenchmarkReport};
use kinoplan::data::{
    build_samples, generate_demonstrations, load_samples, make_scene, save_samples, split, DataDir, DatasetManifest,
    DemoConfig, SceneEntry,
};
use kinoplan::environments::Environment;
use kinoplan::neuro::{
    train_discriminator, train_generator, ModelBundle, ModelConfig, NeuralSampler, TrainConfig,
};
use kinoplan::planners::{
    mpnet_path_plan, mpnet_tree_plan, sst_plan, staged_explore, PlanResult, PlannerConfig, PlannerKind, SstConfig,
};
use kinoplan::steering::{cem_steer, random_shoot, CemParams};
use kinoplan::systems::SystemCatalog;
use kinoplan::{State, SystemModel, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "kinoplan", version, about = "Kinodynamic planning with learned waypoint sampling")]
struct Cli {
    /// TOML file overriding the built-in system definitions.
    #[arg(long, global = true)]
    systems: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steer once between two states and print the result.
    Steer(SteerArgs),
    /// Solve one planning problem.
    Plan(PlanArgs),
    /// Generate seen and unseen scenes into a data directory.
    GenScenes(GenScenesArgs),
    /// Solve random problems with SST in every scene of a data directory.
    GenDemos(GenDemosArgs),
    /// Build labelled samples and the train/test split.
    BuildDataset(BuildDatasetArgs),
    /// Train the encoder and waypoint generator.
    TrainGen(TrainArgs),
    /// Train the discriminator on top of a generator checkpoint.
    TrainDisc(TrainDiscArgs),
    /// Planner benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long)]
    system: String,
    /// Comma-separated start state.
    #[arg(long, value_parser = parse_state)]
    start: State,
    #[arg(long, value_parser = parse_state)]
    target: State,
    /// Scene JSON; obstacle-free when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// `cem` or `shoot`.
    #[arg(long, default_value = "cem")]
    method: String,
    /// Samples for random shooting.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// TOML file with CEM parameters.
    #[arg(long)]
    cem: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    system: String,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// mp-path, mp-tree or sst.
    #[arg(long, default_value = "mp-tree")]
    planner: String,
    /// Model bundle; required for neural planners.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_state)]
    start: State,
    #[arg(long, value_parser = parse_state)]
    goal: State,
    /// TOML planner configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    time_budget: Option<f64>,
    /// Waypoint candidates or parallel extensions per iteration (N_B).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stage1: Option<usize>,
    #[arg(long)]
    stage2: Option<usize>,
    /// Run the three-phase schedule instead of the bare planner.
    #[arg(long)]
    staged: bool,
    /// Single waypoint per iteration instead of discriminator selection.
    #[arg(long)]
    no_discriminator: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataDirArg {
    #[arg(long, env = "KINOPLAN_DATA_DIR")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct GenScenesArgs {
    #[command(flatten)]
    dir: DataDirArg,
    #[arg(long)]
    system: String,
    #[arg(long, default_value_t = 10)]
    seen: usize,
    #[arg(long, default_value_t = 2)]
    unseen: usize,
    /// First scene seed; scenes use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDemosArgs {
    #[command(flatten)]
    dir: DataDirArg,
    #[arg(long, default_value_t = 100)]
    per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
    #[arg(long, default_value_t = 60.0)]
    time_budget: f64,
    /// Limit on the start-goal distance in the state metric.
    #[arg(long)]
    max_pair_distance: Option<f64>,
    /// SST runs per pair before giving up on it.
    #[arg(long, default_value_t = 1)]
    attempts: usize,
    /// Random controls tried per SST extension.
    #[arg(long)]
    shoot_samples: Option<usize>,
    /// Probability of steering toward the goal in SST.
    #[arg(long)]
    goal_bias: Option<f64>,
    #[arg(long, env = "KINOPLAN_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[command(flatten)]
    dir: DataDirArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.15)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of per-epoch losses.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    dir: DataDirArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    /// Hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 512, 512])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    latent: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

#[derive(Args)]
struct TrainDiscArgs {
    #[command(flatten)]
    dir: DataDirArg,
    /// Bundle holding the trained encoder and generator.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run every configured planner on the suite and export the report.
    Run(BenchArgs),
    /// Path planner with and without the discriminator on paired problems.
    Ablation(BenchArgs),
    /// Re-export a saved report.
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "KINOPLAN_WORKERS")]
    workers: Option<usize>,
}

fn parse_state(s: &str) -> std::result::Result<State, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad number `{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(State)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let catalog = match &cli.systems {
        Some(p) => SystemCatalog::load(p)?,
        None => SystemCatalog::default(),
    };
    match cli.command {
        Command::Steer(a) => steer(&catalog, a),
        Command::Plan(a) => plan(&catalog, a),
        Command::GenScenes(a) => gen_scenes(&catalog, a),
        Command::GenDemos(a) => gen_demos(&catalog, a),
        Command::BuildDataset(a) => build_dataset(&catalog, a),
        Command::TrainGen(a) => train_gen(&catalog, a),
        Command::TrainDisc(a) => train_disc(&catalog, a),
        Command::Bench(b) => bench(&catalog, b),
    }
}

fn check_dim(system: &SystemModel, x: &State, what: &str) -> Result<()> {
    if x.len() != system.state_dim() {
        bail!("{what} has {} components, {} needs {}", x.len(), system.name(), system.state_dim());
    }
    Ok(())
}

fn load_env(system: &SystemModel, scene: Option<&Path>) -> Result<Environment> {
    let env = match scene {
        Some(p) => Environment::load(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => Environment::empty(system.kind),
    };
    if env.system != system.kind {
        bail!("scene is for {}, not {}", env.system.name(), system.name());
    }
    Ok(env)
}

fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    t.write_csv(BufWriter::new(f))?;
    Ok(())
}

fn steer(catalog: &SystemCatalog, a: SteerArgs) -> Result<()> {
    let system = catalog.get(&a.system)?;
    check_dim(system, &a.start, "start")?;
    check_dim(system, &a.target, "target")?;
    let env = load_env(system, a.scene.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let r = match a.method.as_str() {
        "cem" => {
            let params = match &a.cem {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
                None => CemParams::for_system(system),
            };
            cem_steer(system, &env, &a.start, &a.target, &params, &mut rng)
        }
        "shoot" => random_shoot(system, &env, &a.start, &a.target, a.samples, &mut rng),
        other => bail!("unknown steering method `{other}` (cem or shoot)"),
    };
    let summary = serde_json::json!({
        "terminal_state": r.trajectory.terminal_state,
        "terminal_distance": r.terminal_distance,
        "in_collision": r.in_collision,
        "iterations_used": r.iterations_used,
        "best_score": r.best_score,
        "duration": r.trajectory.total_duration(),
        "segments": r.trajectory.steps.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &a.out {
        write_trajectory(out, &r.trajectory)?;
    }
    Ok(())
}

fn plan(catalog: &SystemCatalog, a: PlanArgs) -> Result<()> {
    let system = catalog.get(&a.system)?;
    check_dim(system, &a.start, "start")?;
    check_dim(system, &a.goal, "goal")?;
    let env = load_env(system, a.scene.as_deref())?;
    let kind = PlannerKind::from_name(&a.planner)?;
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => PlannerConfig::for_planner(kind),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = a.time_budget {
        cfg.time_budget_secs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.stage1 = a.stage1.or(cfg.stage1);
    cfg.stage2 = a.stage2.or(cfg.stage2);
    cfg.use_discriminator &= !a.no_discriminator;
    let sst = SstConfig::for_system(system.kind);
    let bundle = a.checkpoint.as_deref().map(ModelBundle::load).transpose()?;
    let grid = kinoplan::data::scene_grid(&env);
    let sampler = bundle.as_ref().map(|b| NeuralSampler::new(b, &grid)).transpose()?;
    let result = match (kind, sampler.as_ref()) {
        (PlannerKind::Sst, _) => sst_plan(system, &env, &a.start, &a.goal, &cfg, &sst)?,
        (_, None) => bail!("{} needs --checkpoint", kind.name()),
        (k, Some(s)) if a.staged => staged_explore(k, system, &env, Some(s), &a.start, &a.goal, &cfg, &sst)?,
        (PlannerKind::MpPath, Some(s)) => mpnet_path_plan(system, &env, s, &a.start, &a.goal, &cfg)?,
        (PlannerKind::MpTree, Some(s)) => mpnet_tree_plan(system, &env, s, &a.start, &a.goal, &cfg)?,
    };
    print_plan(&result)?;
    if let (Some(out), Some(t)) = (&a.out, &result.trajectory) {
        write_trajectory(out, t)?;
    }
    Ok(())
}

fn print_plan(r: &PlanResult) -> Result<()> {
    let summary = serde_json::json!({
        "status": r.status,
        "cost": r.cost,
        "iterations": r.iterations,
        "wall_time": r.wall_time,
        "tree_size": r.tree_size,
        "stats": r.stats,
        "terminal_state": r.trajectory.as_ref().map(|t| &t.terminal_state),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn gen_scenes(catalog: &SystemCatalog, a: GenScenesArgs) -> Result<()> {
    let system = catalog.get(&a.system)?;
    let dd = DataDir::new(&a.dir.data_dir);
    dd.create()?;
    let mut entries = Vec::new();
    for i in 0..(a.seen + a.unseen) {
        let seed = a.seed + i as u64;
        let scene = make_scene(system.kind, seed)?;
        dd.save_scene(&scene)?;
        entries.push(SceneEntry { seed, unseen: i >= a.seen, demos: 0 });
    }
    let m = DatasetManifest::new(system.name(), entries, true);
    m.save(&dd.manifest())?;
    println!("wrote {} seen and {} unseen {} scenes to {}", a.seen, a.unseen, system.name(), dd.root.display());
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) if n > 0 => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        _ => Ok(f()),
    }
}

fn gen_demos(catalog: &SystemCatalog, a: GenDemosArgs) -> Result<()> {
    let dd = DataDir::new(&a.dir.data_dir);
    let mut m = DatasetManifest::load(&dd.manifest())?;
    let system = catalog.get(&m.system)?;
    let mut sst = SstConfig::for_system(system.kind);
    sst.shoot_samples = a.shoot_samples.unwrap_or(sst.shoot_samples);
    sst.goal_bias = a.goal_bias.unwrap_or(sst.goal_bias);
    let cfg = DemoConfig {
        sst: Some(sst),
        max_iterations: a.max_iterations,
        time_budget_secs: a.time_budget,
        max_pair_distance: a.max_pair_distance,
        attempts: a.attempts,
    };
    for entry in &mut m.scenes {
        let scene = dd.load_scene(entry.seed)?;
        let seed = a.seed ^ entry.seed.rotate_left(32);
        let report = with_workers(a.workers, || generate_demonstrations(system, &scene, a.per_scene, &cfg, seed))??;
        dd.save_demos(entry.seed, &report.demos)?;
        entry.demos = report.demos.len();
        println!(
            "scene {}: {} of {} solved ({} failed)",
            entry.seed,
            report.demos.len(),
            report.requested,
            report.failed
        );
    }
    m.desk_scale = a.per_scene < 1000;
    m.save(&dd.manifest())?;
    Ok(())
}

fn build_dataset(catalog: &SystemCatalog, a: BuildDatasetArgs) -> Result<()> {
    if !(0.10..=0.20).contains(&a.test_fraction) {
        bail!("test fraction must lie in [0.10, 0.20]");
    }
    let dd = DataDir::new(&a.dir.data_dir);
    let mut m = DatasetManifest::load(&dd.manifest())?;
    let system = catalog.get(&m.system)?;
    let scenes = dd.load_scenes(&m)?;
    let demos = m.scenes.iter().map(|s| dd.load_demos(s.seed)).collect::<Result<Vec<_>, _>>()?;
    let samples = build_samples(system, &scenes, &demos, a.seed)?;
    m.test_fraction = a.test_fraction;
    let sp = split(&samples, &m, a.seed)?;
    save_samples(&dd.train(), &sp.train)?;
    save_samples(&dd.test(), &sp.test)?;
    m.test_demos = sp.test_demos;
    m.save(&dd.manifest())?;
    println!("{} train and {} test samples", sp.train.len(), sp.test.len());
    Ok(())
}

fn write_losses(path: Option<&Path>, losses: &[f64]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, l)?;
    }
    Ok(())
}

fn train_gen(catalog: &SystemCatalog, a: TrainArgs) -> Result<()> {
    let dd = DataDir::new(&a.dir.data_dir);
    let m = DatasetManifest::load(&dd.manifest())?;
    let system = catalog.get(&m.system)?;
    let grids: Vec<_> = dd.load_scenes(&m)?.into_iter().map(|s| s.grid).collect();
    let samples = load_samples(&dd.train())?;
    let model = ModelConfig {
        hidden: a.hidden,
        latent: a.latent,
        dropout: a.dropout,
        ..ModelConfig::default()
    };
    let cfg = a.train.config();
    let out = train_generator(system, &grids, &samples, &model, &cfg)?;
    let (encoder, generator) = out.model;
    ModelBundle::new(system.name(), model).with_generator(encoder, generator, cfg).save(&a.out)?;
    write_losses(a.train.loss_csv.as_deref(), &out.losses)?;
    println!("final loss {:.6}", out.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_disc(catalog: &SystemCatalog, a: TrainDiscArgs) -> Result<()> {
    let dd = DataDir::new(&a.dir.data_dir);
    let m = DatasetManifest::load(&dd.manifest())?;
    let system = catalog.get(&m.system)?;
    let bundle = ModelBundle::load(&a.checkpoint)?;
    if bundle.system != system.name() {
        bail!("checkpoint is for {}, dataset for {}", bundle.system, system.name());
    }
    let encoder = bundle.encoder.as_ref().context("checkpoint has no encoder")?;
    let grids: Vec<_> = dd.load_scenes(&m)?.into_iter().map(|s| s.grid).collect();
    let samples = load_samples(&dd.train())?;
    let cfg = a.train.config();
    let out = train_discriminator(system, encoder, &grids, &samples, &bundle.model, &cfg)?;
    bundle.with_discriminator(out.model, cfg).save(&a.out)?;
    write_losses(a.train.loss_csv.as_deref(), &out.losses)?;
    println!("final loss {:.6}", out.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn bench(catalog: &SystemCatalog, cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Run(a) => {
            let (cfg, system, bundle) = bench_inputs(catalog, &a)?;
            let suite = cfg.suite(&system)?;
            let mut settings = cfg.settings.clone();
            settings.workers = a.workers.unwrap_or(settings.workers);
            let report = benchmark::run_benchmark(&cfg.planners, &suite, &settings, bundle.as_ref())?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::create_dir_all(&a.out)?;
            report.save(&a.out.join("report.json"))?;
            benchmark::export(&report, &a.out)?;
            print_aggregates(&report);
            Ok(())
        }
        BenchCommand::Ablation(a) => {
            let (cfg, system, bundle) = bench_inputs(catalog, &a)?;
            let bundle = bundle.context("ablation needs --checkpoint")?;
            let suite = cfg.suite(&system)?;
            let workers = a.workers.unwrap_or(cfg.settings.workers);
            let rep = benchmark::run_ablation(&suite, &cfg.settings.mp_path, &bundle, workers)?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&rep)?)?;
            let rows = rep
                .pairs
                .iter()
                .flat_map(|p| {
                    let tag = |r: &benchmark::Row, name: &str| benchmark::Row { planner: name.into(), ..r.clone() };
                    [tag(&p.without, "mp-path-without-d"), tag(&p.with, "mp-path-with-d")]
                })
                .collect::<Vec<_>>();
            let report = BenchmarkReport {
                aggregates: benchmark::aggregate(&rows),
                rows,
                warnings: Vec::new(),
            };
            benchmark::export(&report, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&rep.summary)?);
            Ok(())
        }
        BenchCommand::Export { report, out } => {
            let r = BenchmarkReport::load(&report)?;
            benchmark::export(&r, &out)?;
            Ok(())
        }
    }
}

fn bench_inputs(catalog: &SystemCatalog, a: &BenchArgs) -> Result<(BenchConfig, SystemModel, Option<ModelBundle>)> {
    let cfg = BenchConfig::load(&a.config)?;
    let system = catalog.get(&cfg.system)?.clone();
    let bundle = a.checkpoint.as_deref().map(ModelBundle::load).transpose()?;
    Ok((cfg, system, bundle))
}

fn print_aggregates(r: &BenchmarkReport) {
    println!("planner,scene_class,problems,success_rate,solved_time_mean,solved_cost_mean");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for a in &r.aggregates {
        println!(
            "{},{},{},{:.3},{},{}",
            a.planner,
            a.scene_class,
            a.problems,
            a.success_rate,
            opt(a.solved_time_mean),
            opt(a.solved_cost_mean)
        );
    }
}
