//! Command-line front end for learned weighted Rips filtrations.
//!
//! Exit codes: 0 success, 2 input error, 3 checkpoint or state error,
//! 4 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use topofilt::filtration::{dtm_weights, weighted_rips_filtration, WeightVector};
use topofilt::geometry::{generate_dataset, pairwise_distances, DistanceMatrix, PointCloud, SyntheticSpec, SyntheticTask};
use topofilt::io::{
    cloud_from_csv, diagram_svg, diagram_to_csv, distances_from_csv, load_checkpoint, load_dataset, parse_config,
    save_checkpoint, save_dataset, scatter_svg, write_atomic, write_config, DirLock, RunManifest,
};
use topofilt::persistence::compute_persistence;
use topofilt::training::gradsuite::{gradcheck_suite, MAX_REL_ERROR};
use topofilt::training::{
    build_dataset, evaluate_checkpoint, load_models, report_csv, run_experiment, DataShape, DataSource, ExperimentConfig,
};
use topofilt::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "topofilt", version, about = "Learned weighted Rips filtrations for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of labeled point clouds.
    Generate(GenerateArgs),
    /// Compute a persistence diagram of one cloud or distance matrix.
    Pd(PdArgs),
    /// Train and evaluate models over cross-validation folds.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint on the held-out split of its fold.
    Eval(EvalArgs),
    /// Write the learned weight of every point of a cloud.
    ExportWeights(ExportArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// circle_vs_disk or two_scales.
    #[arg(long, default_value = "circle_vs_disk")]
    task: String,
    /// Signal points per cloud.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    outliers: usize,
    /// Standard deviation of the coordinate noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Number of clouds, balanced over the two classes.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FiltrationArg {
    Rips,
    Dtm,
    Learned,
}

#[derive(Args)]
struct PdArgs {
    /// Point cloud CSV, or a distance matrix with --distances or a `.dist.csv` name.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    distances: bool,
    #[arg(long, value_enum, default_value = "rips")]
    filtration: FiltrationArg,
    #[arg(long, default_value_t = 2)]
    k0: usize,
    #[arg(long, default_value_t = 2.0)]
    q: f64,
    /// Trained checkpoint for the learned filtration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = f64::INFINITY)]
    t_max: f64,
    /// Highest homology degree (0 or 1).
    #[arg(long, default_value_t = 1)]
    degree: usize,
    /// Diagram CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional SVG plot of the top-degree diagram.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file in the sectioned key = value format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// classify, two-phase, distmatrix or dtm-regression.
    #[arg(long)]
    mode: Option<String>,
    /// rips, dtm or learned.
    #[arg(long)]
    filtration: Option<String>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    run_folds: Option<usize>,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory, when the checkpoint's config does not generate one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG scatter colored by weight (first two coordinates).
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) | Error::Json(_) => 3,
        Error::NonFinite(_)
        | Error::NonMonotoneFiltration(_)
        | Error::EssentialMismatch(..)
        | Error::PairingMismatch(_)
        | Error::InfinitePoint(_) => 4,
        _ => 2,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn checkpoint(path: &Path) -> Result<topofilt::autodiff::Checkpoint> {
    load_checkpoint(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let task = SyntheticTask::parse(&a.task).ok_or_else(|| Error::InvalidInput(format!("unknown task {:?}", a.task)))?;
    let spec = SyntheticSpec {
        task,
        n_points: a.n,
        n_outliers: a.outliers,
        noise_sigma: a.noise,
    };
    let clouds = generate_dataset(&spec, a.count, a.seed)?;
    let _lock = DirLock::acquire(&a.out)?;
    save_dataset(&a.out, &clouds)?;
    let config = BTreeMap::from([
        ("task".to_string(), task.name().to_string()),
        ("n_points".into(), a.n.to_string()),
        ("n_outliers".into(), a.outliers.to_string()),
        ("noise_sigma".into(), format!("{:?}", a.noise)),
        ("count".into(), a.count.to_string()),
    ]);
    let mut m = RunManifest::new("generate", config, vec![a.seed]);
    m.record_outputs(&a.out)?;
    m.write(&a.out)?;
    eprintln!("wrote {} clouds to {}", clouds.len(), a.out.display());
    Ok(())
}

fn read_distances(input: &Path, as_matrix: bool) -> Result<(DistanceMatrix, Option<PointCloud>)> {
    let text = read(input)?;
    if as_matrix || input.to_string_lossy().ends_with(".dist.csv") {
        Ok((distances_from_csv(&text)?, None))
    } else {
        let pc = cloud_from_csv(&text)?;
        Ok((pairwise_distances(&pc), Some(pc)))
    }
}

fn learned_weights(ckpt_path: &Path, d: &DistanceMatrix) -> Result<WeightVector> {
    let (_, store, models) = load_models(&checkpoint(ckpt_path)?)?;
    let net = models
        .weightnet()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no weight network".into()))?;
    net.weights(&store, d)
}

fn pd(a: PdArgs) -> Result<()> {
    if a.degree > 1 {
        return Err(Error::InvalidInput("degree must be 0 or 1".into()));
    }
    let (d, _) = read_distances(&a.input, a.distances)?;
    let w = match a.filtration {
        FiltrationArg::Rips => WeightVector::zeros(d.len()),
        FiltrationArg::Dtm => dtm_weights(&d, a.k0, a.q)?,
        FiltrationArg::Learned => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("--filtration learned needs --checkpoint".into()))?;
            learned_weights(path, &d)?
        }
    };
    let f = weighted_rips_filtration(&d, &w, a.degree + 1, a.t_max)?;
    let diag = compute_persistence(&f, a.degree)?;
    write_out(a.out.as_deref(), &diagram_to_csv(&diag))?;
    if let Some(svg) = &a.svg {
        write_atomic(svg, diagram_svg(&diag, a.degree).as_bytes())?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut map = match &a.config {
        Some(p) => parse_config(&read(p)?)?,
        None => BTreeMap::new(),
    };
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    set("experiment.mode", a.mode.clone());
    set("filtration.mode", a.filtration.clone());
    set("filtration.k0", a.k0.map(|v| v.to_string()));
    set("filtration.q", a.q.map(|v| format!("{v:?}")));
    set("experiment.seed", a.seed.map(|v| v.to_string()));
    set("optim.epochs1", a.epochs1.map(|v| v.to_string()));
    set("optim.epochs2", a.epochs2.map(|v| v.to_string()));
    set("experiment.folds", a.folds.map(|v| v.to_string()));
    set("experiment.run_folds", a.run_folds.map(|v| v.to_string()));
    if let Some(dir) = &a.data {
        set("data.source", Some("dir".into()));
        set("data.dir", Some(dir.display().to_string()));
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("--set expects key=value, got {s:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let cfg = ExperimentConfig::from_map(&map)?;
    cfg.validate()?;
    let data = match &cfg.data {
        DataSource::Directory(dir) => load_dataset(Path::new(dir))?,
        _ => build_dataset(&cfg)?,
    };
    let _lock = DirLock::acquire(&a.out)?;
    let report = run_experiment(&cfg, &data)?;
    write_atomic(&a.out.join("config.ini"), write_config(&cfg.to_map()).as_bytes())?;
    let mut metrics = String::new();
    for m in &report.metrics {
        metrics.push_str(&m.to_json_line()?);
        metrics.push('\n');
    }
    write_atomic(&a.out.join("metrics.jsonl"), metrics.as_bytes())?;
    let csv = report_csv(&report.rows);
    write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    for (stem, ckpt) in &report.checkpoints {
        save_checkpoint(&a.out.join(format!("{stem}.ckpt.json")), ckpt)?;
    }
    let mut manifest = RunManifest::new("train", cfg.to_map(), vec![cfg.seed]);
    if let Some(p) = &a.config {
        manifest.add_input(p)?;
    }
    if let DataSource::Directory(dir) = &cfg.data {
        manifest.add_input(Path::new(dir))?;
    }
    manifest.record_outputs(&a.out)?;
    manifest.write(&a.out)?;
    if report.frozen_unchanged.iter().any(|ok| !ok) {
        return Err(Error::Checkpoint("frozen DeepSets parameters changed during phase two".into()));
    }
    print!("{csv}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint(&a.checkpoint)?;
    let mut cfg = topofilt::training::checkpoint_config(&ckpt)?;
    if let Some(dir) = &a.data {
        cfg.data = DataSource::Directory(dir.display().to_string());
    }
    let data = match &cfg.data {
        DataSource::Directory(dir) => load_dataset(Path::new(dir))?,
        _ => build_dataset(&cfg)?,
    };
    let records = evaluate_checkpoint(&cfg, &data, &ckpt)?;
    let mut out = String::new();
    for r in &records {
        out.push_str(&r.to_json_line()?);
        out.push('\n');
    }
    write_out(a.out.as_deref(), &out)
}

fn export_weights(a: ExportArgs) -> Result<()> {
    let ckpt = checkpoint(&a.checkpoint)?;
    let pc = cloud_from_csv(&read(&a.input)?)?;
    if let Some(dim) = DataShape::from_checkpoint(&ckpt)?.input_dim {
        if dim != pc.dim() {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: pc.dim(),
            });
        }
    }
    let (_, store, models) = load_models(&ckpt)?;
    let net = models
        .weightnet()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no weight network".into()))?;
    let w = net.weights(&store, &pairwise_distances(&pc))?;
    let mut csv = String::from("index");
    for k in 0..pc.dim() {
        csv.push_str(&format!(",x{k}"));
    }
    csv.push_str(",weight,outlier_flag\n");
    for (i, (p, &flag)) in pc.points().zip(pc.outliers()).enumerate() {
        csv.push_str(&i.to_string());
        for v in p {
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push_str(&format!(",{:?},{}\n", w.0[i], u8::from(flag)));
    }
    write_atomic(&a.out, csv.as_bytes())?;
    if let Some(svg) = &a.svg {
        let xy: Vec<(f64, f64)> = pc.points().map(|p| (p[0], p.get(1).copied().unwrap_or(0.0))).collect();
        write_atomic(svg, scatter_svg(&xy, Some(&w.0), Some(pc.outliers()), false, "learned weights").as_bytes())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck_suite(a.seed)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<18} cases {:>3}  max rel error {:.3e}", r.name, r.cases, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("overall max rel error {worst:.3e}");
    if worst >= MAX_REL_ERROR {
        return Err(Error::NonFinite(format!("gradient error {worst:.3e} exceeds {MAX_REL_ERROR:e}")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pd(a) => pd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportWeights(a) => export_weights(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
