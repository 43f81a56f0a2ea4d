use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use meshseg::data::{
    self, generate_synthetic, misalign, preprocess, DataError, FeatureNormalization,
    GeneratorConfig, MeshDataset, MisalignScope, PreprocessOptions, DEFAULT_HOPS,
    DEFAULT_REALIGN_ITERS,
};
use meshseg::experiment::{
    predictions_csv, run_experiment, train_single, write_outputs, Condition, ExperimentConfig,
    ExperimentError,
};
use meshseg::geometry::register_iterative;
use meshseg::metrics::{ClassScores, CLASS_NAMES};
use meshseg::nn::Family;
use meshseg::train::{evaluate, history_csv, prepare, Checkpoint};

/// Default output directory when `--out` is not given.
const OUT_ENV: &str = "MESHSEG_OUT";
const DEFAULT_OUT: &str = "results";

#[derive(Parser)]
#[command(
    name = "meshseg",
    version,
    about = "Mesh segmentation with plain and E(n)-equivariant graph networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (and preprocess) a synthetic dataset.
    Generate(GenerateArgs),
    /// Run the models × conditions cross-validation matrix.
    Experiment(ExperimentArgs),
    /// Register every subject onto a reference subject.
    Register(RegisterArgs),
    /// Train one fold of one model/condition.
    Train(TrainArgs),
    /// Evaluate a checkpoint on dataset subjects.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    #[arg(long, default_value_t = 1195)]
    nodes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Strength of the label-dependent feature signal.
    #[arg(long, default_value_t = 1.0)]
    snr: f64,
    #[arg(long, default_value_t = DEFAULT_HOPS)]
    hops: usize,
    /// column, column_mean, node or none.
    #[arg(long, default_value = "column")]
    feature_normalization: FeatureNormalization,
    /// Skip preprocessing.
    #[arg(long)]
    raw: bool,
    /// Apply a random isometry per subject and log them next to the output.
    #[arg(long)]
    misalign_seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

/// Dataset selection shared by the commands that consume one.
#[derive(Args)]
struct DataArgs {
    /// Dataset file; generated from the flags below when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    feature_normalization: Option<FeatureNormalization>,
}

/// Options shared by `experiment` and `train`.
#[derive(Args)]
struct RunArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    misalign_seed: Option<u64>,
    #[arg(long)]
    realign_iters: Option<usize>,
    /// Desk-scale preset (30 subjects x 300 nodes, 1-hop graphs, 5 folds,
    /// short schedule); other flags still override it.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    /// Output directory (default: $MESHSEG_OUT, else ./results).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated subset of mlp,gnn,egnn.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<Family>>,
    /// Comma-separated subset of nocoord,aligned,misaligned,realigned,misaligned_split.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<Condition>>,
    /// Worker threads for fold training.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also report hard Dice.
    #[arg(long)]
    dice: bool,
    /// Do not write per-fold checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Reference subject index.
    #[arg(long = "ref", default_value_t = 0)]
    reference: usize,
    #[arg(long, default_value_t = DEFAULT_REALIGN_ITERS)]
    iters: usize,
    /// Comma-separated subject indices (default: all).
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    model: Family,
    #[arg(long, default_value = "aligned")]
    condition: Condition,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated subject indices (default: all).
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<usize>>,
    /// Write per-node predicted labels here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Register(a) => cmd_register(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn scores_line(label: &str, s: &ClassScores) -> String {
    format!(
        "{label}: {} {:.1}  {} {:.1}  {} {:.1}  average {:.1}",
        CLASS_NAMES[0],
        100.0 * s.background,
        CLASS_NAMES[1],
        100.0 * s.ba44,
        CLASS_NAMES[2],
        100.0 * s.ba45,
        100.0 * s.average()
    )
}

fn cmd_generate(a: GenerateArgs) -> Result<(), ExperimentError> {
    let raw = generate_synthetic(&GeneratorConfig {
        subjects: a.subjects,
        nodes: a.nodes,
        seed: a.seed,
        snr: a.snr,
        ..GeneratorConfig::default()
    })?;
    let base_edges = raw.topology.num_edges();
    let mut ds = if a.raw {
        raw
    } else {
        preprocess(
            &raw,
            &PreprocessOptions {
                feature_normalization: a.feature_normalization,
                hops: a.hops,
            },
        )?
    };
    if let Some(seed) = a.misalign_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (moved, isos) = misalign(&ds, &mut rng, &MisalignScope::PerMesh)?;
        ds = moved;
        let mut log = String::new();
        for iso in &isos {
            let _ = writeln!(log, "{}", iso.to_text());
        }
        let path = PathBuf::from(format!("{}.isometries", a.out.display()));
        write_file(&path, &log)?;
        println!("isometries: {}", path.display());
    }
    data::save(&ds, &a.out)?;
    let balance = ds.class_balance();
    println!("subjects: {}", ds.subjects.len());
    println!("nodes: {}", ds.num_nodes());
    println!(
        "edges: {base_edges} base, {} after expansion",
        ds.topology.num_edges()
    );
    println!(
        "class balance: {} {:.3}, {} {:.3}, {} {:.3}",
        CLASS_NAMES[0], balance[0], CLASS_NAMES[1], balance[1], CLASS_NAMES[2], balance[2]
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Config file (if any) with the command-line overrides applied.
fn experiment_config(data: &DataArgs, run: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &run.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if run.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &data.data {
        cfg.dataset = Some(p.clone());
    }
    let g = &mut cfg.generator;
    g.subjects = data.subjects.unwrap_or(g.subjects);
    g.nodes = data.nodes.unwrap_or(g.nodes);
    g.seed = data.data_seed.unwrap_or(g.seed);
    g.snr = data.snr.unwrap_or(g.snr);
    cfg.preprocess.hops = data.hops.unwrap_or(cfg.preprocess.hops);
    if let Some(n) = data.feature_normalization {
        cfg.preprocess.feature_normalization = n;
    }
    cfg.folds = run.folds.unwrap_or(cfg.folds);
    cfg.seed = run.seed.unwrap_or(cfg.seed);
    cfg.misalign_seed = run.misalign_seed.unwrap_or(cfg.misalign_seed);
    cfg.realign_iters = run.realign_iters.unwrap_or(cfg.realign_iters);
    if let Some(out) = &run.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    })
}

fn cmd_experiment(a: ExperimentArgs) -> Result<(), ExperimentError> {
    let mut cfg = experiment_config(&a.data, &a.run)?;
    if let Some(m) = a.models {
        cfg.models = m;
    }
    if let Some(c) = a.conditions {
        cfg.conditions = c;
    }
    cfg.jobs = a.jobs.unwrap_or(cfg.jobs);
    cfg.dice |= a.dice;
    if a.no_checkpoints {
        cfg.save_checkpoints = false;
    }
    let plan = cfg.plan()?;
    let dir = output_dir(&cfg);
    let ds = cfg.dataset()?;
    eprintln!(
        "{} runs x {} folds on {} subjects, {} nodes",
        plan.runs.len(),
        cfg.folds,
        ds.subjects.len(),
        ds.num_nodes()
    );
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let log_path = dir.join("run.log");
    let mut log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let start = Instant::now();
    let result = run_experiment(&cfg, &ds, &mut |line| {
        let line = format!("[{:>8.1}s] {line}", start.elapsed().as_secs_f64());
        eprintln!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    write_outputs(&result, &cfg, &dir)?;
    let config_path = dir.join("config.json");
    write_file(
        &config_path,
        &serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    print!("{}", result.jaccard_table().to_text());
    if cfg.dice {
        println!("\nDice:");
        print!("{}", result.dice_table().to_text());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> Result<(), ExperimentError> {
    let ds = data::load(&a.data)?;
    let count = ds.subjects.len();
    if count < 2 {
        return Err(ExperimentError::Plan(format!(
            "registration needs at least 2 subjects, got {count}"
        )));
    }
    if a.iters == 0 {
        return Err(ExperimentError::Plan("--iters must be at least 1".into()));
    }
    let bad = |index: usize| DataError::BadSubject { index, count };
    if a.reference >= count {
        return Err(bad(a.reference).into());
    }
    let subjects = a.subjects.unwrap_or_else(|| (0..count).collect());
    if let Some(&s) = subjects.iter().find(|&&s| s >= count) {
        return Err(bad(s).into());
    }
    let target = &ds.subjects[a.reference].coords;
    for s in subjects {
        let fit =
            register_iterative(&ds.subjects[s].coords, target, a.iters).map_err(DataError::from)?;
        let det = fit.isometry.determinant();
        println!(
            "subject {s} det {det:+.0} reflection {}{}",
            fit.isometry.is_reflection(),
            if fit.ill_conditioned {
                " ill-conditioned"
            } else {
                ""
            }
        );
        println!("isometry {}", fit.isometry.to_text());
        let residuals: Vec<String> = std::iter::once(fit.initial_rms)
            .chain(fit.residuals.iter().copied())
            .map(|r| format!("{r:.6e}"))
            .collect();
        println!("rms {}", residuals.join(" "));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), ExperimentError> {
    let cfg = experiment_config(&a.data, &a.run)?;
    let ds = cfg.dataset()?;
    let outcome = train_single(&cfg, &ds, a.model, a.condition, a.fold)?;
    let dir = output_dir(&cfg);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join("checkpoint.json");
    outcome.best.save(&ckpt)?;
    write_file(&dir.join("history.csv"), &history_csv(&outcome.history))?;
    write_file(
        &dir.join("predictions.csv"),
        &predictions_csv(std::slice::from_ref(&outcome)),
    )?;
    println!(
        "best epoch {} ({}), validation loss {:.6}",
        outcome.best.epoch,
        outcome.best.stage.name(),
        outcome.best.val_loss
    );
    println!(
        "{}",
        scores_line("test Jaccard", &outcome.evaluation.jaccard)
    );
    println!("{}", scores_line("test Dice", &outcome.evaluation.dice));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), ExperimentError> {
    let ds: MeshDataset = data::load(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.restore()?;
    let subjects = a
        .subjects
        .unwrap_or_else(|| (0..ds.subjects.len()).collect());
    let prepared = prepare(&ds, &subjects)?;
    let eval = evaluate(&model, &prepared)?;
    println!("{}", scores_line("Jaccard", &eval.jaccard));
    println!("{}", scores_line("Dice", &eval.dice));
    if let Some(path) = a.predictions {
        let mut out = String::from("subject,node,label\n");
        for (s, labels) in subjects.iter().zip(&eval.predictions) {
            for (node, label) in labels.iter().enumerate() {
                let _ = writeln!(out, "{s},{node},{label}");
            }
        }
        write_file(&path, &out)?;
    }
    Ok(())
}
