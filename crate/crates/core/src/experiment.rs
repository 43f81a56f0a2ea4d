//! The experiment matrix: models × coordinate conditions, each run as a
//! cross-validation, with table/CSV reports and per-node prediction dumps.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    self, generate_synthetic, kfold_split, misalign, preprocess, realign, DataError,
    FeatureNormalization, GeneratorConfig, MeshDataset, MisalignScope, PreprocessOptions, Split,
    DEFAULT_REALIGN_ITERS,
};
use crate::metrics::{ReportEntry, ReportTable};
use crate::nn::{Family, ModelSpec, NnError};
use crate::train::{
    cross_validate, fold_seed, history_csv, train_fold, CvOptions, CvResult, FoldOutcome,
    TrainConfig, TrainError,
};

/// Process exit codes by failure class.
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    /// Validation problems, I/O problems and numerical failures get
    /// distinct codes.
    pub fn exit_code(&self) -> i32 {
        fn data_code(e: &DataError) -> i32 {
            match e {
                DataError::Io { .. } => EXIT_IO,
                DataError::Geometry(_) => EXIT_NUMERIC,
                _ => EXIT_VALIDATION,
            }
        }
        fn nn_code(e: &NnError) -> i32 {
            match e {
                NnError::Io { .. } => EXIT_IO,
                NnError::Autodiff(_) => EXIT_NUMERIC,
                _ => EXIT_VALIDATION,
            }
        }
        match self {
            ExperimentError::Plan(_) | ExperimentError::Config { .. } => EXIT_VALIDATION,
            ExperimentError::Io { .. } => EXIT_IO,
            ExperimentError::Data(e) => data_code(e),
            ExperimentError::Nn(e) => nn_code(e),
            ExperimentError::Train(e) => match e {
                TrainError::Io { .. } => EXIT_IO,
                TrainError::Config(_)
                | TrainError::EmptySplit(_)
                | TrainError::Checkpoint { .. } => EXIT_VALIDATION,
                TrainError::Data(e) => data_code(e),
                TrainError::Nn(e) => nn_code(e),
                TrainError::Optimizer(_) | TrainError::Metrics(_) => EXIT_NUMERIC,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How subject coordinates are presented to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Coordinates withheld from the model.
    Nocoord,
    /// Meshes in their common (co-registered) frame.
    Aligned,
    /// An independent random isometry per mesh.
    Misaligned,
    /// Misaligned, then registered onto the first training subject.
    Realigned,
    /// Training/validation meshes in one random frame, test meshes in another.
    MisalignedSplit,
}

impl Condition {
    /// Display order of the report columns.
    pub const ALL: [Condition; 5] = [
        Condition::Nocoord,
        Condition::Aligned,
        Condition::Misaligned,
        Condition::Realigned,
        Condition::MisalignedSplit,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Condition::Nocoord => "nocoord",
            Condition::Aligned => "aligned",
            Condition::Misaligned => "misaligned",
            Condition::Realigned => "realigned",
            Condition::MisalignedSplit => "misaligned_split",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Condition::Nocoord => "without coord.",
            Condition::Aligned => "aligned meshes",
            Condition::Misaligned => "misaligned meshes",
            Condition::Realigned => "realigned meshes",
            Condition::MisalignedSplit => "train/test mismatch",
        }
    }

    pub fn uses_coordinates(self) -> bool {
        self != Condition::Nocoord
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Condition {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| {
                ExperimentError::Plan(format!(
                    "unknown condition '{s}' (expected one of {})",
                    Condition::ALL.map(Condition::key).join(", ")
                ))
            })
    }
}

/// The (model, condition) runs of an experiment, in report order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentPlan {
    pub runs: Vec<(Family, Condition)>,
}

impl ExperimentPlan {
    /// Every requested model under every requested condition, except the
    /// EGNN without coordinates, which is undefined.
    pub fn matrix(models: &[Family], conditions: &[Condition]) -> Result<Self> {
        if models.is_empty() || conditions.is_empty() {
            return Err(ExperimentError::Plan(
                "at least one model and one condition are required".into(),
            ));
        }
        let mut runs = Vec::new();
        for family in Family::ALL.into_iter().filter(|f| models.contains(f)) {
            for cond in Condition::ALL
                .into_iter()
                .filter(|c| conditions.contains(c))
            {
                if !(family == Family::Egnn && cond == Condition::Nocoord) {
                    runs.push((family, cond));
                }
            }
        }
        let plan = Self { runs };
        if plan.runs.is_empty() {
            return Err(ExperimentError::Plan(
                "egnn requires coordinates; nothing to run without coordinates".into(),
            ));
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, run) in self.runs.iter().enumerate() {
            if *run == (Family::Egnn, Condition::Nocoord) {
                return Err(ExperimentError::Plan(
                    "egnn cannot run without coordinates".into(),
                ));
            }
            if self.runs[..i].contains(run) {
                return Err(ExperimentError::Plan(format!(
                    "run {}/{} listed twice",
                    run.0, run.1
                )));
            }
        }
        Ok(())
    }
}

/// Everything an experiment needs; mirrors the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset file; when absent a dataset is generated from `generator`.
    pub dataset: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub preprocess: PreprocessOptions,
    pub models: Vec<Family>,
    pub conditions: Vec<Condition>,
    pub folds: usize,
    /// Seeds the fold split and every per-fold model and shuffle seed.
    pub seed: u64,
    /// Seeds the random isometries, independently of the data.
    pub misalign_seed: u64,
    pub jobs: usize,
    pub realign_iters: usize,
    pub train: TrainConfig,
    /// Also report hard Dice next to Jaccard.
    pub dice: bool,
    /// Write each fold's best checkpoint.
    pub save_checkpoints: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            generator: GeneratorConfig::default(),
            preprocess: PreprocessOptions::default(),
            models: Family::ALL.to_vec(),
            conditions: Condition::ALL.to_vec(),
            folds: 10,
            seed: 0,
            misalign_seed: 1,
            jobs: 1,
            realign_iters: DEFAULT_REALIGN_ITERS,
            train: TrainConfig::default(),
            dice: false,
            save_checkpoints: true,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// The single-core desk matrix: 30 subjects of 300 nodes with a weaker
    /// feature signal, 1-hop graphs, mean-scaled column normalization,
    /// 5 folds and the desk training schedule.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig {
                subjects: 30,
                nodes: 300,
                seed: 7,
                snr: 0.6,
                ..GeneratorConfig::default()
            },
            preprocess: PreprocessOptions {
                hops: 1,
                feature_normalization: FeatureNormalization::ColumnMean,
            },
            folds: 5,
            seed: 11,
            misalign_seed: 13,
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        if self.jobs == 0 {
            return Err(ExperimentError::Plan("jobs must be at least 1".into()));
        }
        self.train.validate()?;
        ExperimentPlan::matrix(&self.models, &self.conditions)
    }

    /// Loads `dataset` (preprocessing it if needed) or generates one.
    pub fn dataset(&self) -> Result<MeshDataset> {
        let ds = match &self.dataset {
            Some(path) => data::load(path)?,
            None => generate_synthetic(&self.generator)?,
        };
        if ds.preprocessing.applied {
            Ok(ds)
        } else {
            Ok(preprocess(&ds, &self.preprocess)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub family: Family,
    pub condition: Condition,
    pub cv: CvResult,
}

impl RunResult {
    pub fn name(&self) -> String {
        format!("{}_{}", self.family, self.condition)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    fn table(&self, dice: bool) -> ReportTable {
        let mut models: Vec<String> = Vec::new();
        let mut conditions: Vec<Condition> = Vec::new();
        for r in &self.runs {
            if !models.contains(&r.family.to_string()) {
                models.push(r.family.to_string());
            }
            if !conditions.contains(&r.condition) {
                conditions.push(r.condition);
            }
        }
        conditions.sort_by_key(|c| Condition::ALL.iter().position(|x| x == c));
        ReportTable {
            models,
            conditions: conditions
                .iter()
                .map(|c| (c.key().to_string(), c.header().to_string()))
                .collect(),
            entries: self
                .runs
                .iter()
                .map(|r| ReportEntry {
                    model: r.family.to_string(),
                    condition: r.condition.key().to_string(),
                    report: if dice {
                        r.cv.dice.clone()
                    } else {
                        r.cv.jaccard.clone()
                    },
                })
                .collect(),
        }
    }

    /// Jaccard (IoU) table.
    pub fn jaccard_table(&self) -> ReportTable {
        self.table(false)
    }

    pub fn dice_table(&self) -> ReportTable {
        self.table(true)
    }

    pub fn run(&self, family: Family, condition: Condition) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.family == family && r.condition == condition)
    }

    /// Mean average Jaccard of a run.
    pub fn average(&self, family: Family, condition: Condition) -> Option<f64> {
        self.run(family, condition)
            .map(|r| r.cv.jaccard.average.mean)
    }
}

/// Per-fold dataset variants for each condition.
struct Variants<'a> {
    base: &'a MeshDataset,
    misaligned: Option<MeshDataset>,
    misalign_seed: u64,
    realign_iters: usize,
}

impl<'a> Variants<'a> {
    fn new(base: &'a MeshDataset, plan: &ExperimentPlan, cfg: &ExperimentConfig) -> Result<Self> {
        let needs_misaligned = plan
            .runs
            .iter()
            .any(|(_, c)| matches!(c, Condition::Misaligned | Condition::Realigned));
        let misaligned = if needs_misaligned {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.misalign_seed);
            Some(misalign(base, &mut rng, &MisalignScope::PerMesh)?.0)
        } else {
            None
        };
        Ok(Self {
            base,
            misaligned,
            misalign_seed: cfg.misalign_seed,
            realign_iters: cfg.realign_iters,
        })
    }

    fn fold(
        &self,
        condition: Condition,
        fold: usize,
        split: &Split,
    ) -> std::result::Result<Cow<'_, MeshDataset>, TrainError> {
        let misaligned = || {
            self.misaligned
                .as_ref()
                .expect("misaligned variant prepared")
        };
        Ok(match condition {
            Condition::Nocoord | Condition::Aligned => Cow::Borrowed(self.base),
            Condition::Misaligned => Cow::Borrowed(misaligned()),
            Condition::Realigned => {
                Cow::Owned(realign(misaligned(), split.train[0], self.realign_iters)?.0)
            }
            Condition::MisalignedSplit => {
                let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(self.misalign_seed, fold));
                let train = split.train.iter().chain(&split.val).copied().collect();
                Cow::Owned(misalign(self.base, &mut rng, &MisalignScope::PerSplit { train })?.0)
            }
        })
    }
}

/// Runs every planned (model, condition) cross-validation on `ds`.
/// `progress` receives one line per finished run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    ds: &MeshDataset,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentResult> {
    let plan = cfg.plan()?;
    if !ds.preprocessing.applied {
        return Err(DataError::NotPreprocessed.into());
    }
    let variants = Variants::new(ds, &plan, cfg)?;
    let opts = CvOptions {
        folds: cfg.folds,
        seed: cfg.seed,
        jobs: cfg.jobs,
    };
    let mut runs = Vec::new();
    for &(family, condition) in &plan.runs {
        let spec = run_spec(family, condition, ds);
        let fold_data = |fold: usize, split: &Split| variants.fold(condition, fold, split);
        let cv = cross_validate(&spec, ds, &cfg.train, &opts, &fold_data)?;
        progress(&format!(
            "{family}/{condition}: average Jaccard {}",
            cv.jaccard.average.cell()
        ));
        runs.push(RunResult {
            family,
            condition,
            cv,
        });
    }
    Ok(ExperimentResult { runs })
}

/// Trains and tests a single fold of one (model, condition) run, exactly as
/// the full matrix would.
pub fn train_single(
    cfg: &ExperimentConfig,
    ds: &MeshDataset,
    family: Family,
    condition: Condition,
    fold: usize,
) -> Result<FoldOutcome> {
    let plan = ExperimentPlan {
        runs: vec![(family, condition)],
    };
    plan.validate()?;
    cfg.train.validate()?;
    if !ds.preprocessing.applied {
        return Err(DataError::NotPreprocessed.into());
    }
    let splits = kfold_split(ds.subjects.len(), cfg.folds, cfg.seed)?;
    let split = splits.get(fold).ok_or_else(|| {
        ExperimentError::Plan(format!("fold {fold} out of range for {} folds", cfg.folds))
    })?;
    let variants = Variants::new(ds, &plan, cfg)?;
    let data = variants.fold(condition, fold, split)?;
    Ok(train_fold(
        &run_spec(family, condition, ds),
        &data,
        split,
        fold,
        cfg.seed,
        &cfg.train,
    )?)
}

fn run_spec(family: Family, condition: Condition, ds: &MeshDataset) -> ModelSpec {
    let mut spec = ModelSpec::new(family, condition.uses_coordinates(), 0);
    spec.in_features = ds.num_features();
    spec
}

/// `subject,fold,node,label` for every test mesh of the given folds.
pub fn predictions_csv(folds: &[FoldOutcome]) -> String {
    let mut out = String::from("subject,fold,node,label\n");
    let mut rows: Vec<(usize, usize, &Vec<usize>)> = Vec::new();
    for f in folds {
        for (subject, labels) in f.split.test.iter().zip(&f.evaluation.predictions) {
            rows.push((*subject, f.fold, labels));
        }
    }
    rows.sort_by_key(|r| r.0);
    for (subject, fold, labels) in rows {
        for (node, label) in labels.iter().enumerate() {
            let _ = writeln!(out, "{subject},{fold},{node},{label}");
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes the report tables, per-fold scores, histories, predictions and
/// (optionally) checkpoints under `dir`. Returns the files written.
pub fn write_outputs(
    result: &ExperimentResult,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut checkpoints = Vec::new();
    for sub in ["", "history", "predictions", "checkpoints"] {
        if sub == "checkpoints" && !cfg.save_checkpoints {
            continue;
        }
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut emit = |name: PathBuf, text: &str| -> Result<()> {
        write(&name, text)?;
        written.push(name);
        Ok(())
    };
    let table = result.jaccard_table();
    emit(dir.join("report.txt"), &table.to_text())?;
    emit(dir.join("report.csv"), &table.to_csv())?;
    emit(dir.join("folds.csv"), &table.folds_csv())?;
    if cfg.dice {
        let dice = result.dice_table();
        emit(dir.join("report_dice.txt"), &dice.to_text())?;
        emit(dir.join("report_dice.csv"), &dice.to_csv())?;
        emit(dir.join("folds_dice.csv"), &dice.folds_csv())?;
    }
    for run in &result.runs {
        let name = run.name();
        emit(
            dir.join("predictions").join(format!("{name}.csv")),
            &predictions_csv(&run.cv.folds),
        )?;
        for f in &run.cv.folds {
            emit(
                dir.join("history")
                    .join(format!("{name}_fold{}.csv", f.fold)),
                &history_csv(&f.history),
            )?;
            if cfg.save_checkpoints {
                let path = dir
                    .join("checkpoints")
                    .join(format!("{name}_fold{}.json", f.fold));
                f.best.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    written.extend(checkpoints);
    Ok(written)
}
