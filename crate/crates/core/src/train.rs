//! Optimizers, the two-stage Adam → SGD training protocol with early
//! stopping and best-checkpoint restoration, evaluation, and k-fold
//! cross-validation with deterministic per-fold seeds.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, Tape};
use crate::data::{kfold_split, DataError, MeshDataset, Split};
use crate::metrics::{
    aggregate, argmax_rows, dice_loss, dice_loss_grouped, one_hot, ClassScores, FoldReport,
    MetricsError,
};
use crate::nn::{EdgeIndex, Mode, Model, ModelSpec, ModelState, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam {
        cfg: AdamConfig,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u64,
    },
    Sgd {
        cfg: SgdConfig,
        velocity: Vec<Vec<f64>>,
    },
}

fn slots(shapes: &[&Array]) -> Vec<Vec<f64>> {
    shapes.iter().map(|a| vec![0.0; a.len()]).collect()
}

impl Optimizer {
    pub fn adam(cfg: AdamConfig, params: &[&Array]) -> Self {
        Optimizer::Adam {
            cfg,
            m: slots(params),
            v: slots(params),
            step: 0,
        }
    }

    pub fn sgd(cfg: SgdConfig, params: &[&Array]) -> Self {
        Optimizer::Sgd {
            cfg,
            velocity: slots(params),
        }
    }

    pub fn for_model_adam(cfg: AdamConfig, model: &Model) -> Self {
        let shapes: Vec<&Array> = model.params().iter().map(|p| &p.value).collect();
        Self::adam(cfg, &shapes)
    }

    pub fn for_model_sgd(cfg: SgdConfig, model: &Model) -> Self {
        let shapes: Vec<&Array> = model.params().iter().map(|p| &p.value).collect();
        Self::sgd(cfg, &shapes)
    }

    fn check(&self, index: usize, param: &Array, grad: &Array) -> Result<()> {
        let len = match self {
            Optimizer::Adam { m, .. } => m.get(index).map(Vec::len),
            Optimizer::Sgd { velocity, .. } => velocity.get(index).map(Vec::len),
        };
        if len != Some(param.len()) || param.shape() != grad.shape() {
            return Err(TrainError::Optimizer(format!(
                "parameter {index}: shape {:?}, gradient {:?}, state {len:?}",
                param.shape(),
                grad.shape()
            )));
        }
        Ok(())
    }

    fn update(&mut self, index: usize, param: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Adam { cfg, m, v, step } => {
                let t = *step as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for (((p, g), mi), vi) in param
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut m[index])
                    .zip(&mut v[index])
                {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                    *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                }
            }
            Optimizer::Sgd { cfg, velocity } => {
                for ((p, g), vel) in param.iter_mut().zip(grad).zip(&mut velocity[index]) {
                    *vel = cfg.momentum * *vel + g;
                    *p -= cfg.lr * *vel;
                }
            }
        }
    }

    fn begin_step(&mut self, count: usize, grads: usize) -> Result<()> {
        if count != grads {
            return Err(TrainError::Optimizer(format!(
                "{count} parameters but {grads} gradients"
            )));
        }
        if let Optimizer::Adam { step, .. } = self {
            *step += 1;
        }
        Ok(())
    }

    /// One update of free-standing parameter arrays.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            self.check(i, p, g)?;
        }
        self.begin_step(params.len(), grads.len())?;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p.data_mut(), g.data());
        }
        Ok(())
    }

    /// One update of a model's parameters, in parameter order.
    pub fn step_model(&mut self, model: &mut Model, grads: &[Array]) -> Result<()> {
        for (i, (p, g)) in model.params().iter().zip(grads).enumerate() {
            self.check(i, &p.value, g)?;
        }
        self.begin_step(model.params().len(), grads.len())?;
        model.update_params(|i, p| self.update(i, p.data_mut(), grads[i].data()));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Stage 1 stops once validation loss has not improved for this many
    /// epochs.
    pub stage1_patience: usize,
    /// Hard cap on stage-1 epochs.
    pub stage1_max_epochs: usize,
    pub stage2_epochs: usize,
    pub adam: AdamConfig,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            stage1_patience: 200,
            stage1_max_epochs: 100_000,
            stage2_epochs: 200,
            adam: AdamConfig::default(),
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for single-core desk runs: short patience, capped
    /// epochs, and minibatches of 2 so that a small training split still
    /// gets several optimizer steps per epoch.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            stage1_patience: 15,
            stage1_max_epochs: 50,
            stage2_epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stage1_patience == 0 || self.stage1_max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size, stage1_patience and stage1_max_epochs must be positive".into(),
            ));
        }
        for (name, v) in [("adam.lr", self.adam.lr), ("sgd.lr", self.sgd.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One mesh ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject: usize,
    pub features: Array,
    pub coords: Array,
    pub targets: Array,
    pub labels: Vec<usize>,
}

/// Meshes sharing one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub edges: EdgeIndex,
    pub samples: Vec<Sample>,
}

pub fn prepare(ds: &MeshDataset, subjects: &[usize]) -> Result<Prepared> {
    let edges = EdgeIndex::from_topology(&ds.topology);
    prepare_with(ds, subjects, &edges)
}

fn prepare_with(ds: &MeshDataset, subjects: &[usize], edges: &EdgeIndex) -> Result<Prepared> {
    let samples = subjects
        .iter()
        .map(|&s| {
            let m = ds.subjects.get(s).ok_or(DataError::BadSubject {
                index: s,
                count: ds.subjects.len(),
            })?;
            Ok(Sample {
                subject: s,
                features: m.features.clone(),
                coords: m.coords_array(),
                targets: one_hot(&m.labels)?,
                labels: m.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        edges: edges.clone(),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Adam,
    Sgd,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Adam => "adam",
            Stage::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `epoch,stage,train_loss,val_loss`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,stage,train_loss,val_loss\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?}",
            h.epoch,
            h.stage.name(),
            h.train_loss,
            h.val_loss
        );
    }
    out
}

/// Restorable model state plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelState,
    pub epoch: usize,
    pub stage: Stage,
    pub val_loss: f64,
}

impl Checkpoint {
    fn of(model: &Model, epoch: usize, stage: Stage, val_loss: f64) -> Self {
        Self {
            model: model.to_state(),
            epoch,
            stage,
            val_loss,
        }
    }

    pub fn restore(&self) -> Result<Model> {
        Ok(Model::from_state(&self.model)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Dice loss of one sample; with `grads`, also accumulates `scale * dL/dθ`.
fn sample_loss(
    model: &Model,
    sample: &Sample,
    edges: &EdgeIndex,
    mode: Mode,
    grads: Option<(&mut [Array], f64)>,
) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>)> {
    let tape = Tape::new();
    let p = model.bind(&tape, grads.is_some());
    let out = model.forward(
        &tape,
        &p,
        tape.constant(sample.features.clone()),
        tape.constant(sample.coords.clone()),
        edges,
        mode,
    )?;
    let loss = dice_loss(&tape, &sample.targets, out.probs)?;
    let value = loss.value().data()[0];
    if let Some((acc, scale)) = grads {
        tape.backward(loss).map_err(NnError::from)?;
        for (a, t) in acc.iter_mut().zip(&p) {
            if let Some(g) = t.grad() {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += scale * y;
                }
            }
        }
    }
    Ok((value, out.batch_stats))
}

/// Mean inference-mode dice loss.
pub fn mean_loss(model: &Model, data: &Prepared) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        total += sample_loss(model, s, &data.edges, Mode::Eval, None)?.0;
    }
    Ok(total / data.samples.len() as f64)
}

fn stack(parts: impl Iterator<Item = Array>) -> Array {
    let mut rows = 0;
    let mut cols = 0;
    let mut data = Vec::new();
    for a in parts {
        rows += a.rows();
        cols = a.cols();
        data.extend_from_slice(a.data());
    }
    Array::matrix(rows, cols, data).expect("stacked shape")
}

/// Mean training-mode dice loss of a minibatch evaluated as one stacked
/// pass, accumulating its gradient. The MLP treats nodes independently, so
/// this equals per-mesh passes except that batch-norm statistics span the
/// whole minibatch. Returns the loss, the batch statistics and their row
/// count.
fn stacked_loss(
    model: &Model,
    samples: &[&Sample],
    grads: &mut [Array],
) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>, usize)> {
    let features = stack(samples.iter().map(|s| s.features.clone()));
    let coords = stack(samples.iter().map(|s| s.coords.clone()));
    let targets = stack(samples.iter().map(|s| s.targets.clone()));
    let groups: Rc<[usize]> = samples
        .iter()
        .enumerate()
        .flat_map(|(g, s)| std::iter::repeat_n(g, s.labels.len()))
        .collect();
    let rows = groups.len();
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let out = model.forward(
        &tape,
        &p,
        tape.constant(features),
        tape.constant(coords),
        &EdgeIndex::edgeless(rows),
        Mode::Train,
    )?;
    let loss = dice_loss_grouped(&tape, &targets, out.probs, groups, samples.len())?;
    tape.backward(loss).map_err(NnError::from)?;
    for (a, t) in grads.iter_mut().zip(&p) {
        if let Some(g) = t.grad() {
            a.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += y);
        }
    }
    let value = loss.value().data()[0];
    Ok((value, out.batch_stats, rows))
}

/// One pass over the training set in shuffled minibatches; returns the mean
/// training-mode loss seen before each update.
fn train_epoch(
    model: &mut Model,
    opt: &mut Optimizer,
    data: &Prepared,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let mut grads: Vec<Array> = model
            .params()
            .iter()
            .map(|p| Array::zeros(p.value.shape().to_vec()))
            .collect();
        if model.norms().is_empty() {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &data.samples[i];
                total += sample_loss(
                    model,
                    sample,
                    &data.edges,
                    Mode::Train,
                    Some((&mut grads, scale)),
                )?
                .0;
            }
            opt.step_model(model, &grads)?;
        } else {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let (loss, stats, rows) = stacked_loss(model, &samples, &mut grads)?;
            total += loss * batch.len() as f64;
            opt.step_model(model, &grads)?;
            model.update_running_stats(&stats, rows);
        }
    }
    Ok(total / data.samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Checkpoint,
    /// Best checkpoint at the end of stage 1.
    pub stage1_best: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Stage 1: Adam until validation loss stalls for `stage1_patience` epochs,
/// then restore the best. Stage 2: SGD with momentum for `stage2_epochs`,
/// then restore the best over both stages (ties keep the earlier epoch).
/// Epoch 0 is the untrained model.
pub fn train_two_stage(
    model: Model,
    train: &Prepared,
    val: &Prepared,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.samples.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val.samples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut history = Vec::new();
    let init_val = mean_loss(&model, val)?;
    history.push(HistoryRow {
        epoch: 0,
        stage: Stage::Init,
        train_loss: mean_loss(&model, train)?,
        val_loss: init_val,
    });
    let mut best = Checkpoint::of(&model, 0, Stage::Init, init_val);

    let mut opt = Optimizer::for_model_adam(cfg.adam, &model);
    let mut epoch = 0;
    let mut since_best = 0;
    while since_best < cfg.stage1_patience && epoch < cfg.stage1_max_epochs {
        epoch += 1;
        let train_loss = train_epoch(&mut model, &mut opt, train, cfg.batch_size, &mut rng)?;
        let val_loss = mean_loss(&model, val)?;
        history.push(HistoryRow {
            epoch,
            stage: Stage::Adam,
            train_loss,
            val_loss,
        });
        if val_loss < best.val_loss {
            best = Checkpoint::of(&model, epoch, Stage::Adam, val_loss);
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    let stage1_best = best.clone();
    model = best.restore()?;

    let mut opt = Optimizer::for_model_sgd(cfg.sgd, &model);
    for _ in 0..cfg.stage2_epochs {
        epoch += 1;
        let train_loss = train_epoch(&mut model, &mut opt, train, cfg.batch_size, &mut rng)?;
        let val_loss = mean_loss(&model, val)?;
        history.push(HistoryRow {
            epoch,
            stage: Stage::Sgd,
            train_loss,
            val_loss,
        });
        if val_loss < best.val_loss {
            best = Checkpoint::of(&model, epoch, Stage::Sgd, val_loss);
        }
    }
    Ok(TrainOutcome {
        model: best.restore()?,
        best,
        stage1_best,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean over test meshes of per-mesh hard Jaccard.
    pub jaccard: ClassScores,
    /// Mean over test meshes of per-mesh hard Dice.
    pub dice: ClassScores,
    /// Predicted labels per test mesh, in sample order.
    pub predictions: Vec<Vec<usize>>,
    /// Class probabilities per test mesh.
    pub probabilities: Vec<Array>,
}

/// Inference-mode argmax predictions scored per mesh and averaged.
pub fn evaluate(model: &Model, data: &Prepared) -> Result<Evaluation> {
    if data.samples.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let mut j = [0.0; 3];
    let mut d = [0.0; 3];
    let mut predictions = Vec::new();
    let mut probabilities = Vec::new();
    for s in &data.samples {
        let p = model.predict(&s.features, &s.coords, &data.edges)?;
        let yhat = argmax_rows(&p);
        let js = ClassScores::jaccard_of(&s.labels, &yhat)?;
        let ds = ClassScores::dice_of(&s.labels, &yhat)?;
        for c in 0..3 {
            j[c] += js.get(c);
            d[c] += ds.get(c);
        }
        predictions.push(yhat);
        probabilities.push(p);
    }
    let n = data.samples.len() as f64;
    Ok(Evaluation {
        jaccard: ClassScores::new(j[0] / n, j[1] / n, j[2] / n),
        dice: ClassScores::new(d[0] / n, d[1] / n, d[2] / n),
        predictions,
        probabilities,
    })
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for fold `fold` of a run with base seed `base`, independent of the
/// order in which folds execute.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    mix(base ^ mix(fold as u64 + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub split: Split,
    pub evaluation: Evaluation,
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldOutcome>,
    pub jaccard: FoldReport,
    pub dice: FoldReport,
}

/// Produces the dataset a fold trains and tests on, e.g. misaligned with a
/// fold-specific frame. Must keep subject indexing.
pub type FoldData<'a> = dyn Fn(usize, &Split) -> Result<Cow<'a, MeshDataset>> + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    /// Seeds the subject shuffle and every per-fold seed.
    pub seed: u64,
    /// Worker threads (at least 1).
    pub jobs: usize,
}

/// Trains and tests one fold rotation. Model initialization and batch
/// order come from `fold_seed(base_seed, fold)` only.
pub fn train_fold(
    spec: &ModelSpec,
    data: &MeshDataset,
    split: &Split,
    fold: usize,
    base_seed: u64,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let edges = EdgeIndex::from_topology(&data.topology);
    let train = prepare_with(data, &split.train, &edges)?;
    let val = prepare_with(data, &split.val, &edges)?;
    let test = prepare_with(data, &split.test, &edges)?;
    let seed = fold_seed(base_seed, fold);
    let mut fold_spec = spec.clone();
    fold_spec.seed = mix(seed ^ 1);
    let fold_cfg = TrainConfig {
        seed: mix(seed ^ 2),
        ..cfg.clone()
    };
    let outcome = train_two_stage(Model::new(fold_spec)?, &train, &val, &fold_cfg)?;
    Ok(FoldOutcome {
        fold,
        split: split.clone(),
        evaluation: evaluate(&outcome.model, &test)?,
        best: outcome.best,
        history: outcome.history,
    })
}

/// Trains one freshly initialized model per fold rotation and aggregates
/// the test scores. Results do not depend on `jobs`.
pub fn cross_validate<'a>(
    spec: &ModelSpec,
    ds: &'a MeshDataset,
    cfg: &TrainConfig,
    opts: &CvOptions,
    fold_data: &FoldData<'a>,
) -> Result<CvResult> {
    let splits = kfold_split(ds.subjects.len(), opts.folds, opts.seed)?;
    let run = |fold: usize| -> Result<FoldOutcome> {
        let data = fold_data(fold, &splits[fold])?;
        train_fold(spec, &data, &splits[fold], fold, opts.seed, cfg)
    };

    let slots: Vec<Mutex<Option<Result<FoldOutcome>>>> =
        (0..splits.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.jobs.clamp(1, splits.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let fold = next.fetch_add(1, Ordering::SeqCst);
                if fold >= splits.len() {
                    break;
                }
                let result = run(fold);
                *slots[fold].lock().expect("fold slot") = Some(result);
            });
        }
    });
    let folds = slots
        .into_iter()
        .map(|s| s.into_inner().expect("fold slot").expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let jaccard = aggregate(
        &folds
            .iter()
            .map(|f| f.evaluation.jaccard)
            .collect::<Vec<_>>(),
    )?;
    let dice = aggregate(&folds.iter().map(|f| f.evaluation.dice).collect::<Vec<_>>())?;
    Ok(CvResult {
        folds,
        jaccard,
        dice,
    })
}
