//! Mesh datasets: a synthetic cortical-patch generator, the preprocessing
//! pipeline, isometric misalignment and realignment, k-fold splits and JSON
//! (de)serialization with located validation errors.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;
use crate::geometry::{
    register_arun, register_iterative, sample_isometry, GeometryError, Isometry,
    IterativeRegistration, Vec3,
};
use crate::graph::{GraphError, Topology};
use crate::metrics::{CLASS_NAMES, NUM_CLASSES};

pub const NUM_FEATURES: usize = 9;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "thickness",
    "curvature",
    "sulcal_depth",
    "myelin",
    "surface_area",
    "gray_volume",
    "activation_language",
    "activation_motor",
    "activation_working_memory",
];
pub const MIN_SUBJECTS: usize = 10;
pub const MIN_NODES: usize = 50;
pub const DEFAULT_HOPS: usize = 4;
pub const DEFAULT_REALIGN_ITERS: usize = 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("dataset is already preprocessed")]
    AlreadyPreprocessed,
    #[error("dataset must be preprocessed first")]
    NotPreprocessed,
    #[error("feature column {column} of subject {subject} sums to zero")]
    ZeroColumn { subject: usize, column: usize },
    #[error("node {node} of subject {subject} has an all-zero feature row")]
    ZeroRow { subject: usize, node: usize },
    #[error("subject index {index} out of range for {count} subjects")]
    BadSubject { index: usize, count: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn invalid<T>(location: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(DataError::Invalid {
        location: location.into(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// `N x F` node features.
    pub features: Array,
    pub coords: Vec<Vec3>,
    /// 0 background, 1 BA44, 2 BA45.
    pub labels: Vec<usize>,
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn coords_array(&self) -> Array {
        crate::geometry::points_to_array(&self.coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNormalization {
    /// Each feature column of each mesh sums to one.
    #[default]
    Column,
    /// As `Column`, rescaled so each column averages one (sums to the node
    /// count); keeps inputs on the scale of the coordinates.
    #[serde(rename = "column_mean")]
    ColumnMean,
    /// Each node's feature vector sums to one.
    Node,
    /// Features left as generated.
    None,
}

impl std::str::FromStr for FeatureNormalization {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Self::Column),
            "column_mean" => Ok(Self::ColumnMean),
            "node" => Ok(Self::Node),
            "none" => Ok(Self::None),
            other => Err(DataError::Parameter(format!(
                "unknown feature normalization '{other}' (expected column, column_mean, node or none)"
            ))),
        }
    }
}

/// What has been applied to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PreprocessRecord {
    pub applied: bool,
    pub feature_normalization: Option<FeatureNormalization>,
    /// Global centroid subtracted from all coordinates.
    pub coord_center: Option<Vec3>,
    /// Global divisor applied after centering.
    pub coord_scale: Option<f64>,
    /// Hop count of the edge expansion.
    pub hops: Option<usize>,
    /// Edge count before expansion.
    pub base_edges: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshDataset {
    pub topology: Topology,
    pub feature_names: Vec<String>,
    pub subjects: Vec<Mesh>,
    pub preprocessing: PreprocessRecord,
}

impl MeshDataset {
    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Checks every structural invariant, naming the first offending
    /// location.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let f = self.num_features();
        if self.subjects.is_empty() {
            return invalid("subjects", "dataset has no subjects");
        }
        for (s, mesh) in self.subjects.iter().enumerate() {
            if mesh.features.shape() != [n, f] {
                return invalid(
                    format!("subjects[{s}].features"),
                    format!("shape {:?}, expected [{n}, {f}]", mesh.features.shape()),
                );
            }
            if let Some(i) = mesh.features.data().iter().position(|v| !v.is_finite()) {
                return invalid(
                    format!("subjects[{s}].features[{}][{}]", i / f, i % f),
                    "non-finite value",
                );
            }
            if mesh.coords.len() != n {
                return invalid(
                    format!("subjects[{s}].coords"),
                    format!("{} rows, expected {n}", mesh.coords.len()),
                );
            }
            for (i, p) in mesh.coords.iter().enumerate() {
                if p.iter().any(|v| !v.is_finite()) {
                    return invalid(format!("subjects[{s}].coords[{i}]"), "non-finite value");
                }
            }
            if mesh.labels.len() != n {
                return invalid(
                    format!("subjects[{s}].labels"),
                    format!("{} labels, expected {n}", mesh.labels.len()),
                );
            }
            if let Some(i) = mesh.labels.iter().position(|&l| l >= NUM_CLASSES) {
                return invalid(
                    format!("subjects[{s}].labels[{i}]"),
                    format!("label {} is not one of 0, 1, 2", mesh.labels[i]),
                );
            }
        }
        Ok(())
    }

    /// Per-class node fractions over all subjects.
    pub fn class_balance(&self) -> [f64; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for m in &self.subjects {
            for &l in &m.labels {
                counts[l] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts.map(|c| c as f64 / total as f64)
    }

    /// Keeps only the listed subjects, in the given order.
    pub fn subset(&self, indices: &[usize]) -> MeshDataset {
        MeshDataset {
            topology: self.topology.clone(),
            feature_names: self.feature_names.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            preprocessing: self.preprocessing.clone(),
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub subjects: usize,
    pub nodes: usize,
    pub seed: u64,
    /// Scales the label-dependent feature shifts.
    pub snr: f64,
    /// Per-axis amplitude of the smooth per-subject coordinate perturbation,
    /// relative to the unit cap radius.
    pub coord_noise: f64,
    /// Neighbours per node in the base k-nearest-neighbour graph.
    pub knn: usize,
    /// Relative per-subject jitter of the region radii.
    pub radius_jitter: f64,
    /// Per-subject displacement of region centres, in radians on the cap.
    pub center_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            subjects: 100,
            nodes: 1195,
            seed: 42,
            snr: 1.0,
            coord_noise: 0.015,
            knn: 6,
            radius_jitter: 0.15,
            center_jitter: 0.08,
        }
    }
}

/// Polar angle of the cap boundary.
const CAP_ANGLE: f64 = 1.2;
/// Region centres as (polar, azimuth) angles; the two areas are adjacent.
const ANCHORS: [(f64, f64); 2] = [(0.55, 0.0), (0.65, 1.25)];
/// Geodesic radii of the two areas on the unit cap.
const REGION_RADII: [f64; 2] = [0.36, 0.32];
/// Per-class log-feature signatures (rows: background, BA44, BA45).
const SIGNATURES: [[f64; NUM_FEATURES]; NUM_CLASSES] = [
    [0.0; NUM_FEATURES],
    [1.0, -0.6, 0.8, 1.2, 0.0, 0.6, 1.4, -0.4, 0.6],
    [0.6, 0.4, -0.8, 1.0, 0.8, 0.0, 1.0, 0.6, -0.6],
];
/// Baseline log-feature levels.
const BASE_LEVELS: [f64; NUM_FEATURES] = [1.0, 0.2, 0.8, 0.5, 1.2, 1.5, 0.0, 0.3, -0.2];
/// Node-level noise std of log-features.
const FEATURE_NOISE: f64 = 0.8;
/// Amplitude of the smooth per-subject log-feature fields.
const FIELD_AMPLITUDE: f64 = 0.35;

fn sphere_point(polar: f64, azimuth: f64) -> Vec3 {
    [
        polar.sin() * azimuth.cos(),
        polar.sin() * azimuth.sin(),
        polar.cos(),
    ]
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn nearest(points: &[Vec3], target: &Vec3) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if dist(p, target) < dist(&points[best], target) {
            best = i;
        }
    }
    best
}

/// Random smooth scalar field: a few low-frequency plane waves.
struct SmoothField {
    waves: Vec<(Vec3, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, count: usize, max_freq: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let dir: Vec3 = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
                let norm = dist(&dir, &[0.0; 3]).max(1e-12);
                let freq = rng.random_range(0.5..max_freq);
                (
                    dir.map(|d| d / norm * freq),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, p: &Vec3) -> f64 {
        let total: f64 = self
            .waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum();
        total / (self.waves.len() as f64).sqrt()
    }
}

fn knn_topology(points: &[Vec3], k: usize) -> Result<Topology> {
    let n = points.len();
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        order.clear();
        order.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist(p, q), j)),
        );
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(order.iter().take(k).map(|&(_, j)| (i, j)));
    }
    Ok(Topology::new(n, edges)?)
}

/// Shortest-path lengths from `source` with Euclidean edge weights.
fn geodesic_from(topology: &Topology, points: &[Vec3], source: usize) -> Vec<f64> {
    let adj = topology.adjacency_lists();
    let mut best = vec![f64::INFINITY; points.len()];
    best[source] = 0.0;
    // distances are non-negative, so their bit patterns order like the values
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((bits, u))) = heap.pop() {
        let d = f64::from_bits(bits);
        if d > best[u] {
            continue;
        }
        for &v in &adj[u] {
            let nd = d + dist(&points[u], &points[v]);
            if nd < best[v] {
                best[v] = nd;
                heap.push(Reverse((nd.to_bits(), v)));
            }
        }
    }
    best
}

/// Builds a synthetic dataset standing in for registered cortical meshes.
///
/// One base patch (a bumpy spherical cap sampled on a Fibonacci lattice and
/// connected by a symmetrized k-nearest-neighbour graph) is shared by all
/// subjects. Two adjacent geodesic balls form the BA44 and BA45 labels, with
/// per-subject jitter of centre and radius. Coordinates get a smooth
/// per-subject deformation whose rigid component is removed, so subjects are
/// co-registered by construction. Features are positive lognormal: a class
/// signature scaled by `snr`, a smooth per-subject field and node noise.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<MeshDataset> {
    if cfg.subjects < MIN_SUBJECTS {
        return Err(DataError::Parameter(format!(
            "need at least {MIN_SUBJECTS} subjects for k-fold splits, got {}",
            cfg.subjects
        )));
    }
    if cfg.nodes < MIN_NODES {
        return Err(DataError::Parameter(format!(
            "need at least {MIN_NODES} nodes, got {}",
            cfg.nodes
        )));
    }
    if cfg.knn == 0 || cfg.knn >= cfg.nodes {
        return Err(DataError::Parameter(format!(
            "knn must be in 1..{}",
            cfg.nodes
        )));
    }
    for (name, v) in [
        ("snr", cfg.snr),
        ("coord_noise", cfg.coord_noise),
        ("radius_jitter", cfg.radius_jitter),
        ("center_jitter", cfg.center_jitter),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(DataError::Parameter(format!(
                "{name} must be finite and >= 0, got {v}"
            )));
        }
    }
    if cfg.radius_jitter >= 1.0 {
        return Err(DataError::Parameter("radius_jitter must be below 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let bumps = SmoothField::new(&mut rng, 6, 5.0);
    let base: Vec<Vec3> = (0..n)
        .map(|i| {
            let z = 1.0 - (1.0 - CAP_ANGLE.cos()) * (i as f64 + 0.5) / n as f64;
            let p = sphere_point(z.acos(), i as f64 * golden);
            let r = 1.0 + 0.06 * bumps.eval(&p);
            p.map(|c| c * r)
        })
        .collect();
    let topology = knn_topology(&base, cfg.knn)?;

    let mut subjects = Vec::with_capacity(cfg.subjects);
    for _ in 0..cfg.subjects {
        // labels: jittered geodesic balls, BA44 taking precedence on overlap
        let mut labels = vec![0usize; n];
        let mut region_dist = Vec::new();
        for (a, &(polar, azimuth)) in ANCHORS.iter().enumerate() {
            let dp = cfg.center_jitter * rng.random_range(-1.0..1.0);
            let da = cfg.center_jitter * rng.random_range(-1.0..1.0) / polar.sin();
            let centre = nearest(&base, &sphere_point(polar + dp, azimuth + da));
            let radius = REGION_RADII[a] * (1.0 + cfg.radius_jitter * rng.random_range(-1.0..1.0));
            region_dist.push((geodesic_from(&topology, &base, centre), radius));
        }
        for (i, label) in labels.iter_mut().enumerate() {
            for (a, (d, r)) in region_dist.iter().enumerate().rev() {
                if d[i] <= *r {
                    *label = a + 1;
                }
            }
        }

        // coordinates: smooth deformation with its rigid part registered away
        let fields: Vec<SmoothField> = (0..3).map(|_| SmoothField::new(&mut rng, 4, 3.0)).collect();
        let deformed: Vec<Vec3> = base
            .iter()
            .map(|p| std::array::from_fn(|k| p[k] + cfg.coord_noise * fields[k].eval(p)))
            .collect();
        let fit = register_arun(&deformed, &base)?;
        let coords = fit.isometry.apply(&deformed);

        // features: lognormal with class signature, smooth field and noise
        let offsets: Vec<f64> = (0..NUM_FEATURES)
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        let feature_fields: Vec<SmoothField> = (0..NUM_FEATURES)
            .map(|_| SmoothField::new(&mut rng, 4, 4.0))
            .collect();
        let mut data = Vec::with_capacity(n * NUM_FEATURES);
        for i in 0..n {
            for k in 0..NUM_FEATURES {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let log_value = BASE_LEVELS[k]
                    + offsets[k]
                    + cfg.snr * SIGNATURES[labels[i]][k]
                    + FIELD_AMPLITUDE * feature_fields[k].eval(&base[i])
                    + FEATURE_NOISE * noise;
                data.push(log_value.exp());
            }
        }
        subjects.push(Mesh {
            features: Array::matrix(n, NUM_FEATURES, data).expect("feature shape"),
            coords,
            labels,
        });
    }
    let ds = MeshDataset {
        topology,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        subjects,
        preprocessing: PreprocessRecord::default(),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub feature_normalization: FeatureNormalization,
    pub hops: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            feature_normalization: FeatureNormalization::Column,
            hops: DEFAULT_HOPS,
        }
    }
}

/// Feature normalization, global coordinate centring/scaling into
/// `[-1, 1]^3`, and k-hop edge expansion. Rejected when already applied.
pub fn preprocess(ds: &MeshDataset, opts: &PreprocessOptions) -> Result<MeshDataset> {
    if ds.preprocessing.applied {
        return Err(DataError::AlreadyPreprocessed);
    }
    ds.validate()?;
    let mut out = ds.clone();
    let f = ds.num_features();
    for (s, mesh) in out.subjects.iter_mut().enumerate() {
        let n = mesh.num_nodes();
        let data = mesh.features.data_mut();
        match opts.feature_normalization {
            FeatureNormalization::Column | FeatureNormalization::ColumnMean => {
                let target = if opts.feature_normalization == FeatureNormalization::Column {
                    1.0
                } else {
                    n as f64
                };
                for c in 0..f {
                    let sum: f64 = (0..n).map(|r| data[r * f + c]).sum();
                    if sum == 0.0 {
                        return Err(DataError::ZeroColumn {
                            subject: s,
                            column: c,
                        });
                    }
                    for r in 0..n {
                        data[r * f + c] *= target / sum;
                    }
                }
            }
            FeatureNormalization::Node => {
                for r in 0..n {
                    let row = &mut data[r * f..(r + 1) * f];
                    let sum: f64 = row.iter().sum();
                    if sum == 0.0 {
                        return Err(DataError::ZeroRow {
                            subject: s,
                            node: r,
                        });
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
            }
            FeatureNormalization::None => {}
        }
    }

    let count = (out.subjects.len() * out.num_nodes()) as f64;
    let mut center = [0.0; 3];
    for p in out.subjects.iter().flat_map(|m| &m.coords) {
        for k in 0..3 {
            center[k] += p[k];
        }
    }
    center = center.map(|c| c / count);
    let mut scale = 0.0f64;
    for p in out.subjects.iter().flat_map(|m| &m.coords) {
        for k in 0..3 {
            scale = scale.max((p[k] - center[k]).abs());
        }
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    for p in out.subjects.iter_mut().flat_map(|m| m.coords.iter_mut()) {
        for k in 0..3 {
            p[k] = (p[k] - center[k]) / scale;
        }
    }

    out.topology = ds.topology.khop_expand(opts.hops)?;
    out.preprocessing = PreprocessRecord {
        applied: true,
        feature_normalization: Some(opts.feature_normalization),
        coord_center: Some(center),
        coord_scale: Some(scale),
        hops: Some(opts.hops),
        base_edges: Some(ds.topology.num_edges()),
    };
    Ok(out)
}

/// Which subjects share an isometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MisalignScope {
    /// An independent isometry per subject.
    PerMesh,
    /// One isometry for the listed subjects, another for all others.
    PerSplit { train: Vec<usize> },
}

/// Applies random isometries (translation bound 1) to subject coordinates.
/// Returns the transformed dataset and the isometry applied to each subject.
pub fn misalign<R: Rng + ?Sized>(
    ds: &MeshDataset,
    rng: &mut R,
    scope: &MisalignScope,
) -> Result<(MeshDataset, Vec<Isometry>)> {
    if !ds.preprocessing.applied {
        return Err(DataError::NotPreprocessed);
    }
    let count = ds.subjects.len();
    let isos: Vec<Isometry> = match scope {
        MisalignScope::PerMesh => (0..count).map(|_| sample_isometry(rng, 1.0)).collect(),
        MisalignScope::PerSplit { train } => {
            if let Some(&bad) = train.iter().find(|&&i| i >= count) {
                return Err(DataError::BadSubject { index: bad, count });
            }
            let a = sample_isometry(rng, 1.0);
            let b = sample_isometry(rng, 1.0);
            let mut in_train = vec![false; count];
            train.iter().for_each(|&i| in_train[i] = true);
            in_train
                .iter()
                .map(|&t| if t { a.clone() } else { b.clone() })
                .collect()
        }
    };
    Ok((apply_isometries(ds, &isos), isos))
}

/// Applies `isos[i]` to subject `i`.
pub fn apply_isometries(ds: &MeshDataset, isos: &[Isometry]) -> MeshDataset {
    let mut out = ds.clone();
    for (mesh, iso) in out.subjects.iter_mut().zip(isos) {
        mesh.coords = iso.apply(&mesh.coords);
    }
    out
}

/// Registers every subject onto subject `reference` with `iters` rounds of
/// exact registration and applies the result. The reference is unchanged.
pub fn realign(
    ds: &MeshDataset,
    reference: usize,
    iters: usize,
) -> Result<(MeshDataset, Vec<IterativeRegistration>)> {
    let count = ds.subjects.len();
    if reference >= count {
        return Err(DataError::BadSubject {
            index: reference,
            count,
        });
    }
    let target = &ds.subjects[reference].coords;
    let mut out = ds.clone();
    let mut fits = Vec::with_capacity(count);
    for (i, mesh) in out.subjects.iter_mut().enumerate() {
        let fit = register_iterative(&mesh.coords, target, iters)?;
        if i != reference {
            mesh.coords = fit.isometry.apply(&mesh.coords);
        }
        fits.push(fit);
    }
    Ok((out, fits))
}

/// Subject indices of one cross-validation rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles subjects once and cuts them into `k` near-equal folds. Rotation
/// `i` tests on fold `i`, validates on fold `i + 1 (mod k)` and trains on
/// the rest, keeping shuffled order.
pub fn kfold_split(num_subjects: usize, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 3 {
        return Err(DataError::Parameter(format!(
            "need at least 3 folds, got {k}"
        )));
    }
    if k > num_subjects {
        return Err(DataError::Parameter(format!(
            "{k} folds for {num_subjects} subjects"
        )));
    }
    let mut order: Vec<usize> = (0..num_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = num_subjects / k + usize::from(f < num_subjects % k);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            Split {
                test: folds[i].clone(),
                val: folds[v].clone(),
                train: (0..k)
                    .filter(|&f| f != i && f != v)
                    .flat_map(|f| folds[f].iter().copied())
                    .collect(),
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectRecord {
    features: Vec<Vec<f64>>,
    coords: Vec<Vec<f64>>,
    labels: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    feature_names: Vec<String>,
    label_names: Vec<String>,
    preprocessing: PreprocessRecord,
    subjects: Vec<SubjectRecord>,
}

fn to_record(ds: &MeshDataset) -> DatasetRecord {
    let f = ds.num_features();
    DatasetRecord {
        num_nodes: ds.num_nodes(),
        edges: ds.topology.edges().iter().map(|&(a, b)| [a, b]).collect(),
        feature_names: ds.feature_names.clone(),
        label_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        preprocessing: ds.preprocessing.clone(),
        subjects: ds
            .subjects
            .iter()
            .map(|m| SubjectRecord {
                features: m.features.data().chunks(f).map(<[f64]>::to_vec).collect(),
                coords: m.coords.iter().map(|p| p.to_vec()).collect(),
                labels: m.labels.iter().map(|&l| l as i64).collect(),
            })
            .collect(),
    }
}

fn from_record(rec: DatasetRecord) -> Result<MeshDataset> {
    let n = rec.num_nodes;
    if n == 0 {
        return invalid("num_nodes", "must be positive");
    }
    let expected: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    if rec.label_names != expected {
        return invalid(
            "label_names",
            format!("expected {expected:?}, got {:?}", rec.label_names),
        );
    }
    for (e, [a, b]) in rec.edges.iter().enumerate() {
        if *a >= n || *b >= n {
            return invalid(
                format!("edges[{e}]"),
                format!("edge ({a}, {b}) references a node >= num_nodes {n}"),
            );
        }
        if a == b {
            return invalid(format!("edges[{e}]"), format!("self-loop on node {a}"));
        }
    }
    let topology = Topology::new(n, rec.edges.iter().map(|e| (e[0], e[1])))?;
    let f = rec.feature_names.len();
    if f == 0 {
        return invalid("feature_names", "no features declared");
    }
    let mut subjects = Vec::with_capacity(rec.subjects.len());
    for (s, sub) in rec.subjects.into_iter().enumerate() {
        if sub.features.len() != n {
            return invalid(
                format!("subjects[{s}].features"),
                format!("{} rows, expected {n}", sub.features.len()),
            );
        }
        let mut data = Vec::with_capacity(n * f);
        for (i, row) in sub.features.iter().enumerate() {
            if row.len() != f {
                return invalid(
                    format!("subjects[{s}].features[{i}]"),
                    format!("{} values, expected {f}", row.len()),
                );
            }
            data.extend(row);
        }
        if sub.coords.len() != n {
            return invalid(
                format!("subjects[{s}].coords"),
                format!("{} rows, expected {n}", sub.coords.len()),
            );
        }
        let mut coords = Vec::with_capacity(n);
        for (i, row) in sub.coords.iter().enumerate() {
            match row.as_slice() {
                [x, y, z] => coords.push([*x, *y, *z]),
                _ => {
                    return invalid(
                        format!("subjects[{s}].coords[{i}]"),
                        format!("{} values, expected 3", row.len()),
                    )
                }
            }
        }
        let mut labels = Vec::with_capacity(n);
        for (i, &l) in sub.labels.iter().enumerate() {
            if !(0..NUM_CLASSES as i64).contains(&l) {
                return invalid(
                    format!("subjects[{s}].labels[{i}]"),
                    format!("label {l} is not one of 0, 1, 2 (subject {s}, node {i})"),
                );
            }
            labels.push(l as usize);
        }
        subjects.push(Mesh {
            features: Array::matrix(n, f, data).expect("validated shape"),
            coords,
            labels,
        });
    }
    let ds = MeshDataset {
        topology,
        feature_names: rec.feature_names,
        subjects,
        preprocessing: rec.preprocessing,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn to_json(ds: &MeshDataset) -> String {
    serde_json::to_string(&to_record(ds)).expect("dataset records serialize")
}

pub fn from_json(text: &str, origin: &str) -> Result<MeshDataset> {
    let rec: DatasetRecord = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: origin.to_string(),
        source,
    })?;
    from_record(rec).map_err(|e| match e {
        DataError::Invalid { location, message } => DataError::Invalid {
            location: format!("{origin}: {location}"),
            message,
        },
        other => other,
    })
}

pub fn save(ds: &MeshDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(ds)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<MeshDataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests;
