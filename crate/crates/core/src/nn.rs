//! The three model families: a per-node MLP, a plain message-passing GNN and
//! an E(n)-equivariant GNN, all built from tape operations.
//!
//! Parameters live in a flat, ordered list with stable dotted names such as
//! `gnn.layer2.edge_mlp.dense1.weight`. A forward pass binds them onto a tape
//! (`Model::bind`) and takes the bound tensors explicitly, so callers can
//! substitute any parameter with their own tensor (used by gradient checks).

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{batch_moments, Array, AutodiffError, Tape, Tensor};
use crate::graph::Topology;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const COORD_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown model family '{0}' (expected mlp, gnn or egnn)")]
    UnknownFamily(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Gnn,
    Egnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Mlp, Family::Gnn, Family::Egnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Gnn => "gnn",
            Family::Egnn => "egnn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "gnn" => Ok(Family::Gnn),
            "egnn" => Ok(Family::Egnn),
            other => Err(NnError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Node feature count, excluding coordinates.
    pub in_features: usize,
    pub use_coordinates: bool,
    pub hidden: usize,
    pub mp_layers: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// Defaults: 9 features, width 32, 4 message-passing layers, 3 classes.
    pub fn new(family: Family, use_coordinates: bool, seed: u64) -> Self {
        Self {
            family,
            in_features: 9,
            use_coordinates,
            hidden: 32,
            mp_layers: 4,
            classes: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Egnn && !self.use_coordinates {
            return Err(NnError::Spec(
                "egnn needs coordinates (they enter through distances and the coordinate track)"
                    .into(),
            ));
        }
        if self.in_features == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(NnError::Spec(format!(
                "in_features {}, hidden {}, classes {} must be positive (classes >= 2)",
                self.in_features, self.hidden, self.classes
            )));
        }
        if self.family != Family::Mlp && self.mp_layers == 0 {
            return Err(NnError::Spec("graph models need at least one layer".into()));
        }
        Ok(())
    }

    /// Width of the first layer's input: features, plus raw coordinates for
    /// MLP/GNN when coordinates are used.
    pub fn input_dim(&self) -> usize {
        if self.use_coordinates && self.family != Family::Egnn {
            self.in_features + COORD_DIM
        } else {
            self.in_features
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let dense = |i: usize, o: usize| i * o + o;
        let h = self.hidden;
        match self.family {
            Family::Mlp => {
                dense(self.input_dim(), h) + 4 * dense(h, h) + dense(h, self.classes) + 5 * 2 * h
            }
            Family::Gnn => {
                dense(self.input_dim(), h)
                    + self.mp_layers * (2 * (dense(2 * h, h) + dense(h, h)))
                    + dense(h, self.classes)
            }
            Family::Egnn => {
                dense(self.input_dim(), h)
                    + self.mp_layers
                        * (dense(2 * h + 1, h)
                            + dense(h, h)
                            + dense(2 * h, h)
                            + dense(h, h)
                            + dense(h, h)
                            + dense(h, 1))
                    + dense(h, self.classes)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Two dense layers; the owning layer decides the activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpBlock {
    pub dense1: DenseLayer,
    pub dense2: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: usize,
    pub beta: usize,
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLayer {
    pub edge_mlp: MlpBlock,
    pub node_mlp: MlpBlock,
    /// Present for EGNN layers only.
    pub coord_mlp: Option<MlpBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Mlp {
        layers: Vec<DenseLayer>,
        norms: Vec<BatchNormLayer>,
    },
    Graph {
        encoder: DenseLayer,
        layers: Vec<MessageLayer>,
        decoder: DenseLayer,
    },
}

/// Directed message routing for one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub num_nodes: usize,
    /// Receiving node `i` of each directed edge `(i, j)`.
    pub src: Rc<[usize]>,
    /// Sending neighbour `j`.
    pub dst: Rc<[usize]>,
    /// `1 / |N(i)|` repeated over 3 columns; 0 for isolated nodes.
    pub inv_degree: Array,
}

impl EdgeIndex {
    pub fn from_topology(t: &Topology) -> Self {
        let nb = t.neighborhoods();
        let degrees = nb.degrees();
        let mut inv = Vec::with_capacity(degrees.len() * COORD_DIM);
        for d in &degrees {
            let v = if *d == 0 { 0.0 } else { 1.0 / *d as f64 };
            inv.extend([v; COORD_DIM]);
        }
        Self {
            num_nodes: t.num_nodes(),
            src: nb.sources().into(),
            dst: nb.targets().into(),
            inv_degree: Array::matrix(degrees.len(), COORD_DIM, inv).expect("degree shape"),
        }
    }

    /// `num_nodes` isolated nodes.
    pub fn edgeless(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            src: Rc::from(Vec::new()),
            dst: Rc::from(Vec::new()),
            inv_degree: Array::zeros(vec![num_nodes, COORD_DIM]),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

pub struct ForwardOutput<'t> {
    /// `N x classes` row-stochastic probabilities.
    pub probs: Tensor<'t>,
    /// EGNN coordinate track, one entry per layer input and output
    /// (`x^0 .. x^L`); empty for other families.
    pub coords: Vec<Tensor<'t>>,
    /// Per batch-norm layer `(mean, biased variance)` seen in training mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    arch: Architecture,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize) -> DenseLayer {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        let weight = self.push(
            format!("{name}.weight"),
            Array::matrix(in_dim, out_dim, w).unwrap(),
        );
        let bias = self.push(format!("{name}.bias"), Array::zeros(vec![1, out_dim]));
        DenseLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn block(&mut self, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> MlpBlock {
        MlpBlock {
            dense1: self.dense(&format!("{name}.dense1"), in_dim, hidden),
            dense2: self.dense(&format!("{name}.dense2"), hidden, out_dim),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> BatchNormLayer {
        let gamma = self.push(format!("{name}.gamma"), Array::filled(vec![1, dim], 1.0));
        let beta = self.push(format!("{name}.beta"), Array::zeros(vec![1, dim]));
        BatchNormLayer {
            gamma,
            beta,
            name: name.to_string(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    fn push(&mut self, name: String, value: Array) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }
}

fn dense<'t>(p: &[Tensor<'t>], layer: &DenseLayer, x: Tensor<'t>) -> Result<Tensor<'t>> {
    let rows = x.value().rows();
    Ok(x.matmul(p[layer.weight])?
        .add(p[layer.bias].broadcast_row(rows)?)?)
}

fn index_range(start: usize, end: usize) -> Rc<[usize]> {
    (start..end).collect()
}

/// First edge-MLP layer evaluated on `h_i ‖ h_j [‖ d_ij]` without
/// materializing the concatenation: the weight's row blocks act on node
/// embeddings before gathering to edges.
fn edge_first_layer<'t>(
    p: &[Tensor<'t>],
    layer: &DenseLayer,
    h: Tensor<'t>,
    dist: Option<Tensor<'t>>,
    edges: &EdgeIndex,
) -> Result<Tensor<'t>> {
    let hd = h.value().cols();
    let w = p[layer.weight];
    let w_src = w.gather_rows(index_range(0, hd))?;
    let w_dst = w.gather_rows(index_range(hd, 2 * hd))?;
    let mut z = h
        .matmul(w_src)?
        .gather_rows(edges.src.clone())?
        .add(h.matmul(w_dst)?.gather_rows(edges.dst.clone())?)?;
    if let Some(d) = dist {
        let w_d = w.gather_rows(index_range(2 * hd, 2 * hd + 1))?;
        z = z.add(d.matmul(w_d)?)?;
    }
    Ok(z.add(p[layer.bias].broadcast_row(edges.num_edges())?)?)
}

fn check_rows(what: &str, t: &Tensor<'_>, n: usize) -> Result<()> {
    let got = t.value().rows();
    if got != n {
        return Err(NnError::Input(format!(
            "{what} has {got} rows, topology has {n} nodes"
        )));
    }
    Ok(())
}

/// Plain message passing: `m_ij = φe(h_i ‖ h_j)`, `m_i = Σ_j m_ij`,
/// `h'_i = φh(h_i ‖ m_i)`, Swish after every dense layer.
pub fn gnn_layer<'t>(
    p: &[Tensor<'t>],
    layer: &MessageLayer,
    h: Tensor<'t>,
    edges: &EdgeIndex,
) -> Result<Tensor<'t>> {
    check_rows("h", &h, edges.num_nodes)?;
    let tape = h.tape();
    let e = edge_first_layer(p, &layer.edge_mlp.dense1, h, None, edges)?.swish()?;
    let m = dense(p, &layer.edge_mlp.dense2, e)?.swish()?;
    let agg = m.segment_sum(edges.src.clone(), edges.num_nodes)?;
    let hm = tape.concat(&[h, agg], 1)?;
    let u = dense(p, &layer.node_mlp.dense1, hm)?.swish()?;
    Ok(dense(p, &layer.node_mlp.dense2, u)?.swish()?)
}

/// Equivariant message passing: messages see `‖x_i − x_j‖`, and the
/// coordinates move by `mean_j φx(m_ij) (x_i − x_j)`.
pub fn egnn_layer<'t>(
    p: &[Tensor<'t>],
    layer: &MessageLayer,
    h: Tensor<'t>,
    x: Tensor<'t>,
    edges: &EdgeIndex,
) -> Result<(Tensor<'t>, Tensor<'t>)> {
    check_rows("h", &h, edges.num_nodes)?;
    check_rows("x", &x, edges.num_nodes)?;
    let coord_mlp = layer
        .coord_mlp
        .ok_or_else(|| NnError::Spec("layer has no coordinate MLP".into()))?;
    let tape = h.tape();
    let diff = x
        .gather_rows(edges.src.clone())?
        .sub(x.gather_rows(edges.dst.clone())?)?;
    let dist = diff.row_norm()?;
    let e = edge_first_layer(p, &layer.edge_mlp.dense1, h, Some(dist), edges)?.swish()?;
    let m = dense(p, &layer.edge_mlp.dense2, e)?.swish()?;
    let agg = m.segment_sum(edges.src.clone(), edges.num_nodes)?;
    let hm = tape.concat(&[h, agg], 1)?;
    let u = dense(p, &layer.node_mlp.dense1, hm)?.swish()?;
    let h_out = dense(p, &layer.node_mlp.dense2, u)?.swish()?;
    let s = dense(p, &coord_mlp.dense1, m)?.swish()?;
    let w = dense(p, &coord_mlp.dense2, s)?;
    let shift = w
        .broadcast_col(COORD_DIM)?
        .mul(diff)?
        .segment_sum(edges.src.clone(), edges.num_nodes)?
        .mul(tape.constant(edges.inv_degree.clone()))?;
    Ok((h_out, x.add(shift)?))
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            params: Vec::new(),
        };
        let fam = spec.family.name();
        let h = spec.hidden;
        let arch = match spec.family {
            Family::Mlp => {
                let dims = [spec.input_dim(), h, h, h, h, h, spec.classes];
                let mut layers = Vec::new();
                let mut norms = Vec::new();
                for i in 0..6 {
                    layers.push(b.dense(&format!("{fam}.dense{}", i + 1), dims[i], dims[i + 1]));
                    if i < 5 {
                        norms.push(b.norm(&format!("{fam}.norm{}", i + 1), h));
                    }
                }
                Architecture::Mlp { layers, norms }
            }
            Family::Gnn | Family::Egnn => {
                let egnn = spec.family == Family::Egnn;
                let encoder = b.dense(&format!("{fam}.encoder"), spec.input_dim(), h);
                let layers = (0..spec.mp_layers)
                    .map(|l| {
                        let base = format!("{fam}.layer{}", l + 1);
                        let edge_in = 2 * h + usize::from(egnn);
                        MessageLayer {
                            edge_mlp: b.block(&format!("{base}.edge_mlp"), edge_in, h, h),
                            node_mlp: b.block(&format!("{base}.node_mlp"), 2 * h, h, h),
                            coord_mlp: egnn.then(|| b.block(&format!("{base}.coord_mlp"), h, h, 1)),
                        }
                    })
                    .collect();
                let decoder = b.dense(&format!("{fam}.decoder"), h, spec.classes);
                Architecture::Graph {
                    encoder,
                    layers,
                    decoder,
                }
            }
        };
        Ok(Self {
            spec,
            params: b.params,
            arch,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_param(&mut self, name: &str, value: Array) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| NnError::Checkpoint(format!("no parameter named '{name}'")))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(NnError::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    /// Applies `f(index, value)` to every parameter in order.
    pub fn update_params(&mut self, mut f: impl FnMut(usize, &mut Array)) {
        for (i, p) in self.params.iter_mut().enumerate() {
            f(i, &mut p.value);
        }
    }

    /// Parameter tensors on `tape`, in parameter order.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Tensor<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    pub fn norms(&self) -> &[BatchNormLayer] {
        match &self.arch {
            Architecture::Mlp { norms, .. } => norms,
            Architecture::Graph { .. } => &[],
        }
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (unbiased variance, momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], batch_rows: usize) {
        let Architecture::Mlp { norms, .. } = &mut self.arch else {
            return;
        };
        let correction = if batch_rows > 1 {
            batch_rows as f64 / (batch_rows - 1) as f64
        } else {
            1.0
        };
        for (norm, (mean, var)) in norms.iter_mut().zip(stats) {
            for (r, m) in norm.running_mean.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in norm.running_var.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
    }

    fn check_inputs(&self, features: &Array, coords: &Array, edges: &EdgeIndex) -> Result<()> {
        let n = edges.num_nodes;
        if features.shape() != [n, self.spec.in_features] {
            return Err(NnError::Input(format!(
                "features {:?}, expected [{n}, {}]",
                features.shape(),
                self.spec.in_features
            )));
        }
        if self.spec.use_coordinates && coords.shape() != [n, COORD_DIM] {
            return Err(NnError::Input(format!(
                "coordinates {:?}, expected [{n}, {COORD_DIM}]",
                coords.shape()
            )));
        }
        Ok(())
    }

    /// Full forward pass with bound parameters `p` (see [`Model::bind`]).
    /// `coords` is ignored by models that do not use coordinates; the MLP
    /// ignores `edges` except for its node count.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Tensor<'t>],
        features: Tensor<'t>,
        coords: Tensor<'t>,
        edges: &EdgeIndex,
        mode: Mode,
    ) -> Result<ForwardOutput<'t>> {
        if p.len() != self.params.len() {
            return Err(NnError::Input(format!(
                "{} bound parameters for a model with {}",
                p.len(),
                self.params.len()
            )));
        }
        self.check_inputs(&features.value(), &coords.value(), edges)?;
        let input = if self.spec.input_dim() != self.spec.in_features {
            tape.concat(&[features, coords], 1)?
        } else {
            features
        };
        let mut batch_stats = Vec::new();
        let mut track = Vec::new();
        let logits = match &self.arch {
            Architecture::Mlp { layers, norms } => {
                let mut z = input;
                for (i, layer) in layers.iter().enumerate() {
                    z = dense(p, layer, z)?;
                    if let Some(norm) = norms.get(i) {
                        z = z.relu()?;
                        let stats = match mode {
                            Mode::Train => {
                                batch_stats.push(batch_moments(&z.value()));
                                None
                            }
                            Mode::Eval => Some(Rc::new((
                                norm.running_mean.clone(),
                                norm.running_var.clone(),
                            ))),
                        };
                        z = z.batch_norm(p[norm.gamma], p[norm.beta], BN_EPS, stats)?;
                    }
                }
                z
            }
            Architecture::Graph {
                encoder,
                layers,
                decoder,
            } => {
                let mut h = dense(p, encoder, input)?.swish()?;
                if self.spec.family == Family::Egnn {
                    let mut x = coords;
                    track.push(x);
                    for layer in layers {
                        (h, x) = egnn_layer(p, layer, h, x, edges)?;
                        track.push(x);
                    }
                } else {
                    for layer in layers {
                        h = gnn_layer(p, layer, h, edges)?;
                    }
                }
                dense(p, decoder, h)?
            }
        };
        Ok(ForwardOutput {
            probs: logits.softmax_rows()?,
            coords: track,
            batch_stats,
        })
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, features: &Array, coords: &Array, edges: &EdgeIndex) -> Result<Array> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(
            &tape,
            &p,
            tape.constant(features.clone()),
            tape.constant(coords.clone()),
            edges,
            Mode::Eval,
        )?;
        Ok(out.probs.to_array())
    }

    pub fn to_state(&self) -> ModelState {
        ModelState {
            spec: self.spec.clone(),
            parameters: self
                .params
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
            running_stats: self
                .norms()
                .iter()
                .map(|n| RunningStats {
                    name: n.name.clone(),
                    mean: n.running_mean.clone(),
                    var: n.running_var.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint; every parameter and running
    /// statistic must be present with the expected shape.
    pub fn from_state(state: &ModelState) -> Result<Self> {
        let mut model = Model::new(state.spec.clone())?;
        if state.parameters.len() != model.params.len() {
            return Err(NnError::Checkpoint(format!(
                "{} parameters stored, model has {}",
                state.parameters.len(),
                model.params.len()
            )));
        }
        for p in &state.parameters {
            let value = Array::new(p.shape.clone(), p.values.clone())
                .map_err(|e| NnError::Checkpoint(format!("parameter '{}': {e}", p.name)))?;
            model.set_param(&p.name, value)?;
        }
        if let Architecture::Mlp { norms, .. } = &mut model.arch {
            if state.running_stats.len() != norms.len() {
                return Err(NnError::Checkpoint(format!(
                    "{} running-stat entries stored, model has {}",
                    state.running_stats.len(),
                    norms.len()
                )));
            }
            for (norm, s) in norms.iter_mut().zip(&state.running_stats) {
                if s.name != norm.name
                    || s.mean.len() != norm.running_mean.len()
                    || s.var.len() != norm.running_var.len()
                {
                    return Err(NnError::Checkpoint(format!(
                        "running stats '{}' do not match layer '{}'",
                        s.name, norm.name
                    )));
                }
                norm.running_mean = s.mean.clone();
                norm.running_var = s.var.clone();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_state())
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let state: ModelState = serde_json::from_str(&text)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Model::from_state(&state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Serializable model: spec, named row-major parameters and batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub parameters: Vec<NamedArray>,
    pub running_stats: Vec<RunningStats>,
}

#[cfg(test)]
mod tests;
