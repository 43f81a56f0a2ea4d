//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! arrays.
//!
//! A [`Tape`] owns every value produced during one forward pass. [`Tensor`]
//! is a cheap `Copy` handle into that tape. Operations whose inputs require
//! gradients are recorded in execution order, so the record list is already
//! topologically sorted and [`Tape::backward`] walks it once in reverse.
//!
//! ```
//! use meshseg::autodiff::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Array::vector(vec![3.0]), true);
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[6.0]);
//! ```

mod array;
mod gradcheck;
mod ops;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

pub use array::Array;
pub use gradcheck::grad_check;
pub use ops::{batch_moments, Op, OpKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("softmax over rows of width zero")]
    EmptySoftmax,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tensor that requires grad")]
    Detached,
    #[error("tensor belongs to a different tape")]
    ForeignTape,
    #[error("grad_check: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape {
        op,
        detail: detail.into(),
    })
}

struct Node {
    value: Array,
    requires_grad: bool,
}

struct Record {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
    cache: Option<ops::Cache>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
        });
        inner.grads.push(None);
        Tensor {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Array) -> Tensor<'_> {
        self.leaf(value, false)
    }

    /// Number of operations recorded for differentiation.
    pub fn num_records(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn num_values(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Runs `op` on `inputs`, recording it when any input requires grad.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        for t in inputs {
            if !std::ptr::eq(t.tape, self) {
                return Err(AutodiffError::ForeignTape);
            }
        }
        let (value, cache, requires_grad) = {
            let inner = self.inner.borrow();
            let xs: Vec<&Array> = inputs.iter().map(|t| &inner.nodes[t.id].value).collect();
            let (value, cache) = op.forward(&xs)?;
            let requires_grad = inputs.iter().any(|t| inner.nodes[t.id].requires_grad);
            (value, cache, requires_grad)
        };
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
        });
        inner.grads.push(None);
        let output = inner.nodes.len() - 1;
        if requires_grad {
            inner.records.push(Record {
                op,
                inputs: inputs.iter().map(|t| t.id).collect(),
                output,
                cache,
            });
        }
        Ok(Tensor {
            tape: self,
            id: output,
        })
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
        self.apply(Op::Concat { axis }, parts)
    }

    /// Propagates d`loss` back to every leaf that requires grad.
    ///
    /// Gradients are added to whatever is already stored, so two calls
    /// without [`Tape::zero_grad`] in between accumulate.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignTape);
        }
        let mut inner = self.inner.borrow_mut();
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                loss_node.value.shape().to_vec(),
            ));
        }
        if !loss_node.requires_grad {
            return Err(AutodiffError::Detached);
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        adjoint[loss.id] = Some(vec![1.0]);
        let Inner {
            nodes,
            records,
            grads,
        } = &mut *inner;
        for record in records.iter().rev() {
            if record.output > loss.id {
                continue;
            }
            let Some(dy) = adjoint[record.output].take() else {
                continue;
            };
            let xs: Vec<&Array> = record.inputs.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = record
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let out = &nodes[record.output].value;
            let input_grads = record
                .op
                .backward(&xs, out, record.cache.as_ref(), &dy, &needs);
            for (&input, g) in record.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    match &mut adjoint[input] {
                        Some(acc) => add_into(acc, &g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        // Whatever remains is attached to leaves (or to the loss itself when
        // it is a leaf).
        for (id, adj) in adjoint.into_iter().enumerate() {
            if let Some(g) = adj {
                if nodes[id].requires_grad {
                    accumulate(&mut grads[id], &g);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => add_into(acc, g),
        None => *slot = Some(g.to_vec()),
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            &inner.nodes[self.id].value
        })
    }

    pub fn to_array(&self) -> Array {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value. `None` until a backward
    /// pass reaches this tensor.
    pub fn grad(&self) -> Option<Array> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        inner.grads[self.id]
            .as_ref()
            .map(|g| Array::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn add(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Add, &[self, other])
    }

    pub fn sub(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Sub, &[self, other])
    }

    /// Elementwise product.
    pub fn mul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Mul, &[self, other])
    }

    /// Elementwise quotient.
    pub fn div(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Div, &[self, other])
    }

    pub fn scale(self, factor: f64) -> Result<Tensor<'t>> {
        self.tape.apply(Op::ScalarMul(factor), &[self])
    }

    pub fn add_scalar(self, offset: f64) -> Result<Tensor<'t>> {
        self.tape.apply(Op::AddScalar(offset), &[self])
    }

    pub fn matmul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::MatMul, &[self, other])
    }

    /// `out[r] = self[index[r]]`.
    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Tensor<'t>> {
        self.tape.apply(Op::RowGather(index), &[self])
    }

    /// `out[segments[r]] += self[r]`, with `num_segments` output rows.
    pub fn segment_sum(self, segments: Rc<[usize]>, num_segments: usize) -> Result<Tensor<'t>> {
        self.tape.apply(
            Op::SegmentSum {
                segments,
                num_segments,
            },
            &[self],
        )
    }

    pub fn relu(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Relu, &[self])
    }

    pub fn sigmoid(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Sigmoid, &[self])
    }

    pub fn swish(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Swish, &[self])
    }

    pub fn softmax_rows(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Softmax, &[self])
    }

    /// Per-feature normalization over rows followed by `gamma * x + beta`.
    ///
    /// With `stats = None` the batch mean and biased variance are used (and
    /// differentiated through); otherwise the given running statistics are
    /// treated as constants.
    pub fn batch_norm(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
        stats: Option<Rc<(Vec<f64>, Vec<f64>)>>,
    ) -> Result<Tensor<'t>> {
        self.tape
            .apply(Op::BatchNorm { eps, stats }, &[self, gamma, beta])
    }

    /// Euclidean length of each row, as an `N x 1` column.
    pub fn row_norm(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::RowNorm, &[self])
    }

    /// Repeats a `1 x D` row `rows` times.
    pub fn broadcast_row(self, rows: usize) -> Result<Tensor<'t>> {
        self.tape.apply(Op::BroadcastRow(rows), &[self])
    }

    /// Repeats an `N x 1` column `cols` times.
    pub fn broadcast_col(self, cols: usize) -> Result<Tensor<'t>> {
        self.tape.apply(Op::BroadcastCol(cols), &[self])
    }

    pub fn sum(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Sum, &[self])
    }

    pub fn mean(self) -> Result<Tensor<'t>> {
        self.tape.apply(Op::Mean, &[self])
    }
}
