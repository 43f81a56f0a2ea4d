use std::rc::Rc;
use std::str::FromStr;

use super::{shape_err, Array, AutodiffError, Result};

/// An operation together with its attributes.
#[derive(Debug, Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    AddScalar(f64),
    MatMul,
    Concat {
        axis: usize,
    },
    RowGather(Rc<[usize]>),
    SegmentSum {
        segments: Rc<[usize]>,
        num_segments: usize,
    },
    Relu,
    Sigmoid,
    Swish,
    Softmax,
    BatchNorm {
        eps: f64,
        stats: Option<Rc<(Vec<f64>, Vec<f64>)>>,
    },
    RowNorm,
    BroadcastRow(usize),
    BroadcastCol(usize),
    Mean,
    Sum,
}

/// Attribute-free name of an [`Op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    AddScalar,
    MatMul,
    Concat,
    RowGather,
    SegmentSum,
    Relu,
    Sigmoid,
    Swish,
    Softmax,
    BatchNorm,
    RowNorm,
    BroadcastRow,
    BroadcastCol,
    Mean,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Concat,
        OpKind::RowGather,
        OpKind::SegmentSum,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Swish,
        OpKind::Softmax,
        OpKind::BatchNorm,
        OpKind::RowNorm,
        OpKind::BroadcastRow,
        OpKind::BroadcastCol,
        OpKind::Mean,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::RowGather => "row_gather",
            OpKind::SegmentSum => "segment_sum",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Swish => "swish",
            OpKind::Softmax => "softmax",
            OpKind::BatchNorm => "batch_norm",
            OpKind::RowNorm => "row_norm",
            OpKind::BroadcastRow => "broadcast_row",
            OpKind::BroadcastCol => "broadcast_col",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| AutodiffError::UnknownOp(s.to_string()))
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Forward-pass data kept for the backward pass.
pub(crate) enum Cache {
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Sigmoid(Vec<f64>),
}

/// Per-column mean and biased variance over the rows of a matrix.
pub fn batch_moments(x: &Array) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    (mean, var)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b` for row-major matrices, with arbitrary strides on the inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the caller passes slices holding at least m*k and k*n values
    // laid out with the given strides; c holds exactly m*n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(
            op,
            format!(
                "operands differ in shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        );
    }
    Ok(())
}

fn arity(op: &'static str, xs: &[&Array], n: usize) -> Result<()> {
    if xs.len() != n {
        return shape_err(op, format!("expected {n} inputs, got {}", xs.len()));
    }
    Ok(())
}

fn map(x: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::new(a.shape().to_vec(), data).unwrap()
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::MatMul => OpKind::MatMul,
            Op::Concat { .. } => OpKind::Concat,
            Op::RowGather(_) => OpKind::RowGather,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Swish => OpKind::Swish,
            Op::Softmax => OpKind::Softmax,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::RowNorm => OpKind::RowNorm,
            Op::BroadcastRow(_) => OpKind::BroadcastRow,
            Op::BroadcastCol(_) => OpKind::BroadcastCol,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
        }
    }

    pub(crate) fn forward(&self, xs: &[&Array]) -> Result<(Array, Option<Cache>)> {
        let name = self.kind().name();
        let unary = |f: &dyn Fn(f64) -> f64| -> Result<(Array, Option<Cache>)> {
            arity(name, xs, 1)?;
            Ok((map(xs[0], f), None))
        };
        let binary = |f: &dyn Fn(f64, f64) -> f64| -> Result<(Array, Option<Cache>)> {
            arity(name, xs, 2)?;
            same_shape(name, xs[0], xs[1])?;
            Ok((zip_map(xs[0], xs[1], f), None))
        };
        match self {
            Op::Add => binary(&|a, b| a + b),
            Op::Sub => binary(&|a, b| a - b),
            Op::Mul => binary(&|a, b| a * b),
            Op::Div => binary(&|a, b| a / b),
            Op::ScalarMul(s) => unary(&|a| a * s),
            Op::AddScalar(s) => unary(&|a| a + s),
            Op::Relu => unary(&|a| if a > 0.0 { a } else { 0.0 }),
            Op::Sigmoid => unary(&sigmoid),
            Op::Swish => {
                arity(name, xs, 1)?;
                let s: Vec<f64> = xs[0].data().iter().map(|&a| sigmoid(a)).collect();
                let y = xs[0].data().iter().zip(&s).map(|(a, s)| a * s).collect();
                Ok((
                    Array::new(xs[0].shape().to_vec(), y)?,
                    Some(Cache::Sigmoid(s)),
                ))
            }
            Op::MatMul => {
                arity(name, xs, 2)?;
                let (m, k) = xs[0].dims2(name)?;
                let (k2, n) = xs[1].dims2(name)?;
                if k != k2 {
                    return shape_err(name, format!("[{m}x{k}] * [{k2}x{n}] do not conform"));
                }
                let c = gemm(
                    m,
                    k,
                    n,
                    xs[0].data(),
                    k as isize,
                    1,
                    xs[1].data(),
                    n as isize,
                    1,
                );
                Ok((Array::matrix(m, n, c)?, None))
            }
            Op::Concat { axis } => {
                if xs.is_empty() {
                    return shape_err(name, "nothing to concatenate");
                }
                let dims = xs
                    .iter()
                    .map(|x| x.dims2(name))
                    .collect::<Result<Vec<_>>>()?;
                match axis {
                    0 => {
                        let cols = dims[0].1;
                        if let Some((i, _)) = dims.iter().enumerate().find(|(_, d)| d.1 != cols) {
                            return shape_err(
                                name,
                                format!("part {i} has {} columns, expected {cols}", dims[i].1),
                            );
                        }
                        let rows = dims.iter().map(|d| d.0).sum();
                        let data = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
                        Ok((Array::matrix(rows, cols, data)?, None))
                    }
                    1 => {
                        let rows = dims[0].0;
                        if let Some((i, _)) = dims.iter().enumerate().find(|(_, d)| d.0 != rows) {
                            return shape_err(
                                name,
                                format!("part {i} has {} rows, expected {rows}", dims[i].0),
                            );
                        }
                        let cols: usize = dims.iter().map(|d| d.1).sum();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            for x in xs {
                                data.extend_from_slice(x.row(r));
                            }
                        }
                        Ok((Array::matrix(rows, cols, data)?, None))
                    }
                    _ => shape_err(name, format!("axis {axis} out of range for matrices")),
                }
            }
            Op::RowGather(index) => {
                arity(name, xs, 1)?;
                let (rows, _) = xs[0].dims2(name)?;
                if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                    return shape_err(
                        name,
                        format!("row index {bad} out of bounds for {rows} rows"),
                    );
                }
                Ok((xs[0].select_rows(index), None))
            }
            Op::SegmentSum {
                segments,
                num_segments,
            } => {
                arity(name, xs, 1)?;
                let (rows, cols) = xs[0].dims2(name)?;
                if segments.len() != rows {
                    return shape_err(
                        name,
                        format!("{} segment ids for {rows} rows", segments.len()),
                    );
                }
                if let Some(&bad) = segments.iter().find(|&&s| s >= *num_segments) {
                    return shape_err(
                        name,
                        format!("segment id {bad} out of range for {num_segments} segments"),
                    );
                }
                let mut out = vec![0.0; num_segments * cols];
                for (r, &s) in segments.iter().enumerate() {
                    let dst = &mut out[s * cols..(s + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(xs[0].row(r)) {
                        *o += v;
                    }
                }
                Ok((Array::matrix(*num_segments, cols, out)?, None))
            }
            Op::Softmax => {
                arity(name, xs, 1)?;
                let (rows, cols) = xs[0].dims2(name)?;
                if cols == 0 {
                    return Err(AutodiffError::EmptySoftmax);
                }
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = xs[0].row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let start = out.len();
                    out.extend(row.iter().map(|v| (v - max).exp()));
                    let total: f64 = out[start..].iter().sum();
                    out[start..].iter_mut().for_each(|v| *v /= total);
                }
                Ok((Array::matrix(rows, cols, out)?, None))
            }
            Op::BatchNorm { eps, stats } => {
                arity(name, xs, 3)?;
                let (rows, cols) = xs[0].dims2(name)?;
                for (label, p) in [("gamma", xs[1]), ("beta", xs[2])] {
                    if p.len() != cols {
                        return shape_err(
                            name,
                            format!("{label} has {} entries for {cols} features", p.len()),
                        );
                    }
                }
                let (mean, var) = match stats {
                    Some(s) => {
                        if s.0.len() != cols || s.1.len() != cols {
                            return shape_err(name, "running statistics have the wrong width");
                        }
                        (s.0.clone(), s.1.clone())
                    }
                    None => batch_moments(xs[0]),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = Vec::with_capacity(rows * cols);
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (c, v) in xs[0].row(r).iter().enumerate() {
                        let h = (v - mean[c]) * inv_std[c];
                        xhat.push(h);
                        out.push(h * xs[1].data()[c] + xs[2].data()[c]);
                    }
                }
                Ok((
                    Array::matrix(rows, cols, out)?,
                    Some(Cache::BatchNorm { xhat, inv_std }),
                ))
            }
            Op::RowNorm => {
                arity(name, xs, 1)?;
                let (rows, _) = xs[0].dims2(name)?;
                let out = (0..rows)
                    .map(|r| xs[0].row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Ok((Array::matrix(rows, 1, out)?, None))
            }
            Op::BroadcastRow(rows) => {
                arity(name, xs, 1)?;
                let (r, cols) = xs[0].dims2(name)?;
                if r != 1 {
                    return shape_err(name, format!("expected a single row, got {r}"));
                }
                let mut out = Vec::with_capacity(rows * cols);
                for _ in 0..*rows {
                    out.extend_from_slice(xs[0].data());
                }
                Ok((Array::matrix(*rows, cols, out)?, None))
            }
            Op::BroadcastCol(cols) => {
                arity(name, xs, 1)?;
                let (rows, c) = xs[0].dims2(name)?;
                if c != 1 {
                    return shape_err(name, format!("expected a single column, got {c}"));
                }
                let mut out = Vec::with_capacity(rows * cols);
                for &v in xs[0].data() {
                    out.extend(std::iter::repeat_n(v, *cols));
                }
                Ok((Array::matrix(rows, *cols, out)?, None))
            }
            Op::Sum => {
                arity(name, xs, 1)?;
                Ok((Array::scalar(xs[0].data().iter().sum()), None))
            }
            Op::Mean => {
                arity(name, xs, 1)?;
                if xs[0].is_empty() {
                    return shape_err(name, "mean of an empty tensor");
                }
                let total: f64 = xs[0].data().iter().sum();
                Ok((Array::scalar(total / xs[0].len() as f64), None))
            }
        }
    }

    /// Gradients with respect to each input, given the output adjoint `dy`.
    /// Inputs with `needs[i] == false` get `None`.
    pub(crate) fn backward(
        &self,
        xs: &[&Array],
        out: &Array,
        cache: Option<&Cache>,
        dy: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..dy.len()).map(f).collect() };
        match self {
            Op::Add => vec![want(0).then(|| dy.to_vec()), want(1).then(|| dy.to_vec())],
            Op::Sub => vec![
                want(0).then(|| dy.to_vec()),
                want(1).then(|| dy.iter().map(|g| -g).collect()),
            ],
            Op::Mul => {
                let (a, b) = (xs[0].data(), xs[1].data());
                vec![
                    want(0).then(|| elementwise(&|i| dy[i] * b[i])),
                    want(1).then(|| elementwise(&|i| dy[i] * a[i])),
                ]
            }
            Op::Div => {
                let (a, b) = (xs[0].data(), xs[1].data());
                vec![
                    want(0).then(|| elementwise(&|i| dy[i] / b[i])),
                    want(1).then(|| elementwise(&|i| -dy[i] * a[i] / (b[i] * b[i]))),
                ]
            }
            Op::ScalarMul(s) => vec![want(0).then(|| dy.iter().map(|g| g * s).collect())],
            Op::AddScalar(_) => vec![want(0).then(|| dy.to_vec())],
            Op::Relu => {
                let x = xs[0].data();
                vec![want(0).then(|| elementwise(&|i| if x[i] > 0.0 { dy[i] } else { 0.0 }))]
            }
            Op::Sigmoid => {
                let y = out.data();
                vec![want(0).then(|| elementwise(&|i| dy[i] * y[i] * (1.0 - y[i])))]
            }
            Op::Swish => {
                let Some(Cache::Sigmoid(s)) = cache else {
                    unreachable!("swish recorded without cache");
                };
                let x = xs[0].data();
                vec![want(0).then(|| elementwise(&|i| dy[i] * (s[i] + x[i] * s[i] * (1.0 - s[i]))))]
            }
            Op::MatMul => {
                let (m, k) = (xs[0].rows(), xs[0].cols());
                let n = xs[1].cols();
                let da = want(0).then(|| {
                    // dA = dY * B^T
                    gemm(m, n, k, dy, n as isize, 1, xs[1].data(), 1, n as isize)
                });
                let db = want(1).then(|| {
                    // dB = A^T * dY
                    gemm(k, m, n, xs[0].data(), 1, k as isize, dy, n as isize, 1)
                });
                vec![da, db]
            }
            Op::Concat { axis } => {
                let mut grads = Vec::with_capacity(xs.len());
                if *axis == 0 {
                    let mut offset = 0;
                    for (i, x) in xs.iter().enumerate() {
                        grads.push(want(i).then(|| dy[offset..offset + x.len()].to_vec()));
                        offset += x.len();
                    }
                } else {
                    let total = out.cols();
                    let mut offset = 0;
                    for (i, x) in xs.iter().enumerate() {
                        let cols = x.cols();
                        grads.push(want(i).then(|| {
                            let mut g = Vec::with_capacity(x.len());
                            for r in 0..x.rows() {
                                let start = r * total + offset;
                                g.extend_from_slice(&dy[start..start + cols]);
                            }
                            g
                        }));
                        offset += cols;
                    }
                }
                grads
            }
            Op::RowGather(index) => vec![want(0).then(|| {
                let cols = xs[0].cols();
                let mut g = vec![0.0; xs[0].len()];
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut g[src * cols..(src + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                        *d += v;
                    }
                }
                g
            })],
            Op::SegmentSum { segments, .. } => vec![want(0).then(|| {
                let cols = xs[0].cols();
                let mut g = Vec::with_capacity(xs[0].len());
                for &s in segments.iter() {
                    g.extend_from_slice(&dy[s * cols..(s + 1) * cols]);
                }
                g
            })],
            Op::Softmax => vec![want(0).then(|| {
                let cols = out.cols();
                let y = out.data();
                let mut g = vec![0.0; y.len()];
                for r in 0..out.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = y[span.clone()]
                        .iter()
                        .zip(&dy[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in span {
                        g[i] = y[i] * (dy[i] - dot);
                    }
                }
                g
            })],
            Op::BatchNorm { stats, .. } => {
                let Some(Cache::BatchNorm { xhat, inv_std }) = cache else {
                    unreachable!("batch_norm recorded without cache");
                };
                let (rows, cols) = (xs[0].rows(), xs[0].cols());
                let gamma = xs[1].data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        dgamma[c] += dy[i] * xhat[i];
                        dbeta[c] += dy[i];
                    }
                }
                let dx = want(0).then(|| {
                    let mut g = vec![0.0; rows * cols];
                    if stats.is_some() {
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                g[i] = dy[i] * gamma[c] * inv_std[c];
                            }
                        }
                    } else {
                        let n = rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                g[i] = gamma[c] * inv_std[c] / n
                                    * (n * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
                            }
                        }
                    }
                    g
                });
                vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
            }
            Op::RowNorm => vec![want(0).then(|| {
                let cols = xs[0].cols();
                let mut g = vec![0.0; xs[0].len()];
                for (r, &len) in out.data().iter().enumerate() {
                    if len > 0.0 {
                        let scale = dy[r] / len;
                        for c in 0..cols {
                            g[r * cols + c] = scale * xs[0].data()[r * cols + c];
                        }
                    }
                }
                g
            })],
            Op::BroadcastRow(rows) => vec![want(0).then(|| {
                let cols = xs[0].len();
                let mut g = vec![0.0; cols];
                for r in 0..*rows {
                    for (a, v) in g.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                        *a += v;
                    }
                }
                g
            })],
            Op::BroadcastCol(cols) => vec![want(0).then(|| {
                (0..xs[0].len())
                    .map(|r| dy[r * cols..(r + 1) * cols].iter().sum())
                    .collect()
            })],
            Op::Sum => vec![want(0).then(|| vec![dy[0]; xs[0].len()])],
            Op::Mean => {
                let n = xs[0].len() as f64;
                vec![want(0).then(|| vec![dy[0] / n; xs[0].len()])]
            }
        }
    }
}
