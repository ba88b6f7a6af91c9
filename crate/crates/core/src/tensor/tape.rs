//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] appends a node holding its output value and
//! the inputs its backward rule needs. Node ids only ever refer to earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep. Backward rules accumulate
//! into input gradients; they never overwrite.

use std::cell::{Ref, RefCell};

use super::conv::{conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward};
use super::optim::ParamId;
use super::{matmul_into, Tensor};
use crate::error::{MireError, Result};

/// Guard added to each norm in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    RowNorm(Var),
    Cosine(Var, Var),
    CosineRows(Var, Var),
    SqDist(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    PickPerRow { x: Var, idx: Vec<usize> },
    SymNormalize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Parameter-to-node binding produced by [`super::ParamStore::bind`].
pub struct Bound {
    pub(crate) vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> MireError {
    MireError::shape(op, format!("{a:?} vs {b:?}"))
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(MireError::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn norms(t: &Tensor) -> Vec<f64> {
    let d = t.cols();
    t.data()
        .chunks(d.max(1))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let m = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn push_checked(&self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let needs = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].needs_grad)
        };
        Ok(self.push(value, op, needs))
    }

    /// A leaf that gradients flow into.
    pub fn var(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub(crate) fn param_leaf(&self, t: Tensor, id: ParamId, requires_grad: bool) -> Var {
        let v = self.push(t, Op::Leaf, requires_grad);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    /// Copies a node's value into a fresh constant leaf.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn binary_same(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value_ref(a), self.value_ref(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err(name, ta.shape(), tb.shape()));
            }
            zip_map(&ta, &tb, f)
        };
        self.push_checked(name, out, op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn broadcast(&self, name: &'static str, x: Var, v: Var, along_rows: bool, mul: bool, op: Op) -> Result<Var> {
        let out = {
            let (tx, tv) = (self.value_ref(x), self.value_ref(v));
            let (n, m) = rank2(name, &tx)?;
            let want = if along_rows { m } else { n };
            if tv.rank() != 1 || tv.len() != want {
                return Err(shape_err(name, tx.shape(), tv.shape()));
            }
            let mut out = tx.clone();
            for i in 0..n {
                for j in 0..m {
                    let s = if along_rows { tv.data()[j] } else { tv.data()[i] };
                    let o = &mut out.data_mut()[i * m + j];
                    if mul {
                        *o *= s
                    } else {
                        *o += s
                    }
                }
            }
            out
        };
        self.push_checked(name, out, op, &[x, v])
    }

    /// `x[n,m] + v[m]`, broadcast over rows.
    pub fn add_row(&self, x: Var, v: Var) -> Result<Var> {
        self.broadcast("add_row", x, v, true, false, Op::AddRow(x, v))
    }

    /// `x[n,m] + v[n]`, broadcast over columns.
    pub fn add_col(&self, x: Var, v: Var) -> Result<Var> {
        self.broadcast("add_col", x, v, false, false, Op::AddCol(x, v))
    }

    /// `x[n,m] * v[m]`, broadcast over rows.
    pub fn mul_row(&self, x: Var, v: Var) -> Result<Var> {
        self.broadcast("mul_row", x, v, true, true, Op::MulRow(x, v))
    }

    /// `x[n,m] * v[n]`, broadcast over columns.
    pub fn mul_col(&self, x: Var, v: Var) -> Result<Var> {
        self.broadcast("mul_col", x, v, false, true, Op::MulCol(x, v))
    }

    pub fn mul_scalar(&self, x: Var, s: f64) -> Result<Var> {
        let out = self.value_ref(x).map(|v| v * s);
        self.push_checked("mul_scalar", out, Op::MulScalar(x, s), &[x])
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Result<Var> {
        let out = self.value_ref(x).map(|v| v + s);
        self.push_checked("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let out = self.value_ref(x).map(f64::exp);
        self.push_checked("exp", out, Op::Exp(x), &[x])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = self.value_ref(x).map(|v| v.max(0.0));
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value_ref(a).matmul(&self.value_ref(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            rank2("transpose", &t)?;
            t.transpose2()
        };
        self.push_checked("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(&self.value_ref(x), &self.value_ref(w), &self.value_ref(b), stride, pad)?;
        self.push_checked("conv2d", out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b])
    }

    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(&self.value_ref(x))?;
        self.push_checked("maxpool2", out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            if t.rank() != 4 {
                return Err(MireError::shape("global_avg_pool", format!("expected [B,C,H,W], got {:?}", t.shape())));
            }
            let (b, c, hw) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
            let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            Tensor::new(&[b, c], data)?
        };
        self.push_checked("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            rank2("softmax", &t)?;
            softmax_rows(&t)
        };
        self.push_checked("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            let (_, m) = rank2("log_softmax", &t)?;
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(m) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        self.push_checked("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let t = self.value_ref(logits);
            let (n, m) = rank2("cross_entropy", &t)?;
            if labels.len() != n {
                return Err(MireError::shape("cross_entropy", format!("{n} rows but {} labels", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
                return Err(MireError::contract(format!("cross_entropy: label {bad} out of range for {m} classes")));
            }
            let probs = softmax_rows(&t);
            let mut loss = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                let row = t.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                loss += lse - row[l];
            }
            (loss / n as f64, probs)
        };
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value_ref(x).sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let s = {
            let t = self.value_ref(x);
            if t.is_empty() {
                return Err(MireError::shape("mean", "empty tensor"));
            }
            t.sum() / t.len() as f64
        };
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of a rank-2 tensor over `axis` (0 -> `[m]`, 1 -> `[n]`).
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            let (n, m) = rank2("mean_axis", &t)?;
            match axis {
                0 => {
                    let mut acc = vec![0.0; m];
                    for i in 0..n {
                        for (a, v) in acc.iter_mut().zip(t.row(i)) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(acc.into_iter().map(|v| v / n as f64).collect())
                }
                1 => Tensor::from_vec((0..n).map(|i| t.row(i).iter().sum::<f64>() / m as f64).collect()),
                _ => return Err(MireError::shape("mean_axis", format!("axis {axis} on rank 2"))),
            }
        };
        self.push_checked("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    /// Euclidean norm of each row: `[n,d] -> [n]`.
    pub fn row_norm(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            rank2("row_norm", &t)?;
            Tensor::from_vec(norms(&t))
        };
        self.push_checked("row_norm", out, Op::RowNorm(x), &[x])
    }

    /// Pairwise cosine similarity `[n,d] x [m,d] -> [n,m]`, each norm
    /// floored at [`COSINE_EPS`].
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value_ref(a), self.value_ref(b));
            let (n, d) = rank2("cosine", &ta)?;
            let (m, d2) = rank2("cosine", &tb)?;
            if d != d2 {
                return Err(shape_err("cosine", ta.shape(), tb.shape()));
            }
            let (na, nb) = (norms(&ta), norms(&tb));
            let mut out = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in 0..m {
                    let s: f64 = ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
                    out.set2(i, j, s / (na[i].max(COSINE_EPS) * nb[j].max(COSINE_EPS)));
                }
            }
            out
        };
        self.push_checked("cosine", out, Op::Cosine(a, b), &[a, b])
    }

    /// Row-matched cosine similarity `[n,d], [n,d] -> [n]`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value_ref(a), self.value_ref(b));
            rank2("cosine_rows", &ta)?;
            if ta.shape() != tb.shape() {
                return Err(shape_err("cosine_rows", ta.shape(), tb.shape()));
            }
            let (na, nb) = (norms(&ta), norms(&tb));
            Tensor::from_vec(
                (0..ta.rows())
                    .map(|i| {
                        let s: f64 = ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum();
                        s / (na[i].max(COSINE_EPS) * nb[i].max(COSINE_EPS))
                    })
                    .collect(),
            )
        };
        self.push_checked("cosine_rows", out, Op::CosineRows(a, b), &[a, b])
    }

    /// Pairwise squared Euclidean distance `[n,d] x [m,d] -> [n,m]`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value_ref(a), self.value_ref(b));
            let (n, d) = rank2("sq_dist", &ta)?;
            let (m, d2) = rank2("sq_dist", &tb)?;
            if d != d2 {
                return Err(shape_err("sq_dist", ta.shape(), tb.shape()));
            }
            let mut out = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in 0..m {
                    let s: f64 = ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                    out.set2(i, j, s);
                }
            }
            out
        };
        self.push_checked("sq_dist", out, Op::SqDist(a, b), &[a, b])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value_ref(x).reshape(shape)?;
        self.push_checked("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenation along axis 0 (any rank) or axis 1 (rank 2).
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let ts: Vec<Ref<'_, Tensor>> = inputs.iter().map(|&v| self.value_ref(v)).collect();
            let first = ts.first().ok_or_else(|| MireError::shape("concat", "no inputs"))?;
            match axis {
                0 => {
                    let tail = first.shape()[1..].to_vec();
                    let mut rows = 0;
                    let mut data = Vec::new();
                    for t in &ts {
                        if t.rank() == 0 || t.shape()[1..] != tail[..] {
                            return Err(shape_err("concat", first.shape(), t.shape()));
                        }
                        rows += t.shape()[0];
                        data.extend_from_slice(t.data());
                    }
                    let mut shape = vec![rows];
                    shape.extend_from_slice(&tail);
                    Tensor::new(&shape, data)?
                }
                1 => {
                    let (n, _) = rank2("concat", first)?;
                    let mut total = 0;
                    for t in &ts {
                        let (tn, tm) = rank2("concat", t)?;
                        if tn != n {
                            return Err(shape_err("concat", first.shape(), t.shape()));
                        }
                        total += tm;
                    }
                    let mut data = Vec::with_capacity(n * total);
                    for i in 0..n {
                        for t in &ts {
                            data.extend_from_slice(t.row(i));
                        }
                    }
                    Tensor::new(&[n, total], data)?
                }
                _ => return Err(MireError::shape("concat", format!("unsupported axis {axis}"))),
            }
        };
        self.push_checked("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Gathers slices along the leading axis.
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            if t.rank() == 0 {
                return Err(MireError::shape("select_rows", "scalar input"));
            }
            let n = t.shape()[0];
            let inner: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * inner);
            for &i in idx {
                if i >= n {
                    return Err(MireError::shape("select_rows", format!("index {i} out of {n} rows")));
                }
                data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&t.shape()[1..]);
            Tensor::new(&shape, data)?
        };
        self.push_checked("select_rows", out, Op::SelectRows { x, idx: idx.to_vec() }, &[x])
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick_per_row(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value_ref(x);
            let (n, m) = rank2("pick_per_row", &t)?;
            if idx.len() != n {
                return Err(MireError::shape("pick_per_row", format!("{n} rows, {} indices", idx.len())));
            }
            let mut data = Vec::with_capacity(n);
            for (i, &j) in idx.iter().enumerate() {
                if j >= m {
                    return Err(MireError::contract(format!("pick_per_row: index {j} out of {m} columns")));
                }
                data.push(t.at2(i, j));
            }
            Tensor::from_vec(data)
        };
        self.push_checked("pick_per_row", out, Op::PickPerRow { x, idx: idx.to_vec() }, &[x])
    }

    /// Symmetric graph normalization `D^-1/2 (A + I) D^-1/2`, with `D` the
    /// row sums of `A + I`.
    pub fn sym_normalize(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value_ref(a);
            let (n, m) = rank2("sym_normalize", &t)?;
            if n != m {
                return Err(MireError::shape("sym_normalize", format!("adjacency must be square, got {:?}", t.shape())));
            }
            let hat = add_identity(&t);
            let r = inv_sqrt_degrees(&hat)?;
            let mut out = hat;
            for i in 0..n {
                for j in 0..n {
                    let v = out.at2(i, j) * r[i] * r[j];
                    out.set2(i, j, v);
                }
            }
            out
        };
        self.push_checked("sym_normalize", out, Op::SymNormalize(a), &[a])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if root.0 >= nodes.len() {
            return Err(MireError::contract("backward: root is not on this tape"));
        }
        if nodes[root.0].value.len() != 1 {
            return Err(MireError::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if node.needs_grad {
                backprop_node(&nodes, node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_identity(t: &Tensor) -> Tensor {
    let mut hat = t.clone();
    for i in 0..t.rows() {
        let v = hat.at2(i, i) + 1.0;
        hat.set2(i, i, v);
    }
    hat
}

fn inv_sqrt_degrees(hat: &Tensor) -> Result<Vec<f64>> {
    (0..hat.rows())
        .map(|i| {
            let d: f64 = hat.row(i).iter().sum();
            if d <= 0.0 {
                Err(MireError::numeric("sym_normalize", format!("non-positive degree {d} at row {i}")))
            } else {
                Ok(1.0 / d.sqrt())
            }
        })
        .collect()
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, zip_map(g, val(*b), |x, y| x * y));
            accumulate(nodes, grads, *b, zip_map(g, val(*a), |x, y| x * y));
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, zip_map(g, tb, |x, y| x / y));
            let gb: Vec<f64> = g
                .data()
                .iter()
                .zip(ta.data())
                .zip(tb.data())
                .map(|((gv, av), bv)| -gv * av / (bv * bv))
                .collect();
            accumulate(nodes, grads, *b, Tensor::new(tb.shape(), gb)?);
        }
        Op::AddRow(x, v) | Op::AddCol(x, v) => {
            accumulate(nodes, grads, *x, g.clone());
            let (n, m) = (g.rows(), g.cols());
            let along_rows = matches!(node.op, Op::AddRow(..));
            let mut gv = vec![0.0; if along_rows { m } else { n }];
            for i in 0..n {
                for j in 0..m {
                    gv[if along_rows { j } else { i }] += g.at2(i, j);
                }
            }
            accumulate(nodes, grads, *v, Tensor::from_vec(gv));
        }
        Op::MulRow(x, v) | Op::MulCol(x, v) => {
            let (tx, tv) = (val(*x), val(*v));
            let (n, m) = (g.rows(), g.cols());
            let along_rows = matches!(node.op, Op::MulRow(..));
            let mut gx = Tensor::zeros(&[n, m]);
            let mut gv = vec![0.0; tv.len()];
            for i in 0..n {
                for j in 0..m {
                    let k = if along_rows { j } else { i };
                    gx.set2(i, j, g.at2(i, j) * tv.data()[k]);
                    gv[k] += g.at2(i, j) * tx.at2(i, j);
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *v, Tensor::from_vec(gv));
        }
        Op::MulScalar(x, s) => accumulate(nodes, grads, *x, g.map(|v| v * s)),
        Op::AddScalar(x) | Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, g.reshape(&shape)?);
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, zip_map(g, y, |a, b| a * b)),
        Op::Relu(x) => accumulate(nodes, grads, *x, zip_map(g, val(*x), |a, b| if b > 0.0 { a } else { 0.0 })),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
            if nodes[a.0].needs_grad {
                let mut ga = vec![0.0; n * k];
                matmul_into(g.data(), tb.transpose2().data(), &mut ga, n, m, k);
                accumulate(nodes, grads, *a, Tensor::new(&[n, k], ga)?);
            }
            if nodes[b.0].needs_grad {
                let mut gb = vec![0.0; k * m];
                matmul_into(ta.transpose2().data(), g.data(), &mut gb, k, n, m);
                accumulate(nodes, grads, *b, Tensor::new(&[k, m], gb)?);
            }
        }
        Op::Transpose(x) => accumulate(nodes, grads, *x, g.transpose2()),
        Op::Conv2d { x, w, b, stride, pad } => {
            let (dx, dw, db) = conv2d_backward(val(*x), val(*w), val(*b), *stride, *pad, g, nodes[x.0].needs_grad)?;
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            accumulate(nodes, grads, *b, db);
        }
        Op::MaxPool2 { x, argmax } => accumulate(nodes, grads, *x, maxpool2_backward(val(*x).shape(), argmax, g)),
        Op::GlobalAvgPool(x) => {
            let shape = val(*x).shape().to_vec();
            let hw = shape[2] * shape[3];
            let mut gx = Vec::with_capacity(hw * g.len());
            for &gv in g.data() {
                gx.extend(std::iter::repeat(gv / hw as f64).take(hw));
            }
            accumulate(nodes, grads, *x, Tensor::new(&shape, gx)?);
        }
        Op::Softmax(x) => {
            let m = y.cols();
            let mut gx = y.clone();
            for ((gxr, yr), gr) in gx.data_mut().chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dotp);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LogSoftmax(x) => {
            let m = y.cols();
            let mut gx = y.clone();
            for ((gxr, yr), gr) in gx.data_mut().chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                let s: f64 = gr.iter().sum();
                for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let scale = g.item() / labels.len() as f64;
            let mut gx = probs.clone();
            let m = gx.cols();
            for (i, &l) in labels.iter().enumerate() {
                gx.data_mut()[i * m + l] -= 1.0;
            }
            gx.data_mut().iter_mut().for_each(|v| *v *= scale);
            accumulate(nodes, grads, *logits, gx);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item())),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
        }
        Op::MeanAxis { x, axis } => {
            let (n, m) = (val(*x).rows(), val(*x).cols());
            let mut gx = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in 0..m {
                    let v = if *axis == 0 { g.data()[j] / n as f64 } else { g.data()[i] / m as f64 };
                    gx.set2(i, j, v);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::RowNorm(x) => {
            let tx = val(*x);
            let mut gx = Tensor::zeros(tx.shape());
            for i in 0..tx.rows() {
                let nrm = y.data()[i];
                if nrm > 0.0 {
                    for j in 0..tx.cols() {
                        gx.set2(i, j, g.data()[i] * tx.at2(i, j) / nrm);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (na, nb) = (norms(ta), norms(tb));
            let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
            let mut ga = Tensor::zeros(ta.shape());
            let mut gb = Tensor::zeros(tb.shape());
            for i in 0..n {
                for j in 0..m {
                    let gv = g.at2(i, j);
                    if gv == 0.0 {
                        continue;
                    }
                    let (da, db) = (na[i].max(COSINE_EPS), nb[j].max(COSINE_EPS));
                    let s: f64 = ta.row(i).iter().zip(tb.row(j)).map(|(p, q)| p * q).sum();
                    for k in 0..d {
                        let mut dai = tb.at2(j, k) / (da * db);
                        if na[i] > COSINE_EPS {
                            dai -= s / (da * da * db) * ta.at2(i, k) / na[i];
                        }
                        let mut dbj = ta.at2(i, k) / (da * db);
                        if nb[j] > COSINE_EPS {
                            dbj -= s / (da * db * db) * tb.at2(j, k) / nb[j];
                        }
                        ga.data_mut()[i * d + k] += gv * dai;
                        gb.data_mut()[j * d + k] += gv * dbj;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::CosineRows(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (na, nb) = (norms(ta), norms(tb));
            let d = ta.cols();
            let mut ga = Tensor::zeros(ta.shape());
            let mut gb = Tensor::zeros(tb.shape());
            for i in 0..ta.rows() {
                let gv = g.data()[i];
                let (da, db) = (na[i].max(COSINE_EPS), nb[i].max(COSINE_EPS));
                let s: f64 = ta.row(i).iter().zip(tb.row(i)).map(|(p, q)| p * q).sum();
                for k in 0..d {
                    let mut dai = tb.at2(i, k) / (da * db);
                    if na[i] > COSINE_EPS {
                        dai -= s / (da * da * db) * ta.at2(i, k) / na[i];
                    }
                    let mut dbi = ta.at2(i, k) / (da * db);
                    if nb[i] > COSINE_EPS {
                        dbi -= s / (da * db * db) * tb.at2(i, k) / nb[i];
                    }
                    ga.data_mut()[i * d + k] = gv * dai;
                    gb.data_mut()[i * d + k] = gv * dbi;
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::SqDist(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
            let mut ga = Tensor::zeros(ta.shape());
            let mut gb = Tensor::zeros(tb.shape());
            for i in 0..n {
                for j in 0..m {
                    let gv = g.at2(i, j);
                    for k in 0..d {
                        let diff = 2.0 * gv * (ta.at2(i, k) - tb.at2(j, k));
                        ga.data_mut()[i * d + k] += diff;
                        gb.data_mut()[j * d + k] -= diff;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Concat { inputs, axis } => {
            if *axis == 0 {
                let mut off = 0;
                for &v in inputs {
                    let t = val(v);
                    let part = Tensor::new(t.shape(), g.data()[off..off + t.len()].to_vec())?;
                    off += t.len();
                    accumulate(nodes, grads, v, part);
                }
            } else {
                let n = g.rows();
                let mut col = 0;
                for &v in inputs {
                    let t = val(v);
                    let w = t.cols();
                    let mut part = Tensor::zeros(t.shape());
                    for i in 0..n {
                        part.data_mut()[i * w..(i + 1) * w].copy_from_slice(&g.row(i)[col..col + w]);
                    }
                    col += w;
                    accumulate(nodes, grads, v, part);
                }
            }
        }
        Op::SelectRows { x, idx } => {
            let tx = val(*x);
            let inner: usize = tx.shape()[1..].iter().product();
            let mut gx = Tensor::zeros(tx.shape());
            for (k, &i) in idx.iter().enumerate() {
                for (o, v) in gx.data_mut()[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(&g.data()[k * inner..(k + 1) * inner])
                {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::PickPerRow { x, idx } => {
            let mut gx = Tensor::zeros(val(*x).shape());
            for (i, &j) in idx.iter().enumerate() {
                gx.set2(i, j, g.data()[i]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SymNormalize(a) => {
            let hat = add_identity(val(*a));
            let r = inv_sqrt_degrees(&hat)?;
            let n = hat.rows();
            // d r_k / d hat[k,l] = -r_k^3 / 2 for every l in row k.
            let mut u = vec![0.0; n];
            for k in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += g.at2(k, j) * hat.at2(k, j) * r[j];
                    s += g.at2(j, k) * hat.at2(j, k) * r[j];
                }
                u[k] = -0.5 * r[k].powi(3) * s;
            }
            let mut ga = Tensor::zeros(&[n, n]);
            for k in 0..n {
                for l in 0..n {
                    ga.set2(k, l, g.at2(k, l) * r[k] * r[l] + u[k]);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
    }
    Ok(())
}
