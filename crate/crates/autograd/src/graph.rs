//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so walking the tape backwards visits nodes in a valid reverse
//! topological order. Operations interpret tensors as matrices (see
//! [`Tensor::matrix_dims`]); the engine only needs 2-D algebra.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    AddBias { x: usize, bias: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    /// `out[o] = x[src[o]]`: row gathers and max reductions.
    Pick { x: usize, src: Vec<usize> },
    Reshape(usize),
    Softmax(usize),
    Dropout { x: usize, scale: Vec<f64> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Mse { pred: usize, target: Vec<f64>, mask: Vec<bool>, count: usize },
    SmoothL1 { pred: usize, target: Vec<f64> },
    CrossEntropyLogits { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    CrossEntropyProbs { probs: usize, targets: Vec<usize>, eps: f64 },
    PairDistance { pred: usize, target: Vec<f64>, denom: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// A handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Computation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
    non_finite: Cell<Option<&'static str>>,
    backward_done: Cell<bool>,
    grads: RefCell<Vec<Option<Tensor>>>,
    score_entries: Cell<usize>,
}

unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: (&mut [f64], isize, isize),
    beta: f64,
) {
    matrixmultiply::dgemm(
        m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2,
    );
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: impl Iterator<Item = (usize, f64)>) {
    let t = dst.get_or_insert_with(|| Tensor::zeros(shape));
    let d = t.data_mut();
    for (i, v) in src {
        d[i] += v;
    }
}

fn add_slice(dst: &mut Option<Tensor>, shape: &[usize], src: &[f64]) {
    match dst {
        Some(t) => t.data_mut().iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(Tensor::new(shape, src.to_vec()).expect("gradient shape")),
    }
}

fn expect_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Shape(format!("{what} expects a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Training-mode graph: dropout draws its masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        let g = Self::default();
        *g.dropout_rng.borrow_mut() = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of attention score entries (query-key pairs) computed so far.
    pub fn score_entries(&self) -> usize {
        self.score_entries.get()
    }

    pub(crate) fn count_scores(&self, n: usize) {
        self.score_entries.set(self.score_entries.get() + n);
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Constant or differentiable input (gradients are tracked for every node).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, "input")
    }

    /// Binds a stored parameter into this graph. Repeated binds of the same
    /// parameter share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, "param");
        self.nodes.borrow_mut()[v.id].param = Some(id);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(TensorError::NonFinite(op)),
            None => Ok(()),
        }
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Backward, then adds the gradients of bound trainable parameters into
    /// `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        let grads = self.grads.borrow();
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            let (Some(pid), Some(g)) = (node.param, grads[id].as_ref()) else { continue };
            let p = store.get_mut(pid);
            if p.trainable {
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros if `v`
    /// did not influence the loss.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        self.grads
            .borrow()
            .get(v.id)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    // ----- operations -------------------------------------------------------

    pub fn matmul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl<'g>(&'g self, a: Var<'g>, b: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let out = {
            let av = self.value_of(a.id);
            let bv = self.value_of(b.id);
            let (m, k) = expect_2d(&av, "matmul")?;
            let (br, bc) = expect_2d(&bv, "matmul")?;
            let (kb, n, rsb, csb) = if trans_b { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
            if k != kb {
                return Err(TensorError::Shape(format!(
                    "matmul {:?} x {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if trans_b { "ᵀ" } else { "" }
                )));
            }
            let mut out = Tensor::zeros(&[m, n]);
            if m * n * k > 0 {
                unsafe {
                    gemm(m, k, n, (av.data(), k as isize, 1), (bv.data(), rsb, csb), (out.data_mut(), n as isize, 1), 0.0);
                }
            }
            out
        };
        Ok(self.push(out, Op::MatMul { a: a.id, b: b.id, trans_b }, "matmul"))
    }

    /// `x` is `[n, d]`, `bias` has `d` elements; adds bias to every row.
    pub fn add_bias<'g>(&'g self, x: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let xv = self.value_of(x.id);
            let bv = self.value_of(bias.id);
            let (_, d) = xv.matrix_dims();
            if bv.len() != d {
                return Err(TensorError::Shape(format!("bias {:?} for rows of width {d}", bv.shape())));
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
            out
        };
        Ok(self.push(out, Op::AddBias { x: x.id, bias: bias.id }, "add_bias"))
    }

    /// `x · w + b` with `w` shaped `[in, out]`.
    pub fn linear<'g>(&'g self, x: Var<'g>, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn zip_op<'g>(&'g self, a: Var<'g>, b: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var<'g>> {
        let out = {
            let av = self.value_of(a.id);
            let bv = self.value_of(b.id);
            if av.shape() != bv.shape() {
                return Err(TensorError::Shape(format!("{name} {:?} vs {:?}", av.shape(), bv.shape())));
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(av.shape(), data)?
        };
        Ok(self.push(out, op, name))
    }

    pub fn add<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a.id, b.id), "add")
    }

    /// Residual connection `x + y`.
    pub fn residual_add<'g>(&'g self, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
        self.add(x, y)
    }

    pub fn sub<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a.id, b.id), "sub")
    }

    pub fn mul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a.id, b.id), "mul")
    }

    fn map_op<'g>(&'g self, x: Var<'g>, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var<'g> {
        let out = {
            let xv = self.value_of(x.id);
            Tensor::new(xv.shape(), xv.data().iter().map(|v| f(*v)).collect()).expect("same shape")
        };
        self.push(out, op, name)
    }

    pub fn scale<'g>(&'g self, x: Var<'g>, s: f64) -> Var<'g> {
        self.map_op(x, |v| v * s, Op::Scale(x.id, s), "scale")
    }

    pub fn relu<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        self.map_op(x, |v| v.max(0.0), Op::Relu(x.id), "relu")
    }

    pub fn sigmoid<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        self.map_op(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x.id), "sigmoid")
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat<'g>(&'g self, xs: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if xs.is_empty() || axis > 1 {
            return Err(TensorError::Invalid("concat needs inputs and axis 0 or 1".into()));
        }
        let out = {
            let vals: Vec<_> = xs.iter().map(|v| self.value_of(v.id)).collect();
            let dims = vals.iter().map(|v| expect_2d(v, "concat")).collect::<Result<Vec<_>>>()?;
            if axis == 0 {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(TensorError::Shape(format!("concat rows: widths {dims:?}")));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(&[rows, cols], data)?
            } else {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(TensorError::Shape(format!("concat cols: heights {dims:?}")));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row(r));
                    }
                }
                Tensor::new(&[rows, cols], data)?
            }
        };
        Ok(self.push(out, Op::Concat { inputs: xs.iter().map(|v| v.id).collect(), axis }, "concat"))
    }

    fn pick<'g>(&'g self, x: Var<'g>, shape: &[usize], src: Vec<usize>, name: &'static str) -> Var<'g> {
        let out = {
            let xv = self.value_of(x.id);
            let data = src.iter().map(|&i| xv.data()[i]).collect();
            Tensor::new(shape, data).expect("pick shape")
        };
        self.push(out, Op::Pick { x: x.id, src }, name)
    }

    /// Max over `axis` of a 2-D tensor, keeping the reduced axis with size 1.
    /// Ties resolve to the first maximal element.
    pub fn max_pool<'g>(&'g self, x: Var<'g>, axis: usize) -> Result<Var<'g>> {
        let (rows, cols) = expect_2d(&self.value_of(x.id), "max_pool")?;
        match axis {
            0 => self.segment_max(x, &[(0, rows)]),
            1 => {
                let src = {
                    let xv = self.value_of(x.id);
                    check_not_all_nan(xv.data(), "max_pool")?;
                    (0..rows).map(|r| r * cols + argmax(xv.row(r))).collect()
                };
                Ok(self.pick(x, &[rows, 1], src, "max_pool"))
            }
            _ => Err(TensorError::Invalid(format!("max_pool axis {axis}"))),
        }
    }

    /// Column-wise max over consecutive row groups `(start, len)`; output row
    /// `i` pools group `i`.
    pub fn segment_max<'g>(&'g self, x: Var<'g>, segments: &[(usize, usize)]) -> Result<Var<'g>> {
        let src = {
            let xv = self.value_of(x.id);
            let (rows, cols) = expect_2d(&xv, "segment_max")?;
            check_not_all_nan(xv.data(), "segment_max")?;
            let mut src = Vec::with_capacity(segments.len() * cols);
            for &(start, len) in segments {
                if len == 0 || start + len > rows {
                    return Err(TensorError::Shape(format!("segment ({start}, {len}) of {rows} rows")));
                }
                for c in 0..cols {
                    let mut best = start;
                    for r in start + 1..start + len {
                        if xv.data()[r * cols + c] > xv.data()[best * cols + c] {
                            best = r;
                        }
                    }
                    src.push(best * cols + c);
                }
            }
            (cols, src)
        };
        Ok(self.pick(x, &[segments.len(), src.0], src.1, "segment_max"))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows<'g>(&'g self, x: Var<'g>, rows: &[usize]) -> Result<Var<'g>> {
        let (n, cols) = expect_2d(&self.value_of(x.id), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Shape(format!("row {bad} out of {n}")));
        }
        let src = rows.iter().flat_map(|&r| (r * cols)..(r + 1) * cols).collect();
        Ok(self.pick(x, &[rows.len(), cols], src, "gather_rows"))
    }

    pub fn slice_rows<'g>(&'g self, x: Var<'g>, start: usize, len: usize) -> Result<Var<'g>> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn reshape<'g>(&'g self, x: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value_of(x.id).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x.id), "reshape"))
    }

    /// Row-wise softmax over the last axis. `mask` (true = valid) either has
    /// one flag per column, shared by all rows, or one flag per element.
    /// Invalid entries get exactly zero probability; a row with no valid
    /// entry is all zero.
    pub fn softmax<'g>(&'g self, x: Var<'g>, mask: Option<&[bool]>) -> Result<Var<'g>> {
        let out = {
            let xv = self.value_of(x.id);
            let (rows, cols) = xv.matrix_dims();
            if let Some(m) = mask {
                if m.len() != cols && m.len() != rows * cols {
                    return Err(TensorError::Shape(format!("softmax mask of {} for {rows}x{cols}", m.len())));
                }
            }
            check_not_all_nan(xv.data(), "softmax")?;
            let valid = |r: usize, c: usize| match mask {
                None => true,
                Some(m) if m.len() == cols => m[c],
                Some(m) => m[r * cols + c],
            };
            let mut out = Tensor::zeros(xv.shape());
            for r in 0..rows {
                let row = xv.row(r);
                let max = (0..cols)
                    .filter(|&c| valid(r, c))
                    .map(|c| row[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let mut total = 0.0;
                for c in 0..cols {
                    if valid(r, c) {
                        o[c] = (row[c] - max).exp();
                        total += o[c];
                    }
                }
                o.iter_mut().for_each(|v| *v /= total);
            }
            out
        };
        Ok(self.push(out, Op::Softmax(x.id), "softmax"))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<'g>(&'g self, x: Var<'g>, rate: f64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate}")));
        }
        let mut rng = self.dropout_rng.borrow_mut();
        let Some(rng) = rng.as_mut().filter(|_| rate > 0.0) else { return Ok(x) };
        let keep = 1.0 / (1.0 - rate);
        let n = self.value_of(x.id).len();
        let scale: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = {
            let xv = self.value_of(x.id);
            let data = xv.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
            Tensor::new(xv.shape(), data)?
        };
        Ok(self.push(out, Op::Dropout { x: x.id, scale }, "dropout"))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let (out, inv_std) = {
            let xv = self.value_of(x.id);
            let (rows, cols) = xv.matrix_dims();
            let mut out = xv.clone();
            let mut inv_std = Vec::with_capacity(rows);
            for row in out.data_mut().chunks_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
            (out, inv_std)
        };
        self.push(out, Op::LayerNorm { x: x.id, inv_std }, "layer_norm")
    }

    pub fn sum<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let s = self.value_of(x.id).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.id), "sum")
    }

    pub fn mean<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let v = self.value_of(x.id);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        drop(v);
        self.push(Tensor::scalar(s), Op::Mean(x.id), "mean")
    }

    // ----- losses ------------------------------------------------------------

    /// Mean of squared differences over elements whose mask flag is true.
    pub fn mse_loss<'g>(&'g self, pred: Var<'g>, target: &Tensor, mask: Option<&[bool]>) -> Result<Var<'g>> {
        let (value, mask, count) = {
            let pv = self.value_of(pred.id);
            if pv.len() != target.len() {
                return Err(TensorError::Shape(format!("mse {:?} vs {:?}", pv.shape(), target.shape())));
            }
            let mask = match mask {
                Some(m) if m.len() != pv.len() => {
                    return Err(TensorError::Shape(format!("mse mask {} for {}", m.len(), pv.len())))
                }
                Some(m) => m.to_vec(),
                None => vec![true; pv.len()],
            };
            let count = mask.iter().filter(|m| **m).count();
            if count == 0 {
                return Err(TensorError::EmptyMask("mse_loss"));
            }
            let s: f64 = pv
                .data()
                .iter()
                .zip(target.data())
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|((p, t), _)| (p - t).powi(2))
                .sum();
            (s / count as f64, mask, count)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse { pred: pred.id, target: target.data().to_vec(), mask, count },
            "mse_loss",
        ))
    }

    /// Mean smooth-L1: `0.5 d²` where `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1<'g>(&'g self, pred: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
        let value = {
            let pv = self.value_of(pred.id);
            if pv.len() != target.len() || pv.is_empty() {
                return Err(TensorError::Shape(format!("smooth_l1 {:?} vs {:?}", pv.shape(), target.shape())));
            }
            pv.data().iter().zip(target.data()).map(|(p, t)| smooth_l1_term(p - t)).sum::<f64>() / pv.len() as f64
        };
        Ok(self.push(Tensor::scalar(value), Op::SmoothL1 { pred: pred.id, target: target.data().to_vec() }, "smooth_l1"))
    }

    /// Cross-entropy of row-wise softmax(`logits`) against class indices,
    /// averaged over rows.
    pub fn cross_entropy_logits<'g>(&'g self, logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
        let (value, probs) = {
            let lv = self.value_of(logits.id);
            let (rows, cols) = lv.matrix_dims();
            if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
                return Err(TensorError::Shape(format!("cross_entropy targets {targets:?} for {rows}x{cols}")));
            }
            let mut probs = Vec::with_capacity(rows * cols);
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (total / rows as f64, probs)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropyLogits { logits: logits.id, targets: targets.to_vec(), probs },
            "cross_entropy",
        ))
    }

    /// Cross-entropy on probabilities: mean over rows of `-ln(max(p_target, eps))`.
    pub fn cross_entropy_probs<'g>(&'g self, probs: Var<'g>, targets: &[usize], eps: f64) -> Result<Var<'g>> {
        let value = {
            let pv = self.value_of(probs.id);
            let (rows, cols) = pv.matrix_dims();
            if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
                return Err(TensorError::Shape(format!("cross_entropy targets {targets:?} for {rows}x{cols}")));
            }
            targets.iter().enumerate().map(|(r, &t)| -pv.row(r)[t].max(eps).ln()).sum::<f64>() / rows as f64
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropyProbs { probs: probs.id, targets: targets.to_vec(), eps },
            "cross_entropy",
        ))
    }

    /// Sum of Euclidean distances between consecutive coordinate pairs of
    /// `pred` and `target`, divided by `denom`.
    pub fn pair_distance_loss<'g>(&'g self, pred: Var<'g>, target: &Tensor, denom: f64) -> Result<Var<'g>> {
        let value = {
            let pv = self.value_of(pred.id);
            if pv.len() != target.len() || pv.len() % 2 != 0 || denom <= 0.0 {
                return Err(TensorError::Shape(format!("pair distance {:?} vs {:?}", pv.shape(), target.shape())));
            }
            pv.data()
                .chunks(2)
                .zip(target.data().chunks(2))
                .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
                .sum::<f64>()
                / denom
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::PairDistance { pred: pred.id, target: target.data().to_vec(), denom },
            "pair_distance_loss",
        ))
    }
}

pub(crate) fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_not_all_nan(xs: &[f64], op: &'static str) -> Result<()> {
    if !xs.is_empty() && xs.iter().all(|v| v.is_nan()) {
        return Err(TensorError::AllNan(op));
    }
    Ok(())
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    let shape_of = |i: usize| nodes[i].value.shape().to_vec();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = out.shape()[1];
            let (rsb, csb) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
            if m * n * k == 0 {
                return;
            }
            // dA = dC · Bᵀ
            {
                let ga = grads[a].get_or_insert_with(|| Tensor::zeros(av.shape()));
                unsafe {
                    gemm(m, n, k, (gd, n as isize, 1), (bv.data(), csb, rsb), (ga.data_mut(), k as isize, 1), 1.0);
                }
            }
            // dB = Aᵀ · dC, written through B's storage strides.
            {
                let gb = grads[b].get_or_insert_with(|| Tensor::zeros(bv.shape()));
                unsafe {
                    gemm(k, m, n, (av.data(), 1, k as isize), (gd, n as isize, 1), (gb.data_mut(), rsb, csb), 1.0);
                }
            }
        }
        &Op::AddBias { x, bias } => {
            add_slice(&mut grads[x], &shape_of(x), gd);
            let d = nodes[bias].value.len();
            let mut gb = vec![0.0; d];
            for row in gd.chunks(d) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            add_slice(&mut grads[bias], &shape_of(bias), &gb);
        }
        &Op::Add(a, b) => {
            add_slice(&mut grads[a], &shape_of(a), gd);
            add_slice(&mut grads[b], &shape_of(b), gd);
        }
        &Op::Sub(a, b) => {
            add_slice(&mut grads[a], &shape_of(a), gd);
            let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
            add_slice(&mut grads[b], &shape_of(b), &neg);
        }
        &Op::Mul(a, b) => {
            let ga: Vec<f64> = gd.iter().zip(nodes[b].value.data()).map(|(g, y)| g * y).collect();
            let gb: Vec<f64> = gd.iter().zip(nodes[a].value.data()).map(|(g, x)| g * x).collect();
            add_slice(&mut grads[a], &shape_of(a), &ga);
            add_slice(&mut grads[b], &shape_of(b), &gb);
        }
        &Op::Scale(x, s) => {
            let gx: Vec<f64> = gd.iter().map(|v| v * s).collect();
            add_slice(&mut grads[x], &shape_of(x), &gx);
        }
        &Op::Relu(x) => {
            let gx: Vec<f64> = gd
                .iter()
                .zip(nodes[x].value.data())
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            add_slice(&mut grads[x], &shape_of(x), &gx);
        }
        &Op::Sigmoid(x) => {
            let gx: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            add_slice(&mut grads[x], &shape_of(x), &gx);
        }
        Op::Concat { inputs, axis } => {
            let cols_out = out.shape()[1];
            if *axis == 0 {
                let mut offset = 0;
                for &i in inputs {
                    let len = nodes[i].value.len();
                    add_slice(&mut grads[i], &shape_of(i), &gd[offset..offset + len]);
                    offset += len;
                }
            } else {
                let rows = out.shape()[0];
                let mut col = 0;
                for &i in inputs {
                    let c = nodes[i].value.shape()[1];
                    let src = (0..rows).flat_map(|r| (0..c).map(move |j| (r, j)));
                    let shape = shape_of(i);
                    add_into(&mut grads[i], &shape, src.map(|(r, j)| (r * c + j, gd[r * cols_out + col + j])));
                    col += c;
                }
            }
        }
        Op::Pick { x, src } => {
            let shape = shape_of(*x);
            add_into(&mut grads[*x], &shape, src.iter().copied().zip(gd.iter().copied()));
        }
        &Op::Reshape(x) => add_slice(&mut grads[x], &shape_of(x), gd),
        &Op::Softmax(x) => {
            let (rows, cols) = out.matrix_dims();
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &out.data()[r * cols..(r + 1) * cols];
                let dy = &gd[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    gx[r * cols + c] = y[c] * (dy[c] - dot);
                }
            }
            add_slice(&mut grads[x], &shape_of(x), &gx);
        }
        Op::Dropout { x, scale } => {
            let gx: Vec<f64> = gd.iter().zip(scale).map(|(g, s)| g * s).collect();
            add_slice(&mut grads[*x], &shape_of(*x), &gx);
        }
        Op::LayerNorm { x, inv_std } => {
            let (_, cols) = out.matrix_dims();
            let n = cols as f64;
            let mut gx = Vec::with_capacity(out.len());
            for ((y, dy), inv) in out.data().chunks(cols).zip(gd.chunks(cols)).zip(inv_std) {
                let mean_dy = dy.iter().sum::<f64>() / n;
                let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                gx.extend(y.iter().zip(dy).map(|(yi, dyi)| inv * (dyi - mean_dy - yi * mean_dyy)));
            }
            add_slice(&mut grads[*x], &shape_of(*x), &gx);
        }
        &Op::Sum(x) => {
            let n = nodes[x].value.len();
            add_slice(&mut grads[x], &shape_of(x), &vec![gd[0]; n]);
        }
        &Op::Mean(x) => {
            let n = nodes[x].value.len();
            add_slice(&mut grads[x], &shape_of(x), &vec![gd[0] / n as f64; n]);
        }
        Op::Mse { pred, target, mask, count } => {
            let pv = nodes[*pred].value.data();
            let f = 2.0 * gd[0] / *count as f64;
            let gx: Vec<f64> = pv
                .iter()
                .zip(target)
                .zip(mask)
                .map(|((p, t), m)| if *m { f * (p - t) } else { 0.0 })
                .collect();
            add_slice(&mut grads[*pred], &shape_of(*pred), &gx);
        }
        Op::SmoothL1 { pred, target } => {
            let pv = nodes[*pred].value.data();
            let f = gd[0] / pv.len() as f64;
            let gx: Vec<f64> = pv
                .iter()
                .zip(target)
                .map(|(p, t)| {
                    let d = p - t;
                    f * if d.abs() < 1.0 { d } else { d.signum() }
                })
                .collect();
            add_slice(&mut grads[*pred], &shape_of(*pred), &gx);
        }
        Op::CrossEntropyLogits { logits, targets, probs } => {
            let cols = nodes[*logits].value.matrix_dims().1;
            let f = gd[0] / targets.len() as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| f * p).collect();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * cols + t] -= f;
            }
            add_slice(&mut grads[*logits], &shape_of(*logits), &gx);
        }
        Op::CrossEntropyProbs { probs, targets, eps } => {
            let pv = &nodes[*probs].value;
            let cols = pv.matrix_dims().1;
            let f = gd[0] / targets.len() as f64;
            let src = targets.iter().enumerate().filter_map(|(r, &t)| {
                let p = pv.data()[r * cols + t];
                (p > *eps).then(|| (r * cols + t, -f / p))
            });
            let shape = shape_of(*probs);
            add_into(&mut grads[*probs], &shape, src);
        }
        Op::PairDistance { pred, target, denom } => {
            let pv = nodes[*pred].value.data();
            let f = gd[0] / denom;
            let mut gx = vec![0.0; pv.len()];
            for (i, (p, t)) in pv.chunks(2).zip(target.chunks(2)).enumerate() {
                let (dx, dy) = (p[0] - t[0], p[1] - t[1]);
                let d = dx.hypot(dy);
                if d > 0.0 {
                    gx[2 * i] = f * dx / d;
                    gx[2 * i + 1] = f * dy / d;
                }
            }
            add_slice(&mut grads[*pred], &shape_of(*pred), &gx);
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).item()
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.matmul(self, other)
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.relu(self)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.add(self, other)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.graph.scale(self, s)
    }

    pub fn grad(&self) -> Tensor {
        self.graph.grad(*self)
    }
}
