//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are borrowed from a [`ParamSet`] rather than copied; the graph
//! must be dropped before the optimizer mutates them.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{MatMut, MatRef, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a, T: Real> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T: Real> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Clone)]
struct ProcrustesCache {
    rotation: Matrix3<f64>,
    v: Matrix3<f64>,
    s: [f64; 3],
}

enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    LogClamp {
        x: Var,
        eps: T,
    },
    Procrustes {
        m: Var,
        cache: Box<ProcrustesCache>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every graph leaf that requires one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter; `None` if it never entered the graph
    /// or does not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into `ParamTensor::grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                params.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    params: Option<&'a ParamSet<T>>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
        }
    }

    /// A graph whose [`Graph::param`] leaves borrow from `params`.
    pub fn with_params(params: &'a ParamSet<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            bound: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, label: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite output from `{label}`")));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let params = self.params.expect("graph created without a parameter set");
        let value = &params.get(id).value;
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// `a·b` on 2-D views.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.value(a).mat().t_if(ta);
        let bv = self.value(b).mat().t_if(tb);
        if av.cols != bv.rows {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {}x{} · {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let mut out = Tensor::zeros(vec![av.rows, bv.cols]);
        T::gemm(T::one(), av, bv, T::zero(), out.mat_mut());
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds a `[D]` (or `[1, D]`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).len() != d {
            return Err(Error::dim(format!(
                "row of length {} cannot broadcast over trailing dim {d}",
                self.value(row).len()
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        if d > 0 {
            for chunk in out.data_mut().chunks_mut(d) {
                for (o, &b) in chunk.iter_mut().zip(r) {
                    *o += b;
                }
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(out, Op::AddRow { x, row }, ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    /// Per-row standardization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dims2();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!(
                "layer_norm over dim {d} with affine of length {}/{}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let o = out.row_mut(i);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let (rows, _) = out.dims2();
        for i in 0..rows {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng, "softmax")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if start + len > cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).dims2().0);
        if parts.iter().any(|&p| self.value(p).dims2().0 != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).last_dim());
        if parts.iter().any(|&p| self.value(p).last_dim() != cols) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let ng = self.needs(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::SumAll(x), ng, "sum")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        let ng = self.needs(x);
        self.push(out, Op::MeanAll(x), ng, "mean")
    }

    /// `ln(max(x, eps))`, with zero gradient where clamped.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let out = self.value(x).map(|v| v.max(eps).ln());
        let ng = self.needs(x);
        self.push(out, Op::LogClamp { x, eps }, ng, "log_clamp")
    }

    /// Nearest rotation (special Procrustes) of a `[3, 3]` matrix.
    pub fn procrustes(&mut self, m: Var) -> Result<Var> {
        let mv = self.value(m);
        if mv.shape() != [3, 3] {
            return Err(Error::dim(format!("procrustes expects [3, 3], got {:?}", mv.shape())));
        }
        let mat = Matrix3::from_iterator(mv.data().iter().map(|v| v.as_f64())).transpose();
        let cache = crate::heads::pose::special_procrustes(&mat)?;
        let r = cache.rotation;
        let out = Tensor::from_fn(vec![3, 3], |i| T::lit(r[(i / 3, i % 3)]));
        let ng = self.needs(m);
        let cache = Box::new(ProcrustesCache {
            rotation: cache.rotation,
            v: cache.v,
            s: cache.s,
        });
        self.push(out, Op::Procrustes { m, cache }, ng, "procrustes")
    }

    /// Multi-head `softmax(Q_h K_hᵀ / √(D/h)) V_h` with heads concatenated
    /// (no output projection). `q: [Nq, D]`, `k, v: [Nk, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.value(q).dims2();
        let (nk, dk) = self.value(k).dims2();
        let (nv, dv) = self.value(v).dims2();
        if dk != d || dv != d || nv != nk {
            return Err(Error::dim(format!(
                "attention over q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {d} is not divisible into {heads} heads")));
        }
        if nk == 0 {
            return Err(Error::Empty("attention over an empty context".into()));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(vec![nq, d]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            T::gemm(
                scale,
                head_ref(qd, nq, d, h, dh),
                head_ref(kd, nk, d, h, dh).t(),
                T::zero(),
                MatMut::row_major(p, nq, nk),
            );
            for row in p.chunks_mut(nk) {
                softmax_in_place(row);
            }
            T::gemm(
                T::one(),
                MatRef::row_major(p, nq, nk),
                head_ref(vd, nk, d, h, dh),
                T::zero(),
                head_mut(out.data_mut(), nq, d, h, dh),
            );
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng, "attention")
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(self.shape(out).to_vec()));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                if !gout.all_finite() {
                    return Err(Error::Numerical("non-finite gradient".into()));
                }
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads)?;
        }

        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let opa = av.mat().t_if(*ta);
                let opb = bv.mat().t_if(*tb);
                let g = MatRef::row_major(gout.data(), opa.rows, opb.cols);
                if self.needs(*a) {
                    let slot = slot(grads, *a, av.shape());
                    let (r, c) = av.dims2();
                    let dst = MatMut::row_major(slot.data_mut(), r, c).t_if(*ta);
                    T::gemm(T::one(), g, opb.t(), T::one(), dst);
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, bv.shape());
                    let (r, c) = bv.dims2();
                    let dst = MatMut::row_major(slot.data_mut(), r, c).t_if(*tb);
                    T::gemm(T::one(), opa.t(), g, T::one(), dst);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        slot(grads, v, gout.shape()).add_assign(gout)?;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    slot(grads, *a, gout.shape()).add_assign(gout)?;
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, gout.shape());
                    for (d, &g) in s.data_mut().iter_mut().zip(gout.data()) {
                        *d -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let s = slot(grads, *a, gout.shape());
                    for ((d, &g), &y) in s.data_mut().iter_mut().zip(gout.data()).zip(bv.data()) {
                        *d += g * y;
                    }
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, gout.shape());
                    for ((d, &g), &x) in s.data_mut().iter_mut().zip(gout.data()).zip(av.data()) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*x) {
                    slot(grads, *x, gout.shape()).add_assign(gout)?;
                }
                if self.needs(*row) {
                    let d = gout.last_dim();
                    let rshape = self.shape(*row).to_vec();
                    let s = slot(grads, *row, &rshape);
                    if d > 0 {
                        for chunk in gout.data().chunks(d) {
                            for (acc, &g) in s.data_mut().iter_mut().zip(chunk) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let s = slot(grads, *a, gout.shape());
                    for (d, &g) in s.data_mut().iter_mut().zip(gout.data()) {
                        *d += g * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let s = slot(grads, *a, gout.shape());
                for ((d, &g), &x) in s.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                    *d += g * gelu_grad(x);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let s = slot(grads, *a, gout.shape());
                for ((d, &g), &x) in s.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gout.last_dim();
                let rows = rstd.len();
                let gv = self.value(*gamma).data().to_vec();
                if self.needs(*gamma) {
                    let gshape = self.shape(*gamma).to_vec();
                    let s = slot(grads, *gamma, &gshape);
                    for i in 0..rows {
                        for j in 0..d {
                            s.data_mut()[j] += gout.data()[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let bshape = self.shape(*beta).to_vec();
                    let s = slot(grads, *beta, &bshape);
                    for i in 0..rows {
                        for j in 0..d {
                            s.data_mut()[j] += gout.data()[i * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let xshape = self.shape(*x).to_vec();
                    let s = slot(grads, *x, &xshape);
                    let inv_d = T::lit(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..rows {
                        let go = &gout.data()[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            dxhat[j] = go[j] * gv[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xh[j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        let dst = &mut s.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] += rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.dims2();
                let s = slot(grads, *a, gout.shape());
                for i in 0..rows {
                    let y = out.row(i);
                    let g = &gout.data()[i * cols..(i + 1) * cols];
                    let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
                    let dst = &mut s.data_mut()[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        dst[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = gout.dims2();
                let xshape = self.shape(*x).to_vec();
                let s = slot(grads, *x, &xshape);
                for i in 0..rows {
                    let dst = &mut s.row_mut(i)[*start..*start + len];
                    for (d, &g) in dst.iter_mut().zip(&gout.data()[i * len..(i + 1) * len]) {
                        *d += g;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = gout.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.shape(p).to_vec();
                    let w = self.value(p).dims2().1;
                    if self.needs(p) {
                        let s = slot(grads, p, &pshape);
                        for i in 0..rows {
                            let src = &gout.data()[i * total + offset..i * total + offset + w];
                            for (d, &g) in s.row_mut(i).iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.shape(p).to_vec();
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let s = slot(grads, p, &pshape);
                        for (d, &g) in s.data_mut().iter_mut().zip(&gout.data()[offset..offset + n]) {
                            *d += g;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let xshape = self.shape(*x).to_vec();
                let s = slot(grads, *x, &xshape);
                for (i, &src) in idx.iter().enumerate() {
                    let g = gout.row(i);
                    for (d, &v) in s.row_mut(src).iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Reshape(a) => {
                let ashape = self.shape(*a).to_vec();
                let s = slot(grads, *a, &ashape);
                for (d, &g) in s.data_mut().iter_mut().zip(gout.data()) {
                    *d += g;
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let ashape = self.shape(*a).to_vec();
                let n = self.value(*a).len();
                let g = match node.op {
                    Op::MeanAll(_) => gout.data()[0] / T::lit(n as f64),
                    _ => gout.data()[0],
                };
                let s = slot(grads, *a, &ashape);
                for d in s.data_mut() {
                    *d += g;
                }
            }
            Op::LogClamp { x, eps } => {
                let xv = self.value(*x);
                let s = slot(grads, *x, gout.shape());
                for ((d, &g), &v) in s.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                    if v > *eps {
                        *d += g / v;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = qv.dims2();
                let nk = kv.dims2().0;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let mut dq = Tensor::zeros(vec![nq, d]);
                let mut dk = Tensor::zeros(vec![nk, d]);
                let mut dv = Tensor::zeros(vec![nk, d]);
                let mut ds = vec![T::zero(); nq * nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let go = head_ref(gout.data(), nq, d, h, dh);
                    T::gemm(
                        T::one(),
                        MatRef::row_major(p, nq, nk).t(),
                        go,
                        T::one(),
                        head_mut(dv.data_mut(), nk, d, h, dh),
                    );
                    T::gemm(
                        T::one(),
                        go,
                        head_ref(vv.data(), nk, d, h, dh).t(),
                        T::zero(),
                        MatMut::row_major(&mut ds, nq, nk),
                    );
                    for (drow, prow) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (g, &pp) in drow.iter_mut().zip(prow) {
                            *g = pp * (*g - dot) * scale;
                        }
                    }
                    let dsr = MatRef::row_major(&ds, nq, nk);
                    T::gemm(
                        T::one(),
                        dsr,
                        head_ref(kv.data(), nk, d, h, dh),
                        T::one(),
                        head_mut(dq.data_mut(), nq, d, h, dh),
                    );
                    T::gemm(
                        T::one(),
                        dsr.t(),
                        head_ref(qv.data(), nq, d, h, dh),
                        T::one(),
                        head_mut(dk.data_mut(), nk, d, h, dh),
                    );
                }
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        slot(grads, var, g.shape()).add_assign(&g)?;
                    }
                }
            }
            Op::Procrustes { m, cache } => {
                let g = Matrix3::from_iterator(gout.data().iter().map(|v| v.as_f64())).transpose();
                let dm = crate::heads::pose::procrustes_vjp(&cache.rotation, &cache.v, &cache.s, &g);
                let s = slot(grads, *m, &[3, 3]);
                for r in 0..3 {
                    for c in 0..3 {
                        s.data_mut()[r * 3 + c] += T::lit(dm[(r, c)]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Columns `h·dh .. (h+1)·dh` of a row-major `[n, d]` buffer.
fn head_ref<T>(data: &[T], n: usize, d: usize, h: usize, dh: usize) -> MatRef<'_, T> {
    MatRef {
        data: &data[h * dh..],
        rows: n,
        cols: dh,
        rs: d as isize,
        cs: 1,
    }
}

fn head_mut<T>(data: &mut [T], n: usize, d: usize, h: usize, dh: usize) -> MatMut<'_, T> {
    MatMut {
        data: &mut data[h * dh..],
        rows: n,
        cols: dh,
        rs: d as isize,
        cs: 1,
    }
}

fn slot<'g, T: Real>(grads: &'g mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        crate::params::Init::new(seed).uniform(shape.to_vec(), -1.0, 1.0)
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[1e300])).unwrap();
        let b = g.mul(a, a);
        assert!(matches!(b, Err(Error::Numerical(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[2], &[3.0, 4.0])).unwrap();
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    fn fd_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        let report = check_gradients(&inputs, &GradCheck::default(), |g, vars| f(g, vars)).unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_transposed_gradients() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = randn(if ta { &[4, 3] } else { &[3, 4] }, 1);
            let b = randn(if tb { &[2, 4] } else { &[4, 2] }, 2);
            fd_check(vec![a, b], |g, v| {
                let c = g.matmul_t(v[0], v[1], ta, tb)?;
                let c2 = g.square(c)?;
                g.sum_all(c2)
            });
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let x = randn(&[3, 4], 3);
        let y = randn(&[3, 4], 4);
        let r = randn(&[4], 5);
        fd_check(vec![x, y, r], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.add_row(c, v[2])?;
            let e = g.gelu(d)?;
            let f = g.scale(e, 1.7)?;
            let h = g.softmax_rows(f)?;
            let s1 = g.slice_cols(h, 1, 2)?;
            let s2 = g.slice_cols(v[0], 0, 3)?;
            let cc = g.concat_cols(&[s1, s2])?;
            let rr = g.concat_rows(&[cc, cc])?;
            let gg = g.gather_rows(rr, &[5, 0, 0, 2])?;
            let rs = g.reshape(gg, vec![2, 10])?;
            let sq = g.square(rs)?;
            g.mean_all(sq)
        });
    }

    #[test]
    fn layer_norm_and_log_gradients() {
        let x = randn(&[2, 5], 6);
        let gamma = randn(&[5], 7);
        let beta = randn(&[5], 8);
        fd_check(vec![x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let w = g.square(y)?;
            let w2 = g.mul(w, y)?;
            g.sum_all(w2)
        });
        let z = t(&[4], &[0.5, 1.5, 2.0, 3.0]);
        fd_check(vec![z], |g, v| {
            let l = g.log_clamp(v[0], 1e-3)?;
            let l2 = g.square(l)?;
            g.sum_all(l2)
        });
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = t(&[4], &[-1.0, -0.3, 0.4, 2.0]);
        fd_check(vec![x], |g, v| {
            let r = g.relu(v[0])?;
            let r2 = g.square(r)?;
            g.sum_all(r2)
        });
    }

    #[test]
    fn attention_gradients() {
        for (nq, nk, d, heads) in [(3, 4, 6, 2), (1, 5, 4, 1), (4, 4, 8, 4)] {
            let q = randn(&[nq, d], 10);
            let k = randn(&[nk, d], 11);
            let v = randn(&[nk, d], 12);
            let w = randn(&[nq, d], 13);
            fd_check(vec![q, k, v, w], |g, x| {
                let o = g.attention(x[0], x[1], x[2], heads)?;
                let o = g.mul(o, x[3])?;
                g.sum_all(o)
            });
        }
    }

    #[test]
    fn attention_shared_input_gradients() {
        let x = randn(&[3, 4], 14);
        fd_check(vec![x], |g, v| {
            let o = g.attention(v[0], v[0], v[0], 2)?;
            let o = g.square(o)?;
            g.sum_all(o)
        });
    }

    #[test]
    fn attention_matches_composed_ops() {
        let (nq, nk, d, heads) = (3, 5, 8, 2);
        let dh = d / heads;
        let mut g = Graph::<f64>::new();
        let q = g.input(randn(&[nq, d], 1)).unwrap();
        let k = g.input(randn(&[nk, d], 2)).unwrap();
        let v = g.input(randn(&[nk, d], 3)).unwrap();
        let fused = g.attention(q, k, v, heads).unwrap();
        let mut outs = Vec::new();
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh).unwrap();
            let kh = g.slice_cols(k, h * dh, dh).unwrap();
            let vh = g.slice_cols(v, h * dh, dh).unwrap();
            let s = g.matmul_t(qh, kh, false, true).unwrap();
            let s = g.scale(s, 1.0 / (dh as f64).sqrt()).unwrap();
            let p = g.softmax_rows(s).unwrap();
            outs.push(g.matmul(p, vh).unwrap());
        }
        let composed = g.concat_cols(&outs).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(composed)) < 1e-12);
    }

    #[test]
    fn attention_rejects_empty_context() {
        let mut g = Graph::<f64>::new();
        let q = g.input(randn(&[2, 4], 1)).unwrap();
        let k = g.input(Tensor::zeros(vec![0, 4])).unwrap();
        assert!(matches!(g.attention(q, k, k, 2), Err(Error::Empty(_))));
        assert!(matches!(g.attention(q, q, q, 3), Err(Error::Dimension(_))));
    }
}
