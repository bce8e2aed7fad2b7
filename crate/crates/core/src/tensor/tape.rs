//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Operations
//! record their parents as they execute; [`Tape::backward`] walks the nodes in
//! exact reverse execution order and accumulates gradients into the
//! [`ParamStore`] entries that were registered with [`Tape::param`].
//!
//! Recording can be switched off (`set_grad_enabled(false)`): values are still
//! computed identically, but nodes degrade to constants so backward never
//! traverses them. That is how teacher paths and metric evaluation run.

use crate::error::{Result, StptError};
use crate::scalar::{Scalar, MASKED_BELOW};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, reduce_grad_into, row_major_strides, Tensor,
};

// ── Parameter store ──────────────────────────────────────────────────────

/// Handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    touched: bool,
}

/// Owns the persistent model parameters and their accumulated gradients.
/// One store backs one model; optimizers walk it by [`ParamId`].
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(StptError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, touched: false });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
            .ok_or_else(|| StptError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.entries[id.0].touched
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.value.shape(), g.shape());
        for (a, &b) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        e.touched = true;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for v in e.grad.data_mut() {
                *v = T::zero();
            }
            e.touched = false;
        }
    }

    /// Clones all parameter values, e.g. for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot size mismatch");
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.value.shape(), s.shape(), "snapshot shape mismatch");
            e.value = s.clone();
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Tape nodes ───────────────────────────────────────────────────────────

/// Handle to one tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<T> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, T),
    AddScalar(TensorId, T),
    MatMul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    Permute(TensorId, Vec<usize>),
    Reshape(TensorId),
    Slice { src: TensorId, axis: usize, start: usize },
    Concat { srcs: Vec<TensorId>, axis: usize },
    SoftmaxLast { src: TensorId, temp: T },
    LayerNormLast(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Gelu(TensorId),
    Abs(TensorId),
    Sqrt(TensorId),
    SumLast(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Rope { src: TensorId, cos: Tensor<T>, sin: Tensor<T> },
    SmoothL1(TensorId, TensorId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Dynamic gradient tape for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    grads: Vec<Option<Tensor<T>>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false, grads: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Toggles recording. While disabled, new nodes are constants: their
    /// values are computed exactly as usual but backward stops at them.
    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if it received one.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>) -> TensorId {
        let (op, param) = if self.grad_enabled { (op, param) } else { (Op::Leaf, None) };
        self.nodes.push(Node { value, op, param });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.nodes.push(Node { value, op: Op::Leaf, param: None });
        TensorId(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(T::cst(v)))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.constant(Tensor::zeros(shape))
    }

    /// Registers a parameter leaf; gradients flow back into the store entry.
    pub fn param(&mut self, store: &ParamStore<T>, pid: ParamId) -> TensorId {
        let value = store.value(pid).clone();
        let link = if self.grad_enabled { Some(pid) } else { None };
        self.push(value, Op::Leaf, link)
    }

    /// Re-registers an existing node's value as a constant, cutting gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    // ── Elementwise binary ops (broadcasting) ────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(va.shape(), vb.shape()).map_err(|_| {
            StptError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            }
        })?;
        let value = apply_broadcast(va, vb, &out_shape, f);
        Ok(self.push(value, op, None))
    }

    /// Sums several same-shaped terms.
    pub fn add_many(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        assert!(!ids.is_empty(), "add_many needs at least one term");
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = T::cst(c);
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(value, Op::Scale(a, c), None)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = T::cst(c);
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(value, Op::AddScalar(a, c), None)
    }

    // ── Matrix products ──────────────────────────────────────────────────

    /// 2-D product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(StptError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(va.data(), vb.data(), m, k, n, out.data_mut());
        Ok(self.push(out, Op::MatMul(a, b), None))
    }

    /// Batched product: `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(StptError::ShapeMismatch {
                op: "bmm",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[g, m, n]);
        for gi in 0..g {
            matmul_nn(
                &va.data()[gi * m * k..(gi + 1) * m * k],
                &vb.data()[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
                &mut out.data_mut()[gi * m * n..(gi + 1) * m * n],
            );
        }
        Ok(self.push(out, Op::Bmm(a, b), None))
    }

    // ── Shape ops ────────────────────────────────────────────────────────

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let rank = va.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(StptError::ShapeMismatch {
                op: "permute",
                details: format!("axes {:?} for shape {:?}", axes, va.shape()),
            });
        }
        let value = permute_data(va, axes);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), None))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), None))
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(StptError::ShapeMismatch {
                op: "slice",
                details: format!("axis {} range {}..{} of {:?}", axis, start, start + len, shape),
            });
        }
        let value = slice_data(va, axis, start, len);
        Ok(self.push(value, Op::Slice { src: a, axis, start }, None))
    }

    pub fn concat(&mut self, ids: &[TensorId], axis: usize) -> Result<TensorId> {
        assert!(!ids.is_empty(), "concat needs at least one input");
        let rank = self.nodes[ids[0].0].value.shape().len();
        if axis >= rank {
            return Err(StptError::ShapeMismatch {
                op: "concat",
                details: format!("axis {} for rank {}", axis, rank),
            });
        }
        let mut out_shape = self.nodes[ids[0].0].value.shape().to_vec();
        out_shape[axis] = 0;
        for &id in ids {
            let s = self.nodes[id.0].value.shape();
            if s.len() != rank
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != out_shape[d])
            {
                return Err(StptError::ShapeMismatch {
                    op: "concat",
                    details: format!("{:?} into {:?} along {}", s, out_shape, axis),
                });
            }
            out_shape[axis] += s[axis];
        }
        let parts: Vec<&Tensor<T>> = ids.iter().map(|&id| &self.nodes[id.0].value).collect();
        let value = concat_data(&parts, axis, &out_shape);
        Ok(self.push(value, Op::Concat { srcs: ids.to_vec(), axis }, None))
    }

    // ── Nonlinearities and reductions ────────────────────────────────────

    /// Temperature softmax over the last axis. Entries at or below the mask
    /// sentinel get exactly zero probability; a row with no admissible entry
    /// is an error.
    pub fn softmax_last(&mut self, a: TensorId, temp: f64) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let n = *va.shape().last().expect("softmax needs rank >= 1");
        let t = T::cst(temp);
        let masked_below = T::cst(MASKED_BELOW);
        let mut data = va.data().to_vec();
        for (row, chunk) in data.chunks_mut(n).enumerate() {
            let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            if m <= masked_below {
                return Err(StptError::FullyMaskedRow { row });
            }
            let mut sum = T::zero();
            for v in chunk.iter_mut() {
                *v = ((*v - m) / t).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::SoftmaxLast { src: a, temp: t }, None))
    }

    /// Layer normalization over the last axis, no affine part.
    pub fn layer_norm_last(&mut self, a: TensorId) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let n = *va.shape().last().expect("layer_norm needs rank >= 1");
        let eps = T::cst(LN_EPS);
        let inv_n = T::one() / T::cst(n as f64);
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            let mean = chunk.iter().copied().sum::<T>() * inv_n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::LayerNormLast(a), None))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(value, Op::Sigmoid(a), None)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(value, Op::Tanh(a), None)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.map(gelu_fwd);
        self.push(value, Op::Gelu(a), None)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.map(|x| x.abs());
        self.push(value, Op::Abs(a), None)
    }

    /// Elementwise square root. Callers keep inputs strictly positive (add an
    /// epsilon first); the derivative blows up at zero.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), None)
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let n = *va.shape().last().expect("sum_last needs rank >= 1");
        let rows = va.numel() / n;
        let mut out_shape = va.shape().to_vec();
        *out_shape.last_mut().unwrap() = 1;
        let mut data = Vec::with_capacity(rows);
        for chunk in va.data().chunks(n) {
            data.push(chunk.iter().copied().sum::<T>());
        }
        let value = Tensor::new(&out_shape, data).expect("sum_last shape");
        self.push(value, Op::SumLast(a), None)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(a), None)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().copied().sum::<T>() / T::cst(va.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a), None)
    }

    /// Rotary position transform. `a` has shape `[..., s, d]` with `d` even;
    /// `cos`/`sin` are `[s, d/2]` tables. Pairs `(2u, 2u+1)` rotate by the
    /// table angle of their position along the second-to-last axis.
    pub fn rope(&mut self, a: TensorId, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if shape.len() < 2 {
            return Err(StptError::ShapeMismatch {
                op: "rope",
                details: format!("rank {} < 2", shape.len()),
            });
        }
        let d = shape[shape.len() - 1];
        let s = shape[shape.len() - 2];
        if d % 2 != 0 || cos.shape() != [s, d / 2] || sin.shape() != [s, d / 2] {
            return Err(StptError::ShapeMismatch {
                op: "rope",
                details: format!("input {:?} vs tables {:?}", shape, cos.shape()),
            });
        }
        let value = rope_apply(va, cos, sin, false);
        Ok(self.push(value, Op::Rope { src: a, cos: cos.clone(), sin: sin.clone() }, None))
    }

    /// Mean smooth-L1 (Huber, beta = 1) between two same-shaped tensors.
    pub fn smooth_l1(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(StptError::ShapeMismatch {
                op: "smooth_l1",
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let half = T::cst(0.5);
        let one = T::one();
        let mut acc = T::zero();
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            let ad = d.abs();
            acc += if ad < one { half * d * d } else { ad - half };
        }
        let mean = acc / T::cst(va.numel() as f64);
        Ok(self.push(Tensor::scalar(mean), Op::SmoothL1(a, b), None))
    }

    /// Mean squared error, composed from primitive ops.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of parameter leaves are
    /// accumulated into `store`. Consumes the tape's ability to run again.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(StptError::BackwardConsumed);
        }
        self.consumed = true;
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(StptError::NonScalarLoss(loss_shape.to_vec()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Re-store for post-hoc inspection before propagating.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        store.add_grad(pid, &g);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate_reduced(&mut grads, a, &g);
                    self.accumulate_reduced(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate_reduced(&mut grads, a, &g);
                    let neg = g.map(|x| -x);
                    self.accumulate_reduced(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.broadcast_combine(b, &g, |bv, gv| bv * gv);
                    let gb = self.broadcast_combine(a, &g, |av, gv| av * gv);
                    self.accumulate_reduced(&mut grads, a, &ga);
                    self.accumulate_reduced(&mut grads, b, &gb);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.broadcast_combine(b, &g, |bv, gv| gv / bv);
                    let gb = {
                        let va = &self.nodes[a.0].value;
                        let vb = &self.nodes[b.0].value;
                        let out_shape = g.shape().to_vec();
                        let sa = broadcast_strides(va.shape(), &out_shape);
                        let sb = broadcast_strides(vb.shape(), &out_shape);
                        let mut out = Tensor::zeros(&out_shape);
                        let mut idx = vec![0usize; out_shape.len()];
                        for (o, gv) in out.data_mut().iter_mut().zip(g.data()) {
                            let pa: usize = idx.iter().zip(&sa).map(|(x, s)| x * s).sum();
                            let pb: usize = idx.iter().zip(&sb).map(|(x, s)| x * s).sum();
                            let av = va.data()[pa];
                            let bv = vb.data()[pb];
                            *o = -*gv * av / (bv * bv);
                            advance(&mut idx, &out_shape);
                        }
                        out
                    };
                    self.accumulate_reduced(&mut grads, a, &ga);
                    self.accumulate_reduced(&mut grads, b, &gb);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = g.map(|x| x * c);
                    accumulate(&mut grads, a, ga);
                }
                Op::AddScalar(a, _) => {
                    let a = *a;
                    accumulate(&mut grads, a, g.clone());
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    let mut ga = Tensor::zeros(va.shape());
                    let mut gb = Tensor::zeros(vb.shape());
                    matmul_nt(g.data(), vb.data(), m, n, k, ga.data_mut());
                    matmul_tn(va.data(), g.data(), m, k, n, gb.data_mut());
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Bmm(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (gn, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let n = vb.shape()[2];
                    let mut ga = Tensor::zeros(va.shape());
                    let mut gb = Tensor::zeros(vb.shape());
                    for gi in 0..gn {
                        matmul_nt(
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            &vb.data()[gi * k * n..(gi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga.data_mut()[gi * m * k..(gi + 1) * m * k],
                        );
                        matmul_tn(
                            &va.data()[gi * m * k..(gi + 1) * m * k],
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb.data_mut()[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Permute(a, axes) => {
                    let a = *a;
                    let mut inverse = vec![0usize; axes.len()];
                    for (d, &ax) in axes.iter().enumerate() {
                        inverse[ax] = d;
                    }
                    let ga = permute_data(&g, &inverse);
                    accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let target = self.nodes[a.0].value.shape().to_vec();
                    let ga = g.clone().reshaped(&target).expect("reshape grad");
                    accumulate(&mut grads, a, ga);
                }
                Op::Slice { src, axis, start } => {
                    let (src, axis, start) = (*src, *axis, *start);
                    let full = self.nodes[src.0].value.shape().to_vec();
                    let ga = unslice_data(&g, &full, axis, start);
                    accumulate(&mut grads, src, ga);
                }
                Op::Concat { srcs, axis } => {
                    let (srcs, axis) = (srcs.clone(), *axis);
                    let mut offset = 0usize;
                    for src in srcs {
                        let len = self.nodes[src.0].value.shape()[axis];
                        let ga = slice_data(&g, axis, offset, len);
                        offset += len;
                        accumulate(&mut grads, src, ga);
                    }
                }
                Op::SoftmaxLast { src, temp } => {
                    let (src, temp) = (*src, *temp);
                    let y = &self.nodes[i].value;
                    let n = *y.shape().last().unwrap();
                    let mut ga = Tensor::zeros(y.shape());
                    for ((yrow, grow), orow) in y
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for ((&yv, &gv), ov) in yrow.iter().zip(grow).zip(orow.iter_mut()) {
                            *ov = yv * (gv - dot) / temp;
                        }
                    }
                    accumulate(&mut grads, src, ga);
                }
                Op::LayerNormLast(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let x = &self.nodes[a.0].value;
                    let n = *x.shape().last().unwrap();
                    let inv_n = T::one() / T::cst(n as f64);
                    let eps = T::cst(LN_EPS);
                    let mut ga = Tensor::zeros(x.shape());
                    for ((xrow, (yrow, grow)), orow) in x
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n).zip(g.data().chunks(n)))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let mean = xrow.iter().copied().sum::<T>() * inv_n;
                        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                        let inv_std = T::one() / (var + eps).sqrt();
                        let g_mean = grow.iter().copied().sum::<T>() * inv_n;
                        let gy_mean =
                            grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<T>() * inv_n;
                        for ((&gv, &yv), ov) in grow.iter().zip(yrow).zip(orow.iter_mut()) {
                            *ov = (gv - g_mean - yv * gy_mean) * inv_std;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let ga = zip_tensors(y, &g, |yv, gv| gv * yv * (T::one() - yv));
                    accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let ga = zip_tensors(y, &g, |yv, gv| gv * (T::one() - yv * yv));
                    accumulate(&mut grads, a, ga);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let ga = zip_tensors(x, &g, |xv, gv| gv * gelu_bwd(xv));
                    accumulate(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let ga = zip_tensors(x, &g, |xv, gv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let ga = zip_tensors(y, &g, |yv, gv| gv / (T::cst(2.0) * yv));
                    accumulate(&mut grads, a, ga);
                }
                Op::SumLast(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let n = *x.shape().last().unwrap();
                    let mut ga = Tensor::zeros(x.shape());
                    for (orow, &gv) in ga.data_mut().chunks_mut(n).zip(g.data()) {
                        for ov in orow {
                            *ov = gv;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let gv = g.data()[0];
                    let ga = Tensor::full(x.shape(), gv);
                    accumulate(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let gv = g.data()[0] / T::cst(x.numel() as f64);
                    let ga = Tensor::full(x.shape(), gv);
                    accumulate(&mut grads, a, ga);
                }
                Op::Rope { src, cos, sin } => {
                    let src = *src;
                    // The adjoint of a rotation is the opposite rotation.
                    let ga = rope_apply(&g, cos, sin, true);
                    accumulate(&mut grads, src, ga);
                }
                Op::SmoothL1(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let scale = g.data()[0] / T::cst(va.numel() as f64);
                    let one = T::one();
                    let mut ga = Tensor::zeros(va.shape());
                    for ((&x, &y), ov) in va.data().iter().zip(vb.data()).zip(ga.data_mut()) {
                        let d = x - y;
                        *ov = scale
                            * if d.abs() < one {
                                d
                            } else if d > T::zero() {
                                one
                            } else {
                                -one
                            };
                    }
                    let gb = ga.map(|v| -v);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_reduced(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: TensorId,
        g: &Tensor<T>,
    ) {
        let target_shape = self.nodes[target.0].value.shape();
        if g.shape() == target_shape {
            accumulate(grads, target, g.clone());
        } else {
            let mut reduced = Tensor::zeros(target_shape);
            reduce_grad_into(g, &mut reduced);
            accumulate(grads, target, reduced);
        }
    }

    /// Reads node `other` broadcast against `g`'s shape and combines elementwise.
    fn broadcast_combine(
        &self,
        other: TensorId,
        g: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Tensor<T> {
        let vo = &self.nodes[other.0].value;
        let out_shape = g.shape().to_vec();
        if vo.shape() == out_shape.as_slice() {
            return zip_tensors(vo, g, f);
        }
        let so = broadcast_strides(vo.shape(), &out_shape);
        let mut out = Tensor::zeros(&out_shape);
        let mut idx = vec![0usize; out_shape.len()];
        for (ov, &gv) in out.data_mut().iter_mut().zip(g.data()) {
            let po: usize = idx.iter().zip(&so).map(|(x, s)| x * s).sum();
            *ov = f(vo.data()[po], gv);
            advance(&mut idx, &out_shape);
        }
        out
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Kernels and data movement ────────────────────────────────────────────

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: TensorId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn advance(idx: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn apply_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == out_shape && b.shape() == out_shape {
        return zip_tensors(a, b, f);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = Tensor::zeros(out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for ov in out.data_mut().iter_mut() {
        let pa: usize = idx.iter().zip(&sa).map(|(x, s)| x * s).sum();
        let pb: usize = idx.iter().zip(&sb).map(|(x, s)| x * s).sum();
        *ov = f(a.data()[pa], b.data()[pb]);
        advance(&mut idx, out_shape);
    }
    out
}

fn zip_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip shape")
}

/// `out += a x b` for row-major `a: [m,k]`, `b: [k,n]`. The k-in-the-middle
/// loop order keeps both reads streaming.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += aik * bv;
            }
        }
    }
}

/// `out += a x b^T` for `a: [m,n]`, `b: [k,n]`, producing `[m,k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, ov) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *ov += acc;
        }
    }
}

/// `out += a^T x b` for `a: [m,k]`, `b: [m,n]`, producing `[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += aik * bv;
            }
        }
    }
}

fn permute_data<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let in_strides = row_major_strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let mapped_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for ov in out.data_mut().iter_mut() {
        let p: usize = idx.iter().zip(&mapped_strides).map(|(x, s)| x * s).sum();
        *ov = t.data()[p];
        advance(&mut idx, &out_shape);
    }
    out
}

fn slice_data<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    let src = t.data();
    for o in 0..outer {
        let base = o * shape[axis] * inner + start * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::new(&out_shape, data).expect("slice shape")
}

fn unslice_data<T: Scalar>(
    g: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let len = g.shape()[axis];
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(full_shape);
    let dst = out.data_mut();
    let src = g.data();
    for o in 0..outer {
        let dst_base = o * full_shape[axis] * inner + start * inner;
        let src_base = o * len * inner;
        dst[dst_base..dst_base + len * inner]
            .copy_from_slice(&src[src_base..src_base + len * inner]);
    }
    out
}

fn concat_data<T: Scalar>(parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Tensor<T> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for part in parts {
            let len = part.shape()[axis];
            let base = o * len * inner;
            data.extend_from_slice(&part.data()[base..base + len * inner]);
        }
    }
    Tensor::new(out_shape, data).expect("concat shape")
}

fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
    inverse: bool,
) -> Tensor<T> {
    let shape = x.shape();
    let d = shape[shape.len() - 1];
    let s = shape[shape.len() - 2];
    let half = d / 2;
    let blocks = x.numel() / (s * d);
    let mut out = Tensor::zeros(shape);
    let src = x.data();
    let dst = out.data_mut();
    for blk in 0..blocks {
        for pos in 0..s {
            let base = (blk * s + pos) * d;
            for u in 0..half {
                let c = cos.data()[pos * half + u];
                let sn = if inverse { -sin.data()[pos * half + u] } else { sin.data()[pos * half + u] };
                let x0 = src[base + 2 * u];
                let x1 = src[base + 2 * u + 1];
                dst[base + 2 * u] = x0 * c - x1 * sn;
                dst[base + 2 * u + 1] = x0 * sn + x1 * c;
            }
        }
    }
    out
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::cst(0.797_884_560_802_865_4);
    let k = T::cst(0.044715);
    let half = T::cst(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::cst(0.797_884_560_802_865_4);
    let k = T::cst(0.044715);
    let half = T::cst(0.5);
    let three = T::cst(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

// ── Tests ────────────────────────────────────────────────────────────────
