//! Reverse-mode differentiation on an arena tape.
//!
//! Forward ops append nodes with eagerly computed values; `backward` replays
//! the arena in reverse, accumulating adjoints into per-parameter gradients.
//! A tape lives for one loss evaluation and is then dropped.

use serde::{Deserialize, Serialize};

use super::array::{DenseArray, COS_CLAMP, SLERP_MIN_ANGLE};
use super::NumericsError;

/// Handle to a named, trainable array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Param {
    name: String,
    value: DenseArray,
}

/// Owns every trainable array in a model.
///
/// Iteration order is insertion order, which keeps optimizer sweeps and
/// serialized checkpoints deterministic.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: DenseArray) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar coordinates across all params.
    pub fn num_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Per-parameter gradients produced by one backward pass.
///
/// Parameters the loss never touched get explicit zero gradients, so callers
/// can sweep the whole store without special cases.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<DenseArray>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseArray)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// L2 norm over the concatenation of all per-parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Copy with every entry scaled. Checking harnesses use this to plant a
    /// deliberately wrong gradient and prove they would catch one.
    pub fn scaled(&self, factor: f64) -> Gradients {
        Gradients {
            grads: self.grads.iter().map(|g| g.scaled(factor)).collect(),
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise `mul * x + add`.
    Affine(Var, f64, f64),
    /// Vector times a scalar tape node.
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    /// 1D slice `[start, start+len)`.
    Slice(Var, usize, usize),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Sum(Var),
    Dot(Var, Var),
    Normalize(Var),
    LogSumExp(Var),
    /// arccos of a clamped scalar cosine; gradient is zero in the clamp zone.
    ClampAcos(Var),
}

struct Node {
    op: Op,
    value: DenseArray,
    /// Set when this leaf mirrors a store parameter.
    param: Option<ParamId>,
}

/// Arena of differentiable operations for a single forward pass.
pub struct GradientTape {
    nodes: Vec<Node>,
    /// Leaf var per param id, so repeated reads share one node.
    param_vars: Vec<Option<Var>>,
}

impl GradientTape {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: DenseArray, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a store parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let ParamId(idx) = id;
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(Op::Leaf, store.get(id).clone(), Some(id));
        self.param_vars[idx] = Some(v);
        v
    }

    /// Leaf for a non-trainable input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(Op::Leaf, value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), value, None)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(Op::Affine(x, mul, add), value, None)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(x).scaled(sv);
        self.push(Op::MulScalar(x, s), value, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value, None)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let value = self.value(w).matvec(self.value(x));
        self.push(Op::MatVec(w, x), value, None)
    }

    pub fn vecmat(&mut self, x: Var, w: Var) -> Var {
        let value = DenseArray::vecmat(self.value(x), self.value(w));
        self.push(Op::VecMat(x, w), value, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transposed();
        self.push(Op::Transpose(a), value, None)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let arrays: Vec<&DenseArray> = parts.iter().map(|v| self.value(*v)).collect();
        let value = DenseArray::concat(&arrays);
        self.push(Op::Concat(parts.to_vec()), value, None)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        debug_assert_eq!(src.shape().len(), 1, "slice needs a 1D input");
        let value = DenseArray::vector(src.data()[start..start + len].to_vec());
        self.push(Op::Slice(x, start, len), value, None)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).reshaped(shape);
        self.push(Op::Reshape(x), value, None)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), value, None)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value, None)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Ln(x), value, None)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sin);
        self.push(Op::Sin(x), value, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseArray::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = DenseArray::scalar(self.value(a).dot(self.value(b)));
        self.push(Op::Dot(a, b), value, None)
    }

    /// L2 normalization; rejects inputs with norm below 1e-12.
    pub fn normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).norm();
        if n < 1e-12 {
            return Err(NumericsError::ZeroNorm { norm: n });
        }
        let value = self.value(x).scaled(1.0 / n);
        Ok(self.push(Op::Normalize(x), value, None))
    }

    /// Max-shifted log-sum-exp over a 1D input, returning a scalar.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = src.iter().map(|v| (v - m).exp()).sum();
        let value = DenseArray::scalar(m + s.ln());
        self.push(Op::LogSumExp(x), value, None)
    }

    /// arccos of a scalar cosine clamped to `[-(1-1e-9), 1-1e-9]`.
    pub fn clamp_acos(&mut self, c: Var) -> Var {
        let cv = self.scalar_value(c).clamp(-COS_CLAMP, COS_CLAMP);
        let value = DenseArray::scalar(cv.acos());
        self.push(Op::ClampAcos(c), value, None)
    }

    /// Squared Frobenius norm of any array.
    pub fn frob_sq(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// Angle between two unit-norm nodes.
    pub fn angle(&mut self, u: Var, v: Var) -> Var {
        let c = self.dot(u, v);
        self.clamp_acos(c)
    }

    /// Spherical interpolation between unit-norm nodes `u` and `v` at a
    /// scalar-node weight `lambda`, switching to normalized linear mixing
    /// below the small-angle threshold.
    pub fn slerp(&mut self, u: Var, v: Var, lambda: Var) -> Result<Var, NumericsError> {
        let omega = self.angle(u, v);
        let one_minus = self.affine(lambda, -1.0, 1.0);
        if self.scalar_value(omega) < SLERP_MIN_ANGLE {
            let left = self.mul_scalar(u, one_minus);
            let right = self.mul_scalar(v, lambda);
            let mixed = self.add(left, right);
            return self.normalize(mixed);
        }
        let sin_omega = self.sin(omega);
        let lhs_arg = self.mul(one_minus, omega);
        let rhs_arg = self.mul(lambda, omega);
        let lhs_sin = self.sin(lhs_arg);
        let rhs_sin = self.sin(rhs_arg);
        let cu = self.div(lhs_sin, sin_omega);
        let cv = self.div(rhs_sin, sin_omega);
        let left = self.mul_scalar(u, cu);
        let right = self.mul_scalar(v, cv);
        Ok(self.add(left, right))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every param
    /// in `store` (zeros for params the loss does not reach).
    pub fn backward(
        &self,
        loss: Var,
        store: &ParamStore,
    ) -> Result<Gradients, NumericsError> {
        assert!(
            self.value(loss).is_scalar(),
            "backward needs a scalar root, got shape {:?}",
            self.value(loss).shape()
        );
        let mut adjoints: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(DenseArray::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut adjoints);
            if let Some(_id) = self.nodes[i].param {
                // Re-stash leaf adjoints so the param sweep below can read them.
                adjoints[i] = Some(g);
            }
        }

        let mut grads: Vec<DenseArray> = store
            .ids()
            .map(|id| DenseArray::zeros_like(store.get(id)))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(ParamId(p)), Some(g)) = (node.param, &adjoints[i]) {
                grads[p].add_assign(g);
            }
        }
        for (p, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    param: store.name(ParamId(p)).to_string(),
                });
            }
        }
        Ok(Gradients { grads })
    }

    /// Routes the adjoint `g` of node `i` into its inputs.
    fn accumulate(&self, i: usize, g: &DenseArray, adjoints: &mut Vec<Option<DenseArray>>) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: DenseArray| {
            match &mut adjoints[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip(self.value(*b), |gi, bi| gi * bi));
                send(*b, g.zip(self.value(*a), |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                send(*a, g.zip(bv, |gi, bi| gi / bi));
                let av = self.value(*a);
                let mut gb = g.zip(av, |gi, ai| -gi * ai);
                gb = gb.zip(bv, |v, bi| v / (bi * bi));
                send(*b, gb);
            }
            Op::Affine(x, mul, _add) => {
                send(*x, g.scaled(*mul));
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).as_scalar();
                send(*x, g.scaled(sv));
                send(*s, DenseArray::scalar(g.dot(self.value(*x))));
            }
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transposed();
                send(*a, g.matmul(&bt));
                let at = self.value(*a).transposed();
                send(*b, at.matmul(g));
            }
            Op::MatVec(w, x) => {
                // y = W x: dW = g xᵀ, dx = Wᵀ g
                let xv = self.value(*x);
                let (m, k) = (g.len(), xv.len());
                let mut dw = vec![0.0; m * k];
                for r in 0..m {
                    let gr = g.get(r);
                    for c in 0..k {
                        dw[r * k + c] = gr * xv.get(c);
                    }
                }
                send(*w, DenseArray::matrix(m, k, dw).expect("outer product shape"));
                send(*x, self.value(*w).transposed().matvec(g));
            }
            Op::VecMat(x, w) => {
                // y = xᵀ W: dx = W g, dW = x gᵀ
                send(*x, self.value(*w).matvec(g));
                let xv = self.value(*x);
                let (k, n) = (xv.len(), g.len());
                let mut dw = vec![0.0; k * n];
                for r in 0..k {
                    let xr = xv.get(r);
                    for c in 0..n {
                        dw[r * n + c] = xr * g.get(c);
                    }
                }
                send(*w, DenseArray::matrix(k, n, dw).expect("outer product shape"));
            }
            Op::Transpose(a) => {
                send(*a, g.transposed());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let piece = DenseArray::vector(g.data()[offset..offset + len].to_vec());
                    send(*p, piece);
                    offset += len;
                }
            }
            Op::Slice(x, start, len) => {
                let mut full = DenseArray::zeros_like(self.value(*x));
                full.data_mut()[*start..*start + *len].copy_from_slice(g.data());
                send(*x, full);
            }
            Op::Reshape(x) => {
                send(*x, g.reshaped(self.value(*x).shape().to_vec()));
            }
            Op::Tanh(x) => {
                send(*x, g.zip(&node.value, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(x) => {
                send(*x, g.zip(&node.value, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::Exp(x) => {
                send(*x, g.zip(&node.value, |gi, yi| gi * yi));
            }
            Op::Ln(x) => {
                send(*x, g.zip(self.value(*x), |gi, xi| gi / xi));
            }
            Op::Sin(x) => {
                send(*x, g.zip(self.value(*x), |gi, xi| gi * xi.cos()));
            }
            Op::Sum(x) => {
                let gv = g.as_scalar();
                send(*x, self.value(*x).map(|_| gv));
            }
            Op::Dot(a, b) => {
                let gv = g.as_scalar();
                send(*a, self.value(*b).scaled(gv));
                send(*b, self.value(*a).scaled(gv));
            }
            Op::Normalize(x) => {
                // y = x/‖x‖: dx = (g - (g·y) y) / ‖x‖
                let y = &node.value;
                let n = self.value(*x).norm();
                let gy = g.dot(y);
                let mut dx = g.clone();
                dx.add_scaled(y, -gy);
                send(*x, dx.scaled(1.0 / n));
            }
            Op::LogSumExp(x) => {
                // dx_i = g · softmax(x)_i = g · exp(x_i - y)
                let y = node.value.as_scalar();
                let gv = g.as_scalar();
                send(*x, self.value(*x).map(|xi| gv * (xi - y).exp()));
            }
            Op::ClampAcos(c) => {
                let cv = self.value(*c).as_scalar();
                let d = if cv.abs() < COS_CLAMP {
                    -1.0 / (1.0 - cv * cv).sqrt()
                } else {
                    0.0
                };
                send(*c, DenseArray::scalar(g.as_scalar() * d));
            }
        }
    }
}
