//! Per-query low-rank calibration on the unit sphere.
//!
//! A hypernetwork conditioned on the raw query embedding predicts a rank-`d`
//! adapter pair (A, B) and an interpolation weight λ. The adapter builds a
//! residual proposal `q_p = normalize(q0 + q0·A·B)`; the final query moves
//! from `q0` toward `q_p` along the great circle by the fraction λ of their
//! angle. Two regularizers keep the adapters well-behaved: an orthogonality
//! penalty on A's columns and a Frobenius penalty on both factors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    angle, slerp, DenseArray, GradientTape, NumericsError, ParamId, ParamStore, UnitVector, Var,
};

/// Per-query adapter pair and interpolation weight.
#[derive(Clone, Debug)]
pub struct AdaptationParams {
    /// Down-projection, `[d_model, rank]`.
    pub a: DenseArray,
    /// Up-projection, `[rank, d_model]`.
    pub b: DenseArray,
    /// Interpolation weight in (0, 1).
    pub lambda: f64,
}

impl AdaptationParams {
    pub fn new(a: DenseArray, b: DenseArray, lambda: f64) -> Result<Self, NumericsError> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                context: "AdaptationParams::new",
                expected: vec![2],
                actual: vec![a.shape().len(), b.shape().len()],
            });
        }
        let (d_model, rank) = (a.rows(), a.cols());
        if rank >= d_model || b.rows() != rank || b.cols() != d_model {
            return Err(NumericsError::ShapeMismatch {
                context: "AdaptationParams::new",
                expected: vec![d_model, rank],
                actual: vec![b.rows(), b.cols()],
            });
        }
        assert!(lambda > 0.0 && lambda < 1.0, "lambda must lie in (0,1)");
        Ok(Self { a, b, lambda })
    }
}

/// Everything produced by calibrating one query.
#[derive(Clone, Debug)]
pub struct CalibrationOutput {
    /// Final calibrated query.
    pub q: UnitVector,
    /// Residual proposal the query was pulled toward.
    pub q_p: UnitVector,
    /// Angle between `q0` and the proposal, radians.
    pub omega: f64,
    /// Interpolation weight used.
    pub lambda: f64,
    /// Column-orthogonality penalty of A for this instance.
    pub ortho_loss: f64,
    /// Frobenius penalty of (A, B) for this instance.
    pub reg_loss: f64,
}

/// Column-orthogonality penalty `‖AᵀA − I‖_F²` (applied to A only).
pub fn ortho_loss(a: &DenseArray) -> f64 {
    let rank = a.cols();
    let gram = a.transposed().matmul(a);
    let mut acc = 0.0;
    for i in 0..rank {
        for j in 0..rank {
            let target = if i == j { 1.0 } else { 0.0 };
            let diff = gram.get2(i, j) - target;
            acc += diff * diff;
        }
    }
    acc
}

/// Magnitude penalty `‖A‖_F² + ‖B‖_F²`.
pub fn frob_loss(a: &DenseArray, b: &DenseArray) -> f64 {
    let sa: f64 = a.iter().map(|v| v * v).sum();
    let sb: f64 = b.iter().map(|v| v * v).sum();
    sa + sb
}

/// Builds the residual proposal `normalize(q0 + q0·A·B)`.
///
/// With `A·B = 0` this is exactly `q0`, so an untrained adapter leaves the
/// query untouched.
pub fn make_proposal(
    q0: &UnitVector,
    params: &AdaptationParams,
) -> Result<UnitVector, NumericsError> {
    if q0.dim() != params.a.rows() {
        return Err(NumericsError::ShapeMismatch {
            context: "make_proposal",
            expected: vec![params.a.rows()],
            actual: vec![q0.dim()],
        });
    }
    let low = DenseArray::vecmat(q0.as_array(), &params.a);
    let delta = DenseArray::vecmat(&low, &params.b);
    let sum = q0.as_array().zip(&delta, |x, y| x + y);
    UnitVector::normalize(&sum)
}

/// Full single-query pipeline from explicit adapter parameters.
pub fn calibrate_with_params(
    q0: &UnitVector,
    params: &AdaptationParams,
) -> Result<CalibrationOutput, NumericsError> {
    let q_p = make_proposal(q0, params)?;
    let omega = angle(q0, &q_p);
    let q = slerp(q0, &q_p, params.lambda);
    Ok(CalibrationOutput {
        q,
        q_p,
        omega,
        lambda: params.lambda,
        ortho_loss: ortho_loss(&params.a),
        reg_loss: frob_loss(&params.a, &params.b),
    })
}

fn sigmoid(x: f64) -> f64 {
    // Clamped away from {0,1} so downstream code can rely on the open interval.
    (1.0 / (1.0 + (-x).exp())).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Adapter-and-weight nodes living on a gradient tape.
pub struct TapeAdaptation {
    /// `[d_model, rank]`.
    pub a: Var,
    /// `[rank, d_model]`.
    pub b: Var,
    /// Scalar in (0,1).
    pub lambda: Var,
}

/// Two-layer MLP predicting `(A, B, λ)` from the raw query embedding.
///
/// Output layout: the first `d_model·rank` values fill A row-major, the next
/// `rank·d_model` fill B row-major, and the last value is the λ logit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperNetwork {
    pub d_model: usize,
    pub rank: usize,
    pub hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl HyperNetwork {
    fn out_width(d_model: usize, rank: usize) -> usize {
        2 * d_model * rank + 1
    }

    /// All four layer parameters set to exact zeros: every query maps to
    /// `A = 0`, `B = 0`, `λ = 0.5`, and calibration is the identity.
    pub fn init_zero(
        store: &mut ParamStore,
        d_model: usize,
        rank: usize,
        hidden: usize,
    ) -> Self {
        assert!(rank < d_model, "rank must be below d_model");
        let out = Self::out_width(d_model, rank);
        Self {
            d_model,
            rank,
            hidden,
            w1: store.add("hyper.w1", DenseArray::zeros(vec![hidden, d_model])),
            b1: store.add("hyper.b1", DenseArray::zeros(vec![hidden])),
            w2: store.add("hyper.w2", DenseArray::zeros(vec![out, hidden])),
            b2: store.add("hyper.b2", DenseArray::zeros(vec![out])),
        }
    }

    /// Identity-preserving trainable initialization.
    ///
    /// A fully-zero final layer is a stationary point of the whole objective:
    /// with `A = B = 0` the proposal path, the λ path, and both regularizers
    /// all have zero gradient into the hypernetwork, so it would never train.
    /// Instead the bias seeds A at the orthonormal column stack `[I_d; 0]`
    /// (zero orthogonality penalty) and the A-block weights get small random
    /// values for per-query variation, while the B block and λ head stay at
    /// zero. Since `B = 0`, calibration is still exactly the identity at
    /// step 0 and λ starts at 0.5, but gradients now flow into B.
    pub fn init_trainable(
        store: &mut ParamStore,
        d_model: usize,
        rank: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(rank < d_model, "rank must be below d_model");
        let out = Self::out_width(d_model, rank);
        let block = d_model * rank;

        let w1_scale = 1.0 / (d_model as f64).sqrt();
        let mut w1 = DenseArray::zeros(vec![hidden, d_model]);
        for v in w1.data_mut() {
            *v = rng.random_range(-w1_scale..w1_scale);
        }

        let w2_scale = 0.2 / (hidden as f64).sqrt();
        let mut w2 = DenseArray::zeros(vec![out, hidden]);
        for v in w2.data_mut()[..block * hidden].iter_mut() {
            *v = rng.random_range(-w2_scale..w2_scale);
        }

        let mut b2 = DenseArray::zeros(vec![out]);
        for j in 0..rank {
            // Row-major A[i][j] at offset i*rank + j; seed A = [I_rank; 0].
            b2.data_mut()[j * rank + j] = 1.0;
        }

        Self {
            d_model,
            rank,
            hidden,
            w1: store.add("hyper.w1", w1),
            b1: store.add("hyper.b1", DenseArray::zeros(vec![hidden])),
            w2: store.add("hyper.w2", w2),
            b2: store.add("hyper.b2", b2),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    fn check_input(&self, width: usize) -> Result<(), NumericsError> {
        if width != self.d_model {
            return Err(NumericsError::ShapeMismatch {
                context: "HyperNetwork input",
                expected: vec![self.d_model],
                actual: vec![width],
            });
        }
        Ok(())
    }

    /// Predicts the adapter for one query without recording gradients.
    pub fn predict_params(
        &self,
        store: &ParamStore,
        q0: &UnitVector,
    ) -> Result<AdaptationParams, NumericsError> {
        self.check_input(q0.dim())?;
        let pre = store
            .get(self.w1)
            .matvec(q0.as_array())
            .zip(store.get(self.b1), |x, b| x + b);
        let h = pre.map(f64::tanh);
        let out = store
            .get(self.w2)
            .matvec(&h)
            .zip(store.get(self.b2), |x, b| x + b);
        self.split_output(&out)
    }

    /// Predicts adapters for many queries through one matrix product.
    ///
    /// Numerically equivalent to calling [`predict_params`] per query; the
    /// batched route exists so the two can cross-check each other and bulk
    /// evaluation stays cheap.
    ///
    /// [`predict_params`]: HyperNetwork::predict_params
    pub fn predict_params_batch(
        &self,
        store: &ParamStore,
        queries: &[UnitVector],
    ) -> Result<Vec<AdaptationParams>, NumericsError> {
        let n = queries.len();
        let mut stacked = DenseArray::zeros(vec![n, self.d_model]);
        for (i, q) in queries.iter().enumerate() {
            self.check_input(q.dim())?;
            stacked.data_mut()[i * self.d_model..(i + 1) * self.d_model]
                .copy_from_slice(q.as_array().data());
        }
        let w1t = store.get(self.w1).transposed();
        let b1 = store.get(self.b1);
        let mut h = stacked.matmul(&w1t);
        for i in 0..n {
            for (j, hv) in h.data_mut()[i * self.hidden..(i + 1) * self.hidden]
                .iter_mut()
                .enumerate()
            {
                *hv = (*hv + b1.get(j)).tanh();
            }
        }
        let w2t = store.get(self.w2).transposed();
        let b2 = store.get(self.b2);
        let out_w = Self::out_width(self.d_model, self.rank);
        let mut out = h.matmul(&w2t);
        let mut result = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut out.data_mut()[i * out_w..(i + 1) * out_w];
            for (j, v) in row.iter_mut().enumerate() {
                *v += b2.get(j);
            }
            result.push(self.split_output(&DenseArray::vector(row.to_vec()))?);
        }
        Ok(result)
    }

    fn split_output(&self, out: &DenseArray) -> Result<AdaptationParams, NumericsError> {
        let block = self.d_model * self.rank;
        let a = DenseArray::new(
            vec![self.d_model, self.rank],
            out.data()[..block].to_vec(),
        )?;
        let b = DenseArray::new(
            vec![self.rank, self.d_model],
            out.data()[block..2 * block].to_vec(),
        )?;
        AdaptationParams::new(a, b, sigmoid(out.get(2 * block)))
    }

    /// Full single-query pipeline: predict, propose, interpolate.
    pub fn calibrate(
        &self,
        store: &ParamStore,
        q0: &UnitVector,
    ) -> Result<CalibrationOutput, NumericsError> {
        let params = self.predict_params(store, q0)?;
        calibrate_with_params(q0, &params)
    }

    /// Records the prediction on a tape.
    ///
    /// With `detach_input` the MLP sees a constant copy of `q0`, so adapter
    /// gradients stop at the hypernetwork instead of flowing back into the
    /// encoder through its conditioning input.
    pub fn predict_on_tape(
        &self,
        tape: &mut GradientTape,
        store: &ParamStore,
        q0: Var,
        detach_input: bool,
    ) -> Result<TapeAdaptation, NumericsError> {
        self.check_input(tape.value(q0).len())?;
        let input = if detach_input {
            let copy = tape.value(q0).clone();
            tape.constant(copy)
        } else {
            q0
        };
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let pre = tape.matvec(w1, input);
        let pre_b = tape.add(pre, b1);
        let h = tape.tanh(pre_b);
        let raw = tape.matvec(w2, h);
        let out = tape.add(raw, b2);
        let block = self.d_model * self.rank;
        let a_flat = tape.slice(out, 0, block);
        let a = tape.reshape(a_flat, vec![self.d_model, self.rank]);
        let b_flat = tape.slice(out, block, block);
        let b = tape.reshape(b_flat, vec![self.rank, self.d_model]);
        let logit = tape.slice(out, 2 * block, 1);
        let lambda = tape.sigmoid(logit);
        Ok(TapeAdaptation { a, b, lambda })
    }
}

/// One adapter triple learned directly and reused for every query, replacing
/// per-query prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SharedAdapter {
    pub d_model: usize,
    pub rank: usize,
    a: ParamId,
    b: ParamId,
    lambda_logit: ParamId,
}

impl SharedAdapter {
    /// Same identity-preserving scheme as the hypernetwork: A seeded at
    /// `[I_d; 0]`, B zero, λ logit zero.
    pub fn init_trainable(store: &mut ParamStore, d_model: usize, rank: usize) -> Self {
        assert!(rank < d_model, "rank must be below d_model");
        let mut a = DenseArray::zeros(vec![d_model, rank]);
        for j in 0..rank {
            a.data_mut()[j * rank + j] = 1.0;
        }
        Self {
            d_model,
            rank,
            a: store.add("shared.a", a),
            b: store.add("shared.b", DenseArray::zeros(vec![rank, d_model])),
            lambda_logit: store.add("shared.lambda_logit", DenseArray::scalar(0.0)),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.a, self.b, self.lambda_logit]
    }

    pub fn params(&self, store: &ParamStore) -> Result<AdaptationParams, NumericsError> {
        AdaptationParams::new(
            store.get(self.a).clone(),
            store.get(self.b).clone(),
            sigmoid(store.get(self.lambda_logit).as_scalar()),
        )
    }

    pub fn params_on_tape(&self, tape: &mut GradientTape, store: &ParamStore) -> TapeAdaptation {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let logit = tape.param(store, self.lambda_logit);
        let lambda = tape.sigmoid(logit);
        TapeAdaptation { a, b, lambda }
    }
}

/// Tape version of [`make_proposal`]: `normalize(q0 + (q0·A)·B)`.
pub fn proposal_on_tape(
    tape: &mut GradientTape,
    q0: Var,
    adapt: &TapeAdaptation,
) -> Result<Var, NumericsError> {
    let low = tape.vecmat(q0, adapt.a);
    let delta = tape.vecmat(low, adapt.b);
    let sum = tape.add(q0, delta);
    tape.normalize(sum)
}

/// Tape version of [`ortho_loss`].
pub fn ortho_loss_on_tape(tape: &mut GradientTape, a: Var, rank: usize) -> Var {
    let at = tape.transpose(a);
    let gram = tape.matmul(at, a);
    let eye = tape.constant(DenseArray::eye(rank));
    let diff = tape.sub(gram, eye);
    tape.frob_sq(diff)
}

/// Tape version of [`frob_loss`].
pub fn frob_loss_on_tape(tape: &mut GradientTape, a: Var, b: Var) -> Var {
    let fa = tape.frob_sq(a);
    let fb = tape.frob_sq(b);
    tape.add(fa, fb)
}
