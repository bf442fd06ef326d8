//! Dual encoder, query calibration modes, and the contrastive loss.
//!
//! Every forward exists twice: a pure f64 path for evaluation and a taped
//! path for training. The two are tested against each other; the pure path
//! is the oracle, the taped path is what gradients flow through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::Sample;
use crate::calibrator::{
    calibrate_with_params, frob_loss_on_tape, ortho_loss_on_tape, proposal_on_tape,
    AdaptationParams, CalibrationOutput, HyperNetwork, SharedAdapter, TapeAdaptation,
};
use crate::numerics::{
    DenseArray, GradientTape, NumericsError, ParamId, ParamStore, UnitVector, Var,
};

/// How the final query is assembled from `q0` and the proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    /// Great-circle interpolation by λ.
    Slerp,
    /// Euclidean mix `normalize((1−λ)·q0 + λ·q_p)`.
    Linear,
    /// The proposal is used directly.
    ProposalOnly,
    /// Calibration disabled; the raw `q0` is the query.
    None,
}

/// Model-structure switches for the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_calibrator: bool,
    pub interp_mode: InterpMode,
    /// One learned (A, B, λ) for all queries instead of per-query prediction.
    pub shared_params: bool,
    /// Stop adapter gradients from flowing into the encoder through the
    /// hypernetwork's conditioning input.
    pub detach_hypernet_input: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_calibrator: true,
            interp_mode: InterpMode::Slerp,
            shared_params: false,
            detach_hypernet_input: false,
        }
    }
}

impl AblationFlags {
    pub fn calibrated(&self) -> bool {
        self.use_calibrator && self.interp_mode != InterpMode::None
    }
}

/// Two affine+tanh towers with additive retrieval-bias vectors.
///
/// The bias vectors `r_q`, `r_t` join every forward pass right before
/// normalization, so the norms of their loss gradients measure how hard the
/// current batch pushed on the retrieval representation — the difficulty
/// signal the task sampler consumes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualEncoder {
    pub feature_dim: usize,
    pub instruction_dim: usize,
    pub d_model: usize,
    w_q: ParamId,
    b_q: ParamId,
    r_q: ParamId,
    w_t: ParamId,
    b_t: ParamId,
    r_t: ParamId,
}

impl DualEncoder {
    pub fn init(
        store: &mut ParamStore,
        feature_dim: usize,
        instruction_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Small flat init keeps tanh in its linear zone and leaves the
        // direction of every embedding genuinely learnable within a short
        // run, since update magnitudes rival the init scale.
        let scale = 0.05;
        let q_in = feature_dim + instruction_dim;
        let mut w_q = DenseArray::zeros(vec![d_model, q_in]);
        for v in w_q.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
        let mut w_t = DenseArray::zeros(vec![d_model, feature_dim]);
        for v in w_t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
        Self {
            feature_dim,
            instruction_dim,
            d_model,
            w_q: store.add("encoder.w_q", w_q),
            b_q: store.add("encoder.b_q", DenseArray::zeros(vec![d_model])),
            r_q: store.add("encoder.r_q", DenseArray::zeros(vec![d_model])),
            w_t: store.add("encoder.w_t", w_t),
            b_t: store.add("encoder.b_t", DenseArray::zeros(vec![d_model])),
            r_t: store.add("encoder.r_t", DenseArray::zeros(vec![d_model])),
        }
    }

    pub fn retrieval_bias_ids(&self) -> (ParamId, ParamId) {
        (self.r_q, self.r_t)
    }

    /// Query-tower input: features with the instruction one-hot appended.
    pub fn query_input(&self, sample: &Sample) -> DenseArray {
        debug_assert_eq!(sample.query_features.len(), self.feature_dim);
        let mut data = Vec::with_capacity(self.feature_dim + self.instruction_dim);
        data.extend_from_slice(&sample.query_features);
        let mut onehot = vec![0.0; self.instruction_dim];
        onehot[sample.instruction_id] = 1.0;
        data.extend_from_slice(&onehot);
        DenseArray::vector(data)
    }

    /// Raw query embedding `q0 = normalize(tanh(W_q·x) + r_q)`, pure path.
    pub fn encode_query_raw(
        &self,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<UnitVector, NumericsError> {
        let x = self.query_input(sample);
        let pre = store
            .get(self.w_q)
            .matvec(&x)
            .zip(store.get(self.b_q), |a, b| a + b);
        let summed = pre.map(f64::tanh).zip(store.get(self.r_q), |a, b| a + b);
        UnitVector::normalize(&summed)
    }

    /// Target embedding `t = normalize(tanh(W_t·x) + r_t)`, pure path.
    pub fn encode_target(
        &self,
        store: &ParamStore,
        features: &[f64],
    ) -> Result<UnitVector, NumericsError> {
        debug_assert_eq!(features.len(), self.feature_dim);
        let x = DenseArray::vector(features.to_vec());
        let pre = store
            .get(self.w_t)
            .matvec(&x)
            .zip(store.get(self.b_t), |a, b| a + b);
        let summed = pre.map(f64::tanh).zip(store.get(self.r_t), |a, b| a + b);
        UnitVector::normalize(&summed)
    }

    pub fn encode_query_raw_on_tape(
        &self,
        tape: &mut GradientTape,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<Var, NumericsError> {
        let x = tape.constant(self.query_input(sample));
        let w = tape.param(store, self.w_q);
        let b = tape.param(store, self.b_q);
        let r = tape.param(store, self.r_q);
        let pre = tape.matvec(w, x);
        let pre_b = tape.add(pre, b);
        let act = tape.tanh(pre_b);
        let summed = tape.add(act, r);
        tape.normalize(summed)
    }

    pub fn encode_target_on_tape(
        &self,
        tape: &mut GradientTape,
        store: &ParamStore,
        features: &[f64],
    ) -> Result<Var, NumericsError> {
        let x = tape.constant(DenseArray::vector(features.to_vec()));
        let w = tape.param(store, self.w_t);
        let b = tape.param(store, self.b_t);
        let r = tape.param(store, self.r_t);
        let pre = tape.matvec(w, x);
        let pre_b = tape.add(pre, b);
        let act = tape.tanh(pre_b);
        let summed = tape.add(act, r);
        tape.normalize(summed)
    }
}

/// Which calibration machinery the model carries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum CalibratorKind {
    None,
    PerQuery(HyperNetwork),
    Shared(SharedAdapter),
}

/// Encoder plus optional calibrator plus the flags describing how they meet.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub encoder: DualEncoder,
    pub calibrator: CalibratorKind,
    pub flags: AblationFlags,
}

/// What encoding one query produced, pure path.
pub struct EncodedQuery {
    pub q: UnitVector,
    /// Present whenever a calibrator ran, regardless of interpolation mode.
    pub calibration: Option<CalibrationOutput>,
}

impl Model {
    /// Builds a model with freshly initialized parameters in `store`.
    pub fn init(
        store: &mut ParamStore,
        feature_dim: usize,
        instruction_dim: usize,
        d_model: usize,
        rank: usize,
        hidden: usize,
        flags: AblationFlags,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = DualEncoder::init(store, feature_dim, instruction_dim, d_model, rng);
        let calibrator = if flags.calibrated() {
            if flags.shared_params {
                CalibratorKind::Shared(SharedAdapter::init_trainable(store, d_model, rank))
            } else {
                CalibratorKind::PerQuery(HyperNetwork::init_trainable(
                    store, d_model, rank, hidden, rng,
                ))
            }
        } else {
            CalibratorKind::None
        };
        Model {
            encoder,
            calibrator,
            flags,
        }
    }

    fn adaptation(
        &self,
        store: &ParamStore,
        q0: &UnitVector,
    ) -> Result<Option<AdaptationParams>, NumericsError> {
        match &self.calibrator {
            CalibratorKind::None => Ok(None),
            CalibratorKind::PerQuery(net) => Ok(Some(net.predict_params(store, q0)?)),
            CalibratorKind::Shared(shared) => Ok(Some(shared.params(store)?)),
        }
    }

    /// Encodes one query per the model's interpolation mode, pure path.
    pub fn encode_query(
        &self,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<EncodedQuery, NumericsError> {
        let q0 = self.encoder.encode_query_raw(store, sample)?;
        let params = match self.adaptation(store, &q0)? {
            Some(p) => p,
            None => {
                return Ok(EncodedQuery {
                    q: q0,
                    calibration: None,
                })
            }
        };
        let cal = calibrate_with_params(&q0, &params)?;
        let q = match self.flags.interp_mode {
            InterpMode::Slerp => cal.q.clone(),
            InterpMode::ProposalOnly => cal.q_p.clone(),
            InterpMode::Linear => {
                let mixed = q0
                    .as_array()
                    .scaled(1.0 - cal.lambda)
                    .zip(&cal.q_p.as_array().scaled(cal.lambda), |a, b| a + b);
                UnitVector::normalize(&mixed)?
            }
            InterpMode::None => q0.clone(),
        };
        Ok(EncodedQuery {
            q,
            calibration: Some(cal),
        })
    }

    /// Per-instance taped query encoding. Returns the final query node plus,
    /// when a calibrator ran, the (ortho, frob, λ) penalty nodes.
    pub fn encode_query_on_tape(
        &self,
        tape: &mut GradientTape,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<(Var, Option<TapePenalties>), NumericsError> {
        let q0 = self.encoder.encode_query_raw_on_tape(tape, store, sample)?;
        let adapt: TapeAdaptation = match &self.calibrator {
            CalibratorKind::None => return Ok((q0, None)),
            CalibratorKind::PerQuery(net) => {
                net.predict_on_tape(tape, store, q0, self.flags.detach_hypernet_input)?
            }
            CalibratorKind::Shared(shared) => shared.params_on_tape(tape, store),
        };
        let q_p = proposal_on_tape(tape, q0, &adapt)?;
        let q = match self.flags.interp_mode {
            InterpMode::Slerp => tape.slerp(q0, q_p, adapt.lambda)?,
            InterpMode::ProposalOnly => q_p,
            InterpMode::Linear => {
                let one_minus = tape.affine(adapt.lambda, -1.0, 1.0);
                let left = tape.mul_scalar(q0, one_minus);
                let right = tape.mul_scalar(q_p, adapt.lambda);
                let mixed = tape.add(left, right);
                tape.normalize(mixed)?
            }
            InterpMode::None => q0,
        };
        let rank = match &self.calibrator {
            CalibratorKind::PerQuery(net) => net.rank,
            CalibratorKind::Shared(shared) => shared.rank,
            CalibratorKind::None => unreachable!(),
        };
        let ortho = ortho_loss_on_tape(tape, adapt.a, rank);
        let frob = frob_loss_on_tape(tape, adapt.a, adapt.b);
        Ok((
            q,
            Some(TapePenalties {
                ortho,
                frob,
                lambda: adapt.lambda,
            }),
        ))
    }
}

/// Per-instance regularizer nodes emitted by a calibrated encoding.
pub struct TapePenalties {
    pub ortho: Var,
    pub frob: Var,
    pub lambda: Var,
}

/// InfoNCE with in-batch negatives, pure path with log-sum-exp stabilization.
pub fn info_nce(queries: &[UnitVector], targets: &[UnitVector], tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(queries.len(), targets.len(), "positives must align");
    let n = queries.len();
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let logits: Vec<f64> = targets.iter().map(|t| q.as_array().dot(t.as_array()) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / n as f64
}

/// Taped InfoNCE over per-instance embedding nodes.
pub fn info_nce_on_tape(
    tape: &mut GradientTape,
    queries: &[Var],
    targets: &[Var],
    tau: f64,
) -> Var {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(queries.len(), targets.len(), "positives must align");
    let n = queries.len();
    let mut per_query = Vec::with_capacity(n);
    for (i, &q) in queries.iter().enumerate() {
        let dots: Vec<Var> = targets.iter().map(|&t| tape.dot(q, t)).collect();
        let row = tape.concat(&dots);
        let scaled = tape.scale(row, 1.0 / tau);
        let lse = tape.logsumexp(scaled);
        let pos = tape.scale(dots[i], 1.0 / tau);
        per_query.push(tape.sub(lse, pos));
    }
    let stacked = tape.concat(&per_query);
    let total = tape.sum(stacked);
    tape.scale(total, 1.0 / n as f64)
}
