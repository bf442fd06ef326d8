//! The training loop: task selection, batched losses, updates, difficulty
//! reporting, and checkpointable run state.

pub mod checkpoint;
pub mod model;
pub mod optimizer;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchgen::{Benchmark, Sample, Split};
use crate::evaluator::{self, EvalError, MetricsReport, RunMeta};
use crate::numerics::{GradientTape, NumericsError, ParamStore, Var};
use crate::sampler::{
    instantaneous_difficulty, SamplerConfig, SamplerError, TaskSampler, TaskStats,
};
use crate::seeds;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{AblationFlags, CalibratorKind, DualEncoder, InterpMode, Model};
pub use optimizer::{round_store_to_f32, Optimizer, OptimizerConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {what}")]
    InvalidConfig { what: String },
    #[error("numerics failure at step {step}: {source}")]
    Numerics {
        step: u64,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint: {what}")]
    Checkpoint { what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameter storage width. Gradients are always f64; in `F32` every
/// parameter is rounded through f32 after each update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the orthogonality penalty.
    pub beta1: f64,
    /// Weight of the Frobenius magnitude penalty.
    pub beta2: f64,
    /// Embedding width D.
    pub d_model: usize,
    /// Adapter bottleneck width d.
    pub rank: usize,
    /// Hypernetwork hidden width H.
    pub hidden: usize,
    pub precision: Precision,
    pub ablation: AblationFlags,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            tau: 0.05,
            beta1: 1e-2,
            beta2: 1e-4,
            d_model: 64,
            rank: 8,
            hidden: 128,
            precision: Precision::F64,
            ablation: AblationFlags::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self, benchmark: &Benchmark) -> Result<(), TrainError> {
        let fail = |what: String| Err(TrainError::InvalidConfig { what });
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.learning_rate >= 0.0) {
            return fail(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return fail(format!(
                "loss weights must be nonnegative, got beta1={} beta2={}",
                self.beta1, self.beta2
            ));
        }
        if self.d_model < 2 {
            return fail(format!("d_model must be at least 2, got {}", self.d_model));
        }
        if self.ablation.calibrated() {
            if self.rank == 0 || self.rank >= self.d_model {
                return fail(format!(
                    "rank must satisfy 1 <= rank < d_model, got rank={} d_model={}",
                    self.rank, self.d_model
                ));
            }
            if self.hidden == 0 && !self.ablation.shared_params {
                return fail("hidden width must be at least 1".into());
            }
        }
        if benchmark.datasets.is_empty() {
            return fail("benchmark has no datasets".into());
        }
        for d in &benchmark.datasets {
            if d.train.len() < self.batch_size {
                return fail(format!(
                    "dataset {} has {} training samples, fewer than batch_size {}",
                    d.id,
                    d.train.len(),
                    self.batch_size
                ));
            }
        }
        self.sampler
            .validate(benchmark.datasets.len())
            .map_err(TrainError::Sampler)?;
        Ok(())
    }
}

/// Loss components of one step; `total = retrieval + β₁·ortho + β₂·reg`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retrieval: f64,
    pub ortho: f64,
    pub reg: f64,
    pub total: f64,
}

/// A batch loss assembled on a tape, ready for backward.
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub total_var: Var,
    pub mean_lambda: Option<f64>,
}

/// Builds the full objective for one single-task batch on `tape`:
/// InfoNCE over in-batch negatives plus batch-averaged adapter penalties.
pub fn total_loss(
    tape: &mut GradientTape,
    store: &ParamStore,
    model: &Model,
    batch: &[&Sample],
    config: &TrainConfig,
) -> Result<BatchLoss, NumericsError> {
    assert!(!batch.is_empty(), "batch must not be empty");
    let mut queries = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut orthos = Vec::new();
    let mut frobs = Vec::new();
    let mut lambda_sum = 0.0;
    for sample in batch {
        let (q, penalties) = model.encode_query_on_tape(tape, store, sample)?;
        queries.push(q);
        targets.push(model.encoder.encode_target_on_tape(tape, store, &sample.target_features)?);
        if let Some(p) = penalties {
            lambda_sum += tape.scalar_value(p.lambda);
            orthos.push(p.ortho);
            frobs.push(p.frob);
        }
    }
    let retrieval = model::info_nce_on_tape(tape, &queries, &targets, config.tau);
    let mut total = retrieval;
    let mut ortho_val = 0.0;
    let mut reg_val = 0.0;
    let calibrated = !orthos.is_empty();
    if calibrated {
        let inv = 1.0 / orthos.len() as f64;
        let ortho_cat = tape.concat(&orthos);
        let ortho_sum = tape.sum(ortho_cat);
        let ortho_mean = tape.scale(ortho_sum, inv);
        let frob_cat = tape.concat(&frobs);
        let frob_sum = tape.sum(frob_cat);
        let frob_mean = tape.scale(frob_sum, inv);
        ortho_val = tape.scalar_value(ortho_mean);
        reg_val = tape.scalar_value(frob_mean);
        let weighted_ortho = tape.scale(ortho_mean, config.beta1);
        let weighted_frob = tape.scale(frob_mean, config.beta2);
        let partial = tape.add(total, weighted_ortho);
        total = tape.add(partial, weighted_frob);
    }
    Ok(BatchLoss {
        breakdown: LossBreakdown {
            retrieval: tape.scalar_value(retrieval),
            ortho: ortho_val,
            reg: reg_val,
            total: tape.scalar_value(total),
        },
        total_var: total,
        mean_lambda: calibrated.then(|| lambda_sum / orthos.len() as f64),
    })
}

/// Everything a completed step reports upward.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// d_k: summed retrieval-bias gradient norms, measured before the update.
    pub difficulty: f64,
    pub mean_lambda: Option<f64>,
}

/// One optimization step over a single-task batch: loss, backward, difficulty
/// measurement (pre-update), parameter update, and EMA reporting.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    sampler: &mut TaskSampler,
    dataset_id: usize,
    batch: &[&Sample],
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    let mut tape = GradientTape::new(store);
    let loss = total_loss(&mut tape, store, model, batch, config)
        .map_err(|source| TrainError::Numerics { step, source })?;
    if !loss.breakdown.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let grads = tape
        .backward(loss.total_var, store)
        .map_err(|source| TrainError::Numerics { step, source })?;
    let (r_q, r_t) = model.encoder.retrieval_bias_ids();
    let difficulty = instantaneous_difficulty(grads.get(r_q).norm(), grads.get(r_t).norm())?;
    optimizer.step(store, &grads);
    if config.precision == Precision::F32 {
        round_store_to_f32(store);
    }
    sampler.report_difficulty(dataset_id, difficulty)?;
    Ok(StepOutcome {
        loss: loss.breakdown,
        difficulty,
        mean_lambda: loss.mean_lambda,
    })
}

/// One line of the sampler trace: who was picked, how hard it was, and the
/// full sampling state visible at that step.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub step: u64,
    pub epoch: usize,
    pub task: usize,
    pub difficulty: f64,
    pub loss: LossBreakdown,
    pub mean_lambda: Option<f64>,
    /// Smoothed difficulties G_k after this step's report, stats order.
    pub ema: Vec<f64>,
    /// Distribution the selection was drawn from.
    pub probabilities: Vec<f64>,
}

/// One line of the run log, emitted after each epoch.
#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Global steps completed by the end of this epoch.
    pub steps: u64,
    pub mean_loss: LossBreakdown,
    /// Smoothed difficulties at the epoch boundary.
    pub ema: Vec<f64>,
    pub val: MetricsReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Receives run events as they happen; file-writing lives behind this.
pub trait TrainObserver {
    fn on_step(&mut self, record: &TraceRecord) -> Result<(), TrainError> {
        let _ = record;
        Ok(())
    }
    fn on_epoch(&mut self, summary: &EpochSummary, trainer: &Trainer) -> Result<(), TrainError> {
        let _ = (summary, trainer);
        Ok(())
    }
    /// Last-gasp flush when the run dies mid-epoch; must not fail.
    fn on_abort(&mut self, trainer: &Trainer) {
        let _ = trainer;
    }
}

pub struct NoopObserver;
impl TrainObserver for NoopObserver {}

/// Deterministic within-task batch order: a shuffled index cycle that
/// reshuffles (from the shared shuffle stream) whenever a full batch no
/// longer fits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct BatchCycler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchCycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        debug_assert!(size <= self.order.len());
        if self.order.len() - self.cursor < size {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + size];
        self.cursor += size;
        out
    }
}

/// Owns all mutable training state; one instance is one run (possibly
/// checkpointed and resumed in the middle).
pub struct Trainer {
    config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub sampler: TaskSampler,
    cyclers: Vec<BatchCycler>,
    sampling_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    completed_epochs: usize,
    global_step: u64,
}

impl Trainer {
    pub fn new(benchmark: &Benchmark, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate(benchmark)?;
        let mut init_rng = seeds::stream(config.seed, "init");
        let mut store = ParamStore::new();
        let model = Model::init(
            &mut store,
            benchmark.feature_dim,
            benchmark.task_count(),
            config.d_model,
            config.rank,
            config.hidden,
            config.ablation,
            &mut init_rng,
        );
        let optimizer = Optimizer::new(&store, config.optimizer_config());
        let stats: Vec<TaskStats> = benchmark
            .datasets
            .iter()
            .map(|d| TaskStats::new(d.id, d.train.len()))
            .collect();
        let sampler = TaskSampler::new(stats, config.sampler)?;
        let mut shuffle_rng = seeds::stream(config.seed, "shuffle");
        let cyclers: Vec<BatchCycler> = benchmark
            .datasets
            .iter()
            .map(|d| BatchCycler::new(d.train.len(), &mut shuffle_rng))
            .collect();
        let sampling_rng = seeds::stream(config.seed, "sampling");
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            sampler,
            cyclers,
            sampling_rng,
            shuffle_rng,
            completed_epochs: 0,
            global_step: 0,
        })
    }

    /// Rebuilds a trainer mid-run. The benchmark must be the same one the
    /// checkpoint was trained on; shape-level mismatches are rejected.
    pub fn resume(ckpt: Checkpoint, benchmark: &Benchmark) -> Result<Self, TrainError> {
        let reject = |what: String| Err(TrainError::Checkpoint { what });
        if ckpt.sampler.task_count() != benchmark.datasets.len() {
            return reject(format!(
                "checkpoint has {} tasks, benchmark has {}",
                ckpt.sampler.task_count(),
                benchmark.datasets.len()
            ));
        }
        if ckpt.model.encoder.feature_dim != benchmark.feature_dim {
            return reject(format!(
                "checkpoint feature_dim {} vs benchmark {}",
                ckpt.model.encoder.feature_dim, benchmark.feature_dim
            ));
        }
        for (cycler, d) in ckpt.cyclers.iter().zip(benchmark.datasets.iter()) {
            if cycler.order.len() != d.train.len() {
                return reject(format!(
                    "checkpoint saw {} training samples for dataset {}, benchmark has {}",
                    cycler.order.len(),
                    d.id,
                    d.train.len()
                ));
            }
        }
        Ok(Self {
            config: ckpt.config,
            model: ckpt.model,
            store: ckpt.store,
            optimizer: ckpt.optimizer,
            sampler: ckpt.sampler,
            cyclers: ckpt.cyclers,
            sampling_rng: ckpt.sampling_rng,
            shuffle_rng: ckpt.shuffle_rng,
            completed_epochs: ckpt.completed_epochs,
            global_step: ckpt.global_step,
        })
    }

    pub fn snapshot(&self, config_hash: &str, partial: bool) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            config: self.config.clone(),
            model: self.model.clone(),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            sampler: self.sampler.clone(),
            cyclers: self.cyclers.clone(),
            sampling_rng: self.sampling_rng.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            completed_epochs: self.completed_epochs,
            global_step: self.global_step,
            partial,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn steps_per_epoch(benchmark: &Benchmark, batch_size: usize) -> usize {
        let total: usize = benchmark.datasets.iter().map(|d| d.train.len()).sum();
        (total / batch_size).max(1)
    }

    /// Runs every remaining epoch.
    pub fn train(
        &mut self,
        benchmark: &Benchmark,
        config_hash: &str,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainOutcome, TrainError> {
        let limit = self.config.epochs;
        self.train_until(benchmark, config_hash, observer, limit)
    }

    /// Runs epochs until `epoch_limit` (capped by the configured total);
    /// used to produce mid-run checkpoints on purpose.
    pub fn train_until(
        &mut self,
        benchmark: &Benchmark,
        config_hash: &str,
        observer: &mut dyn TrainObserver,
        epoch_limit: usize,
    ) -> Result<TrainOutcome, TrainError> {
        let mut trace = Vec::new();
        let mut epochs = Vec::new();
        match self.epoch_loop(benchmark, config_hash, observer, epoch_limit, &mut trace, &mut epochs)
        {
            Ok(()) => Ok(TrainOutcome { trace, epochs }),
            Err(e) => {
                observer.on_abort(self);
                Err(e)
            }
        }
    }

    fn epoch_loop(
        &mut self,
        benchmark: &Benchmark,
        config_hash: &str,
        observer: &mut dyn TrainObserver,
        epoch_limit: usize,
        trace: &mut Vec<TraceRecord>,
        epochs: &mut Vec<EpochSummary>,
    ) -> Result<(), TrainError> {
        let steps_per_epoch = Self::steps_per_epoch(benchmark, self.config.batch_size);
        let limit = epoch_limit.min(self.config.epochs);
        while self.completed_epochs < limit {
            let epoch = self.completed_epochs + 1;
            let mut sum = LossBreakdown::default();
            for _ in 0..steps_per_epoch {
                let (task_idx, dist) =
                    self.sampler
                        .sampler_step(epoch, None, &mut self.sampling_rng)?;
                let dataset_id = self.sampler.stats[task_idx].dataset_id;
                let dataset = &benchmark.datasets[task_idx];
                let indices: Vec<usize> = self.cyclers[task_idx]
                    .next_batch(self.config.batch_size, &mut self.shuffle_rng)
                    .to_vec();
                let batch: Vec<&Sample> = indices.iter().map(|&i| &dataset.train[i]).collect();
                let out = train_step(
                    &self.model,
                    &mut self.store,
                    &mut self.optimizer,
                    &mut self.sampler,
                    dataset_id,
                    &batch,
                    &self.config,
                    self.global_step,
                )?;
                sum.retrieval += out.loss.retrieval;
                sum.ortho += out.loss.ortho;
                sum.reg += out.loss.reg;
                sum.total += out.loss.total;
                let record = TraceRecord {
                    step: self.global_step,
                    epoch,
                    task: dataset_id,
                    difficulty: out.difficulty,
                    loss: out.loss,
                    mean_lambda: out.mean_lambda,
                    ema: self.sampler.difficulties(),
                    probabilities: dist.p,
                };
                observer.on_step(&record)?;
                trace.push(record);
                self.global_step += 1;
            }
            self.completed_epochs = epoch;
            let inv = 1.0 / steps_per_epoch as f64;
            let mean_loss = LossBreakdown {
                retrieval: sum.retrieval * inv,
                ortho: sum.ortho * inv,
                reg: sum.reg * inv,
                total: sum.total * inv,
            };
            let val = evaluator::evaluate(
                &self.model,
                &self.store,
                benchmark,
                Split::Val,
                &RunMeta {
                    seed: self.config.seed,
                    config_hash: config_hash.to_string(),
                    step: self.global_step,
                },
            )?;
            let summary = EpochSummary {
                epoch,
                steps: self.global_step,
                mean_loss,
                ema: self.sampler.difficulties(),
                val,
            };
            observer.on_epoch(&summary, self)?;
            epochs.push(summary);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{generate_benchmark, BenchmarkSpec, DatasetSpec, TaskFamily};
    use crate::numerics::UnitVector;

    fn tiny_spec(seed: u64) -> BenchmarkSpec {
        let ds = |family| DatasetSpec {
            family,
            train: 24,
            val: 6,
            test: 6,
            gallery: 16,
            latent_dim: 6,
            noise: 0.05,
        };
        BenchmarkSpec {
            name: "tiny".into(),
            seed,
            datasets: vec![
                ds(TaskFamily::Identity),
                ds(TaskFamily::Rotation),
                ds(TaskFamily::Attribute),
            ],
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 11,
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            tau: 0.1,
            d_model: 12,
            rank: 3,
            hidden: 10,
            ..TrainConfig::default()
        }
    }

    fn tiny_benchmark(seed: u64) -> Benchmark {
        generate_benchmark(&tiny_spec(seed)).unwrap()
    }

    #[test]
    fn loss_decomposition_identity_holds() {
        let benchmark = tiny_benchmark(1);
        let config = tiny_config();
        let trainer = Trainer::new(&benchmark, config.clone()).unwrap();
        let batch: Vec<&Sample> = benchmark.datasets[1].train[..8].iter().collect();
        let mut tape = GradientTape::new(&trainer.store);
        let loss = total_loss(&mut tape, &trainer.store, &trainer.model, &batch, &config).unwrap();
        let b = loss.breakdown;
        let recomposed = b.retrieval + config.beta1 * b.ortho + config.beta2 * b.reg;
        assert!((b.total - recomposed).abs() < 1e-9, "{} vs {recomposed}", b.total);
        assert!(b.retrieval >= 0.0 && b.ortho >= 0.0 && b.reg >= 0.0);
    }

    #[test]
    fn uncalibrated_weightless_loss_matches_reference_dual_encoder() {
        // Ablation baseline: no calibrator, β₁=β₂=0. The loss must equal an
        // independently coded dual-encoder InfoNCE that never touches the
        // calibrator: pure affine→tanh→bias→normalize per side.
        let benchmark = tiny_benchmark(2);
        let mut config = tiny_config();
        config.ablation = AblationFlags {
            use_calibrator: false,
            interp_mode: InterpMode::None,
            shared_params: false,
            detach_hypernet_input: false,
        };
        config.beta1 = 0.0;
        config.beta2 = 0.0;
        let trainer = Trainer::new(&benchmark, config.clone()).unwrap();
        let store = &trainer.store;
        let batch: Vec<&Sample> = benchmark.datasets[0].train[..8].iter().collect();

        let mut tape = GradientTape::new(store);
        let loss = total_loss(&mut tape, store, &trainer.model, &batch, &config).unwrap();

        // Reference path, written against raw arrays only.
        let w_q = store.get(store.find("encoder.w_q").unwrap());
        let b_q = store.get(store.find("encoder.b_q").unwrap());
        let r_q = store.get(store.find("encoder.r_q").unwrap());
        let w_t = store.get(store.find("encoder.w_t").unwrap());
        let b_t = store.get(store.find("encoder.b_t").unwrap());
        let r_t = store.get(store.find("encoder.r_t").unwrap());
        let embed = |w: &crate::numerics::DenseArray,
                     b: &crate::numerics::DenseArray,
                     r: &crate::numerics::DenseArray,
                     x: Vec<f64>| {
            let pre = w.matvec(&crate::numerics::DenseArray::vector(x));
            let act = pre.zip(b, |a, c| (a + c).tanh()).zip(r, |a, c| a + c);
            UnitVector::normalize(&act).unwrap()
        };
        let n = batch.len();
        let qs: Vec<UnitVector> = batch
            .iter()
            .map(|s| {
                let mut x = s.query_features.clone();
                let mut onehot = vec![0.0; benchmark.task_count()];
                onehot[s.instruction_id] = 1.0;
                x.extend_from_slice(&onehot);
                embed(w_q, b_q, r_q, x)
            })
            .collect();
        let ts: Vec<UnitVector> = batch
            .iter()
            .map(|s| embed(w_t, b_t, r_t, s.target_features.clone()))
            .collect();
        let mut reference = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| qs[i].as_array().dot(ts[j].as_array()) / config.tau)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            reference += lse - logits[i];
        }
        reference /= n as f64;
        assert!(
            (loss.breakdown.total - reference).abs() < 1e-12,
            "{} vs {reference}",
            loss.breakdown.total
        );
        assert_eq!(loss.breakdown.ortho, 0.0);
        assert_eq!(loss.breakdown.reg, 0.0);
    }

    #[test]
    fn zero_init_calibrator_penalties_are_rank_and_zero() {
        let benchmark = tiny_benchmark(3);
        let config = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = seeds::stream(config.seed, "init");
        let encoder = DualEncoder::init(
            &mut store,
            benchmark.feature_dim,
            benchmark.task_count(),
            config.d_model,
            &mut rng,
        );
        let net = crate::calibrator::HyperNetwork::init_zero(
            &mut store,
            config.d_model,
            config.rank,
            config.hidden,
        );
        let model = Model {
            encoder,
            calibrator: super::model::CalibratorKind::PerQuery(net),
            flags: AblationFlags::default(),
        };
        let batch: Vec<&Sample> = benchmark.datasets[0].train[..4].iter().collect();
        let mut tape = GradientTape::new(&store);
        let loss = total_loss(&mut tape, &store, &model, &batch, &config).unwrap();
        assert!((loss.breakdown.ortho - config.rank as f64).abs() < 1e-12);
        assert_eq!(loss.breakdown.reg, 0.0);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_but_measures_difficulty() {
        let benchmark = tiny_benchmark(4);
        let mut config = tiny_config();
        config.learning_rate = 0.0;
        let mut trainer = Trainer::new(&benchmark, config.clone()).unwrap();
        let before = trainer.store.clone();
        let batch: Vec<&Sample> = benchmark.datasets[2].train[..8].iter().collect();
        let out = train_step(
            &trainer.model,
            &mut trainer.store,
            &mut trainer.optimizer,
            &mut trainer.sampler,
            2,
            &batch,
            &config,
            0,
        )
        .unwrap();
        assert!(out.difficulty >= 0.0);
        assert!(out.difficulty > 0.0, "contrastive gradient should reach r_q/r_t");
        for id in before.ids() {
            assert_eq!(trainer.store.get(id), before.get(id), "{}", before.name(id));
        }
    }

    #[test]
    fn difficulty_matches_finite_difference_gradient_norms() {
        let benchmark = tiny_benchmark(5);
        let mut config = tiny_config();
        config.learning_rate = 0.0; // keep parameters fixed across probes
        let mut trainer = Trainer::new(&benchmark, config.clone()).unwrap();
        let batch: Vec<&Sample> = benchmark.datasets[1].train[..6].iter().collect();
        let analytic = train_step(
            &trainer.model,
            &mut trainer.store,
            &mut trainer.optimizer,
            &mut trainer.sampler,
            1,
            &batch,
            &config,
            0,
        )
        .unwrap()
        .difficulty;

        let model = trainer.model.clone();
        let mut store = trainer.store.clone();
        let loss_of = |store: &ParamStore| {
            let mut tape = GradientTape::new(store);
            total_loss(&mut tape, store, &model, &batch, &config)
                .unwrap()
                .breakdown
                .total
        };
        let h = 1e-5;
        let mut fd_total = 0.0;
        for name in ["encoder.r_q", "encoder.r_t"] {
            let id = store.find(name).unwrap();
            let dim = store.get(id).len();
            let mut sq = 0.0;
            for i in 0..dim {
                let orig = store.get(id).get(i);
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = loss_of(&store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = loss_of(&store);
                store.get_mut(id).data_mut()[i] = orig;
                let g = (up - down) / (2.0 * h);
                sq += g * g;
            }
            fd_total += sq.sqrt();
        }
        let rel = (analytic - fd_total).abs() / fd_total.max(1e-12);
        assert!(rel < 1e-3, "analytic {analytic} vs fd {fd_total}, rel {rel}");
    }

    #[test]
    fn full_pipeline_gradients_pass_finite_difference() {
        // Every parameter — encoder and hypernetwork — against central
        // differences on the complete objective, at reduced widths.
        let benchmark = tiny_benchmark(6);
        let config = TrainConfig {
            seed: 13,
            d_model: 8,
            rank: 2,
            hidden: 6,
            batch_size: 4,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(&benchmark, config.clone()).unwrap();
        // Jitter off the identity-preserving init: at that point the
        // interpolation path has an exactly-zero derivative, which finite
        // differences can only see as noise. A generic point exercises
        // every path with measurable gradients.
        let mut rng = seeds::stream(99, "fd-jitter");
        use rand::Rng;
        for id in trainer.store.ids().collect::<Vec<_>>() {
            for v in trainer.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let batch: Vec<&Sample> = benchmark.datasets[2].train[..4].iter().collect();
        let mut tape = GradientTape::new(&trainer.store);
        let loss = total_loss(&mut tape, &trainer.store, &trainer.model, &batch, &config).unwrap();
        let grads = tape.backward(loss.total_var, &trainer.store).unwrap();

        let model = trainer.model.clone();
        let mut store = trainer.store.clone();
        let report = crate::numerics::finite_difference_check(&mut store, &grads, 1e-5, |s| {
            let mut t = GradientTape::new(s);
            Ok(total_loss(&mut t, s, &model, &batch, &config)?
                .breakdown
                .total)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {} [{}]: analytic {} vs central {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.analytic_at_worst,
            report.central_at_worst
        );
    }

    #[test]
    fn warmup_epoch_cycles_tasks_round_robin() {
        let benchmark = tiny_benchmark(7);
        let config = tiny_config();
        let mut trainer = Trainer::new(&benchmark, config).unwrap();
        let outcome = trainer
            .train_until(&benchmark, "", &mut NoopObserver, 1)
            .unwrap();
        let first: Vec<usize> = outcome.trace.iter().map(|r| r.task).collect();
        for (i, task) in first.iter().enumerate() {
            assert_eq!(*task, i % 3, "warm-up order broken at step {i}");
        }
        assert_eq!(outcome.trace.len(), 72 / 8);
        assert_eq!(outcome.epochs.len(), 1);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let benchmark = tiny_benchmark(8);
        let run = || {
            let mut trainer = Trainer::new(&benchmark, tiny_config()).unwrap();
            let outcome = trainer.train(&benchmark, "", &mut NoopObserver).unwrap();
            (trainer, outcome)
        };
        let (t1, o1) = run();
        let (t2, o2) = run();
        for id in t1.store.ids() {
            assert_eq!(t1.store.get(id), t2.store.get(id), "{}", t1.store.name(id));
        }
        assert_eq!(o1.trace.len(), o2.trace.len());
        for (a, b) in o1.trace.iter().zip(o2.trace.iter()) {
            assert_eq!(a.task, b.task);
            assert_eq!(a.difficulty.to_bits(), b.difficulty.to_bits());
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        }
        let last1 = &o1.epochs.last().unwrap().val;
        let last2 = &o2.epochs.last().unwrap().val;
        assert_eq!(last1.to_json(), last2.to_json());
    }

    #[test]
    fn resume_reproduces_the_unbroken_run_exactly() {
        let benchmark = tiny_benchmark(9);
        let config = TrainConfig {
            epochs: 4,
            ..tiny_config()
        };

        let mut unbroken = Trainer::new(&benchmark, config.clone()).unwrap();
        unbroken.train(&benchmark, "", &mut NoopObserver).unwrap();

        let mut first_half = Trainer::new(&benchmark, config).unwrap();
        first_half
            .train_until(&benchmark, "", &mut NoopObserver, 2)
            .unwrap();
        let snap = first_half.snapshot("h", false);
        // Round-trip through the binary format to prove the file layer
        // preserves state exactly.
        let bytes = bincode::serialize(&snap).unwrap();
        let restored: Checkpoint = bincode::deserialize(&bytes).unwrap();
        assert_eq!(restored.completed_epochs, 2);
        let mut resumed = Trainer::resume(restored, &benchmark).unwrap();
        resumed.train(&benchmark, "", &mut NoopObserver).unwrap();

        assert_eq!(resumed.global_step(), unbroken.global_step());
        for id in unbroken.store.ids() {
            assert_eq!(
                unbroken.store.get(id),
                resumed.store.get(id),
                "{} diverged after resume",
                unbroken.store.name(id)
            );
        }
        assert_eq!(
            unbroken.sampler.difficulties(),
            resumed.sampler.difficulties()
        );
    }

    #[test]
    fn single_dataset_run_completes_with_degenerate_sampler() {
        let spec = BenchmarkSpec {
            name: "solo".into(),
            seed: 10,
            datasets: vec![DatasetSpec {
                family: TaskFamily::Rotation,
                train: 16,
                val: 4,
                test: 4,
                gallery: 10,
                latent_dim: 5,
                noise: 0.02,
            }],
        };
        let benchmark = generate_benchmark(&spec).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            epochs: 3,
            d_model: 8,
            rank: 2,
            hidden: 6,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(&benchmark, config).unwrap();
        let outcome = trainer.train(&benchmark, "", &mut NoopObserver).unwrap();
        assert!(outcome.trace.iter().all(|r| r.task == 0));
        assert!(outcome
            .trace
            .iter()
            .all(|r| (r.probabilities[0] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn nonfinite_parameters_abort_with_flush() {
        struct FlushSpy {
            aborted: bool,
        }
        impl TrainObserver for FlushSpy {
            fn on_abort(&mut self, trainer: &Trainer) {
                self.aborted = true;
                let snap = trainer.snapshot("spy", true);
                assert!(snap.partial);
            }
        }
        let benchmark = tiny_benchmark(12);
        let mut trainer = Trainer::new(&benchmark, tiny_config()).unwrap();
        let id = trainer.store.find("encoder.w_q").unwrap();
        trainer.store.get_mut(id).data_mut()[0] = f64::NAN;
        let mut spy = FlushSpy { aborted: false };
        let err = trainer.train(&benchmark, "", &mut spy).unwrap_err();
        assert!(
            matches!(err, TrainError::NonFiniteLoss { .. })
                || matches!(err, TrainError::Numerics { .. }),
            "{err}"
        );
        assert!(spy.aborted, "abort hook must fire");
    }

    #[test]
    fn invalid_configs_are_rejected_before_training() {
        let benchmark = tiny_benchmark(13);
        let bad = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = tiny_config();
            f(&mut c);
            Trainer::new(&benchmark, c).err()
        };
        assert!(matches!(
            bad(&|c| c.epochs = 0),
            Some(TrainError::InvalidConfig { .. })
        ));
        assert!(matches!(
            bad(&|c| c.tau = 0.0),
            Some(TrainError::InvalidConfig { .. })
        ));
        assert!(matches!(
            bad(&|c| c.batch_size = 1000),
            Some(TrainError::InvalidConfig { .. })
        ));
        assert!(matches!(
            bad(&|c| c.rank = c.d_model),
            Some(TrainError::InvalidConfig { .. })
        ));
        assert!(matches!(
            bad(&|c| c.sampler.epsilon = 0.9),
            Some(TrainError::Sampler(_))
        ));
    }

    #[test]
    fn f32_precision_keeps_parameters_representable() {
        let benchmark = tiny_benchmark(14);
        let config = TrainConfig {
            precision: Precision::F32,
            epochs: 1,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(&benchmark, config).unwrap();
        trainer.train(&benchmark, "", &mut NoopObserver).unwrap();
        for id in trainer.store.ids() {
            for v in trainer.store.get(id).iter() {
                assert_eq!(*v, *v as f32 as f64, "{}", trainer.store.name(id));
            }
        }
    }
}
