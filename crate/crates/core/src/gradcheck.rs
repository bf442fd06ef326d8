//! Finite-difference audit of every differentiable operation, plus the
//! full-objective check at reduced widths.
//!
//! Each check builds a tiny scenario around one operation, composes it to a
//! scalar through a weighted readout (so adjoints are non-uniform), runs
//! backward, and compares against central differences coordinate by
//! coordinate. The harness can plant a deliberately wrong gradient for one
//! named operation to prove the comparison actually bites.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::benchgen::{generate_benchmark, BenchmarkSpec, DatasetSpec, Sample, TaskFamily};
use crate::calibrator::{frob_loss_on_tape, ortho_loss_on_tape, proposal_on_tape, TapeAdaptation};
use crate::numerics::{
    finite_difference_check, DenseArray, GradientTape, NumericsError, ParamStore, Var,
};
use crate::seeds;
use crate::trainer::{total_loss, TrainConfig, Trainer};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub seconds: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub fd_step: f64,
    /// Name of the operation whose analytic gradient was deliberately
    /// corrupted, when running the harness's negative control.
    pub corrupt_op: Option<String>,
    pub checks: Vec<OpCheck>,
    pub elapsed_seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing_ops(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: h={:.0e}, tolerance={:.0e}",
            self.fd_step, self.tolerance
        )?;
        if let Some(op) = &self.corrupt_op {
            writeln!(f, "negative control: corrupted adjoint of '{op}'")?;
        }
        writeln!(
            f,
            "{:<14} {:>7} {:>13} {:>9}  {}",
            "op", "coords", "max_rel_err", "seconds", "status"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<14} {:>7} {:>13.3e} {:>9.3} {}",
                c.op,
                c.coords,
                c.max_rel_err,
                c.seconds,
                if c.passed { "  pass" } else { "  FAIL" }
            )?;
        }
        writeln!(
            f,
            "total {:.3}s — {}",
            self.elapsed_seconds,
            if self.passed() { "all pass" } else { "FAILURES present" }
        )
    }
}

/// One scenario: a parameter store and a tape program ending in a scalar.
struct Scenario<'a> {
    store: ParamStore,
    build: Box<dyn Fn(&mut GradientTape, &ParamStore) -> Result<Var, NumericsError> + 'a>,
}

fn run_check(name: &str, scenario: Scenario<'_>, corrupt: bool) -> OpCheck {
    let started = Instant::now();
    let Scenario { mut store, build } = scenario;
    let mut tape = GradientTape::new(&store);
    let loss = build(&mut tape, &store).expect("scenario builds");
    let grads = tape.backward(loss, &store).expect("scenario differentiates");
    let grads = if corrupt { grads.scaled(1.01) } else { grads };
    let report = finite_difference_check(&mut store, &grads, FD_STEP, |s| {
        let mut t = GradientTape::new(s);
        let out = build(&mut t, s)?;
        Ok(t.scalar_value(out))
    })
    .expect("finite differences evaluate");
    OpCheck {
        op: name.to_string(),
        coords: report.coords_checked,
        max_rel_err: report.max_rel_err,
        seconds: started.elapsed().as_secs_f64(),
        passed: report.max_rel_err < TOLERANCE,
    }
}

fn filled(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> DenseArray {
    let mut a = DenseArray::zeros(shape);
    for v in a.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    a
}

/// Benchmark and configuration for the reduced-width full-objective check.
pub fn full_loss_fixture() -> (crate::benchgen::Benchmark, TrainConfig) {
    let spec = BenchmarkSpec {
        name: "gradcheck".into(),
        seed: 170,
        datasets: vec![
            DatasetSpec {
                family: TaskFamily::Rotation,
                train: 8,
                val: 2,
                test: 2,
                gallery: 6,
                latent_dim: 8,
                noise: 0.05,
            },
            DatasetSpec {
                family: TaskFamily::Attribute,
                train: 8,
                val: 2,
                test: 2,
                gallery: 6,
                latent_dim: 8,
                noise: 0.05,
            },
        ],
    };
    let benchmark = generate_benchmark(&spec).expect("fixture spec is valid");
    let config = TrainConfig {
        seed: 170,
        batch_size: 8,
        d_model: 16,
        rank: 4,
        hidden: 16,
        ..TrainConfig::default()
    };
    (benchmark, config)
}

/// The audited operation names, in report order.
pub fn op_names() -> Vec<&'static str> {
    vec![
        "add", "sub", "mul", "div", "affine", "mul_scalar", "matmul", "matvec", "vecmat",
        "transpose", "concat", "slice", "reshape", "tanh", "sigmoid", "exp", "ln", "sin", "sum",
        "dot", "normalize", "logsumexp", "angle", "slerp", "ortho_loss", "frob_loss", "proposal",
        "info_nce", "full_loss",
    ]
}

/// Runs the whole audit. `corrupt_op` plants a wrong gradient in the named
/// check; the resulting report must flag exactly that operation.
pub fn run_gradcheck(corrupt_op: Option<&str>) -> GradcheckReport {
    if let Some(op) = corrupt_op {
        assert!(
            op_names().contains(&op),
            "unknown op '{op}'; expected one of {:?}",
            op_names()
        );
    }
    let started = Instant::now();
    let mut rng = seeds::stream(4242, "gradcheck");
    let mut checks = Vec::new();
    let corrupt = |name: &str| corrupt_op == Some(name);

    // Elementwise pairs read out against a fixed weight vector.
    let pair_check = |rng: &mut rand_chacha::ChaCha8Rng,
                      lo_b: f64,
                      hi_b: f64,
                      f: fn(&mut GradientTape, Var, Var) -> Var| {
        let mut store = ParamStore::new();
        store.add("a", filled(rng, vec![5], -1.0, 1.0));
        store.add("b", filled(rng, vec![5], lo_b, hi_b));
        let w = filled(rng, vec![5], -1.0, 1.0);
        Scenario {
            store,
            build: Box::new(move |tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                let out = f(tape, a, b);
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        }
    };

    checks.push(run_check(
        "add",
        pair_check(&mut rng, -1.0, 1.0, |t, a, b| t.add(a, b)),
        corrupt("add"),
    ));
    checks.push(run_check(
        "sub",
        pair_check(&mut rng, -1.0, 1.0, |t, a, b| t.sub(a, b)),
        corrupt("sub"),
    ));
    checks.push(run_check(
        "mul",
        pair_check(&mut rng, -1.0, 1.0, |t, a, b| t.mul(a, b)),
        corrupt("mul"),
    ));
    checks.push(run_check(
        "div",
        pair_check(&mut rng, 0.5, 1.5, |t, a, b| t.div(a, b)),
        corrupt("div"),
    ));

    // Unary elementwise maps.
    let unary_check = |rng: &mut rand_chacha::ChaCha8Rng,
                       lo: f64,
                       hi: f64,
                       f: fn(&mut GradientTape, Var) -> Var| {
        let mut store = ParamStore::new();
        store.add("x", filled(rng, vec![6], lo, hi));
        let w = filled(rng, vec![6], -1.0, 1.0);
        Scenario {
            store,
            build: Box::new(move |tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                let out = f(tape, x);
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        }
    };
    checks.push(run_check(
        "affine",
        unary_check(&mut rng, -1.0, 1.0, |t, x| t.affine(x, 1.7, -0.3)),
        corrupt("affine"),
    ));
    checks.push(run_check(
        "tanh",
        unary_check(&mut rng, -2.0, 2.0, |t, x| t.tanh(x)),
        corrupt("tanh"),
    ));
    checks.push(run_check(
        "sigmoid",
        unary_check(&mut rng, -2.0, 2.0, |t, x| t.sigmoid(x)),
        corrupt("sigmoid"),
    ));
    checks.push(run_check(
        "exp",
        unary_check(&mut rng, -1.0, 1.0, |t, x| t.exp(x)),
        corrupt("exp"),
    ));
    checks.push(run_check(
        "ln",
        unary_check(&mut rng, 0.5, 2.0, |t, x| t.ln(x)),
        corrupt("ln"),
    ));
    checks.push(run_check(
        "sin",
        unary_check(&mut rng, -2.0, 2.0, |t, x| t.sin(x)),
        corrupt("sin"),
    ));
    checks.push(run_check(
        "normalize",
        unary_check(&mut rng, 0.3, 1.3, |t, x| t.normalize(x).unwrap()),
        corrupt("normalize"),
    ));

    // mul_scalar: vector scaled by a scalar parameter.
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![5], -1.0, 1.0));
        store.add("s", filled(&mut rng, vec![1], 0.2, 1.2));
        let w = filled(&mut rng, vec![5], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                let k = tape.param(s, s.find("s").unwrap());
                let out = tape.mul_scalar(x, k);
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("mul_scalar", sc, corrupt("mul_scalar")));
    }

    // Matrix ops read out against a weight of matching shape.
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![3, 4], -1.0, 1.0));
        store.add("b", filled(&mut rng, vec![4, 2], -1.0, 1.0));
        let w = filled(&mut rng, vec![3, 2], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                let out = tape.matmul(a, b);
                let c = tape.constant(w.clone());
                let prod = tape.mul(out, c);
                Ok(tape.sum(prod))
            }),
        };
        checks.push(run_check("matmul", sc, corrupt("matmul")));
    }
    {
        let mut store = ParamStore::new();
        store.add("w", filled(&mut rng, vec![4, 3], -1.0, 1.0));
        store.add("x", filled(&mut rng, vec![3], -1.0, 1.0));
        let c0 = filled(&mut rng, vec![4], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let w = tape.param(s, s.find("w").unwrap());
                let x = tape.param(s, s.find("x").unwrap());
                let out = tape.matvec(w, x);
                let c = tape.constant(c0.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("matvec", sc, corrupt("matvec")));
    }
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![4], -1.0, 1.0));
        store.add("w", filled(&mut rng, vec![4, 3], -1.0, 1.0));
        let c0 = filled(&mut rng, vec![3], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                let w = tape.param(s, s.find("w").unwrap());
                let out = tape.vecmat(x, w);
                let c = tape.constant(c0.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("vecmat", sc, corrupt("vecmat")));
    }
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![3, 4], -1.0, 1.0));
        let w = filled(&mut rng, vec![4, 3], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let out = tape.transpose(a);
                let c = tape.constant(w.clone());
                let prod = tape.mul(out, c);
                Ok(tape.sum(prod))
            }),
        };
        checks.push(run_check("transpose", sc, corrupt("transpose")));
    }

    // Structure ops.
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![3], -1.0, 1.0));
        store.add("b", filled(&mut rng, vec![2], -1.0, 1.0));
        let w = filled(&mut rng, vec![5], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                let out = tape.concat(&[a, b]);
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("concat", sc, corrupt("concat")));
    }
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![6], -1.0, 1.0));
        let w = filled(&mut rng, vec![3], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                let out = tape.slice(x, 1, 3);
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("slice", sc, corrupt("slice")));
    }
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![6], -1.0, 1.0));
        let w = filled(&mut rng, vec![2, 3], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                let out = tape.reshape(x, vec![2, 3]);
                let c = tape.constant(w.clone());
                let prod = tape.mul(out, c);
                Ok(tape.sum(prod))
            }),
        };
        checks.push(run_check("reshape", sc, corrupt("reshape")));
    }

    // Reductions.
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![6], -1.0, 1.0));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                Ok(tape.sum(x))
            }),
        };
        checks.push(run_check("sum", sc, corrupt("sum")));
    }
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![6], -1.0, 1.0));
        store.add("b", filled(&mut rng, vec![6], -1.0, 1.0));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                Ok(tape.dot(a, b))
            }),
        };
        checks.push(run_check("dot", sc, corrupt("dot")));
    }
    {
        let mut store = ParamStore::new();
        store.add("x", filled(&mut rng, vec![6], -2.0, 2.0));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let x = tape.param(s, s.find("x").unwrap());
                Ok(tape.logsumexp(x))
            }),
        };
        checks.push(run_check("logsumexp", sc, corrupt("logsumexp")));
    }

    // Sphere geometry.
    {
        let mut store = ParamStore::new();
        store.add("u", filled(&mut rng, vec![6], -1.0, 1.0));
        store.add("v", filled(&mut rng, vec![6], -1.0, 1.0));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let u = tape.param(s, s.find("u").unwrap());
                let v = tape.param(s, s.find("v").unwrap());
                let un = tape.normalize(u)?;
                let vn = tape.normalize(v)?;
                Ok(tape.angle(un, vn))
            }),
        };
        checks.push(run_check("angle", sc, corrupt("angle")));
    }
    {
        let mut store = ParamStore::new();
        store.add("u", filled(&mut rng, vec![6], -1.0, 1.0));
        store.add("v", filled(&mut rng, vec![6], -1.0, 1.0));
        store.add("s", filled(&mut rng, vec![1], -0.8, 0.8));
        let w = filled(&mut rng, vec![6], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let u = tape.param(s, s.find("u").unwrap());
                let v = tape.param(s, s.find("v").unwrap());
                let raw = tape.param(s, s.find("s").unwrap());
                let un = tape.normalize(u)?;
                let vn = tape.normalize(v)?;
                let lambda = tape.sigmoid(raw);
                let out = tape.slerp(un, vn, lambda)?;
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("slerp", sc, corrupt("slerp")));
    }

    // Adapter penalties and the proposal map.
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![6, 3], -0.8, 0.8));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                Ok(ortho_loss_on_tape(tape, a, 3))
            }),
        };
        checks.push(run_check("ortho_loss", sc, corrupt("ortho_loss")));
    }
    {
        let mut store = ParamStore::new();
        store.add("a", filled(&mut rng, vec![6, 3], -0.8, 0.8));
        store.add("b", filled(&mut rng, vec![3, 6], -0.8, 0.8));
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                Ok(frob_loss_on_tape(tape, a, b))
            }),
        };
        checks.push(run_check("frob_loss", sc, corrupt("frob_loss")));
    }
    {
        let mut store = ParamStore::new();
        store.add("q", filled(&mut rng, vec![6], -1.0, 1.0));
        store.add("a", filled(&mut rng, vec![6, 2], -0.8, 0.8));
        store.add("b", filled(&mut rng, vec![2, 6], -0.8, 0.8));
        let w = filled(&mut rng, vec![6], -1.0, 1.0);
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                let q = tape.param(s, s.find("q").unwrap());
                let a = tape.param(s, s.find("a").unwrap());
                let b = tape.param(s, s.find("b").unwrap());
                let q0 = tape.normalize(q)?;
                let lambda = tape.constant(DenseArray::scalar(0.5));
                let adapt = TapeAdaptation { a, b, lambda };
                let out = proposal_on_tape(tape, q0, &adapt)?;
                let c = tape.constant(w.clone());
                Ok(tape.dot(out, c))
            }),
        };
        checks.push(run_check("proposal", sc, corrupt("proposal")));
    }

    // InfoNCE over four learnable pairs.
    {
        let mut store = ParamStore::new();
        for i in 0..4 {
            store.add(&format!("q{i}"), filled(&mut rng, vec![5], -1.0, 1.0));
            store.add(&format!("t{i}"), filled(&mut rng, vec![5], -1.0, 1.0));
        }
        let sc = Scenario {
            store,
            build: Box::new(|tape, s| {
                let mut qs = Vec::new();
                let mut ts = Vec::new();
                for i in 0..4 {
                    let q = tape.param(s, s.find(&format!("q{i}")).unwrap());
                    let t = tape.param(s, s.find(&format!("t{i}")).unwrap());
                    qs.push(tape.normalize(q)?);
                    ts.push(tape.normalize(t)?);
                }
                Ok(crate::trainer::model::info_nce_on_tape(tape, &qs, &ts, 0.2))
            }),
        };
        checks.push(run_check("info_nce", sc, corrupt("info_nce")));
    }

    // The complete objective at reduced widths, at a generic parameter point.
    {
        let (benchmark, config) = full_loss_fixture();
        let trainer = Trainer::new(&benchmark, config.clone()).expect("fixture config is valid");
        let mut store = trainer.store.clone();
        let mut jitter = seeds::stream(4242, "gradcheck/jitter");
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += jitter.random_range(-0.1..0.1);
            }
        }
        let model = trainer.model.clone();
        let batch: Vec<&Sample> = benchmark.datasets[0].train[..config.batch_size]
            .iter()
            .collect();
        let sc = Scenario {
            store,
            build: Box::new(move |tape, s| {
                Ok(total_loss(tape, s, &model, &batch, &config)?.total_var)
            }),
        };
        checks.push(run_check("full_loss", sc, corrupt("full_loss")));
    }

    GradcheckReport {
        tolerance: TOLERANCE,
        fd_step: FD_STEP,
        corrupt_op: corrupt_op.map(str::to_string),
        checks,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
}
