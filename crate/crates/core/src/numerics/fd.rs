//! Central finite differences against analytic gradients.

use super::tape::{Gradients, ParamStore};
use super::NumericsError;

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub central_at_worst: f64,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares `analytic` against central differences of `f` over every scalar
/// coordinate in `store`.
///
/// Each coordinate is perturbed by ±`h` and restored afterwards. The relative
/// error uses `max(|analytic|, |central|, 1e-8)` so near-zero pairs do not
/// inflate the score. Probes that return non-finite values abort the sweep.
pub fn finite_difference_check(
    store: &mut ParamStore,
    analytic: &Gradients,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64, NumericsError>,
) -> Result<FdReport, NumericsError> {
    assert!(h > 0.0, "step size must be positive");
    let mut report = FdReport {
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        central_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut err_sum = 0.0;

    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).get(i);

            store.get_mut(id).data_mut()[i] = orig + h;
            let up = f(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = f(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFiniteValue {
                    context: "finite difference probe",
                });
            }

            let central = (up - down) / (2.0 * h);
            let a = analytic.get(id).get(i);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            err_sum += rel;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.central_at_worst = central;
            }
        }
    }
    if report.coords_checked > 0 {
        report.mean_rel_err = err_sum / report.coords_checked as f64;
    }
    Ok(report)
}
