//! Central finite-difference check of analytic gradients.

use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams, ParamBlock};

/// Denominator floor of the relative error, so that coordinates with a
/// vanishing gradient are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `path[index]` of the coordinate with the largest error.
    pub worst_path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub eps: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `gradient(params)` with `(value(θ+eps) - value(θ-eps)) / 2eps` on
/// every coordinate. `eps` is clamped into [`EPS_RANGE`].
pub fn grad_check_at(
    params: &ModelParams,
    value: impl Fn(&ModelParams) -> f64,
    gradient: impl Fn(&ModelParams) -> Gradients,
    eps: f64,
) -> GradCheckReport {
    let eps = eps.clamp(EPS_RANGE.0, EPS_RANGE.1);
    let analytic = gradient(params);
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let flat_grad: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        eps,
    };
    let mut probe = params.clone();
    let mut k = 0;
    for (t, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let original = probe.tensors_mut()[t][i];
            probe.tensors_mut()[t][i] = original + eps;
            let plus = value(&probe);
            probe.tensors_mut()[t][i] = original - eps;
            let minus = value(&probe);
            probe.tensors_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = flat_grad[k];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_path = format!("{name}[{i}]");
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
            k += 1;
        }
    }
    report
}

/// Builds a model from `seed` and checks the objective's gradient at it.
pub fn grad_check(
    build: impl Fn(u64) -> ModelParams,
    value: impl Fn(&ModelParams) -> f64,
    gradient: impl Fn(&ModelParams) -> Gradients,
    seed: u64,
    eps: f64,
) -> GradCheckReport {
    grad_check_at(&build(seed), value, gradient, eps)
}
