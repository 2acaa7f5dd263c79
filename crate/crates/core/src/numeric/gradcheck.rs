//! Central finite-difference check of tape adjoints.

use super::graph::{forward_backward, forward_value, Graph, Var};
use super::params::ParamStore;
use crate::error::NumericError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    /// `max |a − f| / max(|a|, |f|, 1e-8)` over the checked entries.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `build` against central differences with step
/// `h` (clamped to `[1e-7, 1e-3]`). `max_entries` caps the entries probed per
/// parameter; larger tensors are probed at evenly spaced positions. Failures
/// of the loss itself are reported as infinite error, never raised.
pub fn grad_check<F>(
    params: &ParamStore,
    build: F,
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Vec<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, NumericError>,
{
    let h = h.clamp(1e-7, 1e-3);
    let analytic = match forward_backward(params, &build) {
        Ok((_, g)) => Some(g),
        Err(_) => None,
    };
    let mut probe = params.clone();
    let mut reports = Vec::new();
    for name in params.names() {
        let n = params.value(name).map_or(0, |t| t.len());
        let Some(grads) = analytic.as_ref() else {
            reports.push(failed(name, tol));
            continue;
        };
        let g = grads.get(name).expect("gradient for every parameter").data();
        let positions: Vec<usize> = match max_entries {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0usize);
        let mut ok = true;
        for &i in &positions {
            let orig = probe.value(name).unwrap().data()[i];
            probe.value_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = forward_value(&probe, &build);
            probe.value_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = forward_value(&probe, &build);
            probe.value_mut(name).unwrap().data_mut()[i] = orig;
            let (Ok(plus), Ok(minus)) = (plus, minus) else {
                ok = false;
                worst = (f64::INFINITY, i);
                break;
            };
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(g[i], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        reports.push(GradCheckReport {
            param: name.to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            checked: positions.len(),
            tol,
            passed: ok && worst.0 <= tol,
        });
    }
    reports
}

fn failed(name: &str, tol: f64) -> GradCheckReport {
    GradCheckReport {
        param: name.to_string(),
        max_rel_error: f64::INFINITY,
        worst_index: 0,
        checked: 0,
        tol,
        passed: false,
    }
}
