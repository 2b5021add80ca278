//! Central finite-difference verification of reverse-mode gradients.

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (across all checked tensors) of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Default)]
struct Tracker {
    worst: f64,
    index: usize,
    analytic: f64,
    numeric: f64,
    checked: usize,
}

impl Tracker {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        let e = if e.is_nan() { f64::INFINITY } else { e };
        if self.checked == 0 || e > self.worst {
            self.worst = e;
            self.index = self.checked;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }

    fn report(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.worst,
            worst_index: self.index,
            analytic: self.analytic,
            numeric: self.numeric,
            checked: self.checked,
            tol,
            passed: self.worst < tol,
        }
    }
}

/// Checks `d f(x) / dx` for a function of one array.
pub fn grad_check<F>(f: F, x: &Array, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Array| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape()));

    let mut tracker = Tracker::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        tracker.record(analytic.data()[i], (plus - minus) / (2.0 * FD_STEP));
    }
    Ok(tracker.report(tol))
}

/// Checks the gradient of a scalar function with respect to every entry of
/// every parameter in `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Array> = store
        .iter()
        .map(|(_, p)| Array::zeros(p.value.shape()))
        .collect();
    for (id, grad) in grads.param_grads() {
        analytic[id.index()] = grad.clone();
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut probe = store.clone();
    let mut tracker = Tracker::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            tracker.record(
                analytic[id.index()].data()[i],
                (plus - minus) / (2.0 * FD_STEP),
            );
        }
    }
    Ok(tracker.report(tol))
}
