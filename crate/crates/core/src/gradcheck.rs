//! Central finite-difference checks of model parameter gradients.

use tsd_autograd::finite_diff::relative_error;
use tsd_autograd::{Graph, Var};

use crate::error::{Error, Result};
use crate::model::{ModelBound, TsdModel, STORE_PREFIXES};

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    /// `<store>.<tensor>[<index>]`
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Entry with the largest relative error.
    pub worst: Option<GradEntry>,
    pub failures: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

/// Compares the gradient of a scalar objective with respect to every model
/// parameter against central differences with step `step`.
///
/// `build` records the objective for the given model on the graph it is
/// handed and returns it with the bound parameters and the scalar root. The
/// perturbed evaluations pin every detached value to the unperturbed one, so
/// stopped paths stay constant exactly as they do for the analytic gradient.
/// An entry fails when `|a - n| / max(|a|, |n|, floor)` exceeds `tol`.
pub fn check_params<F>(
    model: &TsdModel,
    mut build: F,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradReport>
where
    F: FnMut(&TsdModel, Graph) -> Result<(Graph, ModelBound, Var)>,
{
    let (g, bound, root) = build(model, Graph::new())?;
    let mut grads = g.backward(root);
    let analytic: Vec<Option<Vec<f64>>> = bound.vars().map(|v| grads.take(v)).collect();
    let pinned = g.detached_values();
    drop(g);

    let mut probe = model.clone();
    let mut report = GradReport::default();
    let mut flat = 0;
    for si in 0..3 {
        let names: Vec<String> = probe.stores()[si]
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        for (ti, name) in names.iter().enumerate() {
            let len = probe.stores()[si]
                .iter()
                .nth(ti)
                .map(|(_, t)| t.len())
                .unwrap_or(0);
            let a_grad = analytic.get(flat).cloned().flatten();
            flat += 1;
            for i in 0..len {
                let orig = value_at(&probe, si, ti, i);
                let mut eval = |v: f64, probe: &mut TsdModel| -> Result<f64> {
                    set_at(probe, si, ti, i, v);
                    let (g, _, root) = build(probe, Graph::with_pinned_detach(pinned.clone()))?;
                    Ok(g.value(root).data()[0])
                };
                let hi = eval(orig + step, &mut probe)?;
                let lo = eval(orig - step, &mut probe)?;
                set_at(&mut probe, si, ti, i, orig);
                let numeric = (hi - lo) / (2.0 * step);
                if !numeric.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite difference at {name}[{i}]"
                    )));
                }
                let a = a_grad.as_ref().map_or(0.0, |g| g[i]);
                let entry = GradEntry {
                    name: format!("{}.{name}[{i}]", STORE_PREFIXES[si]),
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric, floor),
                };
                report.checked += 1;
                if entry.rel_error > tol {
                    report.failures.push(entry.clone());
                }
                if report
                    .worst
                    .as_ref()
                    .is_none_or(|w| entry.rel_error > w.rel_error)
                {
                    report.worst = Some(entry);
                }
            }
        }
    }
    Ok(report)
}

fn value_at(m: &TsdModel, store: usize, tensor: usize, i: usize) -> f64 {
    m.stores()[store]
        .iter()
        .nth(tensor)
        .expect("tensor index")
        .1
        .data()[i]
}

fn set_at(m: &mut TsdModel, store: usize, tensor: usize, i: usize, v: f64) {
    let stores = m.stores_mut();
    stores[store]
        .iter_mut()
        .nth(tensor)
        .expect("tensor index")
        .1
        .data_mut()[i] = v;
}
