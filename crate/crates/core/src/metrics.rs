//! minADE / minFDE / miss rate over the top-K modes, and paired t-tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::decoder::Forecast;
use crate::error::{argument, Error, Result};
use crate::scenario::AgentState;
use crate::targets::future_positions;

/// A forecast misses when its best final displacement is strictly above this (meters).
pub const MISS_THRESHOLD: f64 = 2.0;
pub const DEFAULT_K_EVAL: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub ade_best: f64,
    pub fde_best: f64,
    pub missed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub n_scenarios: usize,
    pub per_scenario: Option<Vec<ScenarioEval>>,
}

/// Indices of the `k` modes with the highest weight; equal weights keep index order.
pub fn top_modes(pi: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]));
    idx.truncate(k);
    idx
}

/// Best ADE and best FDE over the top `k_eval` modes, chosen independently.
pub fn evaluate_one(fc: &Forecast, gt: &[AgentState], k_eval: usize) -> Result<ScenarioEval> {
    let t = fc.horizon();
    if gt.len() != t || t == 0 {
        return Err(argument(format!(
            "forecast horizon {t} does not match ground truth length {}",
            gt.len()
        )));
    }
    if fc.pi.len() != fc.modes() {
        return Err(argument("mixture weights do not match the mode count"));
    }
    let xy = future_positions(gt)?;
    let mut ade_best = f64::INFINITY;
    let mut fde_best = f64::INFINITY;
    for k in top_modes(&fc.pi, k_eval) {
        let mut sum = 0.0;
        let mut last = 0.0;
        for (step, p) in xy.iter().enumerate() {
            let d = (fc.mu.get(k, step, 0) - p[0]).hypot(fc.mu.get(k, step, 1) - p[1]);
            sum += d;
            last = d;
        }
        ade_best = ade_best.min(sum / t as f64);
        fde_best = fde_best.min(last);
    }
    if !(ade_best.is_finite() && fde_best.is_finite()) {
        return Err(Error::Numeric("non-finite displacement error".into()));
    }
    Ok(ScenarioEval {
        ade_best,
        fde_best,
        missed: fde_best > MISS_THRESHOLD,
    })
}

pub fn evaluate(
    forecasts: &[Forecast],
    gts: &[Vec<AgentState>],
    k_eval: usize,
) -> Result<EvalResult> {
    if forecasts.len() != gts.len() {
        return Err(argument(format!(
            "{} forecasts for {} ground truths",
            forecasts.len(),
            gts.len()
        )));
    }
    if forecasts.is_empty() || k_eval == 0 {
        return Err(argument("need at least one scenario and k_eval >= 1"));
    }
    let per: Vec<ScenarioEval> = forecasts
        .iter()
        .zip(gts)
        .map(|(f, g)| evaluate_one(f, g, k_eval))
        .collect::<Result<_>>()?;
    Ok(aggregate(per))
}

/// Means over per-scenario results.
pub fn aggregate(per: Vec<ScenarioEval>) -> EvalResult {
    let n = per.len() as f64;
    EvalResult {
        min_ade: per.iter().map(|s| s.ade_best).sum::<f64>() / n,
        min_fde: per.iter().map(|s| s.fde_best).sum::<f64>() / n,
        miss_rate: per.iter().filter(|s| s.missed).count() as f64 / n,
        n_scenarios: per.len(),
        per_scenario: Some(per),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(argument(format!(
            "paired samples need equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let n = d.len() as f64;
    let df = d.len() - 1;
    if d.iter().all(|x| *x == 0.0) {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df,
            mean_diff: 0.0,
        });
    }
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= f64::EPSILON * mean.abs().max(1e-300) * mean.abs() {
        return Err(Error::Degenerate(
            "differences have zero variance; the t statistic is undefined".into(),
        ));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Numeric(format!("student t: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        mean_diff: mean,
    })
}
