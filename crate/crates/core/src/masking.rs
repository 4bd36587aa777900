//! Partial-observation patterns: random frame drops and continuous prefix drops.
//!
//! The last observation step (t = 0, index `T_obs - 1`) is never masked: the
//! focal frame is anchored on it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::scenario::{AgentState, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    None,
    Random,
    Continuous,
}

/// Per-step validity flags; `true` means observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationMask {
    pub focal: Vec<bool>,
    pub neighbors: Vec<Vec<bool>>,
    pub pattern: MaskPattern,
    /// Mask rate for `Random`, observed length for `Continuous`, 0 for `None`.
    pub parameter: f64,
}

/// A mask schedule as written in configs:
/// `{"pattern":"random","rate":0.4}` or `{"pattern":"continuous","observed_len":5}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum MaskSpec {
    None,
    Random { rate: f64 },
    Continuous { observed_len: usize },
}

impl MaskSpec {
    pub fn build(&self, t_obs: usize, num_neighbors: usize, seed: u64) -> Result<ObservationMask> {
        match *self {
            MaskSpec::None => Ok(ObservationMask::full(t_obs, num_neighbors)),
            MaskSpec::Random { rate } => random_mask(t_obs, num_neighbors, rate, seed),
            MaskSpec::Continuous { observed_len } => {
                continuous_mask(t_obs, num_neighbors, observed_len)
            }
        }
    }

    pub fn pattern(&self) -> MaskPattern {
        match self {
            MaskSpec::None => MaskPattern::None,
            MaskSpec::Random { .. } => MaskPattern::Random,
            MaskSpec::Continuous { .. } => MaskPattern::Continuous,
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            MaskSpec::None => 0.0,
            MaskSpec::Random { rate } => rate,
            MaskSpec::Continuous { observed_len } => observed_len as f64,
        }
    }
}

impl ObservationMask {
    /// Everything observed.
    pub fn full(t_obs: usize, num_neighbors: usize) -> Self {
        Self {
            focal: vec![true; t_obs],
            neighbors: vec![vec![true; t_obs]; num_neighbors],
            pattern: MaskPattern::None,
            parameter: 0.0,
        }
    }

    pub fn t_obs(&self) -> usize {
        self.focal.len()
    }

    pub fn masked_focal_steps(&self) -> usize {
        self.focal.iter().filter(|v| !**v).count()
    }
}

/// Number of randomly dropped steps for `t_obs` steps at `rate`.
///
/// The product is snapped to 1e-9 first so that decimal rates round half up
/// as written (0.7 * 45 is 31.4999... in binary).
pub fn random_mask_count(t_obs: usize, rate: f64) -> usize {
    let x = rate * t_obs.saturating_sub(1) as f64;
    ((x * 1e9).round() / 1e9).round() as usize
}

fn random_row(t_obs: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut row = vec![true; t_obs];
    if count > 0 {
        for i in sample(rng, t_obs - 1, count) {
            row[i] = false;
        }
    }
    row
}

/// Drops `round(rate * (t_obs - 1))` of the first `t_obs - 1` steps, chosen
/// uniformly without replacement, independently for the focal agent and each
/// neighbor. Deterministic in `seed`.
pub fn random_mask(
    t_obs: usize,
    num_neighbors: usize,
    rate: f64,
    seed: u64,
) -> Result<ObservationMask> {
    if t_obs == 0 {
        return Err(argument("t_obs must be >= 1"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(argument(format!(
            "mask rate must lie in [0, 1), got {rate}"
        )));
    }
    let count = random_mask_count(t_obs, rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = random_row(t_obs, count, &mut rng);
    let neighbors = (0..num_neighbors)
        .map(|_| random_row(t_obs, count, &mut rng))
        .collect();
    Ok(ObservationMask {
        focal,
        neighbors,
        pattern: MaskPattern::Random,
        parameter: rate,
    })
}

/// Observes only the last `observed_len` steps, for the focal agent and every neighbor.
pub fn continuous_mask(
    t_obs: usize,
    num_neighbors: usize,
    observed_len: usize,
) -> Result<ObservationMask> {
    if observed_len == 0 || observed_len > t_obs {
        return Err(argument(format!(
            "observed length must lie in 1..={t_obs}, got {observed_len}"
        )));
    }
    let row: Vec<bool> = (0..t_obs).map(|t| t >= t_obs - observed_len).collect();
    Ok(ObservationMask {
        focal: row.clone(),
        neighbors: vec![row; num_neighbors],
        pattern: MaskPattern::Continuous,
        parameter: observed_len as f64,
    })
}

fn mask_row(states: &[AgentState], keep: &[bool]) -> Vec<AgentState> {
    states
        .iter()
        .zip(keep)
        .map(|(s, k)| if *k { *s } else { AgentState::invalid() })
        .collect()
}

/// Copy of `s` with masked past states invalidated and zeroed. Futures and the
/// map are left untouched.
pub fn apply_mask(s: &Scenario, m: &ObservationMask) -> Result<Scenario> {
    check_dims(s, m)?;
    let mut out = s.clone();
    out.focal_past = mask_row(&s.focal_past, &m.focal);
    out.neighbors = s
        .neighbors
        .iter()
        .zip(&m.neighbors)
        .map(|(n, k)| mask_row(n, k))
        .collect();
    Ok(out)
}

pub(crate) fn check_dims(s: &Scenario, m: &ObservationMask) -> Result<()> {
    let t_obs = s.focal_past.len();
    if m.focal.len() != t_obs {
        return Err(argument(format!(
            "mask covers {} focal steps, scenario has {t_obs}",
            m.focal.len()
        )));
    }
    if m.neighbors.len() != s.neighbors.len() {
        return Err(argument(format!(
            "mask covers {} neighbors, scenario has {}",
            m.neighbors.len(),
            s.neighbors.len()
        )));
    }
    for (i, (row, n)) in m.neighbors.iter().zip(&s.neighbors).enumerate() {
        if row.len() != n.len() {
            return Err(argument(format!(
                "neighbor {i}: mask has {} steps, history has {}",
                row.len(),
                n.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, GeneratorConfig};

    #[test]
    fn twenty_percent_drops_four_and_keeps_anchor() {
        let m = random_mask(20, 3, 0.2, 11).unwrap();
        assert_eq!(m.masked_focal_steps(), 4);
        assert!(m.focal[19]);
        for row in &m.neighbors {
            assert_eq!(row.iter().filter(|v| !**v).count(), 4);
            assert!(row[19]);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = random_mask(20, 2, 0.0, 1).unwrap();
        assert!(m.focal.iter().all(|v| *v));
        assert!(m.neighbors.iter().flatten().all(|v| *v));
    }

    #[test]
    fn eighty_percent_is_reproducible() {
        let a = random_mask(20, 4, 0.8, 5).unwrap();
        let b = random_mask(20, 4, 0.8, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked_focal_steps(), 15);
        let c = random_mask(20, 4, 0.8, 6).unwrap();
        assert_ne!(a.focal, c.focal);
    }

    #[test]
    fn neighbor_rows_are_drawn_independently() {
        let m = random_mask(20, 8, 0.5, 3).unwrap();
        let distinct: std::collections::HashSet<_> = m.neighbors.iter().collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn rate_out_of_range() {
        assert!(random_mask(20, 0, 1.0, 0).is_err());
        assert!(random_mask(20, 0, -0.1, 0).is_err());
        assert!(random_mask(20, 0, f64::NAN, 0).is_err());
    }

    #[test]
    fn continuous_lengths() {
        let full = continuous_mask(20, 2, 20).unwrap();
        assert!(full.focal.iter().all(|v| *v));
        let one = continuous_mask(20, 2, 1).unwrap();
        assert_eq!(one.masked_focal_steps(), 19);
        assert!(one.focal[19]);
        let five = continuous_mask(20, 2, 5).unwrap();
        let observed: Vec<usize> = (0..20).filter(|&t| five.focal[t]).collect();
        assert_eq!(observed, (15..20).collect::<Vec<_>>());
        assert_eq!(five.neighbors, vec![five.focal.clone(); 2]);
        assert!(continuous_mask(20, 2, 0).is_err());
        assert!(continuous_mask(20, 2, 21).is_err());
    }

    #[test]
    fn apply_mask_behaviour() {
        let cfg = GeneratorConfig::default();
        let s = generate_scenario(&cfg, 0).unwrap();
        let full = ObservationMask::full(20, 8);
        assert_eq!(apply_mask(&s, &full).unwrap(), s);

        let mut m = full.clone();
        m.focal[0] = false;
        let out = apply_mask(&s, &m).unwrap();
        assert_eq!(out.focal_past[0], AgentState::invalid());
        assert_eq!(out.focal_past[1..], s.focal_past[1..]);

        let one = continuous_mask(20, 8, 1).unwrap();
        let out = apply_mask(&s, &one).unwrap();
        assert_eq!(out.focal_past.iter().filter(|a| !a.valid).count(), 19);
        assert_eq!(out.focal_future, s.focal_future);
        assert_eq!(out.neighbor_futures, s.neighbor_futures);
        assert_eq!(out.map_polylines, s.map_polylines);

        let wrong = ObservationMask::full(19, 8);
        assert!(apply_mask(&s, &wrong).is_err());
        let wrong = ObservationMask::full(20, 7);
        assert!(apply_mask(&s, &wrong).is_err());
    }

    #[test]
    fn mask_spec_json() {
        let r: MaskSpec = serde_json::from_str(r#"{"pattern":"random","rate":0.4}"#).unwrap();
        assert_eq!(r, MaskSpec::Random { rate: 0.4 });
        let c: MaskSpec =
            serde_json::from_str(r#"{"pattern":"continuous","observed_len":5}"#).unwrap();
        assert_eq!(c, MaskSpec::Continuous { observed_len: 5 });
        assert_eq!(
            serde_json::to_string(&c).unwrap(),
            r#"{"pattern":"continuous","observed_len":5}"#
        );
    }
}
