mod common;

use common::values;
use proptest::prelude::*;
use tsd_core::autograd::{Shape, Tensor};
use tsd_core::decoder::Forecast;
use tsd_core::metrics::*;
use tsd_core::scenario::AgentState;
use tsd_core::Error;

fn path(points: &[(f64, f64)]) -> Vec<AgentState> {
    points
        .iter()
        .map(|(x, y)| AgentState::new(*x, *y))
        .collect()
}

fn forecast(modes: &[Vec<(f64, f64)>], pi: Vec<f64>) -> Forecast {
    let t = modes[0].len();
    Forecast {
        mu: Tensor::from_vec(
            Shape::new(modes.len(), t, 2),
            modes.iter().flatten().flat_map(|(x, y)| [*x, *y]).collect(),
        ),
        b: Tensor::full(Shape::new(modes.len(), t, 2), 1.0),
        pi,
    }
}

fn random_case(seed: u64, k: usize, t: usize) -> (Forecast, Vec<AgentState>) {
    let v = values(2 * k * t + 2 * t + k, seed);
    let modes: Vec<Vec<(f64, f64)>> = (0..k)
        .map(|m| {
            (0..t)
                .map(|s| (6.0 * v[2 * (m * t + s)], 6.0 * v[2 * (m * t + s) + 1]))
                .collect()
        })
        .collect();
    let off = 2 * k * t;
    let gt: Vec<(f64, f64)> = (0..t)
        .map(|s| (6.0 * v[off + 2 * s], 6.0 * v[off + 2 * s + 1]))
        .collect();
    let raw: Vec<f64> = v[off + 2 * t..].iter().map(|x| x.abs() + 0.01).collect();
    let z: f64 = raw.iter().sum();
    (
        forecast(&modes, raw.iter().map(|r| r / z).collect()),
        path(&gt),
    )
}

/// Exhaustive scan over the kept modes, written independently of the library.
fn brute_force(fc: &Forecast, gt: &[AgentState], k_eval: usize) -> (f64, f64, bool) {
    let k = fc.modes();
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < k_eval.min(k) {
        let mut best: Option<usize> = None;
        for m in 0..k {
            if kept.contains(&m) {
                continue;
            }
            if best.is_none_or(|b| fc.pi[m] > fc.pi[b]) {
                best = Some(m);
            }
        }
        kept.push(best.unwrap());
    }
    let t = gt.len();
    let dist = |m: usize, s: usize| {
        ((fc.mu.get(m, s, 0) - gt[s].x).powi(2) + (fc.mu.get(m, s, 1) - gt[s].y).powi(2)).sqrt()
    };
    let ade = kept
        .iter()
        .map(|&m| (0..t).map(|s| dist(m, s)).sum::<f64>() / t as f64)
        .fold(f64::INFINITY, f64::min);
    let fde = kept
        .iter()
        .map(|&m| dist(m, t - 1))
        .fold(f64::INFINITY, f64::min);
    (ade, fde, fde > 2.0)
}

#[test]
fn exact_and_offset_examples() {
    let gt: Vec<(f64, f64)> = (0..5).map(|t| (t as f64, 0.5 * t as f64)).collect();
    let r = evaluate(
        &[forecast(std::slice::from_ref(&gt), vec![1.0])],
        &[path(&gt)],
        6,
    )
    .unwrap();
    assert_eq!((r.min_ade, r.min_fde, r.miss_rate), (0.0, 0.0, 0.0));

    let off: Vec<(f64, f64)> = gt.iter().map(|(x, y)| (x + 3.0, *y)).collect();
    let r = evaluate(&[forecast(&[off], vec![1.0])], &[path(&gt)], 6).unwrap();
    assert_eq!((r.min_ade, r.min_fde, r.miss_rate), (3.0, 3.0, 1.0));
    assert_eq!(r.n_scenarios, 1);
}

#[test]
fn errors() {
    let fc = forecast(&[vec![(0.0, 0.0), (1.0, 0.0)]], vec![1.0]);
    assert!(matches!(
        evaluate(std::slice::from_ref(&fc), &[], 6),
        Err(Error::Argument(_))
    ));
    assert!(evaluate(&[fc], &[path(&[(0.0, 0.0)])], 6).is_err());
}

#[test]
fn thousand_forecasts_match_the_brute_force_scan() {
    let cases: Vec<(Forecast, Vec<AgentState>)> = (0..1000).map(|i| random_case(i, 6, 5)).collect();
    let (fcs, gts): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
    for k_eval in [1, 3, 6] {
        let r = evaluate(&fcs, &gts, k_eval).unwrap();
        let per = r.per_scenario.as_ref().unwrap();
        let mut sums = (0.0, 0.0, 0usize);
        for (i, (fc, gt)) in fcs.iter().zip(&gts).enumerate() {
            let (ade, fde, missed) = brute_force(fc, gt, k_eval);
            assert!((per[i].ade_best - ade).abs() < 1e-12);
            assert!((per[i].fde_best - fde).abs() < 1e-12);
            assert_eq!(per[i].missed, missed);
            sums.0 += ade;
            sums.1 += fde;
            sums.2 += missed as usize;
        }
        assert!((r.min_ade - sums.0 / 1000.0).abs() < 1e-12);
        assert!((r.min_fde - sums.1 / 1000.0).abs() < 1e-12);
        assert_eq!(r.miss_rate, sums.2 as f64 / 1000.0);
    }
}

#[test]
fn miss_threshold_is_strict() {
    let gt = path(&[(0.0, 0.0), (0.0, 0.0)]);
    for (fde, missed) in [(2.0 - 1e-6, false), (2.0, false), (2.0 + 1e-6, true)] {
        let fc = forecast(&[vec![(0.0, 0.0), (fde, 0.0)]], vec![1.0]);
        let r = evaluate(&[fc], std::slice::from_ref(&gt), 6).unwrap();
        assert_eq!(r.min_fde, fde);
        assert_eq!(r.miss_rate, if missed { 1.0 } else { 0.0 }, "fde {fde}");
    }
}

#[test]
fn only_the_most_probable_modes_count() {
    let gt = path(&[(0.0, 0.0), (1.0, 0.0)]);
    let good = vec![(0.0, 0.0), (1.0, 0.0)];
    let bad = vec![(5.0, 0.0), (9.0, 0.0)];
    let fc = forecast(&[good, bad], vec![0.2, 0.8]);
    assert_eq!(
        evaluate(std::slice::from_ref(&fc), std::slice::from_ref(&gt), 2)
            .unwrap()
            .min_fde,
        0.0
    );
    assert_eq!(evaluate(&[fc], &[gt], 1).unwrap().min_fde, 8.0);
    assert_eq!(top_modes(&[0.3, 0.3, 0.4], 2), vec![2, 0]);
}

#[test]
fn single_mode_equals_direct_formulas() {
    for seed in 0..20 {
        let (fc, gt) = random_case(5000 + seed, 1, 7);
        let r = evaluate(std::slice::from_ref(&fc), std::slice::from_ref(&gt), 1).unwrap();
        let d: Vec<f64> = (0..7)
            .map(|s| (fc.mu.get(0, s, 0) - gt[s].x).hypot(fc.mu.get(0, s, 1) - gt[s].y))
            .collect();
        assert!((r.min_ade - d.iter().sum::<f64>() / 7.0).abs() < 1e-12);
        assert_eq!(r.min_fde, d[6]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn a_worse_mode_never_hurts(seed in 0u64..100_000, k in 1usize..5) {
        let (fc, gt) = random_case(seed, k, 4);
        let before = evaluate(std::slice::from_ref(&fc), std::slice::from_ref(&gt), 10).unwrap();
        // a mode far from everything, appended with some weight
        let mut modes: Vec<Vec<(f64, f64)>> = (0..k)
            .map(|m| (0..4).map(|s| (fc.mu.get(m, s, 0), fc.mu.get(m, s, 1))).collect())
            .collect();
        modes.push(vec![(1e3, 1e3); 4]);
        let mut pi: Vec<f64> = fc.pi.iter().map(|p| p * 0.5).collect();
        pi.push(0.5);
        let after = evaluate(&[forecast(&modes, pi)], &[gt], 10).unwrap();
        prop_assert!(after.min_ade <= before.min_ade);
        prop_assert!(after.min_fde <= before.min_fde);
        prop_assert!(after.miss_rate >= 0.0 && after.miss_rate <= 1.0);
    }
}

/// Two-sided p for Student t with 4 degrees of freedom, by Simpson's rule
/// on the density 3/8 (1 + t^2/4)^(-5/2).
fn p_value_df4(t: f64) -> f64 {
    let pdf = |x: f64| 0.375 * (1.0 + x * x / 4.0).powf(-2.5);
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let central = s * h / 3.0;
    1.0 - 2.0 * central
}

#[test]
fn textbook_paired_t() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [1.1, 2.2, 2.9, 4.3, 5.1];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / 5.0;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let t = mean / (sd / 5f64.sqrt());
    assert!((t - -1.809068067).abs() < 1e-6);

    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.t - t).abs() < 1e-6);
    assert_eq!(r.df, 4);
    assert!((r.mean_diff - mean).abs() < 1e-12);
    assert!(
        (r.p - p_value_df4(t)).abs() < 1e-6,
        "{} vs {}",
        r.p,
        p_value_df4(t)
    );
}

#[test]
fn t_test_edge_cases() {
    let a = [1.0, 2.0, 3.0];
    let r = paired_t_test(&a, &a).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    assert!(matches!(
        paired_t_test(&a, &[0.5, 1.5, 2.5]),
        Err(Error::Degenerate(_))
    ));
    assert!(paired_t_test(&a, &[1.0, 2.0]).is_err());
    assert!(paired_t_test(&[1.0], &[2.0]).is_err());
}
