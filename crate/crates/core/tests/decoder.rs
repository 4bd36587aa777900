mod common;

use common::*;
use proptest::prelude::*;
use tsd_core::autograd::finite_diff::central_diff;
use tsd_core::autograd::{Graph, Shape, Tensor};
use tsd_core::decoder::*;
use tsd_core::encoder::{encode, init_encoder};
use tsd_core::masking::ObservationMask;
use tsd_core::nn::log_softmax;
use tsd_core::scenario::AgentState;
use tsd_core::targets::{generate_targets, init_target_generator};

fn gt(points: &[(f64, f64)]) -> Vec<AgentState> {
    points
        .iter()
        .map(|(x, y)| AgentState::new(*x, *y))
        .collect()
}

fn forecast(k: usize, t: usize, mu: Vec<f64>, b: Vec<f64>, pi: Vec<f64>) -> Forecast {
    Forecast {
        mu: Tensor::from_vec(Shape::new(k, t, 2), mu),
        b: Tensor::from_vec(Shape::new(k, t, 2), b),
        pi,
    }
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
    l.iter().map(|v| (v - m).exp() / z).collect()
}

fn oracle_nll(fc: &Forecast, future: &[AgentState], mode: usize) -> f64 {
    let mut total = 0.0;
    for (t, s) in future.iter().enumerate() {
        for (j, sj) in [s.x, s.y].into_iter().enumerate() {
            let b = fc.b.get(mode, t, j);
            total += (2.0 * b).ln() + (sj - fc.mu.get(mode, t, j)).abs() / b;
        }
    }
    total
}

/// Mixture NLL with the sum over modes done in plain f64 after a max shift.
fn oracle_mixture(fc: &Forecast, future: &[AgentState]) -> f64 {
    let ll: Vec<f64> = (0..fc.modes())
        .map(|k| fc.pi[k].ln() - oracle_nll(fc, future, k))
        .collect();
    let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(m + ll.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

fn random_instance(case: u64, k: usize, t: usize) -> (Forecast, Vec<AgentState>) {
    let v = values(4 * k * t + 2 * t + k, 9000 + case);
    let n = 2 * k * t;
    let mu = v[..n].iter().map(|x| 4.0 * x).collect();
    let b = v[n..2 * n].iter().map(|x| 0.2 + 1.5 * x.abs()).collect();
    let pts: Vec<(f64, f64)> = v[2 * n..2 * n + 2 * t]
        .chunks(2)
        .map(|c| (4.0 * c[0], 4.0 * c[1]))
        .collect();
    let pi = softmax(&v[2 * n + 2 * t..]);
    (forecast(k, t, mu, b, pi), gt(&pts))
}

#[test]
fn regression_closed_forms() {
    let future: Vec<(f64, f64)> = (0..30)
        .map(|t| (t as f64 * 0.7, -(t as f64) * 0.1))
        .collect();
    let mu = future.iter().flat_map(|(x, y)| [*x, *y]).collect();
    let fc = forecast(1, 30, mu, vec![1.0; 60], vec![1.0]);
    let l = regression_loss(&fc, &gt(&future), 0).unwrap();
    assert_eq!(l, 60.0 * 2f64.ln());
    assert!((l - 41.58883).abs() < 1e-5);

    let fc = forecast(1, 1, vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0]);
    assert_eq!(regression_loss(&fc, &gt(&[(0.0, 1.0)]), 0).unwrap(), 2.0);
    assert!(regression_loss(&fc, &gt(&[(0.0, 1.0)]), 1).is_err());
}

#[test]
fn regression_matches_scalar_oracle() {
    for case in 0..100 {
        let (fc, future) = random_instance(case, 3, 4);
        for mode in 0..3 {
            let got = regression_loss(&fc, &future, mode).unwrap();
            let want = oracle_nll(&fc, &future, mode);
            assert!((got - want).abs() < 1e-9, "case {case}");
        }
    }
}

#[test]
fn classification_closed_forms() {
    let fc = forecast(1, 1, vec![1.0, 2.0], vec![1.0, 1.0], vec![1.0]);
    let future = gt(&[(1.0, 2.0)]);
    let l = classification_loss(&fc, &future).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((l - 1.386294).abs() < 1e-6);

    let twin = forecast(2, 1, vec![1.0, 2.0, 1.0, 2.0], vec![1.0; 4], vec![0.5, 0.5]);
    assert!((classification_loss(&twin, &future).unwrap() - l).abs() < 1e-12);

    let bad = forecast(2, 1, vec![0.0; 4], vec![1.0; 4], vec![0.7, 0.7]);
    assert!(classification_loss(&bad, &future).is_err());
}

#[test]
fn classification_matches_scalar_oracle() {
    for case in 0..100 {
        let (fc, future) = random_instance(case, 4, 3);
        let got = classification_loss(&fc, &future).unwrap();
        let want = oracle_mixture(&fc, &future);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn classification_is_detached_from_locations_and_scales() {
    let (fc, future) = random_instance(7, 3, 2);
    let logits = vec![0.3, -0.2, 0.5];
    let mut g = Graph::new();
    let mu = g.param(fc.mu.clone().reshape(Shape::new(1, 3, 4)));
    let b = g.param(fc.b.clone().reshape(Shape::new(1, 3, 4)));
    let l = g.param(Tensor::from_vec(Shape::new(1, 1, 3), logits.clone()));
    let log_pi = log_softmax(&mut g, l);
    let gt_flat: Vec<f64> = future.iter().flat_map(|s| [s.x, s.y]).collect();
    let gt_var = g.constant(Tensor::from_vec(Shape::new(1, 1, 4), gt_flat));
    let vars = ForecastVars { mu, b, log_pi };
    let loss = classification_loss_vars(&mut g, &vars, gt_var);
    let grads = g.backward(loss);
    for v in [mu, b] {
        assert!(grads.get(v).is_none_or(|d| d.iter().all(|x| *x == 0.0)));
    }

    let analytic = grads.get(l).unwrap().to_vec();
    let numeric = central_diff(
        |z| {
            let f = Forecast {
                pi: softmax(z),
                ..fc.clone()
            };
            classification_loss(&f, &future).unwrap()
        },
        &logits,
        1e-5,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-7, "{a} vs {n}");
    }

    // the value does respond to the locations
    let mut moved = fc.clone();
    moved.mu.data_mut()[0] += 0.1;
    assert_ne!(
        classification_loss(&moved, &future).unwrap(),
        classification_loss(&fc, &future).unwrap()
    );
}

fn scene(
    t_obs: usize,
    t_pred: usize,
    d: usize,
    heads: usize,
    seed: u64,
) -> tsd_core::encoder::SceneFeatures {
    let s = &toy_scenarios(t_obs, t_pred, 2, 1)[0];
    let enc = init_encoder(d, heads, seed).unwrap();
    encode(s, &ObservationMask::full(t_obs, 2), &enc).unwrap()
}

#[test]
fn contract_shapes() {
    let f = scene(20, 30, 16, 4, 0);
    let tg = init_target_generator(16, 4, 6, 3, 30, 1).unwrap();
    let t = generate_targets(&f, &tg, 6, 3).unwrap();
    let dec = init_decoder(16, 4, 6, 3, 30, 2).unwrap();
    let fc = decode_trajectories(&f, &t, &dec).unwrap();
    assert_eq!(fc.mu.shape(), Shape::new(6, 30, 2));
    assert_eq!(fc.b.shape(), Shape::new(6, 30, 2));
    assert!((fc.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(fc.b.data().iter().all(|b| *b > 0.0));
    assert!(fc.pi.iter().all(|p| *p >= 0.0));

    let other = init_decoder(16, 4, 5, 3, 30, 2).unwrap();
    assert!(decode_trajectories(&f, &t, &other).is_err());
    assert!(init_decoder(16, 4, 6, 4, 30, 2).is_err());

    let single = init_decoder(16, 4, 1, 3, 30, 2).unwrap();
    assert_eq!(decode_unguided(&f, &single).unwrap().pi, vec![1.0]);
}

#[test]
fn forecast_record_round_trip() {
    let (fc, _) = random_instance(3, 2, 3);
    let text = serde_json::to_string(&fc.to_record(42)).unwrap();
    let back: ForecastRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(back.scenario_id, 42);
    assert_eq!(Forecast::from_record(&back).unwrap(), fc);
}

#[test]
fn single_mode_single_segment_matches_oracle() {
    let f = scene(2, 2, 8, 2, 5);
    let tg = init_target_generator(8, 2, 1, 1, 2, 6).unwrap();
    let t = generate_targets(&f, &tg, 1, 1).unwrap();
    let dec = init_decoder(8, 2, 1, 1, 2, 7).unwrap();
    let fc = decode_trajectories(&f, &t, &dec).unwrap();

    let st = &dec.store;
    let q = add(&param(st, "traj_queries"), &param(st, "segment_embeddings"));
    let x = scene_attention(&q, &f, st, 2);
    let n = norm(&x, st, "guide_norm");
    let guide = add(&n, &from_tensor(&t.embeddings));
    let x = add(&x, &attention(&guide, &guide, &n, st, "guided", 2, &[]));
    let x = self_block(&x, st, "mode_block", 2);
    let loc = mlp3(&x, st, "loc_head");
    let scale = map(&mlp3(&x, st, "scale_head"), |v| softplus(v) + 1e-6);
    for s in 0..2 {
        let w = (s + 1) as f64 / 2.0;
        for j in 0..2 {
            let want = 10.0 * loc[0][2 * s + j] + w * t.mu.get(0, 0, j);
            assert!((fc.mu.get(0, s, j) - want).abs() < 1e-11);
            assert!((fc.b.get(0, s, j) - scale[0][2 * s + j]).abs() < 1e-12);
        }
    }
    assert_eq!(fc.pi, vec![1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn modes_permute_with_their_queries_and_targets(shift in 1usize..3, seed in 0u64..50) {
        let k = 3;
        let f = scene(4, 4, 8, 2, seed);
        let tg = init_target_generator(8, 2, k, 2, 4, seed + 1).unwrap();
        let t = generate_targets(&f, &tg, k, 2).unwrap();
        let dec = init_decoder(8, 2, k, 2, 4, seed + 2).unwrap();
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();

        let mut pdec = dec.clone();
        for (name, v) in pdec.store.iter_mut() {
            if name == "traj_queries" {
                let orig = v.clone();
                for (i, src) in perm.iter().enumerate() {
                    for c in 0..8 {
                        v.set(0, i, c, orig.get(0, *src, c));
                    }
                }
            }
        }
        let mut pt = t.clone();
        for (i, src) in perm.iter().enumerate() {
            for n in 0..2 {
                for j in 0..2 {
                    pt.mu.set(i, n, j, t.mu.get(*src, n, j));
                    pt.b.set(i, n, j, t.b.get(*src, n, j));
                }
                for c in 0..8 {
                    pt.embeddings.set(i, n, c, t.embeddings.get(*src, n, c));
                }
            }
        }
        let a = decode_trajectories(&f, &t, &dec).unwrap();
        let b = decode_trajectories(&f, &pt, &pdec).unwrap();
        for (i, src) in perm.iter().enumerate() {
            prop_assert!((b.pi[i] - a.pi[*src]).abs() < 1e-12);
            for s in 0..4 {
                for j in 0..2 {
                    prop_assert!((b.mu.get(i, s, j) - a.mu.get(*src, s, j)).abs() < 1e-12);
                    prop_assert!((b.b.get(i, s, j) - a.b.get(*src, s, j)).abs() < 1e-12);
                }
            }
        }
    }
}
