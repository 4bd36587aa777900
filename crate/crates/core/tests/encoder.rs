mod common;

use common::*;
use proptest::prelude::*;
use tsd_core::encoder::*;
use tsd_core::masking::{continuous_mask, random_mask, ObservationMask};
use tsd_core::Error;

#[test]
fn init_contract() {
    let a = init_encoder(64, 8, 0).unwrap();
    let b = init_encoder(64, 8, 0).unwrap();
    assert_eq!(a.store, b.store);
    assert!(matches!(init_encoder(63, 8, 0), Err(Error::Argument(_))));
    for (name, t) in a.store.iter() {
        let s = t.shape();
        if name.ends_with(".w") {
            let bound = 1.0 / (s.rows as f64).sqrt();
            assert!(t.data().iter().all(|w| w.abs() <= bound), "{name}");
        }
    }
    let c = init_encoder(64, 8, 1).unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn shapes_under_heavy_masking() {
    let s = &toy_scenarios(20, 30, 8, 1)[0];
    let p = init_encoder(32, 4, 0).unwrap();
    let full = encode(s, &ObservationMask::full(20, 8), &p).unwrap();
    let anchor = encode(s, &continuous_mask(20, 8, 1).unwrap(), &p).unwrap();
    for f in [&full, &anchor] {
        assert_eq!((f.f_x.shape().rows, f.f_x.shape().cols), (20, 32));
        assert_eq!((f.f_a.shape().rows, f.f_xa.shape().rows), (8, 8));
        assert_eq!(f.f_m.shape().rows, s.map_polylines.len());
        assert_eq!(f.f_xm.shape().rows, s.map_polylines.len());
        assert_eq!(
            (f.f_temporal.shape().rows, f.f_temporal.shape().cols),
            (20, 20)
        );
        assert!(f.is_finite());
    }
    assert_ne!(full.f_x, anchor.f_x);
}

#[test]
fn masked_rows_are_the_mask_token() {
    let s = &toy_scenarios(20, 30, 4, 1)[0];
    let p = init_encoder(16, 4, 2).unwrap();
    let m = random_mask(20, 4, 0.6, 11).unwrap();
    let f = encode(s, &m, &p).unwrap();
    let token = p.mask_token().data();
    for (t, ok) in m.focal.iter().enumerate() {
        if !ok {
            assert_eq!(f.f_x.row(0, t), token);
        } else {
            assert_ne!(f.f_x.row(0, t), token);
        }
    }
    // masked keys receive no attention
    for r in 0..20 {
        for (c, ok) in m.focal.iter().enumerate() {
            if !ok {
                assert_eq!(f.f_temporal.get(0, r, c), 0.0);
            }
        }
    }
}

#[test]
fn zero_weights_give_constant_rows() {
    // two steps; with every weight and bias zero the state projection is 0,
    // layer norm of a zero row is 0, and the temporal attention is uniform
    let s = &toy_scenarios(2, 2, 1, 1)[0];
    let mut p = init_encoder(8, 2, 0).unwrap();
    for (name, t) in p.store.iter_mut() {
        let v = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.data_mut().fill(v);
    }
    let f = encode(s, &ObservationMask::full(2, 1), &p).unwrap();
    assert!(f.f_x.data().iter().all(|v| *v == 0.0));
    assert!(f.f_temporal.data().iter().all(|v| *v == 0.5));
    assert!(f.f_xa.data().iter().all(|v| *v == 0.0));
}

#[test]
fn input_errors() {
    let s = toy_scenarios(4, 4, 2, 1).remove(0);
    let p = init_encoder(8, 2, 0).unwrap();
    assert!(matches!(
        encode(&s, &ObservationMask::full(5, 2), &p),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        encode(&s, &ObservationMask::full(4, 3), &p),
        Err(Error::Argument(_))
    ));
    let mut bad = s.clone();
    bad.focal_past[1].x = f64::NAN;
    assert!(matches!(
        encode(&bad, &ObservationMask::full(4, 2), &p),
        Err(Error::Numeric(_))
    ));
    // a non-finite coordinate under the mask is never read
    let mut m = ObservationMask::full(4, 2);
    m.focal[1] = false;
    assert!(encode(&bad, &m, &p).is_ok());
}

fn permuted<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_coordinates_never_leak(id in 0u64..500, rate_i in 1usize..9, seed in 0u64..1000, noise in -50.0f64..50.0) {
        let cfg = toy_generator(8, 6, 3);
        let s = tsd_core::scenario::generate_scenario(&cfg, id).unwrap();
        let p = init_encoder(8, 2, seed).unwrap();
        let m = random_mask(8, 3, rate_i as f64 / 10.0, seed).unwrap();
        let mut moved = s.clone();
        for (t, ok) in m.focal.iter().enumerate() {
            if !ok {
                moved.focal_past[t].x += noise;
                moved.focal_past[t].y -= noise;
            }
        }
        for (n, row) in m.neighbors.iter().enumerate() {
            for (t, ok) in row.iter().enumerate() {
                if !ok {
                    moved.neighbors[n][t].x -= noise;
                    moved.neighbors[n][t].y += 2.0 * noise;
                }
            }
        }
        prop_assert_eq!(encode(&s, &m, &p).unwrap(), encode(&moved, &m, &p).unwrap());
    }

    #[test]
    fn neighbor_order_is_equivariant(id in 0u64..500, rot in 1usize..4, seed in 0u64..1000) {
        let s = tsd_core::scenario::generate_scenario(&toy_generator(6, 6, 4), id).unwrap();
        let p = init_encoder(8, 2, seed).unwrap();
        let m = random_mask(6, 4, 0.4, seed).unwrap();
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let mut s2 = s.clone();
        s2.neighbors = permuted(&s.neighbors, &perm);
        s2.neighbor_futures = permuted(&s.neighbor_futures, &perm);
        let mut m2 = m.clone();
        m2.neighbors = permuted(&m.neighbors, &perm);
        let a = encode(&s, &m, &p).unwrap();
        let b = encode(&s2, &m2, &p).unwrap();
        prop_assert_eq!(&a.f_x, &b.f_x);
        prop_assert_eq!(&a.f_m, &b.f_m);
        prop_assert_eq!(&a.f_xm, &b.f_xm);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((b.f_a.get(0, i, c) - a.f_a.get(0, src, c)).abs() < 1e-12);
                prop_assert!((b.f_xa.get(0, i, c) - a.f_xa.get(0, src, c)).abs() < 1e-12);
            }
        }
    }
}
