//! Shared fixtures and a plain-loop forward oracle for the attention model.
#![allow(dead_code)]

use tsd_core::autograd::Tensor;
use tsd_core::encoder::SceneFeatures;
use tsd_core::model::ModelConfig;
use tsd_core::nn::{ParamStore, MASKED_LOGIT};
use tsd_core::scenario::{generate_dataset, GeneratorConfig, Scenario};

/// Deterministic values in [-1, 1].
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x1234_5678;
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

pub fn toy_generator(t_obs: usize, t_pred: usize, neighbors: usize) -> GeneratorConfig {
    GeneratorConfig {
        t_obs,
        t_pred,
        num_neighbors: neighbors,
        ..Default::default()
    }
}

pub fn toy_scenarios(t_obs: usize, t_pred: usize, neighbors: usize, n: usize) -> Vec<Scenario> {
    generate_dataset(&toy_generator(t_obs, t_pred, neighbors), n).unwrap()
}

pub fn toy_model(modes: usize, points: usize, t_obs: usize, t_pred: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        modes,
        points,
        t_obs,
        t_pred,
    }
}

pub type M = Vec<Vec<f64>>;

pub fn from_tensor(t: &Tensor) -> M {
    let s = t.shape();
    assert_eq!(s.batch, 1);
    (0..s.rows).map(|r| t.row(0, r).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> M {
    let t = store
        .iter()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .1;
    from_tensor(t)
}

pub fn add(a: &M, b: &M) -> M {
    // b may be a single row broadcast over a
    a.iter()
        .enumerate()
        .map(|(i, r)| {
            let br = if b.len() == 1 { &b[0] } else { &b[i] };
            r.iter().zip(br).map(|(x, y)| x + y).collect()
        })
        .collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn linear(x: &M, s: &ParamStore, name: &str) -> M {
    add(
        &matmul(x, &param(s, &format!("{name}.w"))),
        &param(s, &format!("{name}.b")),
    )
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

pub fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

pub fn map(x: &M, f: impl Fn(f64) -> f64) -> M {
    x.iter()
        .map(|r| r.iter().map(|v| f(*v)).collect())
        .collect()
}

pub fn norm(x: &M, s: &ParamStore, name: &str) -> M {
    let g = &param(s, &format!("{name}.gain"))[0];
    let b = &param(s, &format!("{name}.bias"))[0];
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

/// Multi-head attention; `bias[h][j]` is added to every score against key `j`.
pub fn attention(
    q_src: &M,
    k_src: &M,
    v_src: &M,
    s: &ParamStore,
    name: &str,
    heads: usize,
    bias: &[Vec<f64>],
) -> M {
    let q = linear(q_src, s, &format!("{name}.q"));
    let k = linear(k_src, s, &format!("{name}.k"));
    let v = linear(v_src, s, &format!("{name}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let mut scores: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    let dot: f64 = (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum();
                    dot / (dh as f64).sqrt() + bias.get(h).map_or(0.0, |b| b[j])
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores
                .iter_mut()
                .map(|x| {
                    *x = (*x - max).exp();
                    *x
                })
                .sum();
            for (j, p) in scores.iter().enumerate() {
                for c in 0..dh {
                    out[i][h * dh + c] += p / z * v[j][h * dh + c];
                }
            }
        }
    }
    linear(&out, s, &format!("{name}.o"))
}

pub fn feed_forward(x: &M, s: &ParamStore, name: &str) -> M {
    let h = map(&linear(x, s, &format!("{name}.up")), gelu);
    linear(&h, s, &format!("{name}.down"))
}

pub fn cross_block(
    x: &M,
    mem: &M,
    s: &ParamStore,
    name: &str,
    heads: usize,
    bias: &[Vec<f64>],
) -> M {
    let q = norm(x, s, &format!("{name}.norm_q"));
    let m = norm(mem, s, &format!("{name}.norm_mem"));
    let x = add(
        x,
        &attention(&q, &m, &m, s, &format!("{name}.attn"), heads, bias),
    );
    let h = norm(&x, s, &format!("{name}.norm_ff"));
    add(&x, &feed_forward(&h, s, &format!("{name}.ff")))
}

pub fn self_block(x: &M, s: &ParamStore, name: &str, heads: usize) -> M {
    let n = norm(x, s, &format!("{name}.norm"));
    let x = add(
        x,
        &attention(&n, &n, &n, s, &format!("{name}.attn"), heads, &[]),
    );
    let h = norm(&x, s, &format!("{name}.norm_ff"));
    add(&x, &feed_forward(&h, s, &format!("{name}.ff")))
}

pub fn mlp3(x: &M, s: &ParamStore, name: &str) -> M {
    let h = map(&linear(x, s, &format!("{name}.0")), gelu);
    let h = map(&linear(&h, s, &format!("{name}.1")), gelu);
    linear(&h, s, &format!("{name}.2"))
}

/// Map, agent and history blocks of a decoding stage.
pub fn scene_attention(x: &M, f: &SceneFeatures, s: &ParamStore, heads: usize) -> M {
    let fx = from_tensor(&f.f_x);
    let map_mem = add(&from_tensor(&f.f_m), &from_tensor(&f.f_xm));
    let agent_mem = add(&from_tensor(&f.f_a), &from_tensor(&f.f_xa));
    let temporal = from_tensor(&f.f_temporal);
    let current = temporal.last().unwrap();
    let w = &param(s, "context.temporal_weight")[0];
    let bias: Vec<Vec<f64>> = (0..heads)
        .map(|h| {
            current
                .iter()
                .zip(&f.focal_validity)
                .map(|(a, ok)| w[h] * a + if *ok { 0.0 } else { MASKED_LOGIT })
                .collect()
        })
        .collect();
    let x = cross_block(x, &map_mem, s, "context.map", heads, &[]);
    let x = cross_block(&x, &agent_mem, s, "context.agents", heads, &[]);
    cross_block(&x, &fx, s, "context.history", heads, &bias)
}
