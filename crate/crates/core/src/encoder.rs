//! Scene encoder: focal history, neighbor histories and map polylines.
//!
//! Three attention blocks produce the feature families consumed downstream:
//! temporal self-attention over the focal history (`F_X` and the step-to-step
//! attention map), neighbors attending to the history (`F_XA`), and polylines
//! attending to the history (`F_XM`).
//!
//! Unobserved steps are never read: their input row is a learned mask token,
//! they are excluded as attention keys, and their rows of `F_X` are the mask
//! token itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsd_autograd::{Graph, Shape, Tensor, Var};

use crate::error::{argument, Error, Result};
use crate::masking::{check_dims, ObservationMask};
use crate::nn::{
    key_mask_bias, Bound, CrossBlock, Init, Linear, Norm, ParamId, ParamStore, SelfBlock,
};
use crate::scenario::{AgentState, Scenario};

/// Meters per unit in the position features.
pub const COORD_SCALE: f64 = 10.0;
/// Per-step input features: position, displacement, has-previous flag, time code.
pub const STATE_FEATURES: usize = 8;
/// Per-segment input features: midpoint and unit direction.
pub const SEGMENT_FEATURES: usize = 4;

#[derive(Clone, Debug)]
struct EncoderLayout {
    state_proj: Linear,
    segment_proj: Linear,
    mask_token: ParamId,
    temporal: SelfBlock,
    agent_norm: Norm,
    map_norm: Norm,
    agent_block: CrossBlock,
    map_block: CrossBlock,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub d: usize,
    pub heads: usize,
    pub store: ParamStore,
    layout: EncoderLayout,
}

/// Draws encoder weights uniformly within `±1/sqrt(fan_in)`; deterministic in `seed`.
pub fn init_encoder(d: usize, heads: usize, seed: u64) -> Result<EncoderParams> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(argument(format!(
            "hidden size {d} must be a positive multiple of the head count {heads}"
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let layout = EncoderLayout {
        state_proj: Linear::new(&mut init, "state_proj", STATE_FEATURES, d),
        segment_proj: Linear::new(&mut init, "segment_proj", SEGMENT_FEATURES, d),
        mask_token: init.uniform("mask_token", Shape::new(1, 1, d), d),
        temporal: SelfBlock::new(&mut init, "temporal", d, heads),
        agent_norm: Norm::new(&mut init, "agent_norm", d),
        map_norm: Norm::new(&mut init, "map_norm", d),
        agent_block: CrossBlock::new(&mut init, "agent_block", d, heads),
        map_block: CrossBlock::new(&mut init, "map_block", d, heads),
    };
    Ok(EncoderParams {
        d,
        heads,
        store,
        layout,
    })
}

/// Batched, featurized encoder input. All tensors are graph constants.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub batch: usize,
    pub t_obs: usize,
    pub num_neighbors: usize,
    pub num_polylines: usize,
    /// `[B, T, STATE_FEATURES]`
    pub focal_features: Tensor,
    /// `[B, T, 1]`, 1.0 where observed.
    pub focal_valid: Tensor,
    /// `[B, 1, T]` additive key mask.
    pub focal_key_bias: Tensor,
    /// `[B, Nn*T, STATE_FEATURES]`
    pub neighbor_features: Tensor,
    /// `[B, Nn, Nn*T]` masked-mean pooling weights.
    pub neighbor_pool: Tensor,
    /// `[B, S, SEGMENT_FEATURES]`
    pub segment_features: Tensor,
    /// `[B, P, S]` per-polyline mean pooling weights (zero on padding).
    pub polyline_pool: Tensor,
    pub focal_validity: Vec<Vec<bool>>,
    pub neighbor_validity: Vec<Vec<Vec<bool>>>,
}

fn step_features(states: &[AgentState], observed: &[bool], out: &mut Vec<f64>) {
    let t_obs = states.len();
    for t in 0..t_obs {
        if !observed[t] {
            out.extend_from_slice(&[0.0; STATE_FEATURES]);
            continue;
        }
        let s = states[t];
        let (dx, dy, has_prev) = if t > 0 && observed[t - 1] {
            (s.x - states[t - 1].x, s.y - states[t - 1].y, 1.0)
        } else {
            (0.0, 0.0, 0.0)
        };
        // offset of this step from the current one (<= 0)
        let tau = t as f64 - (t_obs - 1) as f64;
        out.extend_from_slice(&[
            s.x / COORD_SCALE,
            s.y / COORD_SCALE,
            dx,
            dy,
            has_prev,
            tau / 10.0,
            (tau / 3.0).sin(),
            (tau / 3.0).cos(),
        ]);
    }
}

fn finite_states(states: &[AgentState], observed: &[bool], what: &str) -> Result<()> {
    for (t, (s, o)) in states.iter().zip(observed).enumerate() {
        if *o && !(s.x.is_finite() && s.y.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} step {t} has non-finite coordinates"
            )));
        }
    }
    Ok(())
}

impl EncoderInput {
    /// Featurizes a batch. A step is observed when its state is valid and the
    /// mask keeps it. All items must share `T_obs`, neighbor and polyline counts.
    pub fn new(items: &[(&Scenario, &ObservationMask)]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| argument("cannot encode an empty batch"))?
            .0;
        let t_obs = first.t_obs();
        let nn = first.neighbors.len();
        let np = first.map_polylines.len();
        if t_obs == 0 || nn == 0 || np == 0 {
            return Err(argument(
                "scenarios need at least one observed step, one neighbor and one polyline",
            ));
        }
        let batch = items.len();
        let mut max_segments = 0;
        for (s, m) in items {
            check_dims(s, m)?;
            if s.t_obs() != t_obs || s.neighbors.len() != nn || s.map_polylines.len() != np {
                return Err(argument(format!(
                    "scenario {} does not match the batch layout (T_obs {t_obs}, {nn} neighbors, {np} polylines)",
                    s.scenario_id
                )));
            }
            let mut segments = 0;
            for (i, line) in s.map_polylines.iter().enumerate() {
                if line.len() < 2 {
                    return Err(argument(format!(
                        "scenario {} polyline {i} has fewer than 2 points",
                        s.scenario_id
                    )));
                }
                if line.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "scenario {} polyline {i} has non-finite points",
                        s.scenario_id
                    )));
                }
                segments += line.len() - 1;
            }
            max_segments = max_segments.max(segments);
        }

        let mut focal = Vec::with_capacity(batch * t_obs * STATE_FEATURES);
        let mut focal_valid = Vec::with_capacity(batch * t_obs);
        let mut focal_validity = Vec::with_capacity(batch);
        let mut neigh = Vec::with_capacity(batch * nn * t_obs * STATE_FEATURES);
        let mut pool = vec![0.0; batch * nn * nn * t_obs];
        let mut neighbor_validity = Vec::with_capacity(batch);
        let mut segs = vec![0.0; batch * max_segments * SEGMENT_FEATURES];
        let mut line_pool = vec![0.0; batch * np * max_segments];

        for (b, (s, m)) in items.iter().enumerate() {
            let observed: Vec<bool> = s
                .focal_past
                .iter()
                .zip(&m.focal)
                .map(|(a, k)| a.valid && *k)
                .collect();
            finite_states(&s.focal_past, &observed, "focal")?;
            step_features(&s.focal_past, &observed, &mut focal);
            focal_valid.extend(observed.iter().map(|o| if *o { 1.0 } else { 0.0 }));
            focal_validity.push(observed);

            let mut rows = Vec::with_capacity(nn);
            for (j, (hist, keep)) in s.neighbors.iter().zip(&m.neighbors).enumerate() {
                let observed: Vec<bool> =
                    hist.iter().zip(keep).map(|(a, k)| a.valid && *k).collect();
                finite_states(hist, &observed, "neighbor")?;
                step_features(hist, &observed, &mut neigh);
                let count = observed.iter().filter(|o| **o).count();
                if count > 0 {
                    let base = (b * nn + j) * nn * t_obs + j * t_obs;
                    for (t, o) in observed.iter().enumerate() {
                        if *o {
                            pool[base + t] = 1.0 / count as f64;
                        }
                    }
                }
                rows.push(observed);
            }
            neighbor_validity.push(rows);

            let mut seg = 0;
            for (i, line) in s.map_polylines.iter().enumerate() {
                let n = (line.len() - 1) as f64;
                for w in line.windows(2) {
                    let (a, c) = (w[0], w[1]);
                    let (dx, dy) = (c[0] - a[0], c[1] - a[1]);
                    let len = (dx * dx + dy * dy).sqrt();
                    let (ux, uy) = if len > 0.0 {
                        (dx / len, dy / len)
                    } else {
                        (0.0, 0.0)
                    };
                    let base = (b * max_segments + seg) * SEGMENT_FEATURES;
                    segs[base..base + SEGMENT_FEATURES].copy_from_slice(&[
                        0.5 * (a[0] + c[0]) / COORD_SCALE,
                        0.5 * (a[1] + c[1]) / COORD_SCALE,
                        ux,
                        uy,
                    ]);
                    line_pool[(b * np + i) * max_segments + seg] = 1.0 / n;
                    seg += 1;
                }
            }
        }

        Ok(Self {
            batch,
            t_obs,
            num_neighbors: nn,
            num_polylines: np,
            focal_features: Tensor::from_vec(Shape::new(batch, t_obs, STATE_FEATURES), focal),
            focal_valid: Tensor::from_vec(Shape::new(batch, t_obs, 1), focal_valid),
            focal_key_bias: key_mask_bias(&focal_validity),
            neighbor_features: Tensor::from_vec(
                Shape::new(batch, nn * t_obs, STATE_FEATURES),
                neigh,
            ),
            neighbor_pool: Tensor::from_vec(Shape::new(batch, nn, nn * t_obs), pool),
            segment_features: Tensor::from_vec(
                Shape::new(batch, max_segments, SEGMENT_FEATURES),
                segs,
            ),
            polyline_pool: Tensor::from_vec(Shape::new(batch, np, max_segments), line_pool),
            focal_validity,
            neighbor_validity,
        })
    }
}

/// Encoder outputs on a graph, batched along the leading axis.
#[derive(Clone, Debug)]
pub struct SceneVars {
    /// `[B, T, d]`
    pub f_x: Var,
    /// `[B, Nn, d]`
    pub f_a: Var,
    /// `[B, P, d]`
    pub f_m: Var,
    /// `[B, Nn, d]`
    pub f_xa: Var,
    /// `[B, P, d]`
    pub f_xm: Var,
    /// `[B, T, T]`, head-averaged temporal attention.
    pub f_temporal: Var,
    /// `[B, 1, T]` additive mask over unobserved history steps.
    pub focal_key_bias: Var,
}

impl EncoderParams {
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &EncoderInput) -> SceneVars {
        let l = &self.layout;
        let token = p.var(l.mask_token);

        // focal history
        let feats = g.constant(input.focal_features.clone());
        let valid = g.constant(input.focal_valid.clone());
        let mut invalid_t = input.focal_valid.clone();
        invalid_t.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let invalid = g.constant(invalid_t);
        let key_bias = g.constant(input.focal_key_bias.clone());

        let x = l.state_proj.forward(g, p, feats);
        let x = g.mul(x, valid);
        let tok = g.mul(invalid, token);
        let x = g.add(x, tok);
        let temporal = l.temporal.forward(g, p, x, &[key_bias]);
        let h = g.mul(temporal.out, valid);
        let f_x = g.add(h, tok);
        let mut prob_sum = temporal.probs[0];
        for &a in &temporal.probs[1..] {
            prob_sum = g.add(prob_sum, a);
        }
        let f_temporal = g.scale(prob_sum, 1.0 / temporal.probs.len() as f64);

        // neighbors: masked mean of per-step embeddings
        let nf = g.constant(input.neighbor_features.clone());
        let npool = g.constant(input.neighbor_pool.clone());
        let e = l.state_proj.forward(g, p, nf);
        let e = g.gelu(e);
        let pooled = g.matmul(npool, e);
        let f_a = l.agent_norm.forward(g, p, pooled);

        // map: mean of segment embeddings per polyline
        let sf = g.constant(input.segment_features.clone());
        let spool = g.constant(input.polyline_pool.clone());
        let e = l.segment_proj.forward(g, p, sf);
        let e = g.gelu(e);
        let pooled = g.matmul(spool, e);
        let f_m = l.map_norm.forward(g, p, pooled);

        let hist_a = l.agent_block.memory(g, p, f_x);
        let f_xa = l.agent_block.forward(g, p, f_a, &hist_a, &[key_bias]).out;
        let hist_m = l.map_block.memory(g, p, f_x);
        let f_xm = l.map_block.forward(g, p, f_m, &hist_m, &[key_bias]).out;

        SceneVars {
            f_x,
            f_a,
            f_m,
            f_xa,
            f_xm,
            f_temporal,
            focal_key_bias: key_bias,
        }
    }

    pub fn mask_token(&self) -> &Tensor {
        self.store.get(self.layout.mask_token)
    }
}

/// Encoder outputs for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    /// `[1, T_obs, d]`
    pub f_x: Tensor,
    /// `[1, Nn, d]`
    pub f_a: Tensor,
    /// `[1, P, d]`
    pub f_m: Tensor,
    /// `[1, Nn, d]`
    pub f_xa: Tensor,
    /// `[1, P, d]`
    pub f_xm: Tensor,
    /// `[1, T_obs, T_obs]`
    pub f_temporal: Tensor,
    pub focal_validity: Vec<bool>,
    pub neighbor_validity: Vec<Vec<bool>>,
}

fn item(t: &Tensor, b: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_vec(Shape::new(1, s.rows, s.cols), t.item(b).to_vec())
}

impl SceneFeatures {
    /// Splits batched graph values into per-scenario features.
    pub fn from_vars(g: &Graph, v: &SceneVars, input: &EncoderInput) -> Vec<Self> {
        (0..input.batch)
            .map(|b| Self {
                f_x: item(g.value(v.f_x), b),
                f_a: item(g.value(v.f_a), b),
                f_m: item(g.value(v.f_m), b),
                f_xa: item(g.value(v.f_xa), b),
                f_xm: item(g.value(v.f_xm), b),
                f_temporal: item(g.value(v.f_temporal), b),
                focal_validity: input.focal_validity[b].clone(),
                neighbor_validity: input.neighbor_validity[b].clone(),
            })
            .collect()
    }

    /// Places the features on `g` as constants (batch of one).
    pub fn to_vars(&self, g: &mut Graph) -> SceneVars {
        SceneVars {
            f_x: g.constant(self.f_x.clone()),
            f_a: g.constant(self.f_a.clone()),
            f_m: g.constant(self.f_m.clone()),
            f_xa: g.constant(self.f_xa.clone()),
            f_xm: g.constant(self.f_xm.clone()),
            f_temporal: g.constant(self.f_temporal.clone()),
            focal_key_bias: g.constant(key_mask_bias(std::slice::from_ref(&self.focal_validity))),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.f_x,
            &self.f_a,
            &self.f_m,
            &self.f_xa,
            &self.f_xm,
            &self.f_temporal,
        ]
        .iter()
        .all(|t| t.is_finite())
    }
}

/// Encodes one scenario under `m`.
pub fn encode(s: &Scenario, m: &ObservationMask, p: &EncoderParams) -> Result<SceneFeatures> {
    let input = EncoderInput::new(&[(s, m)])?;
    let mut g = Graph::new();
    let bound = p.store.bind_frozen(&mut g);
    let vars = p.forward(&mut g, &bound, &input);
    let mut out = SceneFeatures::from_vars(&g, &vars, &input);
    let f = out.pop().expect("one item");
    if !f.is_finite() {
        return Err(Error::Numeric(
            "encoder produced non-finite features".into(),
        ));
    }
    Ok(f)
}
