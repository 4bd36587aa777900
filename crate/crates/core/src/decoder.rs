//! Target-guided trajectory decoding, mixture scoring and the trajectory losses.
//!
//! The horizon is decoded in N segments of `T_pred / N` steps. Per segment the
//! trajectory queries attend to the scene, mix across modes with attention
//! whose queries and keys carry the segment's target embeddings, then pass a
//! mode self-attention block. Location outputs are offsets from an anchor:
//! the straight line from the previous target to the current one when targets
//! are used, the previous segment's last point otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsd_autograd::{Graph, Shape, Tensor, Var};

use crate::context::SceneAttention;
use crate::encoder::{SceneFeatures, SceneVars, COORD_SCALE};
use crate::error::{argument, Error, Result};
use crate::nn::{
    laplace_nll, log_softmax, log_sum_exp, Bound, Init, Linear, Mlp3, MultiHeadAttention, Norm,
    ParamId, ParamStore, SelfBlock,
};
use crate::scenario::AgentState;
use crate::targets::{future_positions, select_modes, TargetSet, TargetVars, SCALE_FLOOR};

#[derive(Clone, Debug)]
struct DecoderLayout {
    traj_queries: ParamId,
    segment_embeddings: ParamId,
    context: SceneAttention,
    guide_norm: Norm,
    guided: MultiHeadAttention,
    mode_block: SelfBlock,
    loc_head: Mlp3,
    scale_head: Mlp3,
    score_head: Linear,
}

#[derive(Clone, Debug)]
pub struct TrajDecParams {
    pub d: usize,
    pub heads: usize,
    pub modes: usize,
    pub points: usize,
    pub t_pred: usize,
    pub store: ParamStore,
    layout: DecoderLayout,
}

pub fn init_decoder(
    d: usize,
    heads: usize,
    modes: usize,
    points: usize,
    t_pred: usize,
    seed: u64,
) -> Result<TrajDecParams> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(argument(format!(
            "hidden size {d} must be a positive multiple of the head count {heads}"
        )));
    }
    if modes == 0 || points == 0 || t_pred == 0 || !t_pred.is_multiple_of(points) {
        return Err(argument(format!(
            "invalid decoder layout: {modes} modes, {points} segments, horizon {t_pred}"
        )));
    }
    let seg = t_pred / points;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let layout = DecoderLayout {
        traj_queries: init.uniform("traj_queries", Shape::new(1, modes, d), d),
        segment_embeddings: init.uniform("segment_embeddings", Shape::new(1, points, d), d),
        context: SceneAttention::new(&mut init, "context", d, heads),
        guide_norm: Norm::new(&mut init, "guide_norm", d),
        guided: MultiHeadAttention::new(&mut init, "guided", d, heads),
        mode_block: SelfBlock::new(&mut init, "mode_block", d, heads),
        loc_head: Mlp3::new(&mut init, "loc_head", d, d, 2 * seg),
        scale_head: Mlp3::new(&mut init, "scale_head", d, d, 2 * seg),
        score_head: Linear::new(&mut init, "score_head", d, 1),
    };
    Ok(TrajDecParams {
        d,
        heads,
        modes,
        points,
        t_pred,
        store,
        layout,
    })
}

/// Decoded forecast on a graph.
#[derive(Clone, Debug)]
pub struct ForecastVars {
    /// `[B, K, 2 T_pred]`, step `t` in columns `2t, 2t+1`.
    pub mu: Var,
    /// `[B, K, 2 T_pred]`
    pub b: Var,
    /// `[B, 1, K]` log mixture weights.
    pub log_pi: Var,
}

/// `[1, 2, 2S]` map spreading a point over `S` steps with weights `w(s)`.
fn spread(seg: usize, w: impl Fn(usize) -> f64) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(1, 2, 2 * seg));
    for s in 0..seg {
        t.set(0, 0, 2 * s, w(s));
        t.set(0, 1, 2 * s + 1, w(s));
    }
    t
}

impl TrajDecParams {
    pub fn segment_len(&self) -> usize {
        self.t_pred / self.points
    }

    /// Decodes all segments. `targets` guides attention and anchors segments;
    /// without it the guidance term is dropped and segments chain end to end.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        scene: &SceneVars,
        targets: Option<&TargetVars>,
    ) -> ForecastVars {
        let l = &self.layout;
        let seg = self.segment_len();
        let mem = l.context.memory(g, p, scene);
        let queries = p.var(l.traj_queries);
        let steps = p.var(l.segment_embeddings);
        let from_prev = g.constant(spread(seg, |s| 1.0 - (s + 1) as f64 / seg as f64));
        let from_next = g.constant(spread(seg, |s| (s + 1) as f64 / seg as f64));
        let repeat = g.constant(spread(seg, |_| 1.0));

        let mut prev: Option<Var> = None;
        let mut prev_end: Option<Var> = None;
        let mut mus = Vec::with_capacity(self.points);
        let mut bs = Vec::with_capacity(self.points);
        for i in 0..self.points {
            let step = g.slice_rows(steps, i, 1);
            let mut q = g.add(queries, step);
            if let Some(e) = prev {
                q = g.add(q, e);
            }
            let x = l.context.forward(g, p, q, &mem);

            let n = l.guide_norm.forward(g, p, x);
            let guide = match targets {
                Some(t) => g.add(n, t.embeddings[i]),
                None => n,
            };
            let kv = l.guided.key_value(g, p, guide, n);
            let a = l.guided.attend(g, p, guide, &kv, &[]);
            let x = g.add(x, a.out);
            let x = l.mode_block.forward(g, p, x, &[]).out;

            let loc = l.loc_head.forward(g, p, x);
            let loc = g.scale(loc, COORD_SCALE);
            let mu = match targets {
                Some(t) => {
                    let next = g.slice_cols(t.mu, 2 * i, 2);
                    let toward = g.matmul(next, from_next);
                    if i == 0 {
                        g.add(loc, toward)
                    } else {
                        let start = g.slice_cols(t.mu, 2 * i - 2, 2);
                        let from = g.matmul(start, from_prev);
                        let anchor = g.add(from, toward);
                        g.add(loc, anchor)
                    }
                }
                None => match prev_end {
                    Some(end) => {
                        let anchor = g.matmul(end, repeat);
                        g.add(loc, anchor)
                    }
                    None => loc,
                },
            };
            let raw = l.scale_head.forward(g, p, x);
            let b = g.softplus(raw);
            let b = g.add_scalar(b, SCALE_FLOOR);
            prev_end = Some(g.slice_cols(mu, 2 * seg - 2, 2));
            prev = Some(x);
            mus.push(mu);
            bs.push(b);
        }
        let last = prev.expect("at least one segment");
        let scores = l.score_head.forward(g, p, last);
        let scores = g.transpose(scores);
        ForecastVars {
            mu: g.concat_cols(&mus),
            b: g.concat_cols(&bs),
            log_pi: log_softmax(g, scores),
        }
    }
}

/// Forecast for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    /// `[K, T_pred, 2]`
    pub mu: Tensor,
    /// `[K, T_pred, 2]`
    pub b: Tensor,
    pub pi: Vec<f64>,
}

/// JSON form of a forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub scenario_id: u64,
    pub mu: Vec<Vec<[f64; 2]>>,
    pub b: Vec<Vec<[f64; 2]>>,
    pub pi: Vec<f64>,
}

fn nested(t: &Tensor) -> Vec<Vec<[f64; 2]>> {
    let s = t.shape();
    (0..s.batch)
        .map(|k| {
            (0..s.rows)
                .map(|r| [t.get(k, r, 0), t.get(k, r, 1)])
                .collect()
        })
        .collect()
}

fn flatten(v: &[Vec<[f64; 2]>]) -> Result<Tensor> {
    let k = v.len();
    let t = v.first().map_or(0, Vec::len);
    if v.iter().any(|row| row.len() != t) {
        return Err(argument("ragged forecast array"));
    }
    Ok(Tensor::from_vec(
        Shape::new(k, t, 2),
        v.iter().flatten().flatten().copied().collect(),
    ))
}

impl Forecast {
    pub fn modes(&self) -> usize {
        self.mu.shape().batch
    }

    pub fn horizon(&self) -> usize {
        self.mu.shape().rows
    }

    pub fn from_vars(g: &Graph, v: &ForecastVars, item: usize) -> Self {
        let mu = g.value(v.mu);
        let k = mu.shape().rows;
        let t = mu.shape().cols / 2;
        Self {
            mu: Tensor::from_vec(Shape::new(k, t, 2), mu.item(item).to_vec()),
            b: Tensor::from_vec(Shape::new(k, t, 2), g.value(v.b).item(item).to_vec()),
            pi: g
                .value(v.log_pi)
                .item(item)
                .iter()
                .map(|l| l.exp())
                .collect(),
        }
    }

    /// Places the forecast on `g` as constants (batch of one).
    pub fn to_vars(&self, g: &mut Graph) -> ForecastVars {
        let (k, t) = (self.modes(), self.horizon());
        let mu = g.constant(self.mu.clone().reshape(Shape::new(1, k, 2 * t)));
        let b = g.constant(self.b.clone().reshape(Shape::new(1, k, 2 * t)));
        let log_pi = g.constant(Tensor::from_vec(
            Shape::new(1, 1, k),
            self.pi.iter().map(|p| p.ln()).collect(),
        ));
        ForecastVars { mu, b, log_pi }
    }

    pub fn to_record(&self, scenario_id: u64) -> ForecastRecord {
        ForecastRecord {
            scenario_id,
            mu: nested(&self.mu),
            b: nested(&self.b),
            pi: self.pi.clone(),
        }
    }

    pub fn from_record(r: &ForecastRecord) -> Result<Self> {
        let mu = flatten(&r.mu)?;
        let b = flatten(&r.b)?;
        if mu.shape() != b.shape() || r.pi.len() != mu.shape().batch {
            return Err(argument("forecast arrays disagree in shape"));
        }
        Ok(Self {
            mu,
            b,
            pi: r.pi.clone(),
        })
    }
}

/// Decodes one scenario guided by `t`.
pub fn decode_trajectories(
    f: &SceneFeatures,
    t: &TargetSet,
    p: &TrajDecParams,
) -> Result<Forecast> {
    if t.modes() != p.modes || t.points() != p.points || t.embeddings.shape().cols != p.d {
        return Err(argument(format!(
            "target set ({} modes x {} points) does not fit the decoder ({} x {})",
            t.modes(),
            t.points(),
            p.modes,
            p.points
        )));
    }
    decode(f, Some(t), p)
}

/// Decodes one scenario without target guidance.
pub fn decode_unguided(f: &SceneFeatures, p: &TrajDecParams) -> Result<Forecast> {
    decode(f, None, p)
}

fn decode(f: &SceneFeatures, t: Option<&TargetSet>, p: &TrajDecParams) -> Result<Forecast> {
    if f.f_x.shape().cols != p.d {
        return Err(argument("feature width does not match the decoder"));
    }
    let mut g = Graph::new();
    let scene = f.to_vars(&mut g);
    let targets = t.map(|t| t.to_vars(&mut g));
    let bound = p.store.bind_frozen(&mut g);
    let vars = p.forward(&mut g, &bound, &scene, targets.as_ref());
    let fc = Forecast::from_vars(&g, &vars, 0);
    if !(fc.mu.is_finite() && fc.b.is_finite()) {
        return Err(Error::Numeric("decoder produced non-finite output".into()));
    }
    Ok(fc)
}

/// Per-step NLL of the selected modes, `[B, 1, 1]`.
pub fn regression_loss_vars(g: &mut Graph, fc: &ForecastVars, gt: Var, modes: &[usize]) -> Var {
    let mu = select_modes(g, fc.mu, modes);
    let b = select_modes(g, fc.b, modes);
    laplace_nll(g, mu, b, gt)
}

/// Mixture NLL with locations and scales detached, `[B, 1, 1]`.
pub fn classification_loss_vars(g: &mut Graph, fc: &ForecastVars, gt: Var) -> Var {
    let mu = g.detach(fc.mu);
    let b = g.detach(fc.b);
    let nll = laplace_nll(g, mu, b, gt);
    let ll = g.scale(nll, -1.0);
    let ll = g.transpose(ll);
    let joint = g.add(fc.log_pi, ll);
    let lse = log_sum_exp(g, joint);
    g.scale(lse, -1.0)
}

fn flat_gt(gt_future: &[AgentState], t_pred: usize) -> Result<Tensor> {
    if gt_future.len() != t_pred {
        return Err(argument(format!(
            "ground truth has {} steps, forecast has {t_pred}",
            gt_future.len()
        )));
    }
    let xy = future_positions(gt_future)?;
    Ok(Tensor::from_vec(
        Shape::new(1, 1, 2 * t_pred),
        xy.into_iter().flatten().collect(),
    ))
}

pub fn regression_loss(fc: &Forecast, gt_future: &[AgentState], mode: usize) -> Result<f64> {
    if mode >= fc.modes() {
        return Err(argument(format!(
            "mode {mode} out of range for {} modes",
            fc.modes()
        )));
    }
    let gt = flat_gt(gt_future, fc.horizon())?;
    let mut g = Graph::new();
    let vars = fc.to_vars(&mut g);
    let gt = g.constant(gt);
    let loss = regression_loss_vars(&mut g, &vars, gt, &[mode]);
    Ok(g.value(loss).data()[0])
}

pub fn classification_loss(fc: &Forecast, gt_future: &[AgentState]) -> Result<f64> {
    let sum: f64 = fc.pi.iter().sum();
    if fc.pi.len() != fc.modes() || fc.pi.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(argument(
            "mixture weights must be a probability vector over the modes",
        ));
    }
    let gt = flat_gt(gt_future, fc.horizon())?;
    let mut g = Graph::new();
    let vars = fc.to_vars(&mut g);
    let gt = g.constant(gt);
    let loss = classification_loss_vars(&mut g, &vars, gt);
    Ok(g.value(loss).data()[0])
}
