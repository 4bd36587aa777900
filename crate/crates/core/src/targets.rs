//! Sequential target-point generation and the target loss.
//!
//! K learned mode queries run N decoding cycles. Each cycle attends to the
//! scene and emits one 2-D Laplace target per mode, located relative to the
//! previous cycle's target (the origin for the first). Cycle outputs are fed
//! into the next cycle's queries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsd_autograd::{Graph, Shape, Tensor, Var};

use crate::context::SceneAttention;
use crate::encoder::{SceneFeatures, SceneVars, COORD_SCALE};
use crate::error::{argument, Error, Result};
use crate::nn::{laplace_nll, Bound, Init, Mlp3, ParamId, ParamStore};
use crate::scenario::AgentState;

/// Floor added to softplus scale outputs.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
struct TargetLayout {
    mode_queries: ParamId,
    step_embeddings: ParamId,
    context: SceneAttention,
    mu_head: Mlp3,
    b_head: Mlp3,
}

#[derive(Clone, Debug)]
pub struct TargetGenParams {
    pub d: usize,
    pub heads: usize,
    pub modes: usize,
    pub points: usize,
    pub t_pred: usize,
    pub store: ParamStore,
    layout: TargetLayout,
}

pub fn init_target_generator(
    d: usize,
    heads: usize,
    modes: usize,
    points: usize,
    t_pred: usize,
    seed: u64,
) -> Result<TargetGenParams> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(argument(format!(
            "hidden size {d} must be a positive multiple of the head count {heads}"
        )));
    }
    if modes == 0 || points == 0 {
        return Err(argument("need at least one mode and one target point"));
    }
    if t_pred == 0 || !t_pred.is_multiple_of(points) {
        return Err(argument(format!(
            "prediction horizon {t_pred} is not divisible by {points} target points"
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let layout = TargetLayout {
        mode_queries: init.uniform("mode_queries", Shape::new(1, modes, d), d),
        step_embeddings: init.uniform("step_embeddings", Shape::new(1, points, d), d),
        context: SceneAttention::new(&mut init, "context", d, heads),
        mu_head: Mlp3::new(&mut init, "mu_head", d, d, 2),
        b_head: Mlp3::new(&mut init, "b_head", d, d, 2),
    };
    Ok(TargetGenParams {
        d,
        heads,
        modes,
        points,
        t_pred,
        store,
        layout,
    })
}

/// Generated targets on a graph.
#[derive(Clone, Debug)]
pub struct TargetVars {
    /// `[B, K, 2N]`, cycle `i` in columns `2i, 2i+1`; absolute positions.
    pub mu: Var,
    /// `[B, K, 2N]`, strictly positive.
    pub b: Var,
    /// One `[B, K, d]` output embedding per cycle.
    pub embeddings: Vec<Var>,
}

impl TargetGenParams {
    pub fn forward(&self, g: &mut Graph, p: &Bound, scene: &SceneVars) -> TargetVars {
        let l = &self.layout;
        let mem = l.context.memory(g, p, scene);
        let queries = p.var(l.mode_queries);
        let steps = p.var(l.step_embeddings);
        let mut embeddings = Vec::with_capacity(self.points);
        let mut mus = Vec::with_capacity(self.points);
        let mut bs = Vec::with_capacity(self.points);
        let mut prev_mu: Option<Var> = None;
        for i in 0..self.points {
            let step = g.slice_rows(steps, i, 1);
            let mut q = g.add(queries, step);
            if let Some(&e) = embeddings.last() {
                q = g.add(q, e);
            }
            let x = l.context.forward(g, p, q, &mem);
            let offset = l.mu_head.forward(g, p, x);
            let offset = g.scale(offset, COORD_SCALE);
            let mu = match prev_mu {
                Some(prev) => g.add(prev, offset),
                None => offset,
            };
            let raw = l.b_head.forward(g, p, x);
            let b = g.softplus(raw);
            let b = g.add_scalar(b, SCALE_FLOOR);
            prev_mu = Some(mu);
            mus.push(mu);
            bs.push(b);
            embeddings.push(x);
        }
        TargetVars {
            mu: g.concat_cols(&mus),
            b: g.concat_cols(&bs),
            embeddings,
        }
    }
}

/// Targets for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    /// `[K, N, 2]`
    pub mu: Tensor,
    /// `[K, N, 2]`
    pub b: Tensor,
    /// `[K, N, d]`
    pub embeddings: Tensor,
}

impl TargetSet {
    pub fn modes(&self) -> usize {
        self.mu.shape().batch
    }

    pub fn points(&self) -> usize {
        self.mu.shape().rows
    }

    pub fn from_vars(g: &Graph, v: &TargetVars, item: usize) -> Self {
        let mu = g.value(v.mu);
        let k = mu.shape().rows;
        let n = v.embeddings.len();
        let d = g.shape(v.embeddings[0]).cols;
        let mut emb = Tensor::zeros(Shape::new(k, n, d));
        for (i, e) in v.embeddings.iter().enumerate() {
            let e = g.value(*e);
            for mode in 0..k {
                for c in 0..d {
                    emb.set(mode, i, c, e.get(item, mode, c));
                }
            }
        }
        Self {
            mu: Tensor::from_vec(Shape::new(k, n, 2), mu.item(item).to_vec()),
            b: Tensor::from_vec(Shape::new(k, n, 2), g.value(v.b).item(item).to_vec()),
            embeddings: emb,
        }
    }

    /// Places the set on `g` as constants (batch of one).
    pub fn to_vars(&self, g: &mut Graph) -> TargetVars {
        let (k, n) = (self.modes(), self.points());
        let d = self.embeddings.shape().cols;
        let mu = g.constant(self.mu.clone().reshape(Shape::new(1, k, 2 * n)));
        let b = g.constant(self.b.clone().reshape(Shape::new(1, k, 2 * n)));
        let embeddings = (0..n)
            .map(|i| {
                let mut e = Tensor::zeros(Shape::new(1, k, d));
                for mode in 0..k {
                    for c in 0..d {
                        e.set(0, mode, c, self.embeddings.get(mode, i, c));
                    }
                }
                g.constant(e)
            })
            .collect();
        TargetVars { mu, b, embeddings }
    }
}

/// Generates targets for one scenario.
pub fn generate_targets(
    f: &SceneFeatures,
    p: &TargetGenParams,
    modes: usize,
    points: usize,
) -> Result<TargetSet> {
    if modes != p.modes || points != p.points {
        return Err(argument(format!(
            "generator is configured for {} modes x {} points, asked for {modes} x {points}",
            p.modes, p.points
        )));
    }
    if f.f_x.shape().cols != p.d {
        return Err(argument("feature width does not match the generator"));
    }
    let mut g = Graph::new();
    let scene = f.to_vars(&mut g);
    let bound = p.store.bind_frozen(&mut g);
    let vars = p.forward(&mut g, &bound, &scene);
    let set = TargetSet::from_vars(&g, &vars, 0);
    if !(set.mu.is_finite() && set.b.is_finite()) {
        return Err(Error::Numeric(
            "target generator produced non-finite output".into(),
        ));
    }
    Ok(set)
}

/// Ground-truth future positions; every state must be valid and finite.
pub fn future_positions(gt: &[AgentState]) -> Result<Vec<[f64; 2]>> {
    gt.iter()
        .enumerate()
        .map(|(t, s)| {
            if !s.valid {
                Err(argument(format!("ground-truth step {t} is not valid")))
            } else if !(s.x.is_finite() && s.y.is_finite()) {
                Err(Error::Numeric(format!(
                    "ground-truth step {t} is not finite"
                )))
            } else {
                Ok([s.x, s.y])
            }
        })
        .collect()
}

/// Ground truth at the target steps `(i + 1) * T_pred / N - 1`, flattened to `2N` values.
pub fn target_ground_truth(gt: &[AgentState], points: usize) -> Result<Vec<f64>> {
    let t_pred = gt.len();
    if points == 0 || !t_pred.is_multiple_of(points) {
        return Err(argument(format!(
            "future length {t_pred} is not divisible by {points} target points"
        )));
    }
    let xy = future_positions(gt)?;
    let stride = t_pred / points;
    Ok((1..=points).flat_map(|i| xy[i * stride - 1]).collect())
}

/// Selects rows `[B, 1, C]` from `[B, K, C]` by per-item mode index.
pub fn select_modes(g: &mut Graph, x: Var, modes: &[usize]) -> Var {
    let k = g.shape(x).rows;
    let mut onehot = Tensor::zeros(Shape::new(modes.len(), 1, k));
    for (b, m) in modes.iter().enumerate() {
        onehot.set(b, 0, *m, 1.0);
    }
    let sel = g.constant(onehot);
    g.matmul(sel, x)
}

/// Target NLL per item, `[B, 1, 1]`. With `modes` the winner of each item is
/// scored; without, all modes are summed.
pub fn target_loss_vars(g: &mut Graph, t: &TargetVars, gt: Var, modes: Option<&[usize]>) -> Var {
    match modes {
        Some(m) => {
            let mu = select_modes(g, t.mu, m);
            let b = select_modes(g, t.b, m);
            laplace_nll(g, mu, b, gt)
        }
        None => {
            let per_mode = laplace_nll(g, t.mu, t.b, gt);
            g.sum_rows(per_mode)
        }
    }
}

/// Laplace NLL of the ground truth under the targets of one mode.
pub fn target_loss(t: &TargetSet, gt_future: &[AgentState], mode: usize) -> Result<f64> {
    let (k, n) = (t.modes(), t.points());
    if mode >= k {
        return Err(argument(format!("mode {mode} out of range for {k} modes")));
    }
    if t.b.data().iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Numeric("target scales must be positive".into()));
    }
    let gt = target_ground_truth(gt_future, n)?;
    let mut g = Graph::new();
    let vars = t.to_vars(&mut g);
    let gt = g.constant(Tensor::from_vec(Shape::new(1, 1, 2 * n), gt));
    let loss = target_loss_vars(&mut g, &vars, gt, Some(&[mode]));
    Ok(g.value(loss).data()[0])
}

/// Index of the row of `points` (`[K, 2M]` for item `b`) whose last point is
/// closest to `end`; ties go to the lowest index.
pub fn closest_endpoint(points: &Tensor, item: usize, end: [f64; 2]) -> usize {
    let s = points.shape();
    let mut best = (0, f64::INFINITY);
    for k in 0..s.rows {
        let row = points.row(item, k);
        let (x, y) = (row[s.cols - 2], row[s.cols - 1]);
        let d = ((x - end[0]).powi(2) + (y - end[1]).powi(2)).sqrt();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mode whose final target is closest to the ground-truth final position.
pub fn select_best_mode(t: &TargetSet, gt_future: &[AgentState]) -> Result<usize> {
    let last = gt_future
        .last()
        .ok_or_else(|| argument("empty ground-truth future"))?;
    let (k, n) = (t.modes(), t.points());
    let flat = t.mu.clone().reshape(Shape::new(1, k, 2 * n));
    Ok(closest_endpoint(&flat, 0, [last.x, last.y]))
}
