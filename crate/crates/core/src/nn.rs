//! Parameter storage and the small set of layers the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsd_autograd::{Graph, Shape, Tensor, Var};

use crate::error::{Error, Result};

/// Logit added to attention scores of unobserved keys. `exp` of it underflows
/// to exactly zero next to any observed key.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every tensor on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Replaces values by name; every stored name must be present with a matching shape.
    pub fn load_from<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src =
                lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {}, found {}",
                    value.shape(),
                    src.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// Graph handles of a [`ParamStore`]'s tensors.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters with scaled-uniform initialization.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.store.push(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> ParamId {
        self.store.push(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.uniform(&format!("{name}.w"), Shape::new(1, fan_in, fan_out), fan_in),
            b: init.uniform(&format!("{name}.b"), Shape::new(1, 1, fan_out), fan_in),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), Shape::new(1, 1, d), 1.0),
            bias: init.constant(&format!("{name}.bias"), Shape::new(1, 1, d), 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let n = g.mul(n, p.var(self.gain));
        g.add(n, p.var(self.bias))
    }
}

/// Three linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            layers: [
                Linear::new(init, &format!("{name}.0"), d_in, hidden),
                Linear::new(init, &format!("{name}.1"), hidden, hidden),
                Linear::new(init, &format!("{name}.2"), hidden, d_out),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.layers[0].forward(g, p, x);
        let h = g.gelu(h);
        let h = self.layers[1].forward(g, p, h);
        let h = g.gelu(h);
        self.layers[2].forward(g, p, h)
    }

    pub fn last(&self) -> &Linear {
        &self.layers[2]
    }
}

/// Position-wise feed-forward: Linear → GELU → Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, d),
            down: Linear::new(init, &format!("{name}.down"), d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Keys and values split per head, reusable across several queries.
#[derive(Clone, Debug)]
pub struct KeyValue {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Output of one attention call; `probs` holds one `[B, Rq, Rk]` map per head.
pub struct Attended {
    pub out: Var,
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
            d,
        }
    }

    fn split(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let dh = self.d / self.heads;
        (0..self.heads)
            .map(|h| g.slice_cols(x, h * dh, dh))
            .collect()
    }

    pub fn key_value(&self, g: &mut Graph, p: &Bound, key_src: Var, value_src: Var) -> KeyValue {
        let k = self.k.forward(g, p, key_src);
        let v = self.v.forward(g, p, value_src);
        KeyValue {
            keys: self.split(g, k),
            values: self.split(g, v),
        }
    }

    /// Scaled dot-product attention. `bias` holds either one logit bias shared
    /// by all heads or one per head, each broadcastable to `[B, Rq, Rk]`.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        query_src: Var,
        kv: &KeyValue,
        bias: &[Var],
    ) -> Attended {
        debug_assert!(bias.len() <= 1 || bias.len() == self.heads);
        let q = self.q.forward(g, p, query_src);
        let qs = self.split(g, q);
        let scale = 1.0 / ((self.d / self.heads) as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for (h, qh) in qs.into_iter().enumerate() {
            let s = g.matmul_nt(qh, kv.keys[h]);
            let mut s = g.scale(s, scale);
            if let Some(b) = bias.get(if bias.len() == 1 { 0 } else { h }) {
                s = g.add(s, *b);
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, kv.values[h]));
            probs.push(a);
        }
        let cat = g.concat_cols(&outs);
        Attended {
            out: self.o.forward(g, p, cat),
            probs,
        }
    }
}

/// Pre-norm transformer block in which queries attend to a memory:
/// `x += Attn(LN(x), LN(mem))`, then `x += FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: Norm,
    pub norm_mem: Norm,
    pub attn: MultiHeadAttention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl CrossBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm_q: Norm::new(init, &format!("{name}.norm_q"), d),
            norm_mem: Norm::new(init, &format!("{name}.norm_mem"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads),
            norm_ff: Norm::new(init, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(init, &format!("{name}.ff"), d),
        }
    }

    pub fn memory(&self, g: &mut Graph, p: &Bound, mem: Var) -> KeyValue {
        let m = self.norm_mem.forward(g, p, mem);
        self.attn.key_value(g, p, m, m)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        kv: &KeyValue,
        bias: &[Var],
    ) -> Attended {
        let q = self.norm_q.forward(g, p, x);
        let a = self.attn.attend(g, p, q, kv, bias);
        let x = g.add(x, a.out);
        let h = self.norm_ff.forward(g, p, x);
        let h = self.ff.forward(g, p, h);
        Attended {
            out: g.add(x, h),
            probs: a.probs,
        }
    }
}

/// Pre-norm self-attention block: `x += Attn(LN(x), LN(x))`, then `x += FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm: Norm,
    pub attn: MultiHeadAttention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl SelfBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm: Norm::new(init, &format!("{name}.norm"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads),
            norm_ff: Norm::new(init, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(init, &format!("{name}.ff"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, bias: &[Var]) -> Attended {
        let n = self.norm.forward(g, p, x);
        let kv = self.attn.key_value(g, p, n, n);
        let a = self.attn.attend(g, p, n, &kv, bias);
        let x = g.add(x, a.out);
        let h = self.norm_ff.forward(g, p, x);
        let h = self.ff.forward(g, p, h);
        Attended {
            out: g.add(x, h),
            probs: a.probs,
        }
    }
}

/// Additive attention bias `[B, 1, n]`: 0 for observed keys, [`MASKED_LOGIT`] otherwise.
pub fn key_mask_bias(valid: &[Vec<bool>]) -> Tensor {
    let n = valid.first().map_or(0, Vec::len);
    let data = valid
        .iter()
        .flat_map(|row| row.iter().map(|v| if *v { 0.0 } else { MASKED_LOGIT }))
        .collect();
    Tensor::from_vec(Shape::new(valid.len(), 1, n), data)
}

/// Per-row Laplace negative log-likelihood, `[B, R, C] -> [B, R, 1]`:
/// `sum_c log(2 b) + |s - mu| / b`.
pub fn laplace_nll(g: &mut Graph, mu: Var, b: Var, target: Var) -> Var {
    let two_b = g.scale(b, 2.0);
    let log_term = g.ln(two_b);
    let diff = g.sub(target, mu);
    let abs = g.abs(diff);
    let ratio = g.div(abs, b);
    let per = g.add(log_term, ratio);
    g.sum_cols(per)
}

/// Row-wise `log(sum(exp(x)))`, `[B, R, C] -> [B, R, 1]`, shifted by the
/// row maximum for stability.
pub fn log_sum_exp(g: &mut Graph, x: Var) -> Var {
    let value = g.value(x);
    let s = value.shape();
    let maxes: Vec<f64> = (0..s.batch)
        .flat_map(|b| (0..s.rows).map(move |r| (b, r)))
        .map(|(b, r)| {
            value
                .row(b, r)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = g.constant(Tensor::from_vec(Shape::new(s.batch, s.rows, 1), maxes));
    let shifted = g.sub(x, shift);
    let e = g.exp(shifted);
    let total = g.sum_cols(e);
    let l = g.ln(total);
    g.add(l, shift)
}

/// Row-wise log-softmax.
pub fn log_softmax(g: &mut Graph, x: Var) -> Var {
    let lse = log_sum_exp(g, x);
    g.sub(x, lse)
}
