use crate::tensor::{Shape, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Softplus,
    Exp,
    Log,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SumCols(Var),
    SumRows(Var),
    SumBatch(Var),
    SumAll(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape.
///
/// Every operation computes its value immediately and records enough
/// information to run the reverse pass later. Shape errors are programmer
/// errors and panic.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Values every [`Graph::detach`] returns, in call order, instead of the
    /// value of its input. Lets finite differences hold stopped paths fixed.
    pinned: Option<Vec<Tensor>>,
    detached: Vec<Var>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// `None` when no gradient reached `v` (or `v` does not track gradients).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` calls return `values` in order.
    pub fn with_pinned_detach(values: Vec<Tensor>) -> Self {
        Self {
            pinned: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached
            .iter()
            .map(|v| self.value(*v).clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v`'s current value as a constant: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let i = self.detached.len();
        let value = match &self.pinned {
            Some(p) => {
                let t = p
                    .get(i)
                    .expect("more detach calls than pinned values")
                    .clone();
                assert_eq!(
                    t.shape(),
                    self.shape(v),
                    "pinned detach value has the wrong shape"
                );
                t
            }
            None => self.nodes[v.0].value.clone(),
        };
        let out = self.constant(value);
        self.detached.push(out);
        out
    }

    /// Batched matrix product `a · b` (or `a · bᵀ` with `trans_b`).
    ///
    /// Either operand may have batch size 1 and is then broadcast.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (bk, bn) = if trans_b {
            (sb.cols, sb.rows)
        } else {
            (sb.rows, sb.cols)
        };
        assert_eq!(
            sa.cols, bk,
            "matmul inner dims: {sa} x {sb} (trans_b={trans_b})"
        );
        assert!(
            sa.batch == sb.batch || sa.batch == 1 || sb.batch == 1,
            "matmul batch mismatch: {sa} x {sb}"
        );
        let batch = sa.batch.max(sb.batch);
        let out_shape = Shape::new(batch, sa.rows, bn);
        let mut out = Tensor::zeros(out_shape);
        {
            let av = self.value(a);
            let bv = self.value(b);
            gemm_forward(av, bv, trans_b, &mut out);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, trans_b }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let shape = av
            .shape()
            .broadcast(&bv.shape())
            .unwrap_or_else(|| panic!("cannot broadcast {} with {}", av.shape(), bv.shape()));
        let mut out = Tensor::zeros(shape);
        if av.shape() == bv.shape() {
            for ((o, x), y) in out.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *o = f(*x, *y);
            }
            return out;
        }
        let (asb, asr, asc) = av.shape().broadcast_strides();
        let (bsb, bsr, bsc) = bv.shape().broadcast_strides();
        let (ad, bd) = (av.data(), bv.data());
        let od = out.data_mut();
        let mut o = 0;
        for bi in 0..shape.batch {
            for ri in 0..shape.rows {
                let abase = bi * asb + ri * asr;
                let bbase = bi * bsb + ri * bsr;
                for ci in 0..shape.cols {
                    od[o] = f(ad[abase + ci * asc], bd[bbase + ci * bsc]);
                    o += 1;
                }
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Div(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let c = self.scalar(s);
        self.add(x, c)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let mut out = self.value(x).clone();
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
        };
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let needs = self.needs(x);
        self.push(out, Op::Unary(x, kind), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.shape().cols;
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.shape().cols;
        let mut rstd = Vec::with_capacity(out.len() / cols.max(1));
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let needs = self.needs(x);
        self.push(out, Op::LayerNorm { x, rstd }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(start + len <= s.cols, "slice_cols {start}+{len} out of {s}");
        let mut data = Vec::with_capacity(s.batch * s.rows * len);
        for row in xv.data().chunks(s.cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec(Shape::new(s.batch, s.rows, len), data);
        let needs = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let s0 = self.shape(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.batch == s0.batch && s.rows == s0.rows,
                "concat_cols {s} vs {s0}"
            );
            cols += s.cols;
        }
        let shape = Shape::new(s0.batch, s0.rows, cols);
        let mut data = Vec::with_capacity(shape.numel());
        for row in 0..s0.batch * s0.rows {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.shape().cols;
                data.extend_from_slice(&pv.data()[row * c..(row + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(shape, data),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(start + len <= s.rows, "slice_rows {start}+{len} out of {s}");
        let mut data = Vec::with_capacity(s.batch * len * s.cols);
        for b in 0..s.batch {
            let base = (b * s.rows + start) * s.cols;
            data.extend_from_slice(&xv.data()[base..base + len * s.cols]);
        }
        let out = Tensor::from_vec(Shape::new(s.batch, len, s.cols), data);
        let needs = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let s0 = self.shape(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.batch == s0.batch && s.cols == s0.cols,
                "concat_rows {s} vs {s0}"
            );
            rows += s.rows;
        }
        let shape = Shape::new(s0.batch, rows, s0.cols);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s0.batch {
            for &p in parts {
                data.extend_from_slice(self.value(p).item(b));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(shape, data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    /// `[B, R, C] -> [B, R, 1]`, compensated so long rows of equal terms sum exactly.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let data = xv.data().chunks(s.cols).map(neumaier_sum).collect();
        let out = Tensor::from_vec(Shape::new(s.batch, s.rows, 1), data);
        let needs = self.needs(x);
        self.push(out, Op::SumCols(x), needs)
    }

    /// `[B, R, C] -> [B, 1, C]`
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(Shape::new(s.batch, 1, s.cols));
        for b in 0..s.batch {
            for r in 0..s.rows {
                let row = xv.row(b, r);
                for (o, v) in out.data_mut()[b * s.cols..(b + 1) * s.cols]
                    .iter_mut()
                    .zip(row)
                {
                    *o += v;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SumRows(x), needs)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.shape(x).rows;
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / rows as f64)
    }

    /// `[B, R, C] -> [1, R, C]`
    pub fn sum_batch(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let n = s.rows * s.cols;
        let mut out = Tensor::zeros(Shape::new(1, s.rows, s.cols));
        for item in xv.data().chunks(n) {
            for (o, v) in out.data_mut().iter_mut().zip(item) {
                *o += v;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SumBatch(x), needs)
    }

    pub fn mean_batch(&mut self, x: Var) -> Var {
        let batch = self.shape(x).batch;
        let s = self.sum_batch(x);
        self.scale(s, 1.0 / batch as f64)
    }

    /// Sum of every element, as a `[1, 1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::SumAll(x), needs)
    }

    /// Per-item transpose: `[B, R, C] -> [B, C, R]`.
    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(Shape::new(s.batch, s.cols, s.rows));
        for b in 0..s.batch {
            for r in 0..s.rows {
                for c in 0..s.cols {
                    out.set(b, c, r, xv.get(b, r, c));
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Transpose(x), needs)
    }

    /// `x · w + bias`, with `w: [1, in, out]` and `bias: [1, 1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, bias)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.shape(root).numel(),
            1,
            "backward root must be scalar, got {}",
            self.shape(root)
        );
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Reverse pass with explicit upstream gradients for one or more nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, self.shape(*v), g.data());
            last = last.max(v.0);
        }
        for id in (0..=last).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let g = grad_buf(grads, *a, av.shape());
                    gemm_grad_a(av.shape(), bv, *trans_b, gout, out_shape, g);
                }
                if self.needs(*b) {
                    let g = grad_buf(grads, *b, bv.shape());
                    gemm_grad_b(av, bv.shape(), *trans_b, gout, out_shape, g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        reduce_broadcast(grads, v, self.shape(v), out_shape, gout, |g, _| g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    reduce_broadcast(grads, *a, self.shape(*a), out_shape, gout, |g, _| g);
                }
                if self.needs(*b) {
                    reduce_broadcast(grads, *b, self.shape(*b), out_shape, gout, |g, _| -g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.value(*b);
                    let gs = elementwise_partner(other, out_shape, gout, |g, y| g * y);
                    reduce_broadcast(grads, *a, self.shape(*a), out_shape, &gs, |g, _| g);
                }
                if self.needs(*b) {
                    let other = self.value(*a);
                    let gs = elementwise_partner(other, out_shape, gout, |g, x| g * x);
                    reduce_broadcast(grads, *b, self.shape(*b), out_shape, &gs, |g, _| g);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let gs = elementwise_partner(bv, out_shape, gout, |g, y| g / y);
                    reduce_broadcast(grads, *a, self.shape(*a), out_shape, &gs, |g, _| g);
                }
                if self.needs(*b) {
                    // d(x/y)/dy = -(x/y)/y = -out/y
                    let gs = elementwise_partner(bv, out_shape, gout, |g, y| g / y);
                    let gs: Vec<f64> = gs
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, o)| -g * o)
                        .collect();
                    reduce_broadcast(grads, *b, self.shape(*b), out_shape, &gs, |g, _| g);
                }
            }
            Op::Scale(x, s) => {
                let g = grad_buf(grads, *x, out_shape);
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += s * go;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let out = node.value.data();
                let g = grad_buf(grads, *x, out_shape);
                for i in 0..g.len() {
                    let xi = xv.data()[i];
                    let d = match kind {
                        Unary::Gelu => gelu_grad(xi),
                        Unary::Softplus => sigmoid(xi),
                        Unary::Exp => out[i],
                        Unary::Log => 1.0 / xi,
                        Unary::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    g[i] += gout[i] * d;
                }
            }
            Op::Softmax(x) => {
                let cols = out_shape.cols;
                let y = node.value.data();
                let g = grad_buf(grads, *x, out_shape);
                for ((gr, yr), dr) in g
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(gout.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for i in 0..cols {
                        gr[i] += yr[i] * (dr[i] - dot);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let cols = out_shape.cols;
                let n = cols as f64;
                let y = node.value.data();
                let g = grad_buf(grads, *x, out_shape);
                for (ri, ((gr, yr), dr)) in g
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(gout.chunks(cols))
                    .enumerate()
                {
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..cols {
                        gr[i] += rstd[ri] * (dr[i] - mean_d - yr[i] * mean_dy);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x);
                let len = out_shape.cols;
                let g = grad_buf(grads, *x, xs);
                for (row, dr) in gout.chunks(len).enumerate() {
                    let base = row * xs.cols + start;
                    for (gi, d) in g[base..base + len].iter_mut().zip(dr) {
                        *gi += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.needs(p) {
                        let g = grad_buf(grads, p, ps);
                        for (row, gr) in g.chunks_mut(ps.cols).enumerate() {
                            let base = row * out_shape.cols + offset;
                            for (gi, d) in gr.iter_mut().zip(&gout[base..base + ps.cols]) {
                                *gi += d;
                            }
                        }
                    }
                    offset += ps.cols;
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let n = out_shape.rows * xs.cols;
                let g = grad_buf(grads, *x, xs);
                for b in 0..xs.batch {
                    let base = (b * xs.rows + start) * xs.cols;
                    for (gi, d) in g[base..base + n].iter_mut().zip(&gout[b * n..(b + 1) * n]) {
                        *gi += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let item = out_shape.rows * out_shape.cols;
                for &p in parts {
                    let ps = self.shape(p);
                    let n = ps.rows * ps.cols;
                    if self.needs(p) {
                        let g = grad_buf(grads, p, ps);
                        for b in 0..ps.batch {
                            let src = &gout[b * item + offset..b * item + offset + n];
                            for (gi, d) in g[b * n..(b + 1) * n].iter_mut().zip(src) {
                                *gi += d;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::SumCols(x) => {
                let xs = self.shape(*x);
                let g = grad_buf(grads, *x, xs);
                for (gr, d) in g.chunks_mut(xs.cols).zip(gout) {
                    gr.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::SumRows(x) => {
                let xs = self.shape(*x);
                let g = grad_buf(grads, *x, xs);
                for b in 0..xs.batch {
                    let d = &gout[b * xs.cols..(b + 1) * xs.cols];
                    for r in 0..xs.rows {
                        let base = (b * xs.rows + r) * xs.cols;
                        for (gi, di) in g[base..base + xs.cols].iter_mut().zip(d) {
                            *gi += di;
                        }
                    }
                }
            }
            Op::SumBatch(x) => {
                let xs = self.shape(*x);
                let g = grad_buf(grads, *x, xs);
                for item in g.chunks_mut(xs.rows * xs.cols) {
                    for (gi, d) in item.iter_mut().zip(gout) {
                        *gi += d;
                    }
                }
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                let g = grad_buf(grads, *x, xs);
                g.iter_mut().for_each(|v| *v += gout[0]);
            }
            Op::Transpose(x) => {
                let xs = self.shape(*x);
                let g = grad_buf(grads, *x, xs);
                for b in 0..xs.batch {
                    for r in 0..xs.rows {
                        for c in 0..xs.cols {
                            g[(b * xs.rows + r) * xs.cols + c] +=
                                gout[(b * xs.cols + c) * xs.rows + r];
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, shape: Shape) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; shape.numel()])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, shape: Shape, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        slot => {
            debug_assert_eq!(g.len(), shape.numel());
            *slot = Some(g.to_vec());
        }
    }
}

/// Reads `partner` under broadcasting to `out_shape` and combines it with the
/// upstream gradient elementwise.
fn elementwise_partner(
    partner: &Tensor,
    out_shape: Shape,
    gout: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if partner.shape() == out_shape {
        return gout
            .iter()
            .zip(partner.data())
            .map(|(g, p)| f(*g, *p))
            .collect();
    }
    let (sb, sr, sc) = partner.shape().broadcast_strides();
    let pd = partner.data();
    let mut out = Vec::with_capacity(gout.len());
    let mut o = 0;
    for b in 0..out_shape.batch {
        for r in 0..out_shape.rows {
            let base = b * sb + r * sr;
            for c in 0..out_shape.cols {
                out.push(f(gout[o], pd[base + c * sc]));
                o += 1;
            }
        }
    }
    out
}

/// Sums an upstream gradient of `out_shape` down to the operand's (broadcast) shape.
fn reduce_broadcast(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    shape: Shape,
    out_shape: Shape,
    gout: &[f64],
    f: impl Fn(f64, usize) -> f64,
) {
    if shape == out_shape {
        match &mut grads[v.0] {
            Some(g) => {
                for (i, (gi, d)) in g.iter_mut().zip(gout).enumerate() {
                    *gi += f(*d, i);
                }
            }
            slot => *slot = Some(gout.iter().enumerate().map(|(i, d)| f(*d, i)).collect()),
        }
        return;
    }
    let g = grad_buf(grads, v, shape);
    let (sb, sr, sc) = shape.broadcast_strides();
    let mut o = 0;
    for b in 0..out_shape.batch {
        for r in 0..out_shape.rows {
            let base = b * sb + r * sr;
            for c in 0..out_shape.cols {
                g[base + c * sc] += f(gout[o], o);
                o += 1;
            }
        }
    }
}

/// Row/column strides of a `rows x cols` row-major block, optionally transposed.
fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c += alpha * op(a) * op(b)` on raw row-major blocks.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_cols: usize,
    b_t: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = strides(a_cols, a_t);
    let (rsb, csb) = strides(b_cols, b_t);
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe blocks that lie inside the given
    // slices; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm_forward(a: &Tensor, b: &Tensor, trans_b: bool, out: &mut Tensor) {
    let sa = a.shape();
    let sb = b.shape();
    let so = out.shape();
    let (m, k, n) = (sa.rows, sa.cols, so.cols);
    if sb.batch == 1 {
        // Broadcast weight: one large product over all stacked rows.
        dgemm(
            sa.batch * m,
            k,
            n,
            a.data(),
            k,
            false,
            b.data(),
            sb.cols,
            trans_b,
            out.data_mut(),
        );
        return;
    }
    let out_item = m * n;
    for bi in 0..so.batch {
        let ai = if sa.batch == 1 { 0 } else { bi };
        dgemm(
            m,
            k,
            n,
            a.item(ai),
            k,
            false,
            b.item(bi),
            sb.cols,
            trans_b,
            &mut out.data_mut()[bi * out_item..(bi + 1) * out_item],
        );
    }
}

/// dA += dC · op(B)ᵀ
fn gemm_grad_a(sa: Shape, b: &Tensor, trans_b: bool, gout: &[f64], so: Shape, ga: &mut [f64]) {
    let sb = b.shape();
    let (m, k, n) = (sa.rows, sa.cols, so.cols);
    // op(B) is k x n; its transpose is n x k, i.e. B read with flipped transposition.
    if sb.batch == 1 && sa.batch == so.batch {
        dgemm(
            sa.batch * m,
            n,
            k,
            gout,
            n,
            false,
            b.data(),
            sb.cols,
            !trans_b,
            ga,
        );
        return;
    }
    let a_item = m * k;
    for bi in 0..so.batch {
        let bj = if sb.batch == 1 { 0 } else { bi };
        let ai = if sa.batch == 1 { 0 } else { bi };
        dgemm(
            m,
            n,
            k,
            &gout[bi * m * n..(bi + 1) * m * n],
            n,
            false,
            b.item(bj),
            sb.cols,
            !trans_b,
            &mut ga[ai * a_item..(ai + 1) * a_item],
        );
    }
}

/// dB += Aᵀ · dC (or dCᵀ · A when the forward used Bᵀ).
fn gemm_grad_b(a: &Tensor, sb: Shape, trans_b: bool, gout: &[f64], so: Shape, gb: &mut [f64]) {
    let sa = a.shape();
    let (m, k, n) = (sa.rows, sa.cols, so.cols);
    if sb.batch == 1 && sa.batch == so.batch {
        let rows = sa.batch * m;
        if trans_b {
            // gb is n x k
            dgemm(n, rows, k, gout, n, true, a.data(), k, false, gb);
        } else {
            // gb is k x n
            dgemm(k, rows, n, a.data(), k, true, gout, n, false, gb);
        }
        return;
    }
    let b_item = k * n;
    for bi in 0..so.batch {
        let ai = if sa.batch == 1 { 0 } else { bi };
        let bj = if sb.batch == 1 { 0 } else { bi };
        let g = &gout[bi * m * n..(bi + 1) * m * n];
        let dst = &mut gb[bj * b_item..(bj + 1) * b_item];
        if trans_b {
            dgemm(n, m, k, g, n, true, a.item(ai), k, false, dst);
        } else {
            dgemm(k, m, n, a.item(ai), k, true, g, n, false, dst);
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh through a single `exp`; absolute error stays near one ulp of 1.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}
