use tsd_autograd::finite_diff::{central_diff, relative_error};
use tsd_autograd::{Graph, Shape, Tensor, Var};

/// Deterministic pseudo-random values in [-1, 1] without pulling in an RNG crate.
fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
fn check(shapes: &[Shape], build: impl Fn(&mut Graph, &[Var]) -> Var, seed: u64) {
    let sizes: Vec<usize> = shapes.iter().map(Shape::numel).collect();
    let total: usize = sizes.iter().sum();
    let point = values(total, seed);

    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let mut offset = 0;
        for (s, n) in shapes.iter().zip(&sizes) {
            vars.push(g.param(Tensor::from_vec(*s, flat[offset..offset + n].to_vec())));
            offset += n;
        }
        let out = build(&mut g, &vars);
        let weights = g.constant(Tensor::from_vec(
            g.shape(out),
            values(g.shape(out).numel(), seed ^ 0xabcdef),
        ));
        let weighted = g.mul(out, weights);
        let loss = g.sum(weighted);
        let value = g.value(loss).data()[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss);
        let mut flat_grad = Vec::with_capacity(total);
        for (v, n) in vars.iter().zip(&sizes) {
            match grads.get(*v) {
                Some(gr) => flat_grad.extend_from_slice(gr),
                None => flat_grad.extend(std::iter::repeat_n(0.0, *n)),
            }
        }
        (value, flat_grad)
    };

    let (_, analytic) = eval(&point, true);
    let numeric = central_diff(|x| eval(x, false).0, &point, 1e-6);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(*a, *n, 1e-6);
        assert!(
            err < 1e-5,
            "param {i}: analytic {a} vs numeric {n} (rel {err})"
        );
    }
}

const S234: Shape = Shape::new(2, 3, 4);

#[test]
fn matmul_all_broadcast_forms() {
    check(&[S234, Shape::new(1, 4, 5)], |g, v| g.matmul(v[0], v[1]), 1);
    check(&[S234, Shape::new(2, 4, 5)], |g, v| g.matmul(v[0], v[1]), 2);
    check(
        &[Shape::new(1, 3, 4), Shape::new(2, 4, 5)],
        |g, v| g.matmul(v[0], v[1]),
        3,
    );
    check(
        &[S234, Shape::new(2, 5, 4)],
        |g, v| g.matmul_nt(v[0], v[1]),
        4,
    );
    check(
        &[S234, Shape::new(1, 5, 4)],
        |g, v| g.matmul_nt(v[0], v[1]),
        5,
    );
    check(
        &[Shape::new(1, 3, 4), Shape::new(2, 5, 4)],
        |g, v| g.matmul_nt(v[0], v[1]),
        6,
    );
}

#[test]
fn broadcast_arithmetic() {
    for (i, other) in [
        S234,
        Shape::new(1, 1, 4),
        Shape::new(2, 3, 1),
        Shape::new(1, 3, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = 10 + i as u64;
        check(&[S234, other], |g, v| g.add(v[0], v[1]), seed);
        check(&[S234, other], |g, v| g.sub(v[0], v[1]), seed + 100);
        check(&[other, S234], |g, v| g.mul(v[0], v[1]), seed + 200);
        check(
            &[S234, other],
            |g, v| {
                // keep the divisor away from zero
                let e = g.exp(v[1]);
                g.div(v[0], e)
            },
            seed + 300,
        );
    }
    // both operands broadcast
    check(
        &[Shape::new(1, 1, 4), Shape::new(2, 3, 1)],
        |g, v| g.mul(v[0], v[1]),
        40,
    );
}

#[test]
fn unary_ops() {
    check(&[S234], |g, v| g.gelu(v[0]), 50);
    check(&[S234], |g, v| g.softplus(v[0]), 51);
    check(&[S234], |g, v| g.exp(v[0]), 52);
    check(
        &[S234],
        |g, v| {
            let e = g.exp(v[0]);
            g.ln(e)
        },
        53,
    );
    check(&[S234], |g, v| g.abs(v[0]), 54);
    check(&[S234], |g, v| g.scale(v[0], -2.5), 55);
    check(&[S234], |g, v| g.add_scalar(v[0], 3.0), 56);
}

#[test]
fn row_ops() {
    check(&[S234], |g, v| g.softmax(v[0]), 60);
    check(&[S234], |g, v| g.layer_norm(v[0]), 61);
    check(&[S234], |g, v| g.transpose(v[0]), 62);
    check(&[S234], |g, v| g.sum_cols(v[0]), 63);
    check(&[S234], |g, v| g.sum_rows(v[0]), 64);
    check(&[S234], |g, v| g.mean_rows(v[0]), 65);
    check(&[S234], |g, v| g.sum_batch(v[0]), 66);
    check(&[S234], |g, v| g.mean_batch(v[0]), 67);
    check(&[S234], |g, v| g.sum(v[0]), 68);
}

#[test]
fn slicing_and_concatenation() {
    check(&[S234], |g, v| g.slice_cols(v[0], 1, 2), 70);
    check(&[S234], |g, v| g.slice_rows(v[0], 1, 2), 71);
    check(
        &[S234, Shape::new(2, 3, 2)],
        |g, v| g.concat_cols(&[v[0], v[1], v[0]]),
        72,
    );
    check(
        &[S234, Shape::new(2, 1, 4)],
        |g, v| g.concat_rows(&[v[1], v[0], v[1]]),
        73,
    );
}

#[test]
fn composite_attention_like_expression() {
    let q = Shape::new(2, 3, 4);
    let k = Shape::new(2, 5, 4);
    check(
        &[q, k, Shape::new(1, 4, 4)],
        |g, v| {
            let kp = g.matmul(v[1], v[2]);
            let s = g.matmul_nt(v[0], kp);
            let s = g.scale(s, 0.5);
            let p = g.softmax(s);
            let o = g.matmul(p, v[1]);
            let n = g.layer_norm(o);
            g.gelu(n)
        },
        80,
    );
}

#[test]
fn detached_values_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(S234, values(24, 90)));
    let d = g.detach(x);
    let y = g.mul(d, x);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.get(d).is_none());
    let gx = grads.get(x).unwrap();
    // only the non-detached factor contributes: d/dx (c * x) = c
    for (gi, xi) in gx.iter().zip(g.value(x).data()) {
        assert_eq!(*gi, *xi);
    }
}

#[test]
fn constants_are_skipped() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(S234, 2.0));
    let x = g.param(Tensor::full(Shape::new(1, 1, 4), 1.0));
    let y = g.mul(c, x);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[12.0; 4]);
}

#[test]
fn softmax_is_exactly_zero_on_masked_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, vec![0.3, -1e9, 1.2]));
    let p = g.softmax(x);
    assert_eq!(g.value(p).data()[1], 0.0);
    assert!((g.value(p).sum() - 1.0).abs() < 1e-15);
}
