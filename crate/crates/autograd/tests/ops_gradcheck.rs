use clvc_autograd::gradcheck::{numeric_gradient, rel_err};
use clvc_autograd::{Graph, Matrix, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::uniform(rows, cols, 1.0, &mut rng)
}

/// Checks d(loss)/d(x) for a scalar-valued graph function of one input.
fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = build(&mut g, xv);
    let grads = g.backward(out);
    let analytic = grads.of(xv).cloned().unwrap_or(Matrix::zeros(x.rows(), x.cols()));
    let numeric = numeric_gradient(&x, EPS, |probe| {
        let mut g = Graph::new();
        let xv = g.input(probe.clone());
        let out = build(&mut g, xv);
        g.scalar(out)
    });
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let e = rel_err(*a, *n, 1e-7);
        assert!(e < TOL, "analytic {a} numeric {n} rel err {e}");
    }
}

/// Weighted sum so every output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(Matrix::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.07 * j as f64));
    let p = g.mul(v, w);
    g.sum(p)
}

#[test]
fn matmul_and_transpose() {
    let b = random(4, 3, 1);
    check(random(2, 4, 2), move |g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv);
        let t = g.transpose(y);
        weighted_sum(g, t)
    });
}

#[test]
fn elementwise_nonlinearities() {
    check(random(3, 3, 3), |g, x| {
        let a = g.sigmoid(x);
        let b = g.tanh(x);
        let c = g.exp(x);
        let s = g.square(x);
        let l = g.add_scalar(s, 1.0);
        let l = g.log(l);
        let ab = g.mul(a, b);
        let y = g.add(ab, c);
        let y = g.sub(y, l);
        weighted_sum(g, y)
    });
}

#[test]
fn relu_away_from_kink() {
    let x = Matrix::from_vec(1, 4, vec![-0.7, 0.2, 1.3, -0.1]);
    check(x, |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y)
    });
}

#[test]
fn softmax_and_cross_entropy() {
    check(random(4, 5, 4), |g, x| {
        let s = g.softmax_rows(x);
        weighted_sum(g, s)
    });
    check(random(4, 5, 5), |g, x| g.cross_entropy(x, &[0, 4, 2, 2]));
}

#[test]
fn broadcasts_and_scalars() {
    let row = random(1, 3, 6);
    let col = random(4, 1, 7);
    check(random(4, 3, 8), move |g, x| {
        let r = g.constant(row.clone());
        let c = g.constant(col.clone());
        let y = g.add_row(x, r);
        let y = g.mul_col(y, c);
        let s = g.slice_rows(x, 1, 1);
        let s = g.slice_cols(s, 2, 1);
        let y = g.scale_by(y, s);
        let y = g.add_by(y, s);
        let y = g.scale(y, -1.5);
        weighted_sum(g, y)
    });
    // Gradient through the broadcast operands themselves.
    let base = random(4, 3, 9);
    check(random(1, 3, 10), move |g, r| {
        let b = g.constant(base.clone());
        let y = g.add_row(b, r);
        let sq = g.square(y);
        g.mean(sq)
    });
    let base = random(4, 3, 11);
    check(random(4, 1, 12), move |g, c| {
        let b = g.constant(base.clone());
        let y = g.mul_col(b, c);
        let sq = g.square(y);
        g.sum(sq)
    });
}

#[test]
fn structural_ops() {
    check(random(5, 2, 13), |g, x| {
        let a = g.slice_rows(x, 1, 3);
        let b = g.pad_rows(a, 1, 1);
        let c = g.concat_cols(&[b, x]);
        let d = g.concat_rows(&[c, c]);
        let e = g.gather_rows(x, &[Some(4), None, Some(0), Some(4)]);
        let f = g.reshape(e, 2, 4);
        let sc = g.sum_cols(f);
        let s1 = weighted_sum(g, d);
        let s2 = weighted_sum(g, sc);
        g.add(s1, s2)
    });
}

#[test]
fn unfold_matches_convolution() {
    check(random(6, 2, 14), |g, x| {
        let u = g.unfold(x, 3, 1, 0, 6);
        let u2 = g.unfold(x, 5, 2, 2, 3);
        let a = weighted_sum(g, u);
        let b = weighted_sum(g, u2);
        g.add(a, b)
    });
}

#[test]
fn normalization_and_diag() {
    check(random(3, 4, 15), |g, x| {
        let n = g.l2_normalize_rows(x);
        weighted_sum(g, n)
    });
    check(random(1, 4, 16), |g, x| {
        let d = g.diag(x);
        weighted_sum(g, d)
    });
}

#[test]
fn unfold_layout() {
    let mut g = Graph::new();
    let x = g.constant(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
    let u = g.unfold(x, 3, 1, 0, 3);
    assert_eq!(
        g.value(u).data(),
        &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
    );
}
