use kvlp_tensor::gradcheck::check_gradients;
use kvlp_tensor::{Graph, Graph64, Reduction, Tensor, Tensor64, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const OP_TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

/// Runs a finite-difference check of `loss = sum(weights ⊙ f(inputs))` so
/// every output element contributes with a distinct weight.
fn fd_check(inputs: &[Tensor64], f: impl Fn(&mut Graph64, &[Var]) -> kvlp_tensor::Result<Var>) -> f64 {
    let report = check_gradients(inputs, STEP, |g, v| {
        let out = f(g, v)?;
        if g.value(out).len() == 1 {
            return Ok(out);
        }
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::from_vec(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let w = g.constant(w)?;
        let m = g.mul(out, w)?;
        g.sum(m)
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn matmul_examples() {
    let mut g = Graph64::new();
    let i2 = g.constant(Tensor::eye(2)).unwrap();
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 1], &[2.])).unwrap();
    let b = g.constant(t(&[1, 1], &[3.])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph64::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_gradients() {
    let e = fd_check(&[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]));
    assert!(e <= OP_TOL, "{e}");
    let e = fd_check(&[rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |g, v| g.matmul_nt(v[0], v[1]));
    assert!(e <= OP_TOL, "{e}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph64::new();
    let x = g.constant(t(&[3], &[0., 0., 0.])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = g.constant(t(&[2], &[0., 2f64.ln()])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_gradients_both_axes() {
    let e = fd_check(&[rand_t(&[5], 5)], |g, v| g.softmax(v[0], 0));
    assert!(e <= OP_TOL, "{e}");
    let e = fd_check(&[rand_t(&[3, 4], 6)], |g, v| g.softmax(v[0], 0));
    assert!(e <= OP_TOL, "{e}");
    let e = fd_check(&[rand_t(&[3, 4], 7)], |g, v| g.softmax(v[0], 1));
    assert!(e <= OP_TOL, "{e}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph64::new();
    let gain = g.constant(Tensor::ones([2])).unwrap();
    let bias = g.constant(Tensor::zeros([2])).unwrap();
    let x = g.constant(t(&[1, 2], &[1., 3.])).unwrap();
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1., 1.]);

    let gain = g.constant(Tensor::ones([3])).unwrap();
    let bias = g.constant(Tensor::zeros([3])).unwrap();
    let x = g.constant(t(&[1, 3], &[5., 5., 5.])).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);
}

#[test]
fn layer_norm_zero_variance_without_eps_is_error() {
    let mut g = Graph64::new();
    let gain = g.constant(Tensor::ones([2])).unwrap();
    let bias = g.constant(Tensor::zeros([2])).unwrap();
    let x = g.constant(t(&[1, 2], &[1., 1.])).unwrap();
    assert!(matches!(g.layer_norm(x, gain, bias, 0.0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn layer_norm_gradients() {
    let e = fd_check(&[rand_t(&[2, 4], 8), rand_t(&[4], 9), rand_t(&[4], 10)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    assert!(e <= OP_TOL, "{e}");
}

#[test]
fn backward_examples() {
    let mut g = Graph64::new();
    let w = g.leaf(t(&[3], &[0.5, -1.0, 2.0]), true).unwrap();
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph64::new();
    let w = g.leaf(t(&[1, 3], &[0.5, -1.0, 2.0]), true).unwrap();
    let q = g.matmul_nt(w, w).unwrap();
    let s = g.sum(q).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1., -2., 4.]);
}

#[test]
fn backward_accumulates_and_resets() {
    let mut g = Graph64::new();
    let w = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2., 2.]);
    g.zero_grad();
    assert!(g.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph64::new();
    let w = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
    assert!(matches!(g.backward(w), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph64::new();
    assert!(g.leaf(t(&[1], &[f64::NAN]), true).is_err());
    let x = g.leaf(t(&[1], &[1e300]), true).unwrap();
    let y = g.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn elementwise_gradients() {
    let a = rand_t(&[2, 3], 11);
    let b = rand_t(&[2, 3], 12);
    let cases: Vec<(&str, f64)> = vec![
        ("add", fd_check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub", fd_check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul", fd_check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))),
        ("scale", fd_check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5))),
        ("add_row", fd_check(&[a.clone(), rand_t(&[3], 13)], |g, v| g.add_row(v[0], v[1]))),
        ("sigmoid", fd_check(std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]))),
        ("gelu", fd_check(std::slice::from_ref(&a), |g, v| g.gelu(v[0]))),
        ("leaky_relu", fd_check(std::slice::from_ref(&a), |g, v| g.leaky_relu(v[0], 0.2))),
        ("transpose", fd_check(std::slice::from_ref(&a), |g, v| g.transpose(v[0]))),
    ];
    for (name, e) in cases {
        assert!(e <= OP_TOL, "{name}: {e}");
    }
}

#[test]
fn structural_gradients() {
    let a = rand_t(&[2, 3], 14);
    let b = rand_t(&[2, 2], 15);
    let c = rand_t(&[1, 3], 16);
    let e = fd_check(&[a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]], 1));
    assert!(e <= OP_TOL, "concat cols {e}");
    let e = fd_check(&[a.clone(), c], |g, v| g.concat(&[v[0], v[1]], 0));
    assert!(e <= OP_TOL, "concat rows {e}");
    let e = fd_check(std::slice::from_ref(&a), |g, v| g.slice(v[0], 1, 1, 2));
    assert!(e <= OP_TOL, "slice cols {e}");
    let e = fd_check(&[rand_t(&[4, 3], 17)], |g, v| g.slice(v[0], 0, 1, 2));
    assert!(e <= OP_TOL, "slice rows {e}");
    let e = fd_check(&[rand_t(&[5, 3], 18)], |g, v| g.gather(v[0], &[4, 0, 4, 2]));
    assert!(e <= OP_TOL, "gather {e}");
}

#[test]
fn loss_gradients() {
    let x = rand_t(&[3, 4], 19);
    let y = rand_t(&[3, 4], 20);
    let e = fd_check(&[x.clone(), y], |g, v| g.mse(v[0], v[1]));
    assert!(e <= OP_TOL, "mse {e}");
    let targets = [1.0, 0.0, 0.0, 1.0];
    let e = fd_check(&[rand_t(&[4], 21)], |g, v| g.bce_with_logits(v[0], &targets, Reduction::Sum));
    assert!(e <= OP_TOL, "bce {e}");
    let e = fd_check(std::slice::from_ref(&x), |g, v| g.cross_entropy(v[0], &[3, 0, 1], Reduction::Mean));
    assert!(e <= OP_TOL, "ce {e}");
    let e = fd_check(std::slice::from_ref(&x), |g, v| g.l2_norm(v[0]));
    assert!(e <= OP_TOL, "l2 {e}");
    let e = fd_check(&[x], |g, v| g.mean(v[0]));
    assert!(e <= OP_TOL, "mean {e}");
}

#[test]
fn loss_values() {
    let mut g = Graph64::new();
    // uniform logits over V classes cost ln V per row
    let z = g.constant(Tensor::zeros([2, 7])).unwrap();
    let ce = g.cross_entropy(z, &[3, 6], Reduction::Mean).unwrap();
    assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-12);

    let z = g.constant(Tensor::zeros([5])).unwrap();
    let bce = g.bce_with_logits(z, &[1., 0., 1., 0., 0.], Reduction::Sum).unwrap();
    assert!((g.value(bce).item() - 5.0 * 2f64.ln()).abs() < 1e-12);

    let p = g.constant(Tensor::zeros([4])).unwrap();
    let q = g.constant(Tensor::full([4], 0.5)).unwrap();
    let m = g.mse(p, q).unwrap();
    assert!((g.value(m).item() - 0.25).abs() < 1e-12);

    let x = g.constant(t(&[2], &[3., 4.])).unwrap();
    let n = g.l2_norm(x).unwrap();
    assert_eq!(g.value(n).item(), 5.0);
}

#[test]
fn identical_op_sequences_are_bitwise_identical() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(rand_t(&[4, 6], 30).cast(), true).unwrap();
        let b = g.leaf(rand_t(&[6, 3], 31).cast(), true).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.sum(s).unwrap();
        let h = g.gelu(c).unwrap();
        let m = g.mean(h).unwrap();
        let tot = g.add(l, m).unwrap();
        g.backward(tot).unwrap();
        (g.value(s).clone(), g.grad(a).unwrap().clone())
    };
    let (s1, g1) = run();
    let (s2, g2) = run();
    assert_eq!(s1.data(), s2.data());
    assert_eq!(g1.data(), g2.data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph64::new();
        let x = g.constant(Tensor::from_vec([3, 4], data.clone()).unwrap()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let xs = g.constant(Tensor::from_vec([3, 4], data.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
        let ys = g.softmax(xs, 1).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)).unwrap() < 1e-9);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(seed in 0u64..1000) {
        let e = fd_check(&[rand_t(&[3, 4], seed), rand_t(&[4, 2], seed + 7919)], |g, v| g.matmul(v[0], v[1]));
        prop_assert!(e <= OP_TOL);
    }
}
