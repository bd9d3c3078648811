use aeroreformer::gradcheck::{check_gradients, finite_diff_grad, relative_error, CheckOptions};
use aeroreformer::{Graph64, Tensor64, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor64::from_f64(shape, data).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max relative error of `sum(f(inputs) * R)` for a fixed random `R`.
fn grad_err(
    inputs: Vec<Tensor64>,
    f: impl Fn(&mut Graph64, &[aeroreformer::Var]) -> aeroreformer::Result<aeroreformer::Var>,
) -> f64 {
    check_gradients(
        |g, v| {
            let out = f(g, v)?;
            let r = g.constant(randn(g.shape(out), 99));
            let m = g.mul(out, r)?;
            g.sum(m)
        },
        &inputs,
        &CheckOptions::default(),
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph64::new();
    let m = randn(&[3, 4], 1);
    let i = g.constant(Tensor64::eye(3));
    let mv = g.constant(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph64::new();
    let a = g.constant(Tensor64::zeros(&[2, 3]));
    let b = g.constant(Tensor64::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_5x7_7x3() {
    let err = grad_err(vec![randn(&[5, 7], 2), randn(&[7, 3], 3)], |g, v| {
        g.matmul(v[0], v[1])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv1d_examples() {
    let mut g = Graph64::new();
    let x = randn(&[4, 3], 4);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor64::eye(3));
    let b = g.constant(Tensor64::zeros(&[3]));
    let y = g.conv1d(xv, w, b).unwrap();
    assert_eq!(g.value(y), &x);

    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let b = g.constant(Tensor64::zeros(&[2]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);

    let bad = g.constant(Tensor64::zeros(&[2, 3]));
    assert!(matches!(
        g.conv1d(x, bad, b),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn conv1d_gradient_6x4() {
    let err = grad_err(
        vec![randn(&[6, 4], 5), randn(&[3, 4], 6), randn(&[3], 7)],
        |g, v| g.conv1d(v[0], v[1], v[2]),
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv2d_examples() {
    let mut g = Graph64::new();
    let x = randn(&[1, 4, 5], 8);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor64::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let c = g.constant(Tensor64::full(&[1, 5, 5], 2.5));
    let avg = g.constant(Tensor64::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d(c, avg, None, 1, 1).unwrap();
    let out = g.value(y);
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((out.at(&[0, yy, xx]) - 2.5).abs() < 1e-12);
        }
    }

    let small = g.constant(Tensor64::zeros(&[1, 2, 2]));
    let k3 = g.constant(Tensor64::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(small, k3, None, 1, 0).is_err());
}

#[test]
fn conv2d_gradient_2x5x5() {
    let err = grad_err(
        vec![
            randn(&[2, 5, 5], 9),
            randn(&[3, 2, 3, 3], 10),
            randn(&[3], 11),
        ],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph64::new();
    // Column [-1, 1, -1, 1] has mean 0 and population variance 1.
    let x = t(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]);
    let xv = g.constant(x.clone());
    let y = g.instance_norm(xv).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5);
    }
    let c = g.constant(Tensor64::full(&[5, 2], 3.0));
    let y = g.instance_norm(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let one_row = g.constant(Tensor64::ones(&[1, 3]));
    assert!(matches!(
        g.instance_norm(one_row),
        Err(TensorError::Degenerate { .. })
    ));
}

#[test]
fn instance_norm_gradient_8x4() {
    let err = grad_err(vec![randn(&[8, 4], 12)], |g, v| g.instance_norm(v[0]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph64::new();
    let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[1, 2], &[1000.0, 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
}

#[test]
fn softmax_gradient_3x5() {
    let err = grad_err(vec![randn(&[3, 5], 13)], |g, v| g.softmax_lastdim(v[0]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_examples() {
    let x = randn(&[3, 2], 14);
    let mut g = Graph64::new();
    let xv = g.param(x.clone());
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph64::new();
    let xv = g.param(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn unused_leaves_get_zero_gradients() {
    let mut g = Graph64::new();
    let a = g.param(randn(&[2], 15));
    let unused = g.param(randn(&[3], 16));
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &Tensor64::zeros(&[3]));
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph64::new();
    let x = g.param(randn(&[2, 2], 17));
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));

    let detached = g.constant(Tensor64::scalar(1.0));
    assert!(matches!(g.backward(detached), Err(TensorError::EmptyTape)));

    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.is_consumed());
    assert!(matches!(g.backward(s), Err(TensorError::TapeConsumed)));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph64::new();
    let x = g.constant(t(&[1], &[1e300]));
    assert!(matches!(g.mul(x, x), Err(TensorError::NonFinite { .. })));
    assert!(Tensor64::from_f64(&[1], &[f64::NAN]).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = randn(&[4], 18);
    let d = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
    assert!(d.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    let d = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &t(&[1], &[3.0]), 1e-5).unwrap();
    assert!((d.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn finite_diff_agrees_with_backward_on_matmul_chain() {
    let a = randn(&[3, 4], 19);
    let b = randn(&[4, 2], 20);
    let c = randn(&[2, 3], 21);
    let loss = |g: &mut Graph64, av| -> aeroreformer::Result<aeroreformer::Var> {
        let bv = g.constant(b.clone());
        let cv = g.constant(c.clone());
        let ab = g.matmul(av, bv)?;
        let abc = g.matmul(ab, cv)?;
        let sq = g.mul(abc, abc)?;
        g.sum(sq)
    };
    let mut g = Graph64::new();
    let av = g.param(a.clone());
    let l = loss(&mut g, av).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(av).unwrap().clone();
    let numeric = finite_diff_grad(
        |t| {
            let mut g = Graph64::new();
            let av = g.constant(t.clone());
            let l = loss(&mut g, av)?;
            Ok(g.value(l).item())
        },
        &a,
        1e-5,
    )
    .unwrap();
    for (x, y) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*x, *y) < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn dropout_is_seeded_and_scaled() {
    let x = Tensor64::ones(&[10, 10]);
    let run = |seed| {
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = g
            .dropout(xv, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));

    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let same = g
        .dropout(xv, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(g.value(same), &x);
    assert!(g
        .dropout(xv, 1.0, &mut ChaCha8Rng::seed_from_u64(0))
        .is_err());

    let mut ctx = aeroreformer::ForwardCtx::eval();
    let id = ctx.dropout(&mut g, xv, 0.5).unwrap();
    assert_eq!(id, xv);
}

#[test]
fn upsample_and_pool_shapes() {
    let mut g = Graph64::new();
    let x = g.constant(randn(&[2, 3, 4], 22));
    let up = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(up), &[2, 6, 8]);
    let p = g.global_avg_pool(up).unwrap();
    assert_eq!(g.shape(p), &[2]);
    let c = g.constant(Tensor64::full(&[1, 2, 2], 4.0));
    let up = g.upsample_bilinear(c, 4).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 4.0).abs() < 1e-15));
}

#[test]
fn cross_entropy_of_confident_correct_logits_is_small() {
    let mut g = Graph64::new();
    let logits = g.constant(t(&[2, 1, 2], &[10.0, -10.0, -10.0, 10.0]));
    let l = g.cross_entropy_2class(logits, &[false, true]).unwrap();
    assert!(g.value(l).item() < 1e-8);
    let even = g.constant(Tensor64::zeros(&[2, 1, 2]));
    let l = g.cross_entropy_2class(even, &[false, true]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor64> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0..50.0f64, r * c)
            .prop_map(move |d| Tensor64::from_f64(&[r, c], &d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(8)) {
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = g.softmax_lastdim(xv).unwrap();
        let n = x.shape()[1];
        for row in g.value(y).data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_standardizes(rows in 2usize..10, cols in 1usize..5, seed in 0u64..1000) {
        let x = randn(&[rows, cols], seed).map(|v| 3.0 * v + 1.5);
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = g.instance_norm(xv).unwrap();
        let yd = g.value(y).data();
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| yd[r * cols + c]).collect();
            let raw: Vec<f64> = (0..rows).map(|r| x.data()[r * cols + c]).collect();
            let rm = raw.iter().sum::<f64>() / rows as f64;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / rows as f64;
            let m = col.iter().sum::<f64>() / rows as f64;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(m.abs() < 1e-9);
            // Exact target accounting for the variance guard.
            prop_assert!((v - rv / (rv + 1e-5)).abs() < 1e-9);
            if rv > 1e-1 {
                prop_assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(x in matrix(6)) {
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = g.l2_normalize_rows(xv).unwrap();
        let d = x.shape()[1];
        for (row, raw) in g.value(y).data().chunks(d).zip(x.data().chunks(d)) {
            if raw.iter().any(|&v| v != 0.0) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_an_involution(x in matrix(6)) {
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let t1 = g.transpose(xv).unwrap();
        let t2 = g.transpose(t1).unwrap();
        prop_assert_eq!(g.value(t2), &x);
    }

    #[test]
    fn matmul_gradient_matches_oracle(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..10_000) {
        let err = grad_err(vec![randn(&[m, k], seed), randn(&[k, n], seed + 1)], |g, v| g.matmul(v[0], v[1]));
        prop_assert!(err < 1e-6);
    }
}
