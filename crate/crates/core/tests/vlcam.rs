use aeroreformer::params::{Bound, ParamStore};
use aeroreformer::vlcam::{
    cross_attention, cross_attention_with_maps, fuse, project_qkv, vlcam_forward, VlcamConfig,
    VlcamParams,
};
use aeroreformer::{ForwardCtx, Graph64, Tensor64, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn block(
    cfg: &VlcamConfig,
    tokens: usize,
    c_v: usize,
    c_l: usize,
    seed: u64,
) -> (ParamStore<f64>, VlcamParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = VlcamParams::new(&mut store, "v", cfg, tokens, c_v, c_l, &mut rng).unwrap();
    (store, p)
}

fn small_cfg() -> VlcamConfig {
    VlcamConfig {
        heads: 2,
        c_k: 4,
        ..VlcamConfig::default()
    }
}

fn forward(store: &ParamStore<f64>, p: &VlcamParams, f_v: &Tensor64, f_l: &Tensor64) -> Tensor64 {
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let v = g.constant(f_v.clone());
    let l = g.constant(f_l.clone());
    let out = vlcam_forward(&mut g, &b, p, v, l, &mut ForwardCtx::eval()).unwrap();
    g.value(out).clone()
}

#[test]
fn paper_scale_shape_contract() {
    let cfg = VlcamConfig::default();
    let (store, p) = block(&cfg, 196, 96, 32, 0);
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let f_v = g.constant(randn(&[196, 96], 1));
    let f_l = g.constant(randn(&[10, 32], 2));
    let (q, k, v) = project_qkv(&mut g, &b, &p, f_v, f_l).unwrap();
    assert_eq!(g.shape(q), &[196, 64]);
    assert_eq!(g.shape(k), &[10, 64]);
    assert_eq!(g.shape(v), &[10, 96]);
    let out = vlcam_forward(&mut g, &b, &p, f_v, f_l, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(g.shape(out), &[196, 96]);
}

#[test]
fn head_count_must_divide_widths() {
    let cfg = VlcamConfig {
        heads: 3,
        c_k: 8,
        ..VlcamConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let r = VlcamParams::new(
        &mut store,
        "v",
        &cfg,
        4,
        6,
        3,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(r, Err(TensorError::Config(_))));
    let mut g = Graph64::new();
    let q = g.constant(randn(&[4, 8], 0));
    let k = g.constant(randn(&[2, 8], 1));
    let v = g.constant(randn(&[2, 6], 2));
    assert!(matches!(
        cross_attention(&mut g, q, k, v, 3),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn token_count_must_match_positional_encoding() {
    let (store, p) = block(&small_cfg(), 6, 4, 3, 0);
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let f_v = g.constant(randn(&[5, 4], 1));
    let f_l = g.constant(randn(&[2, 3], 2));
    assert!(matches!(
        project_qkv(&mut g, &b, &p, f_v, f_l),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn identity_query_projection_with_zero_position_is_instance_norm() {
    let cfg = VlcamConfig {
        heads: 1,
        c_k: 4,
        ..VlcamConfig::default()
    };
    let (mut store, p) = block(&cfg, 6, 4, 3, 0);
    store.set(p.w_q, Tensor64::eye(4)).unwrap();
    store.set(p.p_v, Tensor64::zeros(&[6, 4])).unwrap();
    let f_v = randn(&[6, 4], 3);
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let fv = g.constant(f_v.clone());
    let fl = g.constant(randn(&[2, 3], 4));
    let (q, _, _) = project_qkv(&mut g, &b, &p, fv, fl).unwrap();
    let normed = g.instance_norm(fv).unwrap();
    assert!(g.value(q).max_abs_diff(g.value(normed)).unwrap() < 1e-15);
}

#[test]
fn single_language_token_broadcasts_its_value() {
    let mut g = Graph64::new();
    let q = g.constant(randn(&[7, 4], 0));
    let k = g.constant(randn(&[1, 4], 1));
    let vt = randn(&[1, 6], 2);
    let v = g.constant(vt.clone());
    let out = cross_attention(&mut g, q, k, v, 2).unwrap();
    for row in g.value(out).data().chunks(6) {
        assert_eq!(row, vt.data());
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let mut g = Graph64::new();
    let q = g.constant(randn(&[5, 4], 3));
    let key = randn(&[1, 4], 4);
    let keys: Vec<f64> = key.data().iter().cycle().take(12).copied().collect();
    let k = g.constant(Tensor64::from_f64(&[3, 4], &keys).unwrap());
    let v = g.constant(randn(&[3, 2], 5));
    let (_, maps) = cross_attention_with_maps(&mut g, q, k, v, 2).unwrap();
    for m in maps {
        assert!(g
            .value(m)
            .data()
            .iter()
            .all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }
}

#[test]
fn heads_decouple_into_independent_single_head_attention() {
    let (qt, kt, vt) = (randn(&[6, 8], 6), randn(&[3, 8], 7), randn(&[3, 4], 8));
    let mut g = Graph64::new();
    let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
    let two = cross_attention(&mut g, q, k, v, 2).unwrap();
    let mut parts = Vec::new();
    for h in 0..2 {
        let qh = g.slice(q, 1, 4 * h, 4 * h + 4).unwrap();
        let kh = g.slice(k, 1, 4 * h, 4 * h + 4).unwrap();
        let vh = g.slice(v, 1, 2 * h, 2 * h + 2).unwrap();
        parts.push(cross_attention(&mut g, qh, kh, vh, 1).unwrap());
    }
    let joined = g.concat(&parts, 1).unwrap();
    assert!(g.value(two).max_abs_diff(g.value(joined)).unwrap() < 1e-14);
}

#[test]
fn per_head_scale_uses_head_width() {
    // One query, two keys, one head of width 4: weights follow
    // softmax(q.k / 2).
    let mut g = Graph64::new();
    let q = g.constant(Tensor64::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let k =
        g.constant(Tensor64::from_f64(&[2, 4], &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let v = g.constant(Tensor64::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
    let out = cross_attention(&mut g, q, k, v, 1).unwrap();
    let expected = 1f64.exp() / (1f64.exp() + 1.0);
    assert!((g.value(out).item() - expected).abs() < 1e-15);
}

#[test]
fn fuse_examples() {
    let cfg = small_cfg();
    let (mut store, p) = block(&cfg, 5, 4, 3, 0);
    store.set(p.w_fuse, Tensor64::eye(4)).unwrap();
    let f_v = randn(&[5, 4], 9);
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let fv = g.constant(f_v);
    let ones = g.constant(Tensor64::ones(&[5, 4]));
    let fused = fuse(&mut g, &b, &p, ones, fv).unwrap();
    let normed = g.instance_norm(fv).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(normed)).unwrap() < 1e-15);

    let zeros = g.constant(Tensor64::zeros(&[5, 4]));
    let fused = fuse(&mut g, &b, &p, zeros, fv).unwrap();
    assert!(g.value(fused).data().iter().all(|&v| v == 0.0));

    let wrong = g.constant(Tensor64::zeros(&[4, 4]));
    assert!(matches!(
        fuse(&mut g, &b, &p, wrong, fv),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn fuse_residual_flag_adds_vision_features() {
    let plain = small_cfg();
    let residual = VlcamConfig {
        fuse_residual: true,
        ..small_cfg()
    };
    let (store, p) = block(&plain, 5, 4, 3, 1);
    let (_, pr) = block(&residual, 5, 4, 3, 1);
    let mut g = Graph64::new();
    let b = store.bind(&mut g, false);
    let fv = g.constant(randn(&[5, 4], 10));
    let fvl = g.constant(randn(&[5, 4], 11));
    let a = fuse(&mut g, &b, &p, fvl, fv).unwrap();
    let r = fuse(&mut g, &b, &pr, fvl, fv).unwrap();
    let diff = g.sub(r, a).unwrap();
    assert!(g.value(diff).max_abs_diff(g.value(fv)).unwrap() < 1e-15);
}

#[test]
fn eval_mode_is_bit_deterministic() {
    let (store, p) = block(&small_cfg(), 6, 4, 3, 2);
    let (f_v, f_l) = (randn(&[6, 4], 12), randn(&[3, 3], 13));
    assert_eq!(
        forward(&store, &p, &f_v, &f_l),
        forward(&store, &p, &f_v, &f_l)
    );
}

#[test]
fn train_mode_dropout_depends_on_seed() {
    let (store, p) = block(&small_cfg(), 6, 4, 3, 2);
    let run = |seed| {
        let mut g = Graph64::new();
        let b = store.bind(&mut g, false);
        let v = g.constant(randn(&[6, 4], 12));
        let l = g.constant(randn(&[3, 3], 13));
        let out = vlcam_forward(&mut g, &b, &p, v, l, &mut ForwardCtx::train(seed)).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

/// Every parameter of the block gets a nonzero gradient from a generic loss.
#[test]
fn no_dead_parameters() {
    let (mut store, p) = block(&small_cfg(), 6, 4, 3, 3);
    for id in p.ids() {
        let shape = store.get(id).shape().to_vec();
        let noisy = randn(&shape, id.index() as u64 + 100).map(|v| 0.3 * v);
        store.set(id, noisy).unwrap();
    }
    let mut g = Graph64::new();
    let b = store.bind(&mut g, true);
    let v = g.constant(randn(&[6, 4], 14));
    let l = g.constant(randn(&[3, 3], 15));
    let out = vlcam_forward(&mut g, &b, &p, v, l, &mut ForwardCtx::eval()).unwrap();
    let r = g.constant(randn(&[6, 4], 16));
    let m = g.mul(out, r).unwrap();
    let loss = g.sum(m).unwrap();
    g.backward(loss).unwrap();
    for (id, grad) in store.ids().zip(store.grads(&g, &b)) {
        assert!(grad.max_abs() > 1e-8, "{} has no gradient", store.name(id));
    }
}

/// Gradient through all three projections, with every parameter checked.
#[test]
fn projection_gradients_match_finite_differences() {
    let (store, p) = block(&small_cfg(), 5, 4, 3, 4);
    let mut inputs = vec![randn(&[5, 4], 17), randn(&[2, 3], 18)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = aeroreformer::gradcheck::check_gradients(
        |g, vars| {
            let b = Bound::from_vars(vars[2..].to_vec());
            let (q, k, v) = project_qkv(g, &b, &p, vars[0], vars[1])?;
            let mut total: Option<Var> = None;
            for (i, x) in [q, k, v].into_iter().enumerate() {
                let shape = g.shape(x).to_vec();
                let r = g.constant(randn(&shape, 200 + i as u64));
                let m = g.mul(x, r)?;
                let s = g.sum(m)?;
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.unwrap())
        },
        &inputs,
        &Default::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(
        tokens in 1usize..8, words in 1usize..6, seed in 0u64..5000, spread in 0.1f64..20.0
    ) {
        let mut g = Graph64::new();
        let q = g.constant(randn(&[tokens, 4], seed).map(|v| v * spread));
        let k = g.constant(randn(&[words, 4], seed + 1).map(|v| v * spread));
        let v = g.constant(randn(&[words, 2], seed + 2));
        let (_, maps) = cross_attention_with_maps(&mut g, q, k, v, 2).unwrap();
        for m in maps {
            for row in g.value(m).data().chunks(words) {
                prop_assert!(row.iter().all(|&a| a >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_matches_vision_input(tokens in 2usize..10, words in 1usize..5, seed in 0u64..1000) {
        let (store, p) = block(&small_cfg(), tokens, 4, 3, seed);
        let out = forward(&store, &p, &randn(&[tokens, 4], seed), &randn(&[words, 3], seed + 1));
        prop_assert_eq!(out.shape(), &[tokens, 4]);
    }

    #[test]
    fn language_token_order_is_irrelevant(words in 2usize..6, seed in 0u64..1000) {
        let (store, p) = block(&small_cfg(), 6, 4, 3, seed);
        let f_v = randn(&[6, 4], seed + 1);
        let f_l = randn(&[words, 3], seed + 2);
        let mut rows: Vec<&[f64]> = f_l.data().chunks(3).collect();
        rows.rotate_left(1);
        rows.swap(0, words - 1);
        let permuted: Vec<f64> = rows.concat();
        let f_lp = Tensor64::from_f64(&[words, 3], &permuted).unwrap();
        let a = forward(&store, &p, &f_v, &f_l);
        let b = forward(&store, &p, &f_v, &f_lp);
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
