mod common;

use aeroreformer::gradcheck::{check_gradients, CheckOptions};
use aeroreformer::metrics::BinaryMask;
use aeroreformer::model::{
    predict_mask, read_checkpoint, synthetic_sample, train_smoke, write_checkpoint,
    CheckpointError, ModelConfig, TrainError, TrainOptions,
};
use aeroreformer::params::Bound;
use aeroreformer::{ForwardCtx, Model64, Tensor64, TensorError};
use common::Map;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smoke(vlcam: bool, ramsf: bool) -> ModelConfig {
    ModelConfig {
        enable_vlcam: vlcam,
        enable_ramsf: ramsf,
        ..ModelConfig::smoke()
    }
}

fn image(size: usize, seed: u64) -> Tensor64 {
    Tensor64::uniform(
        &[3, size, size],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[test]
fn smoke_forward_shape() {
    let m = Model64::new(smoke(true, true)).unwrap();
    let out = m.infer(&image(64, 0), &[1, 2, 3, 4, 5]).unwrap();
    assert_eq!(out.shape(), &[2, 64, 64]);
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn eval_forward_is_deterministic() {
    for (v, r) in [(true, true), (false, true), (true, false), (false, false)] {
        let m = Model64::new(smoke(v, r)).unwrap();
        let x = image(64, 1);
        assert_eq!(m.infer(&x, &[7, 8]).unwrap(), m.infer(&x, &[7, 8]).unwrap());
        let again = Model64::new(smoke(v, r)).unwrap();
        assert_eq!(
            m.infer(&x, &[7, 8]).unwrap(),
            again.infer(&x, &[7, 8]).unwrap()
        );
    }
}

#[test]
fn token_contract_is_enforced() {
    let m = Model64::new(smoke(true, true)).unwrap();
    let x = image(64, 2);
    let too_many: Vec<usize> = (0..21).collect();
    assert!(matches!(
        m.infer(&x, &too_many),
        Err(TensorError::Contract(_))
    ));
    assert!(matches!(m.infer(&x, &[]), Err(TensorError::Contract(_))));
    assert!(matches!(
        m.infer(&x, &[1000]),
        Err(TensorError::Contract(_))
    ));
    let max: Vec<usize> = (0..20).collect();
    assert!(m.infer(&x, &max).is_ok());
}

#[test]
fn image_size_contract_is_enforced() {
    let bad = ModelConfig {
        image_size: 100,
        ..smoke(false, false)
    };
    assert!(matches!(
        Model64::new(bad),
        Err(TensorError::InvalidShape { .. })
    ));
    let tiny = ModelConfig {
        image_size: 32,
        ..smoke(true, false)
    };
    assert!(matches!(Model64::new(tiny), Err(TensorError::Config(_))));
    let m = Model64::new(smoke(false, false)).unwrap();
    assert!(matches!(
        m.infer(&image(96, 0), &[1]),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn language_changes_the_output_only_through_fusion() {
    let x = image(64, 3);
    let with = Model64::new(smoke(true, true)).unwrap();
    assert_ne!(
        with.infer(&x, &[1, 2]).unwrap(),
        with.infer(&x, &[3, 4]).unwrap()
    );
    let without = Model64::new(smoke(false, true)).unwrap();
    assert_eq!(
        without.infer(&x, &[1, 2]).unwrap(),
        without.infer(&x, &[3, 4]).unwrap()
    );
}

fn to_map(t: &Tensor64) -> Map {
    let s = t.shape();
    Map {
        c: s[0],
        h: s[1],
        w: s[2],
        data: t.data().to_vec(),
    }
}

#[test]
fn baseline_matches_reference_path() {
    for seed in 0..3 {
        let cfg = ModelConfig {
            seed,
            ..smoke(false, false)
        };
        let mut m = Model64::new(cfg).unwrap();
        // Nonzero biases so the reference exercises them too.
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            if m.store.name(id).ends_with(".b") {
                let n = m.store.get(id).numel();
                let b = Tensor64::randn(
                    &[n],
                    0.1,
                    &mut ChaCha8Rng::seed_from_u64(seed + id.index() as u64),
                );
                m.store.set(id, b).unwrap();
            }
        }
        let x = image(64, 10 + seed);
        let got = m.infer(&x, &[1]).unwrap();
        let want = common::baseline_forward(&m.store, &to_map(&x));
        let diff = got
            .data()
            .iter()
            .zip(&want.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn predict_mask_examples() {
    let mut d = vec![0.0; 2 * 6];
    d[6..].fill(1.0);
    let all = predict_mask(&Tensor64::from_f64(&[2, 2, 3], &d).unwrap()).unwrap();
    assert_eq!(all.count(), 6);
    let ties = predict_mask(&Tensor64::full(&[2, 3, 2], 0.25)).unwrap();
    assert_eq!(ties, BinaryMask::empty(3, 2));
    assert!(predict_mask(&Tensor64::zeros(&[3, 2, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_mask_matches_pixelwise_comparison(h in 1usize..12, w in 1usize..12, seed in 0u64..10_000) {
        let logits = Tensor64::randn(&[2, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mask = predict_mask(&logits).unwrap();
        prop_assert_eq!((mask.height(), mask.width()), (h, w));
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(mask.get(y, x), logits.at(&[1, y, x]) > logits.at(&[0, y, x]));
            }
        }
    }
}

#[test]
fn mask_shape_follows_input_size() {
    for size in [64, 96, 128] {
        for (v, r) in [(true, true), (false, false)] {
            let cfg = ModelConfig {
                image_size: size,
                ..smoke(v, r)
            };
            let m = Model64::new(cfg).unwrap();
            let mask = predict_mask(&m.infer(&image(size, 4), &[5]).unwrap()).unwrap();
            assert_eq!((mask.height(), mask.width()), (size, size));
        }
    }
}

// ---- parameter accounting ---------------------------------------------------

#[test]
fn parameter_counts_follow_closed_form() {
    for base in [ModelConfig::smoke(), ModelConfig::default()] {
        let count = |v, r| {
            Model64::new(ModelConfig {
                enable_vlcam: v,
                enable_ramsf: r,
                ..base.clone()
            })
            .unwrap()
            .param_count()
        };
        let none = count(false, false);
        assert_eq!(none, common::baseline_count(&base));
        assert_eq!(count(true, false) - none, common::vlcam_count(&base));
        assert_eq!(count(false, true) - none, common::ramsf_delta(&base));
        assert_eq!(
            count(true, true) - none,
            common::vlcam_count(&base) + common::ramsf_delta(&base)
        );
    }
}

// ---- training ---------------------------------------------------------------

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut cfg = smoke(true, true);
    cfg.vlcam.dropout = 0.0;
    let mut m = Model64::new(cfg).unwrap();
    let sample = synthetic_sample(64, 0);
    let opts = TrainOptions {
        iters: 5,
        lr: 0.0,
        ..TrainOptions::default()
    };
    let before = m.store.clone();
    let losses = train_smoke(&mut m, &sample, &opts).unwrap();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|&l| l == losses[0]));
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_rejects_zero_iterations() {
    let mut m = Model64::new(smoke(false, false)).unwrap();
    let r = train_smoke(
        &mut m,
        &synthetic_sample(64, 0),
        &TrainOptions {
            iters: 0,
            ..TrainOptions::default()
        },
    );
    assert!(matches!(
        r,
        Err(TrainError::Tensor(TensorError::Contract(_)))
    ));
}

#[test]
fn divergence_reports_the_iteration() {
    let mut m = Model64::new(smoke(false, false)).unwrap();
    let opts = TrainOptions {
        iters: 10,
        lr: 1e300,
        ..TrainOptions::default()
    };
    match train_smoke(&mut m, &synthetic_sample(64, 0), &opts) {
        Err(TrainError::Diverged { iteration, .. }) => assert!(iteration >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn short_training_reduces_loss() {
    let mut m = Model64::new(smoke(true, true)).unwrap();
    let losses = train_smoke(
        &mut m,
        &synthetic_sample(64, 0),
        &TrainOptions {
            iters: 30,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert!(losses[29] < losses[0]);
}

/// Cross-entropy gradients at initialization for a 1% sample of every
/// parameter tensor of the full model.
#[test]
fn initial_gradients_match_finite_differences_on_one_percent() {
    let m = Model64::new(smoke(true, true)).unwrap();
    let sample = synthetic_sample::<f64>(64, 3);
    let inputs: Vec<Tensor64> = m.store.iter().map(|(_, t)| t.clone()).collect();
    let opts = CheckOptions {
        sample_fraction: Some(0.01),
        seed: 9,
        ..CheckOptions::default()
    };
    let report = check_gradients(
        |g, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let x = g.constant(sample.image.clone());
            let logits = m.forward(g, &b, x, &sample.tokens, &mut ForwardCtx::eval())?;
            g.cross_entropy_2class(logits, sample.mask.bits())
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.checked * 100 >= m.param_count(), "{report:?}");
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

// ---- checkpoints ------------------------------------------------------------

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let trained = {
        let mut m = Model64::new(smoke(true, true)).unwrap();
        train_smoke(
            &mut m,
            &synthetic_sample(64, 1),
            &TrainOptions {
                iters: 2,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        m
    };
    let mut bytes = Vec::new();
    write_checkpoint(&trained.store, &mut bytes).unwrap();
    let records = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(records.len(), trained.store.len());

    let mut fresh = Model64::new(ModelConfig {
        seed: 99,
        ..smoke(true, true)
    })
    .unwrap();
    let x = image(64, 5);
    assert_ne!(
        fresh.infer(&x, &[1]).unwrap(),
        trained.infer(&x, &[1]).unwrap()
    );
    fresh.store.load_records(&records).unwrap();
    assert_eq!(
        fresh.infer(&x, &[1]).unwrap(),
        trained.infer(&x, &[1]).unwrap()
    );
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let m = Model64::new(smoke(false, false)).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&m.store, &mut bytes).unwrap();
    assert_eq!(&bytes[..8], b"AEROCKPT");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_checkpoint(bad.as_slice()),
        Err(CheckpointError::BadMagic)
    ));
    let mut bad = bytes.clone();
    bad[8] = 7;
    assert!(matches!(
        read_checkpoint(bad.as_slice()),
        Err(CheckpointError::Version(7))
    ));
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());

    let records = read_checkpoint(bytes.as_slice()).unwrap();
    let mut other = Model64::new(smoke(false, true)).unwrap();
    assert!(matches!(
        other.store.load_records(&records),
        Err(CheckpointError::Missing(_))
    ));
}
