use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ingest::DataPoint;
use crate::numerics::{grad_check, ops, Parameterized};

fn tiny(seed: u64) -> SaneConfig {
    SaneConfig {
        seq_len: 4,
        features: 8,
        d_model: 8,
        encoders: 1,
        heads: 2,
        d_mlp: 16,
        latent_dim: 5,
        attr_dim: 3,
        num_classes: 3,
        batch_size: 2,
        epochs: 3,
        seed,
        ..SaneConfig::default()
    }
}

fn random_input<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.random::<f64>())).collect();
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

/// Mean cross-entropy over the batch and its flat gradient.
fn batch_loss(model: &mut SaneModel<f64>, flat: &[f64], batch: &[(Tensor<f64>, usize)]) -> (f64, Vec<f64>) {
    model.set_flat_values(flat);
    model.zero_grad();
    let refs: Vec<(&Tensor<f64>, usize)> = batch.iter().map(|(x, c)| (x, *c)).collect();
    let (loss, _) = model.accumulate_batch(&refs).unwrap();
    model.scale_grads(1.0 / batch.len() as f64);
    (loss / batch.len() as f64, model.flat_grads())
}

#[test]
fn output_shapes() {
    let model = SaneModel::<f32>::new(tiny(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&random_input(4, 8, &mut rng)).unwrap();
    assert_eq!((out.logits.len(), out.l.len(), out.lambda.len()), (3, 5, 3));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = SaneModel::<f32>::new(tiny(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        model.forward(&random_input(5, 8, &mut rng)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn config_validation() {
    let mut c = tiny(0);
    c.heads = 3;
    assert!(SaneModel::<f32>::new(c).is_err());
    let mut c = tiny(0);
    c.attr_dim = 5;
    assert!(SaneModel::<f32>::new(c).is_err());
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = SaneConfig {
        encoders: 2,
        ..tiny(3)
    };
    let model = SaneModel::<f32>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (_, cache) = model.forward_cached(&random_input(4, 8, &mut rng)).unwrap();
    for layer in cache.attention_weights() {
        for head in layer {
            for r in 0..head.rows() {
                let s: f32 = head.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(head.row(r).iter().all(|&w| w >= 0.0));
            }
        }
    }
}

#[test]
fn permutation_invariant_without_positional_embedding() {
    let mut model = SaneModel::<f64>::new(tiny(5)).unwrap();
    model.positional.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f64> = random_input(4, 8, &mut rng);
    let perm = [2usize, 0, 3, 1];
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
    let xp = Tensor::from_rows(&rows).unwrap();
    let a = model.pooled(&x).unwrap();
    let b = model.pooled(&xp).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for (seed, post_norm) in [(11, false), (12, true)] {
        let cfg = SaneConfig {
            standard_residual: post_norm,
            ..tiny(seed)
        };
        let mut model = SaneModel::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = vec![(random_input(4, 8, &mut rng), 0), (random_input(4, 8, &mut rng), 2)];
        let params = model.flat_values();
        let r = grad_check(|p| batch_loss(&mut model, p, &batch), &params, 1e-5);
        assert!(r.max_rel_error < 1e-4, "post_norm={post_norm}: {r:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sane.ckpt.json");
    let model = SaneModel::<f32>::new(tiny(21)).unwrap();
    model.save(&path).unwrap();
    let back = SaneModel::<f32>::load(&path).unwrap();
    assert_eq!(back, model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_input(4, 8, &mut rng);
    let a = model.forward(&x).unwrap().logits;
    let b = back.forward(&x).unwrap().logits;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn classifier_head_reconstructs_logits() {
    let model = SaneModel::<f32>::new(tiny(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(4, 8, &mut rng);
    let out = model.forward(&x).unwrap();
    let l = model.latent_l(&x).unwrap();
    assert_eq!(l, out.l);
    assert_eq!(model.lambda_from_l(&l).unwrap(), out.lambda);
    assert_eq!(model.logits_from_lambda(&out.lambda).unwrap(), out.logits);
}

fn toy_points(n_per_class: usize, seed: u64) -> Vec<DataPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..3usize {
        for _ in 0..n_per_class {
            let data = (0..32)
                .map(|k| {
                    let base = if k % 8 == c { 0.9 } else { 0.1 };
                    base + 0.05 * rng.random::<f32>()
                })
                .collect();
            out.push(DataPoint {
                features: Tensor::from_vec(&[4, 8], data).unwrap(),
                label: Some(c),
                device_id: format!("d{c}"),
            });
        }
    }
    out
}

#[test]
fn training_is_deterministic_and_learns_toy_classes() {
    let train = toy_points(12, 1);
    let val = toy_points(4, 2);
    let cfg = SaneConfig {
        epochs: 30,
        batch_size: 6,
        learning_rate: 5e-3,
        ..tiny(4)
    };
    let a = train_sane(&train, &val, cfg.clone()).unwrap();
    let b = train_sane(&train, &val, cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let eval = evaluate_supervised(&a.model, &val).unwrap();
    assert!(eval.accuracy >= 0.9, "{:?}", a.log.last());
    for (c, row) in eval.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), 4, "class {c}");
    }
}

#[test]
fn empty_class_is_fatal() {
    let train: Vec<DataPoint> = toy_points(3, 1).into_iter().filter(|p| p.label != Some(1)).collect();
    assert!(matches!(
        train_sane(&train, &[], tiny(0)),
        Err(Error::EmptyClass(1))
    ));
}

#[test]
fn empty_test_set_is_fatal() {
    let model = SaneModel::<f32>::new(tiny(0)).unwrap();
    assert!(evaluate_supervised(&model, &[]).is_err());
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 2.0, 3.0]), 1);
    let (_, probs) = ops::cross_entropy(&[0.0f64, 0.0], 0).unwrap();
    assert_eq!(argmax(&probs), 0);
}
