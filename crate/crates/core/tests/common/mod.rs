//! Randomized finite-difference checks shared by the property tests and the
//! acceptance harness. Each `check_*` builds one random instance from `seed`
//! and returns the worst relative error between analytic and numeric
//! gradients.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zest::cvae::{Cvae, CvaeConfig, ReconLoss};
use zest::numerics::{grad_check, ops, Parameterized, Tensor};
use zest::sane::layers::{EncoderBlock, Mlp, MultiHeadAttention};
use zest::sane::{SaneConfig, SaneModel};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(2..6))
}

fn reshape(values: &[f64], like: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_vec(like.shape(), values.to_vec()).unwrap()
}

/// `Σ y ⊙ r` for a fixed random projection `r`.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks a function of one input tensor whose backward maps `dy` to `dx`.
fn unary(
    x: Tensor<f64>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    b: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let r = uniform(rng, out_shape, 1.0);
    let report = grad_check(
        |p| {
            let x = reshape(p, &x);
            (project(&f(&x), &r), b(&x, &r).into_data())
        },
        x.data(),
        EPS,
    );
    report.max_rel_error
}

pub fn check_matmul(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (m, k) = dims(&mut g);
    let n = g.random_range(1..5);
    let a = uniform(&mut g, &[m, k], 1.0);
    let b = uniform(&mut g, &[k, n], 1.0);
    let r = uniform(&mut g, &[m, n], 1.0);
    let split = a.len();
    let mut flat = a.data().to_vec();
    flat.extend_from_slice(b.data());
    grad_check(
        |p| {
            let a = reshape(&p[..split], &a);
            let b = reshape(&p[split..], &b);
            let y = ops::matmul(&a, &b).unwrap();
            let (da, db) = ops::matmul_backward(&a, &b, &r);
            let mut g = da.into_data();
            g.extend(db.into_data());
            (project(&y, &r), g)
        },
        &flat,
        EPS,
    )
    .max_rel_error
}

pub fn check_linear(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, i) = dims(&mut g);
    let o = g.random_range(1..5);
    let x = uniform(&mut g, &[rows, i], 1.0);
    let w = uniform(&mut g, &[i, o], 1.0);
    let b = uniform(&mut g, &[o], 1.0);
    let r = uniform(&mut g, &[rows, o], 1.0);
    let (nx, nw) = (x.len(), w.len());
    let flat: Vec<f64> = x.data().iter().chain(w.data()).chain(b.data()).copied().collect();
    grad_check(
        |p| {
            let x = reshape(&p[..nx], &x);
            let w = reshape(&p[nx..nx + nw], &w);
            let b = reshape(&p[nx + nw..], &b);
            let y = ops::linear(&x, &w, &b).unwrap();
            let gr = ops::linear_backward(&x, &w, &r);
            let g = gr.dx.into_data().into_iter().chain(gr.dw.into_data()).chain(gr.db.into_data()).collect();
            (project(&y, &r), g)
        },
        &flat,
        EPS,
    )
    .max_rel_error
}

pub fn check_softmax(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, cols) = dims(&mut g);
    let x = uniform(&mut g, &[rows, cols], 3.0);
    unary(
        x,
        &[rows, cols],
        &mut g,
        |x| ops::softmax_rows(x).unwrap(),
        |x, dy| ops::softmax_rows_backward(&ops::softmax_rows(x).unwrap(), dy),
    )
}

pub fn check_layer_norm(seed: u64) -> f64 {
    let mut g = rng(seed);
    let rows = g.random_range(1..5);
    let cols = g.random_range(2..7);
    let x = uniform(&mut g, &[rows, cols], 2.0);
    let gain = uniform(&mut g, &[cols], 1.5);
    let bias = uniform(&mut g, &[cols], 1.0);
    let r = uniform(&mut g, &[rows, cols], 1.0);
    let (nx, ng) = (x.len(), gain.len());
    let flat: Vec<f64> = x.data().iter().chain(gain.data()).chain(bias.data()).copied().collect();
    grad_check(
        |p| {
            let x = reshape(&p[..nx], &x);
            let gain = reshape(&p[nx..nx + ng], &gain);
            let bias = reshape(&p[nx + ng..], &bias);
            let (y, cache) = ops::layer_norm(&x, &gain, &bias).unwrap();
            let (dx, dg, db) = ops::layer_norm_backward(&cache, &gain, &r);
            let g = dx.into_data().into_iter().chain(dg.into_data()).chain(db.into_data()).collect();
            (project(&y, &r), g)
        },
        &flat,
        EPS,
    )
    .max_rel_error
}

pub fn check_gelu(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, cols) = dims(&mut g);
    let x = uniform(&mut g, &[rows, cols], 4.0);
    unary(x, &[rows, cols], &mut g, |x| ops::gelu(x).unwrap(), ops::gelu_backward)
}

pub fn check_mean_pool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, cols) = dims(&mut g);
    let x = uniform(&mut g, &[rows, cols], 2.0);
    unary(
        x,
        &[1, cols],
        &mut g,
        |x| ops::mean_pool_rows(x).unwrap(),
        move |_, dy| ops::mean_pool_rows_backward(rows, dy),
    )
}

pub fn check_concat(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (ra, cols) = dims(&mut g);
    let rb = g.random_range(1..4);
    let x = uniform(&mut g, &[ra + rb, cols], 2.0);
    unary(
        x,
        &[ra + rb, cols],
        &mut g,
        |x| {
            let a = Tensor::from_vec(&[ra, cols], x.data()[..ra * cols].to_vec()).unwrap();
            let b = Tensor::from_vec(&[rb, cols], x.data()[ra * cols..].to_vec()).unwrap();
            ops::concat_rows(&a, &b).unwrap()
        },
        |_, dy| {
            let (da, db) = ops::concat_rows_backward(dy, ra);
            let data = da.into_data().into_iter().chain(db.into_data()).collect();
            Tensor::from_vec(dy.shape(), data).unwrap()
        },
    )
}

pub fn check_cross_entropy(seed: u64) -> f64 {
    let mut g = rng(seed);
    let classes = g.random_range(2..7);
    let label = g.random_range(0..classes);
    let logits: Vec<f64> = (0..classes).map(|_| g.random_range(-4.0..4.0)).collect();
    grad_check(
        |p| {
            let (loss, probs) = ops::cross_entropy(p, label).unwrap();
            (loss, ops::cross_entropy_backward(&probs, label))
        },
        &logits,
        EPS,
    )
    .max_rel_error
}

pub fn check_l1(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, cols) = dims(&mut g);
    let target = uniform(&mut g, &[rows, cols], 2.0);
    // keep every residual away from the kink at zero
    let data = target
        .data()
        .iter()
        .map(|&t| {
            let off: f64 = g.random_range(0.05..1.0);
            if g.random_bool(0.5) { t + off } else { t - off }
        })
        .collect();
    let pred = Tensor::from_vec(&[rows, cols], data).unwrap();
    grad_check(
        |p| {
            let pred = reshape(p, &pred);
            (ops::l1_loss(&pred, &target).unwrap(), ops::l1_loss_backward(&pred, &target).into_data())
        },
        pred.data(),
        EPS,
    )
    .max_rel_error
}

/// Input gradient of a multi-head attention layer.
pub fn check_attention(seed: u64) -> f64 {
    let mut g = rng(seed);
    let heads = g.random_range(1..3);
    let d = heads * g.random_range(1..4);
    let rows = g.random_range(2..5);
    let mut layer = MultiHeadAttention::<f64>::new(d, heads, &mut g);
    let x = uniform(&mut g, &[rows, d], 1.0);
    let r = uniform(&mut g, &[rows, d], 1.0);
    grad_check(
        |p| {
            let x = reshape(p, &x);
            let (y, cache) = layer.forward(&x).unwrap();
            (project(&y, &r), layer.backward(&cache, &r).into_data())
        },
        x.data(),
        EPS,
    )
    .max_rel_error
}

pub fn check_mlp(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (rows, d) = dims(&mut g);
    let hidden = g.random_range(2..8);
    let mut layer = Mlp::<f64>::new(d, hidden, d, &mut g);
    let x = uniform(&mut g, &[rows, d], 1.5);
    let r = uniform(&mut g, &[rows, d], 1.0);
    grad_check(
        |p| {
            let x = reshape(p, &x);
            let (y, cache) = layer.forward(&x).unwrap();
            (project(&y, &r), layer.backward(&cache, &r).into_data())
        },
        x.data(),
        EPS,
    )
    .max_rel_error
}

/// Input gradient of one encoder block, as printed or post-norm.
pub fn check_encoder_block(seed: u64, post_norm: bool) -> f64 {
    let mut g = rng(seed);
    let heads = g.random_range(1..3);
    let d = heads * g.random_range(2..4);
    let rows = g.random_range(2..5);
    let mut block = EncoderBlock::<f64>::new(d, heads, 2 * d, &mut g);
    let x = uniform(&mut g, &[rows, d], 1.0);
    let r = uniform(&mut g, &[rows, d], 1.0);
    grad_check(
        |p| {
            let x = reshape(p, &x);
            if post_norm {
                let (y, cache) = block.forward_post_norm(&x).unwrap();
                (project(&y, &r), block.backward_post_norm(&cache, &r).into_data())
            } else {
                let (y, cache) = block.forward(&x).unwrap();
                (project(&y, &r), block.backward(&cache, &r).into_data())
            }
        },
        x.data(),
        EPS,
    )
    .max_rel_error
}

pub fn tiny_sane(seed: u64, post_norm: bool) -> SaneConfig {
    SaneConfig {
        seq_len: 3,
        features: 8,
        d_model: 4,
        encoders: 1,
        heads: 2,
        d_mlp: 8,
        latent_dim: 4,
        attr_dim: 2,
        num_classes: 3,
        batch_size: 2,
        epochs: 1,
        standard_residual: post_norm,
        seed,
        ..SaneConfig::default()
    }
}

/// Full SANE cross-entropy over a two-sequence batch, all parameters.
pub fn check_sane_loss(seed: u64) -> f64 {
    let cfg = tiny_sane(seed, seed % 2 == 1);
    let mut g = rng(seed ^ 0x5a4e);
    let mut model = SaneModel::<f64>::new(cfg.clone()).unwrap();
    let batch: Vec<(Tensor<f64>, usize)> = (0..2)
        .map(|_| (uniform(&mut g, &[cfg.seq_len, cfg.features], 1.0), g.random_range(0..cfg.num_classes)))
        .collect();
    let start = model.flat_values();
    grad_check(
        |p| {
            model.set_flat_values(p);
            model.zero_grad();
            let refs: Vec<(&Tensor<f64>, usize)> = batch.iter().map(|(x, c)| (x, *c)).collect();
            let (loss, _) = model.accumulate_batch(&refs).unwrap();
            (loss, model.flat_grads())
        },
        &start,
        EPS,
    )
    .max_rel_error
}

/// Full CVAE loss (reconstruction + KL) with fixed noise, all parameters.
pub fn check_cvae_loss(seed: u64) -> f64 {
    let recon_loss = if seed % 2 == 0 { ReconLoss::L1 } else { ReconLoss::L2 };
    let cfg = CvaeConfig {
        input_dim: 4,
        attr_dim: 2,
        z_dim: 2,
        hidden: 5,
        recon_loss,
        seed,
        ..CvaeConfig::default()
    };
    let mut g = rng(seed ^ 0xc7ae);
    let mut model = Cvae::<f64>::new(cfg.clone()).unwrap();
    let rows = 3;
    let l = uniform(&mut g, &[rows, cfg.input_dim], 2.0);
    let a = uniform(&mut g, &[rows, cfg.attr_dim], 1.0);
    let eps = uniform(&mut g, &[rows, cfg.z_dim], 1.0);
    let start = model.flat_values();
    grad_check(
        |p| {
            model.set_flat_values(p);
            model.zero_grad();
            let loss = model.loss_and_grad(&l, &a, &eps).unwrap();
            (loss.total(), model.flat_grads())
        },
        &start,
        EPS,
    )
    .max_rel_error
}

/// Every check by name, for loops over instances.
pub const CHECKS: &[(&str, fn(u64) -> f64)] = &[
    ("matmul", check_matmul),
    ("linear", check_linear),
    ("softmax", check_softmax),
    ("layer_norm", check_layer_norm),
    ("gelu", check_gelu),
    ("mean_pool", check_mean_pool),
    ("concat_rows", check_concat),
    ("cross_entropy", check_cross_entropy),
    ("l1_loss", check_l1),
    ("attention", check_attention),
    ("mlp", check_mlp),
    ("encoder_block", |s| check_encoder_block(s, false)),
    ("encoder_block_post_norm", |s| check_encoder_block(s, true)),
    ("sane_loss", check_sane_loss),
    ("cvae_loss", check_cvae_loss),
];
