//! Self-attention network feature extractor.
//!
//! A packet sequence `[n × f]` is linearly embedded, a learnable sequence
//! aggregation token is prepended, a learnable positional embedding is
//! added, and the result runs through a stack of encoder blocks. The rows
//! are mean pooled and mapped to the latent `l ∈ R^M`, then to the narrower
//! latent `λ ∈ R^N`, and finally to class logits.

pub mod layers;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checkpoint, init, ops, Param, Parameterized, Real, Tensor};
use layers::{BlockCache, EncoderBlock, Linear, Visit};

pub use train::{
    evaluate_supervised, train_sane, write_log_csv, EpochLog, SupervisedEval, TrainedSane, LOG_HEADER,
};

pub const CHECKPOINT_KIND: &str = "sane";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaneConfig {
    /// Packets per sequence (`n`).
    pub seq_len: usize,
    /// Raw features per packet (`f`).
    pub features: usize,
    pub d_model: usize,
    /// Encoder stack size (`e`).
    pub encoders: usize,
    /// Attention heads (`h`).
    pub heads: usize,
    pub d_mlp: usize,
    /// Width of `l` (`M`).
    pub latent_dim: usize,
    /// Width of `λ` and of attribute vectors (`N`).
    pub attr_dim: usize,
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Use the post-norm block layout instead of the default pre-norm one.
    pub standard_residual: bool,
}

impl Default for SaneConfig {
    fn default() -> Self {
        SaneConfig {
            seq_len: 200,
            features: 8,
            d_model: 32,
            encoders: 2,
            heads: 8,
            d_mlp: 128,
            latent_dim: 20,
            attr_dim: 3,
            num_classes: 10,
            batch_size: 64,
            epochs: 20,
            learning_rate: 5e-4,
            seed: 0,
            standard_residual: false,
        }
    }
}

impl SaneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(format!("sane config: {m}")));
        if self.seq_len == 0 || self.features == 0 {
            return fail("seq_len and features must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.encoders == 0 {
            return fail("need at least one encoder".into());
        }
        if self.attr_dim == 0 || self.attr_dim >= self.latent_dim {
            return fail(format!(
                "attr_dim {} must be in 1..latent_dim {}",
                self.attr_dim, self.latent_dim
            ));
        }
        if self.num_classes == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return fail("num_classes, batch_size and learning_rate must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample outputs of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct SaneOutput<T> {
    pub logits: Vec<T>,
    pub l: Vec<T>,
    pub lambda: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct SaneCache<T> {
    input: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    rows: usize,
    pub pooled: Tensor<T>,
    l: Tensor<T>,
    lambda: Tensor<T>,
}

impl<T> SaneCache<T> {
    /// Attention weights of every head in every block, `[layer][head]`.
    pub fn attention_weights(&self) -> Vec<&[Tensor<T>]> {
        self.blocks.iter().map(|b| b.attention.weights.as_slice()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaneModel<T = f32> {
    pub config: SaneConfig,
    pub embed: Linear<T>,
    pub sla: Param<T>,
    pub positional: Param<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub nl_l: Linear<T>,
    pub nl_lambda: Linear<T>,
    pub head: Linear<T>,
}

impl<T: Real> SaneModel<T> {
    /// Xavier-uniform projections, zero biases, `N(0, 0.02)` token and
    /// positional embedding, all drawn from `config.seed`.
    pub fn new(config: SaneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embed = Linear::new(config.features, d, &mut rng);
        let sla = Param::new(init::normal(&[1, d], 0.02, &mut rng));
        let positional = Param::new(init::normal(&[config.seq_len + 1, d], 0.02, &mut rng));
        let blocks = (0..config.encoders)
            .map(|_| EncoderBlock::new(d, config.heads, config.d_mlp, &mut rng))
            .collect();
        let nl_l = Linear::new(d, config.latent_dim, &mut rng);
        let nl_lambda = Linear::new(config.latent_dim, config.attr_dim, &mut rng);
        let head = Linear::new(config.attr_dim, config.num_classes, &mut rng);
        Ok(SaneModel {
            config,
            embed,
            sla,
            positional,
            blocks,
            nl_l,
            nl_lambda,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> SaneModel<U> {
        SaneModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            sla: self.sla.cast(),
            positional: self.positional.cast(),
            blocks: self.blocks.iter().map(EncoderBlock::cast).collect(),
            nl_l: self.nl_l.cast(),
            nl_lambda: self.nl_lambda.cast(),
            head: self.head.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if x.shape() != [c.seq_len, c.features] {
            return Err(Error::shape(
                "sane.forward",
                format!("input {:?}, expected [{}, {}]", x.shape(), c.seq_len, c.features),
            ));
        }
        Ok(())
    }

    /// Encoder stack and mean pooling: returns the pooled `[1 × d_model]` row.
    fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockCache<T>>)> {
        self.check_input(x)?;
        let embedded = self.embed.forward(x)?;
        let mut e = ops::concat_rows(&self.sla.value, &embedded)?;
        for (v, &p) in e.data_mut().iter_mut().zip(self.positional.value.data()) {
            *v += p;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = if self.config.standard_residual {
                block.forward_post_norm(&e)?
            } else {
                block.forward(&e)?
            };
            caches.push(cache);
            e = next;
        }
        Ok((ops::mean_pool_rows(&e)?, caches))
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(SaneOutput<T>, SaneCache<T>)> {
        let (pooled, blocks) = self.encode(x)?;
        let l = self.nl_l.forward(&pooled)?;
        let lambda = self.nl_lambda.forward(&l)?;
        let logits = self.head.forward(&lambda)?;
        let out = SaneOutput {
            logits: logits.into_data(),
            l: l.data().to_vec(),
            lambda: lambda.data().to_vec(),
        };
        let cache = SaneCache {
            input: x.clone(),
            blocks,
            rows: self.config.seq_len + 1,
            pooled,
            l,
            lambda,
        };
        Ok((out, cache))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<SaneOutput<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Mean-pooled encoder output, before `NL_l`.
    pub fn pooled(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.encode(x)?.0.into_data())
    }

    /// `l = NL_l(pool(encoder(x)))`.
    pub fn latent_l(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let (pooled, _) = self.encode(x)?;
        Ok(self.nl_l.forward(&pooled)?.into_data())
    }

    /// `λ = NL_λ(l)`.
    pub fn lambda_from_l(&self, l: &[T]) -> Result<Vec<T>> {
        let l = Tensor::from_vec(&[1, l.len()], l.to_vec())?;
        Ok(self.nl_lambda.forward(&l)?.into_data())
    }

    /// Classifier head applied to `λ`.
    pub fn logits_from_lambda(&self, lambda: &[T]) -> Result<Vec<T>> {
        let lam = Tensor::from_vec(&[1, lambda.len()], lambda.to_vec())?;
        Ok(self.head.forward(&lam)?.into_data())
    }

    /// Accumulates parameter gradients for a loss whose gradient with
    /// respect to the logits is `dlogits`.
    pub fn backward(&mut self, cache: &SaneCache<T>, dlogits: &[T]) {
        let dlogits = Tensor::from_vec(&[1, dlogits.len()], dlogits.to_vec()).expect("logit shape");
        let dlambda = self.head.backward(&cache.lambda, &dlogits);
        let dl = self.nl_lambda.backward(&cache.l, &dlambda);
        let dpooled = self.nl_l.backward(&cache.pooled, &dl);
        let mut de = ops::mean_pool_rows_backward(cache.rows, &dpooled);
        let post_norm = self.config.standard_residual;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            de = if post_norm {
                block.backward_post_norm(bc, &de)
            } else {
                block.backward(bc, &de)
            };
        }
        self.positional.accumulate(de.data());
        let (dsla, demb) = ops::concat_rows_backward(&de, 1);
        self.sla.accumulate(dsla.data());
        self.embed.backward(&cache.input, &demb);
    }

    /// Cross-entropy summed over `batch`; gradients are accumulated (not
    /// averaged). Returns the summed loss and the number of correct argmax
    /// predictions.
    pub fn accumulate_batch(&mut self, batch: &[(&Tensor<T>, usize)]) -> Result<(T, usize)> {
        let mut total = T::zero();
        let mut correct = 0;
        for &(x, label) in batch {
            let (out, cache) = self.forward_cached(x)?;
            let (loss, probs) = ops::cross_entropy(&out.logits, label)?;
            if argmax(&out.logits) == label {
                correct += 1;
            }
            total += loss;
            let dlogits = ops::cross_entropy_backward(&probs, label);
            self.backward(&cache, &dlogits);
        }
        Ok((total, correct))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.logits))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Parameterized<T> for SaneModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.embed.visit("embed", f);
        f("sla", &self.sla);
        f("positional", &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.nl_l.visit("nl_l", f);
        self.nl_lambda.visit("nl_lambda", f);
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.embed.visit_mut("embed", f);
        f("sla", &mut self.sla);
        f("positional", &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.nl_l.visit_mut("nl_l", f);
        self.nl_lambda.visit_mut("nl_lambda", f);
        self.head.visit_mut("head", f);
    }
}

impl SaneModel<f32> {
    pub fn save(&self, path: &Path) -> Result<checkpoint::Manifest> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, CHECKPOINT_KIND, config, &checkpoint::collect(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                manifest.kind
            )));
        }
        let config: SaneConfig = serde_json::from_value(manifest.config)
            .map_err(|e| Error::Format(format!("sane config: {e}")))?;
        let mut model = SaneModel::new(config)?;
        checkpoint::restore(&mut model, &tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
