//! Conditional VAE over `l` latents, conditioned on device attributes.
//!
//! The encoder maps `[l ; a]` to a diagonal Gaussian over `z`; the decoder
//! maps `[z ; a]` back to `l̂`. After training only the decoder is kept:
//! feeding it standard-normal noise together with any device's attribute
//! vector yields pseudo latents for that device, seen or not.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checkpoint, ops, Adam, AdamConfig, Param, Parameterized, Real, Tensor};
use crate::sane::layers::{Linear, Visit};

pub const DECODER_KIND: &str = "cvae-decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    /// Mean over the batch of the summed absolute error.
    L1,
    /// Mean over the batch of the summed squared error.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    /// Width of the modelled latent `l`.
    pub input_dim: usize,
    /// Width of the conditioning attribute vector (0 for a plain VAE).
    pub attr_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub recon_loss: ReconLoss,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            input_dim: 20,
            attr_dim: 3,
            z_dim: 8,
            hidden: 32,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            recon_loss: ReconLoss::L1,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.z_dim == 0 || self.hidden == 0 {
            return Err(Error::Invalid("cvae dimensions must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("cvae epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cvae<T = f32> {
    pub config: CvaeConfig,
    pub enc_hidden: Linear<T>,
    pub enc_mu: Linear<T>,
    pub enc_logvar: Linear<T>,
    pub dec_hidden: Linear<T>,
    pub dec_out: Linear<T>,
}

/// Loss components, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss<T> {
    pub recon: T,
    pub kl: T,
}

impl<T: Real> CvaeLoss<T> {
    pub fn total(&self) -> T {
        self.recon + self.kl
    }
}

struct Cache<T> {
    x: Tensor<T>,
    h1: Tensor<T>,
    g1: Tensor<T>,
    mu: Tensor<T>,
    logvar: Tensor<T>,
    sigma: Tensor<T>,
    eps: Tensor<T>,
    zin: Tensor<T>,
    h2: Tensor<T>,
    g2: Tensor<T>,
    out: Tensor<T>,
}

/// `[a | b]` row by row.
fn concat_cols<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for i in 0..rows {
        data.extend_from_slice(a.row(i));
        if cb > 0 {
            data.extend_from_slice(b.row(i));
        }
    }
    Tensor::from_vec(&[rows, ca + cb], data).expect("concat shape")
}

/// The first `cols` columns of `x`.
fn take_cols<T: Real>(x: &Tensor<T>, cols: usize) -> Tensor<T> {
    let data = (0..x.rows()).flat_map(|i| x.row(i)[..cols].to_vec()).collect();
    Tensor::from_vec(&[x.rows(), cols], data).expect("slice shape")
}

/// Analytic `KL(N(μ, σ²) ‖ N(0, 1))` summed over dimensions, one value per row.
pub fn kl_divergence<T: Real>(mu: &[T], logvar: &[T]) -> T {
    let half = T::lit(0.5);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

impl<T: Real> Cvae<T> {
    pub fn new(config: CvaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (m, n, z, h) = (config.input_dim, config.attr_dim, config.z_dim, config.hidden);
        Ok(Cvae {
            enc_hidden: Linear::new(m + n, h, &mut rng),
            enc_mu: Linear::new(h, z, &mut rng),
            enc_logvar: Linear::new(h, z, &mut rng),
            dec_hidden: Linear::new(z + n, h, &mut rng),
            dec_out: Linear::new(h, m, &mut rng),
            config,
        })
    }

    pub fn cast<U: Real>(&self) -> Cvae<U> {
        Cvae {
            config: self.config.clone(),
            enc_hidden: self.enc_hidden.cast(),
            enc_mu: self.enc_mu.cast(),
            enc_logvar: self.enc_logvar.cast(),
            dec_hidden: self.dec_hidden.cast(),
            dec_out: self.dec_out.cast(),
        }
    }

    fn check(&self, l: &Tensor<T>, a: &Tensor<T>, eps: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let b = l.rows();
        if l.shape() != [b, c.input_dim] || a.shape() != [b, c.attr_dim] || eps.shape() != [b, c.z_dim] {
            return Err(Error::shape(
                "cvae.forward",
                format!(
                    "l {:?}, a {:?}, eps {:?} for input {} attr {} z {}",
                    l.shape(),
                    a.shape(),
                    eps.shape(),
                    c.input_dim,
                    c.attr_dim,
                    c.z_dim
                ),
            ));
        }
        Ok(())
    }

    /// Posterior mean and log-variance for each row of `l`.
    pub fn encode(&self, l: &Tensor<T>, a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = concat_cols(l, a);
        let g1 = ops::gelu(&self.enc_hidden.forward(&x)?)?;
        Ok((self.enc_mu.forward(&g1)?, self.enc_logvar.forward(&g1)?))
    }

    fn forward(&self, l: &Tensor<T>, a: &Tensor<T>, eps: &Tensor<T>) -> Result<Cache<T>> {
        self.check(l, a, eps)?;
        let x = concat_cols(l, a);
        let h1 = self.enc_hidden.forward(&x)?;
        let g1 = ops::gelu(&h1)?;
        let mu = self.enc_mu.forward(&g1)?;
        let logvar = self.enc_logvar.forward(&g1)?;
        let sigma = logvar.map(|v| (T::lit(0.5) * v).exp()).check_finite("cvae.sigma")?;
        let mut z = mu.clone();
        for ((zv, &s), &e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
            *zv += s * e;
        }
        let zin = concat_cols(&z, a);
        let h2 = self.dec_hidden.forward(&zin)?;
        let g2 = ops::gelu(&h2)?;
        let out = self.dec_out.forward(&g2)?;
        Ok(Cache {
            x,
            h1,
            g1,
            mu,
            logvar,
            sigma,
            eps: eps.clone(),
            zin,
            h2,
            g2,
            out,
        })
    }

    fn loss_of(&self, cache: &Cache<T>, l: &Tensor<T>) -> Result<CvaeLoss<T>> {
        let b = T::lit(l.rows() as f64);
        let recon = match self.config.recon_loss {
            ReconLoss::L1 => ops::l1_loss(&cache.out, l)?,
            ReconLoss::L2 => {
                cache
                    .out
                    .data()
                    .iter()
                    .zip(l.data())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum::<T>()
                    / b
            }
        };
        let kl = (0..l.rows())
            .map(|i| kl_divergence(cache.mu.row(i), cache.logvar.row(i)))
            .sum::<T>()
            / b;
        let loss = CvaeLoss { recon, kl };
        if !(loss.recon.is_finite() && loss.kl.is_finite()) {
            return Err(Error::NonFinite { op: "cvae_loss" });
        }
        Ok(loss)
    }

    /// Loss for a batch with fixed reparameterization noise `eps`.
    pub fn loss(&self, l: &Tensor<T>, a: &Tensor<T>, eps: &Tensor<T>) -> Result<CvaeLoss<T>> {
        let cache = self.forward(l, a, eps)?;
        self.loss_of(&cache, l)
    }

    /// Loss and accumulated parameter gradients for one batch.
    pub fn loss_and_grad(&mut self, l: &Tensor<T>, a: &Tensor<T>, eps: &Tensor<T>) -> Result<CvaeLoss<T>> {
        let c = self.forward(l, a, eps)?;
        let loss = self.loss_of(&c, l)?;
        let b = T::lit(l.rows() as f64);
        let dout = match self.config.recon_loss {
            ReconLoss::L1 => ops::l1_loss_backward(&c.out, l),
            ReconLoss::L2 => {
                let d = c.out.data().iter().zip(l.data()).map(|(&p, &t)| T::lit(2.0) * (p - t) / b).collect();
                Tensor::from_vec(c.out.shape(), d)?
            }
        };
        let dg2 = self.dec_out.backward(&c.g2, &dout);
        let dh2 = ops::gelu_backward(&c.h2, &dg2);
        let dzin = self.dec_hidden.backward(&c.zin, &dh2);
        let dz = take_cols(&dzin, self.config.z_dim);

        let half = T::lit(0.5);
        let mut dmu = dz.clone();
        let mut dlogvar = dz;
        for i in 0..dmu.len() {
            let (m, lv, s, e) = (c.mu.data()[i], c.logvar.data()[i], c.sigma.data()[i], c.eps.data()[i]);
            dmu.data_mut()[i] += m / b;
            let dl = dlogvar.data()[i];
            dlogvar.data_mut()[i] = dl * e * s * half + half * (lv.exp() - T::one()) / b;
        }
        let mut dg1 = self.enc_mu.backward(&c.g1, &dmu);
        let dg1b = self.enc_logvar.backward(&c.g1, &dlogvar);
        for (x, y) in dg1.data_mut().iter_mut().zip(dg1b.data()) {
            *x += *y;
        }
        let dh1 = ops::gelu_backward(&c.h1, &dg1);
        self.enc_hidden.backward(&c.x, &dh1);
        Ok(loss)
    }

    pub fn decoder(&self) -> Decoder {
        let f = self.cast::<f32>();
        Decoder {
            z_dim: self.config.z_dim,
            attr_dim: self.config.attr_dim,
            hidden: f.dec_hidden,
            out: f.dec_out,
        }
    }
}

impl<T: Real> Parameterized<T> for Cvae<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.enc_hidden.visit("enc_hidden", f);
        self.enc_mu.visit("enc_mu", f);
        self.enc_logvar.visit("enc_logvar", f);
        self.dec_hidden.visit("dec_hidden", f);
        self.dec_out.visit("dec_out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.enc_hidden.visit_mut("enc_hidden", f);
        self.enc_mu.visit_mut("enc_mu", f);
        self.enc_logvar.visit_mut("enc_logvar", f);
        self.dec_hidden.visit_mut("dec_hidden", f);
        self.dec_out.visit_mut("dec_out", f);
    }
}

/// Frozen decoder `D(τ, a) -> l̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub z_dim: usize,
    pub attr_dim: usize,
    hidden: Linear<f32>,
    out: Linear<f32>,
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    z_dim: usize,
    attr_dim: usize,
    hidden: usize,
    output_dim: usize,
}

impl Decoder {
    pub fn output_dim(&self) -> usize {
        self.out.out_dim()
    }

    /// Decodes each row of `tau` with the same attribute vector.
    pub fn decode(&self, tau: &Tensor<f32>, attribute: &[f32]) -> Result<Tensor<f32>> {
        if attribute.len() != self.attr_dim || tau.cols() != self.z_dim {
            return Err(Error::shape(
                "decoder",
                format!("tau {:?} attribute {} for z {} attr {}", tau.shape(), attribute.len(), self.z_dim, self.attr_dim),
            ));
        }
        let a_rows: Vec<f32> = (0..tau.rows()).flat_map(|_| attribute.iter().copied()).collect();
        let a = Tensor::from_vec(&[tau.rows(), self.attr_dim], a_rows)?;
        let h = ops::gelu(&self.hidden.forward(&concat_cols(tau, &a))?)?;
        self.out.forward(&h)?.check_finite("decoder")
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        self.hidden.visit("hidden", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        self.out.visit("out", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    pub fn checksum(&self) -> String {
        checkpoint::encode(DECODER_KIND, serde_json::Value::Null, &self.tensors()).0.payload_sha256
    }

    pub fn save(&self, path: &Path) -> Result<checkpoint::Manifest> {
        let meta = DecoderMeta {
            z_dim: self.z_dim,
            attr_dim: self.attr_dim,
            hidden: self.hidden.out_dim(),
            output_dim: self.output_dim(),
        };
        let config = serde_json::to_value(meta).expect("meta serializes");
        checkpoint::save(path, DECODER_KIND, config, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        if manifest.kind != DECODER_KIND {
            return Err(Error::Format(format!("expected a {DECODER_KIND} checkpoint, found {}", manifest.kind)));
        }
        let meta: DecoderMeta =
            serde_json::from_value(manifest.config).map_err(|e| Error::Format(format!("decoder meta: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dec = Decoder {
            z_dim: meta.z_dim,
            attr_dim: meta.attr_dim,
            hidden: Linear::new(meta.z_dim + meta.attr_dim, meta.hidden, &mut rng),
            out: Linear::new(meta.hidden, meta.output_dim, &mut rng),
        };
        let expected = dec.tensors();
        if expected.len() != tensors.len()
            || expected.iter().zip(&tensors).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
        {
            return Err(Error::Format("decoder checkpoint tensors do not match its metadata".into()));
        }
        dec.hidden.weight.value = tensors[0].1.clone();
        dec.hidden.bias.value = tensors[1].1.clone();
        dec.out.weight.value = tensors[2].1.clone();
        dec.out.bias.value = tensors[3].1.clone();
        Ok(dec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedCvae {
    pub model: Cvae<f32>,
    pub log: Vec<CvaeEpoch>,
}

impl TrainedCvae {
    pub fn decoder(&self) -> Decoder {
        self.model.decoder()
    }
}

fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("noise shape")
}

/// Trains on seen-device latents only. `labels[i]` indexes `attributes`,
/// which holds one vector per seen device.
pub fn train_cvae(
    latents: &[Vec<f32>],
    labels: &[usize],
    attributes: &[Vec<f32>],
    config: CvaeConfig,
) -> Result<TrainedCvae> {
    config.validate()?;
    if latents.is_empty() || latents.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "cvae needs matching non-empty latents and labels, got {} and {}",
            latents.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= attributes.len()) {
        return Err(Error::Invalid(format!("no attribute vector for seen device {bad}")));
    }
    if latents.iter().any(|l| l.len() != config.input_dim)
        || attributes.iter().any(|a| a.len() != config.attr_dim)
    {
        return Err(Error::shape("train_cvae", "latent or attribute width differs from config"));
    }
    let mut model = Cvae::<f32>::new(config.clone())?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut recon, mut kl) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let l = Tensor::from_rows(&chunk.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
            let a_data: Vec<f32> = chunk.iter().flat_map(|&i| attributes[labels[i]].iter().copied()).collect();
            let a = Tensor::from_vec(&[chunk.len(), config.attr_dim], a_data)?;
            let eps = standard_normal(chunk.len(), config.z_dim, &mut rng);
            model.zero_grad();
            let loss = model.loss_and_grad(&l, &a, &eps)?;
            opt.step(&mut model);
            recon += f64::from(loss.recon) * chunk.len() as f64;
            kl += f64::from(loss.kl) * chunk.len() as f64;
        }
        let n = latents.len() as f64;
        log.push(CvaeEpoch {
            epoch,
            recon: recon / n,
            kl: kl / n,
        });
        if epoch % 50 == 0 || epoch + 1 == config.epochs {
            log::debug!("cvae epoch {epoch}: recon {:.4} kl {:.4}", recon / n, kl / n);
        }
    }
    model.zero_grad();
    Ok(TrainedCvae { model, log })
}

/// Balanced pseudo latents: exactly `k` samples per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub k: usize,
    pub seed: u64,
    pub latents: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples whose label is in `classes`.
    pub fn restrict(&self, classes: &[usize]) -> PseudoDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        PseudoDataset {
            k: self.k,
            seed: self.seed,
            latents: keep.iter().map(|&i| self.latents[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let dim = self.latents.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..dim).map(|j| format!("l_{j}")));
        w.write_record(&header)?;
        for (l, &c) in self.latents.iter().zip(&self.labels) {
            let mut rec = vec![c.to_string()];
            rec.extend(l.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("pseudo.csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, k: usize, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let (mut latents, mut labels) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let parse_err = |v: &str| Error::Format(format!("pseudo value {v:?}"));
            labels.push(rec[0].parse::<usize>().map_err(|_| parse_err(&rec[0]))?);
            latents.push(
                rec.iter()
                    .skip(1)
                    .map(|v| v.parse::<f32>().map_err(|_| parse_err(v)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(PseudoDataset { k, seed, latents, labels })
    }
}

/// Draws `k` noise vectors per class and decodes them with that class's
/// attribute vector. `classes` pairs a class label with its attributes;
/// each class uses its own stream of `seed`.
pub fn generate_pseudo(decoder: &Decoder, classes: &[(usize, Vec<f32>)], k: usize, seed: u64) -> Result<PseudoDataset> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let mut out = PseudoDataset {
        k,
        seed,
        latents: Vec::with_capacity(k * classes.len()),
        labels: Vec::with_capacity(k * classes.len()),
    };
    for (class, attribute) in classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(*class as u64 + 1);
        let tau = standard_normal(k, decoder.z_dim, &mut rng);
        let decoded = decoder.decode(&tau, attribute)?;
        for i in 0..k {
            out.latents.push(decoded.row(i).to_vec());
            out.labels.push(*class);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny(recon_loss: ReconLoss) -> CvaeConfig {
        CvaeConfig {
            input_dim: 4,
            attr_dim: 2,
            z_dim: 3,
            hidden: 5,
            recon_loss,
            seed: 3,
            ..CvaeConfig::default()
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0f64], &[0.0]), 0.0);
        assert!((kl_divergence(&[1.0f64], &[0.0]) - 0.5).abs() < 1e-15);
    }

    fn batch(rows: usize, cfg: &CvaeConfig, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |c| standard_normal(rows, c, &mut rng).cast::<f64>();
        (g(cfg.input_dim), g(cfg.attr_dim), g(cfg.z_dim))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for recon in [ReconLoss::L1, ReconLoss::L2] {
            let cfg = tiny(recon);
            let mut model = Cvae::<f64>::new(cfg.clone()).unwrap();
            let (l, a, eps) = batch(3, &cfg, 1);
            let start = model.flat_values();
            let report = grad_check(
                |p| {
                    model.set_flat_values(p);
                    model.zero_grad();
                    let loss = model.loss_and_grad(&l, &a, &eps).unwrap();
                    (loss.total(), model.flat_grads())
                },
                &start,
                1e-6,
            );
            assert!(report.max_rel_error < 1e-4, "{recon:?}: {report:?}");
        }
    }

    #[test]
    fn decoder_output_has_input_width() {
        let cfg = tiny(ReconLoss::L1);
        let dec = Cvae::<f32>::new(cfg.clone()).unwrap().decoder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = dec.decode(&standard_normal(7, 3, &mut rng), &[0.3, -1.0]).unwrap();
        assert_eq!(out.shape(), [7, 4]);
        assert!(dec.decode(&standard_normal(7, 3, &mut rng), &[0.3]).is_err());
    }

    fn blobs() -> (Vec<Vec<f32>>, Vec<usize>, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = [[2.0f32, 0.0, -1.0, 1.0], [-2.0, 1.0, 1.0, 0.0], [0.0, -2.0, 0.0, -1.0]];
        let attrs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
        let (mut l, mut y) = (Vec::new(), Vec::new());
        for _ in 0..60 {
            for (c, center) in centers.iter().enumerate() {
                let noise: Vec<f32> = (0..4).map(|_| 0.1 * Distribution::<f32>::sample(&StandardNormal, &mut rng)).collect();
                l.push(center.iter().zip(&noise).map(|(a, b)| a + b).collect());
                y.push(c);
            }
        }
        (l, y, attrs)
    }

    #[test]
    fn training_reduces_reconstruction_and_is_deterministic() {
        let (l, y, attrs) = blobs();
        let cfg = CvaeConfig { epochs: 150, ..tiny(ReconLoss::L1) };
        let a = train_cvae(&l, &y, &attrs, cfg.clone()).unwrap();
        let b = train_cvae(&l, &y, &attrs, cfg).unwrap();
        assert_eq!(a.log, b.log);
        let first = a.log[0].recon;
        let last = a.log.last().unwrap().recon;
        assert!(last <= 0.5 * first, "{first} -> {last}");
        assert!(a.log.iter().all(|e| e.kl >= 0.0));
    }

    #[test]
    fn pseudo_data_is_balanced_reproducible_and_near_its_class() {
        let (l, y, attrs) = blobs();
        let cfg = CvaeConfig { epochs: 150, ..tiny(ReconLoss::L1) };
        let dec = train_cvae(&l, &y, &attrs, cfg).unwrap().decoder();
        let classes: Vec<(usize, Vec<f32>)> = attrs.iter().cloned().enumerate().collect();
        let p = generate_pseudo(&dec, &classes, 40, 5).unwrap();
        assert_eq!(p, generate_pseudo(&dec, &classes, 40, 5).unwrap());
        assert_eq!(p.len(), 120);
        for c in 0..3 {
            assert_eq!(p.labels.iter().filter(|&&x| x == c).count(), 40);
        }
        let centroid = |c: usize| {
            let rows: Vec<Vec<f32>> = l.iter().zip(&y).filter(|(_, &yy)| yy == c).map(|(v, _)| v.clone()).collect();
            crate::attributes::mean_rows(&rows)
        };
        let cents: Vec<Vec<f32>> = (0..3).map(centroid).collect();
        let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        for c in 0..3 {
            let mean_to = |t: usize| {
                let d: Vec<f32> = p.latents.iter().zip(&p.labels).filter(|(_, &yy)| yy == c).map(|(v, _)| dist(v, &cents[t])).collect();
                d.iter().sum::<f32>() / d.len() as f32
            };
            for other in (0..3).filter(|&o| o != c) {
                assert!(mean_to(c) < mean_to(other), "class {c}");
            }
        }
        assert!(generate_pseudo(&dec, &classes, 0, 5).is_err());
    }

    #[test]
    fn missing_attribute_is_fatal() {
        let (l, y, attrs) = blobs();
        assert!(train_cvae(&l, &y, &attrs[..2], tiny(ReconLoss::L1)).is_err());
    }

    #[test]
    fn decoder_checkpoint_and_pseudo_csv_round_trip() {
        let dec = Cvae::<f32>::new(tiny(ReconLoss::L1)).unwrap().decoder();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.ckpt.json");
        dec.save(&path).unwrap();
        let back = Decoder::load(&path).unwrap();
        assert_eq!(back, dec);
        assert_eq!(back.checksum(), dec.checksum());
        let p = generate_pseudo(&dec, &[(0, vec![0.0, 1.0]), (4, vec![1.0, 0.5])], 3, 1).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(PseudoDataset::read_csv(buf.as_slice(), 3, 1).unwrap(), p);
        assert_eq!(p.restrict(&[4]).labels, vec![4, 4, 4]);
    }
}
