use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Tensor};

/// Uniform Xavier/Glorot initialization for a `[fan_in × fan_out]` weight.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    let data = (0..fan_in * fan_out).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape")
}

pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}
