//! Dense numeric core: row-major tensors, the fixed set of differentiable
//! primitives the models are built from, a finite-difference gradient
//! checker, Adam, and the checkpoint format.
//!
//! Every primitive is a forward function paired with an explicit backward
//! rule. There is no tape; models chain the backward rules by hand.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod ops;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{Param, Tensor};

/// Floating point element type. Models train in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// `exp` used on the hot paths (softmax, GELU). Defaults to the libm
    /// function; `f32` overrides it with an inlinable polynomial.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f64 {}

impl Real for f32 {
    #[inline(always)]
    fn fast_exp(self) -> Self {
        expf_poly(self)
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        1.0 - 2.0 / (expf_poly(2.0 * self) + 1.0)
    }
}

/// Range-reduced polynomial `exp` for `f32` (Cephes coefficients, about
/// 1 ulp on the reduced interval). Pure arithmetic, so it vectorizes and
/// gives identical bits on every platform.
#[inline(always)]
fn expf_poly(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding and subtracting 1.5 * 2^23 rounds to the nearest integer
    const ROUND: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else if x > 88.0 { 88.0 } else { x };
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let z = r * r;
    let p = (((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2)
        * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1)
        * z
        + r
        + 1.0;
    // 2^n: the mantissa of 2^23 + (n + 127) holds the biased exponent
    let scale = f32::from_bits((n + 8_388_735.0).to_bits() << 23);
    p * scale
}


/// A model that owns a fixed, ordered list of named parameters.
///
/// Visiting order is part of the contract: optimizers, gradient checks and
/// checkpoints all rely on it being stable.
pub trait Parameterized<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, p| out.extend(p.value.data().iter().map(|v| v.as_f64())));
        out
    }

    fn set_flat_values(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |_, p| {
            for v in p.value.data_mut() {
                *v = T::lit(values[offset]);
                offset += 1;
            }
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, p| out.extend(p.grad.iter().map(|v| v.as_f64())));
        out
    }

    /// Multiplies every accumulated gradient by `factor` (batch averaging).
    fn scale_grads(&mut self, factor: T) {
        self.visit_params_mut(&mut |_, p| p.grad.iter_mut().for_each(|g| *g *= factor));
    }
}
