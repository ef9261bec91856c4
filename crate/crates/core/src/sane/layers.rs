//! Layers of the encoder. Each `forward` returns its output together with
//! whatever the matching `backward` needs; `backward` accumulates parameter
//! gradients and returns the gradient with respect to the layer input.

use rand::Rng;

use crate::error::Result;
use crate::numerics::ops::{self, gemm_acc, softmax_backward_row, softmax_in_place, transpose_raw};
use crate::numerics::{init, Param, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(init::xavier_uniform(fan_in, fan_out, rng)),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = ops::linear_backward(x, &self.weight.value, dy);
        self.weight.accumulate(g.dw.data());
        self.bias.accumulate(g.db.data());
        g.dx
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(Tensor::from_vec(&[dim], vec![T::one(); dim]).expect("shape")),
            bias: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ops::LayerNormCache<T>)> {
        ops::layer_norm(x, &self.gain.value, &self.bias.value)
    }

    pub fn backward(&mut self, cache: &ops::LayerNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (dx, dg, db) = ops::layer_norm_backward(cache, &self.gain.value, dy);
        self.gain.accumulate(dg.data());
        self.bias.accumulate(db.data());
        dx
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            gain: self.gain.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Multi-head scaled dot-product self-attention without masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    /// Per head, `[rows × head_dim]` slices of Q, K, V.
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Per head, row-stochastic `[rows × rows]` attention weights.
    pub weights: Vec<Tensor<T>>,
    merged: Tensor<T>,
}

fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Vec<Vec<T>> {
    let (r, d) = (x.rows(), x.cols());
    let hd = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(r * hd);
            for i in 0..r {
                out.extend_from_slice(&x.row(i)[h * hd..(h + 1) * hd]);
            }
            out
        })
        .collect()
}

/// Writes a `[head_dim × rows]` block, transposed, into the head's columns.
fn scatter_head_t<T: Real>(dst: &mut Tensor<T>, src_t: &[T], h: usize, hd: usize) {
    let r = dst.rows();
    for i in 0..r {
        let row = &mut dst.row_mut(i)[h * hd..(h + 1) * hd];
        for (d, o) in row.iter_mut().enumerate() {
            *o = src_t[d * r + i];
        }
    }
}

// The per-head products below are arranged so that the innermost loop runs
// over the sequence (length `rows`) rather than the short head dimension:
// products with a `head_dim`-wide result are computed transposed.
impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
        MultiHeadAttention {
            heads,
            query: Linear::new(d_model, d_model, rng),
            key: Linear::new(d_model, d_model, rng),
            value: Linear::new(d_model, d_model, rng),
            output: Linear::new(d_model, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (r, d) = (x.rows(), x.cols());
        let hd = d / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let q = split_heads(&self.query.forward(x)?, self.heads);
        let k = split_heads(&self.key.forward(x)?, self.heads);
        let v = split_heads(&self.value.forward(x)?, self.heads);
        let mut merged = Tensor::zeros(&[r, d]);
        let mut weights = Vec::with_capacity(self.heads);
        let mut out_t = vec![T::zero(); hd * r];
        for h in 0..self.heads {
            let kt = transpose_raw(&k[h], r, hd);
            let mut scores = Tensor::zeros(&[r, r]);
            gemm_acc(&q[h], &kt, scores.data_mut(), r, hd, r);
            for i in 0..r {
                let row = scores.row_mut(i);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            // Oᵀ = Vᵀ · Aᵀ
            let at = transpose_raw(scores.data(), r, r);
            let vt = transpose_raw(&v[h], r, hd);
            out_t.iter_mut().for_each(|o| *o = T::zero());
            gemm_acc(&vt, &at, &mut out_t, hd, r, r);
            scatter_head_t(&mut merged, &out_t, h, hd);
            weights.push(scores);
        }
        let y = self.output.forward(&merged)?.check_finite("attention")?;
        Ok((
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                weights,
                merged,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (r, d) = (cache.input.rows(), cache.input.cols());
        let hd = d / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let dmerged = self.output.backward(&cache.merged, dy);
        let mut dq = Tensor::zeros(&[r, d]);
        let mut dk = Tensor::zeros(&[r, d]);
        let mut dv = Tensor::zeros(&[r, d]);
        let mut dout = vec![T::zero(); r * hd];
        let mut dweights = vec![T::zero(); r * r];
        let mut dscores = vec![T::zero(); r * r];
        let mut grad_t = vec![T::zero(); hd * r];
        for h in 0..self.heads {
            for i in 0..r {
                dout[i * hd..(i + 1) * hd].copy_from_slice(&dmerged.row(i)[h * hd..(h + 1) * hd]);
            }
            let dout_t = transpose_raw(&dout, r, hd);
            let a = cache.weights[h].data();
            // dA = dO · Vᵀ
            let vt = transpose_raw(&cache.v[h], r, hd);
            dweights.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(&dout, &vt, &mut dweights, r, hd, r);
            // dVᵀ = dOᵀ · A
            grad_t.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(&dout_t, a, &mut grad_t, hd, r, r);
            scatter_head_t(&mut dv, &grad_t, h, hd);
            for i in 0..r {
                softmax_backward_row(
                    &a[i * r..(i + 1) * r],
                    &dweights[i * r..(i + 1) * r],
                    &mut dscores[i * r..(i + 1) * r],
                );
            }
            dscores.iter_mut().for_each(|x| *x *= scale);
            // dQᵀ = Kᵀ · dSᵀ
            let kt = transpose_raw(&cache.k[h], r, hd);
            let dst = transpose_raw(&dscores, r, r);
            grad_t.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(&kt, &dst, &mut grad_t, hd, r, r);
            scatter_head_t(&mut dq, &grad_t, h, hd);
            // dKᵀ = Qᵀ · dS
            let qt = transpose_raw(&cache.q[h], r, hd);
            grad_t.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(&qt, &dscores, &mut grad_t, hd, r, r);
            scatter_head_t(&mut dk, &grad_t, h, hd);
        }
        let mut dx = self.query.backward(&cache.input, &dq);
        add_into(&mut dx, &self.key.backward(&cache.input, &dk));
        add_into(&mut dx, &self.value.backward(&cache.input, &dv));
        dx
    }

    pub fn cast<U: Real>(&self) -> MultiHeadAttention<U> {
        MultiHeadAttention {
            heads: self.heads,
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
        }
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x)?;
        let act = ops::gelu(&pre)?;
        let y = self.fc2.forward(&act)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dact = self.fc2.backward(&cache.act, dy);
        let dpre = ops::gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.input, &dpre)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

/// One encoder block: attention and MLP sub-layers with layer norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    n1: ops::LayerNormCache<T>,
    pub attention: AttentionCache<T>,
    n2: ops::LayerNormCache<T>,
    mlp: MlpCache<T>,
}

fn add_into<T: Real>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

impl<T: Real> EncoderBlock<T> {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, d_mlp: usize, rng: &mut R) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(d_model),
            attention: MultiHeadAttention::new(d_model, heads, rng),
            norm2: LayerNorm::new(d_model),
            mlp: Mlp::new(d_model, d_mlp, d_model, rng),
        }
    }

    /// `R1 = MHA(Norm(E))`, `R2 = MLP(Norm(E + R1))`, `E <- R2 + (E + R1)`.
    pub fn forward(&self, e: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (n1_out, n1) = self.norm1.forward(e)?;
        let (r1, attention) = self.attention.forward(&n1_out)?;
        let mut u = r1;
        add_into(&mut u, e);
        let (n2_out, n2) = self.norm2.forward(&u)?;
        let (mut out, mlp) = self.mlp.forward(&n2_out)?;
        add_into(&mut out, &u);
        Ok((out.check_finite("encoder_block")?, BlockCache { n1, attention, n2, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dn2 = self.mlp.backward(&cache.mlp, dy);
        let mut du = self.norm2.backward(&cache.n2, &dn2);
        add_into(&mut du, dy);
        let dn1 = self.attention.backward(&cache.attention, &du);
        let mut de = self.norm1.backward(&cache.n1, &dn1);
        add_into(&mut de, &du);
        de
    }

    /// Post-norm layout: `U = Norm(E + MHA(E))`, `E <- Norm(U + MLP(U))`.
    pub fn forward_post_norm(&self, e: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (r1, attention) = self.attention.forward(e)?;
        let mut s1 = r1;
        add_into(&mut s1, e);
        let (u, n1) = self.norm1.forward(&s1)?;
        let (mut s2, mlp) = self.mlp.forward(&u)?;
        add_into(&mut s2, &u);
        let (out, n2) = self.norm2.forward(&s2)?;
        Ok((out.check_finite("encoder_block")?, BlockCache { n1, attention, n2, mlp }))
    }

    pub fn backward_post_norm(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let ds2 = self.norm2.backward(&cache.n2, dy);
        let mut du = self.mlp.backward(&cache.mlp, &ds2);
        add_into(&mut du, &ds2);
        let ds1 = self.norm1.backward(&cache.n1, &du);
        let mut de = self.attention.backward(&cache.attention, &ds1);
        add_into(&mut de, &ds1);
        de
    }

    pub fn cast<U: Real>(&self) -> EncoderBlock<U> {
        EncoderBlock {
            norm1: self.norm1.cast(),
            attention: self.attention.cast(),
            norm2: self.norm2.cast(),
            mlp: self.mlp.cast(),
        }
    }
}

/// Named-parameter traversal shared by the layer types.
pub(crate) trait Visit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

macro_rules! impl_visit {
    ($ty:ident { $($field:ident),* } params { $($param:ident),* }) => {
        impl<T: Real> Visit<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
                $( f(&format!("{prefix}.{}", stringify!($param)), &self.$param); )*
                $( self.$field.visit(&format!("{prefix}.{}", stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
                $( f(&format!("{prefix}.{}", stringify!($param)), &mut self.$param); )*
                $( self.$field.visit_mut(&format!("{prefix}.{}", stringify!($field)), f); )*
            }
        }
    };
}

impl_visit!(Linear {} params { weight, bias });
impl_visit!(LayerNorm {} params { gain, bias });
impl_visit!(MultiHeadAttention { query, key, value, output } params {});
impl_visit!(Mlp { fc1, fc2 } params {});
impl_visit!(EncoderBlock { norm1, attention, norm2, mlp } params {});
