//! Transformer building blocks shared by the frame encoder and the causal
//! head: linear layers, layer norm with learned affine, multi-head attention,
//! and the pre-norm block.

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Affine map `x @ W + b` applied row-wise.
pub struct Linear<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::param(vec![in_dim, out_dim], Tensor::<F>::trunc_normal(vec![in_dim, out_dim], INIT_STD, rng).to_vec()),
            bias: Tensor::param(vec![out_dim], vec![F::ZERO; out_dim]),
        }
    }

    /// Square identity map; handy in tests.
    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::param(vec![dim, dim], Tensor::<F>::eye(dim).to_vec()),
            bias: Tensor::param(vec![dim], vec![F::ZERO; dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.matmul(&self.weight).add_row(&self.bias)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// LayerNorm over the last axis with learned gain/bias.
pub struct LayerNorm<F: Scalar> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
    pub eps: f64,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(vec![dim], vec![F::ONE; dim]),
            bias: Tensor::param(vec![dim], vec![F::ZERO; dim]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Multi-head self-attention over a `[tokens, dim]` sequence. Heads are
/// column slices of shared Q/K/V projections. An optional additive mask
/// (0 / −∞) is applied to the pre-softmax scores.
pub struct MultiHeadAttention<F: Scalar> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Tensor<F> {
        self.forward_attn(x, mask).0
    }

    /// Returns the output and the head-averaged attention matrix
    /// (row-stochastic, `tokens × tokens`, as f64 for analysis).
    pub fn forward_attn(&self, x: &Tensor<F>, mask: Option<&Tensor<F>>) -> (Tensor<F>, Vec<f64>) {
        let t = x.shape()[0];
        let dim = self.wq.out_dim();
        let dh = dim / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_avg = vec![0.0f64; t * t];
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(c0, c1);
            let kh = k.slice_cols(c0, c1);
            let vh = v.slice_cols(c0, c1);
            let mut scores = qh.matmul(&kh.transpose2()).scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            let attn = scores.softmax(1);
            {
                let a = attn.data();
                for (acc, &w) in attn_avg.iter_mut().zip(a.iter()) {
                    *acc += w.to_f64();
                }
            }
            outs.push(attn.matmul(&vh));
        }
        let inv_h = 1.0 / self.heads as f64;
        for w in &mut attn_avg {
            *w *= inv_h;
        }
        let merged = Tensor::concat_cols(&outs);
        (self.wo.forward(&merged), attn_avg)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp { fc1: Linear::new(dim, hidden, rng), fc2: Linear::new(hidden, dim, rng) }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.fc1.named_params(&format!("{prefix}.fc1"), out);
        self.fc2.named_params(&format!("{prefix}.fc2"), out);
    }
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
pub struct Block<F: Scalar> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

impl<F: Scalar> Block<F> {
    pub fn new<R: Rng>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Tensor<F> {
        self.forward_attn(x, mask).0
    }

    pub fn forward_attn(&self, x: &Tensor<F>, mask: Option<&Tensor<F>>) -> (Tensor<F>, Vec<f64>) {
        let (a, attn) = self.attn.forward_attn(&self.ln1.forward(x), mask);
        let x = x.add(&a);
        let out = x.add(&self.mlp.forward(&self.ln2.forward(&x)));
        (out, attn)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.attn.named_params(&format!("{prefix}.attn"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.mlp.named_params(&format!("{prefix}.mlp"), out);
    }
}
