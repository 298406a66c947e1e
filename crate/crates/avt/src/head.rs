//! The anticipation head: a linear projector from backbone features into head
//! space, a causal masked transformer decoder with learned absolute temporal
//! position embeddings and a final LayerNorm, and a linear classifier applied
//! at every timestep. Position t can only attend to positions 1..t, so
//! predictions never see the future.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Frame, VitEncoder};
use crate::error::{AvtError, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HeadConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Temporal position table size; decode length plus rollout must fit.
    pub max_t: usize,
}

impl HeadConfig {
    /// Desk-scale head.
    pub fn desk() -> Self {
        HeadConfig { dim: 64, layers: 2, heads: 4, mlp_ratio: 4, max_t: 32 }
    }

    /// Full-scale head dimensions.
    pub fn full_scale() -> Self {
        HeadConfig { dim: 2048, layers: 6, heads: 4, mlp_ratio: 4, max_t: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(AvtError::Config(format!(
                "head dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Lower-triangular allowed pattern: position i may attend to j iff j ≤ i.
#[derive(Debug, Clone)]
pub struct CausalMask {
    t: usize,
    allowed: Vec<bool>,
}

impl CausalMask {
    pub fn new(t: usize) -> Self {
        assert!(t >= 1, "causal mask needs at least one position");
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        CausalMask { t, allowed }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.t + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive form: 0 where allowed, −∞ where blocked. Applying this before
    /// softmax drives blocked weights to exactly zero, which is what makes
    /// prefix consistency exact rather than approximate.
    pub fn to_additive<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { F::ZERO } else { F::neg_infinity() })
            .collect();
        Tensor::from_vec(vec![self.t, self.t], data)
    }
}

/// Attention recorded from a decode, head-averaged per layer.
pub struct HeadTrace {
    pub attention: Vec<Vec<f64>>,
}

/// Causal masked transformer decoder producing future features.
pub struct CausalDecoder<F: Scalar> {
    pub cfg: HeadConfig,
    pub pos_emb: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub final_ln: LayerNorm<F>,
}

impl<F: Scalar> CausalDecoder<F> {
    pub fn new<R: Rng>(cfg: HeadConfig, rng: &mut R) -> Self {
        cfg.validate().expect("invalid head config");
        CausalDecoder {
            pos_emb: Tensor::param(
                vec![cfg.max_t, cfg.dim],
                Tensor::<F>::trunc_normal(vec![cfg.max_t, cfg.dim], 0.02, rng).to_vec(),
            ),
            blocks: (0..cfg.layers).map(|_| Block::new(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)).collect(),
            final_ln: LayerNorm::new(cfg.dim),
            cfg,
        }
    }

    /// Maps `[T, dim]` projected frame features to `[T, dim]` predicted
    /// future features. Row t of the output attends to rows 1..t only.
    pub fn decode(&self, z_proj: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode_inner(z_proj, None)
    }

    pub fn decode_traced(&self, z_proj: &Tensor<F>) -> Result<(Tensor<F>, HeadTrace)> {
        let mut trace = HeadTrace { attention: Vec::new() };
        let out = self.decode_inner(z_proj, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn decode_inner(&self, z_proj: &Tensor<F>, mut trace: Option<&mut HeadTrace>) -> Result<Tensor<F>> {
        let t = z_proj.shape()[0];
        if t > self.cfg.max_t {
            return Err(AvtError::Config(format!(
                "sequence length {t} exceeds the temporal position table max_t={}",
                self.cfg.max_t
            )));
        }
        let mask = CausalMask::new(t).to_additive::<F>();
        let mut x = z_proj.add(&self.pos_emb.slice_rows(0, t));
        for block in &self.blocks {
            let (next, attn) = block.forward_attn(&x, Some(&mask));
            if let Some(tr) = trace.as_deref_mut() {
                tr.attention.push(attn);
            }
            x = next;
        }
        Ok(self.final_ln.forward(&x))
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.pos_emb"), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("{prefix}.block{i}"), out);
        }
        self.final_ln.named_params(&format!("{prefix}.final_ln"), out);
    }
}

/// Per-step outputs of a full forward pass.
#[derive(Debug)]
pub struct ModelOutputs<F: Scalar> {
    /// Projected input features, `[T, head_dim]`: the regression targets
    /// for the future-feature loss.
    pub z_proj: Tensor<F>,
    /// Predicted future features, `[T, head_dim]`.
    pub z_hat: Tensor<F>,
    /// Class distributions per step, `[T, K]`, rows summing to 1. Row T is
    /// the next-action prediction.
    pub y_hat: Tensor<F>,
}

/// Clip input: raw frames for the attention backbone, or precomputed
/// per-frame feature vectors for fixed-feature operation.
pub enum ClipInput<'a, F: Scalar> {
    Frames(&'a [Frame<F>]),
    Features(&'a Tensor<F>),
}

/// The full anticipation model. In fixed-feature mode `backbone` is absent
/// and features feed the projector directly, so only head-side parameters
/// exist to train.
pub struct AvtModel<F: Scalar> {
    pub backbone: Option<VitEncoder<F>>,
    pub projector: Linear<F>,
    pub decoder: CausalDecoder<F>,
    pub classifier: Linear<F>,
}

impl<F: Scalar> AvtModel<F> {
    pub fn new<R: Rng>(
        backbone: Option<VitEncoder<F>>,
        input_dim: usize,
        head: HeadConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        if let Some(b) = &backbone {
            assert_eq!(b.cfg.dim, input_dim, "backbone dim must match projector input");
        }
        let head_dim = head.dim;
        AvtModel {
            backbone,
            projector: Linear::new(input_dim, head_dim, rng),
            decoder: CausalDecoder::new(head, rng),
            classifier: Linear::new(head_dim, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.decoder.cfg.dim
    }

    pub fn input_dim(&self) -> usize {
        self.projector.in_dim()
    }

    fn input_features(&self, input: &ClipInput<'_, F>) -> Result<Tensor<F>> {
        match input {
            ClipInput::Frames(frames) => {
                if frames.is_empty() {
                    return Err(AvtError::Config("empty clip".to_string()));
                }
                let backbone = self.backbone.as_ref().ok_or_else(|| {
                    AvtError::Config("frame input requires a backbone; model is in fixed-feature mode".to_string())
                })?;
                Ok(backbone.encode_clip(frames))
            }
            ClipInput::Features(f) => {
                if f.shape().len() != 2 || f.shape()[0] == 0 {
                    return Err(AvtError::Config(format!(
                        "feature input must be [T, dim] with T >= 1, got {:?}",
                        f.shape()
                    )));
                }
                if f.shape()[1] != self.projector.in_dim() {
                    return Err(AvtError::Config(format!(
                        "feature dim {} does not match projector input dim {}",
                        f.shape()[1],
                        self.projector.in_dim()
                    )));
                }
                Ok((*f).clone())
            }
        }
    }

    /// Full pipeline: encode (or take) features, project, decode causally,
    /// classify every step.
    pub fn forward(&self, input: &ClipInput<'_, F>) -> Result<ModelOutputs<F>> {
        let features = self.input_features(input)?;
        let z_proj = self.projector.forward(&features);
        let z_hat = self.decoder.decode(&z_proj)?;
        let y_hat = self.classify(&z_hat);
        Ok(ModelOutputs { z_proj, z_hat, y_hat })
    }

    pub fn forward_traced(&self, input: &ClipInput<'_, F>) -> Result<(ModelOutputs<F>, HeadTrace)> {
        let features = self.input_features(input)?;
        let z_proj = self.projector.forward(&features);
        let (z_hat, trace) = self.decoder.decode_traced(&z_proj)?;
        let y_hat = self.classify(&z_hat);
        Ok((ModelOutputs { z_proj, z_hat, y_hat }, trace))
    }

    /// Linear map then softmax; the same classifier applies to every step.
    pub fn classify(&self, z_hat: &Tensor<F>) -> Tensor<F> {
        self.classifier.forward(z_hat).softmax(1)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            b.named_params("backbone", &mut out);
        }
        self.projector.named_params("projector", &mut out);
        self.decoder.named_params("decoder", &mut out);
        self.classifier.named_params("classifier", &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_model(seed: u64, input_dim: usize, k: usize) -> AvtModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AvtModel::new(None, input_dim, HeadConfig::desk(), k, &mut rng)
    }

    #[test]
    fn causal_mask_shape_and_count() {
        let m = CausalMask::new(1);
        assert!(m.is_allowed(0, 0));
        assert_eq!(m.count_allowed(), 1);

        let m = CausalMask::new(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), j <= i, "({i},{j})");
            }
        }
        assert_eq!(m.count_allowed(), 3 * 4 / 2);
    }

    #[test]
    fn projector_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let id = Linear::<f64>::identity(4);
        assert_eq!(id.forward(&x).to_vec(), x.to_vec());

        let zero = Linear::<f64> {
            weight: Tensor::param(vec![4, 4], vec![0.0; 16]),
            bias: Tensor::param(vec![4], vec![0.5; 4]),
        };
        for &v in zero.forward(&x).data().iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn classifier_zero_weights_give_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = desk_model(1, 16, 10);
        model.classifier = Linear {
            weight: Tensor::param(vec![64, 10], vec![0.0; 640]),
            bias: Tensor::param(vec![10], vec![0.0; 10]),
        };
        let z = Tensor::<f64>::randn(vec![5, 64], 1.0, &mut rng);
        let y = model.classify(&z);
        for &v in y.data().iter() {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_rows_sum_to_one_and_shift_invariant_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = desk_model(2, 16, 8);
        let z = Tensor::<f64>::randn(vec![4, 64], 1.0, &mut rng);
        let y = model.classify(&z);
        let v = y.to_vec();
        for t in 0..4 {
            let row = &v[t * 8..(t + 1) * 8];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }

        // argmax invariant to adding a constant to all logits
        let logits = model.classifier.forward(&z);
        let shifted = logits.add(&Tensor::full(vec![4, 8], 7.5));
        let am = |t: &Tensor<f64>| -> Vec<usize> {
            let d = t.to_vec();
            (0..4)
                .map(|r| {
                    (0..8)
                        .max_by(|&a, &b| d[r * 8 + a].partial_cmp(&d[r * 8 + b]).unwrap())
                        .unwrap()
                })
                .collect()
        };
        assert_eq!(am(&logits.softmax(1)), am(&shifted.softmax(1)));
    }

    #[test]
    fn decode_rejects_sequences_beyond_max_t() {
        let model = desk_model(3, 16, 8);
        let x = Tensor::<f64>::zeros(vec![33, 64]);
        let err = model.decoder.decode(&x).unwrap_err();
        assert!(matches!(err, AvtError::Config(_)));
    }

    #[test]
    fn feature_dim_mismatch_is_config_error() {
        let model = desk_model(4, 16, 8);
        let x = Tensor::<f64>::zeros(vec![5, 17]);
        let err = model.forward(&ClipInput::Features(&x)).unwrap_err();
        assert!(matches!(err, AvtError::Config(_)));
    }

    #[test]
    fn causality_perturbation_leaves_earlier_outputs_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = desk_model(5, 16, 8);
        let t = 6;
        let base = Tensor::<f64>::randn(vec![t, 16], 1.0, &mut rng);
        let out = no_grad(|| model.forward(&ClipInput::Features(&base))).unwrap();

        for tp in 1..t {
            let mut data = base.to_vec();
            for v in data[tp * 16..(tp + 1) * 16].iter_mut() {
                *v += 3.0;
            }
            let alt_in = Tensor::from_vec(vec![t, 16], data);
            let alt = no_grad(|| model.forward(&ClipInput::Features(&alt_in))).unwrap();
            let (y0, y1) = (out.y_hat.to_vec(), alt.y_hat.to_vec());
            let (z0, z1) = (out.z_hat.to_vec(), alt.z_hat.to_vec());
            let k = 8;
            let d = 64;
            assert_eq!(&y0[..tp * k], &y1[..tp * k], "y_hat before t'={tp}");
            assert_eq!(&z0[..tp * d], &z1[..tp * d], "z_hat before t'={tp}");
            assert_ne!(&y0[tp * k..], &y1[tp * k..], "perturbation must reach t'={tp}");
        }
    }

    #[test]
    fn causality_gradients_of_earlier_outputs_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = desk_model(6, 16, 8);
        let t = 5;
        let input = Tensor::param(vec![t, 16], Tensor::<f64>::randn(vec![t, 16], 1.0, &mut rng).to_vec());
        for query_t in 0..t {
            input.zero_grad();
            let out = model.forward(&ClipInput::Features(&input)).unwrap();
            let probe = out.y_hat.pick2(query_t, 3);
            probe.backward();
            let g = input.grad().unwrap();
            for later in (query_t + 1)..t {
                for j in 0..16 {
                    assert_eq!(g[later * 16 + j], 0.0, "grad of y[{query_t}] wrt input[{later}][{j}]");
                }
            }
            let earlier_nonzero = g[..(query_t + 1) * 16].iter().any(|&v| v != 0.0);
            assert!(earlier_nonzero);
        }
    }

    #[test]
    fn prefix_consistency_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = desk_model(7, 16, 8);
        let t = 6;
        let full_in = Tensor::<f64>::randn(vec![t, 16], 1.0, &mut rng);
        let full = no_grad(|| model.forward(&ClipInput::Features(&full_in))).unwrap();
        let fy = full.y_hat.to_vec();
        for prefix in 1..=t {
            let data = full_in.to_vec()[..prefix * 16].to_vec();
            let pin = Tensor::from_vec(vec![prefix, 16], data);
            let part = no_grad(|| model.forward(&ClipInput::Features(&pin))).unwrap();
            let py = part.y_hat.to_vec();
            let row = prefix - 1;
            assert_eq!(&py[row * 8..(row + 1) * 8], &fy[row * 8..(row + 1) * 8], "prefix {prefix}");
        }
    }

    #[test]
    fn attention_rows_respect_mask_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = desk_model(8, 16, 8);
        let t = 5;
        let x = Tensor::<f64>::randn(vec![t, 16], 1.0, &mut rng);
        let (_, trace) = no_grad(|| model.forward_traced(&ClipInput::Features(&x))).unwrap();
        for layer in &trace.attention {
            for i in 0..t {
                let mut s = 0.0;
                for j in 0..t {
                    let w = layer[i * t + j];
                    if j > i {
                        assert_eq!(w, 0.0, "attention ({i},{j}) must be masked");
                    }
                    s += w;
                }
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_step_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = desk_model(9, 16, 8);
        let x = Tensor::<f64>::randn(vec![1, 16], 1.0, &mut rng);
        let (out, trace) = no_grad(|| model.forward_traced(&ClipInput::Features(&x))).unwrap();
        assert_eq!(out.y_hat.shape(), &[1, 8]);
        for layer in &trace.attention {
            assert_eq!(layer.len(), 1);
            assert_eq!(layer[0], 1.0);
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = desk_model(10, 16, 8);
        let x = Tensor::<f64>::randn(vec![4, 16], 1.0, &mut rng);
        let a = no_grad(|| model.forward(&ClipInput::Features(&x))).unwrap();
        let b = no_grad(|| model.forward(&ClipInput::Features(&x))).unwrap();
        assert_eq!(a.z_hat.shape(), &[4, 64]);
        assert_eq!(a.y_hat.shape(), &[4, 8]);
        assert_eq!(a.y_hat.to_vec(), b.y_hat.to_vec());
        assert_eq!(a.z_hat.to_vec(), b.z_hat.to_vec());
    }

    #[test]
    fn two_layer_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = desk_model(11, 16, 8);
        let input = Tensor::param(vec![4, 16], Tensor::<f64>::randn(vec![4, 16], 1.0, &mut rng).to_vec());
        let w = Tensor::<f64>::randn(vec![4, 64], 1.0, &mut rng);
        let wy = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let mut params = vec![("input".to_string(), input.clone())];
        params.extend(model.named_params());
        let (ic, wc, wyc) = (input.clone(), w.clone(), wy.clone());
        let mut build = move || {
            let out = model.forward(&ClipInput::Features(&ic)).unwrap();
            out.z_hat.mul(&wc).sum_all().add(&out.y_hat.mul(&wyc).sum_all())
        };
        let report = gradcheck::check(&mut build, &params, 1e-4, Some(4));
        assert!(report.passes(1e-4), "{report:?}");
    }
}
