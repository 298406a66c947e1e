//! Per-frame feature extraction: a ViT-style encoder applied with shared
//! weights to each frame independently. Frames are split into non-overlapping
//! patches, linearly projected, prefixed with a learnable class token, given
//! learned spatial position embeddings, and passed through pre-norm
//! transformer blocks with a final LayerNorm. The class-token row of the
//! final layer is the frame feature.
//!
//! Fixed-feature operation (offline extractors standing in for conv
//! backbones) bypasses this module entirely; see `data::features`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

/// One video frame: row-major `height × width × channels`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Frame<F: Scalar> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<F>,
}

impl<F: Scalar> Frame<F> {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<F>) -> Self {
        assert_eq!(pixels.len(), height * width * channels, "frame pixel count mismatch");
        Frame { height, width, channels, pixels }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> F {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    /// Desk-scale preset: trains in minutes while exercising every mechanism.
    pub fn avt_tiny() -> Self {
        BackboneConfig { image_size: 32, patch_size: 8, channels: 1, dim: 64, layers: 2, heads: 4, mlp_ratio: 4 }
    }

    /// ViT-B/16 dimensions as used by the full-scale model.
    pub fn avt_b() -> Self {
        BackboneConfig { image_size: 224, patch_size: 16, channels: 3, dim: 768, layers: 12, heads: 12, mlp_ratio: 4 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "avt-tiny" => Some(Self::avt_tiny()),
            "avt-b" => Some(Self::avt_b()),
            _ => None,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Tokens per frame: patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_size % self.patch_size != 0 {
            return Err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }
}

/// Splits a frame into flattened non-overlapping `p × p` patch vectors,
/// row-major over the patch grid and row-major (y, x, channel) within each
/// patch. Output is `[num_patches, p²·channels]`.
pub fn patchify<F: Scalar>(frame: &Frame<F>, p: usize) -> Tensor<F> {
    assert!(
        frame.height % p == 0 && frame.width % p == 0,
        "frame {}x{} not divisible into {p}x{p} patches",
        frame.height,
        frame.width
    );
    let (gh, gw) = (frame.height / p, frame.width / p);
    let pd = p * p * frame.channels;
    let mut data = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..frame.channels {
                        data.push(frame.at(py * p + y, px * p + x, c));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, pd], data)
}

/// Reassembles patch vectors back into a frame; inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(patches: &Tensor<F>, p: usize, height: usize, width: usize, channels: usize) -> Frame<F> {
    let (gh, gw) = (height / p, width / p);
    assert_eq!(patches.shape(), &[gh * gw, p * p * channels], "patch tensor shape mismatch");
    let mut pixels = vec![F::ZERO; height * width * channels];
    let src = patches.data();
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * p * p * channels;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..channels {
                        pixels[((py * p + y) * width + (px * p + x)) * channels + c] =
                            src[row + (y * p + x) * channels + c];
                    }
                }
            }
        }
    }
    drop(src);
    Frame::new(height, width, channels, pixels)
}

/// Activations captured during a traced encode, for attention visualization
/// and structural probes.
pub struct EncoderTrace {
    /// Head-averaged attention per layer, `tokens × tokens`, row-stochastic.
    pub attention: Vec<Vec<f64>>,
    /// Class-token row before the final LayerNorm.
    pub pre_final_class: Vec<f64>,
}

/// ViT-style frame encoder with shared weights across frames.
pub struct VitEncoder<F: Scalar> {
    pub cfg: BackboneConfig,
    pub patch_proj: Linear<F>,
    pub class_token: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub final_ln: LayerNorm<F>,
}

impl<F: Scalar> VitEncoder<F> {
    pub fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Self {
        cfg.validate().expect("invalid backbone config");
        let tokens = cfg.num_tokens();
        VitEncoder {
            patch_proj: Linear::new(cfg.patch_dim(), cfg.dim, rng),
            class_token: Tensor::param(vec![1, cfg.dim], Tensor::<F>::trunc_normal(vec![1, cfg.dim], 0.02, rng).to_vec()),
            pos_emb: Tensor::param(vec![tokens, cfg.dim], Tensor::<F>::trunc_normal(vec![tokens, cfg.dim], 0.02, rng).to_vec()),
            blocks: (0..cfg.layers).map(|_| Block::new(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)).collect(),
            final_ln: LayerNorm::new(cfg.dim),
            cfg,
        }
    }

    fn token_sequence(&self, frame: &Frame<F>) -> Tensor<F> {
        assert_eq!(
            frame.height,
            self.cfg.image_size,
            "frame height {} vs configured image size {}",
            frame.height,
            self.cfg.image_size
        );
        assert_eq!(frame.width, self.cfg.image_size, "frame width mismatch");
        assert_eq!(frame.channels, self.cfg.channels, "frame channel mismatch");
        let patches = patchify(frame, self.cfg.patch_size);
        let projected = self.patch_proj.forward(&patches);
        let tokens = Tensor::concat_rows(&[self.class_token.clone(), projected]);
        tokens.add(&self.pos_emb)
    }

    /// Class-token feature for one frame, shape `[1, dim]`.
    pub fn encode_frame(&self, frame: &Frame<F>) -> Tensor<F> {
        self.encode_frame_inner(frame, None)
    }

    pub fn encode_frame_traced(&self, frame: &Frame<F>) -> (Tensor<F>, EncoderTrace) {
        let mut trace = EncoderTrace { attention: Vec::new(), pre_final_class: Vec::new() };
        let out = self.encode_frame_inner(frame, Some(&mut trace));
        (out, trace)
    }

    fn encode_frame_inner(&self, frame: &Frame<F>, mut trace: Option<&mut EncoderTrace>) -> Tensor<F> {
        let mut x = self.token_sequence(frame);
        for block in &self.blocks {
            let (next, attn) = block.forward_attn(&x, None);
            if let Some(tr) = trace.as_deref_mut() {
                tr.attention.push(attn);
            }
            x = next;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.pre_final_class = x.slice_rows(0, 1).to_vec().iter().map(|v| v.to_f64()).collect();
        }
        let normed = self.final_ln.forward(&x);
        normed.slice_rows(0, 1)
    }

    /// Encodes every frame independently with shared weights; `[T, dim]`.
    /// No information flows across frames here.
    pub fn encode_clip(&self, frames: &[Frame<F>]) -> Tensor<F> {
        assert!(!frames.is_empty(), "encode_clip: empty clip");
        let rows: Vec<Tensor<F>> = frames.iter().map(|f| self.encode_frame(f)).collect();
        if rows.len() == 1 {
            rows.into_iter().next().unwrap()
        } else {
            Tensor::concat_rows(&rows)
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.patch_proj.named_params(&format!("{prefix}.patch_proj"), out);
        out.push((format!("{prefix}.class_token"), self.class_token.clone()));
        out.push((format!("{prefix}.pos_emb"), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("{prefix}.block{i}"), out);
        }
        self.final_ln.named_params(&format!("{prefix}.final_ln"), out);
    }
}
