//! Autoregressive long-term anticipation. The decoder is re-implemented here
//! in incremental form with per-layer key/value caches: each new position
//! reuses everything computed for past positions, and its attention over the
//! cached prefix is arithmetically identical to a full masked re-decode.
//! Predicted features are re-injected directly as the next head input
//! (post-projector space, which is what the feature loss trains them to
//! match).

use crate::error::{AvtError, Result};
use crate::head::{AvtModel, ClipInput};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{no_grad, Scalar, Tensor};

/// One rollout step: 1-based step index, predicted action, its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStep {
    pub step: usize,
    pub action: usize,
    pub prob: f64,
}

/// Sequence of rollout predictions with a run-length compressed view.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub steps: Vec<RolloutStep>,
}

impl RolloutTrace {
    /// Collapses consecutive repeats into (action, repeat count).
    pub fn run_length(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((a, n)) if *a == s.action => *n += 1,
                _ => out.push((s.action, 1)),
            }
        }
        out
    }
}

struct LinearW<F: Scalar> {
    w: Vec<F>,
    b: Vec<F>,
    rows: usize,
    cols: usize,
}

impl<F: Scalar> LinearW<F> {
    fn from(l: &Linear<F>) -> Self {
        LinearW {
            w: l.weight.to_vec(),
            b: l.bias.to_vec(),
            rows: l.weight.shape()[0],
            cols: l.weight.shape()[1],
        }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.rows);
        let mut out = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.cols..(i + 1) * self.cols];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }
}

struct NormW<F: Scalar> {
    gain: Vec<F>,
    bias: Vec<F>,
    eps: f64,
}

impl<F: Scalar> NormW<F> {
    fn from(ln: &LayerNorm<F>) -> Self {
        NormW { gain: ln.gain.to_vec(), bias: ln.bias.to_vec(), eps: ln.eps }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        let n = x.len();
        let inv_n = F::ONE / F::from_f64(n as f64);
        let mut mu = F::ZERO;
        for &v in x {
            mu += v;
        }
        mu = mu * inv_n;
        let mut var = F::ZERO;
        for &v in x {
            let d = v - mu;
            var += d * d;
        }
        var = var * inv_n;
        let s = (var + F::from_f64(self.eps)).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - mu) / s * self.gain[j] + self.bias[j])
            .collect()
    }
}

struct AttnW<F: Scalar> {
    wq: LinearW<F>,
    wk: LinearW<F>,
    wv: LinearW<F>,
    wo: LinearW<F>,
    heads: usize,
}

impl<F: Scalar> AttnW<F> {
    fn from(a: &MultiHeadAttention<F>) -> Self {
        AttnW {
            wq: LinearW::from(&a.wq),
            wk: LinearW::from(&a.wk),
            wv: LinearW::from(&a.wv),
            wo: LinearW::from(&a.wo),
            heads: a.heads,
        }
    }
}

struct LayerW<F: Scalar> {
    ln1: NormW<F>,
    attn: AttnW<F>,
    ln2: NormW<F>,
    fc1: LinearW<F>,
    fc2: LinearW<F>,
}

struct LayerCache<F: Scalar> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::ONE + (x * inv_sqrt2).erf())
}

fn softmax_inplace<F: Scalar>(v: &mut [F]) {
    let mut mx = F::neg_infinity();
    for &x in v.iter() {
        mx = mx.maximum(x);
    }
    let mut s = F::ZERO;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x = *x / s;
    }
}

/// Incremental causal decoder over raw weight copies, growing per-layer K/V
/// caches one position at a time.
pub struct IncrementalDecoder<F: Scalar> {
    dim: usize,
    max_t: usize,
    pos_emb: Vec<F>,
    layers: Vec<LayerW<F>>,
    final_ln: NormW<F>,
    classifier: LinearW<F>,
    caches: Vec<LayerCache<F>>,
    position: usize,
}

impl<F: Scalar> IncrementalDecoder<F> {
    pub fn new(model: &AvtModel<F>) -> Self {
        let dec = &model.decoder;
        let layers: Vec<LayerW<F>> = dec
            .blocks
            .iter()
            .map(|b| LayerW {
                ln1: NormW::from(&b.ln1),
                attn: AttnW::from(&b.attn),
                ln2: NormW::from(&b.ln2),
                fc1: LinearW::from(&b.mlp.fc1),
                fc2: LinearW::from(&b.mlp.fc2),
            })
            .collect();
        let caches = (0..layers.len()).map(|_| LayerCache { keys: Vec::new(), values: Vec::new() }).collect();
        IncrementalDecoder {
            dim: dec.cfg.dim,
            max_t: dec.cfg.max_t,
            pos_emb: dec.pos_emb.to_vec(),
            layers,
            final_ln: NormW::from(&dec.final_ln),
            classifier: LinearW::from(&model.classifier),
            caches,
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds one head-space input row and returns its predicted future
    /// feature and class distribution.
    pub fn append(&mut self, input_row: &[F]) -> Result<(Vec<F>, Vec<F>)> {
        assert_eq!(input_row.len(), self.dim, "input row dim mismatch");
        if self.position >= self.max_t {
            return Err(AvtError::Config(format!(
                "incremental decode at position {} exceeds max_t {}",
                self.position, self.max_t
            )));
        }
        let pos = self.position;
        let mut x: Vec<F> = input_row
            .iter()
            .zip(&self.pos_emb[pos * self.dim..(pos + 1) * self.dim])
            .map(|(&v, &p)| v + p)
            .collect();

        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            let h = layer.ln1.apply(&x);
            let q = layer.attn.wq.apply(&h);
            let k_new = layer.attn.wk.apply(&h);
            let v_new = layer.attn.wv.apply(&h);
            cache.keys.push(k_new);
            cache.values.push(v_new);

            let heads = layer.attn.heads;
            let dh = self.dim / heads;
            let scale = F::from_f64(1.0 / (dh as f64).sqrt());
            let t = cache.keys.len();
            let mut merged = vec![F::ZERO; self.dim];
            for hd in 0..heads {
                let (c0, c1) = (hd * dh, (hd + 1) * dh);
                let mut scores: Vec<F> = (0..t)
                    .map(|j| {
                        let kj = &cache.keys[j][c0..c1];
                        let mut dot = F::ZERO;
                        for (a, b) in q[c0..c1].iter().zip(kj) {
                            dot += *a * *b;
                        }
                        dot * scale
                    })
                    .collect();
                softmax_inplace(&mut scores);
                for (j, &w) in scores.iter().enumerate() {
                    let vj = &cache.values[j][c0..c1];
                    for (o, &v) in merged[c0..c1].iter_mut().zip(vj) {
                        *o += w * v;
                    }
                }
            }
            let attn_out = layer.attn.wo.apply(&merged);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += *a;
            }

            let h2 = layer.ln2.apply(&x);
            let mut hidden = layer.fc1.apply(&h2);
            for v in hidden.iter_mut() {
                *v = gelu_scalar(*v);
            }
            let mlp_out = layer.fc2.apply(&hidden);
            for (xi, m) in x.iter_mut().zip(&mlp_out) {
                *xi += *m;
            }
        }

        let z_hat = self.final_ln.apply(&x);
        let mut probs = self.classifier.apply(&z_hat);
        softmax_inplace(&mut probs);
        self.position += 1;
        Ok((z_hat, probs))
    }
}

fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Head-space input rows for a clip: encode (if needed) and project, outside
/// the tape.
pub fn projected_rows<F: Scalar>(model: &AvtModel<F>, input: &ClipInput<'_, F>) -> Result<Vec<Vec<F>>> {
    no_grad(|| {
        let out_rows = match input {
            ClipInput::Frames(frames) => {
                let backbone = model.backbone.as_ref().ok_or_else(|| {
                    AvtError::Config("frame input requires a backbone".to_string())
                })?;
                model.projector.forward(&backbone.encode_clip(frames))
            }
            ClipInput::Features(f) => model.projector.forward(f),
        };
        let (t, d) = (out_rows.shape()[0], out_rows.shape()[1]);
        let data = out_rows.to_vec();
        Ok((0..t).map(|i| data[i * d..(i + 1) * d].to_vec()).collect())
    })
}

/// Rolls the model out `n_steps` into the future. Step 1 is the next-action
/// prediction from the observed clip; each later step re-injects the newest
/// predicted feature as the next input, reusing cached keys/values for all
/// earlier positions.
pub fn rollout<F: Scalar>(model: &AvtModel<F>, input: &ClipInput<'_, F>, n_steps: usize) -> Result<RolloutTrace> {
    if n_steps == 0 {
        return Err(AvtError::Config("rollout needs at least one step".to_string()));
    }
    let rows = projected_rows(model, input)?;
    let t = rows.len();
    let max_t = model.decoder.cfg.max_t;
    if n_steps + t > max_t {
        return Err(AvtError::Config(format!(
            "rollout of {n_steps} steps from {t} observed frames exceeds max_t {max_t}"
        )));
    }

    let mut inc = IncrementalDecoder::new(model);
    let mut last = None;
    for row in &rows {
        last = Some(inc.append(row)?);
    }
    let (mut z_hat, mut probs) = last.expect("clip is non-empty");

    let mut steps = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let action = argmax(&probs);
        steps.push(RolloutStep { step, action, prob: probs[action].to_f64() });
        if step < n_steps {
            let (z, p) = inc.append(&z_hat)?;
            z_hat = z;
            probs = p;
        }
    }
    Ok(RolloutTrace { steps })
}

/// Full-recompute reference: decodes the whole extended sequence through the
/// tape path for every step. Used to verify the cache path.
pub fn rollout_recompute<F: Scalar>(
    model: &AvtModel<F>,
    input: &ClipInput<'_, F>,
    n_steps: usize,
) -> Result<RolloutTrace> {
    let rows = projected_rows(model, input)?;
    let t = rows.len();
    let max_t = model.decoder.cfg.max_t;
    if n_steps + t > max_t {
        return Err(AvtError::Config(format!(
            "rollout of {n_steps} steps from {t} observed frames exceeds max_t {max_t}"
        )));
    }
    no_grad(|| {
        let d = model.head_dim();
        let mut all_rows: Vec<F> = rows.iter().flatten().cloned().collect();
        let mut steps = Vec::with_capacity(n_steps);
        for step in 1..=n_steps {
            let cur_t = all_rows.len() / d;
            let z = Tensor::from_vec(vec![cur_t, d], all_rows.clone());
            let z_hat = model.decoder.decode(&z)?;
            let probs = model.classify(&z_hat);
            let last_probs = probs.to_vec()[(cur_t - 1) * model.num_classes()..].to_vec();
            let action = argmax(&last_probs);
            steps.push(RolloutStep { step, action, prob: last_probs[action].to_f64() });
            all_rows.extend_from_slice(&z_hat.to_vec()[(cur_t - 1) * d..]);
        }
        Ok(RolloutTrace { steps })
    })
}

/// Per-step class distributions along a rollout, cached and recomputed;
/// test hook for the equivalence property.
pub fn rollout_logit_traces<F: Scalar>(
    model: &AvtModel<F>,
    input: &ClipInput<'_, F>,
    n_steps: usize,
) -> Result<(Vec<Vec<F>>, Vec<Vec<F>>)> {
    let rows = projected_rows(model, input)?;
    let d = model.head_dim();

    let mut inc = IncrementalDecoder::new(model);
    let mut cached = Vec::new();
    let mut last = None;
    for row in &rows {
        last = Some(inc.append(row)?);
    }
    let (mut z_hat, mut probs) = last.unwrap();
    cached.push(probs.clone());
    for _ in 1..n_steps {
        let (z, p) = inc.append(&z_hat)?;
        z_hat = z;
        probs = p;
        cached.push(probs.clone());
    }

    let recomputed = no_grad(|| -> Result<Vec<Vec<F>>> {
        let mut all_rows: Vec<F> = rows.iter().flatten().cloned().collect();
        let mut out = Vec::new();
        for _ in 0..n_steps {
            let cur_t = all_rows.len() / d;
            let z = Tensor::from_vec(vec![cur_t, d], all_rows.clone());
            let z_hat = model.decoder.decode(&z)?;
            let probs = model.classify(&z_hat);
            out.push(probs.to_vec()[(cur_t - 1) * model.num_classes()..].to_vec());
            all_rows.extend_from_slice(&z_hat.to_vec()[(cur_t - 1) * d..]);
        }
        Ok(out)
    })?;
    Ok((cached, recomputed))
}
