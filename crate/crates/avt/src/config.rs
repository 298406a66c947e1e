//! Run configuration: a flat key-value text format (diff-friendly, one
//! `key = value` per line, `#` comments) merged with command-line overrides;
//! flags win over the file, the file wins over defaults.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{ClipSpec, DataKind, SchemaSpec};
use crate::error::{AvtError, Result};
use crate::head::HeadConfig;
use crate::objectives::LossMode;

/// Parses the flat key-value grammar:
///
/// ```text
/// # comment
/// key = value
/// ```
///
/// Keys are `[A-Za-z0-9_.]+`; the value is everything after the first `=`,
/// trimmed. Later occurrences of a key override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(AvtError::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(AvtError::Config(format!("line {}: invalid key `{key}`", lineno + 1)));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

/// Everything a run needs: schema generation, clip sampling, model shape,
/// losses, and the optimizer schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // schema generation
    pub k: usize,
    pub order: usize,
    /// Probability mass spread uniformly instead of following the schema rule.
    pub epsilon: f64,
    pub feature_dim: usize,
    pub sigma: f64,
    pub duration_p: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    pub n_videos: usize,
    pub video_len: usize,
    /// `features` or `frames`.
    pub data_kind: String,

    // clip sampling
    pub tau_o: usize,
    pub tau_a: usize,
    /// Defaults to `tau_a` when absent.
    pub stride: Option<usize>,
    pub train_frac: f64,

    // model
    /// `fixed`, `avt-tiny`, or `avt-b`.
    pub backbone: String,
    pub head_dim: usize,
    pub head_layers: usize,
    pub head_heads: usize,
    pub head_mlp_ratio: usize,
    pub head_max_t: usize,

    // training
    /// `naive` or `anticipative`.
    pub mode: String,
    pub epochs: u32,
    pub warmup: u32,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nce: bool,
    pub nce_temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            k: 8,
            order: 2,
            epsilon: 0.2,
            feature_dim: 16,
            sigma: 0.3,
            duration_p: 0.5,
            duration_min: 1,
            duration_max: 4,
            n_videos: 50,
            video_len: 100,
            data_kind: "features".to_string(),
            tau_o: 10,
            tau_a: 1,
            stride: None,
            train_frac: 0.8,
            backbone: "fixed".to_string(),
            head_dim: 64,
            head_layers: 2,
            head_heads: 4,
            head_mlp_ratio: 4,
            head_max_t: 32,
            mode: "anticipative".to_string(),
            epochs: 30,
            warmup: 12,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-6,
            nce: false,
            nce_temperature: 0.07,
        }
    }
}

macro_rules! apply_field {
    ($map:expr, $key:literal, $slot:expr) => {
        if let Some(v) = $map.remove($key) {
            $slot = v
                .parse()
                .map_err(|_| AvtError::Config(format!("field `{}`: cannot parse `{v}`", $key)))?;
        }
    };
}

impl RunConfig {
    /// Applies `key = value` entries over this config; unknown keys and
    /// unparseable values are validation errors naming the field.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let mut map = kv.clone();
        apply_field!(map, "seed", self.seed);
        apply_field!(map, "k", self.k);
        apply_field!(map, "order", self.order);
        apply_field!(map, "epsilon", self.epsilon);
        apply_field!(map, "feature_dim", self.feature_dim);
        apply_field!(map, "sigma", self.sigma);
        apply_field!(map, "duration_p", self.duration_p);
        apply_field!(map, "duration_min", self.duration_min);
        apply_field!(map, "duration_max", self.duration_max);
        apply_field!(map, "n_videos", self.n_videos);
        apply_field!(map, "video_len", self.video_len);
        apply_field!(map, "data_kind", self.data_kind);
        apply_field!(map, "tau_o", self.tau_o);
        apply_field!(map, "tau_a", self.tau_a);
        if let Some(v) = map.remove("stride") {
            self.stride = Some(
                v.parse()
                    .map_err(|_| AvtError::Config(format!("field `stride`: cannot parse `{v}`")))?,
            );
        }
        apply_field!(map, "train_frac", self.train_frac);
        apply_field!(map, "backbone", self.backbone);
        apply_field!(map, "head_dim", self.head_dim);
        apply_field!(map, "head_layers", self.head_layers);
        apply_field!(map, "head_heads", self.head_heads);
        apply_field!(map, "head_mlp_ratio", self.head_mlp_ratio);
        apply_field!(map, "head_max_t", self.head_max_t);
        apply_field!(map, "mode", self.mode);
        apply_field!(map, "epochs", self.epochs);
        apply_field!(map, "warmup", self.warmup);
        apply_field!(map, "lr", self.lr);
        apply_field!(map, "momentum", self.momentum);
        apply_field!(map, "weight_decay", self.weight_decay);
        apply_field!(map, "nce", self.nce);
        apply_field!(map, "nce_temperature", self.nce_temperature);
        if let Some(unknown) = map.keys().next() {
            return Err(AvtError::Config(format!("unknown field `{unknown}`")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if LossMode::parse(&self.mode).is_none() {
            return Err(AvtError::Config(format!(
                "field `mode`: `{}` is not one of naive|anticipative",
                self.mode
            )));
        }
        if self.backbone != "fixed" && BackboneConfig::preset(&self.backbone).is_none() {
            return Err(AvtError::Config(format!(
                "field `backbone`: `{}` is not one of fixed|avt-tiny|avt-b",
                self.backbone
            )));
        }
        if self.data_kind != "features" && self.data_kind != "frames" {
            return Err(AvtError::Config(format!(
                "field `data_kind`: `{}` is not one of features|frames",
                self.data_kind
            )));
        }
        if self.data_kind == "frames" && self.backbone == "fixed" {
            return Err(AvtError::Config(
                "field `backbone`: frame data requires an encoder backbone".to_string(),
            ));
        }
        if self.data_kind == "features" && self.backbone != "fixed" {
            return Err(AvtError::Config(
                "field `backbone`: feature data runs in fixed mode".to_string(),
            ));
        }
        if self.tau_o == 0 || self.tau_a == 0 {
            return Err(AvtError::Config("fields `tau_o`/`tau_a` must be positive".to_string()));
        }
        if self.stride == Some(0) {
            return Err(AvtError::Config("field `stride` must be positive".to_string()));
        }
        if self.epochs == 0 {
            return Err(AvtError::Config("field `epochs` must be at least 1".to_string()));
        }
        if self.warmup > self.epochs {
            return Err(AvtError::Config(format!(
                "field `warmup`: {} exceeds epochs {}",
                self.warmup, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(AvtError::Config("field `train_frac` must be in [0, 1]".to_string()));
        }
        self.head_config().validate()?;
        self.schema_spec().validate()?;
        Ok(())
    }

    pub fn loss_mode(&self) -> LossMode {
        LossMode::parse(&self.mode).expect("validated mode")
    }

    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec::new(self.tau_o, self.tau_a, self.stride)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            dim: self.head_dim,
            layers: self.head_layers,
            heads: self.head_heads,
            mlp_ratio: self.head_mlp_ratio,
            max_t: self.head_max_t,
        }
    }

    pub fn schema_spec(&self) -> SchemaSpec {
        let mut spec = SchemaSpec::desk(self.k, self.epsilon, self.seed);
        spec.order = self.order;
        if self.order != 2 {
            // rebuild the shifted-sum rule over an order-m context
            let contexts = self.k.pow(self.order as u32);
            let mut transitions = vec![0.0; contexts * self.k];
            for ctx in 0..contexts {
                let mut rest = ctx;
                let mut sum = 0;
                for _ in 0..self.order {
                    sum += rest % self.k;
                    rest /= self.k;
                }
                let target = sum % self.k;
                let row = ctx * self.k;
                for c in 0..self.k {
                    transitions[row + c] = self.epsilon / self.k as f64;
                }
                transitions[row + target] += 1.0 - self.epsilon;
            }
            spec.transitions = transitions;
        }
        spec.duration_p = self.duration_p;
        spec.duration_min = self.duration_min;
        spec.duration_max = self.duration_max;
        spec.feature_dim = self.feature_dim;
        spec.sigma = self.sigma;
        SchemaSpec { seed: self.seed, ..spec }
    }

    pub fn data_kind(&self) -> Result<DataKind> {
        match self.data_kind.as_str() {
            "features" => Ok(DataKind::Features { dim: self.feature_dim }),
            "frames" => {
                let preset = BackboneConfig::preset(&self.backbone).ok_or_else(|| {
                    AvtError::Config("frame data requires a backbone preset".to_string())
                })?;
                Ok(DataKind::Frames {
                    height: preset.image_size,
                    width: preset.image_size,
                    channels: preset.channels,
                })
            }
            other => Err(AvtError::Config(format!("unknown data kind `{other}`"))),
        }
    }

    /// Snapshot in the flat key-value format, keys sorted.
    pub fn to_kv_string(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("k", self.k.to_string());
        map.insert("order", self.order.to_string());
        map.insert("epsilon", self.epsilon.to_string());
        map.insert("feature_dim", self.feature_dim.to_string());
        map.insert("sigma", self.sigma.to_string());
        map.insert("duration_p", self.duration_p.to_string());
        map.insert("duration_min", self.duration_min.to_string());
        map.insert("duration_max", self.duration_max.to_string());
        map.insert("n_videos", self.n_videos.to_string());
        map.insert("video_len", self.video_len.to_string());
        map.insert("data_kind", self.data_kind.clone());
        map.insert("tau_o", self.tau_o.to_string());
        map.insert("tau_a", self.tau_a.to_string());
        if let Some(s) = self.stride {
            map.insert("stride", s.to_string());
        }
        map.insert("train_frac", self.train_frac.to_string());
        map.insert("backbone", self.backbone.clone());
        map.insert("head_dim", self.head_dim.to_string());
        map.insert("head_layers", self.head_layers.to_string());
        map.insert("head_heads", self.head_heads.to_string());
        map.insert("head_mlp_ratio", self.head_mlp_ratio.to_string());
        map.insert("head_max_t", self.head_max_t.to_string());
        map.insert("mode", self.mode.clone());
        map.insert("epochs", self.epochs.to_string());
        map.insert("warmup", self.warmup.to_string());
        map.insert("lr", self.lr.to_string());
        map.insert("momentum", self.momentum.to_string());
        map.insert("weight_decay", self.weight_decay.to_string());
        map.insert("nce", self.nce.to_string());
        map.insert("nce_temperature", self.nce_temperature.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
