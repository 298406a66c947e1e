//! Training: epoch loop with the warmup+cosine schedule, per-step loss
//! logging, deterministic seeded batch order, checkpointing (last and
//! best-validation), NaN abort with the last good checkpoint retained, and
//! resume.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{AnticipationSample, ClipSpec, Dataset, SampleData, SkipReason};
use crate::error::{AvtError, Result};
use crate::eval::PredictionRecord;
use crate::head::{AvtModel, ClipInput};
use crate::objectives::{total_loss, LossOptions};
use crate::tensor::{no_grad, optim::lr_at_epoch, optim::SgdConfig, optim::SgdMomentum, Scalar};

/// Train/val clip sets plus the segments that yielded no sample.
pub struct PreparedData<F: Scalar> {
    pub train: Vec<AnticipationSample<F>>,
    pub val: Vec<AnticipationSample<F>>,
    pub skipped: Vec<(usize, SkipReason)>,
}

impl<F: Scalar> SampleData<F> {
    pub fn as_input(&self) -> ClipInput<'_, F> {
        match self {
            SampleData::Features(t) => ClipInput::Features(t),
            SampleData::Frames(f) => ClipInput::Frames(f),
        }
    }
}

/// Samples every segment once; the sample set is a pure function of the
/// dataset and clip geometry.
pub fn prepare<F: Scalar>(dataset: &Dataset, clip: &ClipSpec, train_frac: f64) -> PreparedData<F> {
    let (train_idx, val_idx) = dataset.split(train_frac);
    let mut skipped = Vec::new();
    let mut collect = |indices: &[usize]| -> Vec<AnticipationSample<F>> {
        indices
            .iter()
            .filter_map(|&i| match dataset.sample_clip::<F>(i, clip) {
                Ok(s) => Some(s),
                Err(reason) => {
                    skipped.push((i, reason));
                    None
                }
            })
            .collect()
    };
    let train = collect(&train_idx);
    let val = collect(&val_idx);
    PreparedData { train, val, skipped }
}

/// Next-action prediction records for a sample set.
pub fn predict_records<F: Scalar>(
    model: &AvtModel<F>,
    samples: &[AnticipationSample<F>],
) -> Result<Vec<PredictionRecord>> {
    let k = model.num_classes();
    samples
        .iter()
        .map(|s| {
            let out = no_grad(|| model.forward(&s.input.as_input()))?;
            let t = out.y_hat.shape()[0];
            let probs = out.y_hat.to_vec()[(t - 1) * k..].iter().map(|v| v.to_f64()).collect();
            Ok(PredictionRecord { sample_id: s.sample_id.clone(), probs, true_action: s.labels.next_action })
        })
        .collect()
}

/// Fraction of samples whose top-scoring next action matches the truth.
pub fn top1<F: Scalar>(model: &AvtModel<F>, samples: &[AnticipationSample<F>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(AvtError::Eval("top-1 over an empty sample set".to_string()));
    }
    let records = predict_records(model, samples)?;
    crate::eval::topk_accuracy(&records, 1)
}

fn shuffled_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2_000_000_000 + u64::from(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub epochs_run: u32,
    pub best_val_top1: f64,
    pub final_val_top1: f64,
    pub final_train_loss: f64,
    pub skipped_samples: usize,
}

/// Runs (or resumes) training per the config over a prepared dataset,
/// writing `train_log.csv`, `epochs.csv`, `ckpt_last.avtc`, and
/// `ckpt_best.avtc` under `out_dir`.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| AvtError::io(out_dir.display().to_string(), e))?;
    crate::data::write_text(&out_dir.join("config_snapshot.cfg"), &cfg.to_kv_string())?;

    let prepared: PreparedData<f32> = prepare(dataset, &cfg.clip_spec(), cfg.train_frac);
    if prepared.train.is_empty() {
        return Err(AvtError::Config("no training samples survive clip sampling".to_string()));
    }
    if !prepared.skipped.is_empty() {
        let mut note = String::from("segment_index,reason\n");
        for (i, reason) in &prepared.skipped {
            note.push_str(&format!("{i},{reason}\n"));
        }
        crate::data::write_text(&out_dir.join("skipped_segments.csv"), &note)?;
    }

    let input_dim = match dataset.kind {
        crate::data::DataKind::Features { dim } => dim,
        crate::data::DataKind::Frames { .. } => {
            crate::backbone::BackboneConfig::preset(&cfg.backbone)
                .ok_or_else(|| AvtError::Config("frame training requires a backbone preset".to_string()))?
                .dim
        }
    };
    let k = dataset.num_classes();

    let mut model = checkpoint::build_model::<f32>(cfg, input_dim, k);
    let sgd_cfg = SgdConfig { base_lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let mut opt = SgdMomentum::new(model.named_params(), sgd_cfg);

    let mut start_epoch = 0u32;
    let mut best_val = f64::NEG_INFINITY;
    if let Some(ckpt_path) = resume {
        let (meta, resumed, extra) = checkpoint::load_model::<f32>(ckpt_path)?;
        if meta.vocab_hash != dataset.vocab.hash() {
            return Err(AvtError::Vocab(format!(
                "checkpoint vocabulary hash {} does not match dataset hash {}",
                meta.vocab_hash,
                dataset.vocab.hash()
            )));
        }
        model = resumed;
        opt = SgdMomentum::new(model.named_params(), sgd_cfg);
        for (name, values) in &extra {
            opt.restore_velocity(name, values);
        }
        start_epoch = meta.epoch;
        best_val = meta.best_val_top1;
    }

    let log_path = out_dir.join("train_log.csv");
    let epochs_path = out_dir.join("epochs.csv");
    let mut log = open_log(&log_path, start_epoch > 0, "epoch,step,l_next,l_cls,l_feat,total,lr\n")?;
    let mut epoch_log = open_log(&epochs_path, start_epoch > 0, "epoch,lr,train_loss_mean,val_top1\n")?;

    let loss_opts = LossOptions {
        mode: cfg.loss_mode(),
        nce: cfg.nce,
        nce_temperature: cfg.nce_temperature,
    };

    let mut last_val = f64::NAN;
    let mut last_mean_loss = f64::NAN;
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.epochs, cfg.warmup, cfg.lr);
        opt.set_lr(lr);
        let order = shuffled_order(prepared.train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (step, &idx) in order.iter().enumerate() {
            let sample = &prepared.train[idx];
            let out = model.forward(&sample.input.as_input())?;
            let (loss, report) = total_loss(&out, &sample.labels, loss_opts);
            if !report.total.is_finite() {
                return Err(AvtError::Numerical(format!(
                    "loss became non-finite at epoch {epoch} step {step}; last good checkpoint retained"
                )));
            }
            loss.backward();
            opt.step();
            loss_sum += report.total;
            writeln!(
                log,
                "{epoch},{step},{},{},{},{},{lr}",
                report.l_next, report.l_cls, report.l_feat, report.total
            )
            .map_err(|e| AvtError::io(log_path.display().to_string(), e))?;
        }
        last_mean_loss = loss_sum / prepared.train.len() as f64;

        let val_top1 = if prepared.val.is_empty() { f64::NAN } else { top1(&model, &prepared.val)? };
        last_val = val_top1;
        writeln!(epoch_log, "{epoch},{lr},{last_mean_loss},{val_top1}")
            .map_err(|e| AvtError::io(epochs_path.display().to_string(), e))?;

        let is_best = val_top1.is_finite() && val_top1 > best_val;
        if is_best {
            best_val = val_top1;
        }
        let meta = CheckpointMeta {
            run: cfg.clone(),
            input_dim,
            num_classes: k,
            vocab_hash: dataset.vocab.hash(),
            epoch: epoch + 1,
            best_val_top1: if best_val.is_finite() { best_val } else { 0.0 },
        };
        let extra: Vec<(String, Vec<f32>)> = opt.velocity_snapshot();
        let tensors = checkpoint::snapshot_model(&model, &extra);
        checkpoint::save_checkpoint(&out_dir.join("ckpt_last.avtc"), &meta, &tensors)?;
        if is_best || (epoch == start_epoch && !out_dir.join("ckpt_best.avtc").exists()) {
            checkpoint::save_checkpoint(&out_dir.join("ckpt_best.avtc"), &meta, &tensors)?;
        }
    }

    Ok(TrainResult {
        epochs_run: cfg.epochs - start_epoch,
        best_val_top1: if best_val.is_finite() { best_val } else { f64::NAN },
        final_val_top1: last_val,
        final_train_loss: last_mean_loss,
        skipped_samples: prepared.skipped.len(),
    })
}

fn open_log(path: &Path, append: bool, header: &str) -> Result<fs::File> {
    let mut opts = fs::OpenOptions::new();
    if append && path.exists() {
        opts.append(true);
    } else {
        opts.write(true).create(true).truncate(true);
    }
    let mut f = opts.open(path).map_err(|e| AvtError::io(path.display().to_string(), e))?;
    if !append || f.metadata().map(|m| m.len() == 0).unwrap_or(true) {
        f.write_all(header.as_bytes())
            .map_err(|e| AvtError::io(path.display().to_string(), e))?;
    }
    Ok(f)
}
