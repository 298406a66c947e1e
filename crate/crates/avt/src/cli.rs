//! Command-line entry points: dataset generation, training, evaluation,
//! prediction fusion, autoregressive rollout, and attention export.
//!
//! Config is resolved as defaults ← config file ← `--set key=value` ←
//! dedicated flags, and a snapshot of the resolved config is written beside
//! every output. Exit codes: 0 success, 2 validation, 3 runtime (I/O or
//! format), 4 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::Frame;
use crate::checkpoint;
use crate::config::{parse_kv, RunConfig};
use crate::data::{generate_schema_dataset, read_text, write_text, Dataset};
use crate::error::{AvtError, ErrorClass, Result};
use crate::eval::{
    attention::{attention_rollout, class_row_patch_grid, final_query_attention, write_matrix_csv, write_pgm},
    build_report, late_fuse, read_predictions_csv, rollout::rollout, write_predictions_csv,
};
use crate::train::{predict_records, prepare, PreparedData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "AVT_OUT";

#[derive(Parser)]
#[command(name = "avt", version, about = "Anticipative action modeling on synthetic action-schema data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key-value config file; flags win over file entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, repeatable: --set lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// naive | anticipative
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tau_o: Option<usize>,
    /// fixed | avt-tiny | avt-b
    #[arg(long)]
    pub backbone: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let kv = parse_kv(&read_text(path)?)?;
            cfg.apply_kv(&kv)?;
        }
        let mut overrides = BTreeMap::new();
        for entry in &self.set {
            let Some(eq) = entry.find('=') else {
                return Err(AvtError::Config(format!("--set expects KEY=VALUE, got `{entry}`")));
            };
            overrides.insert(entry[..eq].trim().to_string(), entry[eq + 1..].trim().to_string());
        }
        cfg.apply_kv(&overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.clone();
        }
        if let Some(tau_o) = self.tau_o {
            cfg.tau_o = tau_o;
        }
        if let Some(backbone) = &self.backbone {
            cfg.backbone = backbone.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic action-schema dataset directory.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or an existing prediction file) on a dataset.
    Eval {
        #[arg(long, conflicts_with = "preds")]
        ckpt: Option<PathBuf>,
        /// Score a prediction CSV instead of running a model.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// train | val | all
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Late-fuse prediction files by weighted probability averaging.
    Fuse {
        /// Two or more prediction CSV files.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Comma-separated weights, defaults to equal.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset dir for metric reporting on the fused predictions.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Roll a checkpoint out autoregressively from one sample.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id as printed by eval, e.g. v0003s00042.
        #[arg(long)]
        sample: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export temporal (and, with an encoder backbone, spatial) attention.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Require spatial heatmaps (errors in fixed-feature mode).
        #[arg(long)]
        spatial: bool,
    },
}

fn out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "out".to_string());
        Path::new(&root).join(command)
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AvtError::io(dir.display().to_string(), e))
}

fn find_sample(dataset: &Dataset, sample_id: &str) -> Result<usize> {
    (0..dataset.segments.len())
        .find(|&i| dataset.sample_id(i) == sample_id)
        .ok_or_else(|| AvtError::Config(format!("sample `{sample_id}` not found in dataset")))
}

fn check_vocab(meta: &checkpoint::CheckpointMeta, dataset: &Dataset) -> Result<()> {
    if meta.vocab_hash != dataset.vocab.hash() {
        return Err(AvtError::Vocab(format!(
            "checkpoint vocabulary hash {} does not match dataset hash {}",
            meta.vocab_hash,
            dataset.vocab.hash()
        )));
    }
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { cfg, out, force } => cmd_gen(&cfg.resolve()?, out_dir(out, "gen"), force),
        Command::Train { data, cfg, out, resume } => {
            cmd_train(&data, &cfg.resolve()?, out_dir(out, "train"), resume.as_deref())
        }
        Command::Eval { ckpt, preds, data, out, split } => {
            cmd_eval(ckpt.as_deref(), preds.as_deref(), &data, out_dir(out, "eval"), &split)
        }
        Command::Fuse { inputs, weights, out, data } => {
            cmd_fuse(&inputs, weights.as_deref(), out_dir(out, "fuse"), data.as_deref())
        }
        Command::Rollout { ckpt, data, sample, steps, out } => {
            cmd_rollout(&ckpt, &data, &sample, steps, out_dir(out, "rollout"))
        }
        Command::Attn { ckpt, data, sample, out, spatial } => {
            cmd_attn(&ckpt, &data, &sample, out_dir(out, "attn"), spatial)
        }
    }
}

pub fn cmd_gen(cfg: &RunConfig, out: PathBuf, force: bool) -> Result<()> {
    cfg.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(&out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return Err(AvtError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    ensure_dir(&out)?;
    let spec = cfg.schema_spec();
    let dataset = generate_schema_dataset(&spec, cfg.n_videos, cfg.video_len, cfg.data_kind()?)?;
    dataset.write_dir(&out)?;
    write_text(&out.join("config_snapshot.cfg"), &cfg.to_kv_string())?;
    println!(
        "generated {} videos, {} segments, k={} at {}",
        dataset.videos.len(),
        dataset.segments.len(),
        dataset.num_classes(),
        out.display()
    );
    println!(
        "schema bayes rates: full-order {:.4}, memoryless {:.4}",
        spec.full_order_bayes_rate(),
        spec.order1_bayes_rate()
    );
    Ok(())
}

/// Aligns data-derived config fields with the dataset manifest; the dataset
/// on disk wins for anything it defines.
fn align_config_with_dataset(cfg: &mut RunConfig, dataset: &Dataset) {
    match dataset.kind {
        crate::data::DataKind::Features { dim } => {
            cfg.data_kind = "features".to_string();
            cfg.feature_dim = dim;
        }
        crate::data::DataKind::Frames { .. } => {
            cfg.data_kind = "frames".to_string();
        }
    }
    cfg.k = dataset.num_classes();
    if let Some(spec) = &dataset.spec {
        cfg.order = spec.order;
        cfg.sigma = spec.sigma;
        cfg.duration_p = spec.duration_p;
        cfg.duration_min = spec.duration_min;
        cfg.duration_max = spec.duration_max;
    }
}

pub fn cmd_train(data: &Path, cfg: &RunConfig, out: PathBuf, resume: Option<&Path>) -> Result<()> {
    let dataset = Dataset::load_dir(data)?;
    let mut cfg = cfg.clone();
    align_config_with_dataset(&mut cfg, &dataset);
    cfg.validate()?;
    ensure_dir(&out)?;

    let result = crate::train::train(&cfg, &dataset, &out, resume)?;
    println!(
        "trained {} epochs; best val top-1 {:.4}, final val top-1 {:.4}, final train loss {:.4}",
        result.epochs_run, result.best_val_top1, result.final_val_top1, result.final_train_loss
    );
    if result.skipped_samples > 0 {
        println!("skipped {} segments (see skipped_segments.csv)", result.skipped_samples);
    }

    // final validation metric summary with the last checkpoint
    let (meta, model, _) = checkpoint::load_model::<f32>(&out.join("ckpt_last.avtc"))?;
    let prepared: PreparedData<f32> = prepare(&dataset, &meta.run.clip_spec(), meta.run.train_frac);
    if !prepared.val.is_empty() {
        let records = predict_records(&model, &prepared.val)?;
        let report = build_report(&records, &dataset.vocab)?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn split_samples<'a>(
    prepared: &'a PreparedData<f32>,
    split: &str,
) -> Result<Vec<&'a crate::data::AnticipationSample<f32>>> {
    let picked: Vec<&crate::data::AnticipationSample<f32>> = match split {
        "train" => prepared.train.iter().collect(),
        "val" => prepared.val.iter().collect(),
        "all" => prepared.train.iter().chain(prepared.val.iter()).collect(),
        other => {
            return Err(AvtError::Config(format!(
                "split `{other}` is not one of train|val|all"
            )))
        }
    };
    if picked.is_empty() {
        return Err(AvtError::Eval(format!("split `{split}` holds no samples")));
    }
    Ok(picked)
}

pub fn cmd_eval(
    ckpt: Option<&Path>,
    preds: Option<&Path>,
    data: &Path,
    out: PathBuf,
    split: &str,
) -> Result<()> {
    let dataset = Dataset::load_dir(data)?;
    ensure_dir(&out)?;

    let records = match (ckpt, preds) {
        (Some(ckpt_path), None) => {
            let (meta, model, _) = checkpoint::load_model::<f32>(ckpt_path)?;
            check_vocab(&meta, &dataset)?;
            write_text(&out.join("config_snapshot.cfg"), &meta.run.to_kv_string())?;
            let prepared: PreparedData<f32> = prepare(&dataset, &meta.run.clip_spec(), meta.run.train_frac);
            let picked = split_samples(&prepared, split)?;
            let owned: Vec<crate::data::AnticipationSample<f32>> = picked.into_iter().cloned().collect();
            let records = predict_records(&model, &owned)?;
            write_predictions_csv(&out.join("predictions.csv"), &records)?;
            records
        }
        (None, Some(preds_path)) => {
            let records = read_predictions_csv(preds_path)?;
            for r in &records {
                if r.probs.len() != dataset.num_classes() {
                    return Err(AvtError::Vocab(format!(
                        "prediction file has {} classes, dataset vocabulary has {}",
                        r.probs.len(),
                        dataset.num_classes()
                    )));
                }
            }
            records
        }
        _ => {
            return Err(AvtError::Config(
                "eval needs exactly one of --ckpt or --preds".to_string(),
            ))
        }
    };

    let report = build_report(&records, &dataset.vocab)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("report.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_fuse(inputs: &[PathBuf], weights: Option<&str>, out: PathBuf, data: Option<&Path>) -> Result<()> {
    let sets: Vec<Vec<crate::eval::PredictionRecord>> = inputs
        .iter()
        .map(|p| read_predictions_csv(p))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = match weights {
        Some(spec) => spec
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| AvtError::Config(format!("bad fusion weight `{w}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![1.0; sets.len()],
    };
    let fused = late_fuse(&sets, &weights)?;
    ensure_dir(&out)?;
    let mut snapshot = String::new();
    for (i, (path, w)) in inputs.iter().zip(&weights).enumerate() {
        snapshot.push_str(&format!("input_{i} = {}\nweight_{i} = {w}\n", path.display()));
    }
    write_text(&out.join("config_snapshot.cfg"), &snapshot)?;
    write_predictions_csv(&out.join("fused.csv"), &fused)?;
    println!("fused {} prediction sets over {} samples", sets.len(), fused.len());
    if let Some(data) = data {
        let dataset = Dataset::load_dir(data)?;
        let report = build_report(&fused, &dataset.vocab)?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
        write_text(&out.join("report.txt"), &report.to_table())?;
        print!("{}", report.to_table());
    }
    Ok(())
}

pub fn cmd_rollout(ckpt: &Path, data: &Path, sample_id: &str, steps: usize, out: PathBuf) -> Result<()> {
    let dataset = Dataset::load_dir(data)?;
    let (meta, model, _) = checkpoint::load_model::<f32>(ckpt)?;
    check_vocab(&meta, &dataset)?;
    let seg_idx = find_sample(&dataset, sample_id)?;
    let sample = dataset
        .sample_clip::<f32>(seg_idx, &meta.run.clip_spec())
        .map_err(|r| AvtError::Config(format!("sample `{sample_id}` unusable: {r}")))?;

    let trace = rollout(&model, &sample.input.as_input(), steps)?;
    ensure_dir(&out)?;
    write_text(&out.join("config_snapshot.cfg"), &meta.run.to_kv_string())?;

    let mut csv = String::from("step,action,name,prob\n");
    for s in &trace.steps {
        csv.push_str(&format!("{},{},{},{}\n", s.step, s.action, dataset.vocab.name_of(s.action), s.prob));
    }
    write_text(&out.join("rollout.csv"), &csv)?;

    println!("rollout for {sample_id} (true next action: {}):", dataset.vocab.name_of(sample.labels.next_action));
    for s in &trace.steps {
        println!("  step {:>2}: {} (p={:.3})", s.step, dataset.vocab.name_of(s.action), s.prob);
    }
    let compressed: Vec<String> = trace
        .run_length()
        .iter()
        .map(|(a, n)| format!("{}: {}", dataset.vocab.name_of(*a), n))
        .collect();
    println!("  compressed: {}", compressed.join(", "));
    Ok(())
}

pub fn cmd_attn(ckpt: &Path, data: &Path, sample_id: &str, out: PathBuf, spatial: bool) -> Result<()> {
    let dataset = Dataset::load_dir(data)?;
    let (meta, model, _) = checkpoint::load_model::<f32>(ckpt)?;
    check_vocab(&meta, &dataset)?;
    if spatial && model.backbone.is_none() {
        return Err(AvtError::Config(
            "spatial attention requires the encoder backbone; this checkpoint runs on fixed features".to_string(),
        ));
    }
    let seg_idx = find_sample(&dataset, sample_id)?;
    let sample = dataset
        .sample_clip::<f32>(seg_idx, &meta.run.clip_spec())
        .map_err(|r| AvtError::Config(format!("sample `{sample_id}` unusable: {r}")))?;
    ensure_dir(&out)?;
    write_text(&out.join("config_snapshot.cfg"), &meta.run.to_kv_string())?;

    // temporal attention: last decoder layer, head-averaged, final query row
    let (_, head_trace) = crate::tensor::no_grad(|| model.forward_traced(&sample.input.as_input()))?;
    let last = head_trace.attention.last().expect("decoder has at least one layer");
    let t = sample.labels.len();
    let row = final_query_attention(last, t);
    write_matrix_csv(&out.join("temporal_attention.csv"), 1, t, &row)?;
    println!("temporal attention over {t} observed frames written");

    // spatial attention per frame through the encoder, when present
    if let Some(backbone) = &model.backbone {
        if let crate::data::SampleData::Frames(frames) = &sample.input {
            let grid = backbone.cfg.patches_per_side();
            for (i, frame) in frames.iter().enumerate() {
                let frame: &Frame<f32> = frame;
                let (_, trace) = crate::tensor::no_grad(|| backbone.encode_frame_traced(frame));
                let rolled = attention_rollout(&trace.attention)?;
                let heat = class_row_patch_grid(&rolled, grid)?;
                write_matrix_csv(&out.join(format!("spatial_attn_frame{i:02}.csv")), grid, grid, &heat)?;
                write_pgm(&out.join(format!("spatial_attn_frame{i:02}.pgm")), grid, grid, &heat)?;
            }
            println!("spatial heatmaps for {} frames written ({grid}x{grid} patch grid)", frames.len());
        }
    }
    Ok(())
}

/// Top-level driver mapping errors to exit codes.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => EXIT_VALIDATION,
                ErrorClass::Runtime => EXIT_RUNTIME,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            }
        }
    }
}
