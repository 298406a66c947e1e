//! Synthetic action-schema data: a higher-order Markov chain over action
//! classes with per-action durations and class-conditioned emissions (feature
//! vectors or tiny frames), plus anticipation clip sampling with label
//! alignment and the on-disk dataset layout.

pub mod features;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Frame;
use crate::error::{AvtError, Result};
use crate::objectives::{LabelTrack, IGNORE_LABEL};
use crate::tensor::{Scalar, Tensor};

// rng streams within a dataset seed
const STREAM_EMISSION: u64 = 1_000_000;

/// FNV-1a over a byte string; used to fingerprint vocabularies.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const VERB_WORDS: [&str; 8] = ["wash", "cut", "open", "close", "take", "put", "pour", "mix"];
const NOUN_WORDS: [&str; 8] = ["cup", "pan", "lid", "board", "bowl", "jar", "tray", "pot"];

/// Bijection between action ids and (verb, noun) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(usize, usize, String)>,
    n_verbs: usize,
    n_nouns: usize,
}

impl Vocabulary {
    /// Factored vocabulary covering `k` actions exactly: nouns take the
    /// largest divisor of k not above √k, so k = 8 gives 4 verbs × 2 nouns
    /// and k = 4 gives 2 × 2.
    pub fn factored(k: usize) -> Self {
        assert!(k >= 1);
        let mut n_nouns = 1;
        for d in 1..=k {
            if d * d <= k && k % d == 0 {
                n_nouns = d;
            }
        }
        let n_verbs = k / n_nouns;
        let entries = (0..k)
            .map(|a| {
                let v = a / n_nouns;
                let n = a % n_nouns;
                let name = format!(
                    "{}_{}",
                    VERB_WORDS[v % VERB_WORDS.len()],
                    NOUN_WORDS[n % NOUN_WORDS.len()]
                );
                (v, n, name)
            })
            .collect();
        Vocabulary { entries, n_verbs, n_nouns }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_nouns(&self) -> usize {
        self.n_nouns
    }

    pub fn verb_of(&self, action: usize) -> usize {
        self.entries[action].0
    }

    pub fn noun_of(&self, action: usize) -> usize {
        self.entries[action].1
    }

    pub fn name_of(&self, action: usize) -> &str {
        &self.entries[action].2
    }

    /// Stable fingerprint over the full id ↔ (verb, noun, name) table.
    pub fn hash(&self) -> u64 {
        let mut buf = String::new();
        for (a, (v, n, name)) in self.entries.iter().enumerate() {
            buf.push_str(&format!("{a},{v},{n},{name}\n"));
        }
        fnv1a(buf.as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("action_id,verb_id,noun_id,name\n");
        for (a, (v, n, name)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{a},{v},{n},{name}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(AvtError::Vocab(format!("vocab line {} malformed: {line}", lineno + 1)));
            }
            let a: usize = parts[0]
                .parse()
                .map_err(|_| AvtError::Vocab(format!("bad action id on line {}", lineno + 1)))?;
            if a != entries.len() {
                return Err(AvtError::Vocab(format!("non-contiguous action id {a}")));
            }
            let v: usize = parts[1]
                .parse()
                .map_err(|_| AvtError::Vocab(format!("bad verb id on line {}", lineno + 1)))?;
            let n: usize = parts[2]
                .parse()
                .map_err(|_| AvtError::Vocab(format!("bad noun id on line {}", lineno + 1)))?;
            entries.push((v, n, parts[3].to_string()));
        }
        if entries.is_empty() {
            return Err(AvtError::Vocab("empty vocabulary".to_string()));
        }
        let n_verbs = entries.iter().map(|e| e.0).max().unwrap() + 1;
        let n_nouns = entries.iter().map(|e| e.1).max().unwrap() + 1;
        Ok(Vocabulary { entries, n_verbs, n_nouns })
    }
}

/// Generator parameters: an order-m Markov chain over `k` actions with
/// geometric durations and Gaussian class-conditioned emissions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchemaSpec {
    pub k: usize,
    pub order: usize,
    /// Row-stochastic table, `k^order` context rows × `k` next-action columns.
    /// Context index for history (a₁ … a_m), most recent last, is
    /// Σ aᵢ · k^(m−i).
    pub transitions: Vec<f64>,
    pub duration_p: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl SchemaSpec {
    /// Desk default: order-2 chain whose next action is the mod-k sum of the
    /// previous two with probability 1−ε, else uniform. The pair context is
    /// informative while any single action alone says nothing about the next,
    /// so memoryless predictors are pinned at chance.
    pub fn desk(k: usize, epsilon: f64, seed: u64) -> Self {
        let contexts = k * k;
        let mut transitions = vec![0.0; contexts * k];
        for a in 0..k {
            for b in 0..k {
                let row = (a * k + b) * k;
                let target = (a + b) % k;
                for c in 0..k {
                    transitions[row + c] = epsilon / k as f64;
                }
                transitions[row + target] += 1.0 - epsilon;
            }
        }
        SchemaSpec {
            k,
            order: 2,
            transitions,
            duration_p: 0.5,
            duration_min: 1,
            duration_max: 4,
            feature_dim: 16,
            sigma: 0.3,
            seed,
        }
    }

    pub fn contexts(&self) -> usize {
        self.k.pow(self.order as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(AvtError::Config("schema k must be at least 2".to_string()));
        }
        if self.order < 1 {
            return Err(AvtError::Config("schema order must be at least 1".to_string()));
        }
        if self.transitions.len() != self.contexts() * self.k {
            return Err(AvtError::Config(format!(
                "transition table has {} entries, expected {}",
                self.transitions.len(),
                self.contexts() * self.k
            )));
        }
        for row in 0..self.contexts() {
            let s: f64 = self.transitions[row * self.k..(row + 1) * self.k].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(AvtError::Config(format!("transition row {row} sums to {s}, not 1")));
            }
        }
        if self.duration_min < 1 || self.duration_max < self.duration_min {
            return Err(AvtError::Config("invalid duration bounds".to_string()));
        }
        if !(0.0..=1.0).contains(&self.duration_p) || self.duration_p <= 0.0 {
            return Err(AvtError::Config("duration_p must be in (0, 1]".to_string()));
        }
        Ok(())
    }

    fn next_action<R: Rng>(&self, ctx: usize, rng: &mut R) -> usize {
        let row = &self.transitions[ctx * self.k..(ctx + 1) * self.k];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        self.k - 1
    }

    fn sample_duration<R: Rng>(&self, rng: &mut R) -> usize {
        let mut d = 1;
        while rng.gen::<f64>() >= self.duration_p {
            d += 1;
            if d >= self.duration_max {
                break;
            }
        }
        d.clamp(self.duration_min, self.duration_max)
    }

    /// Draws a raw action chain (segment-level, no durations). The first
    /// `order` actions are uniform.
    pub fn sample_chain<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut chain = Vec::with_capacity(len);
        for _ in 0..self.order.min(len) {
            chain.push(rng.gen_range(0..self.k));
        }
        while chain.len() < len {
            let ctx = self.context_index(&chain[chain.len() - self.order..]);
            chain.push(self.next_action(ctx, rng));
        }
        chain
    }

    pub fn context_index(&self, history: &[usize]) -> usize {
        assert_eq!(history.len(), self.order);
        history.iter().fold(0, |acc, &a| acc * self.k + a)
    }

    /// Stationary distribution over contexts by power iteration.
    fn stationary(&self) -> Vec<f64> {
        let nc = self.contexts();
        let mut pi = vec![1.0 / nc as f64; nc];
        let mut next = vec![0.0; nc];
        for _ in 0..20_000 {
            for v in next.iter_mut() {
                *v = 0.0;
            }
            for ctx in 0..nc {
                let w = pi[ctx];
                if w == 0.0 {
                    continue;
                }
                let succ_base = (ctx % self.k.pow(self.order as u32 - 1)) * self.k;
                for c in 0..self.k {
                    next[succ_base + c] += w * self.transitions[ctx * self.k + c];
                }
            }
            let mut delta = 0.0;
            for (a, b) in pi.iter().zip(&next) {
                delta += (a - b).abs();
            }
            pi.copy_from_slice(&next);
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Best achievable next-action accuracy for a predictor that sees the
    /// full order-m context.
    pub fn full_order_bayes_rate(&self) -> f64 {
        let pi = self.stationary();
        let mut acc = 0.0;
        for ctx in 0..self.contexts() {
            let row = &self.transitions[ctx * self.k..(ctx + 1) * self.k];
            acc += pi[ctx] * row.iter().cloned().fold(0.0, f64::max);
        }
        acc
    }

    /// Best achievable next-action accuracy for a memoryless predictor that
    /// sees only the single most recent action.
    pub fn order1_bayes_rate(&self) -> f64 {
        let pi = self.stationary();
        // joint[b][c] = P(last action = b, next action = c)
        let mut joint = vec![0.0; self.k * self.k];
        for ctx in 0..self.contexts() {
            let last = ctx % self.k;
            for c in 0..self.k {
                joint[last * self.k + c] += pi[ctx] * self.transitions[ctx * self.k + c];
            }
        }
        let mut acc = 0.0;
        for b in 0..self.k {
            acc += joint[b * self.k..(b + 1) * self.k].iter().cloned().fold(0.0, f64::max);
        }
        acc
    }
}

/// What each timestep of a video holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    Features { dim: usize },
    Frames { height: usize, width: usize, channels: usize },
}

impl DataKind {
    pub fn step_dim(&self) -> usize {
        match *self {
            DataKind::Features { dim } => dim,
            DataKind::Frames { height, width, channels } => height * width * channels,
        }
    }
}

/// Per-step payload of one video, step-major, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTimeline {
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl VideoTimeline {
    /// Payload for 1-based step time `t`.
    pub fn step(&self, t: usize) -> &[f32] {
        assert!(t >= 1 && t <= self.steps, "step {t} out of 1..={}", self.steps);
        &self.data[(t - 1) * self.dim..t * self.dim]
    }
}

/// A labeled action interval: active at 1-based step times
/// `start ≤ t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSegment {
    pub video: usize,
    pub start: usize,
    pub end: usize,
    pub action: usize,
}

/// Clip sampling geometry, in integer step units where one step equals the
/// anticipation gap.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClipSpec {
    pub tau_o: usize,
    pub tau_a: usize,
    pub stride: usize,
}

impl ClipSpec {
    pub fn new(tau_o: usize, tau_a: usize, stride: Option<usize>) -> Self {
        ClipSpec { tau_o, tau_a, stride: stride.unwrap_or(tau_a) }
    }
}

/// Why a segment yields no training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    /// The anticipation gap reaches back past the start of the video.
    InsufficientLead { segment_start: usize, tau_a: usize },
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::InsufficientLead { segment_start, tau_a } => write!(
                f,
                "segment starts at step {segment_start} but the anticipation gap is {tau_a}; no observable frame precedes it"
            ),
        }
    }
}

/// One observed clip plus aligned labels.
#[derive(Debug, Clone)]
pub struct AnticipationSample<F: Scalar> {
    pub sample_id: String,
    pub input: SampleData<F>,
    pub labels: LabelTrack,
    /// Requested 1-based step times, one per position; padded positions
    /// repeat the earliest valid time.
    pub times: Vec<i64>,
    /// Count of left-padded positions.
    pub padded: usize,
}

#[derive(Debug, Clone)]
pub enum SampleData<F: Scalar> {
    Features(Tensor<F>),
    Frames(Vec<Frame<F>>),
}

/// A generated or loaded dataset with its vocabulary and segment index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub kind: DataKind,
    pub videos: Vec<VideoTimeline>,
    pub segments: Vec<ActionSegment>,
    pub spec: Option<SchemaSpec>,
    /// 1-based step → action id (or −1), one vec per video.
    step_labels: Vec<Vec<i64>>,
}

fn build_step_labels(videos: &[VideoTimeline], segments: &[ActionSegment]) -> Vec<Vec<i64>> {
    let mut labels: Vec<Vec<i64>> = videos.iter().map(|v| vec![IGNORE_LABEL; v.steps]).collect();
    for seg in segments {
        let row = &mut labels[seg.video];
        for t in seg.start..seg.end.min(row.len() + 1) {
            row[t - 1] = seg.action as i64;
        }
    }
    labels
}

/// Deterministically renders `n_videos` videos of `video_len` steps each from
/// the schema, together with the segment index and vocabulary.
pub fn generate_schema_dataset(
    spec: &SchemaSpec,
    n_videos: usize,
    video_len: usize,
    kind: DataKind,
) -> Result<Dataset> {
    spec.validate()?;
    if kind.step_dim() == 0 {
        return Err(AvtError::Config("emission dimension must be positive".to_string()));
    }
    if let DataKind::Features { dim } = kind {
        if dim != spec.feature_dim {
            return Err(AvtError::Config(format!(
                "feature dim {dim} disagrees with schema feature_dim {}",
                spec.feature_dim
            )));
        }
    }
    let vocab = Vocabulary::factored(spec.k);
    let dim = kind.step_dim();

    // Class emissions are drawn once, on their own stream, so every video
    // sees the same class-conditioned means/patterns.
    let mut emission_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    emission_rng.set_stream(STREAM_EMISSION);
    let class_means: Vec<Vec<f32>> = (0..spec.k)
        .map(|_| {
            (0..dim)
                .map(|_| match kind {
                    DataKind::Features { .. } => {
                        let z: f64 = emission_rng.sample(rand_distr::StandardNormal);
                        z as f32
                    }
                    DataKind::Frames { .. } => {
                        if emission_rng.gen::<bool>() {
                            0.75
                        } else {
                            0.25
                        }
                    }
                })
                .collect()
        })
        .collect();

    let mut videos = Vec::with_capacity(n_videos);
    let mut segments = Vec::new();
    for vid in 0..n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(vid as u64);

        // action chain with durations until the timeline is covered
        let mut chain: Vec<usize> = Vec::new();
        let mut covered = 0usize;
        let mut start = 1usize;
        while covered < video_len {
            let action = if chain.len() < spec.order {
                rng.gen_range(0..spec.k)
            } else {
                let ctx = spec.context_index(&chain[chain.len() - spec.order..]);
                spec.next_action(ctx, &mut rng)
            };
            chain.push(action);
            let dur = spec.sample_duration(&mut rng);
            let end = (start + dur).min(video_len + 1);
            segments.push(ActionSegment { video: vid, start, end, action });
            covered += end - start;
            start = end;
        }

        let mut data = Vec::with_capacity(video_len * dim);
        {
            let video_segments = segments.iter().filter(|s| s.video == vid);
            let mut per_step = vec![0usize; video_len];
            for seg in video_segments {
                for t in seg.start..seg.end {
                    per_step[t - 1] = seg.action;
                }
            }
            for &action in &per_step {
                let mean = &class_means[action];
                for &m in mean.iter() {
                    let noisy = if spec.sigma > 0.0 {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        f64::from(m) + spec.sigma * z
                    } else {
                        f64::from(m)
                    };
                    let v = match kind {
                        DataKind::Features { .. } => noisy,
                        DataKind::Frames { .. } => noisy.clamp(0.0, 1.0),
                    };
                    data.push(v as f32);
                }
            }
        }
        videos.push(VideoTimeline { steps: video_len, dim, data });
    }

    let step_labels = build_step_labels(&videos, &segments);
    Ok(Dataset { vocab, kind, videos, segments, spec: Some(spec.clone()), step_labels })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn label_at(&self, video: usize, t: usize) -> i64 {
        let row = &self.step_labels[video];
        if t >= 1 && t <= row.len() {
            row[t - 1]
        } else {
            IGNORE_LABEL
        }
    }

    pub fn sample_id(&self, seg_idx: usize) -> String {
        let seg = &self.segments[seg_idx];
        format!("v{:04}s{:05}", seg.video, seg_idx)
    }

    /// Observed clip for one segment: frames at times
    /// `τ_s − τ_a − τ_o + stride, …, τ_s − τ_a` (inclusive end). Times before
    /// the start of the video are left-padded with the earliest valid frame
    /// and labeled ignore.
    pub fn sample_clip<F: Scalar>(
        &self,
        seg_idx: usize,
        clip: &ClipSpec,
    ) -> std::result::Result<AnticipationSample<F>, SkipReason> {
        let seg = &self.segments[seg_idx];
        if clip.tau_a >= seg.start {
            return Err(SkipReason::InsufficientLead { segment_start: seg.start, tau_a: clip.tau_a });
        }
        let end_t = (seg.start - clip.tau_a) as i64;
        let lo = end_t - clip.tau_o as i64;
        let mut times: Vec<i64> = Vec::new();
        let mut t = end_t;
        while t > lo {
            times.push(t);
            t -= clip.stride as i64;
        }
        times.reverse();

        let earliest_valid = *times.iter().find(|&&t| t >= 1).expect("end time is always >= 1");
        let mut padded = 0;
        let mut frame_labels = Vec::with_capacity(times.len());
        let mut resolved = Vec::with_capacity(times.len());
        for &t in &times {
            if t < 1 {
                padded += 1;
                resolved.push(earliest_valid);
                frame_labels.push(IGNORE_LABEL);
            } else {
                resolved.push(t);
                frame_labels.push(self.label_at(seg.video, t as usize));
            }
        }

        let video = &self.videos[seg.video];
        let dim = self.kind.step_dim();
        let input = match self.kind {
            DataKind::Features { .. } => {
                let mut data = Vec::with_capacity(times.len() * dim);
                for &t in &resolved {
                    data.extend(video.step(t as usize).iter().map(|&v| F::from_f64(f64::from(v))));
                }
                SampleData::Features(Tensor::from_vec(vec![times.len(), dim], data))
            }
            DataKind::Frames { height, width, channels } => {
                let frames = resolved
                    .iter()
                    .map(|&t| {
                        let pixels = video
                            .step(t as usize)
                            .iter()
                            .map(|&v| F::from_f64(f64::from(v)))
                            .collect();
                        Frame::new(height, width, channels, pixels)
                    })
                    .collect();
                SampleData::Frames(frames)
            }
        };

        Ok(AnticipationSample {
            sample_id: self.sample_id(seg_idx),
            input,
            labels: LabelTrack::new(frame_labels, seg.action),
            times,
            padded,
        })
    }

    /// Segment indices split by video: the first `train_frac` of videos feed
    /// the training set, the rest validation.
    pub fn split(&self, train_frac: f64) -> (Vec<usize>, Vec<usize>) {
        let n_train_videos = ((self.videos.len() as f64) * train_frac).round() as usize;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.video < n_train_videos {
                train.push(i);
            } else {
                val.push(i);
            }
        }
        (train, val)
    }

    // ── Directory layout ─────────────────────────────────────────────────

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let videos_dir = dir.join("videos");
        fs::create_dir_all(&videos_dir).map_err(|e| AvtError::io(videos_dir.display().to_string(), e))?;
        for (i, v) in self.videos.iter().enumerate() {
            let path = videos_dir.join(format!("video_{i:04}.feat"));
            features::write_video_file(&path, v, self.vocab.hash())?;
        }

        let mut seg_csv = String::from("video_id,start,end,action_id\n");
        for s in &self.segments {
            seg_csv.push_str(&format!("{},{},{},{}\n", s.video, s.start, s.end, s.action));
        }
        write_text(&dir.join("segments.csv"), &seg_csv)?;
        write_text(&dir.join("vocab.csv"), &self.vocab.to_csv())?;

        let mut manifest = BTreeMap::new();
        match self.kind {
            DataKind::Features { dim } => {
                manifest.insert("kind".to_string(), "features".to_string());
                manifest.insert("dim".to_string(), dim.to_string());
            }
            DataKind::Frames { height, width, channels } => {
                manifest.insert("kind".to_string(), "frames".to_string());
                manifest.insert("height".to_string(), height.to_string());
                manifest.insert("width".to_string(), width.to_string());
                manifest.insert("channels".to_string(), channels.to_string());
            }
        }
        manifest.insert("n_videos".to_string(), self.videos.len().to_string());
        manifest.insert("video_len".to_string(), self.videos.first().map_or(0, |v| v.steps).to_string());
        manifest.insert("vocab_hash".to_string(), self.vocab.hash().to_string());
        if let Some(spec) = &self.spec {
            manifest.insert("k".to_string(), spec.k.to_string());
            manifest.insert("order".to_string(), spec.order.to_string());
            manifest.insert("duration_p".to_string(), spec.duration_p.to_string());
            manifest.insert("duration_min".to_string(), spec.duration_min.to_string());
            manifest.insert("duration_max".to_string(), spec.duration_max.to_string());
            manifest.insert("feature_dim".to_string(), spec.feature_dim.to_string());
            manifest.insert("sigma".to_string(), spec.sigma.to_string());
            manifest.insert("seed".to_string(), spec.seed.to_string());

            let mut tr = String::from("context,");
            tr.push_str(&(0..spec.k).map(|c| format!("p_{c}")).collect::<Vec<_>>().join(","));
            tr.push('\n');
            for ctx in 0..spec.contexts() {
                tr.push_str(&ctx.to_string());
                for c in 0..spec.k {
                    tr.push_str(&format!(",{}", spec.transitions[ctx * spec.k + c]));
                }
                tr.push('\n');
            }
            write_text(&dir.join("transitions.csv"), &tr)?;
        }
        let mut text = String::new();
        for (k, v) in &manifest {
            text.push_str(&format!("{k} = {v}\n"));
        }
        write_text(&dir.join("manifest.cfg"), &text)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let manifest_text = read_text(&dir.join("manifest.cfg"))?;
        let manifest = crate::config::parse_kv(&manifest_text)?;
        let get = |key: &str| -> Result<&String> {
            manifest
                .get(key)
                .ok_or_else(|| AvtError::Config(format!("manifest missing field `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| AvtError::Config(format!("manifest field `{key}` is not an integer")))
        };
        let kind = match get("kind")?.as_str() {
            "features" => DataKind::Features { dim: parse_usize("dim")? },
            "frames" => DataKind::Frames {
                height: parse_usize("height")?,
                width: parse_usize("width")?,
                channels: parse_usize("channels")?,
            },
            other => return Err(AvtError::Config(format!("unknown dataset kind `{other}`"))),
        };
        let n_videos = parse_usize("n_videos")?;

        let vocab = Vocabulary::from_csv(&read_text(&dir.join("vocab.csv"))?)?;
        let expected_hash = vocab.hash();

        let mut videos = Vec::with_capacity(n_videos);
        for i in 0..n_videos {
            let path = dir.join("videos").join(format!("video_{i:04}.feat"));
            let (timeline, hash) = features::read_video_file(&path)?;
            if hash != expected_hash {
                return Err(AvtError::Vocab(format!(
                    "video file {} was written against a different vocabulary",
                    path.display()
                )));
            }
            if timeline.dim != kind.step_dim() {
                return Err(AvtError::Config(format!(
                    "video {i} has dim {} but manifest implies {}",
                    timeline.dim,
                    kind.step_dim()
                )));
            }
            videos.push(timeline);
        }

        let mut segments = Vec::new();
        let seg_text = read_text(&dir.join("segments.csv"))?;
        for (lineno, line) in seg_text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(AvtError::Config(format!("segments.csv line {} malformed", lineno + 1)));
            }
            let nums: Vec<usize> = parts
                .iter()
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| AvtError::Config(format!("segments.csv line {} not numeric", lineno + 1)))?;
            let seg = ActionSegment { video: nums[0], start: nums[1], end: nums[2], action: nums[3] };
            if seg.video >= videos.len() || seg.start < 1 || seg.end <= seg.start || seg.action >= vocab.len() {
                return Err(AvtError::Config(format!(
                    "segments.csv line {} is out of range: {seg:?}",
                    lineno + 1
                )));
            }
            segments.push(seg);
        }

        let spec = if dir.join("transitions.csv").exists() {
            let k = parse_usize("k")?;
            let order = parse_usize("order")?;
            let tr_text = read_text(&dir.join("transitions.csv"))?;
            let mut transitions = vec![0.0; k.pow(order as u32) * k];
            for (lineno, line) in tr_text.lines().enumerate() {
                if lineno == 0 || line.trim().is_empty() {
                    continue;
                }
                let parts: Vec<&str> = line.split(',').collect();
                let ctx: usize = parts[0]
                    .parse()
                    .map_err(|_| AvtError::Config("transitions.csv: bad context index".to_string()))?;
                for c in 0..k {
                    transitions[ctx * k + c] = parts[c + 1]
                        .parse()
                        .map_err(|_| AvtError::Config("transitions.csv: bad probability".to_string()))?;
                }
            }
            Some(SchemaSpec {
                k,
                order,
                transitions,
                duration_p: get("duration_p")?
                    .parse()
                    .map_err(|_| AvtError::Config("bad duration_p".to_string()))?,
                duration_min: parse_usize("duration_min")?,
                duration_max: parse_usize("duration_max")?,
                feature_dim: parse_usize("feature_dim")?,
                sigma: get("sigma")?
                    .parse()
                    .map_err(|_| AvtError::Config("bad sigma".to_string()))?,
                seed: get("seed")?
                    .parse()
                    .map_err(|_| AvtError::Config("bad seed".to_string()))?,
            })
        } else {
            None
        };

        let step_labels = build_step_labels(&videos, &segments);
        Ok(Dataset { vocab, kind, videos, segments, spec, step_labels })
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| AvtError::io(path.display().to_string(), e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AvtError::io(path.display().to_string(), e))
}
