//! Binary feature container. One format serves both per-video timelines and
//! presampled labeled clips (the fixed-feature path for offline extractors).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVTF"
//! 4       2     version (u16) = 1
//! 6       1     dtype (u8): 0 = f32
//! 7       1     flags (u8): bit 0 = per-sample labels present
//! 8       4     n_samples (u32)
//! 12      4     seq_len (u32)
//! 16      4     dim (u32)
//! 20      8     vocab_hash (u64)
//! 28      -     per sample: seq_len·dim f32 payload,
//!               then if labels: (seq_len + 1) i32 (frame labels c_1..c_T,
//!               then the future action c_{T+1})
//! ```

use std::fs;
use std::path::Path;

use super::VideoTimeline;
use crate::error::{AvtError, Result};

const MAGIC: &[u8; 4] = b"AVTF";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const FLAG_LABELS: u8 = 1;
const HEADER_LEN: u64 = 28;

/// A labeled clip in file form: `seq_len × dim` features plus the label
/// track and future action.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub features: Vec<f32>,
    pub frame_labels: Vec<i64>,
    pub next_action: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AvtError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

struct Header {
    has_labels: bool,
    n_samples: usize,
    seq_len: usize,
    dim: usize,
    vocab_hash: u64,
}

fn write_header(out: &mut Vec<u8>, has_labels: bool, n_samples: usize, seq_len: usize, dim: usize, vocab_hash: u64) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(if has_labels { FLAG_LABELS } else { 0 });
    out.extend_from_slice(&(n_samples as u32).to_le_bytes());
    out.extend_from_slice(&(seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&vocab_hash.to_le_bytes());
}

fn read_header(cur: &mut Cursor<'_>) -> Result<Header> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(AvtError::Format { offset: 0, msg: format!("bad magic {magic:?}, expected {MAGIC:?}") });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(AvtError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(AvtError::Format { offset: 6, msg: format!("unsupported dtype tag {dtype}") });
    }
    let flags = cur.take(1, "flags")?[0];
    let n_samples = cur.u32("n_samples")? as usize;
    let seq_len = cur.u32("seq_len")? as usize;
    let dim = cur.u32("dim")? as usize;
    let vocab_hash = cur.u64("vocab_hash")?;
    Ok(Header { has_labels: flags & FLAG_LABELS != 0, n_samples, seq_len, dim, vocab_hash })
}

fn check_payload_len(header: &Header, total_len: usize) -> Result<()> {
    let per_sample = header.seq_len * header.dim * 4 + if header.has_labels { (header.seq_len + 1) * 4 } else { 0 };
    let expected = HEADER_LEN as usize + header.n_samples * per_sample;
    if total_len != expected {
        return Err(AvtError::Format {
            offset: total_len.min(expected) as u64,
            msg: format!(
                "payload length mismatch: header implies {expected} bytes total, file has {total_len}"
            ),
        });
    }
    Ok(())
}

/// Writes one video timeline (no labels) as a single-sample feature file.
pub fn write_video_file(path: &Path, video: &VideoTimeline, vocab_hash: u64) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + video.data.len() * 4);
    write_header(&mut out, false, 1, video.steps, video.dim, vocab_hash);
    for &v in &video.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &out).map_err(|e| AvtError::io(path.display().to_string(), e))
}

pub fn read_video_file(path: &Path) -> Result<(VideoTimeline, u64)> {
    let bytes = fs::read(path).map_err(|e| AvtError::io(path.display().to_string(), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let header = read_header(&mut cur)?;
    if header.has_labels || header.n_samples != 1 {
        return Err(AvtError::Format {
            offset: 7,
            msg: "video files hold exactly one unlabeled sequence".to_string(),
        });
    }
    check_payload_len(&header, bytes.len())?;
    let n = header.seq_len * header.dim;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let b = cur.take(4, "feature value")?;
        data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    }
    Ok((VideoTimeline { steps: header.seq_len, dim: header.dim, data }, header.vocab_hash))
}

/// Writes presampled labeled clips; all clips must share `seq_len` and `dim`.
pub fn write_features(path: &Path, clips: &[ClipRecord], seq_len: usize, dim: usize, vocab_hash: u64) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        if c.features.len() != seq_len * dim {
            return Err(AvtError::Config(format!(
                "clip {i} has {} feature values, expected {}",
                c.features.len(),
                seq_len * dim
            )));
        }
        if c.frame_labels.len() != seq_len {
            return Err(AvtError::Config(format!(
                "clip {i} has {} frame labels, expected {seq_len}",
                c.frame_labels.len()
            )));
        }
    }
    let mut out = Vec::new();
    write_header(&mut out, true, clips.len(), seq_len, dim, vocab_hash);
    for c in clips {
        for &v in &c.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &c.frame_labels {
            out.extend_from_slice(&(l as i32).to_le_bytes());
        }
        out.extend_from_slice(&(c.next_action as i32).to_le_bytes());
    }
    fs::write(path, &out).map_err(|e| AvtError::io(path.display().to_string(), e))
}

/// Reads presampled labeled clips; returns the records and the vocabulary
/// hash they were written against.
pub fn read_features(path: &Path) -> Result<(Vec<ClipRecord>, usize, u64)> {
    let bytes = fs::read(path).map_err(|e| AvtError::io(path.display().to_string(), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let header = read_header(&mut cur)?;
    if !header.has_labels {
        return Err(AvtError::Format { offset: 7, msg: "clip files must carry labels".to_string() });
    }
    check_payload_len(&header, bytes.len())?;
    let mut clips = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        let n = header.seq_len * header.dim;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let b = cur.take(4, "feature value")?;
            features.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        let mut frame_labels = Vec::with_capacity(header.seq_len);
        for _ in 0..header.seq_len {
            let b = cur.take(4, "frame label")?;
            frame_labels.push(i64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        let b = cur.take(4, "future action")?;
        let next = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if next < 0 {
            return Err(AvtError::Format {
                offset: (cur.pos - 4) as u64,
                msg: format!("future action must be non-negative, got {next}"),
            });
        }
        clips.push(ClipRecord { features, frame_labels, next_action: next as usize });
    }
    Ok((clips, header.dim, header.vocab_hash))
}
