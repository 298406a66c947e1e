//! Attention aggregation and export: layer-wise rollout with residual mixing
//! for the spatial encoder, last-layer head-averaged rows for the temporal
//! head, and CSV/PGM heatmap writers.

use std::path::Path;

use crate::error::{AvtError, Result};

/// Aggregates per-layer row-stochastic attention (head-averaged) across
/// layers: each layer becomes Â = ½A + ½I row-renormalized, and the output
/// is Â_L · … · Â_1. Rows of the result sum to 1.
pub fn attention_rollout(per_layer: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_layer.is_empty() {
        return Err(AvtError::Eval("attention rollout needs at least one layer".to_string()));
    }
    let n2 = per_layer[0].len();
    let n = (n2 as f64).sqrt().round() as usize;
    if n * n != n2 {
        return Err(AvtError::Eval(format!("attention matrix of {n2} entries is not square")));
    }
    for (l, m) in per_layer.iter().enumerate() {
        if m.len() != n2 {
            return Err(AvtError::Eval(format!(
                "layer {l} attention has {} entries, expected {n2}",
                m.len()
            )));
        }
    }

    let mixed = |a: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n2];
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.5 * a[i * n + j];
                if i == j {
                    v += 0.5;
                }
                out[i * n + j] = v;
            }
            let s: f64 = out[i * n..(i + 1) * n].iter().sum();
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        out
    };

    let mut acc = mixed(&per_layer[0]);
    for a in &per_layer[1..] {
        let m = mixed(a);
        // acc ← m · acc
        let mut next = vec![0.0; n2];
        for i in 0..n {
            for p in 0..n {
                let w = m[i * n + p];
                if w == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += w * acc[p * n + j];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Class-token row of an aggregated token attention map, reshaped to the
/// patch grid (the class column itself is dropped).
pub fn class_row_patch_grid(rollout: &[f64], grid: usize) -> Result<Vec<f64>> {
    let tokens = grid * grid + 1;
    if rollout.len() != tokens * tokens {
        return Err(AvtError::Eval(format!(
            "rollout has {} entries; a {grid}x{grid} patch grid implies {} tokens",
            rollout.len(),
            tokens
        )));
    }
    Ok(rollout[1..tokens].to_vec())
}

/// Last-layer head-averaged attention row for the final query position.
pub fn final_query_attention(last_layer: &[f64], t: usize) -> Vec<f64> {
    assert_eq!(last_layer.len(), t * t, "attention matrix size mismatch");
    last_layer[(t - 1) * t..].to_vec()
}

/// Plain-text matrix: one CSV row per grid row.
pub fn write_matrix_csv(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| values[r * cols + c].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    crate::data::write_text(path, &out)
}

/// Binary 8-bit PGM (P5), min-max normalized.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let b = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        bytes.push(b);
    }
    std::fs::write(path, &bytes).map_err(|e| AvtError::io(path.display().to_string(), e))
}
