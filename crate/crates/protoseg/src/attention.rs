//! Turn captured attention tensors into one normalized per-token relevance
//! map, select tokens above a threshold, and emit heatmaps.
//!
//! Per-token reduction: mean the T x T matrices over layers and heads,
//! then take column means (attention *received* over all query tokens).
//! The raw scores are min-max normalized to [0,1]; a constant raw map is
//! degenerate and normalizes to all zeros so thresholding selects nothing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::write_pgm;
use crate::segvit::AttentionBundle;

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

pub fn aggregate(attn: &AttentionBundle, rows: usize, cols: usize) -> Result<AttentionMap> {
    let t = attn.tokens;
    if rows * cols != t {
        return Err(Error::Argument(format!(
            "grid {rows}x{cols} does not match {t} tokens"
        )));
    }
    let slices = attn.depth * attn.heads;
    if slices == 0 || attn.data.len() != slices * t * t {
        return Err(Error::Argument("malformed attention bundle".into()));
    }
    // mean over layers and heads, then column mean, fused
    let mut raw = vec![0.0f64; t];
    for s in 0..slices {
        let mat = &attn.data[s * t * t..(s + 1) * t * t];
        for row in mat.chunks_exact(t) {
            for (acc, v) in raw.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let denom = (slices * t) as f64;
    for v in &mut raw {
        *v /= denom;
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scores = if max - min <= f64::EPSILON * max.abs().max(1.0) {
        vec![0.0; t]
    } else {
        raw.iter().map(|v| (v - min) / (max - min)).collect()
    };
    Ok(AttentionMap { rows, cols, scores })
}

/// Token indices with score strictly above `t`, ascending.
pub fn threshold_mask(map: &AttentionMap, t: f64) -> Vec<usize> {
    map.scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > t)
        .map(|(i, _)| i)
        .collect()
}

/// One pixel per token, value round(score*255), optionally upscaled by a
/// nearest-neighbor factor.
pub fn emit_heatmap(map: &AttentionMap, path: &Path, upscale: usize) -> Result<()> {
    let f = upscale.max(1);
    let (h, w) = (map.rows * f, map.cols * f);
    let mut px = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            px[y * w + x] = map.scores[(y / f) * map.cols + x / f] as f32;
        }
    }
    write_pgm(&px, h, w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::read_pgm;

    fn bundle(depth: usize, heads: usize, t: usize, fill: impl Fn(usize, usize, usize) -> Vec<f64>) -> AttentionBundle {
        let mut data = Vec::new();
        for l in 0..depth {
            for h in 0..heads {
                data.extend(fill(l, h, t));
            }
        }
        AttentionBundle {
            depth,
            heads,
            tokens: t,
            data,
        }
    }

    #[test]
    fn uniform_attention_is_degenerate() {
        let t = 5;
        let b = bundle(2, 3, t, |_, _, t| vec![1.0 / t as f64; t * t]);
        let m = aggregate(&b, 1, 5).unwrap();
        assert_eq!(m.scores, vec![0.0; 5]);
        assert!(threshold_mask(&m, 0.0).is_empty());
    }

    #[test]
    fn one_hot_columns_score_one() {
        // every row one-hot on token 2
        let t = 4;
        let b = bundle(1, 1, t, |_, _, t| {
            let mut m = vec![0.0; t * t];
            for i in 0..t {
                m[i * t + 2] = 1.0;
            }
            m
        });
        let m = aggregate(&b, 2, 2).unwrap();
        assert_eq!(m.scores[2], 1.0);
        for (i, &s) in m.scores.iter().enumerate() {
            if i != 2 {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn aggregate_equals_explicit_loop_oracle() {
        let t = 3;
        let b = bundle(2, 2, t, |l, h, t| {
            // arbitrary row-stochastic rows that differ per slice
            let base = (l * 2 + h) as f64;
            (0..t)
                .flat_map(|i| {
                    let a = 0.2 + 0.1 * ((base + i as f64) % 3.0);
                    let b2 = 0.3;
                    vec![a, b2, 1.0 - a - b2]
                })
                .collect()
        });
        let m = aggregate(&b, 1, 3).unwrap();
        // oracle: explicit elementwise mean of slices, then column means
        let mut mean = vec![0.0f64; t * t];
        for s in 0..4 {
            for i in 0..t * t {
                mean[i] += b.data[s * t * t + i] / 4.0;
            }
        }
        let mut raw = vec![0.0f64; t];
        for i in 0..t {
            for j in 0..t {
                raw[j] += mean[i * t + j] / t as f64;
            }
        }
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (got, r) in m.scores.iter().zip(&raw) {
            assert!((got - (r - min) / (max - min)).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let t = 3;
        let b = bundle(2, 2, t, |l, h, t| {
            let a = 0.1 + 0.15 * (l as f64) + 0.05 * (h as f64);
            (0..t).flat_map(|_| vec![a, 0.5 - a / 2.0, 0.5 - a / 2.0]).collect()
        });
        let mut swapped = b.data.clone();
        let t2 = t * t;
        // swap layer 0 and layer 1 (each layer = heads*t2 entries)
        let (l0, l1) = swapped.split_at_mut(2 * t2);
        l0.swap_with_slice(&mut l1[..2 * t2]);
        let b2 = AttentionBundle {
            depth: 2,
            heads: 2,
            tokens: t,
            data: swapped,
        };
        let m1 = aggregate(&b, 1, 3).unwrap();
        let m2 = aggregate(&b2, 1, 3).unwrap();
        for (a, c) in m1.scores.iter().zip(&m2.scores) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_semantics() {
        let m = AttentionMap {
            rows: 1,
            cols: 4,
            scores: vec![0.0, 0.6, 0.61, 1.0],
        };
        assert_eq!(threshold_mask(&m, 0.6), vec![2, 3]);
        assert_eq!(threshold_mask(&m, 1.0), Vec::<usize>::new());
        assert_eq!(threshold_mask(&m, 0.0), vec![1, 2, 3]);
        // nesting: lower threshold selects a superset
        let at_03 = threshold_mask(&m, 0.3);
        let at_07 = threshold_mask(&m, 0.7);
        assert!(at_07.iter().all(|i| at_03.contains(i)));
    }

    #[test]
    fn heatmap_roundtrips_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = AttentionMap {
            rows: 2,
            cols: 2,
            scores: vec![0.0, 1.0, 0.5, 0.25],
        };
        emit_heatmap(&m, &path, 1).unwrap();
        let (vals, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(vals[0], 0.0);
        assert_eq!(vals[1], 1.0);
        for (v, s) in vals.iter().zip(&m.scores) {
            assert!((v - *s as f32).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // all-zero map -> all-black
        let z = AttentionMap {
            rows: 1,
            cols: 3,
            scores: vec![0.0; 3],
        };
        emit_heatmap(&z, &path, 2).unwrap();
        let (vals, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (2, 6));
        assert!(vals.iter().all(|&v| v == 0.0));
    }
}
