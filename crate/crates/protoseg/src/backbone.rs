//! Frozen patch-feature extractor and the species classifier head used by
//! both inference heuristics.
//!
//! The extractor computes per-channel means and variances over a 4x4 and
//! an 8x8 partition of the crop, maps the statistics through a fixed
//! seeded linear projection and L2-normalizes. It is deterministic,
//! discriminative on the synthetic textures, and never trained.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fileio::{BinReader, BinWriter};
use crate::imaging::{resize_bicubic, tile, Raster, CHANNELS};

const PARTITIONS: [usize; 2] = [4, 8];
// 3 channels x 2 stats x (16 + 64) blocks
pub const STAT_DIM: usize = CHANNELS * 2 * (4 * 4 + 8 * 8);

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub input_px: usize,
    pub feature_dim: usize,
    pub projection_seed: u64,
    projection: Vec<f64>, // feature_dim x STAT_DIM
}

#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// (rows, cols) when derived from a plot tiling; rows*cols == count.
    pub grid: Option<(usize, usize)>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl FrozenBackbone {
    pub fn new(input_px: usize, feature_dim: usize, projection_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
        let scale = 1.0 / (STAT_DIM as f64).sqrt();
        let projection = (0..feature_dim * STAT_DIM)
            .map(|_| rng.gen_range(-1.0..=1.0) * scale)
            .collect();
        FrozenBackbone {
            input_px,
            feature_dim,
            projection_seed,
            projection,
        }
    }

    fn block_stats(&self, crop: &Raster) -> Vec<f64> {
        let mut stats = Vec::with_capacity(STAT_DIM);
        for &n in &PARTITIONS {
            for br in 0..n {
                for bc in 0..n {
                    let y0 = br * crop.height / n;
                    let y1 = (br + 1) * crop.height / n;
                    let x0 = bc * crop.width / n;
                    let x1 = (bc + 1) * crop.width / n;
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    for c in 0..CHANNELS {
                        let mut sum = 0.0;
                        let mut sq = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let v = crop.get(y, x, c) as f64;
                                sum += v;
                                sq += v * v;
                            }
                        }
                        let mean = sum / count;
                        stats.push(mean);
                        stats.push((sq / count - mean * mean).max(0.0));
                    }
                }
            }
        }
        stats
    }

    pub fn embed_crop(&self, crop: &Raster) -> Result<Vec<f64>> {
        if crop.height != self.input_px || crop.width != self.input_px {
            return Err(Error::Argument(format!(
                "crop is {}x{}, backbone expects {}x{}",
                crop.height, crop.width, self.input_px, self.input_px
            )));
        }
        let stats = self.block_stats(crop);
        let mut feat = vec![0.0f64; self.feature_dim];
        for (i, f) in feat.iter_mut().enumerate() {
            let row = &self.projection[i * STAT_DIM..(i + 1) * STAT_DIM];
            *f = row.iter().zip(&stats).map(|(a, b)| a * b).sum();
        }
        let norm = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for f in &mut feat {
                *f /= norm;
            }
        }
        Ok(feat)
    }

    /// Tile the plot, bicubic-resize each tile to the backbone input size
    /// and embed. Row i corresponds to tile i in row-major grid order.
    pub fn embed_plot(&self, img: &Raster, patch_px: usize) -> Result<EmbeddingMatrix> {
        let grid = tile(img, patch_px)?;
        let mut data = Vec::with_capacity(grid.tiles.len() * self.feature_dim);
        for t in &grid.tiles {
            let crop = if t.height == self.input_px && t.width == self.input_px {
                t.clone()
            } else {
                resize_bicubic(t, self.input_px, self.input_px)?
            };
            data.extend(self.embed_crop(&crop)?);
        }
        Ok(EmbeddingMatrix {
            count: grid.tiles.len(),
            dim: self.feature_dim,
            data,
            grid: Some((grid.rows, grid.cols)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpeciesClassifier {
    pub n_species: usize,
    pub dim: usize,
    pub weight: Vec<f64>, // n_species x dim
    pub bias: Vec<f64>,   // n_species
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

pub fn classify(cls: &SpeciesClassifier, feat: &[f64]) -> Result<Vec<f64>> {
    if feat.len() != cls.dim {
        return Err(Error::Argument(format!(
            "feature dim {} != classifier dim {}",
            feat.len(),
            cls.dim
        )));
    }
    let mut logits: Vec<f64> = (0..cls.n_species)
        .map(|s| {
            cls.weight[s * cls.dim..(s + 1) * cls.dim]
                .iter()
                .zip(feat)
                .map(|(w, f)| w * f)
                .sum::<f64>()
                + cls.bias[s]
        })
        .collect();
    softmax(&mut logits);
    Ok(logits)
}

/// Mean cross-entropy of the classifier on a labelled embedding set.
pub fn xent_loss(cls: &SpeciesClassifier, x: &EmbeddingMatrix, labels: &[u32]) -> Result<f64> {
    let mut loss = 0.0;
    for i in 0..x.count {
        let p = classify(cls, x.row(i))?;
        loss -= p[labels[i] as usize].max(1e-300).ln();
    }
    Ok(loss / x.count as f64)
}

pub fn accuracy(cls: &SpeciesClassifier, x: &EmbeddingMatrix, labels: &[u32]) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..x.count {
        let p = classify(cls, x.row(i))?;
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / x.count as f64)
}

/// Multinomial logistic regression by full-batch gradient descent from a
/// zero initialization. Deterministic; `seed` is accepted for interface
/// stability but the zero init makes the fit seed-independent.
pub fn fit_classifier(
    train: &EmbeddingMatrix,
    labels: &[u32],
    n_species: usize,
    epochs: usize,
    lr: f64,
    _seed: u64,
) -> Result<SpeciesClassifier> {
    if train.count == 0 {
        return Err(Error::Argument("empty training set".into()));
    }
    if labels.len() != train.count {
        return Err(Error::Argument(format!(
            "{} labels for {} embeddings",
            labels.len(),
            train.count
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_species) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {n_species} species"
        )));
    }
    let dim = train.dim;
    let mut cls = SpeciesClassifier {
        n_species,
        dim,
        weight: vec![0.0; n_species * dim],
        bias: vec![0.0; n_species],
    };
    let n = train.count as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0f64; n_species * dim];
        let mut gb = vec![0.0f64; n_species];
        for i in 0..train.count {
            let feat = train.row(i);
            let mut p = classify(&cls, feat)?;
            p[labels[i] as usize] -= 1.0;
            for (s, &ps) in p.iter().enumerate() {
                gb[s] += ps;
                let row = &mut gw[s * dim..(s + 1) * dim];
                for (g, &f) in row.iter_mut().zip(feat) {
                    *g += ps * f;
                }
            }
        }
        for (w, g) in cls.weight.iter_mut().zip(&gw) {
            *w -= lr * g / n;
        }
        for (b, g) in cls.bias.iter_mut().zip(&gb) {
            *b -= lr * g / n;
        }
    }
    Ok(cls)
}

// --- file formats -----------------------------------------------------

/// Embedding file: magic "PEMB", u32 version=1, u32 count, u32 dim, then
/// count*dim little-endian f32, row-major.
pub fn write_embeddings(x: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(b"PEMB")?;
    w.u32(1)?;
    w.u32(x.count as u32)?;
    w.u32(x.dim as u32)?;
    w.f64_as_f32_slice(&x.data)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut r = BinReader::open(path)?;
    r.expect_magic("PEMB")?;
    r.expect_version("PEMB", 1)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.f32_as_f64_vec(count * dim)?;
    Ok(EmbeddingMatrix {
        count,
        dim,
        data,
        grid: None,
    })
}

/// Classifier checkpoint: magic "PCLS", u32 n_species, u32 dim, weights
/// then bias, little-endian f32.
pub fn write_classifier(cls: &SpeciesClassifier, path: &Path) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(b"PCLS")?;
    w.u32(cls.n_species as u32)?;
    w.u32(cls.dim as u32)?;
    w.f64_as_f32_slice(&cls.weight)?;
    w.f64_as_f32_slice(&cls.bias)?;
    Ok(())
}

pub fn read_classifier(path: &Path) -> Result<SpeciesClassifier> {
    let mut r = BinReader::open(path)?;
    r.expect_magic("PCLS")?;
    let n_species = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let weight = r.f32_as_f64_vec(n_species * dim)?;
    let bias = r.f32_as_f64_vec(n_species)?;
    Ok(SpeciesClassifier {
        n_species,
        dim,
        weight,
        bias,
    })
}
