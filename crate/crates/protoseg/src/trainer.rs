//! Optimization loop: warmup + cosine learning-rate schedule, linear
//! weight-decay schedule, AdamW with decoupled decay, gradient
//! accumulation to an effective batch, per-epoch checkpointing and an
//! attention-contrast signal used for early stopping and checkpoint
//! selection. Reconstruction loss keeps falling long after the attention
//! maps degrade, so selection goes by contrast, never by loss.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::attention::aggregate;
use crate::backbone::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeMatrix;
use crate::segvit::{
    forward, init_params, load_checkpoint, loss_and_grads, save_checkpoint, AttentionBundle,
    ModelConfig, ParamMap, Tensor,
};
use crate::synthcorpus::GroundTruth;

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr_start: 5.0e-6,
            lr_peak: 1.0e-3,
            lr_final: 1.0e-6,
            warmup_epochs: 2,
            total_epochs: 12,
            wd_start: 0.04,
            wd_end: 0.4,
            effective_batch: 8,
            micro_batch: 4,
            patience: 3,
        }
    }
}

impl TrainSchedule {
    pub fn accumulation(&self) -> usize {
        self.effective_batch.div_ceil(self.micro_batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_start > self.lr_peak || self.lr_final > self.lr_peak {
            return Err(Error::Argument("lr_start and lr_final must be <= lr_peak".into()));
        }
        if self.wd_start > self.wd_end {
            return Err(Error::Argument("wd_start must be <= wd_end".into()));
        }
        if self.micro_batch == 0 || self.effective_batch == 0 || self.total_epochs == 0 {
            return Err(Error::Argument("batch sizes and epochs must be nonzero".into()));
        }
        Ok(())
    }
}

/// Linear warmup from lr_start to lr_peak over the warmup epochs, then
/// cosine decay from lr_peak to lr_final over the remaining steps; clamped
/// at lr_final afterward.
pub fn lr_at(sched: &TrainSchedule, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup = sched.warmup_epochs * steps_per_epoch;
    let total = sched.total_epochs * steps_per_epoch;
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return sched.lr_start + (sched.lr_peak - sched.lr_start) * frac;
    }
    let last = total.saturating_sub(1);
    if step >= last || last <= warmup {
        return if step >= last { sched.lr_final } else { sched.lr_peak };
    }
    let progress = (step - warmup) as f64 / (last - warmup) as f64;
    sched.lr_final
        + 0.5 * (sched.lr_peak - sched.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn wd_at(sched: &TrainSchedule, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Argument(format!("progress {progress} outside [0,1]")));
    }
    Ok(sched.wd_start + progress * (sched.wd_end - sched.wd_start))
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
}

fn decays(name: &str) -> bool {
    // decoupled decay on projection weights only, never on layer-norm
    // scales/offsets or biases
    name.ends_with(".weight")
}

#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    if state.m.is_empty() {
        for (name, p) in params.iter() {
            state.m.insert(name.clone(), Tensor::zeros(&p.dims));
            state.v.insert(name.clone(), Tensor::zeros(&p.dims));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let apply_wd = wd != 0.0 && decays(name);
        for i in 0..p.data.len() {
            if apply_wd {
                p.data[i] -= lr * wd * p.data[i];
            }
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub attention_contrast: f64,
    pub checkpoint_path: PathBuf,
}

/// Mean normalized attention over foreground cells minus the mean over
/// background+frame cells, averaged over plots; in [-1,1]. Plots with an
/// empty foreground are skipped. With `t_eval` set, scores are binarized
/// at the threshold first.
pub fn attention_contrast(
    params: &ParamMap,
    cfg: &ModelConfig,
    plots: &[EmbeddingMatrix],
    masks: &[GroundTruth],
    t_eval: Option<f64>,
) -> Result<f64> {
    if plots.len() != masks.len() {
        return Err(Error::Argument(format!(
            "{} plots vs {} masks",
            plots.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (tokens, truth) in plots.iter().zip(masks) {
        let (_, attn) = forward(params, cfg, tokens)?;
        let c = contrast_of_bundle(&attn, truth, t_eval)?;
        if let Some(c) = c {
            total += c;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Argument("no plot has foreground cells".into()));
    }
    Ok(total / used as f64)
}

/// Contrast for one plot from an already-captured bundle; None when the
/// mask has no foreground.
pub fn contrast_of_bundle(
    attn: &AttentionBundle,
    truth: &GroundTruth,
    t_eval: Option<f64>,
) -> Result<Option<f64>> {
    let map = aggregate(attn, truth.grid_rows, truth.grid_cols)?;
    contrast_of_scores(&map.scores, &truth.foreground_mask, t_eval)
}

pub fn contrast_of_scores(
    scores: &[f64],
    mask: &[bool],
    t_eval: Option<f64>,
) -> Result<Option<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Argument(format!(
            "{} scores vs {} mask cells",
            scores.len(),
            mask.len()
        )));
    }
    let value = |s: f64| match t_eval {
        Some(t) => {
            if s > t {
                1.0
            } else {
                0.0
            }
        }
        None => s,
    };
    let (mut fg, mut nfg) = (0.0, 0usize);
    let (mut bg, mut nbg) = (0.0, 0usize);
    for (&s, &m) in scores.iter().zip(mask) {
        if m {
            fg += value(s);
            nfg += 1;
        } else {
            bg += value(s);
            nbg += 1;
        }
    }
    if nfg == 0 {
        return Ok(None);
    }
    let bg_mean = if nbg == 0 { 0.0 } else { bg / nbg as f64 };
    Ok(Some(fg / nfg as f64 - bg_mean))
}

/// Argmax of attention contrast; ties go to the earliest epoch.
pub fn select_checkpoint(log: &[EpochLog]) -> Result<usize> {
    if log.is_empty() {
        return Err(Error::Argument("empty epoch log".into()));
    }
    let mut best = &log[0];
    for e in &log[1..] {
        if e.attention_contrast > best.attention_contrast {
            best = e;
        }
    }
    Ok(best.epoch)
}

pub fn train(
    plots: &[EmbeddingMatrix],
    target: &PrototypeMatrix,
    cfg: &ModelConfig,
    sched: &TrainSchedule,
    masks: &[GroundTruth],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<EpochLog>> {
    sched.validate()?;
    cfg.validate()?;
    if plots.is_empty() {
        return Err(Error::Argument("no training plots".into()));
    }
    let grid0 = plots[0].grid;
    if plots.iter().any(|p| p.grid != grid0) {
        return Err(Error::Argument("plots must share one grid shape".into()));
    }
    if target.k_cls != cfg.k_cls || target.dim != cfg.proto_dim {
        return Err(Error::Argument(format!(
            "target {}x{} does not match model head {}x{}",
            target.k_cls, target.dim, cfg.k_cls, cfg.proto_dim
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut params = init_params(cfg)?;
    let mut state = AdamState::default();
    let steps_per_epoch = plots.len().div_ceil(sched.effective_batch);
    let total_steps = sched.total_epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut global_step = 0usize;
    let mut decline_streak = 0usize;

    for epoch in 1..=sched.total_epochs {
        let mut order: Vec<usize> = (0..plots.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for group in order.chunks(sched.effective_batch) {
            let lr = lr_at(sched, global_step, steps_per_epoch);
            let progress = if total_steps > 1 {
                global_step as f64 / (total_steps - 1) as f64
            } else {
                0.0
            };
            let wd = wd_at(sched, progress)?;
            // accumulate micro-batch gradients in fixed order
            let mut acc: Option<ParamMap> = None;
            for micro in group.chunks(sched.micro_batch) {
                for &idx in micro {
                    let (l, grads, _) =
                        loss_and_grads(&params, cfg, &plots[idx], target).map_err(|e| {
                            Error::Numeric(format!("epoch {epoch} step {global_step} plot {idx}: {e}"))
                        })?;
                    epoch_loss += l;
                    match &mut acc {
                        None => acc = Some(grads),
                        Some(a) => {
                            for (name, g) in &grads {
                                let t = a.get_mut(name).unwrap();
                                for (x, y) in t.data.iter_mut().zip(&g.data) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = acc.unwrap();
            let scale = 1.0 / group.len() as f64;
            for t in grads.values_mut() {
                for v in &mut t.data {
                    *v *= scale;
                }
            }
            adamw_step(&mut params, &grads, &mut state, lr, wd, 0.9, 0.999, 1e-8)?;
            global_step += 1;
        }
        let mean_loss = epoch_loss / plots.len() as f64;
        let ckpt = out_dir.join(format!("epoch_{epoch:03}.svit"));
        save_checkpoint(&params, cfg, &ckpt)?;
        // Evaluate contrast on the parameters as persisted (f32 storage),
        // so recomputing it later from the checkpoint matches the log.
        let (saved_params, saved_cfg) = load_checkpoint(&ckpt)?;
        let contrast = attention_contrast(&saved_params, &saved_cfg, plots, masks, None)?;
        let declined = log
            .last()
            .map(|prev| contrast < prev.attention_contrast)
            .unwrap_or(false);
        decline_streak = if declined { decline_streak + 1 } else { 0 };
        log.push(EpochLog {
            epoch,
            mean_loss,
            attention_contrast: contrast,
            checkpoint_path: ckpt,
        });
        if decline_streak >= sched.patience {
            break;
        }
    }
    Ok(log)
}

/// EpochLog CSV: `epoch,mean_loss,attention_contrast,checkpoint_path`
/// with 9 significant digits.
pub fn write_epoch_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,attention_contrast,checkpoint_path\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{}\n",
            e.epoch,
            e.mean_loss,
            e.attention_contrast,
            e.checkpoint_path.display()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut log = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected 4 CSV fields".into(),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: i + 1,
            msg: format!("invalid {what}"),
        };
        log.push(EpochLog {
            epoch: parts[0].parse().map_err(|_| bad("epoch"))?,
            mean_loss: parts[1].parse().map_err(|_| bad("mean_loss"))?,
            attention_contrast: parts[2].parse().map_err(|_| bad("attention_contrast"))?,
            checkpoint_path: PathBuf::from(parts[3]),
        });
    }
    Ok(log)
}
