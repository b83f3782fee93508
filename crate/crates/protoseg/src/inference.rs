//! Species identification over attention-selected tokens. Heuristic 1
//! classifies each selected tile on its own; heuristic 2 classifies a
//! k x k composite of neighboring tiles centered on the selected token,
//! supplying spatial context. Both keep the argmax species of crops whose
//! confidence exceeds `prob` and union the unique ids per quadrat, falling
//! back to the single most confident crop when nothing passes.

use std::collections::BTreeSet;

use crate::attention::{aggregate, threshold_mask, AttentionMap};
use crate::backbone::{classify, EmbeddingMatrix, FrozenBackbone, SpeciesClassifier};
use crate::error::{Error, Result};
use crate::imaging::{assemble_grid, resize_bicubic, tile, Raster, TileGrid};
use crate::metrics::QuadratPrediction;
use crate::segvit::{forward, ModelConfig, ParamMap};

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    /// attention threshold in [0,1]
    pub t: f64,
    /// probability threshold in [0,1]
    pub prob: f64,
    /// window size for heuristic 2; None selects heuristic 1
    pub grid_k: Option<usize>,
    pub input_h: usize,
    pub input_w: usize,
    pub patch_px: usize,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) || !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Argument(format!(
                "thresholds t={} prob={} must lie in [0,1]",
                self.t, self.prob
            )));
        }
        if let Some(k) = self.grid_k {
            if k % 2 == 0 {
                return Err(Error::Argument(format!("grid_k {k} must be odd")));
            }
        }
        Ok(())
    }
}

/// Attention-selected token indices; when nothing exceeds the threshold
/// the single highest-attention token is promoted so the pipeline stays
/// total.
/// Tokens above the attention threshold; when none clears it, the single
/// highest-attention token is promoted so a quadrat always yields a crop.
pub fn select_tokens(map: &AttentionMap, t: f64) -> Vec<usize> {
    let selected = threshold_mask(map, t);
    if !selected.is_empty() {
        return selected;
    }
    let best = map
        .scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    vec![best]
}

fn crop_for_token(grid: &TileGrid, token: usize, grid_k: Option<usize>) -> Result<Raster> {
    match grid_k {
        None | Some(1) => Ok(grid.tiles[token].clone()),
        Some(k) => assemble_grid(grid, token, k),
    }
}

/// Per-plot state the heuristics share: the tile grid and the normalized
/// attention map. Computing it once lets a parameter sweep reuse the
/// expensive embedding and forward pass across configurations.
pub struct PlotContext {
    pub grid: TileGrid,
    pub map: AttentionMap,
}

pub fn prepare_plot(
    img: &Raster,
    params: &ParamMap,
    model_cfg: &ModelConfig,
    bb: &FrozenBackbone,
    cfg: &InferenceConfig,
) -> Result<PlotContext> {
    let img = if img.height != cfg.input_h || img.width != cfg.input_w {
        resize_bicubic(img, cfg.input_h, cfg.input_w)?
    } else {
        img.clone()
    };
    let grid = tile(&img, cfg.patch_px)?;
    let mut data = Vec::with_capacity(grid.tiles.len() * bb.feature_dim);
    for t in &grid.tiles {
        let crop = resize_bicubic(t, bb.input_px, bb.input_px)?;
        data.extend(bb.embed_crop(&crop)?);
    }
    let tokens = EmbeddingMatrix {
        count: grid.tiles.len(),
        dim: bb.feature_dim,
        data,
        grid: Some((grid.rows, grid.cols)),
    };
    let (_, attn) = forward(params, model_cfg, &tokens)?;
    let map = aggregate(&attn, grid.rows, grid.cols)?;
    Ok(PlotContext { grid, map })
}

/// Argmax species and its probability for one selected token's crop.
pub fn classify_token(
    grid: &TileGrid,
    token: usize,
    grid_k: Option<usize>,
    bb: &FrozenBackbone,
    cls: &SpeciesClassifier,
) -> Result<(u32, f64)> {
    let crop = crop_for_token(grid, token, grid_k)?;
    let crop = resize_bicubic(&crop, bb.input_px, bb.input_px)?;
    let probs = classify(cls, &bb.embed_crop(&crop)?)?;
    Ok(probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, &p)| (i as u32, p))
        .unwrap())
}

/// Apply the threshold/union/fallback semantics given per-token argmax
/// classifications. `classified` must follow `select_tokens(map, t)` order.
pub fn combine_predictions(
    quadrat_id: &str,
    classified: &[(u32, f64)],
    prob: f64,
) -> QuadratPrediction {
    let mut species = BTreeSet::new();
    let mut best_overall: Option<(f64, u32)> = None;
    for &(argmax, pmax) in classified {
        if pmax > prob {
            species.insert(argmax);
        }
        if best_overall.map(|(bp, _)| pmax > bp).unwrap_or(true) {
            best_overall = Some((pmax, argmax));
        }
    }
    if species.is_empty() {
        // the per-quadrat fallback: globally most confident crop
        species.insert(best_overall.expect("at least one selected token").1);
    }
    QuadratPrediction {
        quadrat_id: quadrat_id.to_owned(),
        species_ids: species,
    }
}

/// Token indices the configured threshold selects for this plot.
pub fn selected_tokens(ctx: &PlotContext, t: f64) -> Vec<usize> {
    select_tokens(&ctx.map, t)
}

#[allow(clippy::too_many_arguments)]
fn predict_one(
    quadrat_id: &str,
    img: &Raster,
    params: &ParamMap,
    model_cfg: &ModelConfig,
    bb: &FrozenBackbone,
    cls: &SpeciesClassifier,
    cfg: &InferenceConfig,
) -> Result<QuadratPrediction> {
    cfg.validate()?;
    let ctx = prepare_plot(img, params, model_cfg, bb, cfg)?;
    let selected = select_tokens(&ctx.map, cfg.t);
    let mut classified = Vec::with_capacity(selected.len());
    for &token in &selected {
        classified.push(classify_token(&ctx.grid, token, cfg.grid_k, bb, cls)?);
    }
    Ok(combine_predictions(quadrat_id, &classified, cfg.prob))
}

/// Patch-wise classification of each selected tile.
pub fn heuristic1(
    quadrat_id: &str,
    img: &Raster,
    params: &ParamMap,
    model_cfg: &ModelConfig,
    bb: &FrozenBackbone,
    cls: &SpeciesClassifier,
    cfg: &InferenceConfig,
) -> Result<QuadratPrediction> {
    if cfg.grid_k.is_some() {
        return Err(Error::Argument("heuristic 1 takes no grid_k".into()));
    }
    predict_one(quadrat_id, img, params, model_cfg, bb, cls, cfg)
}

/// Grid-assembly classification: a k x k window of neighboring tiles
/// around each selected token.
pub fn heuristic2(
    quadrat_id: &str,
    img: &Raster,
    params: &ParamMap,
    model_cfg: &ModelConfig,
    bb: &FrozenBackbone,
    cls: &SpeciesClassifier,
    cfg: &InferenceConfig,
) -> Result<QuadratPrediction> {
    if cfg.grid_k.is_none() {
        return Err(Error::Argument("heuristic 2 requires grid_k".into()));
    }
    predict_one(quadrat_id, img, params, model_cfg, bb, cls, cfg)
}

/// Batch driver: applies the configured heuristic per plot, preserving
/// order. Per-plot failures are collected and reported at the end while
/// the run continues.
pub fn run_inference(
    plots: &[(String, Raster)],
    params: &ParamMap,
    model_cfg: &ModelConfig,
    bb: &FrozenBackbone,
    cls: &SpeciesClassifier,
    cfg: &InferenceConfig,
) -> Result<Vec<QuadratPrediction>> {
    let mut seen = BTreeSet::new();
    for (qid, _) in plots {
        if !seen.insert(qid.as_str()) {
            return Err(Error::Argument(format!("duplicate quadrat id {qid:?}")));
        }
    }
    let mut out = Vec::with_capacity(plots.len());
    let mut failures = Vec::new();
    for (qid, img) in plots {
        match predict_one(qid, img, params, model_cfg, bb, cls, cfg) {
            Ok(p) => out.push(p),
            Err(e) => failures.push(format!("{qid}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InferenceBatch {
            failed: failures.len(),
            total: plots.len(),
            detail: failures.join("; "),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::fit_classifier;
    use crate::segvit::init_params;
    use crate::synthcorpus::{
        gen_test_plots, gen_training_set, render_plot, species_table, Cell, PlotSpec,
        PLOT_NOISE_AMPLITUDE,
    };

    struct Fixture {
        bb: FrozenBackbone,
        cls: SpeciesClassifier,
        params: ParamMap,
        model_cfg: ModelConfig,
    }

    fn fixture() -> Fixture {
        let bb = FrozenBackbone::new(32, 24, 7);
        let tiles = gen_training_set(4, 6, 32, 5).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (img, l) in &tiles {
            data.extend(bb.embed_crop(img).unwrap());
            labels.push(*l);
        }
        let x = EmbeddingMatrix {
            count: tiles.len(),
            dim: 24,
            data,
            grid: None,
        };
        let cls = fit_classifier(&x, &labels, 4, 300, 2.0, 0).unwrap();
        let model_cfg = ModelConfig {
            depth: 1,
            heads: 2,
            model_dim: 16,
            backbone_dim: 24,
            k_cls: 4,
            proto_dim: 24,
            mlp_ratio: 2.0,
            seed: 3,
        };
        let params = init_params(&model_cfg).unwrap();
        Fixture {
            bb,
            cls,
            params,
            model_cfg,
        }
    }

    fn icfg(grid_k: Option<usize>) -> InferenceConfig {
        InferenceConfig {
            t: 0.6,
            prob: 0.5,
            grid_k,
            input_h: 5 * 32,
            input_w: 5 * 32,
            patch_px: 32,
        }
    }

    #[test]
    fn single_species_plot_predicts_singleton() {
        let f = fixture();
        // hand-built plot: frame border, interior filled with one species
        let (rows, cols) = (5usize, 5usize);
        let cells: Vec<Cell> = (0..rows * cols)
            .map(|idx| {
                let (r, c) = (idx / cols, idx % cols);
                if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                    Cell::Frame
                } else {
                    Cell::Species(2)
                }
            })
            .collect();
        let spec = PlotSpec {
            transect_id: 0,
            quadrat_id: "q".into(),
            grid_rows: rows,
            grid_cols: cols,
            cell_assignments: cells,
            seed: 11,
        };
        let table = species_table(4, PLOT_NOISE_AMPLITUDE);
        let raster = render_plot(&spec, &table, 32).unwrap();
        let pred = heuristic1("q", &raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(None)).unwrap();
        assert!(!pred.species_ids.is_empty());
        // heuristic 2 at the same settings also yields a nonempty set
        let pred2 = heuristic2("q", &raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(Some(3))).unwrap();
        assert!(!pred2.species_ids.is_empty());
    }

    #[test]
    fn predictions_are_never_empty_even_at_extreme_thresholds() {
        let f = fixture();
        let plots = gen_test_plots(1, 2, 5, 5, 0.5, 4, 32, 13).unwrap();
        let mut cfg = icfg(None);
        cfg.t = 1.0; // nothing exceeds 1.0 -> highest-attention token promoted
        cfg.prob = 1.0; // nothing exceeds 1.0 -> fallback to best crop
        for (_, raster, _) in &plots {
            let pred = heuristic1("q", raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &cfg).unwrap();
            assert_eq!(pred.species_ids.len(), 1);
        }
    }

    #[test]
    fn raising_prob_never_adds_species() {
        let f = fixture();
        let plots = gen_test_plots(1, 3, 6, 6, 0.6, 4, 32, 17).unwrap();
        for (_, raster, _) in &plots {
            let mut cfg = icfg(Some(3));
            cfg.input_h = 6 * 32;
            cfg.input_w = 6 * 32;
            cfg.t = 0.3;
            cfg.prob = 0.3;
            let lo = heuristic2("q", raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &cfg).unwrap();
            cfg.prob = 0.7;
            let hi = heuristic2("q", raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &cfg).unwrap();
            // monotone before fallback: with fallback the high-prob set is a
            // singleton already contained in the low-prob union or equal
            assert!(
                hi.species_ids.is_subset(&lo.species_ids) || hi.species_ids.len() == 1,
                "prob filter added species: {lo:?} -> {hi:?}"
            );
        }
    }

    #[test]
    fn heuristic2_with_k1_equals_heuristic1() {
        let f = fixture();
        let plots = gen_test_plots(1, 3, 5, 5, 0.6, 4, 32, 19).unwrap();
        for (_, raster, _) in &plots {
            let h1 = predict_one("q", raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(None)).unwrap();
            let h2 = predict_one("q", raster, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(Some(1))).unwrap();
            assert_eq!(h1.species_ids, h2.species_ids);
        }
    }

    #[test]
    fn batch_driver_contracts() {
        let f = fixture();
        let empty: Vec<(String, Raster)> = vec![];
        assert!(run_inference(&empty, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(None))
            .unwrap()
            .is_empty());
        let plots = gen_test_plots(1, 2, 5, 5, 0.6, 4, 32, 23).unwrap();
        let named: Vec<(String, Raster)> = plots
            .iter()
            .map(|(s, r, _)| (s.quadrat_id.clone(), r.clone()))
            .collect();
        let out = run_inference(&named, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(None)).unwrap();
        assert_eq!(out.len(), named.len());
        assert_eq!(out[0].quadrat_id, named[0].0);
        let dup = vec![named[0].clone(), named[0].clone()];
        assert!(run_inference(&dup, &f.params, &f.model_cfg, &f.bb, &f.cls, &icfg(None)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = icfg(Some(4));
        assert!(cfg.validate().is_err());
        cfg.grid_k = Some(3);
        cfg.t = 1.5;
        assert!(cfg.validate().is_err());
        assert!(icfg(None).validate().is_ok());
    }
}
