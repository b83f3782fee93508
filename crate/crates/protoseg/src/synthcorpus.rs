//! Deterministic synthetic corpus: single-species training tiles, multi-
//! species test plots with a quadrat-frame border, ground-truth label sets
//! and per-cell foreground masks.
//!
//! Species textures are striped color fields with low-frequency value
//! noise. Training tiles are rendered with mild noise; test plots use a
//! stronger noise amplitude, emulating the domain shift between clean
//! single-species imagery and in-situ plot photography. Species identity
//! inside a plot follows a seeded Voronoi field so that one species spans
//! several adjacent cells, the way a plant spans several patches.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::imaging::Raster;

pub const TRAIN_NOISE_AMPLITUDE: f32 = 0.06;
pub const PLOT_NOISE_AMPLITUDE: f32 = 0.28;

/// Stripe-period multiplier for plot rendering. In plots a species spans
/// several cells and its texture is rendered this many times coarser than
/// in training tiles, so a single cell sees less than one period (the two
/// same-hue species look alike) while a k x k composite, downscaled back
/// to backbone input size, approaches the training-scale texture again.
pub const PLOT_TEXTURE_SCALE: usize = 9;

const NOISE_LATTICE_PX: usize = 16;
const FRAME_CHECKER_PX: usize = 8;
const BG_LEVEL: f32 = 0.13;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSpec {
    pub species_id: u32,
    pub base_color: [f32; 3],
    pub stripe_period: usize,
    pub noise_amplitude: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Background,
    Frame,
    Species(u32),
}

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub transect_id: u32,
    pub quadrat_id: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_assignments: Vec<Cell>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub quadrat_id: String,
    pub species_set: BTreeSet<u32>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub foreground_mask: Vec<bool>,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Deterministic species table. Species come in same-hue pairs: ids 2j and
/// 2j+1 share a base color and stripe orientation but differ in stripe
/// period (16 vs 32 px), so color alone cannot separate a pair — the
/// texture scale has to be resolved.
pub fn species_table(n_species: u32, noise_amplitude: f32) -> Vec<SpeciesSpec> {
    let n_hues = n_species.div_ceil(2);
    (0..n_species)
        .map(|id| {
            let hue = (id / 2) as f32 * 360.0 / n_hues as f32;
            SpeciesSpec {
                species_id: id,
                base_color: hsv_to_rgb(hue, 0.6, 0.85),
                stripe_period: if id % 2 == 0 { 16 } else { 32 },
                noise_amplitude,
            }
        })
        .collect()
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smooth value noise in [-1,1]: a seeded lattice every NOISE_LATTICE_PX
/// pixels, bilinearly interpolated, independent per channel.
struct ValueNoise {
    lat_rows: usize,
    lat_cols: usize,
    values: Vec<f32>, // lat_rows*lat_cols*3
}

impl ValueNoise {
    fn new(h: usize, w: usize, seed: u64) -> Self {
        let lat_rows = h / NOISE_LATTICE_PX + 2;
        let lat_cols = w / NOISE_LATTICE_PX + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..lat_rows * lat_cols * 3)
            .map(|_| rng.gen_range(-1.0f32..=1.0))
            .collect();
        ValueNoise {
            lat_rows,
            lat_cols,
            values,
        }
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        let fy = y as f32 / NOISE_LATTICE_PX as f32;
        let fx = x as f32 / NOISE_LATTICE_PX as f32;
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f32, fx - ix as f32);
        let iy1 = (iy + 1).min(self.lat_rows - 1);
        let ix1 = (ix + 1).min(self.lat_cols - 1);
        let v = |r: usize, col: usize| self.values[(r * self.lat_cols + col) * 3 + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix1) * tx;
        let bot = v(iy1, ix) * (1.0 - tx) + v(iy1, ix1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Paint one species cell into `img` at (y0, x0), `size` pixels square.
/// Stripe phase uses image-global coordinates so the texture continues
/// across neighboring cells of the same species, the way a plant's
/// structure continues across patches; noise comes from `noise_seed`.
fn paint_species(img: &mut Raster, y0: usize, x0: usize, size: usize, spec: &SpeciesSpec, noise_seed: u64) {
    let noise = ValueNoise::new(size, size, noise_seed);
    let vertical = (spec.species_id / 2) % 2 == 0;
    for y in 0..size {
        for x in 0..size {
            let coord = if vertical { x0 + x } else { y0 + y };
            let phase = (coord % spec.stripe_period) as f32 / spec.stripe_period as f32;
            let stripe = 0.72 + 0.28 * (2.0 * std::f32::consts::PI * phase).sin();
            for c in 0..3 {
                let v = spec.base_color[c] * stripe + spec.noise_amplitude * noise.at(y, x, c);
                img.set(y0 + y, x0 + x, c, v);
            }
        }
    }
}

fn paint_background(img: &mut Raster, y0: usize, x0: usize, size: usize, noise_seed: u64) {
    let noise = ValueNoise::new(size, size, noise_seed);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img.set(y0 + y, x0 + x, c, BG_LEVEL + 0.04 * noise.at(y, x, c));
            }
        }
    }
}

fn paint_frame(img: &mut Raster, y0: usize, x0: usize, size: usize) {
    for y in 0..size {
        for x in 0..size {
            let odd = ((y0 + y) / FRAME_CHECKER_PX + (x0 + x) / FRAME_CHECKER_PX) % 2 == 1;
            let v = if odd { 0.97 } else { 0.03 };
            for c in 0..3 {
                img.set(y0 + y, x0 + x, c, v);
            }
        }
    }
}

pub fn gen_training_set(
    n_species: u32,
    tiles_per_species: usize,
    tile_px: usize,
    seed: u64,
) -> Result<Vec<(Raster, u32)>> {
    if n_species < 2 || tiles_per_species < 1 || tile_px < 8 {
        return Err(Error::Argument(format!(
            "invalid training-set sizes: n_species={n_species} tiles_per_species={tiles_per_species} tile_px={tile_px}"
        )));
    }
    let table = species_table(n_species, TRAIN_NOISE_AMPLITUDE);
    let mut out = Vec::with_capacity(n_species as usize * tiles_per_species);
    for spec in &table {
        for i in 0..tiles_per_species {
            let mut img = Raster::new(tile_px, tile_px);
            let noise_seed = mix_seed(seed, (spec.species_id as u64) << 32 | i as u64);
            paint_species(&mut img, 0, 0, tile_px, spec, noise_seed);
            out.push((img, spec.species_id));
        }
    }
    Ok(out)
}

pub fn render_plot(spec: &PlotSpec, species_table: &[SpeciesSpec], tile_px: usize) -> Result<Raster> {
    let mut img = Raster::new(spec.grid_rows * tile_px, spec.grid_cols * tile_px);
    for (idx, cell) in spec.cell_assignments.iter().enumerate() {
        let (r, c) = (idx / spec.grid_cols, idx % spec.grid_cols);
        let (y0, x0) = (r * tile_px, c * tile_px);
        let noise_seed = mix_seed(spec.seed, idx as u64);
        match cell {
            Cell::Frame => paint_frame(&mut img, y0, x0, tile_px),
            Cell::Background => paint_background(&mut img, y0, x0, tile_px, noise_seed),
            Cell::Species(id) => {
                let sp = species_table
                    .iter()
                    .find(|s| s.species_id == *id)
                    .ok_or_else(|| Error::Lookup(format!("species id {id} not in table")))?;
                paint_species(&mut img, y0, x0, tile_px, sp, noise_seed);
            }
        }
    }
    Ok(img)
}

pub fn ground_truth_of(spec: &PlotSpec) -> GroundTruth {
    let mut species_set = BTreeSet::new();
    let mut mask = vec![false; spec.grid_rows * spec.grid_cols];
    for (idx, cell) in spec.cell_assignments.iter().enumerate() {
        if let Cell::Species(id) = cell {
            species_set.insert(*id);
            mask[idx] = true;
        }
    }
    GroundTruth {
        quadrat_id: spec.quadrat_id.clone(),
        species_set,
        grid_rows: spec.grid_rows,
        grid_cols: spec.grid_cols,
        foreground_mask: mask,
    }
}

/// Build one plot's cell assignments: frame border, interior cells turn
/// into a species with probability `fg_density`, species identity taken
/// from a Voronoi field over a few seeded sites (so species form patches).
fn gen_plot_spec(
    transect_id: u32,
    quadrat_id: String,
    grid_rows: usize,
    grid_cols: usize,
    fg_density: f64,
    n_species: u32,
    plot_seed: u64,
) -> PlotSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(plot_seed);
    let n_sites = rng.gen_range(3..=5usize);
    // distinct species per site when possible
    let mut pool: Vec<u32> = (0..n_species).collect();
    let mut sites = Vec::with_capacity(n_sites);
    for _ in 0..n_sites {
        let sid = if pool.is_empty() {
            rng.gen_range(0..n_species)
        } else {
            pool.swap_remove(rng.gen_range(0..pool.len()))
        };
        let sr = rng.gen_range(1..grid_rows - 1) as f64;
        let sc = rng.gen_range(1..grid_cols - 1) as f64;
        sites.push((sr, sc, sid));
    }
    let mut cells = Vec::with_capacity(grid_rows * grid_cols);
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            let border = r == 0 || c == 0 || r == grid_rows - 1 || c == grid_cols - 1;
            if border {
                cells.push(Cell::Frame);
                continue;
            }
            if rng.gen_range(0.0..1.0) < fg_density {
                let nearest = sites
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - r as f64).powi(2) + (a.1 - c as f64).powi(2);
                        let db = (b.0 - r as f64).powi(2) + (b.1 - c as f64).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                cells.push(Cell::Species(nearest.2));
            } else {
                cells.push(Cell::Background);
            }
        }
    }
    // the invariant demands at least one species cell
    if !cells.iter().any(|c| matches!(c, Cell::Species(_))) {
        let mid = (grid_rows / 2) * grid_cols + grid_cols / 2;
        cells[mid] = Cell::Species(sites[0].2);
    }
    PlotSpec {
        transect_id,
        quadrat_id,
        grid_rows,
        grid_cols,
        cell_assignments: cells,
        seed: plot_seed,
    }
}

/// Species table as it appears in plots: plot noise amplitude and stripe
/// periods coarsened by [`PLOT_TEXTURE_SCALE`].
pub fn plot_species_table(n_species: u32) -> Vec<SpeciesSpec> {
    let mut table = species_table(n_species, PLOT_NOISE_AMPLITUDE);
    for sp in &mut table {
        sp.stripe_period *= PLOT_TEXTURE_SCALE;
    }
    table
}

/// Plot layouts (no pixels): cell assignments plus ground truth for every
/// quadrat, so callers can render one plot at a time.
pub fn gen_plot_specs(
    n_transects: usize,
    quadrats_per_transect: usize,
    grid_rows: usize,
    grid_cols: usize,
    fg_density: f64,
    n_species: u32,
    seed: u64,
) -> Result<Vec<(PlotSpec, GroundTruth)>> {
    if grid_rows < 3 || grid_cols < 3 {
        return Err(Error::Argument(format!(
            "grid {grid_rows}x{grid_cols} too small for a frame plus interior"
        )));
    }
    if !(fg_density > 0.0 && fg_density < 1.0) {
        return Err(Error::Argument(format!(
            "fg_density {fg_density} outside (0,1)"
        )));
    }
    let mut out = Vec::with_capacity(n_transects * quadrats_per_transect);
    for t in 0..n_transects {
        for q in 0..quadrats_per_transect {
            let qid = format!("t{t:03}q{q:03}");
            let plot_seed = mix_seed(seed, (t as u64) << 32 | q as u64);
            let spec = gen_plot_spec(
                t as u32,
                qid,
                grid_rows,
                grid_cols,
                fg_density,
                n_species,
                plot_seed,
            );
            let truth = ground_truth_of(&spec);
            out.push((spec, truth));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn gen_test_plots(
    n_transects: usize,
    quadrats_per_transect: usize,
    grid_rows: usize,
    grid_cols: usize,
    fg_density: f64,
    n_species: u32,
    tile_px: usize,
    seed: u64,
) -> Result<Vec<(PlotSpec, Raster, GroundTruth)>> {
    let table = plot_species_table(n_species);
    gen_plot_specs(
        n_transects,
        quadrats_per_transect,
        grid_rows,
        grid_cols,
        fg_density,
        n_species,
        seed,
    )?
    .into_iter()
    .map(|(spec, truth)| {
        let raster = render_plot(&spec, &table, tile_px)?;
        Ok((spec, raster, truth))
    })
    .collect()
}
