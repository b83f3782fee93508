//! Raster manipulation for the pipeline: bicubic resize to the working
//! resolution, tiling into non-overlapping patches, and window assembly
//! around a center patch. Rasters are row-major RGB with values in [0,1].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut r = Raster::new(height, width);
        for px in r.data.chunks_exact_mut(CHANNELS) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v.clamp(0.0, 1.0);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Raster {
        debug_assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut out = Raster::new(h, w);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * CHANNELS;
            let dst = y * w * CHANNELS;
            out.data[dst..dst + w * CHANNELS].copy_from_slice(&self.data[src..src + w * CHANNELS]);
        }
        out
    }
}

/// Row-major grid of non-overlapping square tiles cut from a raster.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub tiles: Vec<Raster>,
}

/// Grid dimensions a raster of `h`×`w` splits into at the given patch size.
pub fn tile_dims(h: usize, w: usize, patch_px: usize) -> Result<(usize, usize)> {
    if patch_px == 0 || h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::Argument(format!(
            "raster {h}x{w} not divisible by patch size {patch_px}"
        )));
    }
    Ok((h / patch_px, w / patch_px))
}

pub fn tile(img: &Raster, patch_px: usize) -> Result<TileGrid> {
    let (rows, cols) = tile_dims(img.height, img.width, patch_px)?;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push(img.crop(r * patch_px, c * patch_px, patch_px, patch_px));
        }
    }
    Ok(TileGrid {
        rows,
        cols,
        patch_px,
        tiles,
    })
}

/// Inverse of [`tile`]: paste tiles back into one raster.
pub fn stitch(grid: &TileGrid) -> Raster {
    let p = grid.patch_px;
    let mut out = Raster::new(grid.rows * p, grid.cols * p);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let t = &grid.tiles[r * grid.cols + c];
            for y in 0..p {
                let dst = ((r * p + y) * out.width + c * p) * CHANNELS;
                let src = y * p * CHANNELS;
                out.data[dst..dst + p * CHANNELS].copy_from_slice(&t.data[src..src + p * CHANNELS]);
            }
        }
    }
    out
}

/// Composite of the k×k tile window around `center_index`. Windows that
/// would cross the grid boundary are shifted inward, so the center tile
/// may sit off-center near edges.
pub fn assemble_grid(grid: &TileGrid, center_index: usize, k: usize) -> Result<Raster> {
    if k % 2 == 0 {
        return Err(Error::Argument(format!("window size {k} must be odd")));
    }
    if k > grid.rows || k > grid.cols {
        return Err(Error::Argument(format!(
            "window size {k} exceeds grid {}x{}",
            grid.rows, grid.cols
        )));
    }
    if center_index >= grid.rows * grid.cols {
        return Err(Error::Argument(format!(
            "center index {center_index} out of range for {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let (cr, cc) = (center_index / grid.cols, center_index % grid.cols);
    let half = k / 2;
    let r0 = cr.saturating_sub(half).min(grid.rows - k);
    let c0 = cc.saturating_sub(half).min(grid.cols - k);
    let mut window = Vec::with_capacity(k * k);
    for r in r0..r0 + k {
        for c in c0..c0 + k {
            window.push(grid.tiles[r * grid.cols + c].clone());
        }
    }
    Ok(stitch(&TileGrid {
        rows: k,
        cols: k,
        patch_px: grid.patch_px,
        tiles: window,
    }))
}

// Catmull-Rom kernel (a = -0.5).
#[inline]
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resampling with the Catmull-Rom kernel and edge-clamped
/// sampling; output clamped to [0,1]. Center-aligned coordinate mapping.
pub fn resize_bicubic(img: &Raster, out_h: usize, out_w: usize) -> Result<Raster> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("resize target must be nonzero".into()));
    }
    let mut out = Raster::new(out_h, out_w);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor() as isize;
        let mut wy = [0.0f64; 4];
        for (i, w) in wy.iter_mut().enumerate() {
            *w = cubic_weight(fy - (y0 - 1 + i as isize) as f64);
        }
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor() as isize;
            let mut wx = [0.0f64; 4];
            for (i, w) in wx.iter_mut().enumerate() {
                *w = cubic_weight(fx - (x0 - 1 + i as isize) as f64);
            }
            let mut acc = [0.0f64; CHANNELS];
            for (i, wyi) in wy.iter().enumerate() {
                let yy = (y0 - 1 + i as isize).clamp(0, img.height as isize - 1) as usize;
                for (j, wxj) in wx.iter().enumerate() {
                    let xx = (x0 - 1 + j as isize).clamp(0, img.width as isize - 1) as usize;
                    let w = wyi * wxj;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += w * img.get(yy, xx, c) as f64;
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(oy, ox, c, a.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

#[inline]
fn quantize(v: f32) -> u8 {
    // round-half-up
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub fn write_ppm(img: &Raster, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let hdr = format!("P6\n{} {}\n255\n", img.width, img.height);
    w.write_all(hdr.as_bytes()).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_pnm_header(r: &mut impl BufRead, path: &Path, magic: &str) -> Result<(usize, usize)> {
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            break;
        }
        let body = line.split('#').next().unwrap_or("");
        fields.extend(body.split_whitespace().map(str::to_owned));
    }
    if fields.len() < 4 || fields[0] != magic {
        return Err(Error::Format {
            path: path.into(),
            expected: magic.into(),
            msg: "bad header".into(),
        });
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Format {
            path: path.into(),
            expected: magic.into(),
            msg: format!("bad header field {s:?}"),
        })
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format {
            path: path.into(),
            expected: magic.into(),
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    Ok((h, w))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (h, w) = read_pnm_header(&mut r, path, "P6")?;
    let mut bytes = vec![0u8; h * w * CHANNELS];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(Raster {
        height: h,
        width: w,
        data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Grayscale PGM (P5) write; one byte per value, round-half-up quantization.
pub fn write_pgm(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Argument(format!(
            "pgm data length {} != {height}x{width}",
            values.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let hdr = format!("P5\n{width} {height}\n255\n");
    w.write_all(hdr.as_bytes()).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (h, w) = read_pnm_header(&mut r, path, "P5")?;
    let mut bytes = vec![0u8; h * w];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok((bytes.iter().map(|&b| b as f32 / 255.0).collect(), h, w))
}
