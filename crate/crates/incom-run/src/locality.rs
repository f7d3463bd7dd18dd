use std::path::Path;

use image::{ImageBuffer, Rgb};
use incom_core::nn::{Params, Session};
use incom_policy::{InComModel, PolicyConfig};

use crate::RunError;

pub const N_QUERIES: usize = 5;
const LEVELS: usize = 3;

/// Mean in-radius attention mass per level, averaged over the query set and
/// all probe images, plus everything needed to re-render the heatmap grid.
#[derive(Debug)]
pub struct LocalityReport {
    /// query pixels (y, x), center first
    pub queries: [(usize, usize); N_QUERIES],
    pub radius_px: f64,
    pub per_level_mass: [f64; LEVELS],
    pub n_images: usize,
}

/// Center plus four near-corner probes, kept off the boundary patches.
pub fn query_pixels(h: usize, w: usize) -> [(usize, usize); N_QUERIES] {
    [
        (h / 2, w / 2),
        (h / 8, w / 8),
        (h / 8, w - 1 - w / 8),
        (h - 1 - h / 8, w / 8),
        (h - 1 - h / 8, w - 1 - w / 8),
    ]
}

/// Fraction of one normalized attention row landing on same-view patches
/// whose centers lie within `radius_px` of the query patch center.
pub fn in_radius_mass(
    row: &[f64],
    coords: &[(usize, usize, usize)],
    patch_px: usize,
    query: usize,
    radius_px: f64,
) -> f64 {
    assert_eq!(row.len(), coords.len());
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (qv, qy, qx) = coords[query];
    let center = |c: usize| (c as f64 + 0.5) * patch_px as f64;
    let (cy, cx) = (center(qy), center(qx));
    let mut mass = 0.0;
    for (j, &(v, y, x)) in coords.iter().enumerate() {
        if v != qv {
            continue;
        }
        let (dy, dx) = (center(y) - cy, center(x) - cx);
        if (dy * dy + dx * dx).sqrt() <= radius_px + 1e-9 {
            mass += row[j];
        }
    }
    mass / total
}

fn token_at(coords: &[(usize, usize, usize)], view: usize, py: usize, px: usize) -> usize {
    coords
        .iter()
        .position(|&(v, y, x)| v == view && y == py && x == px)
        .expect("query patch must exist in the token grid")
}

/// Head-averaged, row-renormalized attention rows for the five query patches
/// at every level, for one image stack.
fn probe_image(
    model: &InComModel,
    params: &Params<f32>,
    image: &[f32],
    queries: &[(usize, usize); N_QUERIES],
    cfg: &PolicyConfig,
) -> [[Vec<f64>; N_QUERIES]; LEVELS] {
    let enc = model.image_encoder();
    let mut s = Session::new(params);
    let ip = enc.forward(&mut s, &[image]);
    let mut rows: [[Vec<f64>; N_QUERIES]; LEVELS] = Default::default();
    for k in 0..LEVELS {
        let attn = s.tape.value(ip.attn[k]);
        let (heads, m, m2) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
        assert_eq!(m, m2);
        let coords = enc.token_coords(k);
        let patch_px = cfg.patch_sizes[0] << k;
        for (qi, &(py, px)) in queries.iter().enumerate() {
            let q = token_at(coords, 0, py / patch_px, px / patch_px);
            let mut row = vec![0f64; m];
            for h in 0..heads {
                let base = (h * m + q) * m;
                for j in 0..m {
                    row[j] += attn.data()[base + j] as f64;
                }
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for v in &mut row {
                    *v /= sum;
                }
            }
            rows[k][qi] = row;
        }
    }
    rows
}

fn colormap(v: f64) -> Rgb<u8> {
    // dark blue → yellow ramp, perceptually ordered enough for heatmaps
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v.powf(0.7)) as u8;
    let g = (235.0 * v) as u8;
    let b = (90.0 + 120.0 * (1.0 - v)) as u8;
    Rgb([r, g, b])
}

/// Appendix-B style probe: five query patches, per-level in-radius attention
/// mass, and a 3×5 heatmap grid PNG (levels down the rows, queries across).
pub fn attention_locality(
    model: &InComModel,
    params: &Params<f32>,
    images: &[Vec<f32>],
    queries: [(usize, usize); N_QUERIES],
    cfg: &PolicyConfig,
    radius_patches: usize,
    out_png: Option<&Path>,
) -> Result<LocalityReport, RunError> {
    assert!(!images.is_empty());
    for &(y, x) in &queries {
        if y >= cfg.img_h || x >= cfg.img_w {
            return Err(RunError::Config(format!("query ({y},{x}) outside the image")));
        }
    }
    let radius_px = (radius_patches * cfg.patch_sizes[0]) as f64;

    let mut mass = [0f64; LEVELS];
    let mut count = 0usize;
    let mut first_rows: Option<[[Vec<f64>; N_QUERIES]; LEVELS]> = None;
    for image in images {
        let rows = probe_image(model, params, image, &queries, cfg);
        for k in 0..LEVELS {
            let coords = model.image_encoder().token_coords(k);
            let patch_px = cfg.patch_sizes[0] << k;
            for (qi, &(py, px)) in queries.iter().enumerate() {
                let q = token_at(coords, 0, py / patch_px, px / patch_px);
                mass[k] += in_radius_mass(&rows[k][qi], coords, patch_px, q, radius_px);
            }
        }
        count += 1;
        if first_rows.is_none() {
            first_rows = Some(rows);
        }
    }
    let per_level_mass = mass.map(|m| m / (count * N_QUERIES) as f64);

    if let Some(path) = out_png {
        render_grid(model, first_rows.as_ref().unwrap(), &queries, cfg, path)?;
    }

    Ok(LocalityReport { queries, radius_px, per_level_mass, n_images: count })
}

/// 3 rows (levels S/M/D) × 5 columns (queries); each cell shows the query's
/// view-0 attention row on the level's patch grid, query patch outlined.
fn render_grid(
    model: &InComModel,
    rows: &[[Vec<f64>; N_QUERIES]; LEVELS],
    queries: &[(usize, usize); N_QUERIES],
    cfg: &PolicyConfig,
    path: &Path,
) -> Result<(), RunError> {
    let cell = 96usize;
    let pad = 6usize;
    let width = (cell + pad) * N_QUERIES + pad;
    let height = (cell + pad) * LEVELS + pad;
    let mut img = ImageBuffer::from_pixel(width as u32, height as u32, Rgb([24u8, 24, 28]));

    for k in 0..LEVELS {
        let coords = model.image_encoder().token_coords(k);
        let patch_px = cfg.patch_sizes[0] << k;
        let grid = cfg.img_h / patch_px;
        for qi in 0..N_QUERIES {
            let row = &rows[k][qi];
            let peak = row.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
            let (py, px) = (queries[qi].0 / patch_px, queries[qi].1 / patch_px);
            let ox = pad + qi * (cell + pad);
            let oy = pad + k * (cell + pad);
            for (j, &(v, y, x)) in coords.iter().enumerate() {
                if v != 0 {
                    continue;
                }
                let c = colormap(row[j] / peak);
                let x0 = ox + x * cell / grid;
                let y0 = oy + y * cell / grid;
                let x1 = ox + (x + 1) * cell / grid;
                let y1 = oy + (y + 1) * cell / grid;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        img.put_pixel(xx as u32, yy as u32, c);
                    }
                }
                if y == py && x == px {
                    for xx in x0..x1 {
                        img.put_pixel(xx as u32, y0 as u32, Rgb([255, 255, 255]));
                        img.put_pixel(xx as u32, (y1 - 1) as u32, Rgb([255, 255, 255]));
                    }
                    for yy in y0..y1 {
                        img.put_pixel(x0 as u32, yy as u32, Rgb([255, 255, 255]));
                        img.put_pixel((x1 - 1) as u32, yy as u32, Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| RunError::Config(format!("png write failed: {e}")))?;
    Ok(())
}
