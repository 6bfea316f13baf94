//! Tile binning and front-to-back compositing.

use rayon::prelude::*;

use super::project::{ProjectedGaussian, ScreenGrad};
use super::RenderSettings;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Frame {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, tile: usize) -> Self {
        Self {
            width,
            height,
            tile,
            tiles_x: width.div_ceil(tile),
            tiles_y: height.div_ceil(tile),
        }
    }

    fn tile_pixels(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let xs = tx * self.tile..((tx + 1) * self.tile).min(self.width);
        let ys = ty * self.tile..((ty + 1) * self.tile).min(self.height);
        (ys, xs)
    }
}

/// Indices of visible primitives sorted front to back, ties broken by
/// source index.
pub(crate) fn depth_order(projected: &[Option<ProjectedGaussian>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..projected.len() as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (
            projected[a as usize].as_ref().expect("visible"),
            projected[b as usize].as_ref().expect("visible"),
        );
        pa.depth.total_cmp(&pb.depth).then(a.cmp(&b))
    });
    order
}

/// Per-tile primitive lists, each in depth order.
pub(crate) fn bin(projected: &[Option<ProjectedGaussian>], order: &[u32], frame: &Frame) -> Vec<Vec<u32>> {
    let mut tiles = vec![Vec::new(); frame.tiles_x * frame.tiles_y];
    for &i in order {
        let p = projected[i as usize].as_ref().expect("visible");
        if p.radius.is_infinite() {
            for t in tiles.iter_mut() {
                t.push(i);
            }
            continue;
        }
        let r = p.radius;
        let x0 = ((p.mean2d[0] - r - 0.5).ceil().max(0.0)) as usize;
        let x1 = (p.mean2d[0] + r - 0.5).floor().min(frame.width as f64 - 1.0);
        let y0 = ((p.mean2d[1] - r - 0.5).ceil().max(0.0)) as usize;
        let y1 = (p.mean2d[1] + r - 0.5).floor().min(frame.height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 / frame.tile..=y1 / frame.tile {
            for tx in x0 / frame.tile..=x1 / frame.tile {
                tiles[ty * frame.tiles_x + tx].push(i);
            }
        }
    }
    tiles
}

/// The part of a projected primitive the compositing loop reads, packed
/// densely for cache locality.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Footprint {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub power_floor: f64,
    pub radius: f64,
}

pub(crate) fn footprints(projected: &[Option<ProjectedGaussian>]) -> Vec<Footprint> {
    projected
        .iter()
        .map(|p| match p {
            Some(p) => Footprint {
                mean2d: p.mean2d,
                conic: p.conic,
                rgb: p.rgb,
                opacity: p.opacity,
                power_floor: p.power_floor,
                radius: p.radius,
            },
            None => Footprint::default(),
        })
        .collect()
}

/// Positions in the tile list of the primitives whose footprint reaches
/// pixel row `y`, still in depth order.
fn row_candidates(y: usize, list: &[u32], prims: &[Footprint], out: &mut Vec<u32>) {
    let py = y as f64 + 0.5;
    out.clear();
    out.extend(
        list.iter()
            .enumerate()
            .filter(|(_, &i)| {
                let p = &prims[i as usize];
                (py - p.mean2d[1]).abs() <= p.radius
            })
            .map(|(pos, _)| pos as u32),
    );
}

/// Composite one pixel over the tile-list positions `rows`. `visit(position,
/// raw_alpha, alpha, g, transmittance_before)` sees every accepted
/// contribution in order.
#[inline]
pub(crate) fn composite_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    rows: &[u32],
    prims: &[Footprint],
    s: &RenderSettings,
    mut visit: impl FnMut(usize, f64, f64, f64, f64),
) -> ([f64; 3], f64, u32) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut count = 0;
    for &pos in rows {
        let pos = pos as usize;
        let p = &prims[list[pos] as usize];
        if (px - p.mean2d[0]).abs() > p.radius {
            continue;
        }
        let dx = px - p.mean2d[0];
        let dy = py - p.mean2d[1];
        let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
        if power < p.power_floor {
            continue;
        }
        let g = power.exp();
        let raw = p.opacity * g;
        if raw < s.alpha_min {
            continue;
        }
        let a = raw.min(s.alpha_max);
        visit(pos, raw, a, g, t);
        for c in 0..3 {
            color[c] += t * a * p.rgb[c];
        }
        t *= 1.0 - a;
        count += 1;
        if t < s.transmittance_min {
            break;
        }
    }
    (color, t, count)
}

pub(crate) struct Image {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
}

pub(crate) fn rasterize(
    projected: &[Option<ProjectedGaussian>],
    tiles: &[Vec<u32>],
    frame: &Frame,
    s: &RenderSettings,
) -> Image {
    let prims = footprints(projected);
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, u32)>> = (0..tiles.len())
        .into_par_iter()
        .map(|ti| {
            let (ys, xs) = frame.tile_pixels(ti);
            let mut out = Vec::with_capacity(ys.len() * xs.len());
            let mut rows = Vec::new();
            for y in ys {
                row_candidates(y, &tiles[ti], &prims, &mut rows);
                for x in xs.clone() {
                    let (c, t, n) = composite_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        &tiles[ti],
                        &rows,
                        &prims,
                        s,
                        |_, _, _, _, _| {},
                    );
                    out.push((y * frame.width + x, c, t, n));
                }
            }
            out
        })
        .collect();
    let n = frame.width * frame.height;
    let mut img = Image {
        color: vec![0.0; n * 3],
        alpha: vec![0.0; n],
        contributors: vec![0; n],
    };
    for tile in per_tile {
        for (pix, c, t, count) in tile {
            for ch in 0..3 {
                img.color[pix * 3 + ch] = c[ch] + t * s.background[ch];
            }
            img.alpha[pix] = 1.0 - t;
            img.contributors[pix] = count;
        }
    }
    img
}

/// Screen-space gradients per primitive, accumulated tile by tile in a
/// fixed order.
pub(crate) fn rasterize_backward(
    projected: &[Option<ProjectedGaussian>],
    tiles: &[Vec<u32>],
    frame: &Frame,
    s: &RenderSettings,
    grad_color: &[f64],
) -> Vec<ScreenGrad> {
    let prims = footprints(projected);
    let per_tile: Vec<Vec<ScreenGrad>> = (0..tiles.len())
        .into_par_iter()
        .map(|ti| {
            let list = &tiles[ti];
            let mut local = vec![ScreenGrad::default(); list.len()];
            let mut hits: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
            let (ys, xs) = frame.tile_pixels(ti);
            let mut rows = Vec::new();
            for y in ys {
                row_candidates(y, list, &prims, &mut rows);
                for x in xs.clone() {
                    let pix = y * frame.width + x;
                    let gc = &grad_color[pix * 3..pix * 3 + 3];
                    if gc.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    composite_pixel(px, py, list, &rows, &prims, s, |pos, raw, a, g, t| {
                        hits.push((pos, raw, a, g, t))
                    });
                    // Color of everything behind the current contribution,
                    // relative to the transmittance just past it.
                    let mut behind = s.background;
                    for &(pos, raw, a, g, t) in hits.iter().rev() {
                        let p = &prims[list[pos] as usize];
                        let lg = &mut local[pos];
                        let mut dalpha = 0.0;
                        for c in 0..3 {
                            lg.rgb[c] += gc[c] * t * a;
                            dalpha += gc[c] * t * (p.rgb[c] - behind[c]);
                            behind[c] = a * p.rgb[c] + (1.0 - a) * behind[c];
                        }
                        if raw > s.alpha_max {
                            continue;
                        }
                        lg.opacity += dalpha * g;
                        let dpower = dalpha * p.opacity * g;
                        let dx = px - p.mean2d[0];
                        let dy = py - p.mean2d[1];
                        lg.mean2d[0] += dpower * (p.conic[0] * dx + p.conic[1] * dy);
                        lg.mean2d[1] += dpower * (p.conic[1] * dx + p.conic[2] * dy);
                        lg.conic[0] += dpower * (-0.5 * dx * dx);
                        lg.conic[1] += dpower * (-0.5 * dx * dy);
                        lg.conic[2] += dpower * (-0.5 * dy * dy);
                    }
                }
            }
            local
        })
        .collect();
    let mut out = vec![ScreenGrad::default(); projected.len()];
    for (ti, local) in per_tile.iter().enumerate() {
        for (pos, g) in local.iter().enumerate() {
            out[tiles[ti][pos] as usize].add(g);
        }
    }
    out
}
