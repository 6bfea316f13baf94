//! Bilinear resampling of NHWC maps. Both the resize and the free-form grid
//! sampler reduce to a gather of four weighted taps per output site; the
//! adjoint scatters with the same weights.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Four `(source site, weight)` pairs per output site. Zero-weight taps
/// point at site 0.
#[derive(Clone, Debug)]
pub struct Taps {
    pub sites: Vec<[(u32, f64); 4]>,
}

impl Taps {
    fn gather(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.sites.len() * channels];
        for (o, taps) in self.sites.iter().enumerate() {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for &(s, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let s = s as usize * channels;
                for (d, v) in dst.iter_mut().zip(&src[s..s + channels]) {
                    *d += w * v;
                }
            }
        }
        out
    }

    fn scatter(&self, grad: &[f64], channels: usize, n_src: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_src * channels];
        for (o, taps) in self.sites.iter().enumerate() {
            let g = &grad[o * channels..(o + 1) * channels];
            for &(s, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let s = s as usize * channels;
                for (d, v) in out[s..s + channels].iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

/// Source coordinate for align-corners-false resizing, clamped to the border
/// the way common frameworks do.
fn axis_taps(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

impl Var {
    /// Gather with precomputed taps. Input viewed as `[sites, C]` where `C`
    /// is the last extent; output shape must have `taps.sites.len() * C`
    /// elements and the same last extent.
    pub fn resample(&self, taps: Rc<Taps>, out_shape: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        let channels = *shape.last().ok_or_else(|| {
            TensorError::shape("resample", "input must have a channel axis")
        })?;
        if out_shape.last() != Some(&channels)
            || out_shape.iter().product::<usize>() != taps.sites.len() * channels
        {
            return Err(TensorError::shape(
                "resample",
                format!(
                    "{} taps with {channels} channels cannot fill {out_shape:?}",
                    taps.sites.len()
                ),
            ));
        }
        let n_src = self.value().numel() / channels.max(1);
        if taps.sites.iter().flatten().any(|&(s, _)| s as usize >= n_src) {
            return Err(TensorError::invalid("resample", "tap index out of range"));
        }
        let value = Tensor::new(out_shape, taps.gather(self.value().data(), channels))?;
        self.record(value, &[self], move |g, _| {
            let d = taps.scatter(g.data(), channels, n_src);
            vec![Some(Tensor::new(&shape, d).expect("input shape"))]
        })
    }

    /// Align-corners-false bilinear resize of `[N,H,W,C]`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(TensorError::shape(
                "bilinear_resize",
                format!("input must be NHWC, got {shape:?}"),
            ));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::invalid(
                "bilinear_resize",
                "extents must be at least 1",
            ));
        }
        if out_h == h && out_w == w {
            return self.record(self.value().clone(), &[self], |g, _| vec![Some(g.clone())]);
        }
        let ys: Vec<_> = (0..out_h).map(|y| axis_taps(y, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|x| axis_taps(x, w, out_w)).collect();
        let mut sites = Vec::with_capacity(n * out_h * out_w);
        for b in 0..n {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let site = |y: usize, x: usize| ((b * h + y) * w + x) as u32;
                    sites.push([
                        (site(y0, x0), (1.0 - fy) * (1.0 - fx)),
                        (site(y0, x1), (1.0 - fy) * fx),
                        (site(y1, x0), fy * (1.0 - fx)),
                        (site(y1, x1), fy * fx),
                    ]);
                }
            }
        }
        self.resample(Rc::new(Taps { sites }), &[n, out_h, out_w, c])
    }

    /// Bilinear sampling of `[B,H,W,C]` at continuous pixel coordinates
    /// (pixel `i` spans `[i, i+1)`, center `i + 0.5`). `points` is
    /// `[M, Ho, Wo, 2]` holding `(u, v)`, `source[m]` picks the batch entry
    /// sampled by output map `m`. Taps outside the map read zero.
    pub fn grid_sample(&self, source: &[usize], points: &Tensor) -> Result<Var> {
        let shape = self.shape().to_vec();
        let [b, h, w, c] = shape[..] else {
            return Err(TensorError::shape(
                "grid_sample",
                format!("input must be NHWC, got {shape:?}"),
            ));
        };
        let ps = points.shape();
        let [m, ho, wo, 2] = ps[..] else {
            return Err(TensorError::shape(
                "grid_sample",
                format!("points must be [M,Ho,Wo,2], got {ps:?}"),
            ));
        };
        if source.len() != m || source.iter().any(|&s| s >= b) {
            return Err(TensorError::invalid(
                "grid_sample",
                format!("need {m} source indices below {b}"),
            ));
        }
        let pd = points.data();
        let mut sites = Vec::with_capacity(m * ho * wo);
        for (mi, &src) in source.iter().enumerate() {
            for p in 0..ho * wo {
                let o = (mi * ho * wo + p) * 2;
                sites.push(bilinear_taps(pd[o], pd[o + 1], src, h, w));
            }
        }
        self.resample(Rc::new(Taps { sites }), &[m, ho, wo, c])
    }
}

/// Taps for sampling map `batch` of an `h x w` grid at pixel coordinate
/// `(u, v)` with zero padding.
pub fn bilinear_taps(u: f64, v: f64, batch: usize, h: usize, w: usize) -> [(u32, f64); 4] {
    let mut taps = [(0u32, 0.0); 4];
    if !u.is_finite() || !v.is_finite() {
        return taps;
    }
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (t, &(cx, cy, wgt)) in taps.iter_mut().zip(&corners) {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            *t = (((batch * h + cy as usize) * w + cx as usize) as u32, wgt);
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn same_size_resize_is_identity() {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[1, 3, 5, 2], |i| (i as f64).sin()));
        let y = x.bilinear_resize(3, 5).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn constant_survives_any_resize() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 4, 3], 0.3));
        for (h, w) in [(1, 1), (7, 3), (16, 16), (64, 64)] {
            let y = x.bilinear_resize(h, w).unwrap();
            assert!(y.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn grid_sample_at_centers_reads_pixels() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64));
        let pts = Tensor::new(&[1, 1, 2, 2], vec![2.5, 1.5, 0.5, 0.5]).unwrap();
        let y = x.grid_sample(&[0], &pts).unwrap();
        assert_eq!(y.value().data(), &[5.0, 0.0]);
    }

    #[test]
    fn grid_sample_outside_is_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 1]));
        let pts = Tensor::new(&[1, 1, 2, 2], vec![-3.0, 1.0, 1.0, 9.0]).unwrap();
        let y = x.grid_sample(&[0], &pts).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
    }
}
