//! Quarter-resolution depth from a plane-sweep correlation volume.

use hgs_autodiff::{Session, Tensor, Var};

use crate::camera::{plane_sweep_points, Camera};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{self, ParamSpecs};

/// Depth hypotheses, increasing, with exact endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCandidates {
    values: Vec<f64>,
    near: f64,
    far: f64,
}

impl DepthCandidates {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the candidate closest to `depth`.
    pub fn nearest(&self, depth: f64) -> usize {
        let mut best = 0;
        for (i, &d) in self.values.iter().enumerate() {
            if (d - depth).abs() < (self.values[best] - depth).abs() {
                best = i;
            }
        }
        best
    }
}

/// `r` depths evenly spaced in inverse depth between `near` and `far`.
pub fn sample_depth_candidates(near: f64, far: f64, r: usize) -> Result<DepthCandidates> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(CoreError::Config(format!(
            "depth bounds must satisfy 0 < near < far, got near={near} far={far}"
        )));
    }
    if r < 2 {
        return Err(CoreError::Config(format!("need at least 2 depth candidates, got {r}")));
    }
    let (dn, df) = (1.0 / near, 1.0 / far);
    let mut values: Vec<f64> = (0..r)
        .map(|k| 1.0 / (dn + (df - dn) * k as f64 / (r - 1) as f64))
        .collect();
    values[0] = near;
    values[r - 1] = far;
    Ok(DepthCandidates { values, near, far })
}

/// Correlation volume `[N, h, w, R]` of stage-1 features `[N, h, w, C]`.
///
/// Entry `(i, y, x, k)` is the mean over views `j != i` of the channel dot
/// product between view `i`'s feature and view `j`'s feature warped through
/// the plane at candidate depth `k`, divided by `sqrt(C)`. `cameras` must be
/// scaled to feature resolution.
pub fn build_cost_volume(features: &Var, cameras: &[Camera], cands: &DepthCandidates) -> Result<Var> {
    let [n, h, w, c] = features.shape()[..] else {
        return Err(CoreError::Input("features must be NHWC".into()));
    };
    if n < 2 || cameras.len() != n {
        return Err(CoreError::Input(format!(
            "cost volume needs N >= 2 views with one camera each, got {n} views and {} cameras",
            cameras.len()
        )));
    }
    for cam in cameras {
        if (cam.intrinsics.height, cam.intrinsics.width) != (h, w) {
            return Err(CoreError::Input("cameras are not scaled to feature resolution".into()));
        }
    }
    let r = cands.len();
    let maps = n * (n - 1) * r;
    let mut points = Tensor::zeros(&[maps, h, w, 2]);
    let mut source = Vec::with_capacity(maps);
    let plane = h * w * 2;
    let mut m = 0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for &d in cands.values() {
                let p = plane_sweep_points(&cameras[i], &cameras[j], d);
                points.data_mut()[m * plane..(m + 1) * plane].copy_from_slice(p.data());
                source.push(j);
                m += 1;
            }
        }
    }
    let warped = features
        .grid_sample(&source, &points)?
        .reshape(&[n, n - 1, r, h, w, c])?;
    let reference = features.reshape(&[n, 1, 1, h, w, c])?;
    let corr = warped.mul(&reference)?.sum_axis(5, false)?.mean_axis(1, false)?;
    Ok(corr.mul_scalar(1.0 / (c as f64).sqrt())?.transpose(&[0, 2, 3, 1])?)
}

/// Softmax expectation of the candidates: `[N, h, w, R]` logits to
/// `[N, h, w]` depth.
pub fn depth_from_logits(logits: &Var, cands: &DepthCandidates) -> Result<Var> {
    let r = cands.len();
    if logits.shape().last() != Some(&r) {
        return Err(CoreError::Input(format!(
            "logits end in {:?}, expected {r} candidates",
            logits.shape().last()
        )));
    }
    let v = logits.constant_like(Tensor::new(&[r], cands.values().to_vec())?);
    let axis = logits.shape().len() - 1;
    Ok(logits.softmax(axis)?.mul(&v)?.sum_axis(axis, false)?)
}

pub fn declare(specs: &mut ParamSpecs, cfg: &ModelConfig) {
    let r = cfg.depth_candidates;
    specs.layer_norm("depth.norm_volume", r);
    specs.layer_norm("depth.norm_features", cfg.feature_channels);
    specs.conv("depth.refine1", 3, r + cfg.feature_channels, cfg.refine_hidden);
    specs.conv_gain("depth.refine2", 3, cfg.refine_hidden, r + cfg.gs_channels, 1.0);
}

/// Refine the volume together with the stage-1 features into per-pixel
/// candidate logits and Gaussian features. Returns depth `[N, h, w]` and
/// Gaussian features `[N, h, w, C_gs]`.
///
/// Raw correlations grow with feature magnitude and reach the tens, so both
/// inputs are layer-normalised per pixel before the CNN.
pub fn estimate_depth_stage1(
    s: &Session,
    cfg: &ModelConfig,
    volume: &Var,
    features: &Var,
    cands: &DepthCandidates,
) -> Result<(Var, Var)> {
    let r = cands.len();
    let x = Var::concat(
        &[
            nn::layer_norm(s, "depth.norm_volume", volume)?,
            nn::layer_norm(s, "depth.norm_features", features)?,
        ],
        3,
    )?;
    let hidden = nn::conv_relu(s, "depth.refine1", &x, 1)?;
    let out = nn::conv(s, "depth.refine2", &hidden, 1)?;
    let logits = out.slice(3, 0, r)?;
    let gs = out.slice(3, r, r + cfg.gs_channels)?;
    Ok((depth_from_logits(&logits, cands)?, gs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hgs_autodiff::Graph;

    #[test]
    fn two_candidates_are_the_bounds() {
        let c = sample_depth_candidates(0.5, 7.0, 2).unwrap();
        assert_eq!(c.values(), &[0.5, 7.0]);
    }

    #[test]
    fn inverse_depth_spacing() {
        let c = sample_depth_candidates(1.0, 3.0, 3).unwrap();
        assert_eq!(c.values()[0], 1.0);
        assert!((c.values()[1] - 1.5).abs() < 1e-15);
        assert_eq!(c.values()[2], 3.0);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(sample_depth_candidates(0.0, 1.0, 4).is_err());
        assert!(sample_depth_candidates(2.0, 1.0, 4).is_err());
        assert!(sample_depth_candidates(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn one_hot_logits_recover_candidate() {
        let c = sample_depth_candidates(1.0, 10.0, 8).unwrap();
        let g = Graph::new();
        for k in 0..8 {
            let logits = g.constant(Tensor::from_fn(&[1, 1, 1, 8], |i| if i == k { 35.0 } else { 0.0 }));
            let d = depth_from_logits(&logits, &c).unwrap();
            assert!((d.value().data()[0] - c.values()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_give_mean_depth() {
        let c = sample_depth_candidates(1.0, 4.0, 5).unwrap();
        let g = Graph::new();
        let d = depth_from_logits(&g.constant(Tensor::zeros(&[1, 1, 1, 5])), &c).unwrap();
        let mean = c.values().iter().sum::<f64>() / 5.0;
        assert!((d.value().data()[0] - mean).abs() < 1e-12);
    }
}
