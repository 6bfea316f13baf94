//! Pixel-aligned Gaussian decoding: one primitive per pixel per stage.

use std::rc::Rc;

use hgs_autodiff::{sigmoid, Session, Tensor, Var};
use nalgebra::{Matrix3, UnitQuaternion, Quaternion, Vector3};

use crate::camera::Camera;
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{self, Init, ParamSpecs};
use crate::render::{SplatVars, Splats};
use crate::sh;

/// Contiguous run of primitives decoded from one stage's `views x h x w`
/// pixel grid, in view-major, row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageBlock {
    pub stage: usize,
    pub start: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

impl StageBlock {
    pub fn len(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Primitive parameters as graph variables. Scales are positive world
/// extents, rotations unit quaternions `(w, x, y, z)`, opacities in `(0, 1)`.
#[derive(Clone)]
pub struct GaussianVars {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub sh: Var,
    pub sh_degree: usize,
    pub blocks: Vec<StageBlock>,
}

impl GaussianVars {
    pub fn len(&self) -> usize {
        self.opacities.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn splat_vars(&self) -> SplatVars<'_> {
        SplatVars {
            means: &self.means,
            scales: &self.scales,
            rotations: &self.rotations,
            opacities: &self.opacities,
            sh: &self.sh,
            sh_degree: self.sh_degree,
        }
    }

    /// Concatenate sets, shifting block offsets.
    pub fn concat(parts: &[GaussianVars]) -> Result<GaussianVars> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::Input("nothing to concatenate".into()))?;
        let cat = |f: fn(&GaussianVars) -> &Var| -> Result<Var> {
            Ok(Var::concat(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>(), 0)?)
        };
        let mut blocks = Vec::new();
        let mut offset = 0;
        for p in parts {
            if p.sh_degree != first.sh_degree {
                return Err(CoreError::Input("sets disagree in sh degree".into()));
            }
            blocks.extend(p.blocks.iter().map(|b| StageBlock {
                start: b.start + offset,
                ..*b
            }));
            offset += p.len();
        }
        Ok(GaussianVars {
            means: cat(|p| &p.means)?,
            scales: cat(|p| &p.scales)?,
            rotations: cat(|p| &p.rotations)?,
            opacities: cat(|p| &p.opacities)?,
            sh: cat(|p| &p.sh)?,
            sh_degree: first.sh_degree,
            blocks,
        })
    }

    pub fn to_set(&self) -> GaussianSet {
        GaussianSet {
            means: self.means.value().clone(),
            scales: self.scales.value().clone(),
            rotations: self.rotations.value().clone(),
            opacities: self.opacities.value().clone(),
            sh: self.sh.value().clone(),
            sh_degree: self.sh_degree,
            blocks: self.blocks.clone(),
        }
    }
}

/// One decoded primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh: Vec<f64>,
    pub stage: usize,
}

impl GaussianPrimitive {
    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r.matrix() * s2 * r.matrix().transpose()
    }
}

/// Plain-value Gaussian set, the unit of export and statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Tensor,
    pub scales: Tensor,
    pub rotations: Tensor,
    pub opacities: Tensor,
    pub sh: Tensor,
    pub sh_degree: usize,
    pub blocks: Vec<StageBlock>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.opacities.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stage_of(&self, index: usize) -> usize {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&index))
            .map_or(0, |b| b.stage)
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        let kc = 3 * sh::num_coeffs(self.sh_degree);
        let v3 = |t: &Tensor| Vector3::from_column_slice(&t.data()[3 * i..3 * i + 3]);
        let q = &self.rotations.data()[4 * i..4 * i + 4];
        GaussianPrimitive {
            center: v3(&self.means),
            scale: v3(&self.scales),
            rotation: [q[0], q[1], q[2], q[3]],
            opacity: self.opacities.data()[i],
            sh: self.sh.data()[kc * i..kc * (i + 1)].to_vec(),
            stage: self.stage_of(i),
        }
    }

    pub fn splats(&self) -> Result<Splats> {
        Splats::new(
            Rc::new(self.means.clone()),
            Rc::new(self.scales.clone()),
            Rc::new(self.rotations.clone()),
            Rc::new(self.opacities.clone()),
            Rc::new(self.sh.clone()),
            self.sh_degree,
        )
    }

    /// Primitives of one stage, in set order.
    pub fn stage_indices(&self, stage: usize) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.stage == stage)
            .flat_map(|b| b.range())
            .collect()
    }
}

/// Output channels of the Gaussian head: opacity, scale, rotation, SH.
pub fn head_channels(sh_degree: usize) -> usize {
    1 + 3 + 4 + 3 * sh::num_coeffs(sh_degree)
}

/// Softplus of the scale bias: initial extent in units of the stage pixel
/// footprint.
const INITIAL_FOOTPRINT: f64 = 0.5;
const INITIAL_OPACITY: f64 = 0.1;

pub fn declare(specs: &mut ParamSpecs, cfg: &ModelConfig, stage: usize) {
    let p = format!("gs{stage}");
    let hh = cfg.head_hidden;
    let out = head_channels(cfg.sh_degree);
    specs.conv(&format!("{p}.h1"), 3, cfg.gs_channels + 3, hh);
    specs.conv(&format!("{p}.h2"), 1, hh, hh);
    specs.conv_gain(&format!("{p}.out"), 1, hh + 3, out, 0.1);
    let mut bias = vec![0.0; out];
    bias[0] = (INITIAL_OPACITY / (1.0 - INITIAL_OPACITY)).ln();
    let scale_bias = INITIAL_FOOTPRINT.exp_m1().ln();
    bias[1..4].fill(scale_bias);
    bias[4] = 1.0;
    specs.set_init(&format!("{p}.out.b"), Init::Values(bias));
}

/// Decode `features [N, h, w, C_gs]` and `depth [N, h, w]` into one
/// Gaussian per pixel. `cameras` must be scaled to `h x w`; `images` is the
/// input RGB area-downsampled to `h x w`.
///
/// The SH DC term carries a fixed skip of the pixel's own color, so an
/// untrained head starts from the input image rather than from gray.
pub fn predict_gaussians(
    s: &Session,
    cfg: &ModelConfig,
    stage: usize,
    features: &Var,
    depth: &Var,
    cameras: &[Camera],
    images: &Tensor,
) -> Result<GaussianVars> {
    let p = format!("gs{stage}");
    let [n, h, w, _] = features.shape()[..] else {
        return Err(CoreError::Input("features must be NHWC".into()));
    };
    if depth.shape() != [n, h, w] || images.shape() != [n, h, w, 3] || cameras.len() != n {
        return Err(CoreError::Input(format!(
            "stage {stage}: features {:?}, depth {:?}, images {:?} and {} cameras disagree",
            features.shape(),
            depth.shape(),
            images.shape(),
            cameras.len()
        )));
    }
    for c in cameras {
        if (c.intrinsics.height, c.intrinsics.width) != (h, w) {
            return Err(CoreError::Input(format!("stage {stage}: cameras not scaled to {h}x{w}")));
        }
    }
    let m = n * h * w;
    let k = sh::num_coeffs(cfg.sh_degree);
    let centered = features.constant_like(images.map(|v| v - 0.5));

    let x = Var::concat(&[features.clone(), centered.clone()], 3)?;
    let hidden = nn::conv_relu(s, &format!("{p}.h1"), &x, 1)?;
    let hidden = nn::conv_relu(s, &format!("{p}.h2"), &hidden, 1)?;
    let out = nn::conv(s, &format!("{p}.out"), &Var::concat(&[hidden, centered.clone()], 3)?, 1)?;

    let opacities = out.slice(3, 0, 1)?.sigmoid()?.reshape(&[m])?;

    let d = depth.reshape(&[n, h, w, 1])?;
    let inv_fx = Tensor::new(&[n, 1, 1, 1], cameras.iter().map(|c| 1.0 / c.intrinsics.fx).collect())?;
    let scales = out
        .slice(3, 1, 4)?
        .softplus()?
        .mul(&d)?
        .mul(&d.constant_like(inv_fx))?
        .reshape(&[m, 3])?;

    let raw_q = out.slice(3, 4, 8)?;
    let inv_norm = raw_q
        .square()?
        .sum_axis(3, true)?
        .add_scalar(1e-24)?
        .log()?
        .mul_scalar(-0.5)?
        .exp()?;
    let rotations = raw_q.mul(&inv_norm)?.reshape(&[m, 4])?;

    let dc_skip = centered.mul_scalar(1.0 / sh::C0)?;
    let sh_raw = out.slice(3, 8, 8 + 3 * k)?;
    let dc = sh_raw.slice(3, 0, 3)?.add(&dc_skip)?;
    let sh_all = if k > 1 {
        Var::concat(&[dc, sh_raw.slice(3, 3, 3 * k)?], 3)?
    } else {
        dc
    };
    let sh_all = sh_all.reshape(&[m, 3 * k])?;

    let mut rays = Tensor::zeros(&[n, h, w, 3]);
    let mut origins = Tensor::zeros(&[n, 1, 1, 3]);
    for (v, cam) in cameras.iter().enumerate() {
        let rt = cam.pose.rotation().transpose();
        origins.data_mut()[3 * v..3 * v + 3].copy_from_slice(cam.pose.center().as_slice());
        for y in 0..h {
            for x in 0..w {
                let r = rt * cam.intrinsics.ray(x as f64 + 0.5, y as f64 + 0.5);
                let o = ((v * h + y) * w + x) * 3;
                rays.data_mut()[o..o + 3].copy_from_slice(r.as_slice());
            }
        }
    }
    let means = d
        .mul(&d.constant_like(rays))?
        .add(&d.constant_like(origins))?
        .reshape(&[m, 3])?;

    Ok(GaussianVars {
        means,
        scales,
        rotations,
        opacities,
        sh: sh_all,
        sh_degree: cfg.sh_degree,
        blocks: vec![StageBlock {
            stage,
            start: 0,
            views: n,
            height: h,
            width: w,
        }],
    })
}

/// Opacity in `(0, 1)` for a logit.
pub fn opacity_from_logit(logit: f64) -> f64 {
    sigmoid(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};

    fn setup(stage: usize, h: usize, w: usize) -> (ModelConfig, hgs_autodiff::ParamStore, Vec<Camera>) {
        let cfg = ModelConfig::default();
        let mut specs = ParamSpecs::default();
        declare(&mut specs, &cfg, stage);
        let cam = Camera {
            intrinsics: Intrinsics::new(w as f64, h as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            pose: Pose::look_at(Vector3::new(0.3, -0.2, -1.0), Vector3::zeros(), Vector3::y()).unwrap(),
        };
        (cfg, specs.initialise(5), vec![Camera { pose: Pose::identity(), ..cam }, cam])
    }

    fn decode(stage: usize, h: usize, w: usize, depth: f64) -> (GaussianVars, Vec<Camera>) {
        let (cfg, store, cams) = setup(stage, h, w);
        let s = Session::new(&store, false);
        let feat = s.constant(Tensor::from_fn(&[2, h, w, cfg.gs_channels], |i| (i as f64 * 0.61).sin()));
        let depth = s.constant(Tensor::full(&[2, h, w], depth));
        let img = Tensor::from_fn(&[2, h, w, 3], |i| (i % 11) as f64 / 11.0);
        (predict_gaussians(&s, &cfg, stage, &feat, &depth, &cams, &img).unwrap(), cams)
    }

    #[test]
    fn one_primitive_per_pixel() {
        let (g, _) = decode(1, 4, 6, 2.0);
        assert_eq!(g.len(), 2 * 4 * 6);
        assert_eq!(g.blocks[0].len(), 48);
    }

    #[test]
    fn principal_pixel_lies_on_optical_axis() {
        let (g, cams) = decode(2, 4, 4, 3.0);
        // pixel (2, 2) has center (2.5, 2.5); cx = 2 so shift the check to
        // camera coordinates instead of assuming x = y = 0.
        let set = g.to_set();
        let i = 2 * 4 + 2;
        let p = set.primitive(i).center;
        let cam_p = cams[0].pose.to_camera(&p);
        assert!((cam_p.z - 3.0).abs() < 1e-12);
        assert!((cam_p.x - 0.5 * 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn quaternions_unit_and_covariances_positive_definite() {
        let (g, _) = decode(3, 4, 4, 1.5);
        let set = g.to_set();
        for i in 0..set.len() {
            let p = set.primitive(i);
            let n: f64 = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            let eig = p.covariance().symmetric_eigenvalues();
            assert!(eig.min() > 0.0);
            assert!(p.opacity > 0.0 && p.opacity < 1.0);
        }
    }

    #[test]
    fn concat_shifts_blocks() {
        let (cfg, store, cams) = setup(1, 2, 2);
        let s = Session::new(&store, false);
        let part = |h: usize, w: usize| {
            let cams: Vec<Camera> = cams.iter().map(|c| c.rescaled(w, h)).collect();
            let feat = s.constant(Tensor::zeros(&[2, h, w, cfg.gs_channels]));
            let depth = s.constant(Tensor::full(&[2, h, w], 1.0));
            predict_gaussians(&s, &cfg, 1, &feat, &depth, &cams, &Tensor::zeros(&[2, h, w, 3])).unwrap()
        };
        let mut b = part(4, 4);
        b.blocks[0].stage = 2;
        let c = GaussianVars::concat(&[part(2, 2), b]).unwrap();
        assert_eq!(c.len(), 8 + 32);
        assert_eq!(c.blocks[1].start, 8);
        assert_eq!(c.to_set().stage_of(8), 2);
        assert_eq!(c.to_set().stage_indices(1), (0..8).collect::<Vec<_>>());
    }
}
