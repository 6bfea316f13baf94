//! EWA projection of one primitive and its reverse-mode counterpart.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::RenderSettings;
use crate::camera::Camera;
use crate::sh;

/// Screen-space footprint of one primitive plus what the backward pass
/// needs to revisit the projection.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    pub source: usize,
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]` of the dilated screen covariance (pixels²).
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// Pixels farther than this from `mean2d` cannot pass the skip threshold.
    pub radius: f64,
    /// Exponents below this cannot pass the skip threshold either; lets the
    /// compositor skip `exp` for far-away pixels.
    pub power_floor: f64,
    pub(crate) t: Vector3<f64>,
    pub(crate) rot: Matrix3<f64>,
    pub(crate) quat: [f64; 4],
    pub(crate) quat_norm: f64,
    pub(crate) sigma: Matrix3<f64>,
    pub(crate) dir: [f64; 3],
    pub(crate) dist: f64,
    pub(crate) rgb_raw: [f64; 3],
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rot(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Derivative of the perspective map `t -> (fx·tx/tz, fy·ty/tz)`.
pub fn perspective_jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz2,
        0.0,
        fy * iz,
        -fy * t.y * iz2,
    )
}

/// One primitive's inputs, borrowed from the flat arrays.
pub(crate) struct PrimitiveRef<'a> {
    pub mean: &'a [f64],
    pub scale: &'a [f64],
    pub quat: &'a [f64],
    pub opacity: f64,
    pub sh: &'a [f64],
}

pub(crate) fn project(
    source: usize,
    p: &PrimitiveRef<'_>,
    sh_degree: usize,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<ProjectedGaussian> {
    let k = &camera.intrinsics;
    let w = camera.pose.rotation();
    let mean = Vector3::new(p.mean[0], p.mean[1], p.mean[2]);
    let t = camera.pose.to_camera(&mean);
    if !(t.z > settings.near) {
        return None;
    }
    let qn = (p.quat.iter().map(|v| v * v).sum::<f64>()).sqrt();
    if !(qn > 0.0) || !qn.is_finite() {
        return None;
    }
    let quat = [p.quat[0] / qn, p.quat[1] / qn, p.quat[2] / qn, p.quat[3] / qn];
    let rot = quat_to_rot(quat);
    let m = rot * Matrix3::from_diagonal(&Vector3::new(p.scale[0], p.scale[1], p.scale[2]));
    let sigma = m * m.transpose();
    let j = perspective_jacobian(&t, k.fx, k.fy);
    let tm = j * w;
    let cov = tm * sigma * tm.transpose();
    let (a, b, c) = (cov[(0, 0)] + settings.dilation, cov[(0, 1)], cov[(1, 1)] + settings.dilation);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean2d = [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy];

    let radius = if settings.full_coverage {
        f64::INFINITY
    } else {
        if !(p.opacity > settings.alpha_min) {
            return None;
        }
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let r = (2.0 * (p.opacity / settings.alpha_min).ln() * lambda_max).sqrt();
        let r = r * (1.0 + 1e-9) + 1e-9;
        // Pixel centers x + 0.5 within [mean - r, mean + r].
        let x0 = (mean2d[0] - r - 0.5).ceil().max(0.0);
        let x1 = (mean2d[0] + r - 0.5).floor().min(k.width as f64 - 1.0);
        let y0 = (mean2d[1] - r - 0.5).ceil().max(0.0);
        let y1 = (mean2d[1] + r - 0.5).floor().min(k.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        r
    };

    let center = camera.pose.center();
    let view = mean - center;
    let dist = view.norm();
    let dir = if dist > 0.0 {
        [view.x / dist, view.y / dist, view.z / dist]
    } else {
        [0.0, 0.0, 1.0]
    };
    let rgb_raw = sh::sh_to_rgb_raw(p.sh, sh_degree, dir);
    Some(ProjectedGaussian {
        source,
        mean2d,
        cov2d: [a, b, c],
        conic,
        depth: t.z,
        rgb: rgb_raw.map(|v| v.clamp(0.0, 1.0)),
        opacity: p.opacity,
        radius,
        power_floor: if settings.alpha_min > 0.0 {
            (settings.alpha_min / p.opacity).ln() - 1e-9
        } else {
            f64::NEG_INFINITY
        },
        t,
        rot,
        quat,
        quat_norm: qn,
        sigma,
        dir,
        dist,
        rgb_raw,
    })
}

/// Gradients arriving at one projected primitive from the compositor.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ScreenGrad {
    pub mean2d: [f64; 2],
    /// Gradient with respect to the conic as a full 2x2 matrix, `[xx, xy, yy]`
    /// where `xy` is the gradient of each off-diagonal entry.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub rgb: [f64; 3],
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.rgb[i] += o.rgb[i];
        }
        self.opacity += o.opacity;
    }
}

/// Per-primitive parameter gradients.
pub(crate) struct PrimitiveGrad {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub quat: [f64; 4],
    pub opacity: f64,
}

pub(crate) fn project_backward(
    pg: &ProjectedGaussian,
    g: &ScreenGrad,
    scale: &[f64],
    sh_coeffs: &[f64],
    sh_degree: usize,
    camera: &Camera,
    dsh: &mut [f64],
) -> PrimitiveGrad {
    let k = &camera.intrinsics;
    let w = camera.pose.rotation();
    let t = pg.t;

    // Color through the clamp and the basis expansion.
    let mut drgb = [0.0; 3];
    for c in 0..3 {
        if (0.0..=1.0).contains(&pg.rgb_raw[c]) {
            drgb[c] = g.rgb[c];
        }
    }
    let basis = sh::basis(sh_degree, pg.dir);
    let basis_grad = sh::basis_grad(sh_degree, pg.dir);
    let mut ddir = Vector3::zeros();
    for kk in 0..sh::num_coeffs(sh_degree) {
        for c in 0..3 {
            dsh[kk * 3 + c] = basis[kk] * drgb[c];
            let s = drgb[c] * sh_coeffs[kk * 3 + c];
            for a in 0..3 {
                ddir[a] += s * basis_grad[kk][a];
            }
        }
    }
    let mut dmean = Vector3::zeros();
    if pg.dist > 0.0 {
        let d = Vector3::new(pg.dir[0], pg.dir[1], pg.dir[2]);
        dmean += (ddir - d * d.dot(&ddir)) / pg.dist;
    }

    // Conic -> screen covariance.
    let q = Matrix2::new(pg.conic[0], pg.conic[1], pg.conic[1], pg.conic[2]);
    let gq = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let gc = -(q * gq * q);

    // Screen covariance -> world covariance and Jacobian.
    let j = perspective_jacobian(&t, k.fx, k.fy);
    let tm = j * w;
    let gsigma = tm.transpose() * gc * tm;
    let gsigma = 0.5 * (gsigma + gsigma.transpose());
    let gt = 2.0 * gc * tm * pg.sigma;
    let gj = gt * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dt = j.transpose() * Vector2::new(g.mean2d[0], g.mean2d[1]);
    dt.z += gj[(0, 0)] * (-k.fx * iz2) + gj[(1, 1)] * (-k.fy * iz2);
    dt.x += gj[(0, 2)] * (-k.fx * iz2);
    dt.z += gj[(0, 2)] * (2.0 * k.fx * t.x * iz3);
    dt.y += gj[(1, 2)] * (-k.fy * iz2);
    dt.z += gj[(1, 2)] * (2.0 * k.fy * t.y * iz3);
    dmean += w.transpose() * dt;

    // Σ = M Mᵀ with M = R·diag(s).
    let s = Vector3::new(scale[0], scale[1], scale[2]);
    let m = pg.rot * Matrix3::from_diagonal(&s);
    let gm = 2.0 * gsigma * m;
    let mut dscale = [0.0; 3];
    let mut gr = Matrix3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            dscale[col] += gm[(row, col)] * pg.rot[(row, col)];
            gr[(row, col)] = gm[(row, col)] * s[col];
        }
    }
    let [qw, qx, qy, qz] = pg.quat;
    let gn = [
        2.0 * (-qz * gr[(0, 1)] + qy * gr[(0, 2)] + qz * gr[(1, 0)] - qx * gr[(1, 2)]
            - qy * gr[(2, 0)]
            + qx * gr[(2, 1)]),
        2.0 * (qy * gr[(0, 1)] + qz * gr[(0, 2)] + qy * gr[(1, 0)] - 2.0 * qx * gr[(1, 1)]
            - qw * gr[(1, 2)]
            + qz * gr[(2, 0)]
            + qw * gr[(2, 1)]
            - 2.0 * qx * gr[(2, 2)]),
        2.0 * (-2.0 * qy * gr[(0, 0)] + qx * gr[(0, 1)] + qw * gr[(0, 2)] + qx * gr[(1, 0)]
            + qz * gr[(1, 2)]
            - qw * gr[(2, 0)]
            + qz * gr[(2, 1)]
            - 2.0 * qy * gr[(2, 2)]),
        2.0 * (-2.0 * qz * gr[(0, 0)] - qw * gr[(0, 1)] + qx * gr[(0, 2)] + qw * gr[(1, 0)]
            - 2.0 * qz * gr[(1, 1)]
            + qy * gr[(1, 2)]
            + qx * gr[(2, 0)]
            + qy * gr[(2, 1)]),
    ];
    let dot: f64 = gn.iter().zip(&pg.quat).map(|(a, b)| a * b).sum();
    let mut dquat = [0.0; 4];
    for i in 0..4 {
        dquat[i] = (gn[i] - pg.quat[i] * dot) / pg.quat_norm;
    }

    PrimitiveGrad {
        mean: [dmean.x, dmean.y, dmean.z],
        scale: dscale,
        quat: dquat,
        opacity: g.opacity,
    }
}
