//! Pinhole cameras, rigid poses and plane-sweep warping.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and its center sits at `(i + 0.5, j + 0.5)`. Camera frames follow the
//! computer-vision convention (x right, y down, z forward).

use hgs_autodiff::{Tensor, Var};
use nalgebra::{Matrix3, Matrix4, Vector3, SVD};

use crate::error::{CoreError, Result};

/// Points closer to the image plane than this are not visible.
pub const PROJECT_EPS: f64 = 1e-6;
/// Tolerance for accepting a rotation block as orthonormal.
pub const ROTATION_TOL: f64 = 1e-9;

fn camera_err(msg: impl Into<String>) -> CoreError {
    CoreError::Camera(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(camera_err(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(camera_err("image extents must be nonzero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(camera_err(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(camera_err(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Same camera at another resolution, scaled by the exact extent ratios.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Camera-frame direction with unit z through pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Strict constructor: the rotation must already be orthonormal with
    /// determinant +1 to within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, ROTATION_TOL)?;
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(camera_err("translation is not finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// From a row-major 4x4 matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        check_bottom_row(m)?;
        Self::new(m.fixed_view::<3, 3>(0, 0).into(), m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Accepts a rotation within `tol` of SO(3) and snaps it onto SO(3).
    pub fn orthonormalized(m: &Matrix4<f64>, tol: f64) -> Result<Self> {
        check_bottom_row(m)?;
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        check_rotation(&r, tol)?;
        let svd = SVD::new(r, true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        Self::new(u * vt, m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Camera at `eye` looking at `target`; `down` fixes the image y axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| camera_err("eye and target coincide"))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| camera_err("down vector parallel to viewing direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -rotation * eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt * self.translation,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Transform taking camera-`from` coordinates to camera-`to` coordinates.
    pub fn relative(from: &Pose, to: &Pose) -> Pose {
        to.compose(&from.inverse())
    }

    /// Pose of the mirror-image camera (x negated in both world and camera
    /// frames), which matches a horizontally flipped image.
    pub fn mirrored_x(&self) -> Pose {
        let f = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        Pose {
            rotation: f * self.rotation * f,
            translation: f * self.translation,
        }
    }
}

fn check_bottom_row(m: &Matrix4<f64>) -> Result<()> {
    let row = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if row != [0.0, 0.0, 0.0, 1.0] {
        return Err(camera_err(format!(
            "bottom row must be [0, 0, 0, 1], got {row:?}"
        )));
    }
    Ok(())
}

fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(camera_err("rotation is not finite"));
    }
    let det = r.determinant();
    if det < 0.0 {
        return Err(camera_err(format!(
            "rotation has determinant {det:.6}; reflections are not rigid"
        )));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > tol || (det - 1.0).abs() > tol {
        return Err(camera_err(format!(
            "rotation is not orthonormal (|RᵀR - I| = {dev:.3e}, det = {det:.9})"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        Self {
            intrinsics: self.intrinsics.rescaled(width, height),
            pose: self.pose,
        }
    }

    pub fn mirrored_x(&self) -> Self {
        let k = self.intrinsics;
        Self {
            intrinsics: Intrinsics {
                cx: k.width as f64 - k.cx,
                ..k
            },
            pose: self.pose.mirrored_x(),
        }
    }
}

/// A posed image, `image` is `[H, W, 3]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: Tensor,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, image: Tensor) -> Result<Self> {
        intrinsics.validate()?;
        if image.shape() != [intrinsics.height, intrinsics.width, 3] {
            return Err(camera_err(format!(
                "image shape {:?} does not match intrinsics {}x{}",
                image.shape(),
                intrinsics.height,
                intrinsics.width
            )));
        }
        Ok(Self {
            intrinsics,
            pose,
            image,
        })
    }

    pub fn camera(&self) -> Camera {
        Camera {
            intrinsics: self.intrinsics,
            pose: self.pose,
        }
    }

    /// Horizontally flipped image with the matching mirrored camera.
    pub fn flipped(&self) -> CameraView {
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let src = self.image.data();
        let image = Tensor::from_fn(&[h, w, 3], |i| {
            let (y, x, c) = (i / (3 * w), (i / 3) % w, i % 3);
            src[(y * w + (w - 1 - x)) * 3 + c]
        });
        let cam = self.camera().mirrored_x();
        CameraView {
            intrinsics: cam.intrinsics,
            pose: cam.pose,
            image,
        }
    }
}

/// World point seen at pixel coordinate `(u, v)` with camera-frame depth
/// `depth`.
pub fn unproject(u: f64, v: f64, depth: f64, intr: &Intrinsics, pose: &Pose) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(camera_err(format!("depth must be positive, got {depth}")));
    }
    Ok(pose.to_world(&(intr.ray(u, v) * depth)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection; `None` when the point is not in front of the camera.
pub fn project(point: &Vector3<f64>, intr: &Intrinsics, pose: &Pose) -> Option<Projection> {
    project_camera(&pose.to_camera(point), intr)
}

pub fn project_camera(p: &Vector3<f64>, intr: &Intrinsics) -> Option<Projection> {
    if !(p.z > PROJECT_EPS) {
        return None;
    }
    Some(Projection {
        u: intr.fx * p.x / p.z + intr.cx,
        v: intr.fy * p.y / p.z + intr.cy,
        depth: p.z,
    })
}

/// Source-image sample coordinates for every destination pixel center,
/// assuming the surface lies at camera-frame depth `depth` in the
/// destination view. Returns `[h_dst, w_dst, 2]`; points that land behind
/// the source camera are NaN, which samples as zero.
pub fn plane_sweep_points(dst: &Camera, src: &Camera, depth: f64) -> Tensor {
    let (h, w) = (dst.intrinsics.height, dst.intrinsics.width);
    let rel = Pose::relative(&dst.pose, &src.pose);
    let mut out = Tensor::zeros(&[h, w, 2]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = dst.intrinsics.ray(x as f64 + 0.5, y as f64 + 0.5) * depth;
            let o = (y * w + x) * 2;
            match project_camera(&rel.to_camera(&p), &src.intrinsics) {
                Some(q) => {
                    data[o] = q.u;
                    data[o + 1] = q.v;
                }
                None => {
                    data[o] = f64::NAN;
                    data[o + 1] = f64::NAN;
                }
            }
        }
    }
    out
}

/// Resample source features `[h, w, C]` into the destination view through
/// the fronto-parallel plane at `depth`. Samples outside the source map are
/// zero. Both cameras must already be scaled to feature resolution.
pub fn plane_sweep_warp(src_feat: &Var, dst: &Camera, src: &Camera, depth: f64) -> Result<Var> {
    if !(depth > 0.0) {
        return Err(camera_err(format!("plane depth must be positive, got {depth}")));
    }
    let [h, w, c] = src_feat.shape()[..] else {
        return Err(camera_err(format!(
            "source features must be [h, w, C], got {:?}",
            src_feat.shape()
        )));
    };
    if (src.intrinsics.height, src.intrinsics.width) != (h, w) {
        return Err(camera_err(
            "source intrinsics are not scaled to feature resolution",
        ));
    }
    let (hd, wd) = (dst.intrinsics.height, dst.intrinsics.width);
    let pts = plane_sweep_points(dst, src, depth).reshape(&[1, hd, wd, 2])?;
    let warped = src_feat.reshape(&[1, h, w, c])?.grid_sample(&[0], &pts)?;
    Ok(warped.reshape(&[hd, wd, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hgs_autodiff::Graph;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn principal_point_unprojects_to_axis() {
        let p = unproject(32.0, 32.0, 3.0, &intr(), &Pose::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn closed_form_pinhole_point() {
        let p = unproject(42.0, 32.0, 2.0, &intr(), &Pose::identity()).unwrap();
        assert!((p - Vector3::new(0.2, 0.0, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        assert!(unproject(1.0, 1.0, 0.0, &intr(), &Pose::identity()).is_err());
        assert!(unproject(1.0, 1.0, -1.0, &intr(), &Pose::identity()).is_err());
    }

    #[test]
    fn behind_camera_is_not_visible() {
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &intr(), &Pose::identity()).is_none());
    }

    #[test]
    fn doubling_x_doubles_offset() {
        let k = intr();
        let a = project_camera(&Vector3::new(0.3, 0.1, 2.0), &k).unwrap();
        let b = project_camera(&Vector3::new(0.6, 0.1, 2.0), &k).unwrap();
        assert!(((b.u - k.cx) - 2.0 * (a.u - k.cx)).abs() < 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.0, -0.1, 4, 4).is_err());
    }

    #[test]
    fn rescale_is_exact_ratio() {
        let k = intr().rescaled(16, 16);
        assert_eq!((k.fx, k.cx, k.width), (25.0, 8.0, 16));
    }

    #[test]
    fn reflection_rejected() {
        let r = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let err = Pose::new(r, Vector3::zeros()).unwrap_err().to_string();
        assert!(err.contains("determinant"), "{err}");
    }

    #[test]
    fn near_rotation_is_snapped() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 5e-7;
        let p = Pose::orthonormalized(&m, 1e-6).unwrap();
        let r = p.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        m[(0, 1)] = 1e-3;
        assert!(Pose::orthonormalized(&m, 1e-6).is_err());
    }

    #[test]
    fn identity_pose_warp_is_identity() {
        let g = Graph::new();
        let feat = g.constant(Tensor::from_fn(&[6, 5, 2], |i| (i as f64 * 0.7).sin()));
        let k = Intrinsics::new(4.0, 4.0, 2.5, 3.0, 5, 6).unwrap();
        let cam = Camera {
            intrinsics: k,
            pose: Pose::identity(),
        };
        let out = plane_sweep_warp(&feat, &cam, &cam, 1.7).unwrap();
        assert!(out.value().max_abs_diff(feat.value()) < 1e-9);
    }

    #[test]
    fn mirrored_pose_stays_rigid() {
        let p = Pose::look_at(
            Vector3::new(0.3, -0.2, -1.0),
            Vector3::new(0.0, 0.1, 2.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap()
        .mirrored_x();
        assert!(Pose::new(*p.rotation(), *p.translation()).is_ok());
    }
}
