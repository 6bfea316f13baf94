//! Procedural scenes rendered by exact ray casting, with ground-truth depth.

use std::str::FromStr;

use hgs_autodiff::Tensor;
use hgs_core::camera::{Camera, Intrinsics, Pose};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{Role, Scene, SceneView};
use crate::{Result, WorkbenchError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    TexturedPlane,
    TexturedCube,
    TwoPlane,
}

impl FromStr for SceneKind {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textured-plane" => Ok(Self::TexturedPlane),
            "textured-cube" => Ok(Self::TexturedCube),
            "two-plane" => Ok(Self::TwoPlane),
            other => Err(WorkbenchError::Usage(format!(
                "unknown scene kind `{other}` (textured-plane, textured-cube, two-plane)"
            ))),
        }
    }
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TexturedPlane => "textured-plane",
            Self::TexturedCube => "textured-cube",
            Self::TwoPlane => "two-plane",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub width: usize,
    pub height: usize,
    /// Depth of the textured plane (also the nearer plane of `two-plane`).
    pub plane_depth: f64,
    pub far_plane_depth: f64,
    pub baseline: f64,
    pub targets: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            plane_depth: 2.0,
            far_plane_depth: 4.0,
            baseline: 0.5,
            targets: 1,
        }
    }
}

/// Plane textures carry detail down to a few pixels so that stereo matching
/// on them is well posed; cube faces stay smoother.
const PLANE_FREQS: std::ops::Range<f64> = 2.0..5.0;
const CUBE_FREQS: std::ops::Range<f64> = 0.6..2.5;

/// Band-limited color field: per channel a base level plus a few random
/// plane waves.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, f64, usize)>,
}

impl Texture {
    /// Spatial frequencies in cycles per world unit.
    fn random(rng: &mut ChaCha8Rng, freqs: std::ops::Range<f64>) -> Self {
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let mut waves = Vec::new();
        for c in 0..3 {
            for _ in 0..5 {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq: f64 = rng.gen_range(freqs.clone());
                let k = [freq * theta.cos(), freq * theta.sin()];
                waves.push((k, rng.gen_range(0.04..0.09), rng.gen_range(0.0..std::f64::consts::TAU), c));
            }
        }
        Self { base, waves }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let mut out = self.base;
        for &(k, amp, phase, c) in &self.waves {
            out[c] += amp * (std::f64::consts::TAU * (k[0] * u + k[1] * v) + phase).sin();
        }
        out.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Textured rectangle `origin + a·u_axis + b·v_axis`, `|a| <= half_u`,
/// `|b| <= half_v`.
#[derive(Clone, Debug)]
struct Quad {
    origin: Vector3<f64>,
    u_axis: Vector3<f64>,
    v_axis: Vector3<f64>,
    half_u: f64,
    half_v: f64,
    texture: usize,
}

impl Quad {
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.u_axis.cross(&self.v_axis);
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - o)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let p = o + d * t - self.origin;
        let (a, b) = (p.dot(&self.u_axis), p.dot(&self.v_axis));
        (a.abs() <= self.half_u && b.abs() <= self.half_v).then_some((t, a, b))
    }
}

struct World {
    quads: Vec<Quad>,
    textures: Vec<Texture>,
    background: [f64; 3],
}

impl World {
    /// Color (8-bit quantized, so it survives a PNG round trip) and
    /// camera-frame depth (0 when the ray misses) at every pixel center.
    fn cast(&self, cam: &Camera) -> (Tensor, Tensor) {
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        let rt = cam.pose.rotation().transpose();
        let o = cam.pose.center();
        let mut img = Tensor::zeros(&[h, w, 3]);
        let mut depth = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                // camera ray with unit z, so the hit parameter is the depth
                let d = rt * cam.intrinsics.ray(x as f64 + 0.5, y as f64 + 0.5);
                let best = self
                    .quads
                    .iter()
                    .filter_map(|q| q.hit(&o, &d).map(|(t, a, b)| (t, q.texture, a, b)))
                    .min_by(|p, q| p.0.total_cmp(&q.0));
                let color = match best {
                    Some((t, tex, a, b)) => {
                        depth.data_mut()[y * w + x] = t;
                        self.textures[tex].color(a, b)
                    }
                    None => self.background,
                };
                img.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
            }
        }
        (crate::image_io::quantize(&img), depth)
    }
}

fn fronto_quad(z: f64, cx: f64, half_u: f64, half_v: f64, texture: usize) -> Quad {
    Quad {
        origin: Vector3::new(cx, 0.0, z),
        u_axis: Vector3::x(),
        v_axis: Vector3::y(),
        half_u,
        half_v,
        texture,
    }
}

fn cube(center: Vector3<f64>, half: f64, yaw: f64, first_texture: usize) -> Vec<Quad> {
    let (s, c) = yaw.sin_cos();
    let rx = Vector3::new(c, 0.0, -s);
    let ry = Vector3::y();
    let rz = Vector3::new(s, 0.0, c);
    let faces = [(rz, rx, ry), (-rz, rx, ry), (rx, rz, ry), (-rx, rz, ry), (ry, rx, rz), (-ry, rx, rz)];
    faces
        .iter()
        .enumerate()
        .map(|(i, &(n, u, v))| Quad {
            origin: center + n * half,
            u_axis: u,
            v_axis: v,
            half_u: half,
            half_v: half,
            texture: first_texture + i,
        })
        .collect()
}

/// Build and ray-cast a scene. Inputs come first, then targets.
pub fn synth_scene(kind: SceneKind, seed: u64, opts: &SynthOptions) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (w, h) = (opts.width, opts.height);
    let intr = Intrinsics::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
    let d = opts.plane_depth;
    let far = opts.far_plane_depth;
    let b = opts.baseline;
    let down = Vector3::y();

    let mut textures = Vec::new();
    let mut quads = Vec::new();
    let mut cams = Vec::new();
    let (near_bound, far_bound);
    match kind {
        SceneKind::TexturedPlane => {
            textures.push(Texture::random(&mut rng, PLANE_FREQS));
            quads.push(fronto_quad(d, 0.0, 50.0 * d, 50.0 * d, 0));
            for x in [-b / 2.0, b / 2.0] {
                cams.push(Pose::new(nalgebra::Matrix3::identity(), -Vector3::new(x, 0.0, 0.0))?);
            }
            for k in 0..opts.targets {
                let x = b * (k as f64 + 1.0) / (opts.targets as f64 + 1.0) - b / 2.0;
                cams.push(Pose::new(nalgebra::Matrix3::identity(), -Vector3::new(x, -0.1 * b, 0.0))?);
            }
            near_bound = 0.5 * d;
            far_bound = 2.0 * d;
        }
        SceneKind::TwoPlane => {
            textures.push(Texture::random(&mut rng, PLANE_FREQS));
            textures.push(Texture::random(&mut rng, PLANE_FREQS));
            quads.push(fronto_quad(d, -0.5 * d, 0.5 * d, 50.0 * d, 0));
            quads.push(fronto_quad(far, 0.0, 50.0 * far, 50.0 * far, 1));
            for x in [-b / 2.0, b / 2.0] {
                cams.push(Pose::new(nalgebra::Matrix3::identity(), -Vector3::new(x, 0.0, 0.0))?);
            }
            for k in 0..opts.targets {
                let x = b * (k as f64 + 1.0) / (opts.targets as f64 + 1.0) - b / 2.0;
                cams.push(Pose::new(nalgebra::Matrix3::identity(), -Vector3::new(x, -0.1 * b, 0.0))?);
            }
            near_bound = 0.5 * d;
            far_bound = 2.0 * far;
        }
        SceneKind::TexturedCube => {
            for _ in 0..7 {
                textures.push(Texture::random(&mut rng, CUBE_FREQS));
            }
            let center = Vector3::new(0.0, 0.0, d + 0.5);
            quads.extend(cube(center, 0.45, rng.gen_range(0.4..0.8), 0));
            quads.push(fronto_quad(far, 0.0, 50.0 * far, 50.0 * far, 6));
            for x in [-b / 2.0, b / 2.0] {
                cams.push(Pose::look_at(Vector3::new(x, -0.15, 0.0), center, down)?);
            }
            for k in 0..opts.targets {
                let x = b * (k as f64 + 1.0) / (opts.targets as f64 + 1.0) - b / 2.0;
                cams.push(Pose::look_at(Vector3::new(x, -0.3, 0.0), center, down)?);
            }
            near_bound = 0.5 * d;
            far_bound = 2.0 * far;
        }
    }

    let world = World {
        quads,
        textures,
        background: [0.0; 3],
    };
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(i, pose)| {
            let cam = Camera { intrinsics: intr, pose };
            let (image, depth) = world.cast(&cam);
            SceneView {
                name: format!("{i:03}"),
                camera: cam,
                image,
                depth: Some(depth),
                role: if i < 2 { Role::Input } else { Role::Target },
            }
        })
        .collect();
    Ok(Scene {
        views,
        near: near_bound,
        far: far_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_depth_is_exact_everywhere() {
        let s = synth_scene(SceneKind::TexturedPlane, 1, &SynthOptions::default()).unwrap();
        for v in &s.views {
            let d = v.depth.as_ref().unwrap();
            assert!(d.data().iter().all(|&z| (z - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn two_plane_depths_are_bimodal() {
        let s = synth_scene(SceneKind::TwoPlane, 3, &SynthOptions::default()).unwrap();
        let d = s.views[0].depth.as_ref().unwrap();
        let near = d.data().iter().filter(|&&z| (z - 2.0).abs() < 1e-9).count();
        let far = d.data().iter().filter(|&&z| (z - 4.0).abs() < 1e-9).count();
        assert_eq!(near + far, d.numel());
        assert!(near > d.numel() / 8 && far > d.numel() / 8);
    }

    #[test]
    fn cube_scene_is_fully_covered_and_seeded() {
        let a = synth_scene(SceneKind::TexturedCube, 7, &SynthOptions::default()).unwrap();
        let b = synth_scene(SceneKind::TexturedCube, 7, &SynthOptions::default()).unwrap();
        let c = synth_scene(SceneKind::TexturedCube, 8, &SynthOptions::default()).unwrap();
        assert_eq!(a.views[0].image, b.views[0].image);
        assert_ne!(a.views[0].image, c.views[0].image);
        let d = a.views[0].depth.as_ref().unwrap();
        assert!(d.data().iter().all(|&z| z > 0.0));
        assert!(d.data().iter().any(|&z| z < 3.0));
    }

    #[test]
    fn kinds_parse() {
        for k in [SceneKind::TexturedPlane, SceneKind::TexturedCube, SceneKind::TwoPlane] {
            assert_eq!(k.name().parse::<SceneKind>().unwrap(), k);
        }
        assert!("sphere".parse::<SceneKind>().is_err());
    }
}
