//! Brute-force renderer: every primitive is tested at every pixel, with no
//! tiles, no footprint culling and an independently written projection.
//! Slow, and meant only as a test oracle.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::{RenderOutput, RenderSettings, Splats};
use crate::camera::Camera;
use crate::error::Result;
use crate::sh;
use hgs_autodiff::Tensor;

struct Footprint {
    mean: [f64; 2],
    inv: [[f64; 2]; 2],
    depth: f64,
    rgb: [f64; 3],
    opacity: f64,
}

pub fn render_reference(splats: &Splats, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let deg = splats.sh_degree;
    let kc = 3 * sh::num_coeffs(deg);
    let means = splats.means.data();
    let scales = splats.scales.data();
    let quats = splats.rotations.data();
    let opac = splats.opacities.data();
    let shd = splats.sh.data();
    let wrot = camera.pose.rotation();

    let mut prims: Vec<(usize, Footprint)> = Vec::new();
    for i in 0..splats.len() {
        let x = Vector3::new(means[3 * i], means[3 * i + 1], means[3 * i + 2]);
        let t = wrot * x + camera.pose.translation();
        if t.z <= settings.near {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            quats[4 * i],
            quats[4 * i + 1],
            quats[4 * i + 2],
            quats[4 * i + 3],
        ));
        let r: Matrix3<f64> = q.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&Vector3::new(
            scales[3 * i].powi(2),
            scales[3 * i + 1].powi(2),
            scales[3 * i + 2].powi(2),
        ));
        let sigma = r * s2 * r.transpose();
        let j = Matrix2x3::new(
            k.fx / t.z,
            0.0,
            -k.fx * t.x / (t.z * t.z),
            0.0,
            k.fy / t.z,
            -k.fy * t.y / (t.z * t.z),
        );
        let mut cov = j * wrot * sigma * wrot.transpose() * j.transpose();
        cov[(0, 0)] += settings.dilation;
        cov[(1, 1)] += settings.dilation;
        let Some(inv) = cov.try_inverse() else {
            continue;
        };
        let view = (x - camera.pose.center()).normalize();
        let rgb = sh::sh_to_rgb(&shd[i * kc..(i + 1) * kc], deg, [view.x, view.y, view.z]);
        prims.push((
            i,
            Footprint {
                mean: [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy],
                inv: [[inv[(0, 0)], inv[(0, 1)]], [inv[(1, 0)], inv[(1, 1)]]],
                depth: t.z,
                rgb,
                opacity: opac[i],
            },
        ));
    }
    prims.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));

    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut contributors = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0.0; 3];
            let mut trans = 1.0;
            let mut n = 0;
            for (_, f) in &prims {
                let d = [px - f.mean[0], py - f.mean[1]];
                let q = d[0] * (f.inv[0][0] * d[0] + f.inv[0][1] * d[1])
                    + d[1] * (f.inv[1][0] * d[0] + f.inv[1][1] * d[1]);
                let raw = f.opacity * (-0.5 * q).exp();
                if raw < settings.alpha_min {
                    continue;
                }
                let a = raw.min(settings.alpha_max);
                for ch in 0..3 {
                    c[ch] += trans * a * f.rgb[ch];
                }
                trans *= 1.0 - a;
                n += 1;
                if trans < settings.transmittance_min {
                    break;
                }
            }
            let pix = y * w + x;
            for ch in 0..3 {
                color[pix * 3 + ch] = c[ch] + trans * settings.background[ch];
            }
            alpha[pix] = 1.0 - trans;
            contributors[pix] = n;
        }
    }
    Ok(RenderOutput {
        color: Tensor::new(&[h, w, 3], color)?,
        alpha: Tensor::new(&[h, w], alpha)?,
        contributors,
        state: None,
    })
}
