//! Binary little-endian PLY in the common 3D Gaussian splatting vertex
//! layout: position, zero normals, SH DC, remaining SH (channel-major),
//! opacity logit, log scales, quaternion `(w, x, y, z)`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use hgs_autodiff::Tensor;
use hgs_core::gaussians::{GaussianSet, StageBlock};
use hgs_core::sh;

use crate::{Result, WorkbenchError};

/// Property names in file order for SH degree `degree`.
pub fn property_names(degree: usize) -> Vec<String> {
    let rest = 3 * (sh::num_coeffs(degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn vertex(set: &GaussianSet, i: usize) -> Vec<f64> {
    let k = sh::num_coeffs(set.sh_degree);
    let coeffs = &set.sh.data()[3 * k * i..3 * k * (i + 1)];
    let mut v = Vec::with_capacity(property_names(set.sh_degree).len());
    v.extend_from_slice(&set.means.data()[3 * i..3 * i + 3]);
    v.extend_from_slice(&[0.0; 3]);
    v.extend_from_slice(&coeffs[..3]);
    for c in 0..3 {
        for j in 1..k {
            v.push(coeffs[j * 3 + c]);
        }
    }
    v.push(logit(set.opacities.data()[i]));
    v.extend(set.scales.data()[3 * i..3 * i + 3].iter().map(|s| s.ln()));
    v.extend_from_slice(&set.rotations.data()[4 * i..4 * i + 4]);
    v
}

/// Write primitives with opacity at or above `opacity_threshold`. Returns
/// the number written.
pub fn export_ply(set: &GaussianSet, path: &Path, opacity_threshold: f64) -> Result<usize> {
    let keep: Vec<usize> = (0..set.len())
        .filter(|&i| set.opacities.data()[i] >= opacity_threshold)
        .collect();
    let names = property_names(set.sh_degree);
    let mut out = Vec::new();
    let _ = write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        keep.len()
    );
    for n in &names {
        let _ = writeln!(out, "property float {n}");
    }
    let _ = write!(out, "end_header\n");
    for &i in &keep {
        for v in vertex(set, i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| WorkbenchError::io(path, e))?;
    Ok(keep.len())
}

/// Read a file written by [`export_ply`] (or any file with the same
/// property list). The result is a single block with stage 0.
pub fn import_ply(path: &Path) -> Result<GaussianSet> {
    let bytes = fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| WorkbenchError::format(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| WorkbenchError::format(path, "header is not text"))?;
    let mut count = None;
    let mut props = Vec::new();
    for line in header.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(WorkbenchError::format(path, format!("unsupported format {fmt}")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| WorkbenchError::format(path, "bad vertex count"))?)
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => {
                return Err(WorkbenchError::format(path, format!("unsupported property type {ty}")))
            }
            _ => {}
        }
    }
    let n = count.ok_or_else(|| WorkbenchError::format(path, "no vertex element"))?;
    let rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    let degree = (0..=sh::MAX_SH_DEGREE)
        .find(|&d| 3 * (sh::num_coeffs(d) - 1) == rest)
        .ok_or_else(|| WorkbenchError::format(path, format!("{rest} f_rest properties match no SH degree")))?;
    if props != property_names(degree) {
        return Err(WorkbenchError::format(path, "property list differs from the splat layout"));
    }
    let stride = props.len();
    let payload = &bytes[end + marker.len()..];
    if payload.len() != n * stride * 4 {
        return Err(WorkbenchError::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), n * stride * 4),
        ));
    }
    let k = sh::num_coeffs(degree);
    let (mut means, mut scales, mut rots, mut opac, mut shc) = (
        Vec::with_capacity(3 * n),
        Vec::with_capacity(3 * n),
        Vec::with_capacity(4 * n),
        Vec::with_capacity(n),
        vec![0.0; 3 * k * n],
    );
    for i in 0..n {
        let v: Vec<f64> = payload[i * stride * 4..(i + 1) * stride * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        means.extend_from_slice(&v[0..3]);
        let coeffs = &mut shc[3 * k * i..3 * k * (i + 1)];
        coeffs[..3].copy_from_slice(&v[6..9]);
        for c in 0..3 {
            for j in 1..k {
                coeffs[j * 3 + c] = v[9 + c * (k - 1) + (j - 1)];
            }
        }
        let o = 9 + 3 * (k - 1);
        opac.push(1.0 / (1.0 + (-v[o]).exp()));
        scales.extend(v[o + 1..o + 4].iter().map(|s| s.exp()));
        rots.extend_from_slice(&v[o + 4..o + 8]);
    }
    Ok(GaussianSet {
        means: Tensor::new(&[n, 3], means)?,
        scales: Tensor::new(&[n, 3], scales)?,
        rotations: Tensor::new(&[n, 4], rots)?,
        opacities: Tensor::new(&[n], opac)?,
        sh: Tensor::new(&[n, 3 * k], shc)?,
        sh_degree: degree,
        blocks: vec![StageBlock {
            stage: 0,
            start: 0,
            views: 1,
            height: 1,
            width: n,
        }],
    })
}
