//! 8-bit PNG and lossless raw-float images.
//!
//! Raw files are a one-line text header `HGSRAW1 <height> <width>
//! <channels>` followed by little-endian f32 planes, one per channel.

use std::fs;
use std::path::Path;

use hgs_autodiff::Tensor;

use crate::{Result, WorkbenchError};

const RAW_MAGIC: &str = "HGSRAW1";

/// Decode to `[H, W, 3]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| WorkbenchError::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// Encode `[H, W, 3]`, clamping to `[0, 1]` and rounding to 8 bits.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(WorkbenchError::format(path, format!("expected [H, W, 3], got {:?}", img.shape())));
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from shape");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| WorkbenchError::format(path, e.to_string()))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

/// Write `[H, W]` or `[H, W, C]` as planar f32.
pub fn write_raw(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = match img.shape()[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(WorkbenchError::format(path, format!("cannot store shape {:?}", img.shape()))),
    };
    let mut out = format!("{RAW_MAGIC} {h} {w} {c}\n").into_bytes();
    for ch in 0..c {
        for i in 0..h * w {
            out.extend_from_slice(&(img.data()[i * c + ch] as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| WorkbenchError::io(path, e))
}

/// Read a raw file; single-channel files come back as `[H, W]`.
pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| WorkbenchError::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| WorkbenchError::format(path, "header is not text"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dims: Vec<usize> = match fields.as_slice() {
        [magic, rest @ ..] if *magic == RAW_MAGIC && rest.len() == 3 => rest
            .iter()
            .map(|f| f.parse().map_err(|_| WorkbenchError::format(path, format!("bad extent `{f}`"))))
            .collect::<Result<_>>()?,
        _ => return Err(WorkbenchError::format(path, format!("not a {RAW_MAGIC} file"))),
    };
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[nl + 1..];
    if payload.len() != h * w * c * 4 {
        return Err(WorkbenchError::format(
            path,
            format!("payload has {} bytes, header implies {}", payload.len(), h * w * c * 4),
        ));
    }
    let mut data = vec![0.0; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            let o = (ch * h * w + i) * 4;
            let v = f32::from_le_bytes(payload[o..o + 4].try_into().expect("4 bytes"));
            data[i * c + ch] = v as f64;
        }
    }
    let shape = if c == 1 { vec![h, w] } else { vec![h, w, c] };
    Ok(Tensor::new(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = quantize(&Tensor::from_fn(&[5, 7, 3], |i| (i % 17) as f64 / 16.0));
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn raw_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.f32");
        let img = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.25);
        write_raw(&p, &img).unwrap();
        assert_eq!(read_raw(&p).unwrap(), img);
        let rgb = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        write_raw(&p, &rgb).unwrap();
        assert_eq!(read_raw(&p).unwrap(), rgb);
    }

    #[test]
    fn truncated_raw_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        fs::write(&p, b"HGSRAW1 2 2 1\n\0\0").unwrap();
        assert!(read_raw(&p).is_err());
    }
}
