//! NHWC cross-correlation through im2col and a single GEMM.

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::ops::matmul::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let kc = g.cols();
    let mut cols = vec![0.0; g.rows() * kc];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * kc..(row + 1) * kc];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let kc = g.cols();
    let mut x = vec![0.0; g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src_row = &cols[row * kc..(row + 1) * kc];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for (d, s) in x[dst..dst + g.cin]
                            .iter_mut()
                            .zip(&src_row[off..off + g.cin])
                        {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

impl Var {
    /// `self`: `[N,H,W,Cin]`; `kernel`: `[KH,KW,Cin,Cout]` with odd extents.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape().to_vec(), kernel.shape().to_vec());
        let [n, h, w, cin] = xs[..] else {
            return Err(TensorError::shape(
                "conv2d",
                format!("input must be NHWC, got {xs:?}"),
            ));
        };
        let [kh, kw, kcin, cout] = ks[..] else {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel must be [KH,KW,Cin,Cout], got {ks:?}"),
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel spatial extent must be odd, got {kh}x{kw}"),
            ));
        }
        if kcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("{kh}x{kw} kernel larger than padded {h}x{w} input"),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geo = Geometry {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad: padding,
            ho,
            wo,
        };

        let (x, k) = (self.shared_value(), kernel.shared_value());
        let mut out = vec![0.0; geo.rows() * cout];
        if geo.is_pointwise() {
            gemm(geo.rows(), cin, cout, x.data(), false, k.data(), false, 0.0, &mut out);
        } else {
            let cols = im2col(x.data(), &geo);
            gemm(geo.rows(), geo.cols(), cout, &cols, false, k.data(), false, 0.0, &mut out);
        }
        let value = Tensor::new(&[n, ho, wo, cout], out)?;

        self.record(value, &[self, kernel], move |g, need| {
            let gd = g.data();
            let cols_owned;
            let cols: &[f64] = if geo.is_pointwise() {
                x.data()
            } else {
                cols_owned = im2col(x.data(), &geo);
                &cols_owned
            };
            let gk = need[1].then(|| {
                let mut d = vec![0.0; geo.cols() * geo.cout];
                gemm(geo.cols(), geo.rows(), geo.cout, cols, true, gd, false, 0.0, &mut d);
                Tensor::new(k.shape(), d).expect("kernel shape")
            });
            let gx = need[0].then(|| {
                let mut dcols = vec![0.0; geo.rows() * geo.cols()];
                gemm(geo.rows(), geo.cout, geo.cols(), gd, false, k.data(), true, 0.0, &mut dcols);
                let dx = if geo.is_pointwise() { dcols } else { col2im(&dcols, &geo) };
                Tensor::new(x.shape(), dx).expect("input shape")
            });
            vec![gx, gk]
        })
    }
}
