//! Multi-view feature pyramid: a residual U-Net whose bottleneck runs a
//! small transformer alternating self-attention within each view and
//! cross-attention to the other views.

use hgs_autodiff::{attention_block, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{self, ParamSpecs};

/// Per-view features at three scales: stage 1 at quarter resolution with
/// `C` channels, stage 2 at half resolution with `C/2`, stage 3 at full
/// resolution with `C/4`.
#[derive(Clone)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl FeaturePyramid {
    pub fn stage(&self, i: usize) -> &Var {
        match i {
            1 => &self.f1,
            2 => &self.f2,
            _ => &self.f3,
        }
    }
}

/// Extra per-view features added to every pyramid level.
pub trait AuxFeatureProvider {
    fn channels(&self) -> usize;
    /// `[N, h, w, channels]` for images `[N, H, W, 3]`; any resolution.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

/// Contributes nothing.
#[derive(Clone, Debug)]
pub struct ZeroAux {
    pub channels: usize,
}

impl AuxFeatureProvider for ZeroAux {
    fn channels(&self) -> usize {
        self.channels
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        Ok(Tensor::zeros(&[s[0], s[1] / 8, s[2] / 8, self.channels]))
    }
}

/// Fixed random linear projection of non-overlapping 8x8 RGB patches.
#[derive(Clone, Debug)]
pub struct PatchProjectionAux {
    channels: usize,
    weights: Vec<f64>,
}

impl PatchProjectionAux {
    pub const PATCH: usize = 8;

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = Self::PATCH * Self::PATCH * 3;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        Self {
            channels,
            weights: (0..fan_in * channels).map(|_| normal.sample(&mut rng)).collect(),
        }
    }
}

impl AuxFeatureProvider for PatchProjectionAux {
    fn channels(&self) -> usize {
        self.channels
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let [n, h, w, 3] = images.shape()[..] else {
            return Err(CoreError::Input(format!("images must be [N,H,W,3], got {:?}", images.shape())));
        };
        let p = Self::PATCH;
        let (ph, pw) = (h / p, w / p);
        let src = images.data();
        let c = self.channels;
        let mut out = Tensor::zeros(&[n, ph, pw, c]);
        let dst = out.data_mut();
        for b in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    let o = ((b * ph + py) * pw + px) * c;
                    let mut k = 0;
                    for y in 0..p {
                        for x in 0..p {
                            for ch in 0..3 {
                                let v = src[((b * h + py * p + y) * w + px * p + x) * 3 + ch];
                                let row = &self.weights[k * c..(k + 1) * c];
                                for (d, wv) in dst[o..o + c].iter_mut().zip(row) {
                                    *d += v * wv;
                                }
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn declare(specs: &mut ParamSpecs, cfg: &ModelConfig) {
    let [c1, c2, c3] = cfg.channels;
    let e = c3;
    specs.conv("bb.stem", 3, 3, c1);
    for (name, cin, cout) in [("bb.down1", c1, c1), ("bb.down2", c1, c2), ("bb.down3", c2, c3)] {
        specs.conv(&format!("{name}.a"), 3, cin, cout);
        specs.conv(&format!("{name}.b"), 3, cout, cout);
    }
    for l in 0..cfg.transformer_pairs {
        for kind in ["self", "cross"] {
            let p = format!("bb.tf{l}.{kind}");
            specs.layer_norm(&format!("{p}.ln"), e);
            for m in ["q", "k", "v"] {
                specs.linear(&format!("{p}.{m}"), e, e, 1.0);
            }
            specs.linear(&format!("{p}.o"), e, e, 1.0);
        }
        let p = format!("bb.tf{l}.ffn");
        specs.layer_norm(&format!("{p}.ln"), e);
        specs.linear(&format!("{p}.1"), e, cfg.ffn_hidden, 2f64.sqrt());
        specs.linear(&format!("{p}.2"), cfg.ffn_hidden, e, 1.0);
    }
    let f = cfg.feature_channels;
    specs.conv("bb.up1.conv", 3, c3, f);
    specs.conv("bb.up1.skip", 1, c2, f);
    specs.conv("bb.up2.reduce", 1, f, f / 2);
    specs.conv("bb.up2.skip", 1, c1, f / 2);
    specs.conv("bb.up2.conv", 3, f / 2, f / 2);
    specs.conv("bb.up3.reduce", 1, f / 2, f / 4);
    specs.conv("bb.up3.skip", 1, c1, f / 4);
    specs.conv("bb.up3.conv", 3, f / 4, f / 4);
    for i in 1..=3 {
        let ci = cfg.stage_channels(i);
        specs.conv_gain(&format!("bb.head{i}"), 1, ci, ci, 1.0);
        specs.conv_no_bias(&format!("bb.aux{i}"), 1, cfg.aux_channels, ci);
    }
}

fn down_block(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let a = nn::conv_relu(s, &format!("{name}.a"), x, 2)?;
    let b = nn::conv(s, &format!("{name}.b"), &a, 1)?;
    Ok(a.add(&b)?.relu()?)
}

/// Residual self- and cross-attention over the bottleneck tokens.
pub fn cross_view_exchange(s: &Session, cfg: &ModelConfig, bottleneck: &Var) -> Result<Var> {
    let [n, h, w, e] = bottleneck.shape()[..] else {
        return Err(CoreError::Input("bottleneck must be NHWC".into()));
    };
    if n < 2 {
        return Err(CoreError::Input(format!("cross-view exchange needs at least 2 views, got {n}")));
    }
    let t = h * w;
    let mut x = bottleneck.reshape(&[n, t, e])?;
    for l in 0..cfg.transformer_pairs {
        let p = format!("bb.tf{l}.self");
        let hn = nn::layer_norm(s, &format!("{p}.ln"), &x)?;
        let q = nn::linear(s, &format!("{p}.q"), &hn)?;
        let k = nn::linear(s, &format!("{p}.k"), &hn)?;
        let v = nn::linear(s, &format!("{p}.v"), &hn)?;
        let a = attention_block(&q, &k, &v, cfg.heads)?;
        x = x.add(&nn::linear(s, &format!("{p}.o"), &a)?)?;

        let p = format!("bb.tf{l}.ffn");
        let hn = nn::layer_norm(s, &format!("{p}.ln"), &x)?;
        let f = nn::linear(s, &format!("{p}.1"), &hn)?.relu()?;
        x = x.add(&nn::linear(s, &format!("{p}.2"), &f)?)?;

        if cfg.cross_attention {
            let p = format!("bb.tf{l}.cross");
            let hn = nn::layer_norm(s, &format!("{p}.ln"), &x)?;
            let q = nn::linear(s, &format!("{p}.q"), &hn)?;
            // Keys and values for view i: tokens of every other view, in view order.
            let views: Vec<Var> = (0..n).map(|i| hn.slice(0, i, i + 1)).collect::<std::result::Result<_, _>>()?;
            let others: Vec<Var> = (0..n)
                .map(|i| {
                    let rest: Vec<Var> = (0..n).filter(|&j| j != i).map(|j| views[j].clone()).collect();
                    Var::concat(&rest, 1)
                })
                .collect::<std::result::Result<_, _>>()?;
            let kv_in = Var::concat(&others, 0)?;
            let k = nn::linear(s, &format!("{p}.k"), &kv_in)?;
            let v = nn::linear(s, &format!("{p}.v"), &kv_in)?;
            let a = attention_block(&q, &k, &v, cfg.heads)?;
            x = x.add(&nn::linear(s, &format!("{p}.o"), &a)?)?;
        }
    }
    Ok(x.reshape(&[n, h, w, e])?)
}

pub fn check_extents(h: usize, w: usize) -> Result<()> {
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        let pad = |v: usize| (8 - v % 8) % 8;
        return Err(CoreError::Input(format!(
            "image extents {h}x{w} must be positive multiples of 8; pad by {} rows and {} columns",
            pad(h),
            pad(w)
        )));
    }
    Ok(())
}

/// Run the backbone on `images [N, H, W, 3]` (values in `[0, 1]`).
pub fn extract_pyramid(
    s: &Session,
    cfg: &ModelConfig,
    images: &Tensor,
    aux: &dyn AuxFeatureProvider,
) -> Result<FeaturePyramid> {
    let [n, h, w, 3] = images.shape()[..] else {
        return Err(CoreError::Input(format!("images must be [N,H,W,3], got {:?}", images.shape())));
    };
    check_extents(h, w)?;
    if n < 2 {
        return Err(CoreError::Input(format!("need at least 2 views, got {n}")));
    }
    if aux.channels() != cfg.aux_channels {
        return Err(CoreError::Config(format!(
            "aux provider has {} channels, model expects {}",
            aux.channels(),
            cfg.aux_channels
        )));
    }
    let x = s.constant(images.map(|v| v - 0.5));
    let stem = nn::conv_relu(s, "bb.stem", &x, 1)?;
    let e1 = down_block(s, "bb.down1", &stem)?;
    let e2 = down_block(s, "bb.down2", &e1)?;
    let e3 = down_block(s, "bb.down3", &e2)?;
    let bott = cross_view_exchange(s, cfg, &e3)?;

    let (h1, w1) = (h / 4, w / 4);
    let u = bott.bilinear_resize(h1, w1)?;
    let d1 = nn::conv(s, "bb.up1.conv", &u, 1)?
        .add(&nn::conv(s, "bb.up1.skip", &e2, 1)?)?
        .relu()?;

    let (h2, w2) = (h / 2, w / 2);
    let u = nn::conv(s, "bb.up2.reduce", &d1, 1)?.bilinear_resize(h2, w2)?;
    let u = u.add(&nn::conv(s, "bb.up2.skip", &e1, 1)?)?;
    let d2 = nn::conv_relu(s, "bb.up2.conv", &u, 1)?;

    let u = nn::conv(s, "bb.up3.reduce", &d2, 1)?.bilinear_resize(h, w)?;
    let u = u.add(&nn::conv(s, "bb.up3.skip", &stem, 1)?)?;
    let d3 = nn::conv_relu(s, "bb.up3.conv", &u, 1)?;

    let aux_feat = s.constant(aux.features(images)?);
    let mut out = Vec::with_capacity(3);
    for (i, (d, hh, ww)) in [(d1, h1, w1), (d2, h2, w2), (d3, h, w)].into_iter().enumerate() {
        let f = nn::conv(s, &format!("bb.head{}", i + 1), &d, 1)?;
        let a = aux_feat.bilinear_resize(hh, ww)?;
        out.push(f.add(&nn::conv_no_bias(s, &format!("bb.aux{}", i + 1), &a)?)?);
    }
    let f3 = out.pop().expect("three stages");
    let f2 = out.pop().expect("three stages");
    let f1 = out.pop().expect("three stages");
    Ok(FeaturePyramid { f1, f2, f3 })
}
