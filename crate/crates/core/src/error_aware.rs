//! Depth refinement for stages 2 and 3, driven by how badly the previous
//! stage reproduces the input views.

use hgs_autodiff::{Session, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{self, Init, ParamSpecs};

/// Per-channel `|rendered - input|`, area-downsampled to `h x w`.
pub fn compute_error_map(rendered: &Var, input: &Tensor, h: usize, w: usize) -> Result<Var> {
    if rendered.shape() != input.shape() {
        return Err(CoreError::Input(format!(
            "rendered {:?} and input {:?} differ in shape",
            rendered.shape(),
            input.shape()
        )));
    }
    let diff = rendered.sub(&rendered.constant_like(input.clone()))?.abs()?;
    nn::area_downsample(&diff, h, w)
}

pub fn declare(specs: &mut ParamSpecs, cfg: &ModelConfig, stage: usize) {
    let p = format!("eam{stage}");
    let [c1, c2] = cfg.eam_channels;
    let cin = 3 + cfg.stage_channels(stage);
    specs.conv(&format!("{p}.enc0"), 3, cin, c1);
    specs.conv(&format!("{p}.enc1"), 3, c1, c2);
    specs.conv(&format!("{p}.enc2"), 3, c2, c2);
    specs.conv(&format!("{p}.dec1"), 3, 2 * c2, c2);
    specs.conv(&format!("{p}.dec0"), 3, c2 + c1, c1);
    specs.conv_gain(&format!("{p}.alpha"), 1, c1, 1, 0.1);
    specs.conv_gain(&format!("{p}.gs"), 1, c1, cfg.gs_channels, 1.0);
    specs.set_init(&format!("{p}.alpha.b"), Init::Zeros);
}

fn up_to(x: &Var, like: &Var) -> Result<Var> {
    Ok(x.bilinear_resize(like.shape()[1], like.shape()[2])?)
}

/// Two-level U-Net over `concat(err, features)`. Returns the offset degree
/// `alpha [N, h, w]` in `[0, 1]` and Gaussian features `[N, h, w, C_gs]`.
pub fn predict_offsets(s: &Session, stage: usize, err: &Var, features: &Var) -> Result<(Var, Var)> {
    let p = format!("eam{stage}");
    if err.shape()[..3] != features.shape()[..3] {
        return Err(CoreError::Input(format!(
            "error map {:?} and features {:?} disagree in resolution",
            err.shape(),
            features.shape()
        )));
    }
    let [n, h, w, _] = features.shape()[..] else {
        return Err(CoreError::Input("features must be NHWC".into()));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CoreError::Input(format!(
            "stage {stage} grid {h}x{w} must be divisible by 4"
        )));
    }
    let x = Var::concat(&[err.clone(), features.clone()], 3)?;
    let e0 = nn::conv_relu(s, &format!("{p}.enc0"), &x, 1)?;
    let e1 = nn::conv_relu(s, &format!("{p}.enc1"), &e0, 2)?;
    let e2 = nn::conv_relu(s, &format!("{p}.enc2"), &e1, 2)?;
    let d1 = Var::concat(&[up_to(&e2, &e1)?, e1.clone()], 3)?;
    let d1 = nn::conv_relu(s, &format!("{p}.dec1"), &d1, 1)?;
    let d0 = Var::concat(&[up_to(&d1, &e0)?, e0], 3)?;
    let d0 = nn::conv_relu(s, &format!("{p}.dec0"), &d0, 1)?;
    let alpha = nn::conv(s, &format!("{p}.alpha"), &d0, 1)?
        .sigmoid()?
        .reshape(&[n, h, w])?;
    let gs = nn::conv(s, &format!("{p}.gs"), &d0, 1)?;
    Ok((alpha, gs))
}

/// `(1 + (2·alpha - 1)·eta) · resize(prev)`: the new depth stays within
/// `eta` (relative) of the upsampled previous depth.
pub fn refine_depth(alpha: &Var, prev: &Var, eta: f64) -> Result<Var> {
    let [n, h, w] = alpha.shape()[..] else {
        return Err(CoreError::Input("alpha must be [N, h, w]".into()));
    };
    let [pn, ph, pw] = prev.shape()[..] else {
        return Err(CoreError::Input("previous depth must be [N, h, w]".into()));
    };
    if pn != n {
        return Err(CoreError::Input("alpha and depth disagree in view count".into()));
    }
    let up = prev
        .reshape(&[n, ph, pw, 1])?
        .bilinear_resize(h, w)?
        .reshape(&[n, h, w])?;
    let factor = alpha.mul_scalar(2.0 * eta)?.add_scalar(1.0 - eta)?;
    Ok(factor.mul(&up)?)
}
