//! Cross-stage fusion: earlier stages' opacities are damped where the
//! current features and the render error say they are wrong.

use hgs_autodiff::{Session, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::gaussians::GaussianVars;
use crate::nn::{self, ParamSpecs};

/// `concat(resize(current), earlier)` at the earlier stage's resolution.
pub fn concat_features(current: &Var, earlier: &Var) -> Result<Var> {
    let (h, w) = (earlier.shape()[1], earlier.shape()[2]);
    let resized = if (current.shape()[1], current.shape()[2]) == (h, w) {
        current.clone()
    } else {
        current.bilinear_resize(h, w)?
    };
    Ok(Var::concat(&[resized, earlier.clone()], 3)?)
}

fn prefix(stage: usize, earlier: usize) -> String {
    format!("mfm{stage}.{earlier}")
}

pub fn declare(specs: &mut ParamSpecs, cfg: &ModelConfig, stage: usize) {
    let [h1, h2] = cfg.mfm_hidden;
    for k in 1..stage {
        let p = prefix(stage, k);
        specs.linear(&format!("{p}.a1"), 2 * cfg.gs_channels, h1, 2f64.sqrt());
        specs.linear(&format!("{p}.a2"), h1, 3, 1.0);
        specs.linear(&format!("{p}.b1"), 3, h2, 2f64.sqrt());
        specs.linear(&format!("{p}.b2"), h2, 1, 1.0);
    }
}

/// `sigmoid(MLP2(MLP1(cat) * err))` per pixel: `[N, h, w]` in `[0, 1]`.
pub fn modulation_coefficients(
    s: &Session,
    stage: usize,
    earlier: usize,
    cat: &Var,
    err: &Var,
) -> Result<Var> {
    if cat.shape()[..3] != err.shape()[..3] || err.shape()[3] != 3 {
        return Err(CoreError::Input(format!(
            "features {:?} and error map {:?} disagree",
            cat.shape(),
            err.shape()
        )));
    }
    let p = prefix(stage, earlier);
    let a = nn::linear(s, &format!("{p}.a1"), cat)?.relu()?;
    let a = nn::linear(s, &format!("{p}.a2"), &a)?;
    let b = nn::linear(s, &format!("{p}.b1"), &a.mul(err)?)?.relu()?;
    let xi = nn::linear(s, &format!("{p}.b2"), &b)?.sigmoid()?;
    let sh = cat.shape();
    Ok(xi.reshape(&[sh[0], sh[1], sh[2]])?)
}

/// Apply `xi[k]` to the opacities of `stages[k]` (all but the last) and
/// return the union. The input sets are not modified; callers keep the
/// returned per-stage parts so the next stage modulates on top of them.
pub fn fuse(stages: &[GaussianVars], xi: &[Var]) -> Result<(Vec<GaussianVars>, GaussianVars)> {
    let Some((current, earlier)) = stages.split_last() else {
        return Err(CoreError::Input("no stages to fuse".into()));
    };
    if xi.len() != earlier.len() {
        return Err(CoreError::Input(format!(
            "{} earlier stages but {} modulation fields",
            earlier.len(),
            xi.len()
        )));
    }
    let mut parts = Vec::with_capacity(stages.len());
    for (set, x) in earlier.iter().zip(xi) {
        if x.value().numel() != set.len() {
            return Err(CoreError::Input(format!(
                "modulation field {:?} does not match {} primitives",
                x.shape(),
                set.len()
            )));
        }
        let mut modulated = set.clone();
        modulated.opacities = set.opacities.mul(&x.reshape(&[set.len()])?)?;
        parts.push(modulated);
    }
    parts.push(current.clone());
    let union = GaussianVars::concat(&parts)?;
    Ok((parts, union))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hgs_autodiff::{Graph, Tensor};

    #[test]
    fn concat_width_and_constant_resize() {
        let g = Graph::new();
        let cur = g.constant(Tensor::full(&[1, 8, 8, 32], 0.3));
        let early = g.constant(Tensor::zeros(&[1, 4, 4, 32]));
        let c = concat_features(&cur, &early).unwrap();
        assert_eq!(c.shape(), &[1, 4, 4, 64]);
        for px in c.value().data().chunks(64) {
            assert!(px[..32].iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn equal_resolution_is_plain_concat() {
        let g = Graph::new();
        let a = Tensor::from_fn(&[1, 4, 4, 2], |i| i as f64);
        let c = concat_features(&g.constant(a.clone()), &g.constant(Tensor::zeros(&[1, 4, 4, 1]))).unwrap();
        for (px, src) in c.value().data().chunks(3).zip(a.data().chunks(2)) {
            assert_eq!(&px[..2], src);
        }
    }

    #[test]
    fn zero_error_gives_half() {
        let cfg = ModelConfig::default();
        let mut specs = ParamSpecs::default();
        declare(&mut specs, &cfg, 3);
        let store = specs.initialise(9);
        let s = Session::new(&store, false);
        let cat = s.constant(Tensor::from_fn(&[2, 4, 4, 64], |i| (i as f64).cos()));
        let xi = modulation_coefficients(&s, 3, 2, &cat, &s.constant(Tensor::zeros(&[2, 4, 4, 3]))).unwrap();
        assert_eq!(xi.shape(), &[2, 4, 4]);
        assert!(xi.value().data().iter().all(|&v| v == 0.5));
        let err = s.constant(Tensor::full(&[2, 4, 4, 3], 0.5));
        let xi2 = modulation_coefficients(&s, 3, 2, &cat, &err).unwrap();
        assert!(xi2.value().max_abs_diff(xi.value()) > 0.0);
    }
}
