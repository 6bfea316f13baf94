//! The three-stage forward pass and checkpoint handling.

use std::path::Path;

use hgs_autodiff::{Checkpoint, ParamStore, Session, Tensor, Var};

use crate::backbone::{self, AuxFeatureProvider, FeaturePyramid};
use crate::camera::{Camera, CameraView};
use crate::config::ModelConfig;
use crate::depth::{self, DepthCandidates};
use crate::error::{CoreError, Result};
use crate::error_aware;
use crate::fusion;
use crate::gaussians::{self, GaussianSet, GaussianVars};
use crate::nn::{self, ParamSpecs};
use crate::render::{render, render_var, RenderSettings};

pub const STAGES: usize = 3;

pub fn param_specs(cfg: &ModelConfig) -> ParamSpecs {
    let mut specs = ParamSpecs::default();
    backbone::declare(&mut specs, cfg);
    depth::declare(&mut specs, cfg);
    for stage in 1..=STAGES {
        if stage > 1 {
            error_aware::declare(&mut specs, cfg, stage);
            fusion::declare(&mut specs, cfg, stage);
        }
        gaussians::declare(&mut specs, cfg, stage);
    }
    specs
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    param_specs(cfg).initialise(seed)
}

/// Input images stacked `[N, H, W, 3]` with their full-resolution cameras.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub images: Tensor,
    pub cameras: Vec<Camera>,
}

impl ViewBatch {
    pub fn from_views(views: &[CameraView]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| CoreError::Input("no input views".into()))?;
        let (h, w) = (first.intrinsics.height, first.intrinsics.width);
        let mut data = Vec::with_capacity(views.len() * h * w * 3);
        for v in views {
            if (v.intrinsics.height, v.intrinsics.width) != (h, w) {
                return Err(CoreError::Input("input views differ in size".into()));
            }
            data.extend_from_slice(v.image.data());
        }
        Ok(Self {
            images: Tensor::new(&[views.len(), h, w, 3], data)?,
            cameras: views.iter().map(CameraView::camera).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Cameras rescaled to `h x w`.
    pub fn cameras_at(&self, h: usize, w: usize) -> Vec<Camera> {
        self.cameras.iter().map(|c| c.rescaled(w, h)).collect()
    }
}

/// Grid of stage `i` for `H x W` inputs: `H / 2^(3-i)`.
pub fn stage_grid(stage: usize, h: usize, w: usize) -> (usize, usize) {
    let f = 1 << (STAGES - stage);
    (h / f, w / f)
}

/// Everything one stage produced.
pub struct StageState {
    pub stage: usize,
    pub features: Var,
    /// `[N, h, w]`.
    pub depth: Var,
    pub gs_features: Var,
    /// This stage's own primitives.
    pub gaussians: GaussianVars,
    /// Offset degree from the error-aware module (stages 2 and 3).
    pub offset_degree: Option<Var>,
    /// Error map at this stage's grid that drove the offsets.
    pub error_map: Option<Var>,
    /// Modulation fields applied to stages `1..stage`.
    pub modulation: Vec<Var>,
    /// Per-stage parts of the fused set, earlier ones modulated.
    pub parts: Vec<GaussianVars>,
    pub fused: GaussianVars,
    /// Fused set rendered at the input cameras, `[N, H, W, 3]`; present
    /// when a later stage consumed it.
    pub input_renders: Option<Var>,
    /// Full-resolution `|input_renders - images|`.
    pub input_error: Option<Var>,
}

/// Render a set at each camera, stacked `[N, H, W, 3]`.
pub fn render_views(set: &GaussianVars, cameras: &[Camera], settings: &RenderSettings) -> Result<Var> {
    let mut out = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let (color, _) = render_var(&set.splat_vars(), cam, settings)?;
        let (h, w) = (cam.intrinsics.height, cam.intrinsics.width);
        out.push(color.reshape(&[1, h, w, 3])?);
    }
    Ok(Var::concat(&out, 0)?)
}

/// Forward pass up to `max_stage` (1 to 3).
pub fn run_stages(
    s: &Session,
    cfg: &ModelConfig,
    batch: &ViewBatch,
    cands: &DepthCandidates,
    aux: &dyn AuxFeatureProvider,
    max_stage: usize,
) -> Result<Vec<StageState>> {
    if !(1..=STAGES).contains(&max_stage) {
        return Err(CoreError::Input(format!("stage must be 1, 2 or 3, got {max_stage}")));
    }
    if cands.len() != cfg.depth_candidates {
        return Err(CoreError::Config(format!(
            "{} depth candidates supplied, model built for {}",
            cands.len(),
            cfg.depth_candidates
        )));
    }
    let (h, w) = batch.size();
    let pyramid: FeaturePyramid = backbone::extract_pyramid(s, cfg, &batch.images, aux)?;

    let (h1, w1) = stage_grid(1, h, w);
    let cams1 = batch.cameras_at(h1, w1);
    let f1 = pyramid.f1.clone();
    let volume = depth::build_cost_volume(&f1, &cams1, cands)?;
    let (d1, gs1) = depth::estimate_depth_stage1(s, cfg, &volume, &f1, cands)?;
    let img1 = nn::area_downsample_tensor(&batch.images, h1, w1)?;
    let g1 = gaussians::predict_gaussians(s, cfg, 1, &gs1, &d1, &cams1, &img1)?;
    let mut states = vec![StageState {
        stage: 1,
        features: f1,
        depth: d1,
        gs_features: gs1,
        gaussians: g1.clone(),
        offset_degree: None,
        error_map: None,
        modulation: Vec::new(),
        parts: vec![g1.clone()],
        fused: g1,
        input_renders: None,
        input_error: None,
    }];

    for stage in 2..=max_stage {
        let prev = states.last_mut().expect("stage 1 ran");
        let renders = render_views(&prev.fused, &batch.cameras, &cfg.render)?;
        let err_full = error_aware::compute_error_map(&renders, &batch.images, h, w)?;
        prev.input_renders = Some(renders);
        prev.input_error = Some(err_full.clone());
        let prev_depth = prev.depth.clone();
        let prev_parts = prev.parts.clone();

        let (hi, wi) = stage_grid(stage, h, w);
        let cams = batch.cameras_at(hi, wi);
        let feat = pyramid.stage(stage).clone();
        let err = nn::area_downsample(&err_full, hi, wi)?;
        let (alpha, gs) = error_aware::predict_offsets(s, stage, &err, &feat)?;
        let d = error_aware::refine_depth(&alpha, &prev_depth, cfg.eta)?;
        let img = nn::area_downsample_tensor(&batch.images, hi, wi)?;
        let g = gaussians::predict_gaussians(s, cfg, stage, &gs, &d, &cams, &img)?;

        let mut xi = Vec::with_capacity(stage - 1);
        for k in 1..stage {
            let earlier = &states[k - 1];
            let err_k_full = earlier
                .input_error
                .as_ref()
                .expect("every earlier stage was rendered at the inputs");
            let (hk, wk) = stage_grid(k, h, w);
            let err_k = nn::area_downsample(err_k_full, hk, wk)?;
            let cat = fusion::concat_features(&gs, &earlier.gs_features)?;
            xi.push(fusion::modulation_coefficients(s, stage, k, &cat, &err_k)?);
        }
        let mut stages = prev_parts;
        stages.push(g.clone());
        let (parts, fused) = fusion::fuse(&stages, &xi)?;
        states.push(StageState {
            stage,
            features: feat,
            depth: d,
            gs_features: gs,
            gaussians: g,
            offset_degree: Some(alpha),
            error_map: Some(err),
            modulation: xi,
            parts,
            fused,
            input_renders: None,
            input_error: None,
        });
    }
    Ok(states)
}

/// Trained parameters together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Output of a feed-forward pass.
pub struct Inference {
    pub set: GaussianSet,
    /// One `[H, W, 3]` image per target camera.
    pub renders: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: init_params(&config, seed),
            config,
        })
    }

    pub fn checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        for (k, v) in self.config.signature() {
            ck.meta.insert(format!("model.{k}"), v);
        }
        for (k, v) in extra {
            ck.meta.insert(k.clone(), v.clone());
        }
        ck
    }

    /// Restore parameters for `config`; any architecture mismatch is an error.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        for (k, v) in config.signature() {
            match ck.meta.get(&format!("model.{k}")) {
                Some(stored) if *stored == v => {}
                Some(stored) => {
                    return Err(CoreError::Checkpoint(format!(
                        "checkpoint has {k} = {stored}, config expects {v}"
                    )))
                }
                None => return Err(CoreError::Checkpoint(format!("checkpoint lacks `{k}`"))),
            }
        }
        for spec in &param_specs(&config).0 {
            match ck.params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(CoreError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => {
                    return Err(CoreError::Checkpoint(format!("parameter `{}` missing", spec.name)))
                }
            }
        }
        Ok(Self {
            config,
            params: ck.params.clone(),
        })
    }

    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::read(path.as_ref())
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_checkpoint(config, &ck)
    }

    /// Predict the fused set of `stage` and render it at `targets`.
    pub fn infer(
        &self,
        views: &[CameraView],
        cands: &DepthCandidates,
        aux: &dyn AuxFeatureProvider,
        targets: &[Camera],
        stage: usize,
    ) -> Result<Inference> {
        let s = Session::new(&self.params, false);
        let batch = ViewBatch::from_views(views)?;
        let states = run_stages(&s, &self.config, &batch, cands, aux, stage)?;
        let set = states.last().expect("at least one stage").fused.to_set();
        let splats = set.splats()?;
        let renders = targets
            .iter()
            .map(|cam| render(&splats, cam, &self.config.render).map(|o| o.color))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference { set, renders })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_grids_for_64() {
        assert_eq!(stage_grid(1, 64, 64), (16, 16));
        assert_eq!(stage_grid(2, 64, 64), (32, 32));
        assert_eq!(stage_grid(3, 64, 64), (64, 64));
    }

    #[test]
    fn parameter_names_are_unique() {
        let specs = param_specs(&ModelConfig::default());
        let mut names: Vec<_> = specs.0.iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn checkpoint_signature_mismatch_rejected() {
        let cfg = ModelConfig {
            depth_candidates: 4,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg.clone(), 0).unwrap();
        let ck = m.checkpoint(&[]);
        assert!(Model::from_checkpoint(cfg.clone(), &ck).is_ok());
        let other = ModelConfig {
            depth_candidates: 8,
            ..cfg
        };
        let err = Model::from_checkpoint(other, &ck).unwrap_err().to_string();
        assert!(err.contains("depth_candidates"), "{err}");
    }
}
