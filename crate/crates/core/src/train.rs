//! Objective, optimiser, schedule and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hgs_autodiff::{ParamStore, Session, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::AuxFeatureProvider;
use crate::camera::{Camera, CameraView};
use crate::config::TrainConfig;
use crate::depth::{sample_depth_candidates, DepthCandidates};
use crate::error::{CoreError, Result};
use crate::model::{render_views, run_stages, Model, ViewBatch, STAGES};

/// Pluggable perceptual term of the objective.
pub trait PerceptualLoss {
    fn name(&self) -> &str;
    /// Scalar loss between `pred [T, H, W, 3]` and `target` of equal shape.
    fn loss(&self, pred: &Var, target: &Tensor) -> Result<Var>;
}

/// Squared difference of finite-difference image gradients, averaged over
/// `levels` dyadic scales. A weight-free stand-in for a learned metric.
#[derive(Clone, Debug)]
pub struct GradientDifference {
    pub levels: usize,
}

impl Default for GradientDifference {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

fn finite_differences(x: &Var) -> Result<(Var, Var)> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let dy = x.slice(1, 1, h)?.sub(&x.slice(1, 0, h - 1)?)?;
    let dx = x.slice(2, 1, w)?.sub(&x.slice(2, 0, w - 1)?)?;
    Ok((dy, dx))
}

impl PerceptualLoss for GradientDifference {
    fn name(&self) -> &str {
        "gradient-difference"
    }

    fn loss(&self, pred: &Var, target: &Tensor) -> Result<Var> {
        let mut p = pred.clone();
        let mut t = pred.constant_like(target.clone());
        let mut total: Option<Var> = None;
        let mut used = 0;
        for level in 0..self.levels.max(1) {
            let (h, w) = (p.shape()[1], p.shape()[2]);
            if h < 2 || w < 2 {
                break;
            }
            let (py, px) = finite_differences(&p)?;
            let (ty, tx) = finite_differences(&t)?;
            let term = py.sub(&ty)?.square()?.mean_all().add(&px.sub(&tx)?.square()?.mean_all())?;
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
            used += 1;
            if level + 1 < self.levels && h % 2 == 0 && w % 2 == 0 {
                p = crate::nn::area_downsample(&p, h / 2, w / 2)?;
                t = crate::nn::area_downsample(&t, h / 2, w / 2)?;
            } else {
                break;
            }
        }
        let total = total.ok_or_else(|| CoreError::Input("images too small for gradients".into()))?;
        Ok(total.mul_scalar(1.0 / used as f64)?)
    }
}

/// `lambda_mse · MSE + lambda_p · perceptual` for one stage.
pub fn image_loss(
    pred: &Var,
    target: &Tensor,
    lambda_mse: f64,
    lambda_perceptual: f64,
    perceptual: &dyn PerceptualLoss,
) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Input(format!(
            "render {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let mse = pred.sub(&pred.constant_like(target.clone()))?.square()?.mean_all();
    let mut loss = mse.mul_scalar(lambda_mse)?;
    if lambda_perceptual > 0.0 {
        loss = loss.add(&perceptual.loss(pred, target)?.mul_scalar(lambda_perceptual)?)?;
    }
    Ok(loss)
}

/// Sum of per-stage losses, plus the per-stage values.
pub fn objective(
    stage_renders: &[Var],
    target: &Tensor,
    cfg: &TrainConfig,
    perceptual: &dyn PerceptualLoss,
) -> Result<(Var, Vec<f64>)> {
    let mut total: Option<Var> = None;
    let mut per_stage = Vec::with_capacity(stage_renders.len());
    for r in stage_renders {
        let l = image_loss(r, target, cfg.lambda_mse, cfg.lambda_lpips, perceptual)?;
        per_stage.push(l.value().data()[0]);
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| CoreError::Input("no stage renders".into()))?;
    Ok((total, per_stage))
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Adam {
    pub fn update(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / b1t) / ((*vi / b2t).sqrt() + self.eps);
            }
        }
    }
}

/// Input views and supervised target views for one step.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub inputs: Vec<CameraView>,
    pub targets: Vec<CameraView>,
    pub near: f64,
    pub far: f64,
}

impl TrainSample {
    pub fn flipped(&self) -> Self {
        Self {
            inputs: self.inputs.iter().map(CameraView::flipped).collect(),
            targets: self.targets.iter().map(CameraView::flipped).collect(),
            ..*self
        }
    }
}

pub trait SceneProvider {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<TrainSample>;
}

/// Always the same scene.
#[derive(Clone, Debug)]
pub struct FixedScene(pub TrainSample);

impl SceneProvider for FixedScene {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> Result<TrainSample> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub stage_losses: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,loss,loss_stage1,loss_stage2,loss_stage3,grad_norm,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        let mut s = format!("{},{:.10e}", self.step, self.loss);
        for l in &self.stage_losses {
            let _ = write!(s, ",{l:.10e}");
        }
        let _ = write!(s, ",{:.10e},{:.10e}", self.grad_norm, self.lr);
        s
    }
}

/// Depth candidates for a sample, honouring config overrides.
pub fn candidates_for(cfg: &TrainConfig, sample: &TrainSample) -> Result<DepthCandidates> {
    sample_depth_candidates(
        cfg.near.unwrap_or(sample.near),
        cfg.far.unwrap_or(sample.far),
        cfg.depth_candidates,
    )
}

/// Forward pass with per-stage renders at the targets; returns the loss
/// and the session that holds the graph.
pub fn forward_loss(
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
    aux: &dyn AuxFeatureProvider,
    perceptual: &dyn PerceptualLoss,
    trainable: bool,
) -> Result<(Session, Var, Vec<f64>)> {
    let s = Session::new(&model.params, trainable);
    let (loss, per_stage) = loss_in_session(&s, model, sample, cfg, aux, perceptual)?;
    Ok((s, loss, per_stage))
}

/// Objective evaluated with the parameters bound in `s`.
pub fn loss_in_session(
    s: &Session,
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
    aux: &dyn AuxFeatureProvider,
    perceptual: &dyn PerceptualLoss,
) -> Result<(Var, Vec<f64>)> {
    let batch = ViewBatch::from_views(&sample.inputs)?;
    let cands = candidates_for(cfg, sample)?;
    let states = run_stages(s, &model.config, &batch, &cands, aux, STAGES)?;
    let mut targets: Vec<CameraView> = sample.targets.clone();
    if cfg.supervise_inputs {
        targets.extend(sample.inputs.iter().cloned());
    }
    let target_batch = ViewBatch::from_views(&targets)?;
    let held_out: Vec<Camera> = sample.targets.iter().map(|v| v.camera()).collect();
    let mut renders = Vec::with_capacity(states.len());
    for st in &states {
        let mut parts = Vec::with_capacity(2);
        if !held_out.is_empty() {
            parts.push(render_views(&st.fused, &held_out, &model.config.render)?);
        }
        if cfg.supervise_inputs {
            // earlier stages were already rendered at the inputs for their error maps
            parts.push(match &st.input_renders {
                Some(v) => v.clone(),
                None => render_views(&st.fused, &batch.cameras, &model.config.render)?,
            });
        }
        renders.push(match parts.len() {
            1 => parts.pop().expect("one part"),
            _ => Var::concat(&parts, 0)?,
        });
    }
    objective(&renders, &target_batch.images, cfg, perceptual)
}

/// Training config recorded in checkpoint metadata; keys that are absent
/// keep their defaults.
pub fn config_from_meta(meta: &IndexMap<String, String>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in meta {
        if let Some(key) = k.strip_prefix("train.") {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub aux: &'a dyn AuxFeatureProvider,
    pub perceptual: Box<dyn PerceptualLoss>,
    pub log: Vec<LogRow>,
    pub out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, aux: &'a dyn AuxFeatureProvider) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(), cfg.seed)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            cfg,
            model,
            adam: Adam::default(),
            step: 0,
            aux,
            perceptual: Box::new(GradientDifference::default()),
            log: Vec::new(),
            out_dir: None,
        })
    }

    /// Write checkpoints, the CSV log and divergence snapshots under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("train_log.csv"), format!("{LOG_HEADER}\n"))?;
        fs::write(dir.join("config.txt"), self.cfg.to_text())?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    /// Step counter plus the full training config under `train.*`.
    pub fn checkpoint_meta(&self) -> Vec<(String, String)> {
        let mut meta = vec![("step".to_string(), self.step.to_string())];
        for line in self.cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.push((format!("train.{}", k.trim()), v.trim().to_string()));
            }
        }
        meta
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.model
            .checkpoint(&self.checkpoint_meta())
            .write(path)
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))
    }

    fn diverged(&self, sample: &TrainSample, detail: String) -> CoreError {
        if let Some(dir) = &self.out_dir {
            let snap = dir.join(format!("diverged_step{}", self.step));
            let _ = fs::create_dir_all(&snap);
            let _ = self.save_checkpoint(&snap.join("params.hsp"));
            let mut text = String::new();
            let _ = writeln!(text, "{detail}");
            let _ = writeln!(text, "near = {} far = {}", sample.near, sample.far);
            for (i, v) in sample.inputs.iter().chain(&sample.targets).enumerate() {
                let _ = writeln!(text, "view {i}: intrinsics {:?} pose {:?}", v.intrinsics, v.pose.matrix());
                let bytes: Vec<u8> = v.image.data().iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
                let _ = fs::write(snap.join(format!("view{i}.f32")), bytes);
            }
            let _ = fs::write(snap.join("batch.txt"), text);
        }
        CoreError::Diverged {
            step: self.step,
            detail,
        }
    }

    /// One optimisation step over `cfg.batch` samples.
    pub fn step(&mut self, provider: &mut dyn SceneProvider) -> Result<LogRow> {
        let step = self.step + 1;
        let lr = learning_rate(step, self.cfg.iters, self.cfg.warmup_steps, self.cfg.lr);
        let mut grads: IndexMap<String, Tensor> = IndexMap::new();
        let mut loss = 0.0;
        let mut stage_losses = vec![0.0; STAGES];
        let scale = 1.0 / self.cfg.batch as f64;
        for _ in 0..self.cfg.batch {
            let mut sample = provider.sample(&mut self.rng)?;
            if self.cfg.flip_augment && self.rng.gen_bool(0.5) {
                sample = sample.flipped();
            }
            let (s, l, per) =
                forward_loss(&self.model, &sample, &self.cfg, self.aux, self.perceptual.as_ref(), true)?;
            let value = l.value().data()[0];
            if !value.is_finite() {
                return Err(self.diverged(&sample, format!("loss is {value} at step {step}")));
            }
            let g = s.graph().backward(&l, None)?;
            for (name, t) in s.gradients(&g) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
            loss += value * scale;
            for (a, b) in stage_losses.iter_mut().zip(&per) {
                *a += b * scale;
            }
            if grads.values().any(|t| !t.all_finite()) {
                return Err(self.diverged(&sample, format!("non-finite gradient at step {step}")));
            }
        }
        if self.cfg.batch > 1 {
            for t in grads.values_mut() {
                *t = t.map(|v| v * scale);
            }
        }
        let grad_norm = grads
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        self.adam.update(&mut self.model.params, &grads, lr);
        self.step = step;
        let row = LogRow {
            step,
            loss,
            stage_losses,
            grad_norm,
            lr,
        };
        if let Some(dir) = &self.out_dir {
            use std::io::Write as _;
            let mut f = fs::OpenOptions::new().append(true).open(dir.join("train_log.csv"))?;
            writeln!(f, "{}", row.csv())?;
            if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint(&dir.join(format!("step{step:06}.hsp")))?;
            }
        }
        self.log.push(row.clone());
        Ok(row)
    }

    /// Run the remaining steps up to `cfg.iters`, writing a final checkpoint
    /// when an output directory is set.
    pub fn run(&mut self, provider: &mut dyn SceneProvider, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        while self.step < self.cfg.iters {
            let row = self.step(provider)?;
            on_step(&row);
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join("final.hsp"))?;
        }
        Ok(())
    }
}
