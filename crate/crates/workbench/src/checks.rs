//! Finite-difference suites behind `hgs gradcheck` and the acceptance run.

use hgs_autodiff::gradcheck::{check_gradients, GradCheckOptions};
use hgs_autodiff::{attention_block, Graph, Session, Tensor, TensorError, Var};
use hgs_core::backbone::PatchProjectionAux;
use hgs_core::camera::{Camera, Intrinsics, Pose};
use hgs_core::config::TrainConfig;
use hgs_core::model::Model;
use hgs_core::render::{render_var, RenderSettings, SplatVars};
use hgs_core::train::{loss_in_session, GradientDifference};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synth::{synth_scene, SceneKind, SynthOptions};
use crate::Result;

/// Tolerance on the worst relative error of a single primitive.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance on the worst relative error through the whole model.
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
/// Finite-difference step for the whole-model check.
pub const PIPELINE_STEP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Where the worst entry sits, with both derivative estimates.
    pub worst: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} entries {:>5}  max rel err {:.3e}  (tol {:e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.tolerance
        )
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in `[0.1, 1)` so kinks at zero are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn run(
    name: &str,
    labels: &[String],
    inputs: &[Tensor],
    f: impl Fn(&Graph, &[Var]) -> hgs_autodiff::Result<Var>,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<CheckOutcome> {
    let r = check_gradients(inputs, f, opts)?;
    let worst = r.worst.map(|m| {
        let input = labels.get(m.input).cloned().unwrap_or_else(|| format!("input {}", m.input));
        format!("{input}[{}]: analytic {:.6e}, numeric {:.6e}", m.index, m.analytic, m.numeric)
    });
    Ok(CheckOutcome {
        name: name.to_string(),
        checked: r.checked,
        max_rel_err: r.max_rel_err,
        tolerance,
        worst,
    })
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&Graph, &[Var]) -> hgs_autodiff::Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let points = Tensor::from_fn(&[2, 3, 3, 2], |_| rng.gen_range(-0.5..5.5));
    let positive = away_from_zero(&[3, 5], 13).map(|v| v.abs() + 0.5);
    vec![
        ("conv2d", vec![random(&[1, 5, 4, 2], 1), random(&[3, 3, 2, 3], 2)], Box::new(|_, v| v[0].conv2d(&v[1], 1, 1))),
        ("conv2d stride 2", vec![random(&[2, 6, 5, 3], 3), random(&[3, 3, 3, 2], 4)], Box::new(|_, v| v[0].conv2d(&v[1], 2, 1))),
        ("matmul", vec![random(&[3, 4], 7), random(&[4, 2], 8)], Box::new(|_, v| v[0].matmul(&v[1]))),
        ("matmul batched", vec![random(&[2, 3, 4], 9), random(&[2, 4, 5], 10)], Box::new(|_, v| v[0].matmul(&v[1]))),
        ("add broadcast", vec![random(&[2, 3, 4], 11), random(&[3, 1], 12)], Box::new(|_, v| v[0].add(&v[1]))),
        ("sub broadcast", vec![random(&[2, 3, 4], 11), random(&[3, 1], 12)], Box::new(|_, v| v[0].sub(&v[1]))),
        ("mul broadcast", vec![random(&[2, 3, 4], 11), random(&[3, 1], 12)], Box::new(|_, v| v[0].mul(&v[1]))),
        ("abs", vec![away_from_zero(&[3, 5], 13)], Box::new(|_, v| v[0].abs())),
        ("relu", vec![away_from_zero(&[3, 5], 13)], Box::new(|_, v| v[0].relu())),
        ("sigmoid", vec![random(&[3, 5], 13)], Box::new(|_, v| v[0].sigmoid())),
        ("softplus", vec![random(&[3, 5], 13)], Box::new(|_, v| v[0].softplus())),
        ("exp", vec![random(&[3, 5], 13)], Box::new(|_, v| v[0].exp())),
        ("log", vec![positive], Box::new(|_, v| v[0].log())),
        ("square", vec![random(&[3, 5], 13)], Box::new(|_, v| v[0].square())),
        ("softmax", vec![random(&[2, 3, 4], 15)], Box::new(|_, v| v[0].softmax(1))),
        ("layer_norm", vec![random(&[4, 6], 23)], Box::new(|_, v| v[0].layer_norm(1e-5))),
        ("bilinear up", vec![random(&[2, 3, 4, 2], 16)], Box::new(|_, v| v[0].bilinear_resize(7, 5))),
        ("bilinear down", vec![random(&[1, 8, 8, 3], 17)], Box::new(|_, v| v[0].bilinear_resize(3, 4))),
        ("grid_sample", vec![random(&[2, 5, 5, 3], 19)], Box::new(move |_, v| v[0].grid_sample(&[1, 0], &points))),
        ("concat", vec![random(&[2, 3, 2], 20), random(&[2, 1, 2], 21)], Box::new(|_, v| Var::concat(&[v[0].clone(), v[1].clone()], 1))),
        ("slice", vec![random(&[2, 3, 2], 20)], Box::new(|_, v| v[0].slice(1, 1, 3))),
        ("transpose", vec![random(&[2, 3, 2], 20)], Box::new(|_, v| v[0].transpose(&[2, 0, 1]))),
        ("reshape", vec![random(&[2, 3, 2], 20)], Box::new(|_, v| v[0].reshape(&[3, 4]))),
        ("sum", vec![random(&[3, 4, 2], 22)], Box::new(|_, v| v[0].sum_axis(1, false))),
        ("mean", vec![random(&[3, 4, 2], 22)], Box::new(|_, v| v[0].mean_axis(2, true))),
        ("max", vec![random(&[3, 4, 2], 22)], Box::new(|_, v| v[0].max_axis(0, false))),
        (
            "attention",
            vec![random(&[2, 3, 4], 24), random(&[2, 5, 4], 25), random(&[2, 5, 4], 26)],
            Box::new(|_, x| attention_block(&x[0], &x[1], &x[2], 2)),
        ),
    ]
}

fn splat_camera(size: usize) -> Result<Camera> {
    let s = size as f64;
    Ok(Camera {
        intrinsics: Intrinsics::new(1.1 * s, 1.1 * s, s / 2.0, s / 2.0, size, size)?,
        pose: Pose::look_at(
            Vector3::new(0.3, -0.2, -0.1),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 1.0, 0.0),
        )?,
    })
}

/// Primitives in front of [`splat_camera`], scales kept well above the
/// finite-difference step.
fn splat_inputs(m: usize, degree: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kc = 3 * (degree + 1) * (degree + 1);
    vec![
        Tensor::from_fn(&[m, 3], |i| match i % 3 {
            2 => rng.gen_range(2.0..4.0),
            _ => rng.gen_range(-0.8..0.8),
        }),
        Tensor::from_fn(&[m, 3], |_| rng.gen_range(0.1..0.3)),
        Tensor::from_fn(&[m, 4], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(&[m], |_| rng.gen_range(0.05..0.95)),
        Tensor::from_fn(&[m, kc], |_| rng.gen_range(-0.3..0.3)),
    ]
}

fn splat_case(name: &str, m: usize, degree: usize, seed: u64) -> Result<CheckOutcome> {
    let cam = splat_camera(12)?;
    let labels = ["means", "scales", "rotations", "opacities", "sh"].map(String::from);
    run(
        name,
        &labels,
        &splat_inputs(m, degree, seed),
        |_, v| {
            let sv = SplatVars {
                means: &v[0],
                scales: &v[1],
                rotations: &v[2],
                opacities: &v[3],
                sh: &v[4],
                sh_degree: degree,
            };
            render_var(&sv, &cam, &RenderSettings::smooth())
                .map(|r| r.0)
                .map_err(|e| TensorError::invalid("render", e.to_string()))
        },
        PRIMITIVE_TOLERANCE,
        &GradCheckOptions::default(),
    )
}

/// Every tensor primitive plus the splatting backward pass.
pub fn primitive_suite() -> Result<Vec<CheckOutcome>> {
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    for (name, inputs, f) in primitive_cases() {
        out.push(run(name, &[], &inputs, f, PRIMITIVE_TOLERANCE, &opts)?);
    }
    out.push(splat_case("splat single", 1, 1, 10)?);
    out.push(splat_case("splat overlapping", 6, 3, 11)?);
    Ok(out)
}

/// Training loss of the full three-stage model on a 16x16 two-view scene,
/// differentiated with respect to `entries_per_tensor` evenly spaced
/// entries of every parameter tensor. Rendering uses smooth settings so
/// the loss has no thresholds to straddle.
pub fn pipeline_check(seed: u64, entries_per_tensor: usize) -> Result<CheckOutcome> {
    let opts = SynthOptions {
        width: 16,
        height: 16,
        ..SynthOptions::default()
    };
    let scene = synth_scene(SceneKind::TexturedCube, seed, &opts)?;
    let sample = scene.train_sample()?;
    let cfg = TrainConfig {
        depth_candidates: 8,
        lambda_lpips: 0.1,
        ..TrainConfig::overfit()
    };
    let mut mc = cfg.model_config();
    mc.render = RenderSettings::smooth();
    let model = Model::new(mc, seed)?;
    let aux = PatchProjectionAux::new(model.config.aux_channels, seed);
    let perceptual = GradientDifference::default();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    // The network holds thousands of ReLU kinks that shift together when one
    // weight moves; a short step keeps central differences from straddling them.
    let gc = GradCheckOptions {
        step: PIPELINE_STEP,
        max_entries: Some(entries_per_tensor),
        ..GradCheckOptions::default()
    };
    run(
        "pipeline 16x16",
        &names,
        &inputs,
        |g, v| {
            let s = Session::from_vars(g, names.iter().map(String::as_str).zip(v.iter().cloned()));
            loss_in_session(&s, &model, &sample, &cfg, &aux, &perceptual)
                .map(|(l, _)| l)
                .map_err(|e| TensorError::invalid("pipeline", e.to_string()))
        },
        PIPELINE_TOLERANCE,
        &gc,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_line_marks_failures() {
        let o = CheckOutcome {
            name: "x".into(),
            checked: 3,
            max_rel_err: 2e-6,
            tolerance: 1e-6,
            worst: None,
        };
        assert!(!o.passed());
        assert!(o.line().starts_with("FAIL"));
    }

    #[test]
    fn primitives_pass() {
        for o in primitive_suite().unwrap() {
            assert!(o.passed(), "{}", o.line());
        }
    }
}
