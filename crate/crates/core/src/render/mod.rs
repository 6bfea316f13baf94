//! Differentiable Gaussian splatting on the CPU.
//!
//! Primitives are projected with the EWA approximation, sorted front to
//! back, binned into square tiles and alpha-composited per pixel. The
//! backward pass replays each pixel's contribution list, so it needs the
//! state of a matching forward call.

mod project;
mod raster;
mod reference;

use std::rc::Rc;

use hgs_autodiff::{Tensor, Var};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{CoreError, Result};
use crate::sh;

pub use project::{perspective_jacobian, quat_to_rot, ProjectedGaussian};
pub use reference::render_reference;

use project::PrimitiveRef;
use raster::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile: usize,
    /// Contributions with `opacity · g(x)` below this are skipped.
    pub alpha_min: f64,
    /// Per-contribution alpha cap.
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
    /// Primitives with camera-frame depth at or below this are culled.
    pub near: f64,
    /// Added to both diagonal entries of every screen covariance (pixels²).
    pub dilation: f64,
    pub background: [f64; 3],
    /// Bin every primitive into every tile regardless of footprint.
    pub full_coverage: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile: 16,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            near: 0.01,
            dilation: 0.3,
            background: [0.0; 3],
            full_coverage: false,
        }
    }
}

impl RenderSettings {
    /// No thresholds, caps or early exits: the image is a smooth function of
    /// every parameter, which is what finite-difference checks need.
    pub fn smooth() -> Self {
        Self {
            alpha_min: 0.0,
            alpha_max: 1.0,
            transmittance_min: 0.0,
            full_coverage: true,
            ..Self::default()
        }
    }
}

/// Flat primitive arrays: `means [M,3]`, `scales [M,3]` (positive, world
/// units), `rotations [M,4]` (quaternion `w,x,y,z`, normalized internally),
/// `opacities [M]`, `sh [M, 3·(deg+1)²]`.
#[derive(Clone, Debug)]
pub struct Splats {
    pub means: Rc<Tensor>,
    pub scales: Rc<Tensor>,
    pub rotations: Rc<Tensor>,
    pub opacities: Rc<Tensor>,
    pub sh: Rc<Tensor>,
    pub sh_degree: usize,
}

impl Splats {
    pub fn new(
        means: Rc<Tensor>,
        scales: Rc<Tensor>,
        rotations: Rc<Tensor>,
        opacities: Rc<Tensor>,
        sh: Rc<Tensor>,
        sh_degree: usize,
    ) -> Result<Self> {
        if sh_degree > sh::MAX_SH_DEGREE {
            return Err(CoreError::Render(format!("sh degree {sh_degree} exceeds 3")));
        }
        let m = means.shape().first().copied().unwrap_or(0);
        let kc = 3 * sh::num_coeffs(sh_degree);
        let expect: [(&str, &Tensor, Vec<usize>); 5] = [
            ("means", &means, vec![m, 3]),
            ("scales", &scales, vec![m, 3]),
            ("rotations", &rotations, vec![m, 4]),
            ("opacities", &opacities, vec![m]),
            ("sh", &sh, vec![m, kc]),
        ];
        for (name, t, shape) in &expect {
            if t.shape() != shape.as_slice() {
                return Err(CoreError::Render(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            means,
            scales,
            rotations,
            opacities,
            sh,
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.opacities.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward products needed by the backward pass.
pub struct RenderState {
    splats: Splats,
    camera: Camera,
    settings: RenderSettings,
    frame: Frame,
    projected: Vec<Option<ProjectedGaussian>>,
    tiles: Vec<Vec<u32>>,
}

impl RenderState {
    pub fn projected(&self) -> &[Option<ProjectedGaussian>] {
        &self.projected
    }
}

pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub color: Tensor,
    /// `[H, W]`, one minus the final transmittance.
    pub alpha: Tensor,
    /// Accepted contributions per pixel, row-major.
    pub contributors: Vec<u32>,
    pub state: Option<Rc<RenderState>>,
}

#[derive(Clone, Debug)]
pub struct SplatGrads {
    pub means: Tensor,
    pub scales: Tensor,
    pub rotations: Tensor,
    pub opacities: Tensor,
    pub sh: Tensor,
}

pub fn render(splats: &Splats, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    if settings.tile == 0 {
        return Err(CoreError::Render("tile size must be positive".into()));
    }
    let k = &camera.intrinsics;
    let frame = Frame::new(k.width, k.height, settings.tile);
    let deg = splats.sh_degree;
    let kc = 3 * sh::num_coeffs(deg);
    let (means, scales, quats, opac, shd) = (
        splats.means.data(),
        splats.scales.data(),
        splats.rotations.data(),
        splats.opacities.data(),
        splats.sh.data(),
    );
    let projected: Vec<Option<ProjectedGaussian>> = (0..splats.len())
        .into_par_iter()
        .map(|i| {
            let p = PrimitiveRef {
                mean: &means[3 * i..3 * i + 3],
                scale: &scales[3 * i..3 * i + 3],
                quat: &quats[4 * i..4 * i + 4],
                opacity: opac[i],
                sh: &shd[i * kc..(i + 1) * kc],
            };
            project::project(i, &p, deg, camera, settings)
        })
        .collect();
    let order = raster::depth_order(&projected);
    let tiles = raster::bin(&projected, &order, &frame);
    let img = raster::rasterize(&projected, &tiles, &frame, settings);
    let (h, w) = (k.height, k.width);
    Ok(RenderOutput {
        color: Tensor::new(&[h, w, 3], img.color)?,
        alpha: Tensor::new(&[h, w], img.alpha)?,
        contributors: img.contributors,
        state: Some(Rc::new(RenderState {
            splats: splats.clone(),
            camera: *camera,
            settings: settings.clone(),
            frame,
            projected,
            tiles,
        })),
    })
}

/// Gradients of every primitive parameter given the gradient on `color`.
pub fn render_backward(out: &RenderOutput, grad_color: &Tensor) -> Result<SplatGrads> {
    let state = out
        .state
        .as_ref()
        .ok_or_else(|| CoreError::Render("no forward state: render with `render` first".into()))?;
    backward_from_state(state, grad_color)
}

fn backward_from_state(state: &RenderState, grad_color: &Tensor) -> Result<SplatGrads> {
    let (h, w) = (state.frame.height, state.frame.width);
    if grad_color.shape() != [h, w, 3] {
        return Err(CoreError::Render(format!(
            "color gradient has shape {:?}, expected [{h}, {w}, 3]",
            grad_color.shape()
        )));
    }
    let screen = raster::rasterize_backward(
        &state.projected,
        &state.tiles,
        &state.frame,
        &state.settings,
        grad_color.data(),
    );
    let s = &state.splats;
    let deg = s.sh_degree;
    let kc = 3 * sh::num_coeffs(deg);
    let (scales, shd) = (s.scales.data(), s.sh.data());
    let m = s.len();
    let (projected, camera) = (&state.projected, &state.camera);
    let per: Vec<Option<([f64; 3], [f64; 3], [f64; 4], f64, Vec<f64>)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let pg = projected[i].as_ref()?;
            let mut dsh = vec![0.0; kc];
            let g = project::project_backward(
                pg,
                &screen[i],
                &scales[3 * i..3 * i + 3],
                &shd[i * kc..(i + 1) * kc],
                deg,
                camera,
                &mut dsh,
            );
            Some((g.mean, g.scale, g.quat, g.opacity, dsh))
        })
        .collect();
    let mut out = SplatGrads {
        means: Tensor::zeros(&[m, 3]),
        scales: Tensor::zeros(&[m, 3]),
        rotations: Tensor::zeros(&[m, 4]),
        opacities: Tensor::zeros(&[m]),
        sh: Tensor::zeros(&[m, kc]),
    };
    for (i, g) in per.into_iter().enumerate() {
        let Some((dm, ds, dq, dop, dsh)) = g else {
            continue;
        };
        out.means.data_mut()[3 * i..3 * i + 3].copy_from_slice(&dm);
        out.scales.data_mut()[3 * i..3 * i + 3].copy_from_slice(&ds);
        out.rotations.data_mut()[4 * i..4 * i + 4].copy_from_slice(&dq);
        out.opacities.data_mut()[i] = dop;
        out.sh.data_mut()[i * kc..(i + 1) * kc].copy_from_slice(&dsh);
    }
    Ok(out)
}

/// Differentiable inputs of the renderer as graph variables.
#[derive(Clone)]
pub struct SplatVars<'a> {
    pub means: &'a Var,
    pub scales: &'a Var,
    pub rotations: &'a Var,
    pub opacities: &'a Var,
    pub sh: &'a Var,
    pub sh_degree: usize,
}

/// Render as a graph operation: returns the `[H, W, 3]` color variable and
/// the full output (alpha, contributor counts).
pub fn render_var(v: &SplatVars<'_>, camera: &Camera, settings: &RenderSettings) -> Result<(Var, RenderOutput)> {
    let splats = Splats::new(
        v.means.shared_value(),
        v.scales.shared_value(),
        v.rotations.shared_value(),
        v.opacities.shared_value(),
        v.sh.shared_value(),
        v.sh_degree,
    )?;
    let out = render(&splats, camera, settings)?;
    let state = out.state.clone().expect("render keeps state");
    let graph = v.means.graph().clone();
    let color = graph.record(
        out.color.clone(),
        &[v.means, v.scales, v.rotations, v.opacities, v.sh],
        move |grad, _need| {
            let g = backward_from_state(&state, grad).expect("gradient shape matches render output");
            vec![Some(g.means), Some(g.scales), Some(g.rotations), Some(g.opacities), Some(g.sh)]
        },
    )?;
    Ok((color, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};

    fn camera(w: usize, h: usize) -> Camera {
        Camera {
            intrinsics: Intrinsics::new(60.0, 60.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            pose: Pose::identity(),
        }
    }

    fn single(mean: [f64; 3], scale: f64, opacity: f64) -> Splats {
        Splats::new(
            Rc::new(Tensor::new(&[1, 3], mean.to_vec()).unwrap()),
            Rc::new(Tensor::full(&[1, 3], scale)),
            Rc::new(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()),
            Rc::new(Tensor::full(&[1], opacity)),
            Rc::new(Tensor::zeros(&[1, 3])),
            0,
        )
        .unwrap()
    }

    #[test]
    fn empty_set_is_background() {
        let s = Splats::new(
            Rc::new(Tensor::zeros(&[0, 3])),
            Rc::new(Tensor::zeros(&[0, 3])),
            Rc::new(Tensor::zeros(&[0, 4])),
            Rc::new(Tensor::zeros(&[0])),
            Rc::new(Tensor::zeros(&[0, 3])),
            0,
        )
        .unwrap();
        let settings = RenderSettings {
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let out = render(&s, &camera(8, 8), &settings).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 0.0));
        for px in out.color.data().chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn single_primitive_closed_form() {
        // On the optical axis, which passes through the center of pixel (16, 16).
        let cam = Camera {
            intrinsics: Intrinsics::new(60.0, 60.0, 16.5, 16.5, 32, 32).unwrap(),
            pose: Pose::identity(),
        };
        let d = 2.0;
        let mean = [0.0, 0.0, d];
        let s = 0.02;
        let out = render(&single(mean, s, 0.9), &cam, &RenderSettings::default()).unwrap();
        let var = (60.0 * s / d).powi(2) + 0.3;
        for (x, y) in [(16usize, 16usize), (17, 16), (16, 18), (14, 13)] {
            let dx = x as f64 - 16.0;
            let dy = y as f64 - 16.0;
            let expect = 0.9 * (-0.5 * (dx * dx + dy * dy) / var).exp();
            let got = out.alpha.get(&[y, x]);
            if expect >= 1.0 / 255.0 {
                assert!((got - expect).abs() < 1e-12, "({x},{y}) {got} vs {expect}");
            } else {
                assert_eq!(got, 0.0);
            }
        }
        assert!((out.alpha.get(&[16, 16]) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_forward_state() {
        let cam = camera(8, 8);
        let out = render_reference(&single([0.0, 0.0, 2.0], 0.1, 0.5), &cam, &RenderSettings::default()).unwrap();
        let err = render_backward(&out, &Tensor::zeros(&[8, 8, 3])).unwrap_err();
        assert!(err.to_string().contains("forward state"));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = camera(16, 16);
        let out = render(&single([0.0, 0.0, 2.0], 0.1, 0.5), &cam, &RenderSettings::default()).unwrap();
        let g = render_backward(&out, &Tensor::zeros(&[16, 16, 3])).unwrap();
        for t in [&g.means, &g.scales, &g.rotations, &g.opacities, &g.sh] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn vanishing_opacity_kills_center_gradient() {
        let cam = camera(16, 16);
        let mut prev = f64::INFINITY;
        for o in [1e-1, 1e-3, 1e-6] {
            let out = render(&single([0.05, 0.0, 2.0], 0.1, o), &cam, &RenderSettings::smooth()).unwrap();
            let g = render_backward(&out, &Tensor::ones(&[16, 16, 3])).unwrap();
            let n = g.means.max_abs();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-4);
    }
}
