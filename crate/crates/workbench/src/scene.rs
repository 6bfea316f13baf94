//! Scene directories: `cameras.json` plus `images/` (and optional depth).
//!
//! ```json
//! {
//!   "near": 1.0, "far": 8.0,
//!   "views": [
//!     {"image": "images/000.png", "fx": 64, "fy": 64, "cx": 32, "cy": 32,
//!      "world_to_cam": [16 row-major numbers], "role": "input",
//!      "depth": "depth/000.f32"}
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use hgs_autodiff::Tensor;
use hgs_core::camera::{Camera, CameraView, Intrinsics, Pose};
use hgs_core::train::TrainSample;
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::image_io::{read_png, read_raw, write_png, write_raw};
use crate::{Result, WorkbenchError};

/// Rotations further than this from SO(3) are rejected rather than snapped.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: Vec<f64>,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug)]
pub struct SceneView {
    pub name: String,
    pub camera: Camera,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` camera-frame depth, 0 where nothing was hit.
    pub depth: Option<Tensor>,
    pub role: Role,
}

impl SceneView {
    pub fn camera_view(&self) -> Result<CameraView> {
        Ok(CameraView::new(self.camera.intrinsics, self.camera.pose, self.image.clone())?)
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub views: Vec<SceneView>,
    pub near: f64,
    pub far: f64,
}

impl Scene {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &SceneView> {
        self.views.iter().filter(move |v| v.role == role)
    }

    pub fn inputs(&self) -> Result<Vec<CameraView>> {
        self.with_role(Role::Input).map(SceneView::camera_view).collect()
    }

    pub fn targets(&self) -> Result<Vec<CameraView>> {
        self.with_role(Role::Target).map(SceneView::camera_view).collect()
    }

    pub fn train_sample(&self) -> Result<TrainSample> {
        Ok(TrainSample {
            inputs: self.inputs()?,
            targets: self.targets()?,
            near: self.near,
            far: self.far,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n_in = self.with_role(Role::Input).count();
        let n_tar = self.with_role(Role::Target).count();
        if n_in < 2 || n_tar < 1 {
            return Err(WorkbenchError::Scene(format!(
                "need at least 2 input and 1 target views, found {n_in} and {n_tar}"
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(WorkbenchError::Scene(format!(
                "depth bounds must satisfy 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> SceneDescriptor {
        SceneDescriptor {
            near: self.near,
            far: self.far,
            views: self
                .views
                .iter()
                .map(|v| {
                    let k = v.camera.intrinsics;
                    let m = v.camera.pose.matrix();
                    ViewEntry {
                        image: format!("images/{}.png", v.name),
                        fx: k.fx,
                        fy: k.fy,
                        cx: k.cx,
                        cy: k.cy,
                        world_to_cam: (0..16).map(|i| m[(i / 4, i % 4)]).collect(),
                        role: v.role,
                        depth: v.depth.as_ref().map(|_| format!("depth/{}.f32", v.name)),
                    }
                })
                .collect(),
        }
    }

    /// Write `cameras.json`, PNG images and raw depth maps under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "depth"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| WorkbenchError::io(dir.join(sub), e))?;
        }
        let desc = self.descriptor();
        for (v, entry) in self.views.iter().zip(&desc.views) {
            write_png(&dir.join(&entry.image), &v.image)?;
            if let (Some(d), Some(rel)) = (&v.depth, &entry.depth) {
                write_raw(&dir.join(rel), d)?;
            }
        }
        let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
        let path = dir.join("cameras.json");
        fs::write(&path, json + "\n").map_err(|e| WorkbenchError::io(path, e))
    }
}

fn pose_from(entry: &ViewEntry, path: &Path, index: usize) -> Result<Pose> {
    if entry.world_to_cam.len() != 16 {
        return Err(WorkbenchError::format(
            path,
            format!("view {index}: world_to_cam has {} entries, expected 16", entry.world_to_cam.len()),
        ));
    }
    let m = Matrix4::from_row_slice(&entry.world_to_cam);
    Pose::orthonormalized(&m, POSE_TOLERANCE)
        .map_err(|e| WorkbenchError::format(path, format!("view {index}: {e}")))
}

/// Load and validate a scene directory.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| WorkbenchError::io(&path, e))?;
    let desc: SceneDescriptor =
        serde_json::from_str(&text).map_err(|e| WorkbenchError::format(&path, e.to_string()))?;
    let mut views = Vec::with_capacity(desc.views.len());
    for (i, entry) in desc.views.iter().enumerate() {
        let img_path: PathBuf = dir.join(&entry.image);
        if !img_path.is_file() {
            return Err(WorkbenchError::format(
                &path,
                format!("view {i}: image {} does not exist", img_path.display()),
            ));
        }
        let image = read_png(&img_path)?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let intrinsics = Intrinsics::new(entry.fx, entry.fy, entry.cx, entry.cy, w, h)
            .map_err(|e| WorkbenchError::format(&path, format!("view {i}: {e}")))?;
        let pose = pose_from(entry, &path, i)?;
        let depth = match &entry.depth {
            Some(rel) => {
                let d = read_raw(&dir.join(rel))?;
                if d.shape() != [h, w] {
                    return Err(WorkbenchError::format(
                        dir.join(rel),
                        format!("depth {:?} does not match image {h}x{w}", d.shape()),
                    ));
                }
                Some(d)
            }
            None => None,
        };
        let name = Path::new(&entry.image)
            .file_stem()
            .map_or_else(|| format!("{i:03}"), |s| s.to_string_lossy().into_owned());
        views.push(SceneView {
            name,
            camera: Camera { intrinsics, pose },
            image,
            depth,
            role: entry.role,
        });
    }
    let scene = Scene {
        views,
        near: desc.near,
        far: desc.far,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_scene, SceneKind, SynthOptions};

    fn written() -> (tempfile::TempDir, Scene) {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            width: 16,
            height: 16,
            ..SynthOptions::default()
        };
        let s = synth_scene(SceneKind::TexturedPlane, 0, &opts).unwrap();
        s.write(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn three_view_scene_loads() {
        let (dir, s) = written();
        let l = load_scene(dir.path()).unwrap();
        assert_eq!(l.inputs().unwrap().len(), 2);
        assert_eq!(l.targets().unwrap().len(), 1);
        for (a, b) in s.views.iter().zip(&l.views) {
            assert_eq!(a.camera.intrinsics, b.camera.intrinsics);
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn reflection_rejected() {
        let (dir, _) = written();
        let p = dir.path().join("cameras.json");
        let mut desc: SceneDescriptor = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        desc.views[0].world_to_cam[0] = -1.0;
        fs::write(&p, serde_json::to_string(&desc).unwrap()).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view 0"), "{err}");
    }

    #[test]
    fn missing_image_and_bad_json_are_diagnosed() {
        let (dir, _) = written();
        fs::remove_file(dir.path().join("images/001.png")).unwrap();
        assert!(load_scene(dir.path()).unwrap_err().to_string().contains("does not exist"));
        fs::write(dir.path().join("cameras.json"), "{").unwrap();
        assert!(load_scene(dir.path()).is_err());
    }

    #[test]
    fn near_rotation_is_snapped() {
        let (dir, _) = written();
        let p = dir.path().join("cameras.json");
        let mut desc: SceneDescriptor = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        desc.views[1].world_to_cam[1] = 1e-8;
        fs::write(&p, serde_json::to_string(&desc).unwrap()).unwrap();
        let l = load_scene(dir.path()).unwrap();
        let r = l.views[1].camera.pose.rotation();
        assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    }
}
