//! The `hgs` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hgs_autodiff::Checkpoint;
use hgs_core::backbone::ZeroAux;
use hgs_core::camera::Camera;
use hgs_core::config::TrainConfig;
use hgs_core::gaussians::GaussianSet;
use hgs_core::metrics::{gaussian_statistics, psnr, ssim, StageStatistics};
use hgs_core::model::Model;
use hgs_core::render::render;
use hgs_core::train::{candidates_for, config_from_meta, FixedScene, Trainer};

use crate::checks::{pipeline_check, primitive_suite};
use crate::image_io::{read_png, write_png, write_raw};
use crate::ply::{export_ply, import_ply};
use crate::scene::{load_scene, Role, Scene};
use crate::synth::{synth_scene, SceneKind, SynthOptions};
use crate::{Result, WorkbenchError};

#[derive(Debug, Parser)]
#[command(name = "hgs", version, about = "Hierarchical Gaussian splatting from two views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural scene with ground-truth depth.
    Synth(SynthArgs),
    /// Train on one scene directory.
    Train(TrainArgs),
    /// Predict Gaussians from the input views and render the chosen views.
    Infer(InferArgs),
    /// Render a Gaussian PLY at a scene's cameras.
    Render(RenderArgs),
    /// PSNR and SSIM between rendered and reference images.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Per-stage counts, opacities and scales of a predicted set.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Nearest depth candidate (default: the scene's bound).
    #[arg(long)]
    near: Option<f64>,
    /// Farthest depth candidate (default: the scene's bound).
    #[arg(long)]
    far: Option<f64>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
            cfg.merge_text(&text)
                .map_err(|e| WorkbenchError::format(path, e.to_string()))?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)
                .map_err(|e| WorkbenchError::Usage(format!("--set {kv}: {e}")))?;
        }
        if self.near.is_some() {
            cfg.near = self.near;
        }
        if self.far.is_some() {
            cfg.far = self.far;
        }
        cfg.validate().map_err(|e| WorkbenchError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "textured-cube")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Number of held-out target views.
    #[arg(long, default_value_t = 1)]
    targets: usize,
    #[arg(long, default_value_t = 0.5)]
    baseline: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Overfit,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting values before the config file and overrides.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Print a log line every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Views {
    Inputs,
    Targets,
    All,
}

impl Views {
    fn select<'a>(self, scene: &'a Scene) -> Vec<&'a crate::scene::SceneView> {
        scene
            .views
            .iter()
            .filter(|v| match self {
                Views::Inputs => v.role == Role::Input,
                Views::Targets => v.role == Role::Target,
                Views::All => true,
            })
            .collect()
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stop after this stage (1 = coarsest and fastest).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    #[arg(long, value_enum, default_value = "targets")]
    views: Views,
    /// Primitives below this opacity are left out of the PLY.
    #[arg(long, default_value_t = 0.0)]
    opacity_threshold: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    ply: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    views: Views,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Rendered PNG, or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Reference PNG, or a directory holding PNGs of the same names.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Primitives,
    Pipeline,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    /// Entries probed per parameter tensor in the pipeline check.
    #[arg(long, default_value_t = 2)]
    entries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Predict with this checkpoint; without it, a freshly initialised model.
    #[arg(long, conflicts_with = "ply")]
    checkpoint: Option<PathBuf>,
    /// Scene whose input views feed the model.
    #[arg(long, required_unless_present = "ply")]
    scene: Option<PathBuf>,
    /// Summarise a PLY file instead (a single block).
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Render(a) => render_ply(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Stats(a) => stats(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let kind: SceneKind = a.kind.parse()?;
    let opts = SynthOptions {
        width: a.width,
        height: a.height,
        targets: a.targets,
        baseline: a.baseline,
        ..SynthOptions::default()
    };
    let scene = synth_scene(kind, a.seed, &opts)?;
    scene.write(&a.out)?;
    println!(
        "wrote {} views ({} inputs) to {}, depth bounds [{}, {}]",
        scene.views.len(),
        scene.with_role(Role::Input).count(),
        a.out.display(),
        scene.near,
        scene.far
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Default => TrainConfig::default(),
        Preset::Overfit => TrainConfig::overfit(),
    };
    a.cfg.apply(&mut cfg)?;
    let scene = load_scene(&a.scene)?;
    let aux = ZeroAux {
        channels: cfg.model_config().aux_channels,
    };
    let mut provider = FixedScene(scene.train_sample()?);
    let mut trainer = Trainer::new(cfg, &aux)?.with_output(&a.out)?;
    let every = a.log_every.max(1);
    let start = Instant::now();
    trainer.run(&mut provider, |row| {
        if row.step % every == 0 || row.step == 1 {
            println!(
                "step {:>6}  loss {:.5}  stages {:.5} {:.5} {:.5}  lr {:.2e}  {:.1}s",
                row.step,
                row.loss,
                row.stage_losses[0],
                row.stage_losses[1],
                row.stage_losses[2],
                row.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("wrote {}", a.out.join("final.hsp").display());
    Ok(())
}

/// Model and config stored in a checkpoint, with command-line overrides.
fn load_model(path: &Path, overrides: &ConfigArgs) -> Result<(Model, TrainConfig)> {
    let ck = Checkpoint::read(path).map_err(|e| WorkbenchError::format(path, e.to_string()))?;
    let mut cfg = config_from_meta(&ck.meta).map_err(|e| WorkbenchError::format(path, e.to_string()))?;
    overrides.apply(&mut cfg)?;
    let model = Model::from_checkpoint(cfg.model_config(), &ck)?;
    Ok((model, cfg))
}

fn write_view(dir: &Path, name: &str, img: &hgs_autodiff::Tensor) -> Result<()> {
    write_png(&dir.join(format!("{name}.png")), img)?;
    write_raw(&dir.join(format!("{name}.f32")), img)
}

struct Prediction {
    set: GaussianSet,
    renders: Vec<hgs_autodiff::Tensor>,
    seconds: f64,
}

fn predict(model: &Model, cfg: &TrainConfig, scene: &Scene, cameras: &[Camera], stage: usize) -> Result<Prediction> {
    let sample = scene.train_sample()?;
    let cands = candidates_for(cfg, &sample)?;
    let aux = ZeroAux {
        channels: model.config.aux_channels,
    };
    let start = Instant::now();
    let out = model.infer(&sample.inputs, &cands, &aux, cameras, stage)?;
    Ok(Prediction {
        set: out.set,
        renders: out.renders,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.checkpoint, &a.cfg)?;
    let scene = load_scene(&a.scene)?;
    let views = a.views.select(&scene);
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera).collect();
    let p = predict(&model, &cfg, &scene, &cameras, a.stage as usize)?;
    let dir = a.out.join("renders");
    create_dir(&dir)?;
    for (v, img) in views.iter().zip(&p.renders) {
        write_view(&dir, &v.name, img)?;
    }
    let kept = export_ply(&p.set, &a.out.join("gaussians.ply"), a.opacity_threshold)?;
    println!(
        "stage {}: {} primitives ({} written), {} views rendered in {:.1} ms",
        a.stage,
        p.set.len(),
        kept,
        p.renders.len(),
        1e3 * p.seconds
    );
    Ok(())
}

fn render_ply(a: RenderArgs) -> Result<()> {
    let set = import_ply(&a.ply)?;
    let scene = load_scene(&a.scene)?;
    let splats = set.splats()?;
    create_dir(&a.out)?;
    let settings = hgs_core::render::RenderSettings::default();
    let views = a.views.select(&scene);
    for v in &views {
        let out = render(&splats, &v.camera, &settings)?;
        write_view(&a.out, &v.name, &out.color)?;
    }
    println!("rendered {} primitives at {} views", set.len(), views.len());
    Ok(())
}

fn png_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        let name = pred
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let gt_file = if gt.is_dir() { gt.join(&name) } else { gt.to_path_buf() };
        return Ok(vec![(name, pred.to_path_buf(), gt_file)]);
    }
    let mut names: Vec<String> = fs::read_dir(pred)
        .map_err(|e| WorkbenchError::io(pred, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(WorkbenchError::Usage(format!("no PNG files in {}", pred.display())));
    }
    Ok(names
        .into_iter()
        .map(|n| (n.clone(), pred.join(&n), gt.join(&n)))
        .collect())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pairs = png_pairs(&a.pred, &a.gt)?;
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for (name, p, g) in &pairs {
        let (x, y) = (read_png(p)?, read_png(g)?);
        let (vp, vs) = (psnr(&x, &y)?, ssim(&x, &y)?);
        println!("{name}  PSNR {vp:.2}  SSIM {vs:.4}");
        sum_p += vp;
        sum_s += vs;
    }
    if pairs.len() > 1 {
        let n = pairs.len() as f64;
        println!("mean  PSNR {:.2}  SSIM {:.4}", sum_p / n, sum_s / n);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut outcomes = Vec::new();
    if a.suite != Suite::Pipeline {
        outcomes.extend(primitive_suite()?);
    }
    if a.suite != Suite::Primitives {
        outcomes.push(pipeline_check(a.seed, a.entries)?);
    }
    for o in &outcomes {
        println!("{}", o.line());
        if !o.passed() {
            if let Some(w) = &o.worst {
                println!("     worst {w}");
            }
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(WorkbenchError::Failed(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

/// Table rows plus the hierarchy summary lines.
pub fn format_statistics(stats: &[StageStatistics]) -> Vec<String> {
    let mut lines = vec![format!(
        "{:<6} {:>8} {:>13} {:>12} {:>13}",
        "stage", "count", "mean_opacity", "mean_scale", "median_scale"
    )];
    for s in stats {
        lines.push(format!(
            "{:<6} {:>8} {:>13.5} {:>12.5e} {:>13.5e}",
            s.stage, s.count, s.mean_opacity, s.mean_scale, s.median_scale
        ));
    }
    if let Some(first) = stats.first().filter(|f| f.count > 0) {
        let ratio: Vec<String> = stats
            .iter()
            .map(|s| {
                let r = s.count as f64 / first.count as f64;
                if r.fract() == 0.0 {
                    format!("{r}")
                } else {
                    format!("{r:.3}")
                }
            })
            .collect();
        lines.push(format!("count ratio {}", ratio.join(" : ")));
    }
    if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
        if stats.len() > 1 && last.median_scale > 0.0 {
            lines.push(format!(
                "median scale stage {} / stage {}: {:.3}",
                first.stage,
                last.stage,
                first.median_scale / last.median_scale
            ));
            lines.push(format!(
                "mean opacity stage {} vs stage {}: {:.4} vs {:.4} ({})",
                first.stage,
                last.stage,
                first.mean_opacity,
                last.mean_opacity,
                if first.mean_opacity > last.mean_opacity {
                    "coarse more opaque"
                } else {
                    "fine more opaque"
                }
            ));
        }
    }
    lines
}

fn stats(a: StatsArgs) -> Result<()> {
    let set = if let Some(ply) = &a.ply {
        import_ply(ply)?
    } else {
        let scene_dir = a.scene.as_ref().expect("clap requires --scene without --ply");
        let (model, cfg) = match &a.checkpoint {
            Some(ck) => load_model(ck, &a.cfg)?,
            None => {
                let mut cfg = TrainConfig::default();
                a.cfg.apply(&mut cfg)?;
                (Model::new(cfg.model_config(), cfg.seed)?, cfg)
            }
        };
        let scene = load_scene(scene_dir)?;
        predict(&model, &cfg, &scene, &[], a.stage as usize)?.set
    };
    for line in format_statistics(&gaussian_statistics(&set)) {
        println!("{line}");
    }
    Ok(())
}
