use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use uwsplat::bmm::{build_mask, residual, trim_threshold};
use uwsplat::image::{Mask, RgbImage};
use uwsplat::pipeline::RenderMode;
use uwsplat::scene_io::{load_checkpoint, load_colmap, save_checkpoint, SceneBundle};
use uwsplat::synth::{generate, write_scene, SynthSceneSpec};
use uwsplat::train::{evaluate, render_view, train, write_log, ConfigError, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "uwsplat", version, about = "Gaussian splatting for underwater scenes")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic underwater scene with ground truth.
    Synth {
        /// TOML file with scene spec overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a COLMAP scene directory.
    Train {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// No medium: Gaussian colors only.
        #[arg(long)]
        v1: bool,
        /// Uncompensated densification statistics.
        #[arg(long)]
        v2: bool,
        /// No depth supervision.
        #[arg(long)]
        v3: bool,
        /// Enable the motion mask for scenes with moving content.
        #[arg(long)]
        dynamic: bool,
    },
    /// Render every view through the medium.
    Render(RenderArgs),
    /// Render every view with the medium removed.
    Drain(RenderArgs),
    /// Motion masks (ω1, ω2, ω3 and their union) of a rendered/target pair.
    Mask {
        rendered: PathBuf,
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML training config; its `[bmm]` section and `bmm_mode` are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Residual threshold. Defaults to the trimmed quantile of this
        /// pair's own residuals.
        #[arg(long)]
        t_eps: Option<f64>,
    },
    /// PSNR/SSIM on the test views, as JSON.
    Eval {
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of distractor masks (white = excluded), named like the images.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RenderArgs {
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, ConfigError> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_synth_spec(path: Option<&Path>) -> Result<SynthSceneSpec, ConfigError> {
    let Some(p) = path else { return Ok(SynthSceneSpec::default()) };
    let s = std::fs::read_to_string(p)
        .map_err(|e| ConfigError::Read { path: p.display().to_string(), reason: e.to_string() })?;
    toml::from_str(&s).map_err(|e| ConfigError::Parse(e.to_string()))
}

fn render_all(a: &RenderArgs, mode: RenderMode) -> Result<()> {
    let bundle = load_colmap(&a.scene)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for v in &bundle.views {
        let (img, _) = render_view(&ckpt, &bundle.cameras[v.camera], mode);
        img.save_png(&a.out.join(&v.name))?;
    }
    info!("rendered {} views to {}", bundle.views.len(), a.out.display());
    Ok(())
}

fn write_masks(rendered: &Path, target: &Path, out: &Path, config: Option<&Path>, t_eps: Option<f64>) -> Result<()> {
    let cfg = load_config(config)?;
    let a = RgbImage::load_png(rendered)?;
    let b = RgbImage::load_png(target)?;
    let eps = residual(&a, &b)?;
    let t = t_eps.unwrap_or_else(|| trim_threshold(&eps, cfg.bmm.trim_quantile));
    let m = build_mask(eps, t, &cfg.bmm, cfg.bmm_mode);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, mask) in [("omega1", &m.omega1), ("omega2", &m.omega2), ("omega3", &m.omega3), ("omega", &m.omega)] {
        mask.save_png(&out.join(format!("{name}.png")))?;
    }
    println!("t_eps {t:.6} inliers {:.4}", m.omega.fraction());
    Ok(())
}

fn load_masks(bundle: &SceneBundle, dir: &Path) -> Result<Vec<Option<Mask>>> {
    bundle
        .views
        .iter()
        .map(|v| {
            let p = dir.join(&v.name);
            if p.exists() { Ok(Some(Mask::load_png(&p)?)) } else { Ok(None) }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth { config, seed, out } => {
            let mut spec = load_synth_spec(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let scene = generate(&spec);
            write_scene(&scene, &out)?;
            info!("wrote {} views to {}", scene.bundle.views.len(), out.display());
        }
        Command::Train { scene, config, seed, out, v1, v2, v3, dynamic } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.disable_medium |= v1;
            cfg.disable_physics_dc |= v2;
            cfg.disable_depth_loss |= v3;
            cfg.dynamic |= dynamic;
            cfg.validate()?;
            let bundle = load_colmap(&scene)?;
            let (ckpt, log) = train(&bundle, &cfg)?;
            save_checkpoint(&ckpt, &out)?;
            write_log(&log, &out.join("train_log.csv"))?;
            std::fs::write(out.join("config.toml"), toml::to_string(&cfg)?)?;
            info!("saved checkpoint with {} Gaussians to {}", ckpt.cloud.len(), out.display());
        }
        Command::Render(a) => render_all(&a, RenderMode::Underwater)?,
        Command::Drain(a) => render_all(&a, RenderMode::Clean)?,
        Command::Mask { rendered, target, out, config, t_eps } => {
            write_masks(&rendered, &target, &out, config.as_deref(), t_eps)?
        }
        Command::Eval { scene, ckpt, masks } => {
            let bundle = load_colmap(&scene)?;
            let ckpt = load_checkpoint(&ckpt)?;
            let masks = masks.map(|d| load_masks(&bundle, &d)).transpose()?;
            let rows: Vec<_> = evaluate(&ckpt, &bundle, masks.as_deref())
                .into_iter()
                .map(|(vi, m)| match m {
                    Ok(m) => serde_json::json!({ "view": bundle.views[vi].name, "psnr": m.psnr, "ssim": m.ssim }),
                    Err(e) => serde_json::json!({ "view": bundle.views[vi].name, "error": e.to_string() }),
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            {
                ExitCode::from(2)
            } else if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::DivergedLoss { .. })) {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
