//! `nightocc` command line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nightocc::geometry::illumination_field;
use nightocc::harness::{
    encode_and_sample, eval_batch, gen_scene, run_pipeline, threshold_from_dir, PipelineConfig, SceneConfig,
    SceneInputs,
};
use nightocc::illumination::{estimate_illumination, illumination_factor, Image};
use nightocc::io::{self, DType};
use nightocc::sllie::selective_enhance;
use nightocc::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nightocc", version, about = "Illumination-aware nighttime occupancy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config (scene config for `gen-scene`, pipeline config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SceneSource {
    /// Scene description written by `gen-scene`; a scene is generated from `--seed` otherwise.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Scene config used when generating.
    #[arg(long)]
    scene_config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic night scene with ground truth.
    GenScene(Common),
    /// Estimate illumination and apply selective enhancement to one image.
    Enhance {
        #[command(flatten)]
        common: Common,
        /// Input PPM image.
        #[arg(long)]
        image: PathBuf,
        /// Fixed threshold; overrides the config.
        #[arg(long)]
        t_star: Option<f64>,
    },
    /// Derive the enhancement threshold from a directory of illumination maps.
    Threshold {
        #[command(flatten)]
        common: Common,
        /// Directory of illumination maps (raw tensor or PGM).
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = nightocc::sllie::DEFAULT_BINS)]
        bins: usize,
    },
    /// Dump the guidance map, offset magnitudes and sampled features.
    Igs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SceneSource,
    },
    /// Compute the BEV illumination field of a scene.
    IllumField {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SceneSource,
    },
    /// Run the full pipeline on one scene.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SceneSource,
        /// Write every intermediate tensor and the parameters.
        #[arg(long)]
        dump_intermediates: bool,
        /// Print the cross-entropy as a per-voxel mean instead of a sum.
        #[arg(long)]
        mean_loss: bool,
    },
    /// Run the pipeline over several scenes and aggregate IoU.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scene descriptions; when none are given, `--count` scenes are generated.
        #[arg(long, num_args = 1..)]
        scenes: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        scene_config: Option<PathBuf>,
        #[arg(long)]
        dump_intermediates: bool,
    },
}

fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn scene_config(path: Option<&Path>, seed: Option<u64>) -> Result<SceneConfig> {
    let mut cfg = match path {
        Some(p) => read_scene_config(p)?,
        None => SceneConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_scene(common: &Common, source: &SceneSource) -> Result<SceneInputs> {
    match &source.scene {
        Some(p) => SceneInputs::load(p),
        None => Ok(gen_scene(&scene_config(source.scene_config.as_deref(), common.seed)?)?.into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(common) => {
            let scene = gen_scene(&scene_config(common.config.as_deref(), common.seed)?)?;
            let path = scene.save(&common.out)?;
            println!("{}", path.display());
        }
        Command::Enhance { common, image, t_star } => {
            let cfg = pipeline_config(&common)?;
            let t_star = match t_star {
                Some(t) => t,
                None => cfg.threshold_value()?,
            };
            let x = Image::load(&image)?;
            let illum = estimate_illumination(&x, &cfg.estimator)?;
            let (out, enhanced) = selective_enhance(&x, &illum, t_star)?;
            create_dir(&common.out)?;
            out.save(common.out.join("enhanced.ppm"))?;
            io::write_raw(common.out.join("illumination.raw"), illum.tensor(), DType::F64)?;
            io::write_netpbm(common.out.join("illumination.pgm"), illum.tensor())?;
            let report = json!({ "lambda": illumination_factor(&illum), "t_star": t_star, "enhanced": enhanced });
            write_json(&common.out.join("enhance.json"), &report)?;
            println!("{report}");
        }
        Command::Threshold { common, maps, bins } => {
            let (report, pop) = threshold_from_dir(&maps, bins)?;
            let value = json!({
                "t_star": report.t_star,
                "sigma_b2": report.sigma_b2_at_t_star,
                "n_images": pop.factors().len(),
                "histogram": pop.histogram(),
                "degenerate": report.degenerate,
            });
            create_dir(&common.out)?;
            write_json(&common.out.join("threshold.json"), &value)?;
            println!("t_star = {}", report.t_star);
        }
        Command::Igs { common, source } => {
            let cfg = pipeline_config(&common)?;
            let scene = load_scene(&common, &source)?;
            let (_, _, nz) = scene.bev.dims()?;
            let params = cfg.model_params(nz, scene.class_names.len())?;
            let illum = estimate_illumination(&scene.image, &cfg.estimator)?;
            let (enhanced, _) = selective_enhance(&scene.image, &illum, cfg.threshold_value()?)?;
            let out = encode_and_sample(&cfg, &params, &enhanced, &illum)?;
            create_dir(&common.out)?;
            io::write_netpbm(common.out.join("guidance.pgm"), out.guidance.tensor())?;
            io::write_pgm_normalized(common.out.join("offset_magnitude.pgm"), &out.offsets_modulated.magnitude())?;
            io::write_raw(common.out.join("f_igs.raw"), &out.f_igs, DType::F64)?;
            println!("{}", common.out.display());
        }
        Command::IllumField { common, source } => {
            let cfg = pipeline_config(&common)?;
            let scene = load_scene(&common, &source)?;
            let illum = estimate_illumination(&scene.image, &cfg.estimator)?;
            let field = illumination_field(&illum, &scene.camera, &scene.bev, cfg.n_z)?;
            create_dir(&common.out)?;
            io::write_raw(common.out.join("illumination_field.raw"), field.tensor(), DType::F64)?;
            io::write_netpbm(common.out.join("illumination_field.pgm"), field.tensor())?;
            println!("{}", common.out.display());
        }
        Command::Pipeline { common, source, dump_intermediates, mean_loss } => {
            let mut cfg = pipeline_config(&common)?;
            cfg.dump_intermediates |= dump_intermediates;
            let scene = load_scene(&common, &source)?;
            let report = run_pipeline(&cfg, &scene, Some(&common.out))?;
            println!("lambda = {:.6}, t_star = {:.6}, enhanced = {}", report.lambda, report.t_star, report.enhanced);
            if let Some(l) = &report.losses {
                let (label, ce) = if mean_loss { ("per-voxel mean", l.ce_mean) } else { ("sum", l.ce_sum) };
                println!("weighted CE ({label}) = {ce:.6}, total = {:.6}", l.total);
            }
            if let Some(iou) = &report.iou {
                println!("mIoU = {:.6}", iou.miou);
            }
        }
        Command::Eval { common, scenes, count, scene_config: sc, dump_intermediates } => {
            let mut cfg = pipeline_config(&common)?;
            cfg.dump_intermediates |= dump_intermediates;
            let inputs = if scenes.is_empty() {
                let base = scene_config(sc.as_deref(), common.seed)?;
                (0..count as u64)
                    .map(|n| gen_scene(&SceneConfig { seed: base.seed + n, ..base.clone() }).map(SceneInputs::from))
                    .collect::<Result<Vec<_>>>()?
            } else {
                scenes.iter().map(SceneInputs::load).collect::<Result<Vec<_>>>()?
            };
            let batch = eval_batch(&inputs, &cfg, Some(&common.out))?;
            println!("scenes = {}, mIoU = {:.6}", batch.scenes.len(), batch.aggregate.miou);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
