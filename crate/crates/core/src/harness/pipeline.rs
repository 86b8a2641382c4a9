//! End-to-end run: selective enhancement → encoder → illumination-guided
//! sampling → depth/context split → BEV pooling → residual query →
//! illumination field → refinement → occupancy head → losses and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ModelParams, ModelShape, PARAM_FILES};
use super::scene::SceneInputs;
use crate::bev::{bev_pool, depth_context_split, refine_bev, residual_query, DepthBins, DEFAULT_ATTENTION_POINTS};
use crate::error::{Error, Result, StageContext};
use crate::geometry::{illumination_field, IlluminationField};
use crate::igs2d::{
    build_guidance, generate_offsets, igs_apply, modulate_offsets, GuidanceMap, OffsetField, DEFAULT_K_POINTS,
};
use crate::illumination::{
    estimate_illumination, illumination_factor, load_illumination, EstimatorConfig, IlluminationMap, Image,
    ILLUMINATION_FLOOR,
};
use crate::io::{self, DType};
use crate::losses::{class_weights_from_labels, total_loss, weighted_ce, AuxiliaryLoss, LossConfig, NoAux};
use crate::metrics::{IoUCounts, IoUReport, OccupancyGrid};
use crate::sllie::{otsu_threshold, selective_enhance, FactorPopulation, ThresholdReport, DEFAULT_BINS};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Fixed(f64),
    /// Directory of illumination maps (raw tensor or PGM) forming the population.
    PopulationDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub threshold: ThresholdSource,
    pub threshold_bins: usize,
    pub encoder_channels: [usize; 2],
    pub igs_points: usize,
    pub context_channels: usize,
    pub depth_bins: DepthBins,
    pub n_z: usize,
    pub attention_points: usize,
    pub loss: LossConfig,
    /// Directory holding the parameter files; seeded defaults when absent.
    pub params_dir: Option<PathBuf>,
    pub param_seed: u64,
    /// Forces the illumination field to zero so the BEV refinement passes `Q` through.
    pub disable_idp: bool,
    pub dump_intermediates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            threshold: ThresholdSource::Fixed(0.35),
            threshold_bins: DEFAULT_BINS,
            encoder_channels: [8, 8],
            igs_points: DEFAULT_K_POINTS,
            context_channels: 8,
            depth_bins: DepthBins::default(),
            n_z: 8,
            attention_points: DEFAULT_ATTENTION_POINTS,
            loss: LossConfig::default(),
            params_dir: None,
            param_seed: 7,
            disable_idp: false,
            dump_intermediates: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.loss.validate()?;
        self.depth_bins.centers()?;
        if self.n_z == 0 {
            return Err(Error::InvalidConfig("n_z must be >= 1".into()));
        }
        if self.encoder_channels.contains(&0) || self.context_channels == 0 || self.attention_points == 0 {
            return Err(Error::InvalidConfig("channel and point counts must be positive".into()));
        }
        match &self.threshold {
            ThresholdSource::Fixed(t) if !(*t > 0.0 && *t <= 1.0) => {
                return Err(Error::InvalidConfig(format!("fixed threshold {t} outside (0, 1]")));
            }
            ThresholdSource::PopulationDir(d) if !d.is_dir() => {
                return Err(Error::InvalidConfig(format!("population directory {} does not exist", d.display())));
            }
            _ => {}
        }
        if let Some(dir) = &self.params_dir {
            if let Some(missing) = PARAM_FILES.iter().map(|f| dir.join(f)).find(|p| !p.is_file()) {
                return Err(Error::InvalidConfig(format!("parameter file {} does not exist", missing.display())));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        // relative paths are resolved against the config file
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.params_dir {
            cfg.params_dir = Some(base.join(d));
        }
        if let ThresholdSource::PopulationDir(d) = &cfg.threshold {
            cfg.threshold = ThresholdSource::PopulationDir(base.join(d));
        }
        Ok(cfg)
    }

    fn model_shape(&self, height_cells: usize, n_classes: usize) -> ModelShape {
        ModelShape {
            encoder_channels: self.encoder_channels,
            igs_points: self.igs_points,
            context_channels: self.context_channels,
            depth_bins: self.depth_bins.count,
            attention_points: self.attention_points,
            height_cells,
            n_classes,
        }
    }
}

/// Population threshold over every illumination map in `dir`, in file name order.
pub fn threshold_from_dir(dir: impl AsRef<Path>, bins: usize) -> Result<(ThresholdReport, FactorPopulation)> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("raw" | "pgm")))
        .collect();
    files.sort();
    let factors = files
        .iter()
        .map(|p| load_illumination(p, ILLUMINATION_FLOOR).map(|m| illumination_factor(&m)))
        .collect::<Result<Vec<_>>>()?;
    if factors.is_empty() {
        return Err(Error::Empty(format!("no illumination maps in {}", dir.display())));
    }
    let pop = FactorPopulation::new(factors, bins)?;
    Ok((otsu_threshold(&pop)?, pop))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Weighted cross-entropy summed over voxels.
    pub ce_sum: f64,
    pub ce_mean: f64,
    pub aux_sem: f64,
    pub aux_geo: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub lambda: f64,
    pub enhanced: bool,
    pub t_star: f64,
    pub grid_dims: [usize; 3],
    pub losses: Option<LossReport>,
    pub iou: Option<IoUReport>,
    pub timings: Vec<StageTiming>,
    pub manifest: Vec<ManifestEntry>,
    #[serde(skip)]
    pub iou_counts: Option<IoUCounts>,
    #[serde(skip)]
    pub prediction: Option<OccupancyGrid>,
}

/// Intermediate tensors of one run.
#[derive(Debug, Clone)]
pub struct Intermediates {
    pub illumination: Tensor3,
    pub enhanced: Tensor3,
    pub guidance: Tensor3,
    pub offsets_modulated: Tensor3,
    pub f_img: Tensor3,
    pub f_igs: Tensor3,
    pub context: Tensor3,
    pub depth: Tensor3,
    pub q: Tensor3,
    pub q_res: Tensor3,
    pub field: Tensor3,
    pub f_bev: Tensor3,
    pub logits: Tensor3,
}

struct Timer {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self { timings: Vec::new(), last: Instant::now() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming { stage: stage.into(), millis: (now - self.last).as_secs_f64() * 1e3 });
        self.last = now;
    }
}

fn resolve_threshold(cfg: &PipelineConfig) -> Result<f64> {
    match &cfg.threshold {
        ThresholdSource::Fixed(t) => Ok(*t),
        ThresholdSource::PopulationDir(d) => Ok(threshold_from_dir(d, cfg.threshold_bins)?.0.t_star),
    }
}

impl PipelineConfig {
    /// Parameters from `params_dir`, or seeded ones, checked against the scene's grid.
    pub fn model_params(&self, height_cells: usize, n_classes: usize) -> Result<ModelParams> {
        let shape = self.model_shape(height_cells, n_classes);
        let p = match &self.params_dir {
            Some(dir) => ModelParams::load_dir(dir)?,
            None => ModelParams::seeded(&shape, self.param_seed)?,
        };
        p.check(&shape)?;
        Ok(p)
    }

    pub fn threshold_value(&self) -> Result<f64> {
        resolve_threshold(self)
    }
}

/// Outputs of the encoder and illumination-guided sampling stages.
#[derive(Debug, Clone)]
pub struct IgsOutput {
    pub guidance: GuidanceMap,
    pub offsets_modulated: OffsetField,
    pub f_img: Tensor3,
    pub f_igs: Tensor3,
}

/// Encodes the (enhanced) image and applies illumination-guided sampling.
pub fn encode_and_sample(
    cfg: &PipelineConfig,
    params: &ModelParams,
    image: &Image,
    illum: &IlluminationMap,
) -> Result<IgsOutput> {
    let f_img = params.encode(image.tensor()).stage("encoder")?;
    let (fh, fw) = (f_img.height(), f_img.width());
    (|| {
        let (i_prime, g) = build_guidance(illum, fh, fw)?;
        let (dp, dw) = generate_offsets(&i_prime, &params.offset_conv, cfg.igs_points)?;
        let dp_mod = modulate_offsets(&dp, &g)?;
        let f_igs = igs_apply(&f_img, &dp_mod, &dw, &params.igs_kernel)?;
        Ok(IgsOutput { guidance: g, offsets_modulated: dp_mod, f_img, f_igs })
    })()
    .stage("igs2d")
}

/// Runs every stage on one scene and returns the report with the
/// intermediate tensors.
pub fn run_stages(cfg: &PipelineConfig, scene: &SceneInputs) -> Result<(RunReport, Intermediates, ModelParams)> {
    cfg.validate().stage("config")?;
    let mut timer = Timer::new();
    let (nx, ny, nz) = scene.bev.dims().stage("config")?;
    let n_classes = scene.class_names.len();
    let params = cfg.model_params(nz, n_classes).stage("params")?;
    let t_star = resolve_threshold(cfg).stage("threshold")?;
    timer.lap("setup");

    let illum = estimate_illumination(&scene.image, &cfg.estimator).stage("sllie")?;
    let lambda = illumination_factor(&illum);
    let (enhanced, was_enhanced) = selective_enhance(&scene.image, &illum, t_star).stage("sllie")?;
    timer.lap("sllie");

    let IgsOutput { guidance, offsets_modulated: dp_mod, f_img, f_igs } =
        encode_and_sample(cfg, &params, &enhanced, &illum)?;
    let (fh, fw) = (f_img.height(), f_img.width());
    timer.lap("encoder_igs2d");

    let dc =
        depth_context_split(&f_igs, &params.depth_net, cfg.context_channels, &cfg.depth_bins).stage("depth_context")?;
    timer.lap("depth_context");

    let feat_cam = scene
        .camera
        .scaled(fw as f64 / scene.image.width() as f64, fh as f64 / scene.image.height() as f64)
        .stage("bev_pool")?;
    let q = bev_pool(&dc, &feat_cam, &scene.bev).stage("bev_pool")?;
    timer.lap("bev_pool");

    let q_res =
        residual_query(&q, &dc.f_ctx, &feat_cam, &scene.bev, cfg.n_z, &params.attention).stage("residual_query")?;
    timer.lap("residual_query");

    let field = if cfg.disable_idp {
        IlluminationField::zeros(nx, ny)
    } else {
        illumination_field(&illum, &scene.camera, &scene.bev, cfg.n_z).stage("illumination_field")?
    };
    timer.lap("illumination_field");

    let f_bev = refine_bev(&q, &q_res, &field).stage("refine")?;
    timer.lap("refine");

    let logits = params.classify(&f_bev, nz, n_classes).stage("head")?;
    let prediction = OccupancyGrid::new(nx, ny, nz, logits.argmax(), scene.class_names.clone()).stage("head")?;
    timer.lap("head");

    let (losses, iou, counts) = match &scene.ground_truth {
        Some(gt) => {
            let (losses, counts) = (|| {
                if gt.dims() != prediction.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "ground truth {:?} vs BEV grid {:?}",
                        gt.dims(),
                        prediction.dims()
                    )));
                }
                let weights = match &cfg.loss.class_weights {
                    Some(w) => w.clone(),
                    None => class_weights_from_labels(gt, n_classes)?,
                };
                let ce = weighted_ce(&logits, gt.labels(), &weights)?;
                let aux = NoAux;
                let (sem, geo) = (aux.evaluate(&logits, gt.labels()), aux.evaluate(&logits, gt.labels()));
                let total = total_loss(ce, sem, geo, &cfg.loss)?;
                let losses =
                    LossReport { ce_sum: ce, ce_mean: ce / logits.n_vox() as f64, aux_sem: sem, aux_geo: geo, total };
                Ok((losses, IoUCounts::from_grids(&prediction, gt)?))
            })()
            .stage("losses")?;
            let iou = counts.report(&scene.class_names).stage("metrics")?;
            (Some(losses), Some(iou), Some(counts))
        }
        None => (None, None, None),
    };
    timer.lap("losses_metrics");

    let report = RunReport {
        lambda,
        enhanced: was_enhanced,
        t_star,
        grid_dims: [nx, ny, nz],
        losses,
        iou,
        timings: timer.timings,
        manifest: Vec::new(),
        iou_counts: counts,
        prediction: Some(prediction),
    };
    let logits_t = Tensor3::new(1, logits.n_vox(), logits.n_cla(), logits.data().to_vec()).stage("head")?;
    let inter = Intermediates {
        illumination: illum.tensor().clone(),
        enhanced: enhanced.into_tensor(),
        guidance: guidance.tensor().clone(),
        offsets_modulated: dp_mod.tensor().clone(),
        f_img,
        f_igs,
        context: dc.f_ctx,
        depth: dc.depth,
        q: q.into_tensor(),
        q_res: q_res.into_tensor(),
        field: field.tensor().clone(),
        f_bev: f_bev.into_tensor(),
        logits: logits_t,
    };
    Ok((report, inter, params))
}

struct ManifestWriter<'a> {
    dir: &'a Path,
    entries: Vec<ManifestEntry>,
}

impl ManifestWriter<'_> {
    fn record(&mut self, name: &str, file: &str, format: &str) {
        self.entries.push(ManifestEntry { name: name.into(), path: self.dir.join(file), format: format.into() });
    }

    fn raw(&mut self, name: &str, t: &Tensor3) -> Result<()> {
        let file = format!("{name}.raw");
        io::write_raw(self.dir.join(&file), t, DType::F64)?;
        self.record(name, &file, "raw");
        Ok(())
    }

    fn pgm(&mut self, name: &str, t: &Tensor3, normalize: bool) -> Result<()> {
        let file = format!("{name}.pgm");
        if normalize {
            io::write_pgm_normalized(self.dir.join(&file), t)?;
        } else {
            io::write_netpbm(self.dir.join(&file), t)?;
        }
        self.record(name, &file, "pgm");
        Ok(())
    }

    fn text(&mut self, name: &str, file: &str, format: &str, body: &str) -> Result<()> {
        let p = self.dir.join(file);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.record(name, file, format);
        Ok(())
    }
}

/// Runs the pipeline and, when `out_dir` is given, writes the enhanced
/// image, the predicted grid, metrics and (optionally) every intermediate,
/// followed by `report.json` listing them.
pub fn run_pipeline(cfg: &PipelineConfig, scene: &SceneInputs, out_dir: Option<&Path>) -> Result<RunReport> {
    let (mut report, inter, params) = run_stages(cfg, scene)?;
    let Some(dir) = out_dir else { return Ok(report) };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("output")?;
    let mut w = ManifestWriter { dir, entries: Vec::new() };
    (|| {
        io::write_netpbm(dir.join("enhanced.ppm"), &inter.enhanced)?;
        w.record("enhanced", "enhanced.ppm", "ppm");
        let pred = report.prediction.as_ref().expect("prediction is always produced");
        pred.save(dir.join("prediction.raw"))?;
        w.record("prediction", "prediction.raw", "raw");
        if let Some(iou) = &report.iou {
            w.text("metrics", "metrics.csv", "csv", &iou.to_csv())?;
        }
        if cfg.dump_intermediates {
            w.raw("illumination", &inter.illumination)?;
            w.pgm("illumination_preview", &inter.illumination, false)?;
            w.pgm("guidance", &inter.guidance, false)?;
            let mag = OffsetField::new(inter.offsets_modulated.clone())?.magnitude();
            w.pgm("offset_magnitude", &mag, true)?;
            w.raw("offsets_modulated", &inter.offsets_modulated)?;
            w.raw("f_img", &inter.f_img)?;
            w.raw("f_igs", &inter.f_igs)?;
            w.raw("context", &inter.context)?;
            w.raw("depth", &inter.depth)?;
            w.raw("q", &inter.q)?;
            w.raw("q_res", &inter.q_res)?;
            w.raw("illumination_field", &inter.field)?;
            w.pgm("illumination_field_preview", &inter.field, false)?;
            w.raw("f_bev", &inter.f_bev)?;
            w.raw("logits", &inter.logits)?;
            for p in params.save_dir(dir.join("params"))? {
                let file = p.strip_prefix(dir).expect("inside output dir").to_path_buf();
                w.entries.push(ManifestEntry {
                    name: format!("params/{}", file.file_name().unwrap().to_string_lossy()),
                    path: p,
                    format: "raw".into(),
                });
            }
        }
        Ok(())
    })()
    .stage("output")?;
    report.manifest = w.entries;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e)).stage("output")?;
    Ok(report)
}

/// Aggregate over a batch: per-scene reports plus micro-averaged IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub scenes: Vec<RunReport>,
    pub aggregate: IoUReport,
}

/// Runs every scene (in parallel) and pools intersection/union counts in
/// scene list order. Scene `n` writes to `out_dir/scene_{n:03}` when given.
pub fn eval_batch(scenes: &[SceneInputs], cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<BatchReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("scene list".into()));
    }
    let reports = scenes
        .par_iter()
        .enumerate()
        .map(|(n, s)| {
            let dir = out_dir.map(|d| d.join(format!("scene_{n:03}")));
            run_pipeline(cfg, s, dir.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = IoUCounts::zeros(0);
    for (n, r) in reports.iter().enumerate() {
        let c = r
            .iou_counts
            .as_ref()
            .ok_or_else(|| Error::InvalidValue(format!("scene {n} has no ground truth to evaluate")))?;
        counts.accumulate(c);
    }
    let names = scenes.iter().map(|s| &s.class_names).max_by_key(|n| n.len()).expect("non-empty");
    let aggregate = counts.report(names)?;
    if let Some(d) = out_dir {
        let p = d.join("aggregate.csv");
        fs::write(&p, aggregate.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(BatchReport { scenes: reports, aggregate })
}
