//! Synthetic night scenes: boxes on a ground plane lit by point lights,
//! rendered by casting one ray per pixel.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, BevSpec, CameraMatrix};
use crate::illumination::{IlluminationMap, Image, ILLUMINATION_FLOOR};
use crate::io;
use crate::metrics::OccupancyGrid;
use crate::tensor::Tensor3;

pub const FREE: u32 = 0;
pub const GROUND: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    /// Footprint centre `(x, y)` in metres; boxes stand on the ground.
    pub center: [f64; 2],
    pub size: [f64; 3],
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: [f64; 3],
    pub intensity: f64,
    /// Distance at which the contribution falls to half the intensity.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub position: [f64; 3],
    /// Downward tilt of the optical axis, in degrees.
    pub pitch_deg: f64,
    /// Focal length in pixels.
    pub focal: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { position: [-5.5, 0.0, 1.2], pitch_deg: 20.0, focal: 48.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub bev: BevSpec,
    pub camera: CameraSpec,
    /// Explicit boxes; when empty, `random_boxes` boxes are drawn from the seed.
    pub boxes: Vec<BoxSpec>,
    pub random_boxes: usize,
    pub lights: Vec<Light>,
    pub ambient: f64,
    pub class_names: Vec<String>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_height: 64,
            image_width: 96,
            bev: BevSpec::desk(),
            camera: CameraSpec::default(),
            boxes: Vec::new(),
            random_boxes: 4,
            lights: vec![Light { position: [0.0, 1.5, 2.5], intensity: 0.6, radius: 2.0 }],
            ambient: 0.03,
            class_names: ["free", "ground", "vehicle", "pedestrian", "barrier"].map(String::from).to_vec(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::InvalidConfig("scene needs the free and ground classes at least".into()));
        }
        if !(self.ambient > 0.0 && self.ambient <= 1.0) {
            return Err(Error::InvalidConfig(format!("ambient {} outside (0, 1]", self.ambient)));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        if self.camera.focal <= 0.0 {
            return Err(Error::InvalidConfig("focal length must be positive".into()));
        }
        self.bev.validate()?;
        for b in &self.boxes {
            if b.class as usize >= self.class_names.len() || b.class == FREE {
                return Err(Error::InvalidConfig(format!("box class {} is not an object class", b.class)));
            }
            if b.size.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(Error::InvalidConfig(format!("box size {:?} must be positive", b.size)));
            }
        }
        for l in &self.lights {
            if !(l.intensity >= 0.0 && l.radius > 0.0) {
                return Err(Error::InvalidConfig(format!("bad light {l:?}")));
            }
        }
        Ok(())
    }

    /// Ground surface height: top of the lowest voxel layer.
    pub fn ground_z(&self) -> f64 {
        self.bev.z_range[0] + self.bev.voxel
    }
}

/// Generated scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub camera: CameraMatrix,
    pub occupancy: OccupancyGrid,
    pub illumination: IlluminationMap,
    pub bev: BevSpec,
}

struct Rig {
    center: Vector3<f64>,
    /// World-to-camera rotation; rows are the camera axes in world frame.
    rotation: Matrix3<f64>,
    intrinsics: Matrix3<f64>,
}

impl Rig {
    fn new(cam: &CameraSpec, h: usize, w: usize) -> Self {
        let th = cam.pitch_deg.to_radians();
        let forward = Vector3::new(th.cos(), 0.0, -th.sin());
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let intrinsics = Matrix3::new(cam.focal, 0.0, w as f64 / 2.0, 0.0, cam.focal, h as f64 / 2.0, 0.0, 0.0, 1.0);
        Self { center: Vector3::from(cam.position), rotation, intrinsics }
    }

    fn camera(&self) -> Result<CameraMatrix> {
        CameraMatrix::from_parts(self.intrinsics, self.rotation, -(self.rotation * self.center))
    }

    /// World-frame direction of the ray through pixel centre `(u+0.5, v+0.5)`.
    fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let k = &self.intrinsics;
        let cam = Vector3::new((u as f64 + 0.5 - k[(0, 2)]) / k[(0, 0)], (v as f64 + 0.5 - k[(1, 2)]) / k[(1, 1)], 1.0);
        self.rotation.transpose() * cam
    }
}

struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    class: u32,
}

impl Aabb {
    fn from_spec(b: &BoxSpec, ground: f64) -> Self {
        let lo = Vector3::new(b.center[0] - b.size[0] / 2.0, b.center[1] - b.size[1] / 2.0, ground);
        let hi = Vector3::new(b.center[0] + b.size[0] / 2.0, b.center[1] + b.size[1] / 2.0, ground + b.size[2]);
        Self { lo, hi, class: b.class }
    }

    /// Entry distance along the ray, slab method.
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (ta, tb) = ((self.lo[a] - o[a]) / d[a], (self.hi[a] - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

fn albedo(class: Option<u32>) -> [f64; 3] {
    match class {
        None => [0.15, 0.15, 0.25],
        Some(GROUND) => [0.5, 0.5, 0.55],
        Some(2) => [0.85, 0.25, 0.2],
        Some(3) => [0.25, 0.75, 0.35],
        Some(4) => [0.95, 0.85, 0.25],
        Some(c) => {
            let t = (c as f64 * 0.618).fract();
            [0.3 + 0.6 * t, 0.9 - 0.6 * t, 0.5]
        }
    }
}

fn random_boxes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<BoxSpec> {
    let n_obj = cfg.class_names.len() as u32;
    if n_obj <= 2 {
        return Vec::new();
    }
    let [x0, x1] = cfg.bev.x_range;
    let [y0, y1] = cfg.bev.y_range;
    (0..cfg.random_boxes)
        .map(|_| {
            let class = rng.random_range(2..n_obj);
            let size = match class {
                2 => [rng.random_range(1.6..2.2), rng.random_range(0.8..1.1), rng.random_range(1.2..1.6)],
                3 => [0.4, 0.4, rng.random_range(1.5..1.8)],
                _ => [rng.random_range(0.4..1.2), 0.3, 0.8],
            };
            let center = [
                rng.random_range(x0 + 0.25 * (x1 - x0)..x1 - 0.1 * (x1 - x0)),
                rng.random_range(y0 + 0.1 * (y1 - y0)..y1 - 0.1 * (y1 - y0)),
            ];
            BoxSpec { center, size, class }
        })
        .collect()
}

/// Renders the image and illumination ground truth and voxelizes the boxes.
pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let boxes = if cfg.boxes.is_empty() { random_boxes(cfg, &mut rng) } else { cfg.boxes.clone() };
    let (h, w) = (cfg.image_height, cfg.image_width);
    let rig = Rig::new(&cfg.camera, h, w);
    let camera = rig.camera()?;
    let ground = cfg.ground_z();
    let aabbs: Vec<Aabb> = boxes.iter().map(|b| Aabb::from_spec(b, ground)).collect();

    if !aabbs.is_empty()
        && aabbs.iter().all(|b| {
            let c = (b.lo + b.hi) / 2.0;
            !project_point(&camera, c.x, c.y, c.z).valid
        })
    {
        return Err(Error::DegenerateScene("every box lies behind the camera".into()));
    }

    let lighting = |p: &Vector3<f64>| -> f64 {
        cfg.ambient
            + cfg
                .lights
                .iter()
                .map(|l| {
                    let d2 = (p - Vector3::from(l.position)).norm_squared();
                    l.intensity / (1.0 + d2 / (l.radius * l.radius))
                })
                .sum::<f64>()
    };

    let mut image = Tensor3::zeros(3, h, w);
    let mut illum = Tensor3::zeros(1, h, w);
    for v in 0..h {
        for u in 0..w {
            let dir = rig.ray(u, v);
            let mut best: Option<(f64, u32)> = None;
            if dir.z < -1e-12 {
                let t = (ground - rig.center.z) / dir.z;
                if t > 0.0 {
                    best = Some((t, GROUND));
                }
            }
            for b in &aabbs {
                if let Some(t) = b.hit(&rig.center, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, b.class));
                    }
                }
            }
            let (light, class) = match best {
                Some((t, class)) => (lighting(&(rig.center + dir * t)), Some(class)),
                None => (cfg.ambient, None),
            };
            illum.set(0, v, u, light.clamp(ILLUMINATION_FLOOR, 1.0));
            for (c, a) in albedo(class).iter().enumerate() {
                image.set(c, v, u, (a * light).clamp(0.0, 1.0));
            }
        }
    }

    let (nx, ny, nz) = cfg.bev.dims()?;
    let mut occupancy = OccupancyGrid::filled(nx, ny, nz, FREE, cfg.class_names.clone())?;
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = cfg.bev.cell_center(i, j);
            occupancy.set(i, j, 0, GROUND);
            for k in 1..nz {
                let p = Vector3::new(x, y, cfg.bev.z_center(k));
                if let Some(b) = aabbs.iter().find(|b| b.contains(&p)) {
                    occupancy.set(i, j, k, b.class);
                }
            }
        }
    }

    Ok(Scene { image: Image::new(image)?, camera, occupancy, illumination: IlluminationMap::new(illum)?, bev: cfg.bev })
}

/// On-disk scene description; file names are relative to the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub camera: CameraMatrix,
    pub bev: BevSpec,
    pub class_names: Vec<String>,
    pub image: PathBuf,
    pub occupancy: Option<PathBuf>,
    pub illumination: Option<PathBuf>,
}

/// Pipeline inputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInputs {
    pub image: Image,
    pub camera: CameraMatrix,
    pub bev: BevSpec,
    pub class_names: Vec<String>,
    pub ground_truth: Option<OccupancyGrid>,
}

impl From<Scene> for SceneInputs {
    fn from(s: Scene) -> Self {
        let class_names = s.occupancy.class_names().to_vec();
        Self { image: s.image, camera: s.camera, bev: s.bev, class_names, ground_truth: Some(s.occupancy) }
    }
}

impl Scene {
    /// Writes `scene.json`, `image.ppm`, `occupancy.raw`,
    /// `illumination_gt.raw` and `illumination_gt.pgm` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save(dir.join("image.ppm"))?;
        self.occupancy.save(dir.join("occupancy.raw"))?;
        io::write_raw(dir.join("illumination_gt.raw"), self.illumination.tensor(), io::DType::F64)?;
        io::write_netpbm(dir.join("illumination_gt.pgm"), self.illumination.tensor())?;
        let file = SceneFile {
            camera: self.camera,
            bev: self.bev,
            class_names: self.occupancy.class_names().to_vec(),
            image: "image.ppm".into(),
            occupancy: Some("occupancy.raw".into()),
            illumination: Some("illumination_gt.raw".into()),
        };
        let path = dir.join("scene.json");
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl SceneInputs {
    /// Loads a scene from its `scene.json`.
    pub fn load(scene_json: impl AsRef<Path>) -> Result<Self> {
        let path = scene_json.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SceneFile = serde_json::from_str(&text)?;
        file.bev.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let image = Image::load(base.join(&file.image))?;
        let ground_truth =
            file.occupancy.as_ref().map(|p| OccupancyGrid::load(base.join(p), file.class_names.clone())).transpose()?;
        Ok(Self { image, camera: file.camera, bev: file.bev, class_names: file.class_names, ground_truth })
    }
}
