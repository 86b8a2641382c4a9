//! Voxel occupancy grids and mean IoU with class-presence exclusion.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor3;

/// `X × Y × Z` grid of class ids, stored x-major then y then z.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    dims: (usize, usize, usize),
    labels: Vec<u32>,
    class_names: Vec<String>,
}

impl OccupancyGrid {
    pub fn new(nx: usize, ny: usize, nz: usize, labels: Vec<u32>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidValue("occupancy grid needs at least one class".into()));
        }
        if labels.len() != nx * ny * nz {
            return Err(Error::ShapeMismatch(format!("{} labels for a {nx}x{ny}x{nz} grid", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::InvalidValue(format!("label {l} outside the {}-class table", class_names.len())));
        }
        Ok(Self { dims: (nx, ny, nz), labels, class_names })
    }

    pub fn filled(nx: usize, ny: usize, nz: usize, label: u32, class_names: Vec<String>) -> Result<Self> {
        Self::new(nx, ny, nz, vec![label; nx * ny * nz], class_names)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u32) {
        assert!((label as usize) < self.class_names.len());
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    /// Labels as a `[X, Y, Z]` raw tensor.
    pub fn to_tensor(&self) -> Tensor3 {
        let (nx, ny, nz) = self.dims;
        Tensor3::new(nx, ny, nz, self.labels.iter().map(|&l| l as f64).collect()).expect("labels are finite")
    }

    pub fn from_tensor(t: &Tensor3, class_names: Vec<String>) -> Result<Self> {
        let [nx, ny, nz] = t.shape();
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::InvalidValue(format!("occupancy label {v} is not a class id")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(nx, ny, nz, labels, class_names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_raw(path, &self.to_tensor(), io::DType::F32)
    }

    pub fn load(path: impl AsRef<Path>, class_names: Vec<String>) -> Result<Self> {
        Self::from_tensor(&io::read_raw(path)?, class_names)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub name: String,
    pub intersection: u64,
    pub union: u64,
    /// `None` when the class is absent from both grids.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_class: Vec<ClassIoU>,
    pub miou: f64,
    pub evaluated_classes: Vec<usize>,
}

/// Per-class intersection and union counts, summable across scenes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoUCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IoUCounts {
    pub fn zeros(n_classes: usize) -> Self {
        Self { intersection: vec![0; n_classes], union: vec![0; n_classes] }
    }

    pub fn from_grids(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let n = pred.n_classes().max(gt.n_classes());
        let mut c = Self::zeros(n);
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if p == g {
                c.intersection[p as usize] += 1;
                c.union[p as usize] += 1;
            } else {
                c.union[p as usize] += 1;
                c.union[g as usize] += 1;
            }
        }
        Ok(c)
    }

    pub fn accumulate(&mut self, other: &IoUCounts) {
        let n = self.union.len().max(other.union.len());
        self.intersection.resize(n, 0);
        self.union.resize(n, 0);
        for m in 0..other.union.len() {
            self.intersection[m] += other.intersection[m];
            self.union[m] += other.union[m];
        }
    }

    /// Report over classes with non-zero union; fails if there are none.
    pub fn report(&self, class_names: &[String]) -> Result<IoUReport> {
        let mut per_class = Vec::with_capacity(self.union.len());
        let mut evaluated = Vec::new();
        let mut sum = 0.0;
        for m in 0..self.union.len() {
            let (i, u) = (self.intersection[m], self.union[m]);
            let iou = (u > 0).then(|| i as f64 / u as f64);
            if let Some(v) = iou {
                evaluated.push(m);
                sum += v;
            }
            let name = class_names.get(m).cloned().unwrap_or_else(|| format!("class_{m}"));
            per_class.push(ClassIoU { name, intersection: i, union: u, iou });
        }
        if evaluated.is_empty() {
            return Err(Error::Empty("no class is present in either grid".into()));
        }
        let miou = sum / evaluated.len() as f64;
        Ok(IoUReport { per_class, miou, evaluated_classes: evaluated })
    }
}

/// Voxel IoU per class and their mean over classes present in either grid.
pub fn miou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<IoUReport> {
    IoUCounts::from_grids(pred, gt)?.report(gt.class_names())
}

impl IoUReport {
    /// `name,intersection,union,iou` rows, absent classes with an empty IoU,
    /// then a final `mIoU` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,intersection,union,iou\n");
        for c in &self.per_class {
            let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(s, "{},{},{},{}", c.name, c.intersection, c.union, iou).unwrap();
        }
        writeln!(s, "mIoU,,,{:.6}", self.miou).unwrap();
        s
    }
}
