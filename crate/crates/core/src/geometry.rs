//! Pinhole projection, vertical height sampling and the BEV illumination
//! field.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::illumination::IlluminationMap;
use crate::numeric::bounded_mean;
use crate::tensor::Tensor3;

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// 3×4 projection matrix `M` with `d·[u, v, 1]ᵀ = M·[x, y, z, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMatrix {
    m: Matrix3x4<f64>,
    inv_block: Matrix3<f64>,
}

impl CameraMatrix {
    pub fn from_row_slice(rows: &[f64]) -> Result<Self> {
        if rows.len() != 12 {
            return Err(Error::ShapeMismatch(format!("camera matrix needs 12 numbers, got {}", rows.len())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera matrix entry".into()));
        }
        Self::from_matrix(Matrix3x4::from_row_slice(rows))
    }

    pub fn from_matrix(m: Matrix3x4<f64>) -> Result<Self> {
        let block: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = block.abs().max().max(f64::MIN_POSITIVE);
        if block.determinant().abs() <= 1e-12 * scale * scale * scale {
            return Err(Error::SingularCamera("left 3x3 block is singular".into()));
        }
        let inv_block =
            block.try_inverse().ok_or_else(|| Error::SingularCamera("left 3x3 block is singular".into()))?;
        Ok(Self { m, inv_block })
    }

    /// `K·[R | t]` from intrinsics and a world-to-camera rigid transform.
    pub fn from_parts(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        rt.set_column(3, &translation);
        Self::from_matrix(intrinsics * rt)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    pub fn to_row_vec(&self) -> Vec<f64> {
        (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| self.m[(r, c)]).collect()
    }

    /// Camera for an image resampled by `sx` horizontally and `sy` vertically.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        let mut m = self.m;
        m.row_mut(0).scale_mut(sx);
        m.row_mut(1).scale_mut(sy);
        Self::from_matrix(m)
    }

    /// World point on the ray through `(u, v)` whose projective depth is `d`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        let t = self.m.column(3);
        self.inv_block * (Vector3::new(d * u, d * v, d) - t)
    }
}

impl Serialize for CameraMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        CameraMatrix::from_row_slice(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub d: f64,
    pub valid: bool,
}

pub fn project_point(m: &CameraMatrix, x: f64, y: f64, z: f64) -> Projection {
    let p = m.matrix() * Vector4::new(x, y, z, 1.0);
    let (a, b, d) = (p[0], p[1], p[2]);
    if d > MIN_DEPTH {
        Projection { u: a / d, v: b / d, d, valid: true }
    } else {
        Projection { u: f64::NAN, v: f64::NAN, d, valid: false }
    }
}

/// Metric extent and voxel size of the bird's-eye-view grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub voxel: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        Self { x_range: [-40.0, 40.0], y_range: [-40.0, 40.0], z_range: [-1.0, 5.4], voxel: 0.4 }
    }
}

impl BevSpec {
    /// 20×20×8 grid used for quick runs.
    pub fn desk() -> Self {
        Self { x_range: [-4.0, 4.0], y_range: [-4.0, 4.0], z_range: [-1.0, 2.2], voxel: 0.4 }
    }

    fn cells(range: [f64; 2], voxel: f64, axis: &str) -> Result<usize> {
        let len = range[1] - range[0];
        if !(len > 0.0 && voxel > 0.0 && len.is_finite()) {
            return Err(Error::InvalidConfig(format!("{axis} range {range:?} / voxel {voxel} is empty")));
        }
        let n = len / voxel;
        let rounded = n.round();
        if (n - rounded).abs() > 1e-6 * rounded.max(1.0) || rounded < 1.0 {
            return Err(Error::InvalidConfig(format!("{axis} range {range:?} is not divisible by voxel {voxel}")));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().map(|_| ())
    }

    /// Grid dimensions `(X, Y, Z)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok((
            Self::cells(self.x_range, self.voxel, "x")?,
            Self::cells(self.y_range, self.voxel, "y")?,
            Self::cells(self.z_range, self.voxel, "z")?,
        ))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x_range[0] + (i as f64 + 0.5) * self.voxel, self.y_range[0] + (j as f64 + 0.5) * self.voxel)
    }

    pub fn z_center(&self, k: usize) -> f64 {
        self.z_range[0] + (k as f64 + 0.5) * self.voxel
    }

    /// BEV cell containing `(x, y)`, if inside the x/y ranges.
    pub fn cell_of(&self, x: f64, y: f64, nx: usize, ny: usize) -> Option<(usize, usize)> {
        let fi = ((x - self.x_range[0]) / self.voxel).floor();
        let fj = ((y - self.y_range[0]) / self.voxel).floor();
        if fi >= 0.0 && fj >= 0.0 && fi < nx as f64 && fj < ny as f64 {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }
}

/// `n_z` evenly spaced cell-centre heights spanning the z range.
pub fn sample_heights(spec: &BevSpec, n_z: usize) -> Result<Vec<f64>> {
    if n_z == 0 {
        return Err(Error::InvalidConfig("height sample count must be >= 1".into()));
    }
    let [lo, hi] = spec.z_range;
    let step = (hi - lo) / n_z as f64;
    Ok((1..=n_z).map(|j| lo + (j as f64 - 0.5) * step).collect())
}

/// `X×Y` grid of aggregated illumination in `[0, 1]`, stored as `1×X×Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationField(Tensor3);

impl IlluminationField {
    pub fn new(t: Tensor3) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::WrongChannelCount { expected: 1, found: t.channels() });
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("illumination field values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self(Tensor3::zeros(1, nx, ny))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.0.get(0, i, j)
    }

    /// Cellwise maximum over several per-camera fields.
    pub fn merge_max(fields: &[IlluminationField]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Empty("illumination fields".into()))?;
        if fields.iter().any(|f| f.0.shape() != first.0.shape()) {
            return Err(Error::ShapeMismatch("illumination fields differ in size".into()));
        }
        let [_, nx, ny] = first.0.shape();
        Self::new(Tensor3::from_fn(1, nx, ny, |_, i, j| fields.iter().map(|f| f.at(i, j)).fold(0.0, f64::max))?)
    }
}

/// Illumination pixel hit by the projection of `(x, y, z)`, if any.
pub fn sample_illumination(i: &IlluminationMap, m: &CameraMatrix, x: f64, y: f64, z: f64) -> Option<f64> {
    let p = project_point(m, x, y, z);
    if !p.valid {
        return None;
    }
    let (fu, fv) = (p.u.floor(), p.v.floor());
    if fu >= 0.0 && fv >= 0.0 && fu < i.width() as f64 && fv < i.height() as f64 {
        Some(i.at(fv as usize, fu as usize))
    } else {
        None
    }
}

/// For every BEV cell, the mean illumination over the height samples whose
/// projection lands inside the image. Cells without any such sample are 0.
pub fn illumination_field(
    i: &IlluminationMap,
    m: &CameraMatrix,
    spec: &BevSpec,
    n_z: usize,
) -> Result<IlluminationField> {
    let (nx, ny, _) = spec.dims()?;
    let heights = sample_heights(spec, n_z)?;
    let mut hits = Vec::with_capacity(n_z);
    let field = Tensor3::from_fn(1, nx, ny, |_, ci, cj| {
        let (x, y) = spec.cell_center(ci, cj);
        hits.clear();
        hits.extend(heights.iter().filter_map(|&z| sample_illumination(i, m, x, y, z)));
        bounded_mean(&hits).unwrap_or(0.0)
    })?;
    IlluminationField::new(field)
}
