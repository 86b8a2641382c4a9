//! Lifting image features into the bird's-eye view: depth/context split,
//! depth-weighted BEV pooling, a single-head deformable cross-attention
//! residual, and illumination-weighted refinement.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::geometry::{project_point, sample_heights, BevSpec, CameraMatrix, IlluminationField};
use crate::io;
use crate::numeric::ExactSum;
use crate::tensor::{PixelCoord, Tensor3};

/// Uniform metric depth discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self { d_min: 1.0, d_max: 20.0, count: 16 }
    }
}

impl DepthBins {
    pub fn centers(&self) -> Result<Vec<f64>> {
        if self.count == 0 || !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::InvalidConfig(format!("bad depth bins {self:?}")));
        }
        let step = (self.d_max - self.d_min) / self.count as f64;
        Ok((0..self.count).map(|b| self.d_min + (b as f64 + 0.5) * step).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthContext {
    pub f_ctx: Tensor3,
    /// Per-pixel distribution over depth bins, `D_bins × h × w`.
    pub depth: Tensor3,
    pub bin_centers: Vec<f64>,
}

impl DepthContext {
    pub fn new(f_ctx: Tensor3, depth: Tensor3, bin_centers: Vec<f64>) -> Result<Self> {
        if !f_ctx.same_spatial(&depth) {
            return Err(Error::ShapeMismatch("context and depth sizes differ".into()));
        }
        if depth.channels() != bin_centers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} depth channels for {} bin centres",
                depth.channels(),
                bin_centers.len()
            )));
        }
        if bin_centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidValue("bin centres must be strictly increasing".into()));
        }
        Ok(Self { f_ctx, depth, bin_centers })
    }
}

/// `C × X × Y` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature(Tensor3);

impl BevFeature {
    pub fn new(t: Tensor3) -> Self {
        Self(t)
    }

    pub fn zeros(channels: usize, nx: usize, ny: usize) -> Self {
        Self(Tensor3::zeros(channels, nx, ny))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    /// Feature vector at cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.0.channels()).map(|c| self.0.get(c, i, j)).collect()
    }
}

/// Linear maps from a BEV query vector to `K` sampling offsets and `K`
/// attention logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    k_points: usize,
    channels: usize,
    /// `2K × C`, rows ordered `(x_0, y_0, x_1, y_1, ...)`.
    offset_map: Vec<f64>,
    /// `K × C`.
    attn_map: Vec<f64>,
}

pub const DEFAULT_ATTENTION_POINTS: usize = 4;

impl AttentionParams {
    pub fn new(k_points: usize, channels: usize, offset_map: Vec<f64>, attn_map: Vec<f64>) -> Result<Self> {
        if k_points == 0 {
            return Err(Error::InvalidConfig("attention needs at least one point".into()));
        }
        if offset_map.len() != 2 * k_points * channels || attn_map.len() != k_points * channels {
            return Err(Error::ShapeMismatch(format!(
                "attention maps of length {} / {} do not fit K={k_points}, C={channels}",
                offset_map.len(),
                attn_map.len()
            )));
        }
        if offset_map.iter().chain(&attn_map).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention parameters".into()));
        }
        Ok(Self { k_points, channels, offset_map, attn_map })
    }

    pub fn zeros(k_points: usize, channels: usize) -> Result<Self> {
        Self::new(k_points, channels, vec![0.0; 2 * k_points * channels], vec![0.0; k_points * channels])
    }

    pub fn seeded(k_points: usize, channels: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = scale / (channels as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let offset_map = draw(2 * k_points * channels);
        let attn_map = draw(k_points * channels);
        Self::new(k_points, channels, offset_map, attn_map)
    }

    /// Offset map from a `[1, 2K, C]` tensor, attention map from `[1, K, C]`.
    pub fn from_tensors(offset_map: &Tensor3, attn_map: &Tensor3) -> Result<Self> {
        let [one, k2, c] = offset_map.shape();
        if one != 1 || k2 % 2 != 0 || attn_map.shape() != [1, k2 / 2, c] {
            return Err(Error::ShapeMismatch(format!(
                "attention tensors {:?} / {:?}, expected [1, 2K, C] / [1, K, C]",
                offset_map.shape(),
                attn_map.shape()
            )));
        }
        Self::new(k2 / 2, c, offset_map.data().to_vec(), attn_map.data().to_vec())
    }

    pub fn load(offset_map: impl AsRef<Path>, attn_map: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&io::read_raw(offset_map)?, &io::read_raw(attn_map)?)
    }

    pub fn k_points(&self) -> usize {
        self.k_points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn row_dot(map: &[f64], row: usize, q: &[f64]) -> f64 {
        let c = q.len();
        map[row * c..(row + 1) * c].iter().zip(q).map(|(a, b)| a * b).sum()
    }

    /// `K` offsets `(dx, dy)` for query `q`.
    pub fn offsets(&self, q: &[f64]) -> Vec<(f64, f64)> {
        (0..self.k_points)
            .map(|k| (Self::row_dot(&self.offset_map, 2 * k, q), Self::row_dot(&self.offset_map, 2 * k + 1, q)))
            .collect()
    }

    pub fn logits(&self, q: &[f64]) -> Vec<f64> {
        (0..self.k_points).map(|k| Self::row_dot(&self.attn_map, k, q)).collect()
    }

    /// Softmax-normalized attention weights for query `q`.
    pub fn attention(&self, q: &[f64]) -> Vec<f64> {
        softmax(&self.logits(q))
    }

    /// Offset map as `[1, 2K, C]` and attention map as `[1, K, C]`.
    pub fn to_tensors(&self) -> (Tensor3, Tensor3) {
        let (k, c) = (self.k_points, self.channels);
        (
            Tensor3::new(1, 2 * k, c, self.offset_map.clone()).expect("validated on construction"),
            Tensor3::new(1, k, c, self.attn_map.clone()).expect("validated on construction"),
        )
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// 1×1 convolution into `c_ctx` context channels followed by `bins.count`
/// depth logits that are softmax-normalized per pixel.
pub fn depth_context_split(
    f_igs: &Tensor3,
    params: &ConvParams,
    c_ctx: usize,
    bins: &DepthBins,
) -> Result<DepthContext> {
    let d_bins = bins.count;
    if params.kernel() != 1 || params.in_channels() != f_igs.channels() || params.out_channels() != c_ctx + d_bins {
        return Err(Error::ShapeMismatch(format!(
            "depth net is {}x{} with kernel {}, expected 1x1 mapping {} -> {}",
            params.in_channels(),
            params.out_channels(),
            params.kernel(),
            f_igs.channels(),
            c_ctx + d_bins
        )));
    }
    let raw = params.apply(f_igs)?;
    let (h, w) = (raw.height(), raw.width());
    let f_ctx = Tensor3::from_fn(c_ctx, h, w, |c, y, x| raw.get(c, y, x))?;
    let mut depth = Tensor3::zeros(d_bins, h, w);
    let mut logits = vec![0.0; d_bins];
    for y in 0..h {
        for x in 0..w {
            for (b, l) in logits.iter_mut().enumerate() {
                *l = raw.get(c_ctx + b, y, x);
            }
            for (b, p) in softmax(&logits).into_iter().enumerate() {
                depth.set(b, y, x, p);
            }
        }
    }
    DepthContext::new(f_ctx, depth, bins.centers()?)
}

/// Result of [`bev_pool_with_mass`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput {
    pub q: BevFeature,
    /// Correctly rounded total of the depth probability scattered into the grid.
    pub scattered_mass: f64,
    /// Depth probability mass per cell, `1 × X × Y`.
    pub mass: Tensor3,
}

/// Lift-splat pooling: every pixel centre is back-projected to each bin
/// depth and its context vector, weighted by the bin probability, is summed
/// into the BEV cell containing the point. Points outside the x/y ranges are
/// dropped. `m` must be the camera of the feature map resolution.
pub fn bev_pool(dc: &DepthContext, m: &CameraMatrix, spec: &BevSpec) -> Result<BevFeature> {
    Ok(bev_pool_with_mass(dc, m, spec)?.q)
}

pub fn bev_pool_with_mass(dc: &DepthContext, m: &CameraMatrix, spec: &BevSpec) -> Result<PoolOutput> {
    let (nx, ny, _) = spec.dims()?;
    let (c, h, w) = (dc.f_ctx.channels(), dc.f_ctx.height(), dc.f_ctx.width());
    let mut q = Tensor3::zeros(c, nx, ny);
    let mut mass = Tensor3::zeros(1, nx, ny);
    let mut total = ExactSum::new();
    // fixed pixel-major, bin-minor order keeps the accumulation bit-stable
    for v in 0..h {
        for u in 0..w {
            for (b, &depth) in dc.bin_centers.iter().enumerate() {
                let p = dc.depth.get(b, v, u);
                let pt = m.back_project(u as f64 + 0.5, v as f64 + 0.5, depth);
                let Some((i, j)) = spec.cell_of(pt.x, pt.y, nx, ny) else { continue };
                total.add(p);
                mass.add_at(0, i, j, p);
                for ch in 0..c {
                    q.add_at(ch, i, j, p * dc.f_ctx.get(ch, v, u));
                }
            }
        }
    }
    Ok(PoolOutput { q: BevFeature(q), scattered_mass: total.value(), mass })
}

/// Converts a projected image coordinate into bilinear sampling space, where
/// integer coordinates are pixel centres.
#[inline]
fn to_sample_coord(u: f64, v: f64) -> PixelCoord {
    PixelCoord::new(u - 0.5, v - 0.5)
}

/// Residual query: for each cell and each height sample that projects into
/// the feature map, attend over `K` deformed sampling points around the
/// projection; the per-height results are summed. Out-of-view samples add
/// nothing. `m` must be the camera of the feature map resolution.
pub fn residual_query(
    q: &BevFeature,
    f_ctx: &Tensor3,
    m: &CameraMatrix,
    spec: &BevSpec,
    n_z: usize,
    params: &AttentionParams,
) -> Result<BevFeature> {
    let (nx, ny, _) = spec.dims()?;
    let c = q.channels();
    if q.tensor().shape() != [c, nx, ny] {
        return Err(Error::ShapeMismatch(format!(
            "query grid {:?} does not match BEV dims ({nx}, {ny})",
            q.tensor().shape()
        )));
    }
    if params.channels() != c || f_ctx.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "attention expects {} channels, query has {c}, context has {}",
            params.channels(),
            f_ctx.channels()
        )));
    }
    let heights = sample_heights(spec, n_z)?;
    let (fw, fh) = (f_ctx.width() as f64, f_ctx.height() as f64);
    let mut out = Tensor3::zeros(c, nx, ny);
    let mut acc = vec![0.0; c];
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = spec.cell_center(i, j);
            let query = q.cell(i, j);
            let offsets = params.offsets(&query);
            let weights = params.attention(&query);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &z in &heights {
                let p = project_point(m, x, y, z);
                if !p.valid || !(p.u >= 0.0 && p.u < fw && p.v >= 0.0 && p.v < fh) {
                    continue;
                }
                let base = to_sample_coord(p.u, p.v);
                for (&(dx, dy), &a) in offsets.iter().zip(&weights) {
                    f_ctx.bilinear_accumulate(PixelCoord::new(base.u + dx, base.v + dy), a, &mut acc);
                }
            }
            for (ch, &a) in acc.iter().enumerate() {
                out.set(ch, i, j, a);
            }
        }
    }
    Ok(BevFeature(out))
}

/// `F = Q + Q' ⊙ S` with `S` broadcast over channels.
pub fn refine_bev(q: &BevFeature, q_res: &BevFeature, s: &IlluminationField) -> Result<BevFeature> {
    let (qt, rt) = (q.tensor(), q_res.tensor());
    if qt.shape() != rt.shape() || !qt.same_spatial(s.tensor()) {
        return Err(Error::ShapeMismatch(format!(
            "refinement inputs {:?}, {:?}, {:?} disagree",
            qt.shape(),
            rt.shape(),
            s.tensor().shape()
        )));
    }
    let out = Tensor3::from_fn(qt.channels(), qt.height(), qt.width(), |c, i, j| {
        let term = rt.get(c, i, j) * s.at(i, j);
        // a vanishing term must leave Q untouched, signed zeros included
        if term == 0.0 {
            qt.get(c, i, j)
        } else {
            qt.get(c, i, j) + term
        }
    })?;
    Ok(BevFeature(out))
}
