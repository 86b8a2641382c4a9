//! Illumination-guided deformable sampling on image features.
//!
//! The inverse illumination is min-max normalized into a guidance map `g`
//! (1 at the darkest pixel, 0 at the brightest). Offsets predicted from the
//! downsampled illumination are scaled by `g`, so dark regions sample from
//! further away while bright regions stay close to the regular grid. The
//! warped features are weighted per kernel point and added back onto the
//! input as a residual.

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::illumination::{IlluminationMap, ILLUMINATION_FLOOR};
use crate::tensor::{PixelCoord, Tensor3};

/// Default number of deformable kernel points (a 3×3 grid).
pub const DEFAULT_K_POINTS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap(Tensor3);

impl GuidanceMap {
    pub fn new(t: Tensor3) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::WrongChannelCount { expected: 1, found: t.channels() });
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("guidance values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }
}

/// Per kernel point `k`: channel `2k` is the x offset, `2k+1` the y offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField(Tensor3);

impl OffsetField {
    pub fn new(t: Tensor3) -> Result<Self> {
        if !t.channels().is_multiple_of(2) || t.channels() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "offset field needs a positive even channel count, got {}",
                t.channels()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn k_points(&self) -> usize {
        self.0.channels() / 2
    }

    /// Mean over kernel points of the offset vector length.
    pub fn magnitude(&self) -> Tensor3 {
        let t = &self.0;
        let k = self.k_points();
        Tensor3::from_fn(1, t.height(), t.width(), |_, y, x| {
            (0..k).map(|p| t.get(2 * p, y, x).hypot(t.get(2 * p + 1, y, x))).sum::<f64>() / k as f64
        })
        .expect("finite offsets give finite magnitudes")
    }
}

/// Per-point modulation weights in `[0, 1]`. Fields produced by
/// [`generate_offsets`] are strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField(Tensor3);

impl WeightField {
    pub fn new(t: Tensor3) -> Result<Self> {
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("modulation weights must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }
}

/// Average-pools `i` down to `target_h × target_w` and derives the guidance
/// map from the pooled illumination.
pub fn build_guidance(i: &IlluminationMap, target_h: usize, target_w: usize) -> Result<(IlluminationMap, GuidanceMap)> {
    let (h, w) = (i.height(), i.width());
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return Err(Error::ShapeMismatch(format!("target {target_h}x{target_w} does not evenly divide {h}x{w}")));
    }
    let (fy, fx) = (h / target_h, w / target_w);
    let area = (fy * fx) as f64;
    let pooled = Tensor3::from_fn(1, target_h, target_w, |_, y, x| {
        let mut s = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                s += i.at(y * fy + dy, x * fx + dx);
            }
        }
        s / area
    })?;
    let i_prime = IlluminationMap::clamped(pooled, ILLUMINATION_FLOOR)?;
    let inv = i_prime.tensor().map(|v| 1.0 / v)?;
    let (lo, hi) = (inv.min(), inv.max());
    let g = if hi > lo { inv.map(|v| (v - lo) / (hi - lo))? } else { inv.map(|_| 0.0)? };
    Ok((i_prime, GuidanceMap::new(g)?))
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    // keep strictly inside (0, 1) once the logistic saturates in f64
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One convolution of `I'` into `3K` channels: `2K` raw offsets and `K`
/// weights squashed through a sigmoid.
pub fn generate_offsets(
    i_prime: &IlluminationMap,
    params: &ConvParams,
    k_points: usize,
) -> Result<(OffsetField, WeightField)> {
    if params.in_channels() != 1 || params.out_channels() != 3 * k_points || k_points == 0 {
        return Err(Error::ShapeMismatch(format!(
            "offset conv maps {} -> {} channels, expected 1 -> {}",
            params.in_channels(),
            params.out_channels(),
            3 * k_points
        )));
    }
    let raw = params.apply(i_prime.tensor())?;
    let (h, w) = (raw.height(), raw.width());
    let dp = Tensor3::from_fn(2 * k_points, h, w, |c, y, x| raw.get(c, y, x))?;
    let dw = Tensor3::from_fn(k_points, h, w, |c, y, x| sigmoid(raw.get(2 * k_points + c, y, x)))?;
    Ok((OffsetField(dp), WeightField(dw)))
}

/// Scales every offset channel by the guidance map.
pub fn modulate_offsets(dp: &OffsetField, g: &GuidanceMap) -> Result<OffsetField> {
    let t = dp.tensor();
    if !t.same_spatial(g.tensor()) {
        return Err(Error::ShapeMismatch(format!(
            "offsets are {}x{} but guidance is {}x{}",
            t.height(),
            t.width(),
            g.tensor().height(),
            g.tensor().width()
        )));
    }
    let out =
        Tensor3::from_fn(t.channels(), t.height(), t.width(), |c, y, x| t.get(c, y, x) * g.tensor().get(0, y, x))?;
    Ok(OffsetField(out))
}

/// Regular grid displacement of kernel point `k` for a `side×side` kernel.
fn grid_offset(k: usize, side: usize) -> (f64, f64) {
    let r = (side / 2) as f64;
    ((k % side) as f64 - r, (k / side) as f64 - r)
}

fn kernel_side(k_points: usize) -> Result<usize> {
    let side = (k_points as f64).sqrt().round() as usize;
    if side * side != k_points || side.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("kernel point count {k_points} is not an odd square")));
    }
    Ok(side)
}

fn check_igs_shapes(f_img: &Tensor3, dp: &OffsetField, dw: &WeightField, kernel_weights: &[f64]) -> Result<usize> {
    let k = kernel_weights.len();
    let side = kernel_side(k)?;
    if dp.k_points() != k || dw.tensor().channels() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} kernel weights but {} offset points and {} modulation channels",
            k,
            dp.k_points(),
            dw.tensor().channels()
        )));
    }
    if !f_img.same_spatial(dp.tensor()) || !f_img.same_spatial(dw.tensor()) {
        return Err(Error::ShapeMismatch("offset, weight and feature sizes differ".into()));
    }
    Ok(side)
}

/// Modulated deformable warping plus residual:
/// `out(p) = F(p) + Σ_k w_k · Δw_k(p) · F(p + p_k + Δp̃_k(p))`, sampled
/// bilinearly with zero padding. Kernel weights are shared across channels.
pub fn igs_apply(f_img: &Tensor3, dp_mod: &OffsetField, dw: &WeightField, kernel_weights: &[f64]) -> Result<Tensor3> {
    let side = check_igs_shapes(f_img, dp_mod, dw, kernel_weights)?;
    let (c, h, w) = (f_img.channels(), f_img.height(), f_img.width());
    let (off, mw) = (dp_mod.tensor(), dw.tensor());
    let mut out = f_img.clone();
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &wk) in kernel_weights.iter().enumerate() {
                let scale = wk * mw.get(k, y, x);
                if scale == 0.0 {
                    continue;
                }
                let (gx, gy) = grid_offset(k, side);
                let at =
                    PixelCoord::new(x as f64 + gx + off.get(2 * k, y, x), y as f64 + gy + off.get(2 * k + 1, y, x));
                f_img.bilinear_accumulate(at, scale, &mut acc);
            }
            for (ch, &a) in acc.iter().enumerate() {
                if a != 0.0 {
                    out.add_at(ch, y, x, a);
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`igs_apply`] with respect to the modulated
/// offsets: given `upstream = ∂L/∂out`, returns `∂L/∂Δp̃` in offset layout.
pub fn igs_offset_vjp(
    f_img: &Tensor3,
    dp_mod: &OffsetField,
    dw: &WeightField,
    kernel_weights: &[f64],
    upstream: &Tensor3,
) -> Result<OffsetField> {
    let side = check_igs_shapes(f_img, dp_mod, dw, kernel_weights)?;
    if upstream.shape() != f_img.shape() {
        return Err(Error::ShapeMismatch("upstream gradient must match the output shape".into()));
    }
    let (c, h, w) = (f_img.channels(), f_img.height(), f_img.width());
    let (off, mw) = (dp_mod.tensor(), dw.tensor());
    let mut grad = Tensor3::zeros(2 * kernel_weights.len(), h, w);
    for y in 0..h {
        for x in 0..w {
            for (k, &wk) in kernel_weights.iter().enumerate() {
                let scale = wk * mw.get(k, y, x);
                let (gx, gy) = grid_offset(k, side);
                let at =
                    PixelCoord::new(x as f64 + gx + off.get(2 * k, y, x), y as f64 + gy + off.get(2 * k + 1, y, x));
                let (mut gu, mut gv) = (0.0, 0.0);
                for ch in 0..c {
                    let (_, du, dv) = f_img.bilinear_sample_with_grad(ch, at);
                    gu += upstream.get(ch, y, x) * du;
                    gv += upstream.get(ch, y, x) * dv;
                }
                grad.set(2 * k, y, x, scale * gu);
                grad.set(2 * k + 1, y, x, scale * gv);
            }
        }
    }
    OffsetField::new(grad)
}
