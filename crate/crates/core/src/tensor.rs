//! Dense `C×H×W` container and the bilinear sampling primitive.
//!
//! Layout is row-major with the channel outermost: element `(c, y, x)` lives at
//! `(c * H + y) * W + x`. The same order is used on disk.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Continuous image coordinate; `u` is the column and `v` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos} is {}", data[pos])));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Builds a tensor by evaluating `f(c, y, x)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Stores `value`; panics if it is not finite.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        assert!(value.is_finite(), "non-finite value {value} at ({c}, {y}, {x})");
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] += value;
        assert!(self.data[i].is_finite(), "accumulation overflowed at ({c}, {y}, {x})");
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Applies `f` elementwise. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.channels, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn same_spatial(&self, other: &Tensor3) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at integer pixel `(x, y)` or zero outside the map.
    #[inline]
    fn padded(&self, c: usize, y: i64, x: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    /// Bilinear interpolation of every channel at `at`, with virtual zero
    /// pixels outside `[0, W-1] × [0, H-1]`.
    pub fn bilinear_sample(&self, at: PixelCoord) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_accumulate(at, 1.0, &mut out);
        out
    }

    /// Adds `scale * bilinear_sample(at)` into `out` without allocating.
    pub fn bilinear_accumulate(&self, at: PixelCoord, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let Some(s) = Support::new(at) else { return };
        for (c, o) in out.iter_mut().enumerate() {
            let [p00, p01, p10, p11] = s.pixels(self, c);
            *o += scale * s.interpolate(p00, p01, p10, p11);
        }
    }

    /// Sampled value of channel `c` together with its partial derivatives
    /// with respect to `u` and `v`. On integer coordinates the derivative is
    /// the one taken from the right/below.
    pub fn bilinear_sample_with_grad(&self, c: usize, at: PixelCoord) -> (f64, f64, f64) {
        let Some(s) = Support::new(at) else { return (0.0, 0.0, 0.0) };
        let [p00, p01, p10, p11] = s.pixels(self, c);
        let value = s.interpolate(p00, p01, p10, p11);
        let du = (1.0 - s.wy) * (p01 - p00) + s.wy * (p11 - p10);
        let dv = (1.0 - s.wx) * (p10 - p00) + s.wx * (p11 - p01);
        (value, du, dv)
    }
}

/// The four pixels surrounding a continuous coordinate.
struct Support {
    x0: i64,
    y0: i64,
    wx: f64,
    wy: f64,
}

impl Support {
    fn new(at: PixelCoord) -> Option<Self> {
        if !at.u.is_finite() || !at.v.is_finite() {
            return None;
        }
        let fx = at.u.floor();
        let fy = at.v.floor();
        // far outside any realistic map: everything is padding
        if fx.abs() > 1e15 || fy.abs() > 1e15 {
            return None;
        }
        Some(Self { x0: fx as i64, y0: fy as i64, wx: at.u - fx, wy: at.v - fy })
    }

    fn pixels(&self, t: &Tensor3, c: usize) -> [f64; 4] {
        [
            t.padded(c, self.y0, self.x0),
            t.padded(c, self.y0, self.x0 + 1),
            t.padded(c, self.y0 + 1, self.x0),
            t.padded(c, self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    fn interpolate(&self, p00: f64, p01: f64, p10: f64, p11: f64) -> f64 {
        // exact at integer coordinates: the zero weights vanish
        let top = if self.wx == 0.0 { p00 } else { p00 * (1.0 - self.wx) + p01 * self.wx };
        let bottom = if self.wx == 0.0 { p10 } else { p10 * (1.0 - self.wx) + p11 * self.wx };
        if self.wy == 0.0 {
            top
        } else {
            top * (1.0 - self.wy) + bottom * self.wy
        }
    }
}
