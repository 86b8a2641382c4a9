//! Illumination estimation, Retinex enhancement and the global illumination
//! factor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numeric::bounded_mean;
use crate::tensor::Tensor3;

/// Lower bound applied to every illumination value.
pub const ILLUMINATION_FLOOR: f64 = 0.01;

/// Three-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor3);

impl Image {
    pub fn new(t: Tensor3) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::WrongChannelCount { expected: 3, found: t.channels() });
        }
        if t.is_empty() {
            return Err(Error::Empty("image".into()));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(io::read_netpbm(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_netpbm(path, &self.0)
    }
}

/// Single-channel illumination map with values in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationMap(Tensor3);

impl IlluminationMap {
    pub fn new(t: Tensor3) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::WrongChannelCount { expected: 1, found: t.channels() });
        }
        if t.is_empty() {
            return Err(Error::Empty("illumination map".into()));
        }
        if let Some(v) = t.data().iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidValue(format!("illumination value {v} outside (0, 1]")));
        }
        Ok(Self(t))
    }

    /// Clamps every value into `[floor, 1]`.
    pub fn clamped(t: Tensor3, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::InvalidValue(format!("illumination floor {floor} outside (0, 1)")));
        }
        Self::new(t.map(|v| v.clamp(floor, 1.0))?)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor3::filled(1, height, width, value))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub stages: usize,
    pub blur_kernel: usize,
    pub floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { stages: 3, blur_kernel: 7, floor: ILLUMINATION_FLOOR }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidConfig("estimator stages must be >= 1".into()));
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("blur kernel must be odd, got {}", self.blur_kernel)));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::InvalidConfig(format!("floor {} outside (0, 1)", self.floor)));
        }
        Ok(())
    }
}

/// Separable box blur of one plane with replicated borders.
fn box_blur(plane: &[f64], h: usize, w: usize, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as i64;
    let k = kernel as f64;
    let clampi = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| plane[y * w + clampi(x as i64 + d, w)]).sum();
            tmp[y * w + x] = s / k;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| tmp[clampi(y as i64 + d, h) * w + x]).sum();
            out[y * w + x] = s / k;
        }
    }
    out
}

/// Max over color channels, `stages` box blurs, then clamp to `[floor, 1]`.
pub fn estimate_illumination(x: &Image, cfg: &EstimatorConfig) -> Result<IlluminationMap> {
    cfg.validate()?;
    let t = x.tensor();
    let (h, w) = (t.height(), t.width());
    let mut plane: Vec<f64> = (0..h * w).map(|i| t.channel(0)[i].max(t.channel(1)[i]).max(t.channel(2)[i])).collect();
    for _ in 0..cfg.stages {
        plane = box_blur(&plane, h, w, cfg.blur_kernel);
    }
    IlluminationMap::clamped(Tensor3::new(1, h, w, plane)?, cfg.floor)
}

/// Loads an externally computed illumination map (raw tensor or PGM) and
/// clamps it into `[floor, 1]`.
pub fn load_illumination(path: impl AsRef<Path>, floor: f64) -> Result<IlluminationMap> {
    let t = io::read_any(path)?;
    if t.channels() != 1 {
        return Err(Error::WrongChannelCount { expected: 1, found: t.channels() });
    }
    IlluminationMap::clamped(t, floor)
}

/// `clamp(X / I, 0, 1)` per pixel and channel.
pub fn retinex_enhance(x: &Image, i: &IlluminationMap) -> Result<Image> {
    let t = x.tensor();
    if !t.same_spatial(i.tensor()) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but illumination is {}x{}",
            t.height(),
            t.width(),
            i.height(),
            i.width()
        )));
    }
    let out = Tensor3::from_fn(3, t.height(), t.width(), |c, y, xx| (t.get(c, y, xx) / i.at(y, xx)).clamp(0.0, 1.0))?;
    Ok(Image(out))
}

/// Mean illumination over all pixels.
pub fn illumination_factor(i: &IlluminationMap) -> f64 {
    bounded_mean(i.tensor().data()).expect("maps are non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: f64) -> Image {
        Image::new(Tensor3::filled(3, h, w, v)).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let cfg = EstimatorConfig::default();
        let m = estimate_illumination(&gray(8, 6, 0.5), &cfg).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.5));
        let m = estimate_illumination(&gray(4, 4, 0.0), &cfg).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.01));
        let px = Image::new(Tensor3::new(3, 1, 1, vec![0.2, 0.6, 0.4]).unwrap()).unwrap();
        let m = estimate_illumination(&px, &cfg).unwrap();
        assert_eq!(m.tensor().data(), &[0.6]);
    }

    #[test]
    fn estimator_config_validation() {
        let bad = [
            EstimatorConfig { stages: 0, ..Default::default() },
            EstimatorConfig { blur_kernel: 4, ..Default::default() },
            EstimatorConfig { floor: 0.0, ..Default::default() },
            EstimatorConfig { floor: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(estimate_illumination(&gray(2, 2, 0.5), &cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn enhance_examples() {
        let one = IlluminationMap::constant(2, 2, 1.0).unwrap();
        let half = IlluminationMap::constant(2, 2, 0.5).unwrap();
        let out = retinex_enhance(&gray(2, 2, 0.3), &one).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.3));
        let out = retinex_enhance(&gray(2, 2, 0.2), &half).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.4));
        let out = retinex_enhance(&gray(2, 2, 0.8), &half).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 1.0));
        let other = IlluminationMap::constant(3, 2, 0.5).unwrap();
        assert!(matches!(retinex_enhance(&gray(2, 2, 0.2), &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn factor_examples() {
        let m = IlluminationMap::constant(3, 5, 0.7).unwrap();
        assert!((illumination_factor(&m) - 0.7).abs() < 1e-15);
        let m = IlluminationMap::new(Tensor3::new(1, 2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap()).unwrap();
        assert!((illumination_factor(&m) - 0.5).abs() < 1e-15);
        let m = IlluminationMap::constant(1, 1, 0.01).unwrap();
        assert_eq!(illumination_factor(&m), 0.01);
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.raw");
        io::write_raw(&p, &Tensor3::filled(1, 4, 4, 0.5), io::DType::F32).unwrap();
        let m = load_illumination(&p, ILLUMINATION_FLOOR).unwrap();
        assert_eq!(m.tensor().shape(), [1, 4, 4]);
        assert!(m.tensor().data().iter().all(|&v| v == 0.5));

        let p = dir.path().join("zero.raw");
        io::write_raw(&p, &Tensor3::new(1, 1, 2, vec![0.0, 0.3]).unwrap(), io::DType::F32).unwrap();
        let m = load_illumination(&p, ILLUMINATION_FLOOR).unwrap();
        assert_eq!(m.at(0, 0), 0.01);

        let p = dir.path().join("rgb.raw");
        io::write_raw(&p, &Tensor3::filled(3, 2, 2, 0.5), io::DType::F32).unwrap();
        let err = load_illumination(&p, ILLUMINATION_FLOOR).unwrap_err();
        assert!(err.to_string().contains("wrong channel count"), "{err}");

        let p = dir.path().join("map.pgm");
        io::write_netpbm(&p, &Tensor3::new(1, 1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let m = load_illumination(&p, ILLUMINATION_FLOOR).unwrap();
        assert_eq!(m.tensor().data(), &[0.01, 1.0]);

        let p = dir.path().join("junk.raw");
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load_illumination(&p, ILLUMINATION_FLOOR), Err(Error::Malformed { .. })));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(0.0f64..=1.0, 3 * h * w)
                .prop_map(move |d| Image::new(Tensor3::new(3, h, w, d).unwrap()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn channel_permutation_invariance(x in arb_image()) {
            let t = x.tensor();
            let perm = Tensor3::from_fn(3, t.height(), t.width(), |c, y, xx| t.get((c + 1) % 3, y, xx)).unwrap();
            let cfg = EstimatorConfig::default();
            let a = estimate_illumination(&x, &cfg).unwrap();
            let b = estimate_illumination(&Image::new(perm).unwrap(), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn enhancement_brightens_and_is_monotone(x in arb_image(), seed in 0.01f64..1.0) {
            let i = IlluminationMap::constant(x.height(), x.width(), seed).unwrap();
            let e = retinex_enhance(&x, &i).unwrap();
            for (a, b) in x.tensor().data().iter().zip(e.tensor().data()) {
                prop_assert!(b >= a);
            }
            let brighter = Image::new(x.tensor().map(|v| (v + 0.1).min(1.0)).unwrap()).unwrap();
            let eb = retinex_enhance(&brighter, &i).unwrap();
            for (a, b) in e.tensor().data().iter().zip(eb.tensor().data()) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn factor_within_map_range(d in prop::collection::vec(0.01f64..=1.0, 1..40)) {
            let n = d.len();
            let m = IlluminationMap::new(Tensor3::new(1, 1, n, d).unwrap()).unwrap();
            let l = illumination_factor(&m);
            prop_assert!(l >= m.tensor().min() && l <= m.tensor().max());
        }
    }
}
