//! Selective low-light enhancement: pick the illumination threshold that
//! maximizes inter-class variance over a population of illumination factors,
//! then enhance only the images at or below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::illumination::{illumination_factor, retinex_enhance, IlluminationMap, Image};
use crate::numeric::ExactSum;

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPopulation {
    factors: Vec<f64>,
    bins: usize,
}

impl FactorPopulation {
    pub fn new(factors: Vec<f64>, bins: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Empty("factor population".into()));
        }
        if bins == 0 {
            return Err(Error::InvalidConfig("bin count must be >= 1".into()));
        }
        if let Some(f) = factors.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidValue(format!("illumination factor {f} outside (0, 1]")));
        }
        Ok(Self { factors, bins })
    }

    pub fn with_default_bins(factors: Vec<f64>) -> Result<Self> {
        Self::new(factors, DEFAULT_BINS)
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Upper edge of bin `k` (1-based): `k / bins`.
    pub fn edge(&self, k: usize) -> f64 {
        k as f64 / self.bins as f64
    }

    /// Counts per bin, bin `k` covering `((k-1)/bins, k/bins]`.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.bins];
        for &f in &self.factors {
            let k = (1..=self.bins).find(|&k| f <= self.edge(k)).unwrap_or(self.bins);
            h[k - 1] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub t_star: f64,
    pub sigma_b2_at_t_star: f64,
    pub omega0: f64,
    pub omega1: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub mu_t: f64,
    pub degenerate: bool,
}

/// Class statistics of a split at some threshold.
#[derive(Debug, Clone, Copy)]
struct Split {
    n0: usize,
    sum0: f64,
    sum1: f64,
}

struct Stats {
    omega0: f64,
    omega1: f64,
    mu0: f64,
    mu1: f64,
    mu_t: f64,
    sigma: f64,
}

fn split_stats(s: Split, n: usize, total: f64) -> Stats {
    let n1 = n - s.n0;
    let mu_t = total / n as f64;
    let omega0 = s.n0 as f64 / n as f64;
    let omega1 = n1 as f64 / n as f64;
    if s.n0 == 0 || n1 == 0 {
        let mu = if s.n0 == 0 { (0.0, mu_t) } else { (mu_t, 0.0) };
        return Stats { omega0, omega1, mu0: mu.0, mu1: mu.1, mu_t, sigma: 0.0 };
    }
    let mu0 = s.sum0 / s.n0 as f64;
    let mu1 = s.sum1 / n1 as f64;
    let sigma = omega0 * (mu0 - mu_t) * (mu0 - mu_t) + omega1 * (mu1 - mu_t) * (mu1 - mu_t);
    Stats { omega0, omega1, mu0, mu1, mu_t, sigma }
}

/// Threshold over the population's bin edges maximizing the inter-class
/// variance `ω0(μ0-μT)² + ω1(μ1-μT)²`, where class 0 holds factors `<= t`.
///
/// Class sums are correctly rounded, so the variance at each edge does not
/// depend on summation order. Among maximizing edges the leftmost run of
/// consecutive edges sharing the same split is taken and `t*` is its midpoint.
/// A population whose splits are all one-sided (all factors equal, or all in
/// one bin) is reported as degenerate with `t*` equal to its mean.
pub fn otsu_threshold(pop: &FactorPopulation) -> Result<ThresholdReport> {
    let n = pop.factors.len();
    if n == 0 {
        return Err(Error::Empty("factor population".into()));
    }
    let mut sorted = pop.factors.clone();
    sorted.sort_by(f64::total_cmp);
    let total: ExactSum = sorted.iter().copied().collect();
    let total = total.value();

    let bins = pop.bins;
    let mut splits = vec![Split { n0: 0, sum0: 0.0, sum1: 0.0 }; bins + 1];
    let mut prefix = ExactSum::new();
    let mut i = 0;
    for (k, split) in splits.iter_mut().enumerate().skip(1) {
        let t = pop.edge(k);
        while i < n && sorted[i] <= t {
            prefix.add(sorted[i]);
            i += 1;
        }
        split.n0 = i;
        split.sum0 = prefix.value();
    }
    let mut suffix = ExactSum::new();
    let mut j = n;
    for k in (1..=bins).rev() {
        let t = pop.edge(k);
        while j > 0 && sorted[j - 1] > t {
            j -= 1;
            suffix.add(sorted[j]);
        }
        splits[k].sum1 = suffix.value();
    }

    let sigmas: Vec<f64> = (1..=bins).map(|k| split_stats(splits[k], n, total).sigma).collect();
    let best = sigmas.iter().copied().fold(0.0f64, f64::max);

    if best == 0.0 {
        let mean = (total / n as f64).clamp(sorted[0], sorted[n - 1]);
        return Ok(ThresholdReport {
            t_star: mean,
            sigma_b2_at_t_star: 0.0,
            omega0: 1.0,
            omega1: 0.0,
            mu0: mean,
            mu1: 0.0,
            mu_t: mean,
            degenerate: true,
        });
    }

    let first = (1..=bins).find(|&k| sigmas[k - 1] == best).expect("maximum exists");
    let mut last = first;
    while last < bins && sigmas[last] == best && splits[last + 1].n0 == splits[first].n0 {
        last += 1;
    }
    let t_star = 0.5 * (pop.edge(first) + pop.edge(last));
    let st = split_stats(splits[first], n, total);
    Ok(ThresholdReport {
        t_star,
        sigma_b2_at_t_star: st.sigma,
        omega0: st.omega0,
        omega1: st.omega1,
        mu0: st.mu0,
        mu1: st.mu1,
        mu_t: st.mu_t,
        degenerate: false,
    })
}

/// Enhances `x` only when its illumination factor is at or below `t_star`.
/// The untouched branch returns a clone of the input.
pub fn selective_enhance(x: &Image, i: &IlluminationMap, t_star: f64) -> Result<(Image, bool)> {
    if !(t_star > 0.0 && t_star <= 1.0) {
        return Err(Error::InvalidValue(format!("threshold {t_star} outside (0, 1]")));
    }
    if x.height() != i.height() || x.width() != i.width() {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but illumination is {}x{}",
            x.height(),
            x.width(),
            i.height(),
            i.width()
        )));
    }
    if illumination_factor(i) <= t_star {
        Ok((retinex_enhance(x, i)?, true))
    } else {
        Ok((x.clone(), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Variance at every edge by direct counting, class sums in i128 fixed
    /// point (exact for factors >= 2^-16).
    fn brute_force_sigmas(factors: &[f64], bins: usize) -> Vec<f64> {
        const SCALE: f64 = 4722366482869645213696.0; // 2^72
        let fixed = |f: f64| {
            let s = f * SCALE;
            assert_eq!(s.fract(), 0.0);
            s as i128
        };
        let back = |s: i128| s as f64 / SCALE;
        let n = factors.len();
        let total = back(factors.iter().map(|&f| fixed(f)).sum());
        (1..=bins)
            .map(|k| {
                let t = k as f64 / bins as f64;
                let (mut n0, mut s0, mut s1) = (0usize, 0i128, 0i128);
                for &f in factors {
                    if f <= t {
                        n0 += 1;
                        s0 += fixed(f);
                    } else {
                        s1 += fixed(f);
                    }
                }
                let n1 = n - n0;
                if n0 == 0 || n1 == 0 {
                    return 0.0;
                }
                let mu_t = total / n as f64;
                let (w0, w1) = (n0 as f64 / n as f64, n1 as f64 / n as f64);
                let (m0, m1) = (back(s0) / n0 as f64, back(s1) / n1 as f64);
                w0 * (m0 - mu_t) * (m0 - mu_t) + w1 * (m1 - mu_t) * (m1 - mu_t)
            })
            .collect()
    }

    #[test]
    fn two_point_population() {
        let pop = FactorPopulation::with_default_bins(vec![0.2, 0.2, 0.8, 0.8]).unwrap();
        let r = otsu_threshold(&pop).unwrap();
        assert!(!r.degenerate);
        assert!((r.sigma_b2_at_t_star - 0.09).abs() < 1e-12, "{r:?}");
        // plateau runs over edges 52/256 ..= 204/256
        assert_eq!(r.t_star, 0.5);
        assert_eq!(r.omega0 + r.omega1, 1.0);
        assert!((r.mu_t - (r.omega0 * r.mu0 + r.omega1 * r.mu1)).abs() < 1e-9);
    }

    #[test]
    fn single_value_population_is_degenerate() {
        let pop = FactorPopulation::with_default_bins(vec![0.4; 7]).unwrap();
        let r = otsu_threshold(&pop).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.t_star, 0.4);
        assert_eq!(r.sigma_b2_at_t_star, 0.0);
    }

    #[test]
    fn bimodal_population_splits_between_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = Vec::new();
        for _ in 0..500 {
            f.push(0.15 + rng.random_range(-0.04..0.04));
            f.push(0.85 + rng.random_range(-0.04..0.04));
        }
        let pop = FactorPopulation::with_default_bins(f.clone()).unwrap();
        let r = otsu_threshold(&pop).unwrap();
        assert!(r.t_star > 0.2 && r.t_star < 0.8, "{r:?}");
        let sig = brute_force_sigmas(&f, 256);
        let best = sig.iter().copied().fold(0.0, f64::max);
        assert_eq!(r.sigma_b2_at_t_star, best);
        let k = sig.iter().position(|&s| s == best).unwrap() + 1;
        assert!(k as f64 / 256.0 > 0.19 && (k as f64 / 256.0) < 0.81);
    }

    #[test]
    fn population_validation() {
        assert!(matches!(FactorPopulation::with_default_bins(vec![]), Err(Error::Empty(_))));
        assert!(FactorPopulation::with_default_bins(vec![0.0]).is_err());
        assert!(FactorPopulation::with_default_bins(vec![1.2]).is_err());
        assert!(FactorPopulation::new(vec![0.5], 0).is_err());
    }

    #[test]
    fn histogram_counts_every_factor() {
        let pop = FactorPopulation::new(vec![0.25, 0.26, 1.0, 0.5], 4).unwrap();
        assert_eq!(pop.histogram(), vec![1, 2, 0, 1]);
    }

    fn image_and_map(lambda: f64) -> (Image, IlluminationMap) {
        let x = Image::new(Tensor3::from_fn(3, 2, 3, |c, y, x| 0.05 * (c + y + x) as f64).unwrap()).unwrap();
        (x, IlluminationMap::constant(2, 3, lambda).unwrap())
    }

    #[test]
    fn selective_branches() {
        let (x, i) = image_and_map(0.3);
        assert!(selective_enhance(&x, &i, 0.4).unwrap().1);
        let (x, i) = image_and_map(0.5);
        let (out, enhanced) = selective_enhance(&x, &i, 0.4).unwrap();
        assert!(!enhanced);
        let bits = |im: &Image| im.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&x));
        let (x, i) = image_and_map(0.4);
        assert!(selective_enhance(&x, &i, 0.4).unwrap().1);
        assert!(selective_enhance(&x, &i, 0.0).is_err());
        let wrong = IlluminationMap::constant(3, 3, 0.4).unwrap();
        assert!(matches!(selective_enhance(&x, &wrong, 0.4), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn maximal_and_matches_brute_force(
            f in prop::collection::vec(0.01f64..=1.0, 1..300),
            bins in prop::sample::select(vec![16usize, 64, 256]),
        ) {
            let pop = FactorPopulation::new(f.clone(), bins).unwrap();
            let r = otsu_threshold(&pop).unwrap();
            let sig = brute_force_sigmas(&f, bins);
            let best = sig.iter().copied().fold(0.0, f64::max);
            prop_assert_eq!(r.sigma_b2_at_t_star, best);
            for s in sig {
                prop_assert!(r.sigma_b2_at_t_star >= s);
            }
            prop_assert!((r.omega0 + r.omega1 - 1.0).abs() < 1e-15);
            if !r.degenerate {
                prop_assert!((r.mu_t - (r.omega0 * r.mu0 + r.omega1 * r.mu1)).abs() < 1e-9);
            }
        }

        #[test]
        fn duplication_leaves_threshold_unchanged(f in prop::collection::vec(0.01f64..=1.0, 1..200)) {
            let a = otsu_threshold(&FactorPopulation::with_default_bins(f.clone()).unwrap()).unwrap();
            let doubled: Vec<f64> = f.iter().chain(f.iter()).copied().collect();
            let b = otsu_threshold(&FactorPopulation::with_default_bins(doubled).unwrap()).unwrap();
            prop_assert_eq!(a.t_star, b.t_star);
            prop_assert_eq!(a.degenerate, b.degenerate);
        }
    }
}
