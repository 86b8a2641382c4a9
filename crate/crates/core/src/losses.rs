//! Class-weighted voxel cross-entropy and the composite training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::OccupancyGrid;
use crate::numeric::pairwise_sum;

/// `N_vox × N_cla` matrix of raw class scores, row-major per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLogits {
    n_cla: usize,
    data: Vec<f64>,
}

impl VoxelLogits {
    pub fn new(n_cla: usize, data: Vec<f64>) -> Result<Self> {
        if n_cla < 2 {
            return Err(Error::InvalidValue(format!("need at least 2 classes, got {n_cla}")));
        }
        if !data.len().is_multiple_of(n_cla) {
            return Err(Error::ShapeMismatch(format!("{} logits is not a multiple of {n_cla} classes", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("voxel logits".into()));
        }
        Ok(Self { n_cla, data })
    }

    pub fn n_vox(&self) -> usize {
        self.data.len() / self.n_cla
    }

    pub fn n_cla(&self) -> usize {
        self.n_cla
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.n_cla..(v + 1) * self.n_cla]
    }

    /// Highest-scoring class per voxel; ties go to the lower class id.
    pub fn argmax(&self) -> Vec<u32> {
        (0..self.n_vox())
            .map(|v| {
                let row = self.row(v);
                let mut best = 0;
                for (m, &r) in row.iter().enumerate() {
                    if r > row[best] {
                        best = m;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Explicit per-class weights; derived from label frequencies when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.2, gamma: 0.2, class_weights: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
                return Err(Error::InvalidConfig("class weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Inverse class frequency with add-one smoothing: `N_vox / (count_m + 1)`.
pub fn class_weights_from_labels(labels: &OccupancyGrid, n_cla: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_cla];
    for &l in labels.labels() {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::InvalidValue(format!("label {l} outside {n_cla} classes")))?;
        *slot += 1;
    }
    let n = labels.labels().len() as f64;
    Ok(counts.into_iter().map(|c| n / (c as f64 + 1.0)).collect())
}

fn check_ce_inputs(logits: &VoxelLogits, labels: &[u32], weights: &[f64]) -> Result<()> {
    if labels.len() != logits.n_vox() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} voxels", labels.len(), logits.n_vox())));
    }
    if weights.len() != logits.n_cla() {
        return Err(Error::ShapeMismatch(format!("{} class weights for {} classes", weights.len(), logits.n_cla())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= logits.n_cla()) {
        return Err(Error::InvalidValue(format!("invalid label id {l}")));
    }
    Ok(())
}

/// `-log softmax(row)[label]`, stable for large margins.
fn neg_log_softmax(row: &[f64], label: usize) -> f64 {
    let (mut top, mut top_i) = (row[0], 0);
    for (m, &r) in row.iter().enumerate() {
        if r > top {
            top = r;
            top_i = m;
        }
    }
    let rest: f64 = row.iter().enumerate().filter(|&(m, _)| m != top_i).map(|(_, &r)| (r - top).exp()).sum();
    (top - row[label]) + rest.ln_1p()
}

/// Sum over voxels of `c_label · (-log softmax(r_v)[label])`.
pub fn weighted_ce(logits: &VoxelLogits, labels: &[u32], weights: &[f64]) -> Result<f64> {
    check_ce_inputs(logits, labels, weights)?;
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(v, &l)| weights[l as usize] * neg_log_softmax(logits.row(v), l as usize))
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Gradient of [`weighted_ce`] with respect to every logit, in logit layout:
/// `c_label · (softmax_m - [m == label])`.
pub fn weighted_ce_grad(logits: &VoxelLogits, labels: &[u32], weights: &[f64]) -> Result<Vec<f64>> {
    check_ce_inputs(logits, labels, weights)?;
    let mut grad = Vec::with_capacity(logits.data().len());
    for (v, &l) in labels.iter().enumerate() {
        let row = logits.row(v);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&r| (r - top).exp()).collect();
        let s: f64 = e.iter().sum();
        let c = weights[l as usize];
        for (m, &em) in e.iter().enumerate() {
            let target = if m == l as usize { 1.0 } else { 0.0 };
            grad.push(c * (em / s - target));
        }
    }
    Ok(grad)
}

/// Extra scalar terms of the objective, evaluated on the same logits.
pub trait AuxiliaryLoss {
    fn evaluate(&self, logits: &VoxelLogits, labels: &[u32]) -> f64;
}

/// Auxiliary term that contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAux;

impl AuxiliaryLoss for NoAux {
    fn evaluate(&self, _: &VoxelLogits, _: &[u32]) -> f64 {
        0.0
    }
}

/// `α·ce + β·aux_sem + γ·aux_geo`.
pub fn total_loss(ce: f64, aux_sem: f64, aux_geo: f64, cfg: &LossConfig) -> Result<f64> {
    if ![ce, aux_sem, aux_geo].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms {ce}, {aux_sem}, {aux_geo}")));
    }
    Ok(cfg.alpha * ce + cfg.beta * aux_sem + cfg.gamma * aux_geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;

    fn grid(labels: Vec<u32>, n_cla: usize) -> OccupancyGrid {
        let n = labels.len();
        OccupancyGrid::new(n, 1, 1, labels, (0..n_cla).map(|m| format!("c{m}")).collect()).unwrap()
    }

    #[test]
    fn class_weight_examples() {
        let mut l = vec![0u32; 10];
        l.extend(vec![1u32; 10]);
        let c = class_weights_from_labels(&grid(l, 2), 2).unwrap();
        assert!((c[0] - 20.0 / 11.0).abs() < 1e-15 && (c[1] - 20.0 / 11.0).abs() < 1e-15);
        let c = class_weights_from_labels(&grid(vec![0; 20], 2), 2).unwrap();
        assert!((c[0] - 20.0 / 21.0).abs() < 1e-15);
        assert_eq!(c[1], 20.0);
        let c = class_weights_from_labels(&grid(vec![0; 50], 1), 1).unwrap();
        assert!((c[0] - 1.0).abs() < 0.05);
        assert!(class_weights_from_labels(&grid(vec![0, 3], 4), 2).is_err());
    }

    #[test]
    fn ce_examples() {
        let lg = VoxelLogits::new(2, vec![0.0, 0.0]).unwrap();
        assert!((weighted_ce(&lg, &[0], &[1.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((weighted_ce(&lg, &[0], &[2.0, 1.0]).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let lg = VoxelLogits::new(2, vec![10.0, -10.0]).unwrap();
        let expect = (1.0 + (-20.0f64).exp()).ln();
        let got = weighted_ce(&lg, &[0], &[1.0, 1.0]).unwrap();
        assert!((got - 2.061153622e-9).abs() < 1e-17, "{got} vs {expect}");
        assert!(matches!(weighted_ce(&lg, &[2], &[1.0, 1.0]), Err(Error::InvalidValue(_))));
        assert!(weighted_ce(&lg, &[0, 1], &[1.0, 1.0]).is_err());
        assert!(VoxelLogits::new(1, vec![0.0]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, &cfg).unwrap(), 10.0);
        assert!((total_loss(0.5, 1.0, 2.0, &cfg).unwrap() - 5.6).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &cfg).is_err());
        assert!(LossConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_lower_ids_on_ties() {
        let lg = VoxelLogits::new(3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(lg.argmax(), vec![0, 1]);
    }

    fn arb_case() -> impl Strategy<Value = (VoxelLogits, Vec<u32>, Vec<f64>)> {
        (2usize..6, 1usize..12).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(-8.0f64..8.0, n * k),
                prop::collection::vec(0..k as u32, n),
                prop::collection::vec(0.0f64..5.0, k),
            )
                .prop_map(move |(d, l, w)| (VoxelLogits::new(k, d).unwrap(), l, w))
        })
    }

    proptest! {
        #[test]
        fn ce_properties((lg, l, w) in arb_case(), shift in -50.0f64..50.0) {
            let base = weighted_ce(&lg, &l, &w).unwrap();
            prop_assert!(base >= 0.0);
            let doubled: Vec<f64> = w.iter().map(|c| 2.0 * c).collect();
            prop_assert_eq!(weighted_ce(&lg, &l, &doubled).unwrap(), 2.0 * base);
            let shifted = VoxelLogits::new(lg.n_cla(), lg.data().iter().map(|r| r + shift).collect()).unwrap();
            prop_assert!((weighted_ce(&shifted, &l, &w).unwrap() - base).abs() < 1e-9 * base.max(1.0));
        }

        #[test]
        fn ce_gradient_matches_finite_differences((lg, l, w) in arb_case()) {
            let g = weighted_ce_grad(&lg, &l, &w).unwrap();
            let k = lg.n_cla();
            let f = |x: &[f64]| weighted_ce(&VoxelLogits::new(k, x.to_vec()).unwrap(), &l, &w).unwrap();
            let err = finite_diff_check(f, lg.data(), 1e-5, &g).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn ce_vanishes_with_margin(margin in 40.0f64..200.0) {
            let lg = VoxelLogits::new(3, vec![margin, 0.0, -1.0]).unwrap();
            prop_assert!(weighted_ce(&lg, &[0], &[1.0, 1.0, 1.0]).unwrap() < 1e-15);
        }
    }
}
