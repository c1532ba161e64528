//! Joint weight-momentum pruning.
//!
//! Weight residuals are kept where `|delta(i)| > alpha / sqrt(v(i) + eps) * median(|delta|)`
//! with the median taken per layer. Moments are kept where `v(i) > beta * mean(v)`
//! and the corresponding weight residual survived; both moments are zeroed
//! wherever the momentum mask is off.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::{DeltaTensor, ResidualBundle};
use crate::tensor_store::TensorRecord;

/// Which Adam moment drives the thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    /// Second raw moment `v` (exp-avg of squared gradients).
    #[default]
    SecondMoment,
    /// Magnitude of the first moment `|m|`; experimental alternative.
    FirstMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub indicator: Indicator,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-5,
            beta: 2.0,
            epsilon: 1e-12,
            indicator: Indicator::SecondMoment,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is accepted as the "pruning disabled" limit.
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub total: usize,
    pub weights_kept: usize,
    pub moments_kept: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneMasks {
    pub weight_masks: BTreeMap<String, Vec<bool>>,
    pub momentum_masks: BTreeMap<String, Vec<bool>>,
    pub stats: BTreeMap<String, MaskStats>,
}

impl PruneMasks {
    pub fn totals(&self) -> MaskStats {
        self.stats.values().fold(MaskStats::default(), |acc, s| MaskStats {
            total: acc.total + s.total,
            weights_kept: acc.weights_kept + s.weights_kept,
            moments_kept: acc.moments_kept + s.moments_kept,
        })
    }
}

/// Median of absolute values; the mean of the two middle values for even counts.
pub fn median_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mid = abs.len() / 2;
    let (lower, upper, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if values.len() % 2 == 1 {
        upper
    } else {
        let lower = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

fn check_indicator(name: &str, shape: &[usize], indicator: &TensorRecord) -> Result<()> {
    if indicator.shape() != shape {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            expected: shape.to_vec(),
            found: indicator.shape().to_vec(),
        });
    }
    Ok(())
}

fn indicator_values(
    name: &str,
    first: Option<&TensorRecord>,
    second: Option<&TensorRecord>,
    which: Indicator,
) -> Result<Option<Vec<f64>>> {
    let source = match which {
        Indicator::SecondMoment => second,
        Indicator::FirstMoment => first,
    };
    let Some(record) = source else {
        return Ok(None);
    };
    let values = record
        .data()
        .iter()
        .map(|v| match which {
            Indicator::SecondMoment => f64::from(*v),
            Indicator::FirstMoment => f64::from(v.abs()),
        })
        .collect::<Vec<_>>();
    if let Some(index) = values.iter().position(|v| *v < 0.0) {
        return Err(Error::NegativeMoment {
            tensor: name.to_string(),
            index,
        });
    }
    Ok(Some(values))
}

/// Weight mask for one layer given its residual and indicator values.
///
/// With no indicator available (weights-only checkpoints) the scale factor
/// `1 / sqrt(v + eps)` is taken as 1.
pub fn weight_mask_values(delta: &[f64], indicator: Option<&[f64]>, cfg: &PruneConfig) -> Vec<bool> {
    let median = median_abs(delta);
    match indicator {
        Some(v) => delta
            .iter()
            .zip(v)
            .map(|(d, v)| d.abs() > cfg.alpha / (v + cfg.epsilon).sqrt() * median)
            .collect(),
        None => delta.iter().map(|d| d.abs() > cfg.alpha * median).collect(),
    }
}

/// Momentum mask for one layer.
pub fn momentum_mask_values(indicator: &[f64], weight_mask: &[bool], cfg: &PruneConfig) -> Vec<bool> {
    let mean = if indicator.is_empty() {
        0.0
    } else {
        indicator.iter().sum::<f64>() / indicator.len() as f64
    };
    let threshold = cfg.beta * mean;
    indicator
        .iter()
        .zip(weight_mask)
        .map(|(v, keep)| *keep && *v > threshold)
        .collect()
}

/// Per-layer weight mask against the second moment.
pub fn weight_mask(
    delta: &DeltaTensor,
    second_moment: &TensorRecord,
    cfg: &PruneConfig,
) -> Result<Vec<bool>> {
    check_indicator(&delta.name, &delta.shape, second_moment)?;
    let v = indicator_values(&delta.name, None, Some(second_moment), Indicator::SecondMoment)?;
    Ok(weight_mask_values(&delta.data, v.as_deref(), cfg))
}

/// Per-layer momentum mask, subordinate to `weight_mask`.
pub fn momentum_mask(
    second_moment: &TensorRecord,
    weight_mask: &[bool],
    cfg: &PruneConfig,
) -> Result<Vec<bool>> {
    if weight_mask.len() != second_moment.numel() {
        return Err(Error::ShapeMismatch {
            tensor: second_moment.name().to_string(),
            expected: second_moment.shape().to_vec(),
            found: vec![weight_mask.len()],
        });
    }
    let v = indicator_values(second_moment.name(), None, Some(second_moment), Indicator::SecondMoment)?
        .unwrap_or_default();
    Ok(momentum_mask_values(&v, weight_mask, cfg))
}

/// Computes both masks for every layer of a residual bundle.
pub fn joint_masks(residual: &ResidualBundle, cfg: &PruneConfig) -> Result<PruneMasks> {
    cfg.validate()?;
    let mut masks = PruneMasks::default();
    for (name, delta) in &residual.weight_deltas {
        let first = residual.first_moments.get(name);
        let second = residual.second_moments.get(name);
        for record in [first, second].into_iter().flatten() {
            check_indicator(name, &delta.shape, record)?;
        }
        let indicator = indicator_values(name, first, second, cfg.indicator)?;
        let wmask = weight_mask_values(&delta.data, indicator.as_deref(), cfg);
        let mmask = match &indicator {
            Some(v) => momentum_mask_values(v, &wmask, cfg),
            None => vec![false; wmask.len()],
        };
        masks.stats.insert(
            name.clone(),
            MaskStats {
                total: wmask.len(),
                weights_kept: wmask.iter().filter(|k| **k).count(),
                moments_kept: mmask.iter().filter(|k| **k).count(),
            },
        );
        masks.weight_masks.insert(name.clone(), wmask);
        masks.momentum_masks.insert(name.clone(), mmask);
    }
    Ok(masks)
}

fn mask_len_check<'a>(name: &str, mask: Option<&'a Vec<bool>>, len: usize) -> Result<&'a Vec<bool>> {
    match mask {
        Some(m) if m.len() == len => Ok(m),
        Some(m) => Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            expected: vec![len],
            found: vec![m.len()],
        }),
        None => Err(Error::KeyMismatch(format!("no mask for `{name}`"))),
    }
}

/// Zeroes residuals where `M_w = 0` and both moments where `M_o = 0`.
pub fn apply_masks(residual: &ResidualBundle, masks: &PruneMasks) -> Result<ResidualBundle> {
    let mut out = residual.clone();
    for (name, delta) in &mut out.weight_deltas {
        let mask = mask_len_check(name, masks.weight_masks.get(name), delta.numel())?;
        for (d, keep) in delta.data.iter_mut().zip(mask) {
            if !keep {
                *d = 0.0;
            }
        }
    }
    for map in [&mut out.first_moments, &mut out.second_moments] {
        for (name, record) in map.iter_mut() {
            let mask = mask_len_check(name, masks.momentum_masks.get(name), record.numel())?;
            let data = record
                .data()
                .iter()
                .zip(mask)
                .map(|(v, keep)| if *keep { *v } else { 0.0 })
                .collect();
            *record = record.with_data(data)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{tensor_map, DType};

    fn cfg(alpha: f64, beta: f64) -> PruneConfig {
        PruneConfig {
            alpha,
            beta,
            ..PruneConfig::default()
        }
    }

    fn delta(data: Vec<f64>) -> DeltaTensor {
        DeltaTensor {
            name: "w".into(),
            dtype: DType::F32,
            shape: vec![data.len()],
            data,
        }
    }

    fn v2(data: Vec<f32>) -> TensorRecord {
        let n = data.len();
        TensorRecord::f32("w", vec![n], data).unwrap()
    }

    #[test]
    fn median_of_even_count_averages_middle_pair() {
        assert_eq!(median_abs(&[0.05, 0.2, 0.0001, -0.01]), (0.01 + 0.05) / 2.0);
        assert_eq!(median_abs(&[3.0, -1.0, 2.0]), 2.0);
        assert_eq!(median_abs(&[]), 0.0);
    }

    #[test]
    fn weight_mask_worked_example() {
        // median 0.03; alpha/sqrt(v) is 0.5 for v=1e-8 and 5e-4 for v=1e-2,
        // so thresholds are ~[0.015, 0.015, 1.5e-5, 1.5e-5]
        let v = v2(vec![1e-8, 1e-8, 1e-2, 1e-2]);
        let m = weight_mask(&delta(vec![0.05, 0.2, 0.0001, 0.01]), &v, &cfg(5e-5, 2.0)).unwrap();
        assert_eq!(m, vec![true, true, true, true]);
        // median (0.01+0.05)/2 again, third entry now below 1.5e-5
        let m = weight_mask(&delta(vec![0.05, 0.2, 0.00001, 0.01]), &v, &cfg(5e-5, 2.0)).unwrap();
        assert_eq!(m, vec![true, true, false, true]);
        // alpha 5e-4: thresholds [0.15, 0.15, 1.5e-4, 1.5e-4]
        let m = weight_mask(&delta(vec![0.05, 0.2, 0.0001, 0.01]), &v, &cfg(5e-4, 2.0)).unwrap();
        assert_eq!(m, vec![false, true, false, true]);
    }

    #[test]
    fn zero_residual_layer_is_fully_pruned() {
        let m = weight_mask(&delta(vec![0.0; 4]), &v2(vec![1.0; 4]), &cfg(5e-5, 2.0)).unwrap();
        assert_eq!(m, vec![false; 4]);
    }

    #[test]
    fn alpha_zero_keeps_every_nonzero_delta() {
        let m = weight_mask(&delta(vec![0.0, 1e-9, -3.0, 0.0]), &v2(vec![0.0; 4]), &cfg(0.0, 2.0))
            .unwrap();
        assert_eq!(m, vec![false, true, true, false]);
    }

    #[test]
    fn momentum_mask_worked_example() {
        let m = momentum_mask(&v2(vec![1.0, 2.0, 3.0, 10.0]), &[true; 4], &cfg(5e-5, 2.0)).unwrap();
        assert_eq!(m, vec![false, false, false, true]);
        let none = momentum_mask(&v2(vec![1.0, 2.0, 3.0, 10.0]), &[false; 4], &cfg(5e-5, 2.0)).unwrap();
        assert_eq!(none, vec![false; 4]);
        let all = momentum_mask(&v2(vec![0.1, 2.0, 3.0, 10.0]), &[true; 4], &cfg(5e-5, 0.0)).unwrap();
        assert_eq!(all, vec![true; 4]);
    }

    #[test]
    fn ties_are_pruned() {
        // alpha / sqrt(0.75 + 0.25) = 1, so the threshold equals the median exactly
        let c = PruneConfig { alpha: 1.0, beta: 1.0, epsilon: 0.25, indicator: Indicator::SecondMoment };
        let m = weight_mask(&delta(vec![0.5, -0.5, 0.5]), &v2(vec![0.75; 3]), &c).unwrap();
        assert_eq!(m, vec![false; 3]);
        // v equal to beta * mean is pruned too
        let mm = momentum_mask(&v2(vec![2.0, 2.0]), &[true, true], &c).unwrap();
        assert_eq!(mm, vec![false, false]);
    }

    #[test]
    fn shape_and_sign_errors() {
        assert!(matches!(
            weight_mask(&delta(vec![1.0, 2.0]), &v2(vec![1.0]), &cfg(1.0, 1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            momentum_mask(&v2(vec![1.0, 2.0]), &[true], &cfg(1.0, 1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(cfg(-1.0, 1.0).validate().is_err());
        assert!(PruneConfig { epsilon: 0.0, ..cfg(1.0, 1.0) }.validate().is_err());
    }

    fn residual() -> ResidualBundle {
        let r = |d: Vec<f32>| TensorRecord::f32("w", vec![6], d).unwrap();
        ResidualBundle {
            weight_deltas: [("w".to_string(), delta(vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6]))].into(),
            first_moments: tensor_map([r(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]).unwrap(),
            second_moments: tensor_map([r(vec![0.5, 0.25, 0.125, 1.0, 2.0, 4.0])]).unwrap(),
            step: 1,
            scalars: Default::default(),
        }
    }

    fn masks(w: Vec<bool>, o: Vec<bool>) -> PruneMasks {
        PruneMasks {
            weight_masks: [("w".to_string(), w)].into(),
            momentum_masks: [("w".to_string(), o)].into(),
            stats: Default::default(),
        }
    }

    #[test]
    fn all_ones_is_identity_and_all_zero_annihilates() {
        let r = residual();
        assert_eq!(apply_masks(&r, &masks(vec![true; 6], vec![true; 6])).unwrap(), r);
        let z = apply_masks(&r, &masks(vec![false; 6], vec![false; 6])).unwrap();
        assert!(z.weight_deltas["w"].data.iter().all(|v| *v == 0.0));
        assert!(z.first_moments["w"].data().iter().all(|v| *v == 0.0));
        assert!(z.second_moments["w"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mixed_mask_selects_elementwise() {
        let r = residual();
        let w = vec![true, false, true, false, true, false];
        let o = vec![false, false, true, false, true, false];
        let out = apply_masks(&r, &masks(w.clone(), o.clone())).unwrap();
        for i in 0..6 {
            let want = if w[i] { r.weight_deltas["w"].data[i] } else { 0.0 };
            assert_eq!(out.weight_deltas["w"].data[i].to_bits(), want.to_bits());
            for (a, b) in [
                (&out.first_moments["w"], &r.first_moments["w"]),
                (&out.second_moments["w"], &r.second_moments["w"]),
            ] {
                let want = if o[i] { b.data()[i] } else { 0.0 };
                assert_eq!(a.data()[i].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn joint_masks_subordinate_and_counted() {
        let r = residual();
        let m = joint_masks(&r, &cfg(0.5, 1.0)).unwrap();
        let (w, o) = (&m.weight_masks["w"], &m.momentum_masks["w"]);
        assert!(w.iter().zip(o).all(|(w, o)| *w || !*o));
        let s = m.stats["w"];
        assert_eq!(s.total, 6);
        assert_eq!(s.weights_kept, w.iter().filter(|k| **k).count());
        assert_eq!(s.moments_kept, o.iter().filter(|k| **k).count());
    }
}
