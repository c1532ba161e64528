//! Weight residuals between consecutive checkpoints.
//!
//! Deltas are held in f64. The difference of two f32 values is exact in f64
//! unless their exponents differ by more than 29 bits, so
//! `apply_residual(prev, compute_residual(prev, cur))` restores `cur`
//! bit-for-bit in every practical case. Optimizer moments pass through.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor_store::{check_aligned, CheckpointBundle, DType, TensorMap, TensorRecord};

/// A weight residual (or, when residuals are disabled, the absolute weights).
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTensor {
    pub name: String,
    /// Dtype of the weight tensor this delta reconstructs.
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DeltaTensor {
    /// Treats a tensor's own values as the "delta" against an all-zero base.
    pub fn absolute(record: &TensorRecord) -> Self {
        Self {
            name: record.name().to_string(),
            dtype: record.dtype(),
            shape: record.shape().to_vec(),
            data: record.data().iter().map(|v| f64::from(*v)).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub type DeltaMap = BTreeMap<String, DeltaTensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBundle {
    pub weight_deltas: DeltaMap,
    pub first_moments: TensorMap,
    pub second_moments: TensorMap,
    pub step: u64,
    pub scalars: BTreeMap<String, f64>,
}

impl ResidualBundle {
    /// Wraps a checkpoint without residualizing (weights stored absolutely).
    pub fn absolute(current: &CheckpointBundle) -> Result<Self> {
        current.validate()?;
        Ok(Self {
            weight_deltas: current
                .weights
                .iter()
                .map(|(k, r)| (k.clone(), DeltaTensor::absolute(r)))
                .collect(),
            first_moments: current.first_moments.clone(),
            second_moments: current.second_moments.clone(),
            step: current.step,
            scalars: current.scalars.clone(),
        })
    }
}

/// `delta = current - prev` per element.
pub fn compute_residual(prev: &TensorMap, current: &CheckpointBundle) -> Result<ResidualBundle> {
    current.validate()?;
    check_aligned(prev, &current.weights, "residual base vs current weights")?;
    let weight_deltas = current
        .weights
        .iter()
        .map(|(name, cur)| {
            let base = &prev[name];
            let data = cur
                .data()
                .iter()
                .zip(base.data())
                .map(|(c, p)| f64::from(*c) - f64::from(*p))
                .collect();
            (
                name.clone(),
                DeltaTensor {
                    name: name.clone(),
                    dtype: cur.dtype(),
                    shape: cur.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    Ok(ResidualBundle {
        weight_deltas,
        first_moments: current.first_moments.clone(),
        second_moments: current.second_moments.clone(),
        step: current.step,
        scalars: current.scalars.clone(),
    })
}

/// `out = prev + delta`, rounded once to the weight's dtype.
pub fn apply_residual(prev: &TensorMap, deltas: &DeltaMap) -> Result<TensorMap> {
    if prev.len() != deltas.len() || prev.keys().ne(deltas.keys()) {
        return Err(Error::KeyMismatch(
            "residual base and deltas name different tensors".into(),
        ));
    }
    prev.iter()
        .map(|(name, base)| {
            let delta = &deltas[name];
            if delta.shape != base.shape() {
                return Err(Error::ShapeMismatch {
                    tensor: name.clone(),
                    expected: base.shape().to_vec(),
                    found: delta.shape.clone(),
                });
            }
            let data = base
                .data()
                .iter()
                .zip(&delta.data)
                .map(|(p, d)| (f64::from(*p) + d) as f32)
                .collect();
            Ok((name.clone(), base.with_data(data)?))
        })
        .collect()
}

/// Replaces each weight by its delta read as an absolute value.
pub fn absolute_weights(deltas: &DeltaMap) -> Result<TensorMap> {
    deltas
        .iter()
        .map(|(name, d)| {
            let data = d.data.iter().map(|v| *v as f32).collect();
            Ok((
                name.clone(),
                TensorRecord::new(name.clone(), d.dtype, d.shape.clone(), data)?,
            ))
        })
        .collect()
}
