//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use excp::tensor_store::{tensor_map, CheckpointBundle, DType, TensorMap, TensorRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor layout: 1 to 4 tensors of rank 0 to 3, mixed dtypes.
pub fn layout(rng: &mut ChaCha8Rng) -> Vec<(String, DType, Vec<usize>)> {
    let count = rng.random_range(1..=4);
    (0..count)
        .map(|i| {
            let rank = rng.random_range(0..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=12)).collect();
            let dtype = if rng.random_bool(0.25) { DType::F16 } else { DType::F32 };
            (format!("layer{i}.p"), dtype, shape)
        })
        .collect()
}

fn fill(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| scale * (rng.random::<f32>() * 2.0 - 1.0)).collect()
}

pub fn random_weights(rng: &mut ChaCha8Rng, layout: &[(String, DType, Vec<usize>)]) -> TensorMap {
    tensor_map(layout.iter().map(|(name, dtype, shape)| {
        let n = shape.iter().product();
        let scale = 10f32.powi(rng.random_range(-3..=1));
        TensorRecord::new(name.clone(), *dtype, shape.clone(), fill(rng, n, scale)).unwrap()
    }))
    .unwrap()
}

/// Moves each weight by a small random step; some entries stay put.
pub fn perturb(rng: &mut ChaCha8Rng, weights: &TensorMap, scale: f32) -> TensorMap {
    weights
        .iter()
        .map(|(name, rec)| {
            let data: Vec<f32> = rec
                .data()
                .iter()
                .map(|w| if rng.random_bool(0.1) { *w } else { w + scale * (rng.random::<f32>() * 2.0 - 1.0) })
                .collect();
            (name.clone(), rec.with_data(data).unwrap())
        })
        .collect()
}

/// Adam-like moments for `weights`: signed `m`, non-negative `v` with a
/// heavy tail and some exact zeros.
pub fn random_moments(rng: &mut ChaCha8Rng, weights: &TensorMap) -> (TensorMap, TensorMap) {
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, rec) in weights {
        let n = rec.numel();
        let md = fill(rng, n, 1e-2);
        let vd: Vec<f32> = (0..n)
            .map(|_| if rng.random_bool(0.05) { 0.0 } else { 1e-4 * rng.random::<f32>().powi(4) })
            .collect();
        m.insert(name.clone(), rec.with_data(md).unwrap());
        v.insert(name.clone(), rec.with_data(vd).unwrap());
    }
    (m, v)
}

pub fn random_bundle(rng: &mut ChaCha8Rng, weights: TensorMap, step: u64) -> CheckpointBundle {
    let (first_moments, second_moments) = random_moments(rng, &weights);
    CheckpointBundle {
        weights,
        first_moments,
        second_moments,
        step,
        scalars: BTreeMap::from([
            ("lr".to_string(), 1e-3 * rng.random::<f64>()),
            ("beta1".to_string(), 0.9),
            ("beta2".to_string(), 0.999),
        ]),
    }
}

/// Bitwise equality of two tensor maps (names, dtypes, shapes, bits).
pub fn maps_bit_equal(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ra), (nb, rb))| {
            na == nb
                && ra.dtype() == rb.dtype()
                && ra.shape() == rb.shape()
                && ra.data().iter().zip(rb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

pub fn bundles_bit_equal(a: &CheckpointBundle, b: &CheckpointBundle) -> bool {
    a.step == b.step
        && a.scalars == b.scalars
        && maps_bit_equal(&a.weights, &b.weights)
        && maps_bit_equal(&a.first_moments, &b.first_moments)
        && maps_bit_equal(&a.second_moments, &b.second_moments)
}
