// Writes a checkpoint bundle (weights + both Adam moments, f32 and f16
// tensors) to the container format, reads it back and checks it is equal.
//
//     cargo run --example container_roundtrip

use std::collections::BTreeMap;

use excp::tensor_store::{bundle_hash, read_bundle, tensor_map, write_bundle, CheckpointBundle, DType, TensorRecord};

fn record(name: &str, dtype: DType, shape: Vec<usize>, f: impl Fn(usize) -> f32) -> excp::Result<TensorRecord> {
    let n = shape.iter().product();
    TensorRecord::new(name, dtype, shape, (0..n).map(f).collect())
}

pub fn run_example() -> excp::Result<()> {
    let weights = tensor_map([
        record("embed.weight", DType::F16, vec![16, 8], |i| (i as f32 * 0.37).sin())?,
        record("head.weight", DType::F32, vec![4, 16], |i| (i as f32 * 0.11).cos() * 0.1)?,
        record("head.bias", DType::F32, vec![4], |i| i as f32 * 1e-3)?,
    ])?;
    let moments = |scale: f32, square: bool| -> excp::Result<_> {
        let recs = weights
            .values()
            .map(|w| {
                let data = w.data().iter().map(|x| if square { scale * x * x } else { scale * x }).collect();
                w.with_data(data)
            })
            .collect::<excp::Result<Vec<_>>>()?;
        tensor_map(recs)
    };
    let bundle = CheckpointBundle {
        first_moments: moments(1e-2, false)?,
        second_moments: moments(1e-4, true)?,
        weights,
        step: 1_000,
        scalars: BTreeMap::from([("lr".into(), 1e-3), ("beta1".into(), 0.9), ("beta2".into(), 0.999)]),
    };
    bundle.validate()?;

    let dir = tempfile::tempdir().map_err(|e| excp::Error::Format(e.to_string()))?;
    let path = dir.path().join("step-1000.exts");
    write_bundle(&bundle, &path)?;
    let back = read_bundle(&path)?;
    assert_eq!(back, bundle);

    let on_disk = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("tensors per section: {}", bundle.weights.len());
    println!("elements: {}, raw bytes: {}, file bytes: {on_disk}", bundle.numel(), bundle.raw_bytes());
    println!("bundle hash: {}", bundle_hash(&back)?);
    // f16 tensors hold f16-representable values, so the round trip is exact
    let embed = &back.weights["embed.weight"];
    println!("{} is {} with {} elements", embed.name(), embed.dtype(), embed.numel());
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
