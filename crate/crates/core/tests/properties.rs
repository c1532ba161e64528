//! Behavioural properties of the compressor on real training trajectories.

use excp::harness::{run_training, LrSchedule, TrainConfig, Trainer};
use excp::pipeline::{compress_step, BaseSpec, Chain, CompressConfig};
use excp::residual::{apply_residual, DeltaMap, DeltaTensor};
use excp::tensor_store::TensorMap;

fn abs_sorted(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.map(f64::abs).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// `||a - b|| / ||b||` over all tensors.
fn rel_error(a: &TensorMap, b: &TensorMap) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (name, rb) in b {
        for (x, y) in a[name].data().iter().zip(rb.data()) {
            num += (f64::from(*x) - f64::from(*y)).powi(2);
            den += f64::from(*y).powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn residual_is_more_concentrated_than_weights() {
    let cfg = TrainConfig::default();
    let data = cfg.data.generate(cfg.model.input, cfg.model.output);
    let init = cfg.model.init_spec().materialize(cfg.init_seed).unwrap();
    let mut tr = Trainer::new(&cfg, &data, &init).unwrap();
    for _ in 0..500 {
        tr.step().unwrap();
    }
    let before = tr.bundle().unwrap().weights;
    for _ in 0..500 {
        tr.step().unwrap();
    }
    let after = tr.bundle().unwrap().weights;
    for name in ["fc1.weight", "fc2.weight"] {
        let w = abs_sorted(after[name].data().iter().map(|x| f64::from(*x)));
        let d = abs_sorted(
            after[name]
                .data()
                .iter()
                .zip(before[name].data())
                .map(|(a, b)| f64::from(*a) - f64::from(*b)),
        );
        for q in [0.5, 0.9, 0.99] {
            assert!(
                quantile(&d, q) < 0.5 * quantile(&w, q),
                "{name}: q{q} |dW| {} vs |W| {}",
                quantile(&d, q),
                quantile(&w, q)
            );
        }
    }
}

#[test]
fn reconstruction_error_stays_contained() {
    let cfg = TrainConfig::default();
    let compress = CompressConfig::default();
    let data = cfg.data.generate(cfg.model.input, cfg.model.output);
    let spec = cfg.model.init_spec();
    let init = spec.materialize(cfg.init_seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = BaseSpec::Seeded {
        seed: cfg.init_seed,
        init: spec,
    };
    let mut chain = Chain::create(dir.path().join("chain.json"), base, compress).unwrap();
    let mut tr = Trainer::new(&cfg, &data, &init).unwrap();

    // Naive scheme: residuals against the true previous weights, applied to
    // the previous reconstruction, so quantization errors add up.
    let mut true_prev = init.clone();
    let mut naive = init;
    let (mut chained, mut drifted) = (Vec::new(), Vec::new());
    for _ in 0..16 {
        for _ in 0..100 {
            tr.step().unwrap();
        }
        let bundle = tr.bundle().unwrap();
        let out = chain.append(&bundle).unwrap();
        chained.push(rel_error(&out.reconstructed.weights, &bundle.weights));
        let archive = compress_step(&true_prev, &bundle, &compress).unwrap().archive;
        let deltas: DeltaMap = archive
            .weights
            .iter()
            .map(|t| {
                let delta = DeltaTensor {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    data: t.values().unwrap(),
                };
                (t.name.clone(), delta)
            })
            .collect();
        naive = apply_residual(&naive, &deltas).unwrap();
        drifted.push(rel_error(&naive, &bundle.weights));
        true_prev = bundle.weights;
    }
    let early = chained[..4].iter().copied().fold(0.0, f64::max);
    let last = chained[chained.len() - 1];
    println!("chained {chained:?}\nnaive {drifted:?}");
    assert!(chained.windows(2).any(|w| w[1] < w[0]), "error grows every step: {chained:?}");
    assert!(last <= 2.0 * early, "error drifts: {chained:?}");
    assert!(
        drifted[drifted.len() - 1] > last,
        "naive {drifted:?} vs chained {chained:?}"
    );
}

#[test]
fn archives_shrink_as_learning_rate_decays() {
    let mut cfg = TrainConfig {
        total_steps: 4_000,
        save_every: 250,
        break_every: 4_000,
        ..TrainConfig::default()
    };
    cfg.adam.schedule = LrSchedule::Linear { end_factor: 0.02 };
    let report = run_training(&cfg, None).unwrap();
    let sizes: Vec<f64> = report.checkpoints.iter().map(|c| c.compressed_bytes as f64).collect();
    // skip the first archive, which carries the move away from the init
    let early = median(sizes[1..5].to_vec());
    let late = median(sizes[sizes.len() - 4..].to_vec());
    assert!(late <= early, "sizes {sizes:?}");
}
