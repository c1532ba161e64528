// Builds a chain of compressed checkpoints from a training run, replays
// every step from the seed and checks it against the retained weights,
// then applies the retention policy.
//
//     cargo run --release --example compress_chain

use excp::harness::{TrainConfig, Trainer};
use excp::pipeline::{BaseSpec, Chain, CompressConfig, RetentionPolicy};
use excp::tensor_store::weights_digest;

pub fn run_example() -> excp::Result<()> {
    let cfg = TrainConfig::default();
    let data = cfg.data.generate(cfg.model.input, cfg.model.output);
    let init_spec = cfg.model.init_spec();
    let init = init_spec.materialize(cfg.init_seed)?;
    let dir = tempfile::tempdir().map_err(|e| excp::Error::Format(e.to_string()))?;
    let base = BaseSpec::Seeded {
        seed: cfg.init_seed,
        init: init_spec,
    };
    let manifest = dir.path().join("chain.json");
    let mut chain = Chain::create(&manifest, base, CompressConfig::default())?.keep_reconstructed(true);

    let mut trainer = Trainer::new(&cfg, &data, &init)?;
    let mut live = Vec::new();
    for _ in 0..6 {
        for _ in 0..200 {
            trainer.step()?;
        }
        let out = chain.append(&trainer.bundle()?)?;
        println!(
            "step {:>5}: {} ({})",
            out.entry.step,
            out.size,
            out.stats.map_or("no pruning".into(), |s| format!(
                "weights kept {:.3}",
                s.weights_kept as f64 / s.total as f64
            ))
        );
        live.push((out.entry.step, weights_digest(&out.reconstructed.weights)));
    }

    for (step, digest) in &live {
        let replayed = chain.replay(*step)?;
        assert_eq!(weights_digest(&replayed.weights), *digest);
    }
    println!("replayed {} steps from the seed, all digests match", live.len());

    let removed = chain.retention_apply(RetentionPolicy::default())?;
    println!("retention removed {} reconstructed bundles; archives kept: {}", removed.len(), chain.archive_paths().len());
    let last = live.last().map(|l| l.0).unwrap_or(0);
    assert_eq!(weights_digest(&chain.replay(last)?.weights), live.last().unwrap().1);
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
