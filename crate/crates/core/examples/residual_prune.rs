// Trains the MLP briefly, then compares the residual between two adjacent
// checkpoints with the raw weights and applies joint weight/moment pruning.
//
//     cargo run --release --example residual_prune

use excp::harness::{TrainConfig, Trainer};
use excp::prune::{apply_masks, joint_masks, median_abs, PruneConfig};
use excp::residual::compute_residual;

pub fn run_example() -> excp::Result<()> {
    let cfg = TrainConfig::default();
    let data = cfg.data.generate(cfg.model.input, cfg.model.output);
    let init = cfg.model.init_spec().materialize(cfg.init_seed)?;
    let mut trainer = Trainer::new(&cfg, &data, &init)?;
    for _ in 0..500 {
        trainer.step()?;
    }
    let prev = trainer.bundle()?;
    for _ in 0..500 {
        trainer.step()?;
    }
    let current = trainer.bundle()?;

    let residual = compute_residual(&prev.weights, &current)?;
    println!("{:>12} {:>12} {:>12} {:>8}", "tensor", "median|W|", "median|dW|", "ratio");
    for (name, delta) in &residual.weight_deltas {
        let w: Vec<f64> = current.weights[name].data().iter().map(|x| f64::from(*x)).collect();
        let (mw, md) = (median_abs(&w), median_abs(&delta.data));
        println!("{name:>12} {mw:>12.3e} {md:>12.3e} {:>8.4}", md / mw);
    }

    let prune = PruneConfig::default();
    let masks = joint_masks(&residual, &prune)?;
    println!("\nalpha={} beta={}", prune.alpha, prune.beta);
    println!("{:>12} {:>10} {:>12} {:>12}", "tensor", "elements", "weights kept", "moments kept");
    for (name, s) in &masks.stats {
        println!(
            "{name:>12} {:>10} {:>12.4} {:>12.4}",
            s.total,
            s.weights_kept as f64 / s.total as f64,
            s.moments_kept as f64 / s.total as f64
        );
    }
    let pruned = apply_masks(&residual, &masks)?;
    // both moments are zeroed exactly where the momentum mask drops them
    for (name, mask) in &masks.momentum_masks {
        let m = pruned.first_moments[name].data();
        let v = pruned.second_moments[name].data();
        for (i, keep) in mask.iter().enumerate() {
            assert!(*keep || (m[i] == 0.0 && v[i] == 0.0));
        }
    }
    let t = masks.totals();
    println!(
        "total: weights kept {:.4}, moments kept {:.4}",
        t.weights_kept as f64 / t.total as f64,
        t.moments_kept as f64 / t.total as f64
    );
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
