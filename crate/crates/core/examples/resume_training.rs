// Train the MLP twice: once straight through, once saving a compressed
// checkpoint every `save_every` steps and killing/resuming from the chain
// every `break_every` steps. Prints both loss curves side by side.
//
//     cargo run --release --example resume_training -- --full

use excp::harness::{run_paired, TrainConfig};

fn config(full: bool) -> TrainConfig {
    if full {
        return TrainConfig::default();
    }
    TrainConfig {
        total_steps: 2_000,
        save_every: 250,
        break_every: 500,
        ..TrainConfig::default()
    }
}

pub fn run_example() -> excp::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let cfg = config(full);
    let started = std::time::Instant::now();
    let report = run_paired(&cfg, None)?;
    let (b, c) = (&report.baseline, &report.compressed);

    println!("{:>7} {:>12} {:>12} {:>8}", "step", "baseline", "compressed", "rel");
    let stride = (b.eval_steps.len() / 20).max(1);
    for i in (0..b.eval_steps.len()).step_by(stride) {
        let rel = (c.eval_losses[i] - b.eval_losses[i]) / b.eval_losses[i];
        let mark = if c.resumed_at.iter().any(|s| s.abs_diff(b.eval_steps[i]) < cfg.eval_every) { "*" } else { "" };
        println!(
            "{:>7} {:>12.6} {:>12.6} {:>+8.3}{mark}",
            b.eval_steps[i], b.eval_losses[i], c.eval_losses[i], rel
        );
    }
    println!("resumed at {:?}", c.resumed_at);
    println!("final eval loss: baseline {:.6}, compressed {:.6} (rel diff {:.4})",
        b.final_eval_loss, c.final_eval_loss, report.final_rel_diff);
    println!("max per-eval deviation: {:.4}", report.max_curve_rel_dev);
    for ck in &c.checkpoints {
        println!(
            "  step {:>6}: {:>8} -> {:>7} bytes, weights kept {:.3}, moments kept {:.3}",
            ck.step, ck.raw_bytes, ck.compressed_bytes, ck.weight_density, ck.moment_density
        );
    }
    println!("aggregate: {}", c.aggregate);
    println!("elapsed: {:.1?}", started.elapsed());
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
