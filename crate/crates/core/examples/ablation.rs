// Stage ablation: trains the MLP once per {residual, prune, 4-bit} cell
// plus 2- and 8-bit variants, then prints size and final loss per cell.
//
//     cargo run --release --example ablation -- --full

use excp::harness::{ablation_suite, TrainConfig};

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
    let started = std::time::Instant::now();
    let table = ablation_suite(&config(full))?;
    println!("baseline final loss {:.6}", table.baseline_loss);
    println!("{:>14} {:>10} {:>10} {:>8} {:>11}", "cell", "raw", "archive", "ratio", "final loss");
    for r in &table.rows {
        println!(
            "{:>14} {:>10} {:>10} {:>7.2}x {:>11.6}",
            r.label, r.raw_bytes, r.compressed_bytes, r.ratio, r.final_loss
        );
    }
    println!("elapsed: {:.1?}", started.elapsed());
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
