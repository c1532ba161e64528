// Runs a short compressed training, then re-encodes its archives with
// every final-stage compressor and compares the totals.
//
//     cargo run --release --example compressor_comparison

use excp::harness::{chain_archives, compressor_sweep, run_training, TrainConfig};

pub fn run_example() -> excp::Result<()> {
    let cfg = TrainConfig {
        total_steps: 2_000,
        save_every: 250,
        break_every: 1_000,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| excp::Error::Format(e.to_string()))?;
    run_training(&cfg, Some(dir.path()))?;
    let archives = chain_archives(dir.path())?;
    let rows = compressor_sweep(&archives)?;
    println!("{} archives", archives.len());
    println!("{:>8} {:>10} {:>8}", "backend", "bytes", "ratio");
    for r in &rows {
        println!("{:>8} {:>10} {:>7.2}x", r.compressor.to_string(), r.bytes, r.ratio);
    }
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
