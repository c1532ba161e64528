// Online logistic regression with Adam (lr / sqrt(t)). Zeroes moments at
// round 500 under several masks and prints average regret R(T)/T.
//
//     cargo run --release --example regret

use excp::harness::{regret_experiment, MaskRule, RegretConfig};

pub fn run_example() -> excp::Result<()> {
    let cfg = RegretConfig::default();
    let tau = 500;
    let runs = [
        ("unpruned", None, MaskRule::None),
        ("below-mean", Some(tau), MaskRule::BelowMean),
        ("beta=2", Some(tau), MaskRule::Threshold { beta: 2.0 }),
        ("all", Some(tau), MaskRule::All),
    ];
    print!("{:>12} {:>7}", "mask", "pruned");
    for t in &cfg.report_at {
        print!(" {:>10}", format!("T={t}"));
    }
    println!();
    let mut reports = Vec::new();
    for (label, at, rule) in runs {
        let r = regret_experiment(&cfg, at, rule)?;
        print!("{label:>12} {:>7}", r.pruned);
        for p in &r.points {
            print!(" {:>10.5}", p.average);
        }
        println!("  decreasing={}", r.is_decreasing());
        reports.push(r);
    }
    let last = *cfg.report_at.iter().max().unwrap_or(&cfg.rounds);
    let base = reports[0].average_at(last).unwrap_or(f64::NAN);
    for r in &reports[1..] {
        let avg = r.average_at(last).unwrap_or(f64::NAN);
        println!("{:?}: R(T)/T at T={last} is {:+.2}% vs unpruned", r.rule, 100.0 * (avg - base) / base.abs());
    }
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
