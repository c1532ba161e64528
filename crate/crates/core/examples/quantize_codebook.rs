// Fits k-means codebooks (code 0 reserved for exact zero) to a sparse,
// heavy-tailed tensor at 2, 4 and 8 bits and reports the error and size.
//
//     cargo run --example quantize_codebook

use excp::quant::{dequantize, quantize, sse, QuantConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> excp::Result<()> {
    // Laplace-like residual with 70% of entries pruned to zero.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f32> = (0..20_000)
        .map(|_| {
            if rng.random::<f64>() < 0.7 {
                return 0.0;
            }
            let u: f64 = rng.random::<f64>() - 0.5;
            (-1e-3 * u.signum() * (1.0 - 2.0 * u.abs()).ln()) as f32
        })
        .collect();
    let nonzero: Vec<f32> = values.iter().copied().filter(|v| *v != 0.0).collect();
    let energy: f64 = nonzero.iter().map(|v| f64::from(*v).powi(2)).sum();
    println!("{} values, {} nonzero", values.len(), nonzero.len());
    println!("{:>5} {:>8} {:>13} {:>12} {:>12}", "bits", "centers", "packed bytes", "rel SSE", "zeros kept");
    for bits in [2u8, 4, 8] {
        let q = quantize("delta", &[values.len()], &values, &QuantConfig::with_bits(bits))?;
        let back = dequantize(&q)?;
        let zeros_kept = values.iter().zip(&back).all(|(a, b)| (*a == 0.0) == (*b == 0.0));
        println!(
            "{bits:>5} {:>8} {:>13} {:>12.3e} {:>12}",
            q.codebook.len(),
            q.packed.len(),
            sse(&nonzero, &q.codebook) / energy,
            zeros_kept
        );
    }
    let q4 = quantize("delta", &[values.len()], &values, &QuantConfig::default())?;
    let shown: Vec<String> = q4.codebook.iter().map(|c| format!("{c:+.2e}")).collect();
    println!("4-bit codebook: [{}]", shown.join(", "));
    Ok(())
}

fn main() -> excp::Result<()> {
    run_example()
}
