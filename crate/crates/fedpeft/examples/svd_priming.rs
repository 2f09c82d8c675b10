//! Truncated SVD as an update compressor.
//!
//! Builds a synthetic accumulated update, factors it at every rank, and
//! shows the Frobenius reconstruction error tracking the tail of the
//! spectrum — the mechanism that turns a dense stage-1 update into LoRA
//! factors.
//!
//! Run with: cargo run --example svd_priming

use fedpeft::{svd, truncated_factors, Matrix};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedpeft::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // A 12x9 update with a decaying spectrum: a few strong directions plus
    // broadband noise, like an accumulated fine-tuning delta.
    let strong = 3;
    let mut update = Matrix::zeros(12, 9);
    for k in 0..strong {
        let scale = 3.0 / (k + 1) as f64;
        let u: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..12 {
            for j in 0..9 {
                let prev = update.get(i, j);
                update.set(i, j, prev + scale * u[i] * v[j]);
            }
        }
    }
    for i in 0..12 {
        for j in 0..9 {
            let prev = update.get(i, j);
            update.set(i, j, prev + 0.02 * rng.gen_range(-1.0..1.0));
        }
    }

    let decomposition = svd(&update)?;
    println!("singular values of the update:");
    for (i, s) in decomposition.sigma.iter().enumerate() {
        println!("  sigma_{i}: {s:.6}");
    }

    println!("\nrank | stored params | reconstruction error | spectrum tail");
    let full = update.rows().min(update.cols());
    for rank in 1..=full {
        let (b, a) = truncated_factors(&update, rank)?;
        let approx = b.matmul(&a)?;
        let err = approx.sub(&update)?.frobenius_norm();
        let tail: f64 = decomposition.sigma[rank..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt();
        let params = rank * (update.rows() + update.cols());
        println!(
            "  {rank:2}  | {params:12}  | {err:20.12} | {tail:.12}"
        );
    }
    println!(
        "\nfull matrix stores {} params; rank-{strong} captures the signal at {} params",
        update.rows() * update.cols(),
        strong * (update.rows() + update.cols()),
    );
    Ok(())
}
