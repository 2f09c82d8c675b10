//! The analytic cost model by itself: communication bits, the FLOP closed
//! form checked against the instrumented kernels, and the critical-path
//! wall-clock model.
//!
//! Run with: cargo run --example cost_model

use fedpeft::costs::{comm_bits, flops_estimate, index_bits, sparse_comm_bits};
use fedpeft::data::synth_generate;
use fedpeft::fed::local_train;
use fedpeft::linalg::{flop_count, reset_flop_counter};
use fedpeft::model::pretrain;
use fedpeft::peft::{mask_generate, PeftModel, SparseMask};
use fedpeft::ModelConfig;

fn main() -> fedpeft::Result<()> {
    let config = ModelConfig::default();
    let source = synth_generate(config.num_classes, config.input_dim, 1000, 11)?;
    let w0 = pretrain(&config, &source, 2, 0.1, 11)?;
    let total = w0.total_params() as u64;

    println!("model: {total} parameters");
    println!("\ncommunication per round (K=10 participants, 32 bits/param, both directions):");
    let fft = PeftModel::Dense {
        model: w0.clone(),
        mask: SparseMask::full(&w0),
    };
    let sft = PeftModel::Dense {
        model: w0.clone(),
        mask: mask_generate(&w0, 0.10, 3)?,
    };
    for (name, state) in [("fft", &fft), ("sft d=0.10", &sft)] {
        let trainable = state.trainable_count() as u64;
        let dense = comm_bits(trainable, 10, 32, 2);
        let sparse = sparse_comm_bits(trainable, total, 32) * 10;
        println!(
            "  {name:<10} trainable {trainable:>5}: dense {dense:>9} bits, sparse uplink {sparse:>9} bits ({} index bits/nonzero)",
            index_bits(total)
        );
    }

    println!("\nFLOPs for one local epoch over 30 samples (closed form vs instrumented kernels):");
    let ds = synth_generate(config.num_classes, config.input_dim, 60, 5)?;
    let indices: Vec<usize> = (0..30).collect();
    for (name, state) in [("fft", &fft), ("sft d=0.10", &sft)] {
        let estimate = flops_estimate(&w0, state, 30);
        reset_flop_counter();
        local_train(state, &ds, &indices, 1, 0.1, 32, 1, 1, 0)?;
        println!(
            "  {name:<10} forward {:>8}, backward {:>8}, total {:>9}; measured {:>9}",
            estimate.forward,
            estimate.backward,
            estimate.total(),
            flop_count(),
        );
    }

    println!("\nwall-clock model (one round, 10 clients, slowest client dominates):");
    let trainable = fft.trainable_count() as u64;
    let per_client_bits = trainable * 32;
    let flops = flops_estimate(&w0, &fft, 30).total();
    let mut ledger = fedpeft::costs::CostLedger::default();
    ledger.record(fedpeft::costs::RoundCosts {
        bits_up: per_client_bits * 10,
        bits_down: per_client_bits * 10,
        bits_up_sparse: per_client_bits * 10,
        flops: flops * 10,
        per_client_bits_up: per_client_bits,
        per_client_bits_down: per_client_bits,
        max_client_flops: flops,
    });
    for (bw, rate) in [(5e6, 1e9), (10e6, 1e9), (5e6, 1e10)] {
        println!(
            "  bandwidth {:>4} Mbit/s, compute {:>4} GFLOP/s -> {:.4} s/round",
            bw / 1e6,
            rate / 1e9,
            ledger.wallclock_model(bw, bw, rate)?
        );
    }
    Ok(())
}
