//! A complete SLoRA run: sparse-masked federated rounds, SVD priming of the
//! accumulated update into LoRA blocks, then block-only rounds — with the
//! accuracy trajectory and communication ledger along the way.
//!
//! Run with: cargo run --example slora_two_stage

use fedpeft::config::ExperimentSpec;
use fedpeft::fed::run_experiment;
use fedpeft::harness::Workbench;
use fedpeft::{Algorithm, PartitionKind};

fn main() -> fedpeft::Result<()> {
    let mut spec = ExperimentSpec::default();
    spec.algorithm = Algorithm::Slora;
    spec.partition = PartitionKind::Pathological;
    spec.n_clients = 50;
    spec.participants = Some(10);
    spec.rounds_stage1 = 30;
    spec.rounds_stage2 = 40;
    spec.samples = 4000;
    spec.lr = 0.2;
    spec.eval_stride = 5;
    let seed = 1;

    println!("preparing dataset, splits and the frozen starting model...");
    let bench = Workbench::prepare(&spec)?;
    let partition = bench.partition(&spec, seed)?;
    let cfg = spec.to_fed_config(seed);
    println!(
        "  N={} clients, K={} per round, stage 1 d1={} over {} rounds, stage 2 r={}/{} over {} rounds",
        cfg.n_clients,
        cfg.participants,
        cfg.d1,
        cfg.rounds_stage1,
        cfg.rank_hidden,
        cfg.rank_pre_classification,
        cfg.rounds_stage2,
    );

    let report = run_experiment(&cfg, &bench.w0, &bench.dataset, &bench.test, &partition)?;
    println!("\nround | stage | accuracy | cumulative Mbits");
    for record in report.records.iter().step_by(5) {
        println!(
            "{:5} | {:5} | {:8.4} | {:10.2}",
            record.round,
            record.stage,
            record.accuracy,
            record.cum_bits as f64 / 1e6,
        );
    }
    println!(
        "\nfinal accuracy {:.4} (best {:.4}) after {} rounds",
        report.final_accuracy, report.best_accuracy, report.total_rounds
    );
    println!(
        "stage-2 trainable params: {} of {} ({:.2}%)",
        report.trainable_count,
        bench.w0.total_params(),
        100.0 * report.trainable_density
    );
    println!(
        "communication: {:.2} Mbits dense ({:.2} Mbits with sparse index-value uplink)",
        report.ledger.cum_bits() as f64 / 1e6,
        (report.ledger.cum_bits_up_sparse + report.ledger.cum_bits_down) as f64 / 1e6,
    );
    println!(
        "modeled wall clock at 5 Mbit/s and 1 GFLOP/s: {:.1}s",
        report
            .ledger
            .wallclock_model(5e6, 5e6, 1e9)?
    );
    Ok(())
}
