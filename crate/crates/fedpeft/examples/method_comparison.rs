//! Run several methods on the same task and align them at a fixed round
//! count and at a fixed communication budget, mirroring the two comparison
//! modes of the CLI's `compare` subcommand.
//!
//! Run with: cargo run --example method_comparison

use fedpeft::config::ExperimentSpec;
use fedpeft::harness::{compare_report, run_single_on, CompareMode, Workbench};
use fedpeft::{Algorithm, PartitionKind};

fn main() -> fedpeft::Result<()> {
    let out = std::env::temp_dir().join("fedpeft_method_comparison");
    let _ = std::fs::remove_dir_all(&out);

    let mut base = ExperimentSpec::default();
    base.partition = PartitionKind::Pathological;
    base.n_clients = 50;
    base.participants = Some(10);
    base.samples = 4000;
    base.lr = 0.2;
    base.eval_stride = 5;
    let bench = Workbench::prepare(&base)?;

    // FFT stops early; the cheap methods run longer (padded baselines), so
    // the budget mode has room to align them.
    let runs = [
        (Algorithm::Fft, 40, 0),
        (Algorithm::Sft, 80, 0),
        (Algorithm::Lora, 0, 80),
        (Algorithm::Slora, 30, 50),
    ];
    let mut dirs = Vec::new();
    for (algorithm, r1, r2) in runs {
        let mut spec = base.clone();
        spec.algorithm = algorithm;
        spec.rounds_stage1 = r1;
        spec.rounds_stage2 = r2;
        spec.out_dir = out.join(algorithm.as_str());
        let dir = spec.out_dir.join("seed_1");
        let result = run_single_on(&spec, &bench, 1, &dir)?;
        println!(
            "{:<8} {} rounds, final accuracy {:.4}, {:.2} Mbits",
            algorithm.to_string(),
            result.summary.total_rounds,
            result.summary.final_accuracy,
            result.summary.cum_bits as f64 / 1e6,
        );
        dirs.push(dir);
    }

    println!("\naligned at the smallest common round count:");
    print!("{}", compare_report(&dirs, CompareMode::Rounds)?);

    println!("\naligned at the smallest common communication budget:");
    print!("{}", compare_report(&dirs, CompareMode::Budget)?);
    Ok(())
}
