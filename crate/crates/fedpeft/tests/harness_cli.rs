//! Output-file contracts: byte determinism, sweep statistics, comparison
//! modes, and the CLI binary end to end.

mod common;

use fedpeft::checkpoint::Checkpoint;
use fedpeft::config::{parse_config_str, ExperimentSpec};
use fedpeft::harness::{compare_report, run_single, run_sweep, CompareMode};
use fedpeft::{Algorithm, PartitionKind};
use std::path::PathBuf;
use std::process::Command;

fn small_spec(algorithm: Algorithm, out: &std::path::Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.algorithm = algorithm;
    spec.seeds = vec![1];
    spec.out_dir = out.to_path_buf();
    spec.n_clients = 6;
    spec.participants = Some(3);
    spec.rounds_stage1 = 3;
    spec.rounds_stage2 = 3;
    spec.samples = 240;
    spec.num_classes = 8;
    spec.dims = 10;
    spec.embedding_dim = 10;
    spec.hidden_dims = vec![12, 12];
    spec.pre_classification_dim = 12;
    spec.pretrain_samples = 160;
    spec.pretrain_epochs = 1;
    spec.rank_hidden = 3;
    spec.rank_pre_classification = 4;
    spec.partition = PartitionKind::Pathological;
    spec.shards_per_client = 2;
    spec
}

#[test]
fn run_writes_all_artifacts_and_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(Algorithm::Slora, tmp.path());
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    run_single(&spec, 1, &dir_a).unwrap();
    run_single(&spec, 1, &dir_b).unwrap();
    for file in ["rounds.csv", "summary.json", "partition.json", "w0.ckpt", "w_r.ckpt", "final.ckpt"] {
        let a = std::fs::read(dir_a.join(file)).unwrap_or_else(|_| panic!("{file} missing"));
        let b = std::fs::read(dir_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    // Checkpoints parse back.
    let w0 = Checkpoint::read_from(&dir_a.join("w0.ckpt")).unwrap();
    assert!(w0.blocks.is_none());
    let final_ckpt = Checkpoint::read_from(&dir_a.join("final.ckpt")).unwrap();
    assert!(final_ckpt.blocks.is_some(), "slora final state carries blocks");
}

#[test]
fn thread_count_does_not_change_output_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = small_spec(Algorithm::Slora, tmp.path());
    let dir_a = tmp.path().join("t1");
    run_single(&spec, 1, &dir_a).unwrap();
    spec.threads = 8;
    let dir_b = tmp.path().join("t8");
    run_single(&spec, 1, &dir_b).unwrap();
    assert_eq!(
        std::fs::read(dir_a.join("rounds.csv")).unwrap(),
        std::fs::read(dir_b.join("rounds.csv")).unwrap()
    );
}

#[test]
fn sweep_single_seed_mean_is_that_run() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(Algorithm::Fft, &tmp.path().join("sweep"));
    let summary = run_sweep(&spec).unwrap();
    assert_eq!(summary.final_accuracies.len(), 1);
    assert_eq!(summary.mean_final_accuracy, summary.final_accuracies[0]);
    assert_eq!(summary.std_final_accuracy, 0.0);
    assert_eq!(summary.best3_mean_accuracy, summary.final_accuracies[0]);
}

#[test]
fn sweep_five_seeds_reports_best3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = small_spec(Algorithm::Fft, &tmp.path().join("sweep"));
    spec.seeds = vec![1, 2, 3, 4, 5];
    let summary = run_sweep(&spec).unwrap();
    assert_eq!(summary.final_accuracies.len(), 5);
    let mut sorted = summary.final_accuracies.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let want = (sorted[0] + sorted[1] + sorted[2]) / 3.0;
    assert!((summary.best3_mean_accuracy - want).abs() < 1e-15);
    // Per-seed artifacts all exist.
    for seed in 1..=5u64 {
        assert!(spec
            .out_dir
            .join(format!("seed_{seed}"))
            .join("rounds.csv")
            .exists());
    }
    assert!(spec.out_dir.join("sweep_summary.json").exists());
}

#[test]
fn compare_run_with_itself_is_zero_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(Algorithm::Fft, tmp.path());
    let dir = tmp.path().join("self");
    run_single(&spec, 1, &dir).unwrap();
    let table = compare_report(&[dir.clone(), dir.clone()], CompareMode::Rounds).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].accuracy, table.rows[1].accuracy);
    assert_eq!(table.rows[1].delta_accuracy_vs_first, 0.0);
}

#[test]
fn compare_modes_align_runs() {
    let tmp = tempfile::tempdir().unwrap();
    // FFT: few expensive rounds. LoRA: more cheap rounds (a padded baseline).
    let mut fft = small_spec(Algorithm::Fft, tmp.path());
    fft.rounds_stage1 = 4;
    let fft_dir = tmp.path().join("fft");
    run_single(&fft, 1, &fft_dir).unwrap();

    let mut lora = small_spec(Algorithm::Lora, tmp.path());
    lora.rounds_stage2 = 30;
    let lora_dir = tmp.path().join("lora");
    run_single(&lora, 1, &lora_dir).unwrap();

    let rounds = compare_report(&[fft_dir.clone(), lora_dir.clone()], CompareMode::Rounds).unwrap();
    // Truncated at the shorter run's round count.
    assert!(rounds.rows.iter().all(|r| r.rounds_used == 4));

    let budget = compare_report(&[fft_dir, lora_dir], CompareMode::Budget).unwrap();
    let common = budget.rows.iter().map(|r| r.cum_bits_used).max().unwrap();
    // Every run is cut at or below the common budget, and the padded
    // baseline uses more rounds to get there.
    assert!(budget.rows.iter().all(|r| r.cum_bits_used <= common));
    assert!(budget.rows[1].rounds_used > budget.rows[0].rounds_used);
}

#[test]
fn compare_rejects_dataset_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let spec_a = small_spec(Algorithm::Fft, tmp.path());
    let dir_a = tmp.path().join("a");
    run_single(&spec_a, 1, &dir_a).unwrap();
    let mut spec_b = small_spec(Algorithm::Fft, tmp.path());
    spec_b.data_seed = 99;
    let dir_b = tmp.path().join("b");
    run_single(&spec_b, 1, &dir_b).unwrap();
    let err = compare_report(&[dir_a, dir_b], CompareMode::Rounds).unwrap_err();
    assert!(err.to_string().contains("dataset hash"), "{err}");
}

#[test]
fn config_echo_in_summary_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(Algorithm::Slora, tmp.path());
    let dir = tmp.path().join("echo");
    let output = run_single(&spec, 1, &dir).unwrap();
    let parsed = parse_config_str(&output.summary.config_echo).unwrap();
    assert_eq!(parsed, spec);
}

#[test]
fn cli_run_sweep_compare_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("runs/fft");
    let out_b = tmp.path().join("runs/slora");
    let mut spec_a = small_spec(Algorithm::Fft, &out_a);
    spec_a.rounds_stage1 = 4;
    let mut spec_b = small_spec(Algorithm::Slora, &out_b);
    spec_b.rounds_stage1 = 2;
    spec_b.rounds_stage2 = 4;
    let conf_a = tmp.path().join("fft.conf");
    let conf_b = tmp.path().join("slora.conf");
    std::fs::write(&conf_a, spec_a.to_config_string()).unwrap();
    std::fs::write(&conf_b, spec_b.to_config_string()).unwrap();

    let bin = env!("CARGO_BIN_EXE_fedpeft");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "fedpeft {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };

    run(&["run", conf_a.to_str().unwrap()]);
    run(&["sweep", conf_b.to_str().unwrap()]);
    let table = run(&[
        "compare",
        out_a.join("seed_1").to_str().unwrap(),
        out_b.join("seed_1").to_str().unwrap(),
        "--mode",
        "budget",
    ]);
    assert!(table.contains("accuracy"), "table output:\n{table}");

    // Bad config exits nonzero with the offending key named.
    let bad = tmp.path().join("bad.conf");
    std::fs::write(&bad, "definitely_not_a_key = 1\n").unwrap();
    let out = Command::new(bin)
        .args(["run", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("definitely_not_a_key"));
}

#[test]
fn spec_round_trip_over_many_random_specs() {
    use rand::Rng as _;
    let mut r = common::rng(4242);
    for _ in 0..50 {
        let mut spec = ExperimentSpec::default();
        spec.algorithm = Algorithm::ALL[r.gen_range(0..Algorithm::ALL.len())];
        spec.seeds = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..10_000)).collect();
        spec.n_clients = r.gen_range(1..200);
        spec.participants = if r.gen_bool(0.5) {
            None
        } else {
            Some(r.gen_range(1..50))
        };
        spec.d1 = r.gen_range(0.01..1.0);
        spec.lr = r.gen_range(0.001..1.0);
        spec.train_fraction = r.gen_range(0.1..0.9);
        spec.dirichlet_alpha = 10f64.powf(r.gen_range(-2.0..4.0));
        spec.lora_alpha = if r.gen_bool(0.5) {
            None
        } else {
            Some(r.gen_range(0.1..64.0))
        };
        spec.hidden_dims = (0..r.gen_range(1..4)).map(|_| r.gen_range(4..64)).collect();
        spec.partition = match r.gen_range(0..3) {
            0 => PartitionKind::Iid,
            1 => PartitionKind::Dirichlet,
            _ => PartitionKind::Pathological,
        };
        spec.out_dir = PathBuf::from(format!("runs/r{}", r.gen_range(0..1000)));
        let text = spec.to_config_string();
        let parsed = parse_config_str(&text).unwrap();
        assert_eq!(parsed, spec, "round trip failed for:\n{text}");
    }
}
