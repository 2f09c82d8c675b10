//! Experiment launching, sweeps and run comparison.
//!
//! A run writes into its output directory:
//!
//! * `rounds.csv` — per-round log (`round,stage,accuracy,bits_up,bits_down,
//!   cum_bits,cum_flops`) behind a schema comment line,
//! * `summary.json` — final metrics, cost totals and the cost-model
//!   formulas,
//! * `partition.json` — client id to sample indices, for audit,
//! * `w0.ckpt` / `final.ckpt` (+ `w_r.ckpt` for two-stage runs).
//!
//! The dataset and the pre-trained starting point depend only on their own
//! seeds, so different run seeds (and different methods) see the same task;
//! everything else — partition, masks, init, client sampling, shuffles —
//! derives from the run seed. `(spec, seed)` fixes every output byte.

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentSpec, PartitionKind};
use crate::costs::CostModelDescription;
use crate::data::{
    load_csv, partition_dirichlet, partition_iid, partition_pathological, split_train_test,
    synth_generate, Dataset, Partition,
};
use crate::error::{Error, Result};
use crate::fed::{run_experiment, ExperimentReport, RoundRecord};
use crate::model::{pretrain, ModelParams};
use crate::peft::PeftModel;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const ROUNDS_SCHEMA: &str = "# fedpeft-rounds-v1";
pub const ROUNDS_HEADER: &str = "round,stage,accuracy,bits_up,bits_down,cum_bits,cum_flops";

/// Per-run summary persisted as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub algorithm: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub total_rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub trainable_count: usize,
    pub trainable_density: f64,
    pub total_params: usize,
    pub cum_bits_up: u64,
    pub cum_bits_down: u64,
    pub cum_bits: u64,
    pub cum_bits_up_sparse: u64,
    pub cum_flops: u64,
    pub wallclock_seconds: f64,
    pub cost_model: CostModelDescription,
    pub config_echo: String,
}

/// A completed single-seed run.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub report: ExperimentReport,
}

/// Dataset, splits and frozen starting point shared by every seed of a spec.
pub struct Workbench {
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub w0: ModelParams,
}

impl Workbench {
    pub fn prepare(spec: &ExperimentSpec) -> Result<Workbench> {
        let dataset = match &spec.dataset {
            DataSource::Synth => {
                synth_generate(spec.num_classes, spec.dims, spec.samples, spec.data_seed)?
            }
            DataSource::Csv(path) => load_csv(
                path,
                if spec.num_classes == 0 {
                    None
                } else {
                    Some(spec.num_classes)
                },
            )?,
        };
        let (train, test) = split_train_test(&dataset, spec.train_fraction, spec.data_seed)?;
        let model_cfg = spec.model_config(dataset.dims(), dataset.num_classes);
        let source = synth_generate(
            dataset.num_classes,
            dataset.dims(),
            spec.pretrain_samples,
            spec.pretrain_seed,
        )?;
        let w0 = pretrain(
            &model_cfg,
            &source,
            spec.pretrain_epochs,
            spec.pretrain_lr,
            spec.pretrain_seed,
        )?;
        Ok(Workbench {
            dataset,
            train,
            test,
            w0,
        })
    }

    pub fn partition(&self, spec: &ExperimentSpec, seed: u64) -> Result<Partition> {
        match spec.partition {
            PartitionKind::Iid => partition_iid(&self.train, spec.n_clients, seed),
            PartitionKind::Dirichlet => partition_dirichlet(
                &self.train,
                &self.dataset,
                spec.n_clients,
                spec.dirichlet_alpha,
                seed,
            ),
            PartitionKind::Pathological => partition_pathological(
                &self.train,
                &self.dataset,
                spec.n_clients,
                spec.shards_per_client,
                seed,
            ),
        }
    }
}

/// Run one seed of the spec, writing all artifacts under `dir`.
pub fn run_single(spec: &ExperimentSpec, seed: u64, dir: &Path) -> Result<RunOutput> {
    let bench = Workbench::prepare(spec)?;
    run_single_on(spec, &bench, seed, dir)
}

/// As [`run_single`] with a prepared workbench (sweeps reuse it across
/// seeds).
pub fn run_single_on(
    spec: &ExperimentSpec,
    bench: &Workbench,
    seed: u64,
    dir: &Path,
) -> Result<RunOutput> {
    std::fs::create_dir_all(dir)?;
    let partition = bench.partition(spec, seed)?;
    let fed_cfg = spec.to_fed_config(seed);
    let report = run_experiment(&fed_cfg, &bench.w0, &bench.dataset, &bench.test, &partition)?;

    let wallclock = report.ledger.wallclock_model(
        spec.bandwidth_up_mbits * 1e6,
        spec.bandwidth_down_mbits * 1e6,
        spec.flops_rate,
    )?;
    let summary = RunSummary {
        schema: "fedpeft-summary-v1".to_string(),
        algorithm: spec.algorithm.to_string(),
        seed,
        dataset_hash: format!("{:016x}", bench.dataset.content_hash()),
        total_rounds: report.total_rounds,
        final_accuracy: report.final_accuracy,
        best_accuracy: report.best_accuracy,
        trainable_count: report.trainable_count,
        trainable_density: report.trainable_density,
        total_params: bench.w0.total_params(),
        cum_bits_up: report.ledger.cum_bits_up,
        cum_bits_down: report.ledger.cum_bits_down,
        cum_bits: report.ledger.cum_bits(),
        cum_bits_up_sparse: report.ledger.cum_bits_up_sparse,
        cum_flops: report.ledger.cum_flops,
        wallclock_seconds: wallclock,
        cost_model: CostModelDescription::new(spec.bits_per_param),
        config_echo: spec.to_config_string(),
    };

    std::fs::write(dir.join("rounds.csv"), rounds_csv(&report.records))?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    std::fs::write(dir.join("partition.json"), partition.to_json())?;
    Checkpoint::model_only(bench.w0.clone()).write_to(&dir.join("w0.ckpt"))?;
    if let Some(w_r) = &report.stage1_model {
        Checkpoint::model_only(w_r.clone()).write_to(&dir.join("w_r.ckpt"))?;
    }
    final_checkpoint(&report.final_state).write_to(&dir.join("final.ckpt"))?;

    Ok(RunOutput {
        dir: dir.to_path_buf(),
        summary,
        report,
    })
}

fn final_checkpoint(state: &PeftModel) -> Checkpoint {
    match state {
        PeftModel::Dense { model, mask } => Checkpoint {
            model: model.clone(),
            blocks: None,
            mask: Some(mask.clone()),
        },
        PeftModel::Lora { base, blocks } => Checkpoint {
            model: base.clone(),
            blocks: Some(blocks.clone()),
            mask: None,
        },
        // Adapter weights live outside the checkpoint schema; persist the
        // (frozen) base so the run is still inspectable.
        PeftModel::Adapter { base, .. } => Checkpoint::model_only(base.clone()),
    }
}

/// Render the per-round log; floats print in shortest round-trip form, so
/// the bytes are a pure function of the records.
pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{ROUNDS_SCHEMA}");
    let _ = writeln!(out, "{ROUNDS_HEADER}");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, r.stage, r.accuracy, r.bits_up, r.bits_down, r.cum_bits, r.cum_flops
        );
    }
    out
}

/// Parse `rounds.csv` back into records (participants are not stored there).
pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("round,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("bad rounds.csv line `{line}`")));
        }
        let parse_u64 = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Data(format!("bad rounds.csv field `{s}`")))
        };
        records.push(RoundRecord {
            round: parse_u64(fields[0])? as usize,
            stage: parse_u64(fields[1])? as u8,
            participants: Vec::new(),
            accuracy: fields[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad accuracy `{}`", fields[2])))?,
            bits_up: parse_u64(fields[3])?,
            bits_down: parse_u64(fields[4])?,
            cum_bits: parse_u64(fields[5])?,
            cum_flops: parse_u64(fields[6])?,
        });
    }
    Ok(records)
}

/// Sweep-level aggregate persisted as `sweep_summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema: String,
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    /// Mean of the best `min(3, seeds)` final accuracies.
    pub best3_mean_accuracy: f64,
    pub run_dirs: Vec<String>,
}

/// Run every seed of the spec under `out_dir/seed_<s>/` and write the sweep
/// summary. Failures abort with partial results preserved on disk.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepSummary> {
    spec.validate_for_launch()?;
    let bench = Workbench::prepare(spec)?;
    let mut final_accuracies = Vec::with_capacity(spec.seeds.len());
    let mut run_dirs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let dir = spec.out_dir.join(format!("seed_{seed}"));
        let output = run_single_on(spec, &bench, seed, &dir)?;
        final_accuracies.push(output.summary.final_accuracy);
        run_dirs.push(dir.display().to_string());
    }
    let mean = mean(&final_accuracies);
    let summary = SweepSummary {
        schema: "fedpeft-sweep-v1".to_string(),
        algorithm: spec.algorithm.to_string(),
        seeds: spec.seeds.clone(),
        mean_final_accuracy: mean,
        std_final_accuracy: sample_std(&final_accuracies, mean),
        best3_mean_accuracy: best_k_mean(&final_accuracies, 3),
        final_accuracies,
        run_dirs,
    };
    std::fs::create_dir_all(&spec.out_dir)?;
    std::fs::write(
        spec.out_dir.join("sweep_summary.json"),
        serde_json::to_string_pretty(&summary).expect("sweep summary serializes"),
    )?;
    Ok(summary)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1); zero for a single value.
pub fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn best_k_mean(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let take = k.min(sorted.len());
    mean(&sorted[..take])
}

/// How runs are aligned in a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMode {
    /// Cut every run at the largest communication budget they all reached.
    Budget,
    /// Cut every run at the smallest common round count.
    Rounds,
}

impl std::str::FromStr for CompareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<CompareMode> {
        match s {
            "budget" => Ok(CompareMode::Budget),
            "rounds" => Ok(CompareMode::Rounds),
            _ => Err(Error::Config(format!(
                "compare mode must be `budget` or `rounds`, got `{s}`"
            ))),
        }
    }
}

/// One aligned comparison row.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub dir: String,
    pub algorithm: String,
    pub trainable_count: usize,
    pub rounds_used: usize,
    pub cum_bits_used: u64,
    pub accuracy: f64,
    pub wallclock_seconds: f64,
    pub delta_accuracy_vs_first: f64,
}

/// Aligned comparison over completed run directories.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub mode: String,
    pub rows: Vec<CompareRow>,
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<28} {:>10} {:>8} {:>14} {:>9} {:>12} {:>8}",
            "run", "trainable", "rounds", "cum_bits", "accuracy", "wallclock_s", "d_acc"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<28} {:>10} {:>8} {:>14} {:>9.4} {:>12.2} {:>+8.4}",
                truncate_label(&format!("{} ({})", row.dir, row.algorithm)),
                row.trainable_count,
                row.rounds_used,
                row.cum_bits_used,
                row.accuracy,
                row.wallclock_seconds,
                row.delta_accuracy_vs_first,
            )?;
        }
        Ok(())
    }
}

fn truncate_label(s: &str) -> String {
    if s.len() <= 28 {
        s.to_string()
    } else {
        format!("...{}", &s[s.len() - 25..])
    }
}

struct LoadedRun {
    dir: String,
    summary: RunSummary,
    records: Vec<RoundRecord>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let summary_text = std::fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| Error::Compare(format!("{}: {e}", dir.display())))?;
    let summary: RunSummary = serde_json::from_str(&summary_text)
        .map_err(|e| Error::Compare(format!("{}: bad summary.json: {e}", dir.display())))?;
    let rounds_text = std::fs::read_to_string(dir.join("rounds.csv"))
        .map_err(|e| Error::Compare(format!("{}: {e}", dir.display())))?;
    let records = parse_rounds_csv(&rounds_text)?;
    if records.is_empty() {
        return Err(Error::Compare(format!(
            "{}: run has no rounds",
            dir.display()
        )));
    }
    Ok(LoadedRun {
        dir: dir.display().to_string(),
        summary,
        records,
    })
}

/// Compare completed runs at a fixed communication budget (runs configured
/// with more rounds act as padded baselines and are cut where they reach the
/// common budget) or at a fixed round count (everything truncates to the
/// shortest run).
pub fn compare_report(dirs: &[PathBuf], mode: CompareMode) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Compare(
            "need at least two run directories".to_string(),
        ));
    }
    let runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let hash = &runs[0].summary.dataset_hash;
    if let Some(other) = runs.iter().find(|r| &r.summary.dataset_hash != hash) {
        return Err(Error::Compare(format!(
            "dataset hash mismatch: {} has {}, {} has {}",
            runs[0].dir, hash, other.dir, other.summary.dataset_hash
        )));
    }

    let rows: Vec<CompareRow> = match mode {
        CompareMode::Budget => {
            let budget = runs
                .iter()
                .map(|r| r.records.last().unwrap().cum_bits)
                .min()
                .unwrap();
            runs.iter()
                .map(|r| {
                    let cut = r
                        .records
                        .iter()
                        .rev()
                        .find(|rec| rec.cum_bits <= budget)
                        .unwrap_or(&r.records[0]);
                    row_at(r, cut)
                })
                .collect()
        }
        CompareMode::Rounds => {
            let rounds = runs.iter().map(|r| r.records.len()).min().unwrap();
            runs.iter()
                .map(|r| row_at(r, &r.records[rounds - 1]))
                .collect()
        }
    };
    let first_acc = rows[0].accuracy;
    let rows = rows
        .into_iter()
        .map(|mut row| {
            row.delta_accuracy_vs_first = row.accuracy - first_acc;
            row
        })
        .collect();
    Ok(Comparison {
        mode: match mode {
            CompareMode::Budget => "budget".to_string(),
            CompareMode::Rounds => "rounds".to_string(),
        },
        rows,
    })
}

fn row_at(run: &LoadedRun, rec: &RoundRecord) -> CompareRow {
    CompareRow {
        dir: run.dir.clone(),
        algorithm: run.summary.algorithm.clone(),
        trainable_count: run.summary.trainable_count,
        rounds_used: rec.round,
        cum_bits_used: rec.cum_bits,
        accuracy: rec.accuracy,
        wallclock_seconds: run.summary.wallclock_seconds,
        delta_accuracy_vs_first: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_helpers() {
        assert_eq!(mean(&[0.5]), 0.5);
        assert_eq!(sample_std(&[0.5], 0.5), 0.0);
        let values = [0.9, 0.7, 0.8, 0.6, 0.5];
        assert!((best_k_mean(&values, 3) - 0.8).abs() < 1e-12);
        assert_eq!(best_k_mean(&[0.4], 3), 0.4);
    }

    #[test]
    fn rounds_csv_round_trip() {
        let records = vec![RoundRecord {
            round: 1,
            stage: 1,
            participants: vec![0, 2],
            accuracy: 0.4375,
            bits_up: 64,
            bits_down: 64,
            cum_bits: 128,
            cum_flops: 1000,
        }];
        let text = rounds_csv(&records);
        assert!(text.starts_with(ROUNDS_SCHEMA));
        let parsed = parse_rounds_csv(&text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].round, 1);
        assert_eq!(parsed[0].accuracy, 0.4375);
        assert_eq!(parsed[0].cum_flops, 1000);
    }

    #[test]
    fn compare_mode_parses() {
        assert_eq!("budget".parse::<CompareMode>().unwrap(), CompareMode::Budget);
        assert_eq!("rounds".parse::<CompareMode>().unwrap(), CompareMode::Rounds);
        assert!("fixed".parse::<CompareMode>().is_err());
    }
}
