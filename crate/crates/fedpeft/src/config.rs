//! Experiment specification and its plain `key = value` config format.
//!
//! The format is line-oriented: `#` starts a comment, `[section]` headers
//! are cosmetic grouping, keys are globally unique. [`ExperimentSpec`]
//! prints back in a canonical order, and `parse(print(spec)) == spec`.

use crate::data::Heterogeneity;
use crate::error::{Error, Result};
use crate::fed::{Aggregation, Algorithm, FedConfig};
use crate::model::{LayerRole, ModelConfig};
use crate::peft::MaskScope;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Csv(PathBuf),
}

/// Which partitioner deals training data to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    Dirichlet,
    Pathological,
}

impl PartitionKind {
    fn as_str(&self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::Dirichlet => "dirichlet",
            PartitionKind::Pathological => "pathological",
        }
    }
}

/// Complete description of a reproducible experiment (or sweep of seeds).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    // experiment
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_stride: usize,
    pub threads: usize,
    // data
    pub dataset: DataSource,
    /// For CSV sources, 0 means "infer from the label column".
    pub num_classes: usize,
    pub dims: usize,
    pub samples: usize,
    pub data_seed: u64,
    pub train_fraction: f64,
    // partition
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
    pub shards_per_client: usize,
    // model
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub pre_classification_dim: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_samples: usize,
    pub pretrain_seed: u64,
    // federated
    pub n_clients: usize,
    /// `None` = 20 participants for pathological partitions, 10 otherwise.
    pub participants: Option<usize>,
    pub local_epochs: usize,
    pub rounds_stage1: usize,
    pub rounds_stage2: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    // peft
    pub d1: f64,
    pub mask_scope: MaskScope,
    pub lora_placement: Vec<LayerRole>,
    pub rank_hidden: usize,
    pub rank_pre_classification: usize,
    /// `None` = per-block rank (unit scaling).
    pub lora_alpha: Option<f64>,
    pub adapter_rank: usize,
    // costs
    pub bits_per_param: u64,
    pub bandwidth_up_mbits: f64,
    pub bandwidth_down_mbits: f64,
    pub flops_rate: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            algorithm: Algorithm::Slora,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs/out"),
            eval_stride: 1,
            threads: 1,
            dataset: DataSource::Synth,
            num_classes: 20,
            dims: 20,
            samples: 2000,
            data_seed: 7,
            train_fraction: 0.6,
            partition: PartitionKind::Pathological,
            dirichlet_alpha: 1.0,
            shards_per_client: 2,
            embedding_dim: 20,
            hidden_dims: vec![30, 30],
            pre_classification_dim: 30,
            pretrain_epochs: 3,
            pretrain_lr: 0.1,
            pretrain_samples: 2000,
            pretrain_seed: 11,
            n_clients: 100,
            participants: None,
            local_epochs: 1,
            rounds_stage1: 50,
            rounds_stage2: 50,
            lr: 0.2,
            batch_size: 32,
            aggregation: Aggregation::Uniform,
            d1: 0.10,
            mask_scope: MaskScope::Inner,
            lora_placement: vec![LayerRole::Hidden, LayerRole::PreClassification],
            rank_hidden: 10,
            rank_pre_classification: 18,
            lora_alpha: None,
            adapter_rank: 8,
            bits_per_param: 32,
            bandwidth_up_mbits: 5.0,
            bandwidth_down_mbits: 5.0,
            flops_rate: 1e9,
        }
    }
}

impl ExperimentSpec {
    /// Participants per round, defaulting per partition kind when unset.
    pub fn participants_resolved(&self) -> usize {
        self.participants.unwrap_or(match self.partition {
            PartitionKind::Pathological => 20,
            _ => 10,
        })
    }

    pub fn heterogeneity(&self) -> Heterogeneity {
        match self.partition {
            PartitionKind::Iid => Heterogeneity::Iid,
            PartitionKind::Dirichlet => Heterogeneity::Dirichlet {
                alpha: self.dirichlet_alpha,
            },
            PartitionKind::Pathological => Heterogeneity::Pathological {
                shards_per_client: self.shards_per_client,
            },
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            embedding_dim: self.embedding_dim,
            hidden_dims: self.hidden_dims.clone(),
            pre_classification_dim: self.pre_classification_dim,
            num_classes,
        }
    }

    pub fn to_fed_config(&self, seed: u64) -> FedConfig {
        FedConfig {
            algorithm: self.algorithm,
            n_clients: self.n_clients,
            participants: self.participants_resolved(),
            local_epochs: self.local_epochs,
            rounds_stage1: self.rounds_stage1,
            rounds_stage2: self.rounds_stage2,
            d1: self.d1,
            mask_scope: self.mask_scope,
            lora_roles: self.lora_placement.clone(),
            rank_hidden: self.rank_hidden,
            rank_pre_classification: self.rank_pre_classification,
            lora_alpha: self.lora_alpha,
            adapter_rank: self.adapter_rank,
            lr: self.lr,
            batch_size: self.batch_size,
            aggregation: self.aggregation,
            seed,
            bits_per_param: self.bits_per_param,
            eval_stride: self.eval_stride,
            threads: self.threads,
        }
    }

    /// Launch-time validation beyond syntax: seed list, ranges, referenced
    /// files.
    pub fn validate_for_launch(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: list must be nonempty".to_string()));
        }
        if let DataSource::Csv(path) = &self.dataset {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "dataset: file {} does not exist",
                    path.display()
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction: {} must be in (0, 1)",
                self.train_fraction
            )));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "hidden_dims: need at least one hidden layer".to_string(),
            ));
        }
        self.to_fed_config(self.seeds[0]).validate()
    }

    /// Canonical printed form; `parse_config_str` inverts it exactly.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fedpeft experiment config v1");
        let _ = writeln!(s);
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "algorithm = {}", self.algorithm);
        let _ = writeln!(s, "seeds = {}", join_u64(&self.seeds));
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "eval_stride = {}", self.eval_stride);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(
            s,
            "dataset = {}",
            match &self.dataset {
                DataSource::Synth => "synth".to_string(),
                DataSource::Csv(p) => p.display().to_string(),
            }
        );
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "dims = {}", self.dims);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(s);
        let _ = writeln!(s, "[partition]");
        let _ = writeln!(s, "partition = {}", self.partition.as_str());
        let _ = writeln!(s, "dirichlet_alpha = {}", self.dirichlet_alpha);
        let _ = writeln!(s, "shards_per_client = {}", self.shards_per_client);
        let _ = writeln!(s);
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "hidden_dims = {}", join_usize(&self.hidden_dims));
        let _ = writeln!(s, "pre_classification_dim = {}", self.pre_classification_dim);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "pretrain_lr = {}", self.pretrain_lr);
        let _ = writeln!(s, "pretrain_samples = {}", self.pretrain_samples);
        let _ = writeln!(s, "pretrain_seed = {}", self.pretrain_seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[federated]");
        let _ = writeln!(s, "n_clients = {}", self.n_clients);
        let _ = writeln!(
            s,
            "participants = {}",
            self.participants
                .map_or_else(|| "auto".to_string(), |k| k.to_string())
        );
        let _ = writeln!(s, "local_epochs = {}", self.local_epochs);
        let _ = writeln!(s, "rounds_stage1 = {}", self.rounds_stage1);
        let _ = writeln!(s, "rounds_stage2 = {}", self.rounds_stage2);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(
            s,
            "aggregation = {}",
            match self.aggregation {
                Aggregation::Uniform => "uniform",
                Aggregation::Weighted => "weighted",
            }
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "[peft]");
        let _ = writeln!(s, "d1 = {}", self.d1);
        let _ = writeln!(
            s,
            "mask_scope = {}",
            match self.mask_scope {
                MaskScope::Inner => "inner",
                MaskScope::All => "all",
            }
        );
        let _ = writeln!(s, "lora_placement = {}", join_roles(&self.lora_placement));
        let _ = writeln!(s, "rank_hidden = {}", self.rank_hidden);
        let _ = writeln!(s, "rank_pre_classification = {}", self.rank_pre_classification);
        let _ = writeln!(
            s,
            "lora_alpha = {}",
            self.lora_alpha
                .map_or_else(|| "rank".to_string(), |a| a.to_string())
        );
        let _ = writeln!(s, "adapter_rank = {}", self.adapter_rank);
        let _ = writeln!(s);
        let _ = writeln!(s, "[costs]");
        let _ = writeln!(s, "bits_per_param = {}", self.bits_per_param);
        let _ = writeln!(s, "bandwidth_up_mbits = {}", self.bandwidth_up_mbits);
        let _ = writeln!(s, "bandwidth_down_mbits = {}", self.bandwidth_down_mbits);
        let _ = writeln!(s, "flops_rate = {}", self.flops_rate);
        s
    }
}

fn join_u64(values: &[u64]) -> String {
    values
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn join_roles(roles: &[LayerRole]) -> String {
    roles
        .iter()
        .map(|r| r.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_role(s: &str) -> Result<LayerRole> {
    Ok(match s {
        "embedding" => LayerRole::Embedding,
        "hidden" => LayerRole::Hidden,
        "pre_classification" => LayerRole::PreClassification,
        "classification" => LayerRole::Classification,
        _ => return Err(Error::Config(format!("unknown layer role `{s}`"))),
    })
}

/// Parse a config from text; unset keys keep their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::default();
    let mut seen: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue; // cosmetic section header
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
        seen.push(key.to_string());
        apply_key(&mut spec, key, value)?;
    }
    Ok(spec)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn apply_key(spec: &mut ExperimentSpec, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: invalid value `{value}`")))
    }
    fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: invalid entry `{s}`")))
            })
            .collect()
    }

    match key {
        "algorithm" => spec.algorithm = value.parse()?,
        "seeds" => spec.seeds = list(key, value)?,
        "out_dir" => spec.out_dir = PathBuf::from(value),
        "eval_stride" => spec.eval_stride = num(key, value)?,
        "threads" => spec.threads = num(key, value)?,
        "dataset" => {
            spec.dataset = if value == "synth" {
                DataSource::Synth
            } else {
                DataSource::Csv(PathBuf::from(value))
            }
        }
        "num_classes" => spec.num_classes = num(key, value)?,
        "dims" => spec.dims = num(key, value)?,
        "samples" => spec.samples = num(key, value)?,
        "data_seed" => spec.data_seed = num(key, value)?,
        "train_fraction" => spec.train_fraction = num(key, value)?,
        "partition" => {
            spec.partition = match value {
                "iid" => PartitionKind::Iid,
                "dirichlet" => PartitionKind::Dirichlet,
                "pathological" => PartitionKind::Pathological,
                _ => {
                    return Err(Error::Config(format!(
                        "key `partition`: unknown kind `{value}`"
                    )))
                }
            }
        }
        "dirichlet_alpha" => spec.dirichlet_alpha = num(key, value)?,
        "shards_per_client" => spec.shards_per_client = num(key, value)?,
        "embedding_dim" => spec.embedding_dim = num(key, value)?,
        "hidden_dims" => spec.hidden_dims = list(key, value)?,
        "pre_classification_dim" => spec.pre_classification_dim = num(key, value)?,
        "pretrain_epochs" => spec.pretrain_epochs = num(key, value)?,
        "pretrain_lr" => spec.pretrain_lr = num(key, value)?,
        "pretrain_samples" => spec.pretrain_samples = num(key, value)?,
        "pretrain_seed" => spec.pretrain_seed = num(key, value)?,
        "n_clients" => spec.n_clients = num(key, value)?,
        "participants" => {
            spec.participants = if value == "auto" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        "local_epochs" => spec.local_epochs = num(key, value)?,
        "rounds_stage1" => spec.rounds_stage1 = num(key, value)?,
        "rounds_stage2" => spec.rounds_stage2 = num(key, value)?,
        "lr" => spec.lr = num(key, value)?,
        "batch_size" => spec.batch_size = num(key, value)?,
        "aggregation" => {
            spec.aggregation = match value {
                "uniform" => Aggregation::Uniform,
                "weighted" => Aggregation::Weighted,
                _ => {
                    return Err(Error::Config(format!(
                        "key `aggregation`: unknown mode `{value}`"
                    )))
                }
            }
        }
        "d1" => spec.d1 = num(key, value)?,
        "mask_scope" => {
            spec.mask_scope = match value {
                "inner" => MaskScope::Inner,
                "all" => MaskScope::All,
                _ => {
                    return Err(Error::Config(format!(
                        "key `mask_scope`: unknown scope `{value}`"
                    )))
                }
            }
        }
        "lora_placement" => {
            spec.lora_placement = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_role)
                .collect::<Result<Vec<_>>>()?
        }
        "rank_hidden" => spec.rank_hidden = num(key, value)?,
        "rank_pre_classification" => spec.rank_pre_classification = num(key, value)?,
        "lora_alpha" => {
            spec.lora_alpha = if value == "rank" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        "adapter_rank" => spec.adapter_rank = num(key, value)?,
        "bits_per_param" => spec.bits_per_param = num(key, value)?,
        "bandwidth_up_mbits" => spec.bandwidth_up_mbits = num(key, value)?,
        "bandwidth_down_mbits" => spec.bandwidth_down_mbits = num(key, value)?,
        "flops_rate" => spec.flops_rate = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        let spec = parse_config_str("").unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        // Printed form is deterministic.
        assert_eq!(spec.to_config_string(), spec.to_config_string());
    }

    #[test]
    fn round_trip_default_and_modified() {
        let spec = ExperimentSpec::default();
        assert_eq!(parse_config_str(&spec.to_config_string()).unwrap(), spec);

        let mut spec = ExperimentSpec::default();
        spec.algorithm = Algorithm::Flora;
        spec.seeds = vec![9];
        spec.participants = Some(4);
        spec.lora_alpha = Some(2.5);
        spec.dataset = DataSource::Csv(PathBuf::from("data/toy.csv"));
        spec.partition = PartitionKind::Dirichlet;
        spec.dirichlet_alpha = 0.1;
        spec.hidden_dims = vec![16, 16, 16];
        assert_eq!(parse_config_str(&spec.to_config_string()).unwrap(), spec);
    }

    #[test]
    fn paper_style_keys_parse() {
        let spec = parse_config_str("algorithm = slora\nd1 = 0.10\n").unwrap();
        assert_eq!(spec.algorithm, Algorithm::Slora);
        assert_eq!(spec.d1, 0.10);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = parse_config_str("no_such_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn invalid_value_is_config_error_with_key() {
        let err = parse_config_str("batch_size = banana\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        let err = parse_config_str("algorithm = sgd\n").unwrap_err();
        assert!(err.to_string().contains("sgd"));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_config_str("lr = 0.1\nlr = 0.2\n").is_err());
    }

    #[test]
    fn participants_default_depends_on_partition() {
        let mut spec = ExperimentSpec::default();
        spec.partition = PartitionKind::Pathological;
        assert_eq!(spec.participants_resolved(), 20);
        spec.partition = PartitionKind::Dirichlet;
        assert_eq!(spec.participants_resolved(), 10);
        spec.participants = Some(3);
        assert_eq!(spec.participants_resolved(), 3);
    }

    #[test]
    fn launch_validation_catches_missing_csv() {
        let mut spec = ExperimentSpec::default();
        spec.dataset = DataSource::Csv(PathBuf::from("/definitely/not/here.csv"));
        assert!(matches!(
            spec.validate_for_launch(),
            Err(Error::Config(_))
        ));
    }
}
