//! Synchronous federated round engine and two-stage orchestration.
//!
//! Each round the server samples `K` of `N` clients, ships them the current
//! trainable state, lets every client run `E` epochs of local mini-batch
//! SGD on its own shard, and averages the returned deltas (FedAvg). The
//! primed variants run two stages: dense rounds behind a mask first, then a
//! truncated-SVD decomposition of the accumulated update seeds LoRA blocks
//! that the second stage fine-tunes against the frozen starting weights.
//!
//! Within a round, client computations are independent and may run on a
//! thread pool; every random choice is keyed by `(seed, round, client)`, and
//! updates are reduced in ascending client order, so the outcome is
//! bit-identical whether clients run sequentially or concurrently.

use crate::costs::{flops_estimate, sparse_comm_bits, CostLedger, RoundCosts};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{self, LayerRole, ModelParams};
use crate::peft::{
    adapter_attach, bitfit_mask, lora_init_random, lora_prime, mask_generate_scoped,
    AdapterPlacement, MaskScope, PeftDelta, PeftModel, RankPlan, SparseMask,
};
use crate::rng::{domain, stream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Fine-tuning method driven by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fft,
    Lora,
    Sft,
    Bitfit,
    Houlsby,
    Pfeiffer,
    Flora,
    Slora,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Fft,
        Algorithm::Lora,
        Algorithm::Sft,
        Algorithm::Bitfit,
        Algorithm::Houlsby,
        Algorithm::Pfeiffer,
        Algorithm::Flora,
        Algorithm::Slora,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Fft => "fft",
            Algorithm::Lora => "lora",
            Algorithm::Sft => "sft",
            Algorithm::Bitfit => "bitfit",
            Algorithm::Houlsby => "houlsby",
            Algorithm::Pfeiffer => "pfeiffer",
            Algorithm::Flora => "flora",
            Algorithm::Slora => "slora",
        }
    }

    /// Two-stage methods run dense rounds before the LoRA stage.
    pub fn is_two_stage(&self) -> bool {
        matches!(self, Algorithm::Flora | Algorithm::Slora)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the server combines client deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain mean over participants.
    Uniform,
    /// Sample-count-weighted mean.
    Weighted,
}

/// Everything the round engine needs to run one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    /// Total clients (N).
    pub n_clients: usize,
    /// Participants per round (K).
    pub participants: usize,
    /// Local epochs per round (E).
    pub local_epochs: usize,
    /// Dense-stage rounds (used by fft, sft and stage 1 of flora/slora).
    pub rounds_stage1: usize,
    /// LoRA-style rounds (used by lora, bitfit, adapters and stage 2).
    pub rounds_stage2: usize,
    /// Stage-1 mask density for sft/slora.
    pub d1: f64,
    /// Layers the sparse mask may touch.
    pub mask_scope: MaskScope,
    /// Roles that receive LoRA blocks.
    pub lora_roles: Vec<LayerRole>,
    pub rank_hidden: usize,
    pub rank_pre_classification: usize,
    /// LoRA scaling numerator; defaults to the per-block rank (unit scale).
    pub lora_alpha: Option<f64>,
    pub adapter_rank: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub bits_per_param: u64,
    /// Evaluate test accuracy every `eval_stride` rounds (and on the last
    /// round of each stage); other rounds carry the previous value.
    pub eval_stride: usize,
    /// Worker threads for client training; 1 runs sequentially.
    pub threads: usize,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.participants == 0 || self.participants > self.n_clients {
            return Err(Error::Config(format!(
                "need 1 <= participants <= n_clients, got {} of {}",
                self.participants, self.n_clients
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval_stride must be >= 1".to_string()));
        }
        if !(self.d1 > 0.0 && self.d1 <= 1.0) {
            return Err(Error::Config(format!("d1 {} must be in (0, 1]", self.d1)));
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub delta: PeftDelta,
    pub sample_count: usize,
}

/// Per-round log entry; the append-only sequence feeds the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub stage: u8,
    pub participants: Vec<usize>,
    pub accuracy: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    pub cum_bits: u64,
    pub cum_flops: u64,
}

/// Uniform client sample without replacement, seeded per `(seed, round)`,
/// returned in ascending id order.
pub fn sample_clients(round: u64, n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "cannot sample {k} of {n} clients"
        )));
    }
    let mut rng = stream(seed, &[domain::CLIENT_SAMPLE, round]);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `E` epochs of seeded-shuffled mini-batch SGD on the client's shard,
/// returning the trainable-state delta against the received state.
pub fn local_train(
    received: &PeftModel,
    ds: &Dataset,
    indices: &[usize],
    local_epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    round: u64,
    client_id: usize,
) -> Result<RoundUpdate> {
    if indices.is_empty() {
        return Err(Error::Partition(format!("client {client_id} has no samples")));
    }
    let mut local = received.clone();
    let mut rng = stream(seed, &[domain::LOCAL_SHUFFLE, round, client_id as u64]);
    let mut order = indices.to_vec();
    for _ in 0..local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = ds.features_for(chunk);
            let labels = ds.labels_for(chunk);
            let (_, grads) = local.backward_batch(&batch, &labels)?;
            local.sgd_step(&grads, lr)?;
        }
    }
    Ok(RoundUpdate {
        client_id,
        delta: local.delta_from(received)?,
        sample_count: indices.len(),
    })
}

/// Combine updates into one delta, reducing in ascending client-id order.
pub fn aggregate(updates: &[RoundUpdate], mode: Aggregation) -> Result<PeftDelta> {
    if updates.is_empty() {
        return Err(Error::Protocol("aggregate of zero updates".to_string()));
    }
    let mut sorted: Vec<&RoundUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let weights: Vec<f64> = match mode {
        Aggregation::Uniform => vec![1.0; sorted.len()],
        Aggregation::Weighted => sorted.iter().map(|u| u.sample_count as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    let mut acc = sorted[0].delta.clone();
    acc.scale_in_place(weights[0] / total);
    for (update, &w) in sorted.iter().zip(&weights).skip(1) {
        acc.add_scaled(&update.delta, w / total)?;
    }
    Ok(acc)
}

/// Everything an experiment produces: the per-round log, cost ledger, and
/// final trainable state.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub algorithm: Algorithm,
    pub records: Vec<RoundRecord>,
    pub ledger: CostLedger,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub trainable_count: usize,
    pub trainable_density: f64,
    pub total_rounds: usize,
    /// Dense model at the end of stage 1 (two-stage methods only).
    pub stage1_model: Option<ModelParams>,
    pub final_state: PeftModel,
}

struct Engine<'a> {
    cfg: &'a FedConfig,
    ds: &'a Dataset,
    test_indices: &'a [usize],
    partition: &'a Partition,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a FedConfig,
        ds: &'a Dataset,
        test_indices: &'a [usize],
        partition: &'a Partition,
    ) -> Result<Engine<'a>> {
        cfg.validate()?;
        if partition.num_clients() != cfg.n_clients {
            return Err(Error::Config(format!(
                "partition has {} clients, config expects {}",
                partition.num_clients(),
                cfg.n_clients
            )));
        }
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Engine {
            cfg,
            ds,
            test_indices,
            partition,
            pool,
        })
    }

    fn client_updates(
        &self,
        server: &PeftModel,
        ids: &[usize],
        global_round: u64,
    ) -> Result<Vec<RoundUpdate>> {
        let run = |&id: &usize| {
            local_train(
                server,
                self.ds,
                self.partition.client(id),
                self.cfg.local_epochs,
                self.cfg.lr,
                self.cfg.batch_size,
                self.cfg.seed,
                global_round,
                id,
            )
        };
        match &self.pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                ids.par_iter().map(run).collect::<Result<Vec<_>>>()
            }),
            None => ids.iter().map(run).collect(),
        }
    }

    /// Run `rounds` federated rounds on `server`, appending records and
    /// costs. `round_offset` keeps global round numbering and client
    /// sampling streams distinct across stages.
    fn run_rounds(
        &self,
        server: &mut PeftModel,
        stage: u8,
        round_offset: usize,
        rounds: usize,
        records: &mut Vec<RoundRecord>,
        ledger: &mut CostLedger,
        last_accuracy: &mut f64,
    ) -> Result<()> {
        let trainable = server.trainable_count() as u64;
        let total_params = server.base().total_params() as u64;
        let per_client_bits = trainable * self.cfg.bits_per_param;
        let sparse_per_client = match server {
            PeftModel::Dense { .. } => {
                sparse_comm_bits(trainable, total_params, self.cfg.bits_per_param)
            }
            // No sparsity to exploit: value encoding is the only one.
            _ => per_client_bits,
        };
        for r in 1..=rounds {
            let global_round = round_offset + r;
            let ids = sample_clients(
                global_round as u64,
                self.cfg.n_clients,
                self.cfg.participants,
                self.cfg.seed,
            )?;
            let updates = self.client_updates(server, &ids, global_round as u64)?;
            let delta = aggregate(&updates, self.cfg.aggregation)?;
            server.apply_delta(&delta, 1.0)?;

            let k = ids.len() as u64;
            let epoch_flops: Vec<u64> = ids
                .iter()
                .map(|&id| {
                    let samples = self.partition.client(id).len() as u64;
                    flops_estimate(server.base(), server, samples).total()
                        * self.cfg.local_epochs as u64
                })
                .collect();
            let costs = RoundCosts {
                bits_up: per_client_bits * k,
                bits_down: per_client_bits * k,
                bits_up_sparse: sparse_per_client * k,
                flops: epoch_flops.iter().sum(),
                per_client_bits_up: per_client_bits,
                per_client_bits_down: per_client_bits,
                max_client_flops: epoch_flops.iter().copied().max().unwrap_or(0),
            };
            ledger.record(costs);

            if r % self.cfg.eval_stride == 0 || r == rounds {
                *last_accuracy = server.accuracy(self.ds, Some(self.test_indices))?;
            }
            records.push(RoundRecord {
                round: global_round,
                stage,
                participants: ids,
                accuracy: *last_accuracy,
                bits_up: costs.bits_up,
                bits_down: costs.bits_down,
                cum_bits: ledger.cum_bits(),
                cum_flops: ledger.cum_flops,
            });
        }
        Ok(())
    }
}

/// Stage-1 mask for the given algorithm: all-ones for the full fine-tuning
/// branch, a seeded uniform-density mask for the sparse branch.
pub fn stage1_mask(cfg: &FedConfig, model: &ModelParams) -> Result<SparseMask> {
    match cfg.algorithm {
        Algorithm::Slora | Algorithm::Sft => {
            mask_generate_scoped(model, cfg.d1, cfg.seed, cfg.mask_scope)
        }
        _ => Ok(SparseMask::full(model)),
    }
}

/// Dense federated rounds (stage 1): returns the final server model.
pub fn run_stage1(
    cfg: &FedConfig,
    w0: &ModelParams,
    ds: &Dataset,
    test_indices: &[usize],
    partition: &Partition,
    records: &mut Vec<RoundRecord>,
    ledger: &mut CostLedger,
) -> Result<ModelParams> {
    let engine = Engine::new(cfg, ds, test_indices, partition)?;
    let mask = stage1_mask(cfg, w0)?;
    let mut server = PeftModel::Dense {
        model: w0.clone(),
        mask,
    };
    let mut last_accuracy = server.accuracy(ds, Some(test_indices))?;
    engine.run_rounds(
        &mut server,
        1,
        0,
        cfg.rounds_stage1,
        records,
        ledger,
        &mut last_accuracy,
    )?;
    match server {
        PeftModel::Dense { model, .. } => Ok(model),
        _ => unreachable!("stage 1 state is dense"),
    }
}

/// Build the primed stage-2 state from an explicit rank plan: blocks from the
/// truncated SVD of `W_R - W_0` per planned layer, base weights frozen at
/// `W_0`, planned-layer biases carried over from `W_R` (bias updates are
/// dense vectors; there is nothing to decompose).
pub fn prime_stage2_with_plan(
    w0: &ModelParams,
    w_r: &ModelParams,
    plan: &RankPlan,
    alpha: Option<f64>,
) -> Result<PeftModel> {
    let dw = model::delta(w_r, w0)?;
    let blocks = lora_prime(&dw, plan, alpha)?;
    let mut base = w0.clone();
    for &(idx, _) in &plan.entries {
        base.layer_mut(idx).bias = w_r.layer(idx).bias.clone();
    }
    Ok(PeftModel::Lora { base, blocks })
}

/// Primed stage-2 state using the configured rank plan.
pub fn prime_stage2(cfg: &FedConfig, w0: &ModelParams, w_r: &ModelParams) -> Result<PeftModel> {
    let plan = RankPlan::by_role(
        w0,
        &cfg.lora_roles,
        cfg.rank_hidden,
        cfg.rank_pre_classification,
    );
    prime_stage2_with_plan(w0, w_r, &plan, cfg.lora_alpha)
}

/// LoRA rounds (stage 2) from a primed or fresh state.
pub fn run_stage2(
    cfg: &FedConfig,
    state: PeftModel,
    ds: &Dataset,
    test_indices: &[usize],
    partition: &Partition,
    round_offset: usize,
    records: &mut Vec<RoundRecord>,
    ledger: &mut CostLedger,
) -> Result<PeftModel> {
    let engine = Engine::new(cfg, ds, test_indices, partition)?;
    let mut server = state;
    let mut last_accuracy = server.accuracy(ds, Some(test_indices))?;
    engine.run_rounds(
        &mut server,
        2,
        round_offset,
        cfg.rounds_stage2,
        records,
        ledger,
        &mut last_accuracy,
    )?;
    Ok(server)
}

/// Fresh (unprimed) trainable state for the single-stage methods.
pub fn initial_state(cfg: &FedConfig, w0: &ModelParams) -> Result<PeftModel> {
    match cfg.algorithm {
        Algorithm::Fft | Algorithm::Sft => Ok(PeftModel::Dense {
            model: w0.clone(),
            mask: stage1_mask(cfg, w0)?,
        }),
        Algorithm::Bitfit => Ok(PeftModel::Dense {
            model: w0.clone(),
            mask: bitfit_mask(w0),
        }),
        Algorithm::Lora => {
            let plan = RankPlan::by_role(
                w0,
                &cfg.lora_roles,
                cfg.rank_hidden,
                cfg.rank_pre_classification,
            );
            let blocks = plan
                .entries
                .iter()
                .map(|&(idx, r)| {
                    lora_init_random(
                        w0.layer(idx),
                        idx,
                        r,
                        cfg.lora_alpha.unwrap_or(r as f64),
                        cfg.seed,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PeftModel::Lora {
                base: w0.clone(),
                blocks,
            })
        }
        Algorithm::Houlsby => Ok(PeftModel::Adapter {
            base: w0.clone(),
            sites: adapter_attach(w0, cfg.adapter_rank, AdapterPlacement::AfterEachHidden, cfg.seed)?,
        }),
        Algorithm::Pfeiffer => Ok(PeftModel::Adapter {
            base: w0.clone(),
            sites: adapter_attach(w0, cfg.adapter_rank, AdapterPlacement::AfterLastHidden, cfg.seed)?,
        }),
        Algorithm::Flora | Algorithm::Slora => Err(Error::Config(
            "two-stage methods start from run_experiment".to_string(),
        )),
    }
}

/// Run one full experiment for the configured algorithm.
///
/// Dispatch: `fft`/`sft` run `rounds_stage1` dense rounds; `lora`, `bitfit`
/// and the adapter methods run `rounds_stage2` rounds from scratch;
/// `flora`/`slora` run stage 1, prime LoRA blocks from the accumulated
/// update, then run stage 2.
pub fn run_experiment(
    cfg: &FedConfig,
    w0: &ModelParams,
    ds: &Dataset,
    test_indices: &[usize],
    partition: &Partition,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut ledger = CostLedger::default();
    let (final_state, stage1_model) = match cfg.algorithm {
        Algorithm::Fft | Algorithm::Sft => {
            let w_r = run_stage1(cfg, w0, ds, test_indices, partition, &mut records, &mut ledger)?;
            let mask = stage1_mask(cfg, w0)?;
            (
                PeftModel::Dense {
                    model: w_r,
                    mask,
                },
                None,
            )
        }
        Algorithm::Lora | Algorithm::Bitfit | Algorithm::Houlsby | Algorithm::Pfeiffer => {
            let state = initial_state(cfg, w0)?;
            let final_state = run_stage2(
                cfg,
                state,
                ds,
                test_indices,
                partition,
                0,
                &mut records,
                &mut ledger,
            )?;
            (final_state, None)
        }
        Algorithm::Flora | Algorithm::Slora => {
            let w_r = run_stage1(cfg, w0, ds, test_indices, partition, &mut records, &mut ledger)?;
            let primed = prime_stage2(cfg, w0, &w_r)?;
            let final_state = run_stage2(
                cfg,
                primed,
                ds,
                test_indices,
                partition,
                cfg.rounds_stage1,
                &mut records,
                &mut ledger,
            )?;
            (final_state, Some(w_r))
        }
    };

    let final_accuracy = match records.last() {
        Some(rec) => rec.accuracy,
        None => final_state.accuracy(ds, Some(test_indices))?,
    };
    let best_accuracy = records
        .iter()
        .map(|r| r.accuracy)
        .fold(final_accuracy, f64::max);
    Ok(ExperimentReport {
        algorithm: cfg.algorithm,
        total_rounds: records.len(),
        trainable_count: final_state.trainable_count(),
        trainable_density: final_state.trainable_density(),
        final_accuracy,
        best_accuracy,
        records,
        ledger,
        stage1_model,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, synth_generate};
    use crate::model::{pretrain, ModelConfig};

    fn toy_setup() -> (FedConfig, ModelParams, Dataset, Vec<usize>, Partition) {
        let cfg = FedConfig {
            algorithm: Algorithm::Fft,
            n_clients: 4,
            participants: 2,
            local_epochs: 1,
            rounds_stage1: 2,
            rounds_stage2: 2,
            d1: 0.10,
            mask_scope: MaskScope::Inner,
            lora_roles: RankPlan::default_roles(),
            rank_hidden: 2,
            rank_pre_classification: 3,
            lora_alpha: None,
            adapter_rank: 4,
            lr: 0.1,
            batch_size: 8,
            aggregation: Aggregation::Uniform,
            seed: 33,
            bits_per_param: 32,
            eval_stride: 1,
            threads: 1,
        };
        let model_cfg = ModelConfig {
            input_dim: 6,
            embedding_dim: 6,
            hidden_dims: vec![8],
            pre_classification_dim: 8,
            num_classes: 4,
        };
        let ds = synth_generate(4, 6, 80, 3).unwrap();
        let source = synth_generate(4, 6, 80, 4).unwrap();
        let w0 = pretrain(&model_cfg, &source, 2, 0.1, 19).unwrap();
        let train: Vec<usize> = (0..60).collect();
        let test: Vec<usize> = (60..80).collect();
        let partition = partition_iid(&train, 4, 7).unwrap();
        (cfg, w0, ds, test, partition)
    }

    #[test]
    fn sample_clients_full_and_deterministic() {
        assert_eq!(sample_clients(3, 5, 5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(3, 100, 10, 1).unwrap(), sample_clients(3, 100, 10, 1).unwrap());
        assert_ne!(sample_clients(3, 100, 10, 1).unwrap(), sample_clients(4, 100, 10, 1).unwrap());
        assert!(matches!(sample_clients(0, 3, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_zero_delta() {
        let (cfg, w0, ds, _, partition) = toy_setup();
        let state = PeftModel::Dense {
            model: w0.clone(),
            mask: SparseMask::full(&w0),
        };
        let update = local_train(
            &state,
            &ds,
            partition.client(0),
            0,
            cfg.lr,
            cfg.batch_size,
            cfg.seed,
            1,
            0,
        )
        .unwrap();
        let PeftDelta::Dense(d) = update.delta else {
            panic!("dense update expected")
        };
        assert!(d.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn aggregate_basics() {
        let (_, w0, ds, _, partition) = toy_setup();
        let state = PeftModel::Dense {
            model: w0.clone(),
            mask: SparseMask::full(&w0),
        };
        let update = local_train(&state, &ds, partition.client(0), 1, 0.1, 8, 33, 1, 0).unwrap();
        let one = aggregate(&[update.clone()], Aggregation::Uniform).unwrap();
        assert_eq!(one, update.delta);

        let mut opposite = update.clone();
        opposite.client_id = 1;
        opposite.delta.scale_in_place(-1.0);
        let two = aggregate(&[update, opposite], Aggregation::Uniform).unwrap();
        let PeftDelta::Dense(d) = two else { panic!() };
        assert!(d
            .weights
            .iter()
            .all(|w| w.data().iter().all(|&v| v.abs() < 1e-18)));

        assert!(matches!(
            aggregate(&[], Aggregation::Uniform),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn stage1_zero_rounds_returns_w0() {
        let (mut cfg, w0, ds, test, partition) = toy_setup();
        cfg.rounds_stage1 = 0;
        let mut records = Vec::new();
        let mut ledger = CostLedger::default();
        let w_r = run_stage1(&cfg, &w0, &ds, &test, &partition, &mut records, &mut ledger).unwrap();
        assert_eq!(w_r, w0);
        assert!(records.is_empty());
    }

    #[test]
    fn flora_stage1_mask_is_dense() {
        let (mut cfg, w0, _, _, _) = toy_setup();
        cfg.algorithm = Algorithm::Flora;
        let mask = stage1_mask(&cfg, &w0).unwrap();
        assert_eq!(mask.popcount(), w0.total_params());
        cfg.algorithm = Algorithm::Slora;
        let sparse = stage1_mask(&cfg, &w0).unwrap();
        assert!(sparse.popcount() < w0.total_params());
    }

    #[test]
    fn run_experiment_round_accounting() {
        let (mut cfg, w0, ds, test, partition) = toy_setup();
        cfg.algorithm = Algorithm::Slora;
        let report = run_experiment(&cfg, &w0, &ds, &test, &partition).unwrap();
        assert_eq!(report.total_rounds, cfg.rounds_stage1 + cfg.rounds_stage2);
        assert_eq!(report.records.len(), report.total_rounds);
        assert!(report.stage1_model.is_some());
        assert_eq!(
            report.records.iter().filter(|r| r.stage == 1).count(),
            cfg.rounds_stage1
        );
        // Rounds are numbered consecutively across stages.
        let rounds: Vec<usize> = report.records.iter().map(|r| r.round).collect();
        assert_eq!(rounds, (1..=report.total_rounds).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_two_stage_initial_state_is_config_error() {
        let (mut cfg, w0, _, _, _) = toy_setup();
        cfg.algorithm = Algorithm::Slora;
        assert!(matches!(initial_state(&cfg, &w0), Err(Error::Config(_))));
    }
}
