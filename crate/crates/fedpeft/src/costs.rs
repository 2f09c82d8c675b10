//! Analytic communication, computation and wall-clock accounting.
//!
//! Communication counts only the values a client and server actually
//! exchange: the trainable parameters, dense-packed at `bits_per_param`
//! (positions are derivable from the shared seed, so masks cost nothing).
//! For sparse updates an `(index, value)` encoding is also reported, at
//! `popcount * (bits_per_param + ceil(log2(total_params)))` bits.
//!
//! Computation is a closed-form FLOP model counting matrix products only,
//! matching the instrumented kernel counter in `linalg`:
//!
//! * dense layer, per sample: `2 m n` forward, `4 m n` backward — `2 m n`
//!   for the weight gradient plus `2 m n` for the input gradient, which the
//!   first layer skips (gradients are computed densely and masked
//!   afterwards, so masked methods pay the dense price),
//! * LoRA block: `2 r (d + k)` extra forward, twice that backward (the
//!   input-gradient half drops its `2 r k` term on the first layer),
//! * adapter site: `4 r d` extra forward, twice that backward.
//!
//! Wall clock follows the synchronous-round critical path: per round, the
//! slowest sampled client's download + compute + upload time, summed over
//! rounds.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::peft::PeftModel;
use serde::Serialize;

pub const DEFAULT_BITS_PER_PARAM: u64 = 32;
/// Modeled link bandwidth, 5 Mbit/s each direction.
pub const DEFAULT_BANDWIDTH_BITS_PER_SEC: f64 = 5_000_000.0;
/// Modeled client compute rate in FLOPs/s.
pub const DEFAULT_FLOPS_PER_SEC: f64 = 1e9;

/// `update_params * participants * bits_per_param * directions`.
pub fn comm_bits(update_params: u64, participants: u64, bits_per_param: u64, directions: u64) -> u64 {
    update_params * participants * bits_per_param * directions
}

/// Bits for an `(index, value)` encoding of a sparse update.
pub fn sparse_comm_bits(popcount: u64, total_params: u64, bits_per_param: u64) -> u64 {
    popcount * (bits_per_param + index_bits(total_params))
}

/// `ceil(log2(total_params))` index bits per nonzero.
pub fn index_bits(total_params: u64) -> u64 {
    if total_params <= 1 {
        return 0;
    }
    64 - (total_params - 1).leading_zeros() as u64
}

/// FLOP totals for one pass over `samples` examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub forward: u64,
    pub backward: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

/// Closed-form FLOPs for one local epoch over `samples` examples.
pub fn flops_estimate(model: &ModelParams, state: &PeftModel, samples: u64) -> FlopsBreakdown {
    let mut forward = 0u64;
    let mut backward = 0u64;
    for (idx, layer) in model.layers().iter().enumerate() {
        let (m, n) = (layer.weight.rows() as u64, layer.weight.cols() as u64);
        forward += 2 * m * n;
        // Weight gradient always; input gradient except at the first layer.
        backward += 2 * m * n;
        if idx > 0 {
            backward += 2 * m * n;
        }
    }
    match state {
        PeftModel::Dense { .. } => {}
        PeftModel::Lora { blocks, .. } => {
            for block in blocks {
                let (d, k) = (block.b.rows() as u64, block.a.cols() as u64);
                let r = block.rank as u64;
                forward += 2 * r * (d + k);
                backward += 2 * r * (d + k) + 2 * r * d;
                if block.target_layer > 0 {
                    backward += 2 * r * k;
                }
            }
        }
        PeftModel::Adapter { sites, .. } => {
            for site in sites {
                let (d, r) = (site.dim() as u64, site.rank() as u64);
                forward += 4 * r * d;
                backward += 8 * r * d;
            }
        }
    }
    FlopsBreakdown {
        forward: forward * samples,
        backward: backward * samples,
    }
}

/// Per-round cost entry: totals across sampled clients plus the per-client
/// figures the wall-clock model needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundCosts {
    pub bits_up: u64,
    pub bits_down: u64,
    pub bits_up_sparse: u64,
    pub flops: u64,
    pub per_client_bits_up: u64,
    pub per_client_bits_down: u64,
    pub max_client_flops: u64,
}

/// Cumulative cost ledger; counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostLedger {
    pub rounds: Vec<RoundCosts>,
    pub cum_bits_up: u64,
    pub cum_bits_down: u64,
    pub cum_bits_up_sparse: u64,
    pub cum_flops: u64,
}

impl CostLedger {
    pub fn record(&mut self, round: RoundCosts) {
        self.cum_bits_up += round.bits_up;
        self.cum_bits_down += round.bits_down;
        self.cum_bits_up_sparse += round.bits_up_sparse;
        self.cum_flops += round.flops;
        self.rounds.push(round);
    }

    pub fn cum_bits(&self) -> u64 {
        self.cum_bits_up + self.cum_bits_down
    }

    /// Synchronous critical-path wall clock: per round, the slowest sampled
    /// client's download, compute and upload; summed over rounds.
    pub fn wallclock_model(
        &self,
        bandwidth_up_bits_per_sec: f64,
        bandwidth_down_bits_per_sec: f64,
        flops_per_sec: f64,
    ) -> Result<f64> {
        if !(bandwidth_up_bits_per_sec > 0.0
            && bandwidth_down_bits_per_sec > 0.0
            && flops_per_sec > 0.0)
        {
            return Err(Error::Config(
                "bandwidths and FLOP rate must be positive".to_string(),
            ));
        }
        Ok(self
            .rounds
            .iter()
            .map(|r| {
                r.per_client_bits_down as f64 / bandwidth_down_bits_per_sec
                    + r.max_client_flops as f64 / flops_per_sec
                    + r.per_client_bits_up as f64 / bandwidth_up_bits_per_sec
            })
            .sum())
    }
}

/// Human-auditable formula strings embedded in every JSON report.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CostModelDescription {
    pub comm_bits: String,
    pub sparse_bits: String,
    pub flops: String,
    pub wallclock: String,
    pub bits_per_param: u64,
}

impl CostModelDescription {
    pub fn new(bits_per_param: u64) -> Self {
        CostModelDescription {
            comm_bits: "trainable_params * participants * bits_per_param per direction (dense value encoding; positions derive from the shared seed)".to_string(),
            sparse_bits: "popcount * (bits_per_param + ceil(log2(total_params))) per participant uplink (index,value encoding)".to_string(),
            flops: "per sample: dense layer 2mn fwd + 4mn bwd; lora +2r(d+k) fwd, +4r(d+k) bwd; adapter +4rd fwd, +8rd bwd; matmuls only".to_string(),
            wallclock: "sum over rounds of max sampled client (bits_down/bw_down + flops/rate + bits_up/bw_up)".to_string(),
            bits_per_param,
        }
    }
}
