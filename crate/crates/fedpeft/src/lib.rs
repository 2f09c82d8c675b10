//! Federated parameter-efficient fine-tuning simulator.
//!
//! Simulates FedAvg-style fine-tuning of a small dense classifier under
//! several parameter-efficiency regimes — full fine-tuning, LoRA, sparse
//! fine-tuning behind a server-seeded random mask, BitFit, serial bottleneck
//! adapters — plus the two-stage primed variants FLoRA and SLoRA, where the
//! accumulated stage-1 update is compressed by a truncated SVD into LoRA
//! factors that initialize stage 2.
//!
//! The pieces compose directly (see `examples/` for one runnable program per
//! capability):
//!
//! * [`linalg`] — dense matrices and a deterministic truncated SVD
//! * [`model`] — a small dense classifier with manual forward/backward
//! * [`peft`] — LoRA blocks, sparse masks, adapters, trainable-set logic
//! * [`data`] — synthetic/CSV datasets and non-IID client partitioners
//! * [`fed`] — the synchronous round engine and two-stage orchestration
//! * [`costs`] — analytic communication/computation/wall-clock accounting
//! * [`checkpoint`] — versioned binary model/mask/block dumps
//! * [`config`] / [`harness`] — experiment specs, sweeps, comparisons
//!
//! Everything is seed-deterministic: a spec plus a seed fixes every output
//! byte, independent of thread count.

pub mod checkpoint;
pub mod config;
pub mod costs;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod peft;
pub mod rng;

pub use config::{DataSource, ExperimentSpec, PartitionKind};
pub use data::{Dataset, Heterogeneity, Partition};
pub use error::{Error, Result};
pub use fed::{Aggregation, Algorithm, FedConfig, RoundRecord};
pub use linalg::{svd, truncated_factors, Matrix, SvdResult};
pub use model::{Activation, DenseLayer, LayerRole, ModelConfig, ModelParams, ParamDelta};
pub use peft::{
    AdapterPlacement, AdapterSite, LoraBlock, MaskScope, PeftDelta, PeftModel, RankPlan,
    SparseMask,
};
