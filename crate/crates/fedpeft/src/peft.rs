//! Trainable-parameter restriction mechanisms.
//!
//! Four families share one interface here:
//!
//! * dense training behind a binary [`SparseMask`] (full fine-tuning is the
//!   all-ones mask; BitFit is the bias-only mask; sparse fine-tuning is a
//!   server-seeded random mask of uniform density),
//! * parallel low-rank [`LoraBlock`]s, `h = W0 x + (alpha/r) B A x`, either
//!   zero-initialized or primed from a truncated SVD of an accumulated
//!   update,
//! * serial bottleneck adapters with a residual connection.
//!
//! [`PeftModel`] wraps a frozen base model with one of these and exposes
//! forward/backward/step/delta so the federated engine can treat every
//! method uniformly. Backward always produces dense base gradients too (the
//! restriction happens at the step), which keeps gradient checks and FLOP
//! accounting uniform across methods.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{truncated_factors, Matrix};
use crate::model::{
    self, accuracy as model_accuracy, apply_activation, argmax, column_sums, forward, hadamard,
    layer_affine, softmax_cross_entropy, Activation, DenseLayer, LayerRole, ModelParams,
    ParamDelta,
};
use crate::rng::{domain, stream};
use rand::Rng;
use rand_distr::StandardNormal;

/// Standard deviation of the seeded Gaussian used for LoRA `A` and adapter
/// down-projection initialization.
pub const INIT_SIGMA: f64 = 0.02;

// ---------------------------------------------------------------------------
// LoRA blocks

/// Low-rank pair attached in parallel to one dense layer.
///
/// `a` is rank x in, `b` is out x rank; the block contributes
/// `(alpha / rank) * b * a * x` on top of the frozen layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
    pub target_layer: usize,
}

impl LoraBlock {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.a.cols() + self.b.rows())
    }
}

/// Which layers carry LoRA blocks and at what rank: `(layer index, rank)`
/// sorted by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPlan {
    pub entries: Vec<(usize, usize)>,
}

impl RankPlan {
    /// Plan blocks on every layer with one of the given roles, using
    /// `hidden_rank` everywhere except the pre-classification layer.
    pub fn by_role(
        model: &ModelParams,
        roles: &[LayerRole],
        hidden_rank: usize,
        pre_classification_rank: usize,
    ) -> RankPlan {
        let entries = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| roles.contains(&l.role))
            .map(|(i, l)| {
                let r = if l.role == LayerRole::PreClassification {
                    pre_classification_rank
                } else {
                    hidden_rank
                };
                (i, r)
            })
            .collect();
        RankPlan { entries }
    }

    /// Full-rank plan (`r = min(d, k)` per layer) over the given roles.
    pub fn full_rank(model: &ModelParams, roles: &[LayerRole]) -> RankPlan {
        let entries = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| roles.contains(&l.role))
            .map(|(i, l)| (i, l.weight.rows().min(l.weight.cols())))
            .collect();
        RankPlan { entries }
    }

    pub fn default_roles() -> Vec<LayerRole> {
        vec![LayerRole::Hidden, LayerRole::PreClassification]
    }
}

/// Fresh LoRA block: `a` seeded Gaussian, `b` zero, so the attached model is
/// a no-op at initialization.
pub fn lora_init_random(
    layer: &DenseLayer,
    target_layer: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraBlock> {
    let (d, k) = (layer.weight.rows(), layer.weight.cols());
    let max = d.min(k);
    if rank < 1 || rank > max {
        return Err(Error::rank_in(rank, max, format!("layer {target_layer}")));
    }
    let mut rng = stream(seed, &[domain::LORA_INIT, target_layer as u64]);
    let a = Matrix::from_fn(rank, k, |_, _| {
        INIT_SIGMA * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(LoraBlock {
        a,
        b: Matrix::zeros(d, rank),
        rank,
        alpha,
        target_layer,
    })
}

/// Single-vector modified forward pass of one adapted layer:
/// `W0 x + bias + (alpha/r) B (A x)`.
pub fn lora_forward(layer: &DenseLayer, block: &LoraBlock, x: &[f64]) -> Result<Vec<f64>> {
    let (d, k) = (layer.weight.rows(), layer.weight.cols());
    if x.len() != k {
        return Err(Error::shape(format!(
            "input of length {} for layer with {k} inputs",
            x.len()
        )));
    }
    if block.a.cols() != k || block.b.rows() != d {
        return Err(Error::shape("block does not fit layer".to_string()));
    }
    let mut mid = vec![0.0; block.rank];
    for (i, m) in mid.iter_mut().enumerate() {
        *m = x.iter().zip(block.a.row(i)).map(|(xv, av)| xv * av).sum();
    }
    let s = block.scaling();
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let base: f64 = x.iter().zip(layer.weight.row(i)).map(|(xv, wv)| xv * wv).sum();
        let extra: f64 = mid.iter().zip(block.b.row(i)).map(|(mv, bv)| mv * bv).sum();
        *o = base + layer.bias[i] + s * extra;
    }
    Ok(out)
}

/// Prime LoRA blocks from an accumulated update: per planned layer,
/// `(B, A) = truncated_factors(dW, r)` and `B` is rescaled by `r / alpha` so
/// the scaled forward pass reproduces the rank-r approximation of `dW`
/// regardless of the configured `alpha`.
///
/// `alpha` defaults to the per-layer rank (unit scaling) when not given.
pub fn lora_prime(
    delta: &ParamDelta,
    plan: &RankPlan,
    alpha: Option<f64>,
) -> Result<Vec<LoraBlock>> {
    let mut blocks = Vec::with_capacity(plan.entries.len());
    for &(layer_idx, rank) in &plan.entries {
        let dw = delta.weights.get(layer_idx).ok_or_else(|| {
            Error::shape(format!("rank plan names layer {layer_idx} outside the delta"))
        })?;
        let max = dw.rows().min(dw.cols());
        if rank < 1 || rank > max {
            return Err(Error::rank_in(rank, max, format!("layer {layer_idx}")));
        }
        let (b, a) = truncated_factors(dw, rank)?;
        let alpha = alpha.unwrap_or(rank as f64);
        let b = b.scale(rank as f64 / alpha);
        blocks.push(LoraBlock {
            a,
            b,
            rank,
            alpha,
            target_layer: layer_idx,
        });
    }
    Ok(blocks)
}

// ---------------------------------------------------------------------------
// Sparse masks

/// Which layers a density mask may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScope {
    /// Hidden and pre-classification layers only (mirrors LoRA placement).
    Inner,
    /// Every layer, embedding and classification included.
    All,
}

impl MaskScope {
    fn covers(self, role: LayerRole) -> bool {
        match self {
            MaskScope::All => true,
            MaskScope::Inner => {
                matches!(role, LayerRole::Hidden | LayerRole::PreClassification)
            }
        }
    }
}

/// Per-layer binary mask over weight and bias entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub weight: Vec<bool>,
    pub bias: Vec<bool>,
}

impl LayerMask {
    fn off(layer: &DenseLayer) -> LayerMask {
        LayerMask {
            weight: vec![false; layer.weight.rows() * layer.weight.cols()],
            bias: vec![false; layer.bias.len()],
        }
    }

    pub fn popcount(&self) -> usize {
        self.weight.iter().filter(|&&b| b).count() + self.bias.iter().filter(|&&b| b).count()
    }
}

/// Immutable binary mask congruent with a model's parameters, with exact
/// density bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    pub layers: Vec<LayerMask>,
    pub density: f64,
    pub seed: u64,
}

impl SparseMask {
    /// All-ones mask over every layer (the full fine-tuning branch).
    pub fn full(model: &ModelParams) -> SparseMask {
        SparseMask {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerMask {
                    weight: vec![true; l.weight.rows() * l.weight.cols()],
                    bias: vec![true; l.bias.len()],
                })
                .collect(),
            density: 1.0,
            seed: 0,
        }
    }

    pub fn popcount(&self) -> usize {
        self.layers.iter().map(LayerMask::popcount).sum()
    }

    pub fn congruent_with(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.num_layers()
            && self.layers.iter().zip(model.layers()).all(|(m, l)| {
                m.weight.len() == l.weight.rows() * l.weight.cols()
                    && m.bias.len() == l.bias.len()
            })
    }
}

/// Random data-independent binary mask with uniform density over the default
/// scope (hidden and pre-classification layers).
pub fn mask_generate(model: &ModelParams, density: f64, seed: u64) -> Result<SparseMask> {
    mask_generate_scoped(model, density, seed, MaskScope::Inner)
}

/// As [`mask_generate`], with explicit layer scope. Per covered layer,
/// exactly `round(density * size)` entries (at least one) are chosen
/// uniformly without replacement from a seeded per-layer stream.
pub fn mask_generate_scoped(
    model: &ModelParams,
    density: f64,
    seed: u64,
    scope: MaskScope,
) -> Result<SparseMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "mask density {density} must be in (0, 1]"
        )));
    }
    let mut layers = Vec::with_capacity(model.num_layers());
    for (idx, layer) in model.layers().iter().enumerate() {
        let mut mask = LayerMask::off(layer);
        if scope.covers(layer.role) {
            let wsize = mask.weight.len();
            let size = wsize + mask.bias.len();
            let want = ((density * size as f64).round() as usize).clamp(1, size);
            let mut rng = stream(seed, &[domain::MASK, idx as u64]);
            let chosen = rand::seq::index::sample(&mut rng, size, want);
            for pos in chosen.iter() {
                if pos < wsize {
                    mask.weight[pos] = true;
                } else {
                    mask.bias[pos - wsize] = true;
                }
            }
        }
        layers.push(mask);
    }
    Ok(SparseMask {
        layers,
        density,
        seed,
    })
}

/// Mask selecting exactly the bias entries of every layer.
pub fn bitfit_mask(model: &ModelParams) -> SparseMask {
    let layers: Vec<LayerMask> = model
        .layers()
        .iter()
        .map(|l| LayerMask {
            weight: vec![false; l.weight.rows() * l.weight.cols()],
            bias: vec![true; l.bias.len()],
        })
        .collect();
    let popcount: usize = layers.iter().map(LayerMask::popcount).sum();
    SparseMask {
        density: popcount as f64 / model.total_params() as f64,
        layers,
        seed: 0,
    }
}

/// One SGD step restricted to the mask support: entries with `mask = 1` move
/// by `-lr * grad`, the rest stay bit-identical to the input.
pub fn masked_step(
    model: &ModelParams,
    grads: &ParamDelta,
    mask: &SparseMask,
    lr: f64,
) -> Result<ModelParams> {
    if !grads.congruent_with(model) {
        return Err(Error::shape("gradients not congruent with model".to_string()));
    }
    if !mask.congruent_with(model) {
        return Err(Error::shape("mask not congruent with model".to_string()));
    }
    let mut out = model.clone();
    for idx in 0..out.num_layers() {
        let layer_mask = &mask.layers[idx];
        let layer = out.layer_mut(idx);
        for (pos, w) in layer.weight.data_mut().iter_mut().enumerate() {
            if layer_mask.weight[pos] {
                *w -= lr * grads.weights[idx].data()[pos];
            }
        }
        for (pos, b) in layer.bias.iter_mut().enumerate() {
            if layer_mask.bias[pos] {
                *b -= lr * grads.biases[idx][pos];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serial adapters

/// Where serial bottleneck adapters are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPlacement {
    /// One adapter after every hidden layer.
    AfterEachHidden,
    /// A single adapter after the last hidden layer.
    AfterLastHidden,
}

/// Serial bottleneck with residual connection inserted after one layer:
/// `y = x + up . relu(down . x + bias_down) + bias_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSite {
    pub after_layer: usize,
    pub down: Matrix,
    pub bias_down: Vec<f64>,
    pub up: Matrix,
    pub bias_up: Vec<f64>,
}

impl AdapterSite {
    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn dim(&self) -> usize {
        self.down.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() * self.rank() + self.dim() + self.rank()
    }
}

/// Attach adapters at the given placement: down-projections seeded Gaussian,
/// up-projections and biases zero, so attachment is a no-op at init.
pub fn adapter_attach(
    model: &ModelParams,
    rank: usize,
    placement: AdapterPlacement,
    seed: u64,
) -> Result<Vec<AdapterSite>> {
    if rank == 0 {
        return Err(Error::rank(0, usize::MAX));
    }
    let hidden = model.layers_with_role(LayerRole::Hidden);
    if hidden.is_empty() {
        return Err(Error::Config(
            "adapter placement needs at least one hidden layer".to_string(),
        ));
    }
    let targets: Vec<usize> = match placement {
        AdapterPlacement::AfterEachHidden => hidden,
        AdapterPlacement::AfterLastHidden => vec![*hidden.last().unwrap()],
    };
    Ok(targets
        .into_iter()
        .map(|after_layer| {
            let d = model.layer(after_layer).out_dim();
            let mut rng = stream(seed, &[domain::ADAPTER_INIT, after_layer as u64]);
            AdapterSite {
                after_layer,
                down: Matrix::from_fn(rank, d, |_, _| {
                    INIT_SIGMA * rng.sample::<f64, _>(StandardNormal)
                }),
                bias_down: vec![0.0; rank],
                up: Matrix::zeros(d, rank),
                bias_up: vec![0.0; d],
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Unified trainable state

/// Delta (or gradient) for one LoRA block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub a: Matrix,
    pub b: Matrix,
}

/// Delta (or gradient) for one adapter site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    pub down: Matrix,
    pub bias_down: Vec<f64>,
    pub up: Matrix,
    pub bias_up: Vec<f64>,
}

/// A frozen-or-masked base model plus method-specific trainable state.
#[derive(Debug, Clone, PartialEq)]
pub enum PeftModel {
    /// Dense training restricted to a mask (FFT, SFT, BitFit, stage 1).
    Dense { model: ModelParams, mask: SparseMask },
    /// Frozen base plus parallel low-rank blocks (LoRA, stage 2).
    Lora {
        base: ModelParams,
        blocks: Vec<LoraBlock>,
    },
    /// Frozen base plus serial bottleneck adapters.
    Adapter {
        base: ModelParams,
        sites: Vec<AdapterSite>,
    },
}

/// Gradients matching a [`PeftModel`]. Base gradients are always present;
/// the step only consumes the trainable part.
#[derive(Debug, Clone)]
pub enum PeftGrads {
    Dense(ParamDelta),
    Lora {
        base: ParamDelta,
        blocks: Vec<LoraDelta>,
    },
    Adapter {
        base: ParamDelta,
        sites: Vec<AdapterDelta>,
    },
}

/// Trainable-state difference exchanged between clients and server.
#[derive(Debug, Clone, PartialEq)]
pub enum PeftDelta {
    Dense(ParamDelta),
    Lora(Vec<LoraDelta>),
    Adapter(Vec<AdapterDelta>),
}

impl PeftModel {
    pub fn base(&self) -> &ModelParams {
        match self {
            PeftModel::Dense { model, .. } => model,
            PeftModel::Lora { base, .. } => base,
            PeftModel::Adapter { base, .. } => base,
        }
    }

    /// Number of parameters local training may modify.
    pub fn trainable_count(&self) -> usize {
        match self {
            PeftModel::Dense { mask, .. } => mask.popcount(),
            PeftModel::Lora { blocks, .. } => blocks.iter().map(LoraBlock::param_count).sum(),
            PeftModel::Adapter { sites, .. } => sites.iter().map(AdapterSite::param_count).sum(),
        }
    }

    /// Trainable count over the base model's parameter count.
    pub fn trainable_density(&self) -> f64 {
        self.trainable_count() as f64 / self.base().total_params() as f64
    }

    /// Logits for a feature batch.
    pub fn forward_logits(&self, batch: &Matrix) -> Result<Matrix> {
        match self {
            PeftModel::Dense { model, .. } => Ok(forward(model, batch)?.0),
            PeftModel::Lora { base, blocks } => Ok(lora_forward_cached(base, blocks, batch)?.0),
            PeftModel::Adapter { base, sites } => Ok(adapter_forward_cached(base, sites, batch)?.0),
        }
    }

    /// Mean cross-entropy loss and gradients for a labeled batch.
    pub fn backward_batch(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, PeftGrads)> {
        match self {
            PeftModel::Dense { model, .. } => {
                let (_, cache) = forward(model, batch)?;
                let (loss, grads) = model::backward(model, &cache, labels)?;
                Ok((loss, PeftGrads::Dense(grads)))
            }
            PeftModel::Lora { base, blocks } => {
                let (_, cache) = lora_forward_cached(base, blocks, batch)?;
                let (loss, base_grads, block_grads) =
                    lora_backward(base, blocks, &cache, labels)?;
                Ok((
                    loss,
                    PeftGrads::Lora {
                        base: base_grads,
                        blocks: block_grads,
                    },
                ))
            }
            PeftModel::Adapter { base, sites } => {
                let (_, cache) = adapter_forward_cached(base, sites, batch)?;
                let (loss, base_grads, site_grads) =
                    adapter_backward(base, sites, &cache, labels)?;
                Ok((
                    loss,
                    PeftGrads::Adapter {
                        base: base_grads,
                        sites: site_grads,
                    },
                ))
            }
        }
    }

    /// One SGD step on the trainable set only.
    pub fn sgd_step(&mut self, grads: &PeftGrads, lr: f64) -> Result<()> {
        match (self, grads) {
            (PeftModel::Dense { model, mask }, PeftGrads::Dense(g)) => {
                *model = masked_step(model, g, mask, lr)?;
                Ok(())
            }
            (PeftModel::Lora { blocks, .. }, PeftGrads::Lora { blocks: g, .. }) => {
                if blocks.len() != g.len() {
                    return Err(Error::shape("block gradient count mismatch".to_string()));
                }
                for (block, grad) in blocks.iter_mut().zip(g) {
                    add_scaled_matrix(&mut block.a, &grad.a, -lr)?;
                    add_scaled_matrix(&mut block.b, &grad.b, -lr)?;
                }
                Ok(())
            }
            (PeftModel::Adapter { sites, .. }, PeftGrads::Adapter { sites: g, .. }) => {
                if sites.len() != g.len() {
                    return Err(Error::shape("adapter gradient count mismatch".to_string()));
                }
                for (site, grad) in sites.iter_mut().zip(g) {
                    add_scaled_matrix(&mut site.down, &grad.down, -lr)?;
                    add_scaled_matrix(&mut site.up, &grad.up, -lr)?;
                    add_scaled_vec(&mut site.bias_down, &grad.bias_down, -lr);
                    add_scaled_vec(&mut site.bias_up, &grad.bias_up, -lr);
                }
                Ok(())
            }
            _ => Err(Error::Protocol(
                "gradient kind does not match model kind".to_string(),
            )),
        }
    }

    /// Difference of the trainable state versus a reference of the same kind.
    pub fn delta_from(&self, reference: &PeftModel) -> Result<PeftDelta> {
        match (self, reference) {
            (PeftModel::Dense { model, .. }, PeftModel::Dense { model: origin, .. }) => {
                Ok(PeftDelta::Dense(model::delta(model, origin)?))
            }
            (PeftModel::Lora { blocks, .. }, PeftModel::Lora { blocks: origin, .. }) => {
                if blocks.len() != origin.len() {
                    return Err(Error::shape("block count mismatch".to_string()));
                }
                let deltas = blocks
                    .iter()
                    .zip(origin)
                    .map(|(cur, org)| {
                        Ok(LoraDelta {
                            a: cur.a.sub(&org.a)?,
                            b: cur.b.sub(&org.b)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PeftDelta::Lora(deltas))
            }
            (PeftModel::Adapter { sites, .. }, PeftModel::Adapter { sites: origin, .. }) => {
                if sites.len() != origin.len() {
                    return Err(Error::shape("adapter count mismatch".to_string()));
                }
                let deltas = sites
                    .iter()
                    .zip(origin)
                    .map(|(cur, org)| {
                        Ok(AdapterDelta {
                            down: cur.down.sub(&org.down)?,
                            bias_down: sub_vec(&cur.bias_down, &org.bias_down),
                            up: cur.up.sub(&org.up)?,
                            bias_up: sub_vec(&cur.bias_up, &org.bias_up),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PeftDelta::Adapter(deltas))
            }
            _ => Err(Error::Protocol(
                "cannot diff trainable states of different kinds".to_string(),
            )),
        }
    }

    /// Apply `scale * delta` to the trainable state. Zero contributions are
    /// skipped so untouched entries stay bit-identical.
    pub fn apply_delta(&mut self, delta: &PeftDelta, scale: f64) -> Result<()> {
        match (self, delta) {
            (PeftModel::Dense { model, .. }, PeftDelta::Dense(d)) => {
                *model = model::apply(model, d, scale)?;
                Ok(())
            }
            (PeftModel::Lora { blocks, .. }, PeftDelta::Lora(d)) => {
                if blocks.len() != d.len() {
                    return Err(Error::shape("block delta count mismatch".to_string()));
                }
                for (block, delta) in blocks.iter_mut().zip(d) {
                    add_scaled_matrix(&mut block.a, &delta.a, scale)?;
                    add_scaled_matrix(&mut block.b, &delta.b, scale)?;
                }
                Ok(())
            }
            (PeftModel::Adapter { sites, .. }, PeftDelta::Adapter(d)) => {
                if sites.len() != d.len() {
                    return Err(Error::shape("adapter delta count mismatch".to_string()));
                }
                for (site, delta) in sites.iter_mut().zip(d) {
                    add_scaled_matrix(&mut site.down, &delta.down, scale)?;
                    add_scaled_matrix(&mut site.up, &delta.up, scale)?;
                    add_scaled_vec(&mut site.bias_down, &delta.bias_down, scale);
                    add_scaled_vec(&mut site.bias_up, &delta.bias_up, scale);
                }
                Ok(())
            }
            _ => Err(Error::Protocol(
                "delta kind does not match model kind".to_string(),
            )),
        }
    }

    /// Test accuracy over the given sample indices (all samples if `None`).
    pub fn accuracy(&self, ds: &Dataset, indices: Option<&[usize]>) -> Result<f64> {
        match self {
            PeftModel::Dense { model, .. } => model_accuracy(model, ds, indices),
            _ => {
                let idx: Vec<usize> = match indices {
                    Some(list) => list.to_vec(),
                    None => (0..ds.len()).collect(),
                };
                if idx.is_empty() {
                    return Err(Error::Data("accuracy over empty index set".to_string()));
                }
                let logits = self.forward_logits(&ds.features_for(&idx))?;
                let correct = idx
                    .iter()
                    .enumerate()
                    .filter(|(row, &i)| argmax(logits.row(*row)) == ds.labels[i])
                    .count();
                Ok(correct as f64 / idx.len() as f64)
            }
        }
    }
}

impl PeftDelta {
    /// Zero-valued delta shaped like the given state's trainable set.
    pub fn zeros_like(state: &PeftModel) -> PeftDelta {
        match state {
            PeftModel::Dense { model, .. } => PeftDelta::Dense(ParamDelta::zeros_like(model)),
            PeftModel::Lora { blocks, .. } => PeftDelta::Lora(
                blocks
                    .iter()
                    .map(|b| LoraDelta {
                        a: Matrix::zeros(b.a.rows(), b.a.cols()),
                        b: Matrix::zeros(b.b.rows(), b.b.cols()),
                    })
                    .collect(),
            ),
            PeftModel::Adapter { sites, .. } => PeftDelta::Adapter(
                sites
                    .iter()
                    .map(|s| AdapterDelta {
                        down: Matrix::zeros(s.down.rows(), s.down.cols()),
                        bias_down: vec![0.0; s.bias_down.len()],
                        up: Matrix::zeros(s.up.rows(), s.up.cols()),
                        bias_up: vec![0.0; s.bias_up.len()],
                    })
                    .collect(),
            ),
        }
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &PeftDelta, c: f64) -> Result<()> {
        match (self, other) {
            (PeftDelta::Dense(a), PeftDelta::Dense(b)) => a.add_scaled(b, c),
            (PeftDelta::Lora(a), PeftDelta::Lora(b)) => {
                if a.len() != b.len() {
                    return Err(Error::shape("block delta count mismatch".to_string()));
                }
                for (x, y) in a.iter_mut().zip(b) {
                    add_scaled_matrix(&mut x.a, &y.a, c)?;
                    add_scaled_matrix(&mut x.b, &y.b, c)?;
                }
                Ok(())
            }
            (PeftDelta::Adapter(a), PeftDelta::Adapter(b)) => {
                if a.len() != b.len() {
                    return Err(Error::shape("adapter delta count mismatch".to_string()));
                }
                for (x, y) in a.iter_mut().zip(b) {
                    add_scaled_matrix(&mut x.down, &y.down, c)?;
                    add_scaled_matrix(&mut x.up, &y.up, c)?;
                    add_scaled_vec(&mut x.bias_down, &y.bias_down, c);
                    add_scaled_vec(&mut x.bias_up, &y.bias_up, c);
                }
                Ok(())
            }
            _ => Err(Error::Protocol("mixed delta kinds".to_string())),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        match self {
            PeftDelta::Dense(d) => *d = d.scale(c),
            PeftDelta::Lora(blocks) => {
                for b in blocks {
                    b.a = b.a.scale(c);
                    b.b = b.b.scale(c);
                }
            }
            PeftDelta::Adapter(sites) => {
                for s in sites {
                    s.down = s.down.scale(c);
                    s.up = s.up.scale(c);
                    for v in s.bias_down.iter_mut() {
                        *v *= c;
                    }
                    for v in s.bias_up.iter_mut() {
                        *v *= c;
                    }
                }
            }
        }
    }
}

fn add_scaled_matrix(dst: &mut Matrix, src: &Matrix, c: f64) -> Result<()> {
    if !dst.same_shape(src) {
        return Err(Error::shape("matrix shapes differ".to_string()));
    }
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        let step = c * s;
        if step != 0.0 {
            *d += step;
        }
    }
    Ok(())
}

fn add_scaled_vec(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        let step = c * s;
        if step != 0.0 {
            *d += step;
        }
    }
}

fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

// ---------------------------------------------------------------------------
// LoRA forward/backward over batches

struct LoraCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    /// Per layer, `x . A^T` when a block is attached.
    mids: Vec<Option<Matrix>>,
    logits: Matrix,
}

fn block_index(base: &ModelParams, blocks: &[LoraBlock]) -> Result<Vec<Option<usize>>> {
    let mut map = vec![None; base.num_layers()];
    for (i, block) in blocks.iter().enumerate() {
        if block.target_layer >= base.num_layers() {
            return Err(Error::shape(format!(
                "block targets layer {} of a {}-layer model",
                block.target_layer,
                base.num_layers()
            )));
        }
        if map[block.target_layer].replace(i).is_some() {
            return Err(Error::Config(format!(
                "two blocks target layer {}",
                block.target_layer
            )));
        }
        let layer = base.layer(block.target_layer);
        if block.a.cols() != layer.weight.cols() || block.b.rows() != layer.weight.rows() {
            return Err(Error::shape(format!(
                "block does not fit layer {}",
                block.target_layer
            )));
        }
    }
    Ok(map)
}

fn lora_forward_cached(
    base: &ModelParams,
    blocks: &[LoraBlock],
    batch: &Matrix,
) -> Result<(Matrix, LoraCache)> {
    if batch.cols() != base.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            base.input_dim()
        )));
    }
    let index = block_index(base, blocks)?;
    let mut inputs = Vec::with_capacity(base.num_layers());
    let mut pre_activations = Vec::with_capacity(base.num_layers());
    let mut mids = Vec::with_capacity(base.num_layers());
    let mut x = batch.clone();
    for (idx, layer) in base.layers().iter().enumerate() {
        inputs.push(x.clone());
        let mut z = layer_affine(layer, &x)?;
        if let Some(bi) = index[idx] {
            let block = &blocks[bi];
            let mid = x.matmul(&block.a.transpose())?;
            let extra = mid.matmul(&block.b.transpose())?;
            let s = block.scaling();
            for (zv, &ev) in z.data_mut().iter_mut().zip(extra.data()) {
                *zv += s * ev;
            }
            mids.push(Some(mid));
        } else {
            mids.push(None);
        }
        pre_activations.push(z.clone());
        x = apply_activation(&z, layer.activation);
    }
    let logits = x;
    Ok((
        logits.clone(),
        LoraCache {
            inputs,
            pre_activations,
            mids,
            logits,
        },
    ))
}

fn lora_backward(
    base: &ModelParams,
    blocks: &[LoraBlock],
    cache: &LoraCache,
    labels: &[usize],
) -> Result<(f64, ParamDelta, Vec<LoraDelta>)> {
    let index = block_index(base, blocks)?;
    let (loss, mut dz) = softmax_cross_entropy(&cache.logits, labels)?;
    let mut weight_grads = vec![Matrix::zeros(0, 0); base.num_layers()];
    let mut bias_grads = vec![Vec::new(); base.num_layers()];
    let mut block_grads: Vec<Option<LoraDelta>> = vec![None; blocks.len()];
    for idx in (0..base.num_layers()).rev() {
        let layer = base.layer(idx);
        if let Some(mask) = model::activation_grad_mask(&cache.pre_activations[idx], layer.activation)
        {
            dz = hadamard(&dz, &mask);
        }
        weight_grads[idx] = dz.transpose().matmul(&cache.inputs[idx])?;
        bias_grads[idx] = column_sums(&dz);
        let mut dx = if idx > 0 {
            Some(dz.matmul(&layer.weight)?)
        } else {
            None
        };
        if let Some(bi) = index[idx] {
            let block = &blocks[bi];
            let mid = cache.mids[idx].as_ref().expect("mid cached for block");
            let s = block.scaling();
            let db = dz.transpose().matmul(mid)?.scale(s);
            let dmid = dz.matmul(&block.b)?.scale(s);
            let da = dmid.transpose().matmul(&cache.inputs[idx])?;
            if let Some(dx) = dx.as_mut() {
                let extra = dmid.matmul(&block.a)?;
                for (d, &e) in dx.data_mut().iter_mut().zip(extra.data()) {
                    *d += e;
                }
            }
            block_grads[bi] = Some(LoraDelta { a: da, b: db });
        }
        if let Some(next) = dx {
            dz = next;
        }
    }
    let block_grads = block_grads
        .into_iter()
        .map(|g| g.expect("every block saw its layer"))
        .collect();
    Ok((
        loss,
        ParamDelta {
            weights: weight_grads,
            biases: bias_grads,
        },
        block_grads,
    ))
}

// ---------------------------------------------------------------------------
// Adapter forward/backward over batches

struct AdapterCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    /// Per site: (adapter input, bottleneck pre-activation, bottleneck
    /// post-relu), aligned with `sites`.
    site_state: Vec<(Matrix, Matrix, Matrix)>,
    logits: Matrix,
}

fn site_index(base: &ModelParams, sites: &[AdapterSite]) -> Result<Vec<Option<usize>>> {
    let mut map = vec![None; base.num_layers()];
    for (i, site) in sites.iter().enumerate() {
        if site.after_layer >= base.num_layers() {
            return Err(Error::shape(format!(
                "adapter after layer {} of a {}-layer model",
                site.after_layer,
                base.num_layers()
            )));
        }
        if map[site.after_layer].replace(i).is_some() {
            return Err(Error::Config(format!(
                "two adapters after layer {}",
                site.after_layer
            )));
        }
        if site.dim() != base.layer(site.after_layer).out_dim() {
            return Err(Error::shape(format!(
                "adapter dim {} does not match layer {} output",
                site.dim(),
                site.after_layer
            )));
        }
    }
    Ok(map)
}

fn adapter_forward_cached(
    base: &ModelParams,
    sites: &[AdapterSite],
    batch: &Matrix,
) -> Result<(Matrix, AdapterCache)> {
    if batch.cols() != base.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            base.input_dim()
        )));
    }
    let index = site_index(base, sites)?;
    let mut inputs = Vec::with_capacity(base.num_layers());
    let mut pre_activations = Vec::with_capacity(base.num_layers());
    let mut site_state: Vec<(Matrix, Matrix, Matrix)> = sites
        .iter()
        .map(|_| (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Matrix::zeros(0, 0)))
        .collect();
    let mut x = batch.clone();
    for (idx, layer) in base.layers().iter().enumerate() {
        inputs.push(x.clone());
        let z = layer_affine(layer, &x)?;
        pre_activations.push(z.clone());
        x = apply_activation(&z, layer.activation);
        if let Some(si) = index[idx] {
            let site = &sites[si];
            let adapter_in = x.clone();
            let mut z1 = adapter_in.matmul(&site.down.transpose())?;
            for i in 0..z1.rows() {
                for j in 0..z1.cols() {
                    let v = z1.get(i, j) + site.bias_down[j];
                    z1.set(i, j, v);
                }
            }
            let h1 = apply_activation(&z1, Activation::Relu);
            let up_out = h1.matmul(&site.up.transpose())?;
            let mut y = adapter_in.clone();
            for i in 0..y.rows() {
                for j in 0..y.cols() {
                    let v = y.get(i, j) + up_out.get(i, j) + site.bias_up[j];
                    y.set(i, j, v);
                }
            }
            site_state[si] = (adapter_in, z1, h1);
            x = y;
        }
    }
    let logits = x;
    Ok((
        logits.clone(),
        AdapterCache {
            inputs,
            pre_activations,
            site_state,
            logits,
        },
    ))
}

fn adapter_backward(
    base: &ModelParams,
    sites: &[AdapterSite],
    cache: &AdapterCache,
    labels: &[usize],
) -> Result<(f64, ParamDelta, Vec<AdapterDelta>)> {
    let index = site_index(base, sites)?;
    let (loss, mut dout) = softmax_cross_entropy(&cache.logits, labels)?;
    let mut weight_grads = vec![Matrix::zeros(0, 0); base.num_layers()];
    let mut bias_grads = vec![Vec::new(); base.num_layers()];
    let mut site_grads: Vec<Option<AdapterDelta>> = vec![None; sites.len()];
    for idx in (0..base.num_layers()).rev() {
        // dout is the gradient wrt the layer's post-adapter output.
        if let Some(si) = index[idx] {
            let site = &sites[si];
            let (adapter_in, z1, h1) = &cache.site_state[si];
            let dup = dout.transpose().matmul(h1)?;
            let dbias_up = column_sums(&dout);
            let dh1 = dout.matmul(&site.up)?;
            let relu_mask = model::activation_grad_mask(z1, Activation::Relu)
                .expect("relu always has a gradient mask");
            let dz1 = hadamard(&dh1, &relu_mask);
            let ddown = dz1.transpose().matmul(adapter_in)?;
            let dbias_down = column_sums(&dz1);
            // Residual: gradient flows both through the bottleneck and around it.
            let through = dz1.matmul(&site.down)?;
            for (d, &t) in dout.data_mut().iter_mut().zip(through.data()) {
                *d += t;
            }
            site_grads[si] = Some(AdapterDelta {
                down: ddown,
                bias_down: dbias_down,
                up: dup,
                bias_up: dbias_up,
            });
        }
        let layer = base.layer(idx);
        let mut dz = dout;
        if let Some(mask) = model::activation_grad_mask(&cache.pre_activations[idx], layer.activation)
        {
            dz = hadamard(&dz, &mask);
        }
        weight_grads[idx] = dz.transpose().matmul(&cache.inputs[idx])?;
        bias_grads[idx] = column_sums(&dz);
        dout = if idx > 0 {
            dz.matmul(&layer.weight)?
        } else {
            dz
        };
    }
    let site_grads = site_grads
        .into_iter()
        .map(|g| g.expect("every site saw its layer"))
        .collect();
    Ok((
        loss,
        ParamDelta {
            weights: weight_grads,
            biases: bias_grads,
        },
        site_grads,
    ))
}
