//! Independent reference routines shared by the integration tests.
//!
//! Nothing here touches the implementation paths it checks: matrix products
//! are naive dot-product loops, singular values come from a two-sided Jacobi
//! eigendecomposition of the Gram matrix, gradients from central finite
//! differences, and the forward reference is scalar loops over plain slices.

#![allow(dead_code)]

use fedpeft::{Matrix, ModelParams, PeftModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random matrix of exact rank `r` (product of Gaussian factors).
pub fn random_matrix_of_rank(rows: usize, cols: usize, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let left = random_matrix(rows, r, rng);
    let right = random_matrix(r, cols, rng);
    naive_matmul(&left, &right)
}

/// Reference product: independent dot-product loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Eigenvalues of a symmetric matrix by classical two-sided cyclic Jacobi,
/// descending. Independent of the one-sided SVD under test.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| m.get(i, j)).collect())
        .collect();
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    for _ in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eigs
}

/// Singular values via the Gram-matrix eigendecomposition oracle. Squaring
/// the matrix costs half the precision, so tiny singular values are only
/// resolved to about `1e-8 * sigma_max`.
pub fn singular_values_oracle(m: &Matrix) -> Vec<f64> {
    let gram = if m.rows() >= m.cols() {
        naive_matmul(&m.transpose(), m)
    } else {
        naive_matmul(m, &m.transpose())
    };
    sym_eigenvalues(&gram)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Full-precision singular value oracle via the symmetric Jordan-Wielandt
/// form `[[0, M], [M^T, 0]]`, whose eigenvalues are plus/minus the singular
/// values — no squaring, so rank-deficient tails resolve to machine noise.
pub fn singular_values_oracle_precise(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let n = rows + cols;
    let augmented = Matrix::from_fn(n, n, |i, j| {
        if i < rows && j >= rows {
            m.get(i, j - rows)
        } else if i >= rows && j < rows {
            m.get(j, i - rows)
        } else {
            0.0
        }
    });
    sym_eigenvalues(&augmented)
        .into_iter()
        .take(rows.min(cols))
        .map(|l| l.max(0.0))
        .collect()
}

/// Optimal rank-r Frobenius approximation error: `sqrt(sum_{i>r} sigma_i^2)`.
pub fn optimal_rank_error(m: &Matrix, r: usize) -> f64 {
    let sigma = singular_values_oracle_precise(m);
    sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Scalar-loop forward reference for a plain dense model: per sample, per
/// layer, explicit dot products; relu on every non-final layer that has it.
pub fn scalar_forward(model: &ModelParams, batch: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(batch.rows(), model.num_classes());
    for sample in 0..batch.rows() {
        let mut x: Vec<f64> = batch.row(sample).to_vec();
        for layer in model.layers() {
            let mut next = vec![0.0; layer.out_dim()];
            for (i, nv) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[i];
                for (j, &xv) in x.iter().enumerate() {
                    acc += layer.weight.get(i, j) * xv;
                }
                *nv = acc;
            }
            if matches!(layer.activation, fedpeft::Activation::Relu) {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            x = next;
        }
        for (j, &v) in x.iter().enumerate() {
            out.set(sample, j, v);
        }
    }
    out
}

/// Mean cross-entropy loss of a trainable state on a batch, for finite
/// differences.
pub fn loss_of(state: &PeftModel, batch: &Matrix, labels: &[usize]) -> f64 {
    let logits = state.forward_logits(batch).expect("forward");
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let r = logits.row(row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = r.iter().map(|&v| (v - max).exp()).sum();
        loss -= (r[label] - max) - sum.ln();
    }
    loss / labels.len() as f64
}

/// Addresses of every parameter in a trainable state, used to drive finite
/// differences generically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight { layer: usize, pos: usize },
    Bias { layer: usize, pos: usize },
    BlockA { block: usize, pos: usize },
    BlockB { block: usize, pos: usize },
    AdapterDown { site: usize, pos: usize },
    AdapterUp { site: usize, pos: usize },
    AdapterBiasDown { site: usize, pos: usize },
    AdapterBiasUp { site: usize, pos: usize },
}

pub fn all_param_slots(state: &PeftModel) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    let base = state.base();
    for (layer, l) in base.layers().iter().enumerate() {
        for pos in 0..l.weight.data().len() {
            slots.push(ParamSlot::Weight { layer, pos });
        }
        for pos in 0..l.bias.len() {
            slots.push(ParamSlot::Bias { layer, pos });
        }
    }
    match state {
        PeftModel::Dense { .. } => {}
        PeftModel::Lora { blocks, .. } => {
            for (block, b) in blocks.iter().enumerate() {
                for pos in 0..b.a.data().len() {
                    slots.push(ParamSlot::BlockA { block, pos });
                }
                for pos in 0..b.b.data().len() {
                    slots.push(ParamSlot::BlockB { block, pos });
                }
            }
        }
        PeftModel::Adapter { sites, .. } => {
            for (site, s) in sites.iter().enumerate() {
                for pos in 0..s.down.data().len() {
                    slots.push(ParamSlot::AdapterDown { site, pos });
                }
                for pos in 0..s.up.data().len() {
                    slots.push(ParamSlot::AdapterUp { site, pos });
                }
                for pos in 0..s.bias_down.len() {
                    slots.push(ParamSlot::AdapterBiasDown { site, pos });
                }
                for pos in 0..s.bias_up.len() {
                    slots.push(ParamSlot::AdapterBiasUp { site, pos });
                }
            }
        }
    }
    slots
}

pub fn nudge(state: &mut PeftModel, slot: ParamSlot, eps: f64) {
    match (state, slot) {
        (PeftModel::Dense { model, .. }, ParamSlot::Weight { layer, pos })
        | (PeftModel::Lora { base: model, .. }, ParamSlot::Weight { layer, pos })
        | (PeftModel::Adapter { base: model, .. }, ParamSlot::Weight { layer, pos }) => {
            model.layer_mut(layer).weight.data_mut()[pos] += eps;
        }
        (PeftModel::Dense { model, .. }, ParamSlot::Bias { layer, pos })
        | (PeftModel::Lora { base: model, .. }, ParamSlot::Bias { layer, pos })
        | (PeftModel::Adapter { base: model, .. }, ParamSlot::Bias { layer, pos }) => {
            model.layer_mut(layer).bias[pos] += eps;
        }
        (PeftModel::Lora { blocks, .. }, ParamSlot::BlockA { block, pos }) => {
            blocks[block].a.data_mut()[pos] += eps;
        }
        (PeftModel::Lora { blocks, .. }, ParamSlot::BlockB { block, pos }) => {
            blocks[block].b.data_mut()[pos] += eps;
        }
        (PeftModel::Adapter { sites, .. }, ParamSlot::AdapterDown { site, pos }) => {
            sites[site].down.data_mut()[pos] += eps;
        }
        (PeftModel::Adapter { sites, .. }, ParamSlot::AdapterUp { site, pos }) => {
            sites[site].up.data_mut()[pos] += eps;
        }
        (PeftModel::Adapter { sites, .. }, ParamSlot::AdapterBiasDown { site, pos }) => {
            sites[site].bias_down[pos] += eps;
        }
        (PeftModel::Adapter { sites, .. }, ParamSlot::AdapterBiasUp { site, pos }) => {
            sites[site].bias_up[pos] += eps;
        }
        _ => unreachable!("slot does not belong to this state kind"),
    }
}

/// Central finite difference of the loss along one parameter.
pub fn finite_diff(
    state: &PeftModel,
    slot: ParamSlot,
    batch: &Matrix,
    labels: &[usize],
    eps: f64,
) -> f64 {
    let mut plus = state.clone();
    nudge(&mut plus, slot, eps);
    let mut minus = state.clone();
    nudge(&mut minus, slot, -eps);
    (loss_of(&plus, batch, labels) - loss_of(&minus, batch, labels)) / (2.0 * eps)
}

/// Analytic gradient entry for the same slot.
pub fn grad_entry(grads: &fedpeft::peft::PeftGrads, slot: ParamSlot) -> f64 {
    use fedpeft::peft::PeftGrads;
    let base = match grads {
        PeftGrads::Dense(d) => d,
        PeftGrads::Lora { base, .. } => base,
        PeftGrads::Adapter { base, .. } => base,
    };
    match (grads, slot) {
        (_, ParamSlot::Weight { layer, pos }) => base.weights[layer].data()[pos],
        (_, ParamSlot::Bias { layer, pos }) => base.biases[layer][pos],
        (PeftGrads::Lora { blocks, .. }, ParamSlot::BlockA { block, pos }) => {
            blocks[block].a.data()[pos]
        }
        (PeftGrads::Lora { blocks, .. }, ParamSlot::BlockB { block, pos }) => {
            blocks[block].b.data()[pos]
        }
        (PeftGrads::Adapter { sites, .. }, ParamSlot::AdapterDown { site, pos }) => {
            sites[site].down.data()[pos]
        }
        (PeftGrads::Adapter { sites, .. }, ParamSlot::AdapterUp { site, pos }) => {
            sites[site].up.data()[pos]
        }
        (PeftGrads::Adapter { sites, .. }, ParamSlot::AdapterBiasDown { site, pos }) => {
            sites[site].bias_down[pos]
        }
        (PeftGrads::Adapter { sites, .. }, ParamSlot::AdapterBiasUp { site, pos }) => {
            sites[site].bias_up[pos]
        }
        _ => unreachable!("slot does not belong to this gradient kind"),
    }
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-6)
}

/// A small pretrained model shared by several suites.
pub fn pretrained_model(seed: u64) -> (fedpeft::ModelConfig, ModelParams) {
    let cfg = fedpeft::ModelConfig {
        input_dim: 8,
        embedding_dim: 8,
        hidden_dims: vec![10, 10],
        pre_classification_dim: 10,
        num_classes: 5,
    };
    let source = fedpeft::data::synth_generate(5, 8, 120, seed ^ 0xabc).unwrap();
    let model = fedpeft::model::pretrain(&cfg, &source, 2, 0.1, seed).unwrap();
    (cfg, model)
}

pub fn random_batch(rows: usize, cols: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let batch = random_matrix(rows, cols, &mut r);
    let labels = (0..rows).map(|_| r.gen_range(0..5)).collect();
    (batch, labels)
}
