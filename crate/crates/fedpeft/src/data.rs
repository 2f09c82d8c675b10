//! Dataset sources and heterogeneity-controlled client partitioners.
//!
//! Data is either generated (Gaussian class clusters, a desk-scale stand-in
//! for a text classification corpus) or loaded from a pre-vectorized CSV.
//! Partitioners deal training indices to clients either IID, by per-class
//! Dirichlet proportions, or pathologically by label-sorted shards.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{domain, stream};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::{Dirichlet, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;

/// Labeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range 0..{num_classes}"
            )));
        }
        for c in 0..num_classes {
            if !labels.contains(&c) {
                return Err(Error::Data(format!("class {c} has no samples")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Gather the feature rows for the given sample indices.
    pub fn features_for(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.dims(), |r, c| {
            self.features.get(indices[r], c)
        })
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Stable content hash (FNV-1a over shape, feature bits and labels) used
    /// to refuse comparisons between runs on different data.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.features.rows() as u64).to_le_bytes());
        eat(&(self.features.cols() as u64).to_le_bytes());
        eat(&(self.num_classes as u64).to_le_bytes());
        for v in self.features.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        h
    }
}

/// Heterogeneity recipe a partition was drawn with.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Heterogeneity {
    Iid,
    Dirichlet { alpha: f64 },
    Pathological { shards_per_client: usize },
}

/// Assignment of training sample indices to clients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub descriptor: Heterogeneity,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.clients[id]
    }

    /// Mean over clients of the label entropy (nats) of their local data.
    pub fn mean_label_entropy(&self, ds: &Dataset) -> f64 {
        let mut total = 0.0;
        for indices in &self.clients {
            let mut counts = BTreeMap::new();
            for &i in indices {
                *counts.entry(ds.labels[i]).or_insert(0usize) += 1;
            }
            let n = indices.len() as f64;
            let h: f64 = counts
                .values()
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum();
            total += h;
        }
        total / self.clients.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    fn validate(self, total: usize) -> Result<Partition> {
        let mut seen = vec![false; total];
        for (id, indices) in self.clients.iter().enumerate() {
            if indices.is_empty() {
                return Err(Error::Partition(format!("client {id} has no samples")));
            }
            for &i in indices {
                if i >= total {
                    return Err(Error::Partition(format!("index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        Ok(self)
    }
}

/// Gaussian class clusters with seeded means: `x = mu_label + noise`.
///
/// Means are drawn once per class from a seeded normal scaled for clear but
/// not trivial separability; samples are dealt to classes as evenly as
/// possible so every class is populated.
pub fn synth_generate(
    num_classes: usize,
    dims: usize,
    samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 {
        return Err(Error::Config(
            "num_classes and dims must be positive".to_string(),
        ));
    }
    if samples < num_classes {
        return Err(Error::Config(format!(
            "{samples} samples cannot cover {num_classes} classes"
        )));
    }
    let mut rng = stream(seed, &[domain::DATA]);
    let mean_scale = 1.2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dims)
                .map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut features = Matrix::zeros(samples, dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % num_classes;
        labels.push(c);
        for j in 0..dims {
            let noise: f64 = rng.sample(StandardNormal);
            features.set(i, j, means[c][j] + noise);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Load a pre-vectorized dataset from CSV with header `f0,...,fD,label`.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.last() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header must be f0,...,fD,label",
            path.display()
        )));
    }
    let dims = cols.len() - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dims + 1 {
            return Err(Error::Data(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                dims + 1,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(dims);
        for f in &fields[..dims] {
            row.push(f.parse::<f64>().map_err(|_| {
                Error::Data(format!("{}:{}: bad feature `{f}`", path.display(), lineno + 2))
            })?);
        }
        labels.push(fields[dims].parse::<usize>().map_err(|_| {
            Error::Data(format!(
                "{}:{}: bad label `{}`",
                path.display(),
                lineno + 2,
                fields[dims]
            ))
        })?);
        rows.push(row);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    Dataset::new(Matrix::from_rows(&rows)?, labels, classes)
}

/// Seeded stratified split preserving class presence on both sides.
///
/// Per class the train share is `fraction` rounded, clamped to leave at
/// least one sample on each side when the class has two or more; a
/// largest-remainder pass then nudges per-class counts so the global train
/// size is exactly `round(fraction * total)` whenever the clamps allow.
pub fn split_train_test(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {fraction} must be in (0, 1)"
        )));
    }
    let mut rng = stream(seed, &[domain::SPLIT]);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for list in per_class.iter_mut() {
        list.shuffle(&mut rng);
    }

    let target_total = (fraction * ds.len() as f64).round() as usize;
    let bounds: Vec<(usize, usize)> = per_class
        .iter()
        .map(|list| {
            let n = list.len();
            if n >= 2 {
                (1, n - 1)
            } else {
                (1, 1) // singleton classes go to train
            }
        })
        .collect();
    let mut takes: Vec<usize> = per_class
        .iter()
        .zip(&bounds)
        .map(|(list, &(lo, hi))| ((fraction * list.len() as f64).round() as usize).clamp(lo, hi))
        .collect();
    // Largest-remainder style correction toward the exact global target.
    let mut current: usize = takes.iter().sum();
    while current != target_total {
        let want_more = current < target_total;
        let mut best: Option<(f64, usize)> = None;
        for (c, take) in takes.iter().enumerate() {
            let (lo, hi) = bounds[c];
            let movable = if want_more { *take < hi } else { *take > lo };
            if !movable {
                continue;
            }
            let ideal = fraction * per_class[c].len() as f64;
            let gain = if want_more {
                ideal - *take as f64
            } else {
                *take as f64 - ideal
            };
            if best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, c));
            }
        }
        match best {
            Some((_, c)) => {
                if want_more {
                    takes[c] += 1;
                    current += 1;
                } else {
                    takes[c] -= 1;
                    current -= 1;
                }
            }
            None => break, // clamps make the exact target unreachable
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (list, &take) in per_class.iter().zip(&takes) {
        train.extend_from_slice(&list[..take]);
        test.extend_from_slice(&list[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// IID partition: seeded shuffle dealt round-robin.
pub fn partition_iid(train: &[usize], n_clients: usize, seed: u64) -> Result<Partition> {
    check_clients(train, n_clients)?;
    let mut shuffled = train.to_vec();
    shuffled.shuffle(&mut stream(seed, &[domain::PARTITION, 0]));
    let mut clients = vec![Vec::new(); n_clients];
    for (i, idx) in shuffled.into_iter().enumerate() {
        clients[i % n_clients].push(idx);
    }
    Partition {
        clients,
        descriptor: Heterogeneity::Iid,
    }
    .validate(max_index(train))
}

/// Label-distribution-skewed partition: for each class, client proportions
/// are drawn from `Dirichlet(alpha * 1)` and the class samples are dealt
/// multinomially. Small `alpha` concentrates each class on few clients.
/// Empty clients are repaired by stealing one sample from the largest.
pub fn partition_dirichlet(
    train: &[usize],
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    check_clients(train, n_clients)?;
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Config(format!("dirichlet alpha {alpha} must be > 0")));
    }
    let mut rng = stream(seed, &[domain::PARTITION, 1]);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    if n_clients == 1 {
        clients[0] = train.to_vec();
    } else {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
        for &i in train {
            per_class[ds.labels[i]].push(i);
        }
        for class_samples in per_class {
            if class_samples.is_empty() {
                continue;
            }
            let dir = Dirichlet::new_with_size(alpha, n_clients)
                .map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
            let proportions = dir.sample(&mut rng);
            let dealer = WeightedIndex::new(&proportions)
                .map_err(|e| Error::Numeric(format!("degenerate dirichlet draw: {e}")))?;
            for idx in class_samples {
                clients[dealer.sample(&mut rng)].push(idx);
            }
        }
        repair_empty_clients(&mut clients);
    }
    Partition {
        clients,
        descriptor: Heterogeneity::Dirichlet { alpha },
    }
    .validate(max_index(train))
}

/// Pathological non-IID: sort by label, cut into `n_clients * s` contiguous
/// shards, deal `s` randomly ordered shards to each client. Each client then
/// sees at most `s` distinct labels plus boundary spillover.
pub fn partition_pathological(
    train: &[usize],
    ds: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    check_clients(train, n_clients)?;
    if shards_per_client == 0 {
        return Err(Error::Config("shards_per_client must be >= 1".to_string()));
    }
    let num_shards = n_clients * shards_per_client;
    if train.len() < num_shards {
        return Err(Error::Config(format!(
            "{} samples cannot fill {num_shards} shards",
            train.len()
        )));
    }
    let mut sorted = train.to_vec();
    sorted.sort_by_key(|&i| (ds.labels[i], i));

    // Contiguous shards as equal as possible (the first `extra` get one more).
    let base = sorted.len() / num_shards;
    let extra = sorted.len() % num_shards;
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(num_shards);
    let mut cursor = 0;
    for s in 0..num_shards {
        let size = base + usize::from(s < extra);
        shards.push(sorted[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut order: Vec<usize> = (0..num_shards).collect();
    order.shuffle(&mut stream(seed, &[domain::PARTITION, 2]));
    let mut clients = vec![Vec::new(); n_clients];
    for (pos, &shard) in order.iter().enumerate() {
        clients[pos / shards_per_client].extend_from_slice(&shards[shard]);
    }
    Partition {
        clients,
        descriptor: Heterogeneity::Pathological { shards_per_client },
    }
    .validate(max_index(train))
}

fn check_clients(train: &[usize], n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".to_string()));
    }
    if train.len() < n_clients {
        return Err(Error::Config(format!(
            "{} training samples cannot populate {n_clients} clients",
            train.len()
        )));
    }
    Ok(())
}

fn max_index(train: &[usize]) -> usize {
    train.iter().max().map_or(0, |&m| m + 1)
}

fn repair_empty_clients(clients: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = clients.iter().position(Vec::is_empty) else {
            return;
        };
        let largest = clients
            .iter()
            .enumerate()
            .max_by_key(|(id, c)| (c.len(), usize::MAX - id))
            .map(|(id, _)| id)
            .expect("at least one client");
        if clients[largest].len() <= 1 {
            return; // nothing left to steal; validation will report it
        }
        let moved = clients[largest].pop().expect("largest client nonempty");
        clients[empty].push(moved);
    }
}
