//! Datasets, synthetic data generation and client partitioning.

mod idx;

pub use idx::{load_idx, write_idx};

use crate::error::{Error, Result};
use crate::nn::Batch;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

/// A labeled dataset (or one client's shard of it), rows stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("dataset feature width must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("dataset needs at least two classes"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "{} feature values do not fill {} rows of width {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite features"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of rows carrying each label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Gathers the given rows into a new dataset (duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "row {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            inputs.extend_from_slice(&self.inputs[i * self.input_dim..(i + 1) * self.input_dim]);
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, labels, self.input_dim, self.classes)
    }

    /// Copies the given rows into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let sub = self.subset(indices)?;
        Batch::new(sub.inputs, sub.labels, self.input_dim)
    }

    /// The whole dataset as one batch (for evaluation).
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.input_dim)
    }

    /// Splits off the last `count` rows into a second dataset.
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.len() {
            return Err(Error::invalid(format!(
                "cannot split {count} rows off a dataset of {}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..self.len() - count).collect();
        let tail: Vec<usize> = (self.len() - count..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

/// Draws a balanced Gaussian-blob classification problem: class centroids
/// at least `separation` apart, unit-variance isotropic noise, class sizes
/// differing by at most one. Row order is shuffled.
pub fn synthetic_classification<R: Rng + ?Sized>(
    n: usize,
    input_dim: usize,
    classes: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!(
            "cannot balance {classes} classes over {n} rows"
        )));
    }
    if input_dim == 0 {
        return Err(Error::invalid("synthetic data needs at least one feature"));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(Error::invalid(format!(
            "class separation must be positive, got {separation}"
        )));
    }
    if input_dim == 1 && classes > 2 {
        return Err(Error::invalid(
            "one-dimensional centroids support at most two classes",
        ));
    }

    // Centroids on a regular polygon in the first two dimensions: adjacent
    // vertices (the closest pair) sit exactly `separation` apart. Two
    // classes degenerate to +-separation/2 along the first axis.
    let mut centroids = vec![vec![0.0; input_dim]; classes];
    if classes == 2 {
        centroids[0][0] = -separation / 2.0;
        centroids[1][0] = separation / 2.0;
    } else {
        let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            centroid[0] = radius * angle.cos();
            centroid[1] = radius * angle.sin();
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut inputs = vec![0.0; n * input_dim];
    let mut labels = vec![0usize; n];
    for (slot, &row) in order.iter().enumerate() {
        let label = slot % classes;
        labels[row] = label;
        for j in 0..input_dim {
            let noise: f64 = StandardNormal.sample(rng);
            inputs[row * input_dim + j] = centroids[label][j] + noise;
        }
    }
    Dataset::new(inputs, labels, input_dim, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

/// How to split a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    /// Concentration of the per-client class distribution; smaller means
    /// more skewed shards. Ignored for IID splits.
    pub alpha: f64,
}

/// Splits `dataset` into one shard per client.
///
/// IID: a global shuffle dealt into near-equal shards (sizes differ by at
/// most one). Dirichlet: each client draws a class distribution from
/// Dirichlet(alpha), then every class's rows are allocated to clients with
/// probability proportional to the clients' weight on that class. Every
/// shard is guaranteed non-empty by moving single rows from the largest
/// shard if needed; the union of shards is exactly the input dataset.
pub fn partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    let m = spec.clients;
    let n = dataset.len();
    if m == 0 {
        return Err(Error::invalid("partition needs at least one client"));
    }
    if n < m {
        return Err(Error::invalid(format!(
            "cannot hand {n} rows to {m} clients without empty shards"
        )));
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); m];
    match spec.kind {
        PartitionKind::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let base = n / m;
            let extra = n % m;
            let mut cursor = 0;
            for (c, shard) in assignment.iter_mut().enumerate() {
                let take = base + usize::from(c < extra);
                shard.extend_from_slice(&order[cursor..cursor + take]);
                cursor += take;
            }
        }
        PartitionKind::Dirichlet => {
            if !spec.alpha.is_finite() || spec.alpha <= 0.0 {
                return Err(Error::invalid(format!(
                    "concentration must be positive, got {}",
                    spec.alpha
                )));
            }
            let classes = dataset.classes();
            let q = draw_client_class_weights(m, classes, spec.alpha, rng)?;
            for c in 0..classes {
                let mut pool: Vec<usize> = (0..n).filter(|&i| dataset.labels()[i] == c).collect();
                pool.shuffle(rng);
                let total: f64 = (0..m).map(|cl| q[cl][c]).sum();
                if total <= 0.0 {
                    // nobody asked for this class; spread it uniformly
                    for (j, &row) in pool.iter().enumerate() {
                        assignment[j % m].push(row);
                    }
                    continue;
                }
                for &row in &pool {
                    let mut u = rng.random::<f64>() * total;
                    let mut chosen = m - 1;
                    for (cl, qc) in q.iter().enumerate() {
                        u -= qc[c];
                        if u < 0.0 {
                            chosen = cl;
                            break;
                        }
                    }
                    assignment[chosen].push(row);
                }
            }
        }
    }

    // no client may end up with nothing to train on
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = (0..m)
            .max_by_key(|&c| assignment[c].len())
            .expect("at least one shard");
        let take = rng.random_range(0..assignment[largest].len());
        let row = assignment[largest].swap_remove(take);
        assignment[empty].push(row);
    }

    assignment
        .iter()
        .map(|rows| dataset.subset(rows))
        .collect()
}

fn draw_client_class_weights<R: Rng + ?Sized>(
    clients: usize,
    classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::invalid(format!("bad concentration {alpha}: {e}")))?;
    let mut q = Vec::with_capacity(clients);
    for _ in 0..clients {
        let mut draw: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let mut total: f64 = draw.iter().sum();
        let mut attempts = 0;
        while total <= 0.0 || !total.is_finite() {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::invalid(format!(
                    "concentration {alpha} is too small to sample class weights"
                )));
            }
            draw = (0..classes).map(|_| gamma.sample(rng)).collect();
            total = draw.iter().sum();
        }
        for v in &mut draw {
            *v /= total;
        }
        q.push(draw);
    }
    Ok(q)
}
