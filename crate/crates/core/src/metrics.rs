//! Accuracy bookkeeping, confusion matrices and the neural-collapse metric.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Relative cutoff below which eigenvalues of the between-class covariance are
/// treated as zero when forming its pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-10;

/// Encoder features with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    dim: usize,
    features: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

impl FeatureBundle {
    pub fn new(features: Vec<Vec<f64>>, classes: Vec<usize>) -> Result<Self> {
        if features.len() != classes.len() {
            return contract(format!(
                "{} features for {} class ids",
                features.len(),
                classes.len()
            ));
        }
        let Some(first) = features.first() else {
            return contract("empty feature bundle");
        };
        let dim = first.len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return contract("features must share a positive dimension");
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature bundle"));
        }
        Ok(Self {
            dim,
            features,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Distinct classes in first-appearance order.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut seen = vec![];
        for &c in &self.classes {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen
    }
}

/// Within-class covariance (normalized by N) and between-class covariance
/// (normalized by K).
pub fn scatter_matrices(b: &FeatureBundle) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let d = b.dim;
    let ids = b.class_ids();
    let k = ids.len();
    let n = b.len() as f64;
    let mut means = vec![DVector::<f64>::zeros(d); k];
    let mut counts = vec![0usize; k];
    let slot = |c: usize| ids.iter().position(|&x| x == c).expect("known class");
    for (f, &c) in b.features.iter().zip(&b.classes) {
        let s = slot(c);
        means[s] += DVector::from_column_slice(f);
        counts[s] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        *m /= c as f64;
    }
    let mut sw = DMatrix::<f64>::zeros(d, d);
    for (f, &c) in b.features.iter().zip(&b.classes) {
        let r = DVector::from_column_slice(f) - &means[slot(c)];
        sw.ger(1.0, &r, &r, 1.0);
    }
    sw /= n;
    let global = means.iter().fold(DVector::zeros(d), |acc, m| acc + m) / k as f64;
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for m in &means {
        let r = m - &global;
        sb.ger(1.0, &r, &r, 1.0);
    }
    sb /= k as f64;
    (sw, sb, k)
}

/// `trace(Σ_W Σ_B†) / K`.
pub fn nc_metric(b: &FeatureBundle) -> Result<f64> {
    let (sw, sb, k) = scatter_matrices(b);
    if k < 2 {
        return contract(format!("neural collapse needs at least 2 classes, got {k}"));
    }
    let eig = SymmetricEigen::new(sb);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let cutoff = PINV_RCOND * max;
    let mut trace = 0.0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let u = eig.eigenvectors.column(i);
            trace += u.dot(&(&sw * u)) / lam;
        }
    }
    Ok(trace / k as f64)
}

/// One NC value per feature bundle, in order.
pub fn nc_trajectory(snapshots: &[FeatureBundle]) -> Result<Vec<f64>> {
    snapshots.iter().map(nc_metric).collect()
}

/// Counts indexed by (true class, predicted class) in label-pool order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.classes();
        if truth >= n || pred >= n {
            return contract(format!("class ({truth}, {pred}) outside a {n}-class matrix"));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// Correct over total.
pub fn final_accuracy(c: &ConfusionMatrix) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return contract("accuracy of an empty evaluation");
    }
    Ok(c.correct() as f64 / total as f64)
}

/// Accuracy over the examples whose true class is in `classes`.
pub fn subset_accuracy(c: &ConfusionMatrix, classes: &[usize]) -> Result<f64> {
    let total: u64 = classes.iter().map(|&k| c.counts[k].iter().sum::<u64>()).sum();
    if total == 0 {
        return contract("accuracy of an empty evaluation");
    }
    let correct: u64 = classes.iter().map(|&k| c.counts[k][k]).sum();
    Ok(correct as f64 / total as f64)
}

/// Fraction of all predictions that land in `last_task_classes`.
pub fn last_task_bias(c: &ConfusionMatrix, last_task_classes: &[usize]) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return contract("bias of an empty evaluation");
    }
    let hits: u64 = c
        .counts
        .iter()
        .map(|r| last_task_classes.iter().map(|&k| r[k]).sum::<u64>())
        .sum();
    Ok(hits as f64 / total as f64)
}

/// `rows[t][i]`: accuracy on task `i` after training task `t`, `i ≤ t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the row for the next task; it must have one entry per task seen.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return contract(format!(
                "accuracy row {} has {} entries",
                self.rows.len(),
                row.len()
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after)?.get(task).copied()
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
