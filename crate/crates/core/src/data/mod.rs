//! Datasets with a protected-group attribute, loaders for the census and
//! digit corpora, seeded splitting, and the on-disk cache format.

mod adult;
mod cache;
mod dutch;
mod mnist;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adult::{load_adult, one_hot_blocks, read_adult_rows, AdultOptions};
pub use cache::{read_cache, write_cache};
pub use dutch::{encode_dutch, load_dutch, read_table, DutchOptions, RawTable};
pub use mnist::{load_mnist_unbalanced, read_idx_images, read_idx_labels, MnistOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Full,
}

/// Feature matrix with class labels and a protected-group id per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub name: String,
    pub split: Split,
    dim: usize,
    /// Row-major `n x dim`.
    features: Vec<f64>,
    labels: Vec<u32>,
    groups: Vec<u32>,
    num_classes: usize,
    group_names: Vec<String>,
    feature_names: Vec<String>,
}

impl GroupedDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u32>,
        groups: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if features.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: n * dim,
                actual: features.len(),
            });
        }
        if groups.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: groups.len(),
            });
        }
        if num_classes < 2 {
            return Err(Error::config("a dataset needs at least two classes"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite feature value"));
        }
        let max_group = groups.iter().copied().max().map_or(0, |g| g as usize + 1);
        Ok(GroupedDataset {
            name: name.into(),
            split,
            dim,
            features,
            labels,
            groups,
            num_classes,
            group_names: (0..max_group).map(|g| g.to_string()).collect(),
            feature_names: (0..dim).map(|j| format!("x{j}")).collect(),
        })
    }

    pub fn with_group_names(mut self, names: Vec<String>) -> Self {
        self.group_names = names;
        self
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        debug_assert_eq!(names.len(), self.dim);
        self.feature_names = names;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn group(&self, i: usize) -> u32 {
        self.groups[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn groups(&self) -> &[u32] {
        &self.groups
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn group_name(&self, g: u32) -> String {
        self.group_names
            .get(g as usize)
            .cloned()
            .unwrap_or_else(|| g.to_string())
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn group_indices(&self, g: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == g).collect()
    }

    /// Sorted distinct group ids present in the data.
    pub fn group_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.group_counts().into_keys().collect();
        ids.sort_unstable();
        ids
    }

    pub fn group_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &g in &self.groups {
            *counts.entry(g).or_insert(0) += 1;
        }
        counts
    }

    /// Rows `indices` copied into a new dataset, in the given order.
    pub fn select(&self, indices: &[usize], split: Split) -> GroupedDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        GroupedDataset {
            name: self.name.clone(),
            split,
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            num_classes: self.num_classes,
            group_names: self.group_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Keep each row independently with probability `fraction`.
    pub fn bernoulli_subsample(&self, fraction: f64, seed: u64) -> GroupedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<usize> = (0..self.len())
            .filter(|_| rng.random::<f64>() < fraction)
            .collect();
        self.select(&keep, self.split)
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }
}

/// Seeded shuffle split into `(train, test)` with `round(fraction * n)` training rows.
pub fn split(
    dataset: &GroupedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut order = dataset.all_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (fraction * dataset.len() as f64).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);
    Ok((
        dataset.select(train_idx, Split::Train),
        dataset.select(test_idx, Split::Test),
    ))
}

/// Per-column z-score statistics fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &GroupedDataset, columns: &[usize]) -> Self {
        let n = data.len().max(1) as f64;
        let mut means = Vec::with_capacity(columns.len());
        let mut stds = Vec::with_capacity(columns.len());
        for &c in columns {
            let mean = (0..data.len()).map(|i| data.row(i)[c]).sum::<f64>() / n;
            let var = (0..data.len())
                .map(|i| (data.row(i)[c] - mean).powi(2))
                .sum::<f64>()
                / n;
            means.push(mean);
            stds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer {
            columns: columns.to_vec(),
            means,
            stds,
        }
    }

    pub fn apply(&self, data: &mut GroupedDataset) {
        let dim = data.dim();
        let n = data.len();
        let features = data.features_mut();
        for i in 0..n {
            for (k, &c) in self.columns.iter().enumerate() {
                let v = &mut features[i * dim + c];
                *v = (*v - self.means[k]) / self.stds[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> GroupedDataset {
        let features = (0..n * 2).map(|v| v as f64).collect();
        let labels = (0..n).map(|i| (i % 2) as u32).collect();
        let groups = (0..n).map(|i| (i % 3 == 0) as u32).collect();
        GroupedDataset::new("toy", Split::Full, 2, features, labels, groups, 2).unwrap()
    }

    #[test]
    fn split_is_exhaustive_and_disjoint() {
        let d = toy(101);
        let (tr, te) = split(&d, 0.8, 3).unwrap();
        assert_eq!(tr.len() + te.len(), 101);
        let mut firsts: Vec<f64> = tr
            .all_indices()
            .iter()
            .map(|&i| tr.row(i)[0])
            .chain(te.all_indices().iter().map(|&i| te.row(i)[0]))
            .collect();
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        firsts.dedup();
        assert_eq!(firsts.len(), 101);
    }

    #[test]
    fn split_is_seeded() {
        let d = toy(50);
        assert_eq!(split(&d, 0.5, 9).unwrap(), split(&d, 0.5, 9).unwrap());
        assert_ne!(split(&d, 0.5, 9).unwrap().0, split(&d, 0.5, 10).unwrap().0);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split(&toy(4), 1.0, 0).is_err());
        assert!(split(&toy(4), 0.0, 0).is_err());
    }

    #[test]
    fn new_rejects_mismatched_shapes() {
        let err = GroupedDataset::new("x", Split::Full, 3, vec![0.0; 5], vec![0, 1], vec![0, 0], 2);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = GroupedDataset::new("x", Split::Full, 1, vec![0.0; 2], vec![0, 2], vec![0, 0], 2);
        assert!(err.is_err());
    }

    #[test]
    fn standardizer_fits_train_only() {
        let d = toy(40);
        let (mut tr, mut te) = split(&d, 0.5, 1).unwrap();
        let st = Standardizer::fit(&tr, &[0]);
        st.apply(&mut tr);
        st.apply(&mut te);
        let m: f64 = (0..tr.len()).map(|i| tr.row(i)[0]).sum::<f64>() / tr.len() as f64;
        assert!(m.abs() < 1e-12);
        let mt: f64 = (0..te.len()).map(|i| te.row(i)[0]).sum::<f64>() / te.len() as f64;
        assert!(mt.abs() > 1e-6);
    }
}
