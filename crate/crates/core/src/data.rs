//! Synthetic Gaussian-mixture data and non-IID client partitioning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag, SimRng};
use crate::tensor::{random_orthogonal_with, FeatureMatrix};

/// Upper bound on Dirichlet redraws before giving up.
pub const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Fraction of each class kept for training.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::contract(
                "LabeledDataset::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(
                "LabeledDataset::new",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(Self { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn distinct_classes(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParams {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 16,
            samples_per_class: 100,
            class_separation: 3.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        let op = "MixtureParams";
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::contract(op, "num_classes and input_dim must be positive"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::contract(op, "samples_per_class must be at least 2 for a train/test split"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::contract(op, format!("class_separation must be positive, got {}", self.class_separation)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::contract(op, format!("noise_scale must be nonnegative, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

/// Generated data with a per-class stratified train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// One row per class.
    pub class_means: FeatureMatrix,
}

/// Isotropic Gaussian around a random unit direction scaled by
/// `class_separation`, per class. The first 80% (rounded) of each class's
/// draws go to the training split.
pub fn generate_mixture(params: &MixtureParams) -> Result<MixtureDataset> {
    params.validate()?;
    let MixtureParams { num_classes, input_dim, samples_per_class, class_separation, noise_scale, seed } = *params;
    let mut rng = rng_from(seed, &[tag::DATA]);

    let mut means = FeatureMatrix::random_normal(num_classes, input_dim, &mut rng);
    for c in 0..num_classes {
        let len = means.row_norm(c);
        means.row_mut(c).iter_mut().for_each(|x| *x *= class_separation / len);
    }

    let n_train = libm::round(samples_per_class as f64 * TRAIN_FRACTION)
        .clamp(1.0, (samples_per_class - 1) as f64) as usize;
    let n_test = samples_per_class - n_train;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        for s in 0..samples_per_class {
            let (feats, labels) = if s < n_train { &mut train } else { &mut test };
            feats.extend(means.row(c).iter().map(|m| m + noise_scale * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Ok(MixtureDataset {
        train: LabeledDataset::new(FeatureMatrix::new(n_train * num_classes, input_dim, train.0)?, train.1, num_classes)?,
        test: LabeledDataset::new(FeatureMatrix::new(n_test * num_classes, input_dim, test.0)?, test.1, num_classes)?,
        class_means: means,
    })
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Rows of the source training split held by this client.
    pub train_indices: Vec<usize>,
    /// Rows of the source test split held by this client.
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme", deny_unknown_fields)]
pub enum PartitionScheme {
    /// Label shift: per-class client proportions drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
    /// Feature shift: label-balanced IID split, then each client's features
    /// pass through its own orthogonal map (if `rotate`) and a translation of
    /// length `shift_scale`.
    DomainShift { shift_scale: f64, rotate: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn apply(&self, ds: &MixtureDataset) -> Result<Vec<ClientShard>> {
        match self.scheme {
            PartitionScheme::Dirichlet { alpha } => partition_dirichlet(ds, alpha, self.num_clients, self.seed),
            PartitionScheme::DomainShift { shift_scale, rotate } => {
                partition_domain_shift(ds, self.num_clients, shift_scale, rotate, self.seed)
            }
        }
    }
}

fn sample_dirichlet(alpha: f64, n: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::contract("partition_dirichlet", format!("alpha {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Split `indices` into consecutive runs sized by cumulative `proportions`.
fn split_by_proportions(indices: &[usize], proportions: &[f64]) -> Vec<Vec<usize>> {
    let n = indices.len();
    let mut out = Vec::with_capacity(proportions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (k, p) in proportions.iter().enumerate() {
        cum += p;
        let end = if k + 1 == proportions.len() { n } else { ((cum * n as f64) as usize).min(n).max(start) };
        out.push(indices[start..end].to_vec());
        start = end;
    }
    out
}

fn shuffled(mut v: Vec<usize>, rng: &mut SimRng) -> Vec<usize> {
    v.shuffle(rng);
    v
}

fn build_shards(
    ds: &MixtureDataset,
    train_parts: Vec<Vec<usize>>,
    test_parts: Vec<Vec<usize>>,
) -> Result<Vec<ClientShard>> {
    train_parts
        .into_iter()
        .zip(test_parts)
        .enumerate()
        .map(|(client, (mut tr, mut te))| {
            tr.sort_unstable();
            te.sort_unstable();
            Ok(ClientShard {
                client,
                train: ds.train.subset(&tr)?,
                test: ds.test.subset(&te)?,
                train_indices: tr,
                test_indices: te,
            })
        })
        .collect()
}

/// Label-shift partition.
///
/// For each class a proportion vector over clients is drawn from `Dir(alpha)`
/// and applied to both the class's (shuffled) training and test samples, so a
/// client's test split follows its training label distribution. Draws are
/// repeated until every client has at least two training classes and a
/// non-empty test split.
pub fn partition_dirichlet(ds: &MixtureDataset, alpha: f64, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::contract("partition_dirichlet", format!("alpha must be positive, got {alpha}")));
    }
    if num_clients < 2 {
        return Err(Error::contract("partition_dirichlet", format!("needs at least 2 clients, got {num_clients}")));
    }
    let mut rng = rng_from(seed, &[tag::PARTITION]);
    let train_by_class = ds.train.class_indices();
    let test_by_class = ds.test.class_indices();

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut train_parts = vec![Vec::new(); num_clients];
        let mut test_parts = vec![Vec::new(); num_clients];
        let mut train_classes = vec![0usize; num_clients];
        for (tr, te) in train_by_class.iter().zip(&test_by_class) {
            let props = sample_dirichlet(alpha, num_clients, &mut rng)?;
            let tr_split = split_by_proportions(&shuffled(tr.clone(), &mut rng), &props);
            let te_split = split_by_proportions(&shuffled(te.clone(), &mut rng), &props);
            for (k, (a, b)) in tr_split.into_iter().zip(te_split).enumerate() {
                if !a.is_empty() {
                    train_classes[k] += 1;
                }
                train_parts[k].extend(a);
                test_parts[k].extend(b);
            }
        }
        let ok = (0..num_clients).all(|k| train_classes[k] >= 2 && !test_parts[k].is_empty());
        if ok {
            return build_shards(ds, train_parts, test_parts);
        }
    }
    Err(Error::Partition {
        attempts: MAX_PARTITION_ATTEMPTS,
        detail: format!(
            "could not give each of {num_clients} clients two classes and a test sample at alpha = {alpha}; \
             try a larger alpha or fewer clients"
        ),
    })
}

/// Feature-shift partition: each client becomes one synthetic domain.
pub fn partition_domain_shift(
    ds: &MixtureDataset,
    num_clients: usize,
    shift_scale: f64,
    rotate: bool,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    const OP: &str = "partition_domain_shift";
    if num_clients < 2 {
        return Err(Error::contract(OP, format!("needs at least 2 clients, got {num_clients}")));
    }
    if !(shift_scale >= 0.0 && shift_scale.is_finite()) {
        return Err(Error::contract(OP, format!("shift_scale must be nonnegative, got {shift_scale}")));
    }
    if ds.test.len() < num_clients {
        return Err(Error::contract(OP, format!("{} test samples for {num_clients} clients", ds.test.len())));
    }
    let mut rng = rng_from(seed, &[tag::PARTITION]);
    // Round-robin dealing continues across classes, so shard sizes differ by
    // at most one and every class is spread evenly.
    let deal = |by_class: Vec<Vec<usize>>, rng: &mut SimRng| {
        let mut parts = vec![Vec::new(); num_clients];
        let mut next = 0;
        for idx in by_class {
            for i in shuffled(idx, rng) {
                parts[next].push(i);
                next = (next + 1) % num_clients;
            }
        }
        parts
    };
    let train_parts = deal(ds.train.class_indices(), &mut rng);
    let test_parts = deal(ds.test.class_indices(), &mut rng);
    let mut shards = build_shards(ds, train_parts, test_parts)?;

    let dim = ds.train.input_dim();
    for shard in &mut shards {
        let mut domain_rng = rng_from(seed, &[tag::DOMAIN, shard.client as u64]);
        let rotation = if rotate { Some(random_orthogonal_with(dim, &mut domain_rng)) } else { None };
        let mut direction: Vec<f64> = (0..dim).map(|_| domain_rng.sample(StandardNormal)).collect();
        let len = crate::tensor::norm(&direction);
        direction.iter_mut().for_each(|x| *x *= shift_scale / len);
        for split in [&mut shard.train, &mut shard.test] {
            let mut f = split.features.clone();
            if let Some(r) = &rotation {
                f = f.matmul(r)?;
            }
            split.features = f.add_row_vector(&direction)?;
        }
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> MixtureDataset {
        generate_mixture(&MixtureParams { seed, ..MixtureParams::default() }).unwrap()
    }

    #[test]
    fn mixture_shapes_and_split() {
        let ds = small(1);
        assert_eq!(ds.train.len(), 800);
        assert_eq!(ds.test.len(), 200);
        assert_eq!(ds.train.class_counts(), vec![80; 10]);
        assert_eq!(ds.test.class_counts(), vec![20; 10]);
        for c in 0..10 {
            assert!((ds.class_means.row_norm(c) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_collapses_to_means() {
        let ds = generate_mixture(&MixtureParams { noise_scale: 0.0, samples_per_class: 5, ..MixtureParams::default() }).unwrap();
        for (i, &y) in ds.train.labels.iter().enumerate() {
            assert_eq!(ds.train.features.row(i), ds.class_means.row(y));
        }
    }

    #[test]
    fn mixture_is_deterministic() {
        assert_eq!(small(4), small(4));
        assert_ne!(small(4).train.features, small(5).train.features);
    }

    #[test]
    fn well_separated_classes_are_nearest_mean_separable() {
        let ds = generate_mixture(&MixtureParams { class_separation: 20.0, noise_scale: 0.5, ..MixtureParams::default() }).unwrap();
        // Nearest-mean classifier with means estimated on the training split.
        let mut means = vec![vec![0.0; 16]; 10];
        for (i, &y) in ds.train.labels.iter().enumerate() {
            for (m, x) in means[y].iter_mut().zip(ds.train.features.row(i)) {
                *m += x / 80.0;
            }
        }
        for (i, &y) in ds.test.labels.iter().enumerate() {
            let x = ds.test.features.row(i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let pred = (0..10).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            assert_eq!(pred, y);
        }
    }

    fn assert_partition(ds: &MixtureDataset, shards: &[ClientShard]) {
        let mut seen_train = vec![false; ds.train.len()];
        let mut seen_test = vec![false; ds.test.len()];
        for s in shards {
            assert!(!s.train.is_empty() && !s.test.is_empty());
            for &i in &s.train_indices {
                assert!(!seen_train[i], "train row {i} assigned twice");
                seen_train[i] = true;
            }
            for &i in &s.test_indices {
                assert!(!seen_test[i], "test row {i} assigned twice");
                seen_test[i] = true;
            }
            let labels: Vec<usize> = s.train_indices.iter().map(|&i| ds.train.labels[i]).collect();
            assert_eq!(labels, s.train.labels);
        }
        assert!(seen_train.iter().all(|&b| b));
        assert!(seen_test.iter().all(|&b| b));
    }

    #[test]
    fn dirichlet_partition_is_disjoint_and_covering() {
        let ds = small(2);
        for (alpha, seed) in [(0.1, 1), (0.5, 2), (1.0, 3), (100.0, 4)] {
            let shards = partition_dirichlet(&ds, alpha, 8, seed).unwrap();
            assert_eq!(shards.len(), 8);
            assert_partition(&ds, &shards);
            assert!(shards.iter().all(|s| s.train.distinct_classes() >= 2));
        }
    }

    #[test]
    fn dirichlet_concentration_limit_is_iid() {
        let ds = small(3);
        let shards = partition_dirichlet(&ds, 1e6, 4, 9).unwrap();
        for s in &shards {
            let total = s.train.len() as f64;
            for count in s.train.class_counts() {
                assert!((count as f64 / total - 0.1).abs() <= 0.05 * 0.1 + 1.0 / total);
            }
        }
    }

    #[test]
    fn small_alpha_leaves_clients_missing_classes() {
        let ds = small(5);
        for seed in 0..5 {
            let shards = partition_dirichlet(&ds, 0.1, 8, seed).unwrap();
            let most_missing = shards.iter().map(|s| 10 - s.train.distinct_classes()).max().unwrap();
            assert!(most_missing >= 3, "seed {seed}: {most_missing}");
        }
    }

    #[test]
    fn heterogeneity_decreases_with_alpha() {
        let ds = small(6);
        let mean_tv = |alpha: f64| {
            let mut acc = 0.0;
            for seed in 0..10 {
                let shards = partition_dirichlet(&ds, alpha, 8, seed).unwrap();
                for s in &shards {
                    let n = s.train.len() as f64;
                    acc += s.train.class_counts().iter().map(|&c| (c as f64 / n - 0.1).abs()).sum::<f64>() / 2.0;
                }
            }
            acc / 80.0
        };
        assert!(mean_tv(0.1) > mean_tv(1.0));
    }

    #[test]
    fn impossible_partition_reports_failure() {
        let ds = generate_mixture(&MixtureParams { num_classes: 2, samples_per_class: 5, ..MixtureParams::default() }).unwrap();
        let err = partition_dirichlet(&ds, 0.01, 8, 0).unwrap_err();
        assert!(matches!(err, Error::Partition { .. }));
        assert!(partition_dirichlet(&ds, -1.0, 8, 0).is_err());
        assert!(partition_dirichlet(&ds, 1.0, 1, 0).is_err());
    }

    #[test]
    fn domain_shift_without_transform_is_iid_split() {
        let ds = small(7);
        let shards = partition_domain_shift(&ds, 4, 0.0, false, 1).unwrap();
        assert_partition(&ds, &shards);
        for s in &shards {
            assert_eq!(s.train.class_counts(), vec![20; 10]);
            for (k, &i) in s.train_indices.iter().enumerate() {
                assert_eq!(s.train.features.row(k), ds.train.features.row(i));
            }
        }
    }

    #[test]
    fn domain_shift_preserves_labels() {
        let ds = small(8);
        let shards = partition_domain_shift(&ds, 5, 2.0, true, 3).unwrap();
        assert_partition(&ds, &shards);
        for s in &shards {
            assert_ne!(s.train.features.row(0), ds.train.features.row(s.train_indices[0]));
        }
    }

    #[test]
    fn domain_mean_distance_grows_with_shift() {
        let ds = small(9);
        let mean_distance = |scale: f64| {
            let mut acc = 0.0;
            for seed in 0..10 {
                let shards = partition_domain_shift(&ds, 4, scale, true, seed).unwrap();
                let means: Vec<Vec<f64>> = shards.iter().map(|s| s.train.features.column_means()).collect();
                for i in 0..4 {
                    for j in i + 1..4 {
                        acc += crate::tensor::norm(&means[i].iter().zip(&means[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
                    }
                }
            }
            acc
        };
        let d: Vec<f64> = [0.0, 1.0, 2.0, 4.0].iter().map(|&s| mean_distance(s)).collect();
        assert!(d.windows(2).all(|w| w[0] < w[1]), "{d:?}");
    }
}
