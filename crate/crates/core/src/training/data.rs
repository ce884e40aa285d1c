//! Datasets, cross-validation splits and the protein-like surrogate data.

use crate::geometry::{generate_dataset, pairwise_distances, perturb_distance_matrix, submatrix, DistanceMatrix, LabeledCloud, PointCloud};
use crate::rng::Stream;
use crate::{Error, Result};

use super::config::{DataSource, ExperimentConfig, ProteinSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Coordinates, when the data has them.
    pub cloud: Option<PointCloud>,
    pub distances: DistanceMatrix,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn from_clouds(clouds: Vec<LabeledCloud>) -> Result<Self> {
        let samples = clouds
            .into_iter()
            .map(|c| Sample {
                distances: pairwise_distances(&c.cloud),
                cloud: Some(c.cloud),
                label: c.label,
            })
            .collect();
        Self::new(samples)
    }

    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let n_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
        if n_classes < 2 {
            return Err(Error::InvalidInput("a classification dataset needs two classes".into()));
        }
        Ok(Self { samples, n_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_coordinates(&self) -> bool {
        self.samples.iter().all(|s| s.cloud.is_some())
    }
}

/// Train/test index lists of a seeded `folds`-fold split. Fold `k` tests on
/// the `k`-th contiguous block of one shuffled permutation.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} samples into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Stream::derive(seed, 0x5eed).shuffle(&mut idx);
    Ok((0..folds)
        .map(|k| {
            let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
            let test = idx[lo..hi].to_vec();
            let train = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
            (train, test)
        })
        .collect())
}

/// Base dissimilarity matrix `1 - |C|` of one surrogate protein type.
///
/// Residues sit on a noisy closed loop (class 0, "closed") or on an arc with
/// a gap of a quarter turn (class 1, "open") in 3-D; correlations decay as
/// `exp(-r^2 / (2 l^2))` with `l = 0.4`.
pub fn protein_base_matrix(class: usize, n: usize, seed: u64) -> Result<DistanceMatrix> {
    if class > 1 || n < 4 {
        return Err(Error::InvalidInput("protein surrogate needs class 0/1 and n >= 4".into()));
    }
    let mut rng = Stream::new(seed);
    let span = if class == 0 { 1.0 } else { 0.75 };
    let radius = rng.uniform_range(0.8, 1.2);
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * span * k as f64 / n as f64;
            vec![
                radius * t.cos() + 0.05 * rng.normal(),
                radius * t.sin() + 0.05 * rng.normal(),
                0.2 * (3.0 * t).sin() + 0.05 * rng.normal(),
            ]
        })
        .collect();
    let d = pairwise_distances(&PointCloud::with_cap(pts, n)?);
    let l2 = 2.0 * 0.4 * 0.4;
    let entries = d.as_flat().iter().map(|r| 1.0 - (-(r * r) / l2).exp()).collect();
    DistanceMatrix::from_flat(n, entries)
}

/// `count` instances balanced over two classes: instance `k` has class
/// `k % 2`, one of that class's base matrices, a random subsample of rows
/// and symmetric off-diagonal noise.
pub fn protein_surrogate(spec: &ProteinSpec, count: usize, seed: u64) -> Result<Dataset> {
    if spec.n_types < 2 || spec.subsample == 0 || spec.subsample > spec.base_points {
        return Err(Error::Config("protein surrogate sizes are inconsistent".into()));
    }
    let bases: Vec<DistanceMatrix> = (0..spec.n_types)
        .map(|t| protein_base_matrix(t % 2, spec.base_points, Stream::derive(seed, t as u64).next_u64()))
        .collect::<Result<_>>()?;
    let per_class = spec.n_types.div_ceil(2);
    let samples = (0..count)
        .map(|k| {
            let class = k % 2;
            let mut rng = Stream::derive(seed ^ 0x9e37_79b9_7f4a_7c15, k as u64);
            let ty = 2 * rng.below(per_class) + class;
            let ty = if ty >= spec.n_types { class } else { ty };
            let mut idx: Vec<usize> = (0..spec.base_points).collect();
            rng.shuffle(&mut idx);
            idx.truncate(spec.subsample);
            idx.sort_unstable();
            let sub = submatrix(&bases[ty], &idx);
            Sample {
                cloud: None,
                distances: perturb_distance_matrix(&sub, spec.noise_sigma, rng.next_u64()),
                label: class,
            }
        })
        .collect();
    Dataset::new(samples)
}

/// The dataset a config describes, unless it points at a directory.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => Dataset::from_clouds(generate_dataset(spec, cfg.n_clouds, cfg.seed)?),
        DataSource::Protein(spec) => protein_surrogate(spec, cfg.n_clouds, cfg.seed),
        DataSource::Directory(d) => Err(Error::Config(format!(
            "dataset directory {d:?} must be loaded by the caller"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_the_indices() {
        let splits = kfold_split(23, 5, 3).unwrap();
        let mut seen = [0; 23];
        for (train, test) in &splits {
            assert_eq!(train.len() + test.len(), 23);
            for &i in test {
                seen[i] += 1;
                assert!(!train.contains(&i));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(kfold_split(500, 5, 0).unwrap()[0].1.len(), 100);
        assert!(kfold_split(3, 5, 0).is_err());
        assert_eq!(kfold_split(23, 5, 3).unwrap(), splits);
    }

    #[test]
    fn protein_surrogate_is_balanced_and_valid() {
        let spec = ProteinSpec {
            base_points: 80,
            subsample: 20,
            ..Default::default()
        };
        let ds = protein_surrogate(&spec, 10, 4).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.samples.iter().filter(|s| s.label == 0).count(), 5);
        for s in &ds.samples {
            assert_eq!(s.distances.len(), 20);
            assert!(s.cloud.is_none());
        }
        assert_eq!(protein_surrogate(&spec, 10, 4).unwrap(), ds);
        assert!(!ds.has_coordinates());
    }
}
