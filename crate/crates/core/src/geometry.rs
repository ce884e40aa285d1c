//! Point clouds, distance matrices and synthetic data.

use crate::rng::Stream;
use crate::{Error, Result};

/// Upper bound on the number of points accepted by default.
pub const DEFAULT_POINT_CAP: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    /// Outlier flags from the generator. Only used for export, never for learning.
    outliers: Vec<bool>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_cap(points, DEFAULT_POINT_CAP)
    }

    pub fn with_cap(points: Vec<Vec<f64>>, cap: usize) -> Result<Self> {
        let n = points.len();
        Self::from_rows(points, vec![false; n], cap)
    }

    pub fn with_outliers(points: Vec<Vec<f64>>, outliers: Vec<bool>) -> Result<Self> {
        Self::from_rows(points, outliers, DEFAULT_POINT_CAP)
    }

    fn from_rows(points: Vec<Vec<f64>>, outliers: Vec<bool>, cap: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if points.len() > cap {
            return Err(Error::InvalidInput(format!(
                "{} points exceeds cap {cap}",
                points.len()
            )));
        }
        if outliers.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: outliers.len(),
            });
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidInput("points must have dimension >= 1".into()));
        }
        let mut coords = Vec::with_capacity(dim * points.len());
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("point coordinate".into()));
            }
            coords.extend_from_slice(p);
        }
        Ok(Self {
            dim,
            coords,
            outliers,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn outliers(&self) -> &[bool] {
        &self.outliers
    }

    /// Flat row-major coordinates.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Applies `x -> rotation * x + shift` to every point.
    pub fn transformed(&self, rotation: &[f64], shift: &[f64]) -> Self {
        let d = self.dim;
        assert_eq!(rotation.len(), d * d);
        assert_eq!(shift.len(), d);
        let mut coords = Vec::with_capacity(self.coords.len());
        for p in self.points() {
            for r in 0..d {
                let mut acc = shift[r];
                for c in 0..d {
                    acc += rotation[r * d + c] * p[c];
                }
                coords.push(acc);
            }
        }
        Self {
            dim: d,
            coords,
            outliers: self.outliers.clone(),
        }
    }

    /// Reorders points so that new point `k` is old point `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(self.coords.len());
        for &p in perm {
            coords.extend_from_slice(self.point(p));
        }
        Self {
            dim: self.dim,
            coords,
            outliers: perm.iter().map(|&p| self.outliers[p]).collect(),
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric, zero-diagonal, non-negative dissimilarity matrix.
///
/// The triangle inequality is not required.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates an `n x n` row-major matrix. Symmetry must be exact.
    pub fn from_flat(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistanceMatrix("empty matrix".into()));
        }
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::InvalidDistanceMatrix(format!(
                    "diagonal entry {i} is nonzero"
                )));
            }
            for j in 0..n {
                let v = entries[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "entry ({i},{j}) = {v} is not a finite non-negative number"
                    )));
                }
                if v != entries[j * n + i] {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut flat = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: r.len(),
                });
            }
            flat.extend(r);
        }
        Self::from_flat(n, flat)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.entries
    }

    /// Conjugates by a permutation: new `(a, b)` is old `(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                entries[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self { n, entries }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|v| v * factor).collect(),
        }
    }
}

pub fn pairwise_distances(pc: &PointCloud) -> DistanceMatrix {
    let n = pc.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(pc.point(i), pc.point(j));
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    DistanceMatrix { n, entries }
}

pub fn relative_distances(pc: &PointCloud, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != pc.dim() {
        return Err(Error::DimensionMismatch {
            expected: pc.dim(),
            got: x.len(),
        });
    }
    Ok(pc.points().map(|p| euclid(p, x)).collect())
}

fn directed_hausdorff(a: &PointCloud, b: &PointCloud) -> f64 {
    a.points()
        .map(|p| {
            b.points()
                .map(|q| euclid(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

/// Synthetic classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Class 0: unit circle. Class 1: unit disk.
    CircleVsDiskWithOutliers,
    /// Class 0: circle of radius 1. Class 1: circle of radius 1/2.
    TwoScales,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::CircleVsDiskWithOutliers => "circle_vs_disk",
            SyntheticTask::TwoScales => "two_scales",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle_vs_disk" | "circle_vs_disk_with_outliers" => {
                Some(SyntheticTask::CircleVsDiskWithOutliers)
            }
            "two_scales" => Some(SyntheticTask::TwoScales),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n_points: usize,
    pub n_outliers: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

/// Draws one cloud of the given class.
///
/// The `n_points` signal samples come first (with isotropic Gaussian noise of
/// standard deviation `noise_sigma` per coordinate), followed by
/// `n_outliers` points uniform in the unit disk, which are flagged.
pub fn generate_synthetic(spec: &SyntheticSpec, class: usize, seed: u64) -> Result<LabeledCloud> {
    if spec.n_points < 4 {
        return Err(Error::InvalidInput("n_points must be at least 4".into()));
    }
    if class > 1 {
        return Err(Error::InvalidInput(format!("class {class} out of range")));
    }
    if spec.noise_sigma.is_nan() || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
    }
    let mut rng = Stream::new(seed);
    let mut pts = Vec::with_capacity(spec.n_points + spec.n_outliers);
    for _ in 0..spec.n_points {
        let theta = rng.uniform() * std::f64::consts::TAU;
        let radius = match (spec.task, class) {
            (SyntheticTask::CircleVsDiskWithOutliers, 0) => 1.0,
            (SyntheticTask::CircleVsDiskWithOutliers, _) => rng.uniform().sqrt(),
            (SyntheticTask::TwoScales, 0) => 1.0,
            (SyntheticTask::TwoScales, _) => 0.5,
        };
        let mut p = vec![radius * theta.cos(), radius * theta.sin()];
        if spec.noise_sigma > 0.0 {
            for c in &mut p {
                *c += spec.noise_sigma * rng.normal();
            }
        }
        pts.push(p);
    }
    for _ in 0..spec.n_outliers {
        let theta = rng.uniform() * std::f64::consts::TAU;
        let r = rng.uniform().sqrt();
        pts.push(vec![r * theta.cos(), r * theta.sin()]);
    }
    let mut flags = vec![false; spec.n_points];
    flags.extend(std::iter::repeat_n(true, spec.n_outliers));
    Ok(LabeledCloud {
        cloud: PointCloud::with_outliers(pts, flags)?,
        label: class,
    })
}

/// A balanced dataset: sample `k` has class `k % 2` and seed derived from `(seed, k)`.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<LabeledCloud>> {
    (0..count)
        .map(|k| {
            let sub = Stream::derive(seed, k as u64).next_u64();
            generate_synthetic(spec, k % 2, sub)
        })
        .collect()
}

/// Adds symmetric Gaussian noise to off-diagonal entries, clamped at zero.
///
/// Draws are taken once per unordered pair in row-major upper-triangle order.
pub fn perturb_distance_matrix(d: &DistanceMatrix, sigma: f64, seed: u64) -> DistanceMatrix {
    if sigma == 0.0 {
        return d.clone();
    }
    let n = d.len();
    let mut rng = Stream::new(seed);
    let mut entries = d.entries.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (entries[i * n + j] + sigma * rng.normal()).max(0.0);
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    DistanceMatrix { n, entries }
}

/// Keeps the rows/columns listed in `idx`, in that order.
pub fn submatrix(d: &DistanceMatrix, idx: &[usize]) -> DistanceMatrix {
    let m = idx.len();
    let mut entries = Vec::with_capacity(m * m);
    for &a in idx {
        for &b in idx {
            entries.push(d.get(a, b));
        }
    }
    DistanceMatrix { n: m, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(points: &[&[f64]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    fn unit_square() -> PointCloud {
        cloud(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]])
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances(&cloud(&[&[0.0, 0.0], &[3.0, 4.0]]));
        assert_eq!(d.as_flat(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn single_point() {
        let d = pairwise_distances(&cloud(&[&[7.0]]));
        assert_eq!(d.as_flat(), &[0.0]);
    }

    #[test]
    fn unit_square_distances() {
        let d = pairwise_distances(&unit_square());
        let r2 = 2f64.sqrt();
        let expected = [
            [0.0, 1.0, r2, 1.0],
            [1.0, 0.0, 1.0, r2],
            [r2, 1.0, 0.0, 1.0],
            [1.0, r2, 1.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((d.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relative_distance_cases() {
        let sq = unit_square();
        let d = pairwise_distances(&sq);
        assert_eq!(relative_distances(&sq, sq.point(0)).unwrap(), d.row(0));
        let line = cloud(&[&[0.0], &[2.0]]);
        assert_eq!(relative_distances(&line, &[1.0]).unwrap(), vec![1.0, 1.0]);
        let c = relative_distances(&sq, &[0.5, 0.5]).unwrap();
        for v in c {
            assert!((v - 2f64.sqrt() / 2.0).abs() < 1e-15);
        }
        assert!(matches!(
            relative_distances(&sq, &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hausdorff_cases() {
        let a = cloud(&[&[0.0], &[1.0]]);
        let b = cloud(&[&[0.0]]);
        assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&b, &cloud(&[&[1.0]])).unwrap(), 1.0);
        assert_eq!(hausdorff_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(hausdorff_distance(&b, &a).unwrap(), 1.0);
        assert!(hausdorff_distance(&a, &unit_square()).is_err());
    }

    #[test]
    fn invalid_clouds_rejected() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![vec![]]).is_err());
        assert!(PointCloud::new(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(PointCloud::new(vec![vec![f64::NAN]]).is_err());
        assert!(PointCloud::with_cap(vec![vec![0.0]; 3], 2).is_err());
    }

    #[test]
    fn invalid_matrices_rejected() {
        assert!(DistanceMatrix::from_rows(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(vec![vec![1.0]]).is_err());
        assert!(DistanceMatrix::from_rows(vec![vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(vec![vec![0.0, 1.0]]).is_err());
        // Dissimilarities need not satisfy the triangle inequality.
        let d = DistanceMatrix::from_rows(vec![
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 1.0],
            vec![5.0, 1.0, 0.0],
        ]);
        assert!(d.is_ok());
    }

    #[test]
    fn noiseless_circle_on_unit_radius() {
        let spec = SyntheticSpec {
            task: SyntheticTask::CircleVsDiskWithOutliers,
            n_points: 64,
            n_outliers: 0,
            noise_sigma: 0.0,
        };
        let s = generate_synthetic(&spec, 0, 1).unwrap();
        assert_eq!(s.cloud.len(), 64);
        for p in s.cloud.points() {
            assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_deterministic_and_flags_outliers() {
        let spec = SyntheticSpec {
            task: SyntheticTask::CircleVsDiskWithOutliers,
            n_points: 64,
            n_outliers: 8,
            noise_sigma: 0.05,
        };
        let a = generate_synthetic(&spec, 1, 7).unwrap();
        let b = generate_synthetic(&spec, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cloud.len(), 72);
        assert_eq!(a.cloud.outliers().iter().filter(|&&f| f).count(), 8);
        assert!(a.cloud.outliers()[64..].iter().all(|&f| f));
        for p in a.cloud.points().skip(64) {
            assert!(p[0].hypot(p[1]) <= 1.0);
        }
        let bad = SyntheticSpec { n_points: 3, ..spec };
        assert!(generate_synthetic(&bad, 0, 1).is_err());
    }

    #[test]
    fn dataset_is_balanced() {
        let spec = SyntheticSpec {
            task: SyntheticTask::TwoScales,
            n_points: 8,
            n_outliers: 1,
            noise_sigma: 0.0,
        };
        let ds = generate_dataset(&spec, 10, 3).unwrap();
        assert_eq!(ds.iter().filter(|s| s.label == 0).count(), 5);
        assert_eq!(ds, generate_dataset(&spec, 10, 3).unwrap());
    }

    #[test]
    fn perturb_identity_and_single_draw() {
        let d = DistanceMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(perturb_distance_matrix(&d, 0.0, 5), d);
        let p = perturb_distance_matrix(&d, 0.1, 5);
        let eps = Stream::new(5).normal() * 0.1;
        assert_eq!(p.get(0, 1), 1.0 + eps);
        assert_eq!(p.get(1, 0), p.get(0, 1));
        assert_eq!(p.get(0, 0), 0.0);
        assert!(DistanceMatrix::from_flat(2, p.as_flat().to_vec()).is_ok());
    }

    fn rotation2(theta: f64) -> Vec<f64> {
        vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()]
    }

    proptest! {
        #[test]
        fn distances_invariant_under_rigid_motion(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..12),
            theta in 0.0f64..6.3,
            tx in -10.0f64..10.0,
            ty in -10.0f64..10.0,
            reflect in any::<bool>(),
        ) {
            let pc = PointCloud::new(pts.iter().map(|&(x, y)| vec![x, y]).collect()).unwrap();
            let mut rot = rotation2(theta);
            if reflect {
                rot[1] = -rot[1];
                rot[3] = -rot[3];
            }
            let moved = pc.transformed(&rot, &[tx, ty]);
            let a = pairwise_distances(&pc);
            let b = pairwise_distances(&moved);
            for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn hausdorff_triangle_inequality(
            a in prop::collection::vec(-3.0f64..3.0, 1..6),
            b in prop::collection::vec(-3.0f64..3.0, 1..6),
            c in prop::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let mk = |v: &Vec<f64>| PointCloud::new(v.iter().map(|&x| vec![x]).collect()).unwrap();
            let (a, b, c) = (mk(&a), mk(&b), mk(&c));
            let ab = hausdorff_distance(&a, &b).unwrap();
            let bc = hausdorff_distance(&b, &c).unwrap();
            let ac = hausdorff_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, hausdorff_distance(&b, &a).unwrap());
        }

        #[test]
        fn perturbed_stays_valid(seed in any::<u64>(), sigma in 0.0f64..2.0) {
            let spec = SyntheticSpec {
                task: SyntheticTask::CircleVsDiskWithOutliers,
                n_points: 6,
                n_outliers: 2,
                noise_sigma: 0.1,
            };
            let s = generate_synthetic(&spec, 0, seed).unwrap();
            let d = perturb_distance_matrix(&pairwise_distances(&s.cloud), sigma, seed);
            prop_assert!(DistanceMatrix::from_flat(d.len(), d.as_flat().to_vec()).is_ok());
        }
    }
}
