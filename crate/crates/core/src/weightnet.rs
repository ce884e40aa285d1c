//! Isometry-invariant weight network.
//!
//! Every quantity here is computed from distances only:
//!
//! ```text
//! g1(x)   = phi2( sum_j phi1(d(x, x_j)) )              pointwise feature, dim 8
//! g2(x_i) = phi4( sum_j phi3(D[i][j]) )
//! h(X)    = phi5( sum_i g2(x_i) )                      cloud feature, dim 16
//! f(X, x) = phi6( [h(X); g1(x)] )                      weight
//! ```
//!
//! Sums include the self-distance `D[i][i] = 0`. To make the pooled sums
//! bitwise independent of point labels, each distance row is sorted before
//! pooling and points are pooled in the lexicographic order of their sorted
//! rows. Points with identical sorted rows contribute identical summands, so
//! ties in that order do not matter.

use std::cmp::Ordering;

use crate::autodiff::{Matrix, Mlp, MlpSpec, Mode, ParamId, ParameterStore, Tape, Var};
use crate::filtration::WeightVector;
use crate::geometry::DistanceMatrix;
use crate::rng::Stream;
use crate::{Error, Result};

pub const PRESETS: &[&str] = &["full", "r1", "r2", "r3", "r4", "desk"];

/// How the last affine layer of `phi6` starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalInit {
    FanIn,
    /// `N(0, std^2)` entries; a small `std` starts training near the plain
    /// Rips filtration.
    Gaussian(f64),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightNetConfig {
    /// Layer sizes of `phi1` through `phi6`.
    pub phi: [Vec<usize>; 6],
    pub batch_norm: bool,
    /// Dropout on the last two layers of `phi2` and `phi5`.
    pub dropout_p: f64,
    pub final_init: FinalInit,
    /// Clamp weights at zero from below. Off by default: negative weights are
    /// legal in the weighted Rips construction.
    pub clamp_nonnegative: bool,
}

fn sizes(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

impl WeightNetConfig {
    /// Full-size architecture with batch norm and dropout.
    pub fn full() -> Self {
        Self {
            phi: [
                sizes(&[1, 64, 128, 256]),
                sizes(&[256, 128, 64, 8]),
                sizes(&[1, 64, 128, 256]),
                sizes(&[256, 256, 256, 256]),
                sizes(&[256, 128, 64, 16]),
                sizes(&[24, 256, 512, 256, 1]),
            ],
            batch_norm: true,
            dropout_p: 0.5,
            final_init: FinalInit::FanIn,
            clamp_nonnegative: false,
        }
    }

    /// Small network for single-core runs.
    pub fn desk() -> Self {
        Self {
            phi: [
                sizes(&[1, 32, 32]),
                sizes(&[32, 16, 8]),
                sizes(&[1, 32, 32]),
                sizes(&[32, 32]),
                sizes(&[32, 16]),
                sizes(&[24, 32, 1]),
            ],
            batch_norm: false,
            dropout_p: 0.0,
            final_init: FinalInit::FanIn,
            clamp_nonnegative: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::full();
        let r1 = [
            sizes(&[1, 64, 128]),
            sizes(&[128, 64, 8]),
            sizes(&[1, 64, 128]),
            sizes(&[128, 128, 128, 128]),
            sizes(&[128, 64, 16]),
        ];
        match name {
            "full" => {}
            "r1" => c.phi[..5].clone_from_slice(&r1),
            "r2" => c.phi[5] = sizes(&[24, 128, 128, 1]),
            "r3" | "r4" => {
                c.phi[..5].clone_from_slice(&r1);
                c.phi[5] = sizes(&[24, 128, 128, 1]);
                if name == "r4" {
                    c.phi[3] = sizes(&[128, 128]);
                }
            }
            "desk" => c = Self::desk(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown weight-net preset {name:?}; expected one of {PRESETS:?}"
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phi;
        if p.iter().any(|s| s.len() < 2 || s.contains(&0)) {
            return Err(Error::Config("every phi needs at least two positive sizes".into()));
        }
        let dim = |s: &Vec<usize>| (s[0], *s.last().unwrap());
        let checks = [
            (dim(&p[0]).0, 1, "phi1 input"),
            (dim(&p[2]).0, 1, "phi3 input"),
            (dim(&p[1]).0, dim(&p[0]).1, "phi2 input"),
            (dim(&p[3]).0, dim(&p[2]).1, "phi4 input"),
            (dim(&p[4]).0, dim(&p[3]).1, "phi5 input"),
            (dim(&p[5]).0, dim(&p[4]).1 + dim(&p[1]).1, "phi6 input"),
            (dim(&p[5]).1, 1, "phi6 output"),
        ];
        for (got, expected, what) in checks {
            if got != expected {
                return Err(Error::Config(format!("{what} is {got}, expected {expected}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout probability must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn g1_dim(&self) -> usize {
        *self.phi[1].last().unwrap()
    }

    pub fn h_dim(&self) -> usize {
        *self.phi[4].last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct WeightNet {
    pub config: WeightNetConfig,
    phi: [Mlp; 6],
}

fn sorted_row(row: &[f64]) -> Vec<f64> {
    let mut r = row.to_vec();
    r.sort_by(f64::total_cmp);
    r
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Points in pooling order together with their sorted distance rows.
pub fn canonical_order(d: &DistanceMatrix) -> (Vec<usize>, Vec<Vec<f64>>) {
    let rows: Vec<Vec<f64>> = (0..d.len()).map(|i| sorted_row(d.row(i))).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&rows[a], &rows[b]));
    (order, rows)
}

impl WeightNet {
    pub fn new(store: &mut ParameterStore, prefix: &str, config: WeightNetConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let bn = config.batch_norm;
        let spec = |i: usize| {
            let s = MlpSpec::new(&config.phi[i]).with_batch_norm(bn);
            if (i == 1 || i == 4) && config.dropout_p > 0.0 {
                s.with_dropout(2, config.dropout_p)
            } else {
                s
            }
        };
        let mut mk = |i: usize| Mlp::new(store, &format!("{prefix}.phi{}", i + 1), spec(i), rng);
        let phi = [mk(0)?, mk(1)?, mk(2)?, mk(3)?, mk(4)?, mk(5)?];
        let net = Self { config, phi };
        match net.config.final_init {
            FinalInit::FanIn => {}
            FinalInit::Gaussian(std) => net.phi[5].init_last_gaussian(store, std, rng),
            FinalInit::Zero => net.phi[5].zero_last(store),
        }
        Ok(net)
    }

    /// Zeroes the last layer of `phi6`, so every weight is 0.
    pub fn zero_final_layer(&self, store: &mut ParameterStore) {
        self.phi[5].zero_last(store);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.phi.iter().flat_map(|m| m.param_ids()).collect()
    }

    /// Parameters of `phi3`..`phi5`, the only ones `h` depends on.
    pub fn cloud_param_ids(&self) -> Vec<ParamId> {
        self.phi[2..5].iter().flat_map(|m| m.param_ids()).collect()
    }

    /// `g1(x)` as a `1 x 8` row; `dists` are the distances from `x` to the cloud.
    pub fn pointwise_feature_g1(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        dists: &[f64],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if dists.is_empty() {
            return Err(Error::InvalidInput("empty distance vector".into()));
        }
        let x = tape.input(Matrix::column(sorted_row(dists)));
        let e = self.phi[0].forward(tape, store, x, mode)?;
        let pooled = tape.sum_rows(e)?;
        self.phi[1].forward(tape, store, pooled, mode)
    }

    /// Builds the `n^2 x 1` input of sorted rows in pooling order.
    fn stacked_rows(order: &[usize], rows: &[Vec<f64>]) -> Matrix {
        let n = order.len();
        let mut data = Vec::with_capacity(n * n);
        for &i in order {
            data.extend_from_slice(&rows[i]);
        }
        Matrix::new(n * n, 1, data)
    }

    /// Row sums `sum_j phi(x_ij)` of a per-distance MLP over the stacked
    /// sorted rows, as an `n x width` node. Without batch statistics the MLP
    /// acts row by row, so it runs once per distinct distance and the
    /// results are gathered back, which gives the same values.
    fn pooled_per_distance(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        phi: usize,
        stacked: &Matrix,
        n: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let batch_stats = self.config.batch_norm && matches!(mode, Mode::Train(_));
        if batch_stats {
            let x = tape.input(stacked.clone());
            let e = self.phi[phi].forward(tape, store, x, mode)?;
            return tape.segment_sum(e, n);
        }
        let mut unique = stacked.data.clone();
        unique.sort_by(f64::total_cmp);
        unique.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let idx = stacked
            .data
            .iter()
            .map(|v| unique.binary_search_by(|u| u.total_cmp(v)).expect("value is present"))
            .collect();
        let x = tape.input(Matrix::column(unique));
        let e = self.phi[phi].forward(tape, store, x, mode)?;
        tape.gather_segment_sum(e, idx, n)
    }

    fn h_from_stacked(&self, tape: &mut Tape, store: &ParameterStore, x: &Matrix, n: usize, mode: &mut Mode<'_>) -> Result<Var> {
        let pooled = self.pooled_per_distance(tape, store, 2, x, n, mode)?;
        let g2 = self.phi[3].forward(tape, store, pooled, mode)?;
        let total = tape.sum_rows(g2)?;
        self.phi[4].forward(tape, store, total, mode)
    }

    /// `h(X)` as a `1 x 16` row.
    pub fn cloud_feature_h(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        d: &DistanceMatrix,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let n = d.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty distance matrix".into()));
        }
        let (order, rows) = canonical_order(d);
        self.h_from_stacked(tape, store, &Self::stacked_rows(&order, &rows), n, mode)
    }

    fn finish(&self, tape: &mut Tape, store: &ParameterStore, h: Var, g1: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let rows = tape.value(g1).rows;
        let hb = if rows == 1 { h } else { tape.broadcast_rows(h, rows)? };
        let z = tape.concat_cols(hb, g1)?;
        let w = self.phi[5].forward(tape, store, z, mode)?;
        Ok(if self.config.clamp_nonnegative { tape.relu(w) } else { w })
    }

    /// `f(X, x)` as a `1 x 1` node.
    pub fn weight_for_point(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        d: &DistanceMatrix,
        dists_to_x: &[f64],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if dists_to_x.len() != d.len() {
            return Err(Error::DimensionMismatch {
                expected: d.len(),
                got: dists_to_x.len(),
            });
        }
        let h = self.cloud_feature_h(tape, store, d, mode)?;
        let g1 = self.pointwise_feature_g1(tape, store, dists_to_x, mode)?;
        self.finish(tape, store, h, g1, mode)
    }

    /// Weights of every point of the cloud as an `n x 1` node, in the
    /// original point order. `h(X)` is computed once and shared.
    pub fn weights_for_cloud(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        d: &DistanceMatrix,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let n = d.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty distance matrix".into()));
        }
        let (order, rows) = canonical_order(d);
        let x = Self::stacked_rows(&order, &rows);
        let h = self.h_from_stacked(tape, store, &x, n, mode)?;
        let pooled = self.pooled_per_distance(tape, store, 0, &x, n, mode)?;
        let g1 = self.phi[1].forward(tape, store, pooled, mode)?;
        let w = self.finish(tape, store, h, g1, mode)?;
        let mut back = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            back[i] = k;
        }
        tape.gather_rows(w, back)
    }

    /// Eval-mode weights without keeping the tape.
    pub fn weights(&self, store: &ParameterStore, d: &DistanceMatrix) -> Result<WeightVector> {
        let mut tape = Tape::new();
        let w = self.weights_for_cloud(&mut tape, store, d, &mut Mode::Eval)?;
        Ok(WeightVector(tape.value(w).data.clone()))
    }
}

/// Linear classifier on `h(X)`, used as a baseline that sees the same
/// distance information as the weight network but no persistence.
#[derive(Clone, Debug)]
pub struct DistMatrixNet {
    pub net: WeightNet,
    pub head: Mlp,
}

impl DistMatrixNet {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        config: WeightNetConfig,
        n_classes: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        let net = WeightNet::new(store, &format!("{prefix}.net"), config, rng)?;
        let head = Mlp::new(store, &format!("{prefix}.head"), MlpSpec::new(&[net.config.h_dim(), n_classes]), rng)?;
        Ok(Self { net, head })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.net.cloud_param_ids();
        ids.extend(self.head.param_ids());
        ids
    }

    /// Logits as a `1 x n_classes` row.
    pub fn classify(&self, tape: &mut Tape, store: &ParameterStore, d: &DistanceMatrix, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.net.cloud_feature_h(tape, store, d, mode)?;
        self.head.forward(tape, store, h, mode)
    }
}

/// Function form of [`DistMatrixNet::classify`].
pub fn distmatrixnet_classify(
    model: &DistMatrixNet,
    store: &ParameterStore,
    d: &DistanceMatrix,
    tape: &mut Tape,
) -> Result<Var> {
    model.classify(tape, store, d, &mut Mode::Eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_inputs, check_params};
    use crate::geometry::{pairwise_distances, PointCloud};

    fn small() -> WeightNetConfig {
        WeightNetConfig {
            phi: [
                vec![1, 5, 4],
                vec![4, 3, 8],
                vec![1, 5, 4],
                vec![4, 6],
                vec![6, 5, 16],
                vec![24, 7, 1],
            ],
            ..WeightNetConfig::desk()
        }
    }

    fn cloud(rng: &mut Stream, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| vec![rng.uniform(), rng.uniform()]).collect()).unwrap()
    }

    fn net(seed: u64) -> (ParameterStore, WeightNet) {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(seed);
        let n = WeightNet::new(&mut store, "w", small(), &mut rng).unwrap();
        (store, n)
    }

    #[test]
    fn presets_are_consistent() {
        for p in PRESETS {
            let c = WeightNetConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(c.g1_dim() + c.h_dim(), c.phi[5][0]);
        }
        assert_eq!(WeightNetConfig::preset("r4").unwrap().phi[3], vec![128, 128]);
        assert!(WeightNetConfig::preset("r9").is_err());
        let mut bad = WeightNetConfig::desk();
        bad.phi[5][0] = 23;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn g1_is_permutation_invariant_and_sum_sensitive() {
        let (store, n) = net(1);
        let mut rng = Stream::new(2);
        let dists: Vec<f64> = (0..7).map(|_| rng.uniform()).collect();
        let eval = |d: &[f64]| {
            let mut t = Tape::new();
            let v = n.pointwise_feature_g1(&mut t, &store, d, &mut Mode::Eval).unwrap();
            t.value(v).data.clone()
        };
        let base = eval(&dists);
        let mut p = dists.clone();
        rng.shuffle(&mut p);
        assert_eq!(eval(&p), base);
        let mut dup = dists.clone();
        dup.extend_from_slice(&dists);
        assert_ne!(eval(&dup), base);
        let mut t = Tape::new();
        assert!(n.pointwise_feature_g1(&mut t, &store, &[], &mut Mode::Eval).is_err());
    }

    #[test]
    fn g1_and_h_input_gradients() {
        let (store, n) = net(3);
        let mut rng = Stream::new(4);
        for _ in 0..5 {
            let m = Matrix::column((0..6).map(|_| rng.uniform_range(0.1, 2.0)).collect());
            // Gradients through the pooled stage, with the leaf fed in directly.
            let err = check_inputs(
                &[m],
                |t, v| {
                    let e = n.phi[0].forward(t, &store, v[0], &mut Mode::Eval)?;
                    let p = t.sum_rows(e)?;
                    let g = n.phi[1].forward(t, &store, p, &mut Mode::Eval)?;
                    t.sum_rows(g).and_then(|s| {
                        let w = t.input(Matrix::column(vec![1.0; 8]));
                        t.matmul(s, w)
                    })
                },
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "g1 input gradient error {err}");
        }
    }

    #[test]
    fn h_invariant_under_conjugation_and_defined_for_one_point() {
        let (store, n) = net(5);
        let mut rng = Stream::new(6);
        let pc = cloud(&mut rng, 9);
        let d = pairwise_distances(&pc);
        let h = |d: &DistanceMatrix| {
            let mut t = Tape::new();
            let v = n.cloud_feature_h(&mut t, &store, d, &mut Mode::Eval).unwrap();
            t.value(v).data.clone()
        };
        let base = h(&d);
        assert_eq!(base.len(), 16);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..9).collect();
            rng.shuffle(&mut perm);
            assert_eq!(h(&d.permuted(&perm)), base);
        }
        let one = DistanceMatrix::from_flat(1, vec![0.0]).unwrap();
        assert!(h(&one).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batched_weights_match_single_point_calls() {
        let (store, n) = net(7);
        let mut rng = Stream::new(8);
        let d = pairwise_distances(&cloud(&mut rng, 8));
        let w = n.weights(&store, &d).unwrap();
        for i in 0..8 {
            let mut t = Tape::new();
            let v = n.weight_for_point(&mut t, &store, &d, d.row(i), &mut Mode::Eval).unwrap();
            assert_eq!(t.scalar(v).to_bits(), w.0[i].to_bits());
        }
        let mut t = Tape::new();
        assert!(n.weight_for_point(&mut t, &store, &d, &[0.0; 3], &mut Mode::Eval).is_err());
    }

    #[test]
    fn weights_are_equivariant_and_isometry_invariant() {
        let (store, n) = net(9);
        let mut rng = Stream::new(10);
        let pc = cloud(&mut rng, 10);
        let d = pairwise_distances(&pc);
        let w = n.weights(&store, &d).unwrap();
        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let wp = n.weights(&store, &d.permuted(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(wp.0[k].to_bits(), w.0[i].to_bits());
        }
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let moved = pc.transformed(&[c, -s, s, c], &[2.0, -1.0]);
        let wm = n.weights(&store, &pairwise_distances(&moved)).unwrap();
        for (a, b) in w.0.iter().zip(&wm.0) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_weights() {
        let (mut store, n) = net(11);
        n.zero_final_layer(&mut store);
        let mut rng = Stream::new(12);
        let d = pairwise_distances(&cloud(&mut rng, 6));
        assert!(n.weights(&store, &d).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_final_init_is_small() {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(13);
        let cfg = WeightNetConfig {
            final_init: FinalInit::Gaussian(1e-4),
            ..small()
        };
        let n = WeightNet::new(&mut store, "w", cfg, &mut rng).unwrap();
        let d = pairwise_distances(&cloud(&mut rng, 6));
        assert!(n.weights(&store, &d).unwrap().0.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn parameter_gradients_of_weight_sum() {
        let (store, n) = net(14);
        let mut rng = Stream::new(15);
        for _ in 0..3 {
            let d = pairwise_distances(&cloud(&mut rng, 6));
            let err = check_params(
                &store,
                None,
                |t, s| {
                    let w = n.weights_for_cloud(t, s, &d, &mut Mode::Eval)?;
                    t.sum_rows(w)
                },
                1e-6,
                6,
            )
            .unwrap();
            assert!(err < 1e-4, "weight-net parameter gradient error {err}");
        }
    }

    #[test]
    fn distmatrixnet_is_invariant_and_differentiable() {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(16);
        let model = DistMatrixNet::new(&mut store, "dm", small(), 3, &mut rng).unwrap();
        let pc = cloud(&mut rng, 7);
        let d = pairwise_distances(&pc);
        let logits = |d: &DistanceMatrix| {
            let mut t = Tape::new();
            let v = distmatrixnet_classify(&model, &store, d, &mut t).unwrap();
            t.value(v).data.clone()
        };
        let base = logits(&d);
        assert_eq!(base.len(), 3);
        assert_eq!(logits(&d), base);
        let mut perm: Vec<usize> = (0..7).collect();
        rng.shuffle(&mut perm);
        assert_eq!(logits(&d.permuted(&perm)), base);
        let ids = model.param_ids();
        let err = check_params(
            &store,
            Some(&ids),
            |t, s| {
                let l = model.classify(t, s, &d, &mut Mode::Eval)?;
                t.cross_entropy(l, &[1])
            },
            1e-6,
            6,
        )
        .unwrap();
        assert!(err < 1e-4, "DistMatrixNet gradient error {err}");
    }
}
