//! Gaussian PersLay: a learnable, permutation-invariant vectorization of
//! persistence diagrams, followed by a linear projection.
//!
//! Coordinate `m` of the vectorization is `sum_q exp(-|q - c_m|^2 / 2)` over
//! the diagram points `q`, with learnable centers `c_m`.

use crate::autodiff::{Matrix, Mlp, MlpSpec, Mode, ParamId, ParameterStore, Tape, Var};
use crate::persistence::PersistenceDiagram;
use crate::rng::Stream;
use crate::{Error, Result};

/// Plane coordinates fed to the kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagramCoords {
    BirthDeath,
    BirthPersistence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersLayConfig {
    pub n_centers: usize,
    pub out_dim: usize,
    pub coords: DiagramCoords,
}

impl Default for PersLayConfig {
    fn default() -> Self {
        Self {
            n_centers: 32,
            out_dim: 16,
            coords: DiagramCoords::BirthDeath,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PersLay {
    pub config: PersLayConfig,
    pub centers: ParamId,
    pub projection: Mlp,
}

/// `m` points on a triangular grid above the diagonal of `[0, t_cap]^2`.
///
/// The lattice `(i h, (j + 1) h)` for `0 <= i <= j < s`, `h = t_cap / s`, is
/// the smallest one with at least `m` points; `m` of them are taken at evenly
/// spaced indices in `(j, i)` order.
pub fn grid_centers(m: usize, t_cap: f64) -> Vec<[f64; 2]> {
    let mut s = 1;
    while s * (s + 1) / 2 < m {
        s += 1;
    }
    let h = t_cap / s as f64;
    let mut lattice = Vec::with_capacity(s * (s + 1) / 2);
    for j in 0..s {
        for i in 0..=j {
            lattice.push([i as f64 * h, (j + 1) as f64 * h]);
        }
    }
    let t = lattice.len();
    (0..m).map(|k| lattice[k * t / m]).collect()
}

/// Nearest-rank 95th percentile; 1.0 for an empty sample.
pub fn t_cap_from_deaths(deaths: &[f64]) -> f64 {
    let mut v: Vec<f64> = deaths.iter().copied().filter(|d| d.is_finite()).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
    v[rank - 1]
}

/// Finite points of one degree as `(birth, death)` rows sorted by
/// `(birth, death)`, which fixes the kernel summation order.
pub fn sorted_finite_points(diag: &PersistenceDiagram, degree: usize) -> Result<Vec<[f64; 2]>> {
    let mut pts = Vec::new();
    for p in diag.in_degree(degree) {
        if !p.death.is_finite() {
            return Err(Error::InfinitePoint(p.birth_cell));
        }
        pts.push([p.birth, p.death]);
    }
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(pts)
}

impl PersLay {
    pub fn new(store: &mut ParameterStore, prefix: &str, config: PersLayConfig, t_cap: f64, rng: &mut Stream) -> Result<Self> {
        if config.n_centers == 0 || config.out_dim == 0 {
            return Err(Error::Config("PersLay needs at least one center and output".into()));
        }
        if !(t_cap.is_finite() && t_cap > 0.0) {
            return Err(Error::Config(format!("center grid extent must be positive, got {t_cap}")));
        }
        let grid: Vec<f64> = grid_centers(config.n_centers, t_cap).into_iter().flatten().collect();
        let centers = store.add(&format!("{prefix}.centers"), config.n_centers, 2, grid, true)?;
        let projection = Mlp::new(
            store,
            &format!("{prefix}.projection"),
            MlpSpec::new(&[config.n_centers, config.out_dim]),
            rng,
        )?;
        Ok(Self {
            config,
            centers,
            projection,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.centers];
        ids.extend(self.projection.param_ids());
        ids
    }

    /// Kernel sums for a `p x 2` node of `(birth, death)` rows, as `1 x M`.
    pub fn vectorize(&self, tape: &mut Tape, store: &ParameterStore, points: Var) -> Result<Var> {
        let q = match self.config.coords {
            DiagramCoords::BirthDeath => points,
            DiagramCoords::BirthPersistence => {
                let m = tape.input(Matrix::new(2, 2, vec![1.0, -1.0, 0.0, 1.0]));
                tape.matmul(points, m)?
            }
        };
        let c = tape.param(store, self.centers);
        tape.gaussian_kernels(q, c)
    }

    /// Projected 16-dimensional topological feature.
    pub fn topo_feature(&self, tape: &mut Tape, store: &ParameterStore, points: Var) -> Result<Var> {
        let v = self.vectorize(tape, store, points)?;
        self.projection.forward(tape, store, v, &mut Mode::Eval)
    }

    /// Records the finite points of `diag` in `degree` as a constant input.
    pub fn diagram_input(tape: &mut Tape, diag: &PersistenceDiagram, degree: usize) -> Result<Var> {
        let pts = sorted_finite_points(diag, degree)?;
        let n = pts.len();
        Ok(tape.input(Matrix::new(n, 2, pts.into_iter().flatten().collect())))
    }
}

/// Vectorization of a fixed diagram.
pub fn perslay_vectorize(
    layer: &PersLay,
    store: &ParameterStore,
    diag: &PersistenceDiagram,
    degree: usize,
    tape: &mut Tape,
) -> Result<Var> {
    let p = PersLay::diagram_input(tape, diag, degree)?;
    layer.vectorize(tape, store, p)
}

/// Topological feature of a fixed diagram in degree 1.
pub fn topo_feature(layer: &PersLay, store: &ParameterStore, diag: &PersistenceDiagram, tape: &mut Tape) -> Result<Var> {
    let p = PersLay::diagram_input(tape, diag, 1)?;
    layer.topo_feature(tape, store, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_inputs, check_params};
    use crate::persistence::DiagramPoint;

    fn diag(points: &[(f64, f64)]) -> PersistenceDiagram {
        PersistenceDiagram {
            points: points
                .iter()
                .enumerate()
                .map(|(k, &(b, d))| DiagramPoint {
                    birth: b,
                    death: d,
                    degree: 1,
                    birth_cell: k,
                    death_cell: if d.is_finite() { Some(100 + k) } else { None },
                })
                .collect(),
        }
    }

    fn layer(m: usize, seed: u64) -> (ParameterStore, PersLay) {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(seed);
        let cfg = PersLayConfig {
            n_centers: m,
            ..Default::default()
        };
        let l = PersLay::new(&mut store, "pl", cfg, 1.0, &mut rng).unwrap();
        (store, l)
    }

    fn set_centers(store: &mut ParameterStore, l: &PersLay, c: &[f64]) {
        store.get_mut(l.centers).data = c.to_vec();
    }

    fn vec_of(store: &ParameterStore, l: &PersLay, d: &PersistenceDiagram) -> Vec<f64> {
        let mut t = Tape::new();
        let v = perslay_vectorize(l, store, d, 1, &mut t).unwrap();
        t.value(v).data.clone()
    }

    #[test]
    fn kernel_values() {
        let (mut store, l) = layer(1, 1);
        assert_eq!(vec_of(&store, &l, &diag(&[])), vec![0.0]);
        set_centers(&mut store, &l, &[0.3, 0.8]);
        assert_eq!(vec_of(&store, &l, &diag(&[(0.3, 0.8)])), vec![1.0]);
        set_centers(&mut store, &l, &[0.0, 1.0]);
        let v = vec_of(&store, &l, &diag(&[(0.0, 1.0), (0.0, 2.0)]));
        assert!((v[0] - (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn infinite_points_rejected() {
        let (store, l) = layer(4, 2);
        let mut t = Tape::new();
        assert!(perslay_vectorize(&l, &store, &diag(&[(0.0, f64::INFINITY)]), 1, &mut t).is_err());
    }

    #[test]
    fn grid_lies_above_diagonal_within_cap() {
        for m in [1, 2, 5, 32, 50] {
            let g = grid_centers(m, 2.0);
            assert_eq!(g.len(), m);
            for c in &g {
                assert!(c[0] >= 0.0 && c[0] < c[1] && c[1] <= 2.0);
            }
            let mut dedup = g.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), m);
        }
        assert_eq!(t_cap_from_deaths(&[]), 1.0);
        let deaths: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        assert_eq!(t_cap_from_deaths(&deaths), 95.0);
    }

    #[test]
    fn zero_projection_gives_bias() {
        let (mut store, l) = layer(8, 3);
        let (w, b) = l.projection.last_layer();
        store.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        let bias = store.get(b).data.clone();
        for pts in [vec![], vec![(0.1, 0.5)], vec![(0.2, 0.3), (0.0, 0.9)]] {
            let mut t = Tape::new();
            let v = topo_feature(&l, &store, &diag(&pts), &mut t).unwrap();
            assert_eq!(t.value(v).data, bias);
        }
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let (store, l) = layer(32, 4);
        let mut rng = Stream::new(5);
        let mut pts: Vec<(f64, f64)> = (0..9)
            .map(|_| {
                let b = rng.uniform();
                (b, b + rng.uniform())
            })
            .collect();
        let base = vec_of(&store, &l, &diag(&pts));
        for _ in 0..10 {
            rng.shuffle(&mut pts);
            assert_eq!(vec_of(&store, &l, &diag(&pts)), base);
        }
    }

    #[test]
    fn far_point_is_negligible() {
        let (store, l) = layer(32, 6);
        let base = diag(&[(0.1, 0.4), (0.2, 0.9)]);
        let far = diag(&[(0.1, 0.4), (0.2, 0.9), (20.0, 40.0)]);
        let (a, b) = (vec_of(&store, &l, &base), vec_of(&store, &l, &far));
        let centers = &store.get(l.centers).data;
        for (m, (x, y)) in a.iter().zip(&b).enumerate() {
            let c = [centers[2 * m], centers[2 * m + 1]];
            assert!(((20.0 - c[0]).powi(2) + (40.0 - c[1]).powi(2)).sqrt() > 12.0);
            assert!((x - y).abs() < 1e-30);
        }
    }

    #[test]
    fn lipschitz_in_diagram_points() {
        let (store, l) = layer(32, 7);
        let mut rng = Stream::new(8);
        let bound = 2f64.sqrt() * (-0.5f64).exp();
        for _ in 0..100 {
            let mut pts: Vec<(f64, f64)> = (0..5)
                .map(|_| {
                    let b = rng.uniform();
                    (b, b + rng.uniform())
                })
                .collect();
            let a = vec_of(&store, &l, &diag(&pts));
            let delta = rng.uniform_range(1e-4, 0.1);
            let k = rng.below(5);
            pts[k].0 += rng.uniform_range(-delta, delta);
            pts[k].1 += rng.uniform_range(-delta, delta);
            let b = vec_of(&store, &l, &diag(&pts));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= bound * delta + 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for coords in [DiagramCoords::BirthDeath, DiagramCoords::BirthPersistence] {
            let mut store = ParameterStore::new();
            let mut rng = Stream::new(9);
            let cfg = PersLayConfig {
                n_centers: 6,
                out_dim: 4,
                coords,
            };
            let l = PersLay::new(&mut store, "pl", cfg, 1.0, &mut rng).unwrap();
            let pts = Matrix::new(3, 2, vec![0.1, 0.5, 0.3, 0.35, 0.0, 0.8]);
            let sum_out = |t: &mut Tape, s: &ParameterStore, p: Var| -> Result<Var> {
                let f = l.topo_feature(t, s, p)?;
                let w = t.input(Matrix::column(vec![1.0, -0.5, 0.25, 2.0]));
                t.matmul(f, w)
            };
            let err = check_params(
                &store,
                None,
                |t, s| {
                    let p = t.input(pts.clone());
                    sum_out(t, s, p)
                },
                1e-6,
                64,
            )
            .unwrap();
            assert!(err < 1e-5, "parameter gradient error {err}");
            let err = check_inputs(std::slice::from_ref(&pts), |t, v| sum_out(t, &store, v[0]), 1e-6).unwrap();
            assert!(err < 1e-5, "diagram coordinate gradient error {err}");
        }
    }
}
