//! The topological branch: weights, filtration, persistence, PersLay.
//!
//! Diagram coordinates are appearance values of paired cells, and every
//! appearance value is one of `w_i`, `w_j` or `(d_ij + w_i + w_j) / 2` for
//! some edge or vertex. The derivative of a coordinate with respect to the
//! weights is therefore a fixed sparse vector, which the tape records as a
//! routed node between the weight output and PersLay.

use crate::autodiff::{Matrix, Mlp, MlpSpec, Mode, ParamId, ParameterStore, Tape, Var};
use crate::filtration::{dtm_weights, edge_appearance, weighted_rips_filtration, Filtration, WeightVector};
use crate::geometry::DistanceMatrix;
use crate::perslay::{PersLay, PersLayConfig};
use crate::persistence::{compute_persistence, PersistenceDiagram};
use crate::rng::Stream;
use crate::weightnet::{WeightNet, WeightNetConfig};
use crate::{Error, Result};

/// `d(value)/dw` as `(point index, coefficient)` terms.
pub type Route = Vec<(usize, f64)>;

/// Derivative of the appearance value of edge `(i, j)` with respect to `w`.
///
/// The value is the largest of `w_i`, `w_j` and `(d_ij + w_i + w_j) / 2`. On
/// ties the term belonging to the earliest cell in the filtration order wins:
/// the vertices (lower index first), then the edge itself.
fn edge_route(d: &DistanceMatrix, w: &[f64], i: usize, j: usize, value: f64) -> Result<Route> {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    // Among two tied vertex weights the filtration puts the lower index first.
    if w[a] == value {
        return Ok(vec![(a, 1.0)]);
    }
    if w[b] == value {
        return Ok(vec![(b, 1.0)]);
    }
    if edge_appearance(d.get(a, b), w[a], w[b]) == value {
        return Ok(vec![(a, 0.5), (b, 0.5)]);
    }
    Err(Error::PairingMismatch(format!(
        "edge ({a}, {b}) does not attain value {value}"
    )))
}

/// Route of the appearance value of cell `cell` of `f`.
pub fn cell_route(f: &Filtration, cell: usize, d: &DistanceMatrix, w: &WeightVector) -> Result<Route> {
    let c = f
        .cells()
        .get(cell)
        .ok_or_else(|| Error::PairingMismatch(format!("cell {cell} out of range")))?;
    let v: Vec<usize> = c.simplex.vertices().iter().map(|&x| x as usize).collect();
    if v.iter().any(|&x| x >= w.len() || x >= d.len()) {
        return Err(Error::PairingMismatch(format!("cell {cell} outside the cloud")));
    }
    let w = w.as_slice();
    match v.len() {
        1 if w[v[0]] == c.value => Ok(vec![(v[0], 1.0)]),
        1 => Err(Error::PairingMismatch(format!("vertex {} weight differs", v[0]))),
        2 => edge_route(d, w, v[0], v[1], c.value),
        _ => {
            // Facet edges in lexicographic order, which is the filtration
            // order among edges of equal value.
            for (a, b) in [(v[0], v[1]), (v[0], v[2]), (v[1], v[2])] {
                if edge_appearance(d.get(a, b), w[a], w[b]) == c.value {
                    return edge_route(d, w, a, b, c.value);
                }
            }
            Err(Error::PairingMismatch(format!("triangle {cell} attains no edge value")))
        }
    }
}

fn check_point_values(f: &Filtration, diag: &PersistenceDiagram) -> Result<()> {
    let cells = f.cells();
    for p in &diag.points {
        let birth_ok = cells.get(p.birth_cell).is_some_and(|c| c.value == p.birth);
        let death_ok = match p.death_cell {
            Some(j) => cells.get(j).is_some_and(|c| c.value == p.death),
            None => p.death == f64::INFINITY,
        };
        if !birth_ok || !death_ok {
            return Err(Error::PairingMismatch(format!(
                "point ({}, {}) does not match its cells",
                p.birth, p.death
            )));
        }
    }
    Ok(())
}

/// Gradient with respect to `w` of `sum_k g_b[k] birth_k + g_d[k] death_k`,
/// with one `(g_b, g_d)` per point of `diag`, in order.
pub fn pd_backward(
    f: &Filtration,
    diag: &PersistenceDiagram,
    grad_points: &[(f64, f64)],
    d: &DistanceMatrix,
    w: &WeightVector,
) -> Result<Vec<f64>> {
    if grad_points.len() != diag.points.len() {
        return Err(Error::DimensionMismatch {
            expected: diag.points.len(),
            got: grad_points.len(),
        });
    }
    check_point_values(f, diag)?;
    let mut g = vec![0.0; w.len()];
    for (p, &(gb, gd)) in diag.points.iter().zip(grad_points) {
        for (i, c) in cell_route(f, p.birth_cell, d, w)? {
            g[i] += gb * c;
        }
        if let Some(j) = p.death_cell {
            for (i, c) in cell_route(f, j, d, w)? {
                g[i] += gd * c;
            }
        }
    }
    Ok(g)
}

/// Finite points of `degree`, sorted by `(birth, death)`, as a `p x 2` node
/// whose gradient flows into the `n x 1` weight node `w_var`.
pub fn diagram_node(
    tape: &mut Tape,
    w_var: Var,
    f: &Filtration,
    diag: &PersistenceDiagram,
    d: &DistanceMatrix,
    w: &WeightVector,
    degree: usize,
) -> Result<Var> {
    check_point_values(f, diag)?;
    let mut pts: Vec<_> = diag
        .in_degree(degree)
        .filter(|p| p.is_finite())
        .collect();
    pts.sort_by(|a, b| a.birth.total_cmp(&b.birth).then(a.death.total_cmp(&b.death)));
    let mut data = Vec::with_capacity(2 * pts.len());
    let mut routes = Vec::with_capacity(2 * pts.len());
    for p in pts {
        data.extend([p.birth, p.death]);
        routes.push(cell_route(f, p.birth_cell, d, w)?);
        routes.push(cell_route(f, p.death_cell.expect("finite point"), d, w)?);
    }
    let n = data.len() / 2;
    tape.routed(w_var, Matrix::new(n, 2, data), routes)
}

/// How per-point weights are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum FiltrationMode {
    Rips,
    Dtm { k0: usize, q: f64 },
    Learned,
}

impl FiltrationMode {
    pub fn name(&self) -> &'static str {
        match self {
            FiltrationMode::Rips => "rips",
            FiltrationMode::Dtm { .. } => "dtm",
            FiltrationMode::Learned => "learned",
        }
    }

    /// Weights of a fixed filtration; `None` for the learned one.
    pub fn fixed_weights(&self, d: &DistanceMatrix) -> Result<Option<WeightVector>> {
        Ok(match self {
            FiltrationMode::Rips => Some(WeightVector::zeros(d.len())),
            FiltrationMode::Dtm { k0, q } => Some(dtm_weights(d, *k0, *q)?),
            FiltrationMode::Learned => None,
        })
    }
}

/// Sorted finite `(birth, death)` rows of one diagram, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDiagram {
    pub points: Matrix,
}

/// Filtration, persistence and sorted finite points for fixed weights.
pub fn fixed_diagram(d: &DistanceMatrix, w: &WeightVector, t_max: f64, degree: usize) -> Result<FixedDiagram> {
    let f = weighted_rips_filtration(d, w, 2, t_max)?;
    let diag = compute_persistence(&f, degree)?;
    let pts = crate::perslay::sorted_finite_points(&PersistenceDiagram {
        points: diag.points.into_iter().filter(|p| p.degree == degree && p.is_finite()).collect(),
    }, degree)?;
    let n = pts.len();
    Ok(FixedDiagram {
        points: Matrix::new(n, 2, pts.into_iter().flatten().collect()),
    })
}

/// `Psi_topo`: weights, weighted Rips persistence and PersLay.
#[derive(Clone, Debug)]
pub struct TopoBranch {
    pub mode: FiltrationMode,
    pub weightnet: Option<WeightNet>,
    pub perslay: PersLay,
    pub t_max: f64,
    pub degree: usize,
}

/// One forward pass of the branch.
pub struct TopoOutput {
    pub feature: Var,
    pub diagram_size: usize,
}

impl TopoBranch {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        mode: FiltrationMode,
        weightnet: &WeightNetConfig,
        perslay: PersLayConfig,
        t_cap: f64,
        t_max: f64,
        degree: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if degree > 1 {
            return Err(Error::Config(format!("homology degree {degree} not supported")));
        }
        if t_max.is_nan() || t_max <= 0.0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        let weightnet = match mode {
            FiltrationMode::Learned => Some(WeightNet::new(store, &format!("{prefix}.weightnet"), weightnet.clone(), rng)?),
            _ => None,
        };
        let perslay = PersLay::new(store, &format!("{prefix}.perslay"), perslay, t_cap, rng)?;
        Ok(Self {
            mode,
            weightnet,
            perslay,
            t_max,
            degree,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.perslay.config.out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.weightnet.as_ref().map(|n| n.param_ids()).unwrap_or_default();
        ids.extend(self.perslay.param_ids());
        ids
    }

    /// Precomputes the diagram of a fixed filtration.
    pub fn precompute(&self, d: &DistanceMatrix) -> Result<Option<FixedDiagram>> {
        match self.mode.fixed_weights(d)? {
            Some(w) => Ok(Some(fixed_diagram(d, &w, self.t_max, self.degree)?)),
            None => Ok(None),
        }
    }

    /// Weights the branch would use for `d`, in eval mode.
    pub fn weights(&self, store: &ParameterStore, d: &DistanceMatrix) -> Result<WeightVector> {
        match (&self.weightnet, self.mode.fixed_weights(d)?) {
            (_, Some(w)) => Ok(w),
            (Some(net), None) => net.weights(store, d),
            (None, None) => Err(Error::Config("learned filtration without a weight network".into())),
        }
    }

    /// `Psi_topo(X)` as a `1 x out_dim` row. `cached` may hold the diagram of
    /// a fixed filtration.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        d: &DistanceMatrix,
        cached: Option<&FixedDiagram>,
        mode: &mut Mode<'_>,
    ) -> Result<TopoOutput> {
        let points = match (&self.weightnet, cached) {
            (_, Some(fd)) => tape.input(fd.points.clone()),
            (None, None) => {
                let fd = self.precompute(d)?.expect("fixed filtration");
                tape.input(fd.points)
            }
            (Some(net), None) => {
                let w_var = net.weights_for_cloud(tape, store, d, mode)?;
                let w = WeightVector(tape.value(w_var).data.clone());
                if let Some(i) = w.0.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("weight of point {i}")));
                }
                let f = weighted_rips_filtration(d, &w, 2, self.t_max)?;
                let diag = compute_persistence(&f, self.degree)?;
                diagram_node(tape, w_var, &f, &diag, d, &w, self.degree)?
            }
        };
        let diagram_size = tape.value(points).rows;
        let feature = self.perslay.topo_feature(tape, store, points)?;
        Ok(TopoOutput { feature, diagram_size })
    }
}

/// Linear classifier `F_theta'` on the topological feature.
#[derive(Clone, Debug)]
pub struct TopoClassifier {
    pub branch: TopoBranch,
    pub head: Mlp,
}

impl TopoClassifier {
    pub fn new(store: &mut ParameterStore, prefix: &str, branch: TopoBranch, n_classes: usize, rng: &mut Stream) -> Result<Self> {
        let head = Mlp::new(store, &format!("{prefix}.head"), MlpSpec::new(&[branch.out_dim(), n_classes]), rng)?;
        // Zero logits at the start. A confidently wrong random head is cheapest
        // to fix by moving every diagram point off the PersLay centers, which
        // the learned filtration can do and then never recovers from.
        store.get_mut(head.param_ids()[0]).data.fill(0.0);
        Ok(Self { branch, head })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.branch.param_ids();
        ids.extend(self.head.param_ids());
        ids
    }

    /// Logits (`1 x n_classes`) and the number of vectorized diagram points.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        d: &DistanceMatrix,
        cached: Option<&FixedDiagram>,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, usize)> {
        let out = self.branch.forward(tape, store, d, cached, mode)?;
        let logits = self.head.forward(tape, store, out.feature, mode)?;
        Ok((logits, out.diagram_size))
    }
}

/// Cross-entropy of the topological classifier on one labeled cloud.
pub fn topo_loss(
    model: &TopoClassifier,
    store: &ParameterStore,
    d: &DistanceMatrix,
    label: usize,
    tape: &mut Tape,
) -> Result<Var> {
    let (logits, _) = model.logits(tape, store, d, None, &mut Mode::Eval)?;
    tape.cross_entropy(logits, &[label])
}
