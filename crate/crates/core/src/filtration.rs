//! Weighted Rips filtrations.
//!
//! A point `i` with weight `w_i` enters at `t = w_i`; an edge `(i, j)` enters
//! at the least `t` with `t >= w_i`, `t >= w_j` and `d_ij <= 2t - w_i - w_j`,
//! which is `max(w_i, w_j, (d_ij + w_i + w_j) / 2)`. Triangles enter with
//! their last edge. With all weights zero this is the ordinary Rips filtration
//! parametrized by ball radius.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::geometry::DistanceMatrix;
use crate::{Error, Result};

/// Per-point filtration weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A vertex, edge or triangle. Vertices are stored strictly increasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Simplex {
    verts: [u32; 3],
    dim: u8,
}

impl Simplex {
    pub fn vertex(i: u32) -> Self {
        Self {
            verts: [i, 0, 0],
            dim: 0,
        }
    }

    pub fn edge(i: u32, j: u32) -> Self {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        assert!(a != b, "degenerate edge");
        Self {
            verts: [a, b, 0],
            dim: 1,
        }
    }

    pub fn triangle(i: u32, j: u32, k: u32) -> Self {
        let mut v = [i, j, k];
        v.sort_unstable();
        assert!(v[0] != v[1] && v[1] != v[2], "degenerate triangle");
        Self { verts: v, dim: 2 }
    }

    pub fn from_vertices(v: &[u32]) -> Option<Self> {
        let mut s = v.to_vec();
        s.sort_unstable();
        s.dedup();
        if s.len() != v.len() {
            return None;
        }
        match s.len() {
            1 => Some(Self::vertex(s[0])),
            2 => Some(Self::edge(s[0], s[1])),
            3 => Some(Self::triangle(s[0], s[1], s[2])),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn vertices(&self) -> &[u32] {
        &self.verts[..self.dim as usize + 1]
    }

    /// Codimension-one faces, in lexicographic order.
    pub fn facets(&self) -> Vec<Simplex> {
        let v = self.vertices();
        match self.dim {
            0 => vec![],
            1 => vec![Self::vertex(v[0]), Self::vertex(v[1])],
            _ => vec![
                Self::edge(v[0], v[1]),
                Self::edge(v[0], v[2]),
                Self::edge(v[1], v[2]),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub simplex: Simplex,
    pub value: f64,
}

/// Total order on cells: value, then dimension, then vertex list.
pub fn cell_order(a: &Cell, b: &Cell) -> Ordering {
    a.value
        .total_cmp(&b.value)
        .then(a.simplex.dim.cmp(&b.simplex.dim))
        .then_with(|| a.simplex.vertices().cmp(b.simplex.vertices()))
}

/// Cells sorted by [`cell_order`].
#[derive(Clone, Debug, PartialEq)]
pub struct Filtration {
    cells: Vec<Cell>,
}

impl Filtration {
    /// Sorts the cells into the canonical total order.
    pub fn from_cells(mut cells: Vec<Cell>) -> Self {
        cells.sort_by(cell_order);
        Self { cells }
    }

    /// Merges per-dimension lists that are each already in filtration order.
    fn merge_sorted(verts: Vec<Cell>, edges: Vec<Cell>, triangles: Vec<Cell>) -> Self {
        let mut cells = Vec::with_capacity(verts.len() + edges.len() + triangles.len());
        let lists = [verts, edges, triangles];
        let mut pos = [0usize; 3];
        loop {
            let mut best: Option<usize> = None;
            for k in 0..3 {
                let Some(c) = lists[k].get(pos[k]) else { continue };
                if best.is_none_or(|b| cell_order(c, &lists[b][pos[b]]).is_lt()) {
                    best = Some(k);
                }
            }
            let Some(k) = best else { break };
            cells.push(lists[k][pos[k]]);
            pos[k] += 1;
        }
        Self { cells }
    }

    /// Wraps cells in the given order without sorting. Used by tests to
    /// feed deliberately broken filtrations to the reduction.
    pub fn from_cells_unchecked(cells: Vec<Cell>) -> Self {
        Self { cells }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn max_dim(&self) -> usize {
        self.cells.iter().map(|c| c.simplex.dim()).max().unwrap_or(0)
    }

    /// Filtration dump as `dim,v0,v1,v2,value`, `-1` for absent vertices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,v0,v1,v2,value\n");
        for c in &self.cells {
            let v = c.simplex.vertices();
            let col = |k: usize| v.get(k).map(|&x| x as i64).unwrap_or(-1);
            let _ = writeln!(
                out,
                "{},{},{},{},{:?}",
                c.simplex.dim(),
                col(0),
                col(1),
                col(2),
                c.value
            );
        }
        out
    }
}

/// Distance-to-measure weights over the cloud's own empirical measure.
///
/// The `k0` nearest neighbors include the point itself; ties go to the
/// smaller index.
pub fn dtm_weights(d: &DistanceMatrix, k0: usize, q: f64) -> Result<WeightVector> {
    let n = d.len();
    if k0 == 0 || k0 > n {
        return Err(Error::InvalidInput(format!("k0 = {k0} must lie in 1..={n}")));
    }
    if q.is_nan() || q <= 0.0 {
        return Err(Error::InvalidInput("q must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let w = (0..n)
        .map(|i| {
            let row = d.row(i);
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let s: f64 = order[..k0].iter().map(|&j| row[j].powf(q)).sum();
            (s / k0 as f64).powf(1.0 / q)
        })
        .collect();
    Ok(WeightVector(w))
}

#[inline]
pub fn edge_appearance(d_ij: f64, w_i: f64, w_j: f64) -> f64 {
    // Grouping the weights keeps the result symmetric in (i, j) bit for bit.
    w_i.max(w_j).max((d_ij + (w_i + w_j)) / 2.0)
}

pub fn weighted_rips_filtration(
    d: &DistanceMatrix,
    w: &WeightVector,
    max_dim: usize,
    t_max: f64,
) -> Result<Filtration> {
    let n = d.len();
    if w.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.len(),
        });
    }
    if !(1..=2).contains(&max_dim) {
        return Err(Error::InvalidInput(format!("max_dim {max_dim} not in 1..=2")));
    }
    if t_max.is_nan() || t_max <= 0.0 {
        return Err(Error::InvalidInput("t_max must be positive".into()));
    }
    if let Some(i) = w.0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("weight {i}")));
    }
    let w = w.as_slice();
    let mut verts: Vec<Cell> = (0..n)
        .filter(|&i| w[i] <= t_max)
        .map(|i| Cell {
            simplex: Simplex::vertex(i as u32),
            value: w[i],
        })
        .collect();
    verts.sort_by(cell_order);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = edge_appearance(d.get(i, j), w[i], w[j]);
            if v <= t_max {
                edges.push(Cell {
                    simplex: Simplex::edge(i as u32, j as u32),
                    value: v,
                });
            }
        }
    }
    edges.sort_by(cell_order);
    let triangles = if max_dim >= 2 { sorted_triangles(n, &edges) } else { Vec::new() };
    Ok(Filtration::merge_sorted(verts, edges, triangles))
}

/// Triangles of the clique complex in filtration order. A triangle's value is
/// that of its latest edge, so a counting sort on that edge's rank orders
/// triangles up to ties in value, which are then sorted lexicographically.
fn sorted_triangles(n: usize, edges: &[Cell]) -> Vec<Cell> {
    const NONE: u32 = u32::MAX;
    let mut rank = vec![NONE; n * n];
    for (r, e) in edges.iter().enumerate() {
        let v = e.simplex.vertices();
        rank[v[0] as usize * n + v[1] as usize] = r as u32;
    }
    let latest = |i: usize, j: usize, k: usize| {
        let (a, b, c) = (rank[i * n + j], rank[i * n + k], rank[j * n + k]);
        if a == NONE || b == NONE || c == NONE {
            NONE
        } else {
            a.max(b).max(c)
        }
    };
    let for_each = |f: &mut dyn FnMut(u32, usize, usize, usize)| {
        for i in 0..n {
            for j in (i + 1)..n {
                if rank[i * n + j] == NONE {
                    continue;
                }
                for k in (j + 1)..n {
                    let r = latest(i, j, k);
                    if r != NONE {
                        f(r, i, j, k);
                    }
                }
            }
        }
    };
    let mut start = vec![0usize; edges.len() + 1];
    for_each(&mut |r, _, _, _| start[r as usize + 1] += 1);
    for r in 0..edges.len() {
        start[r + 1] += start[r];
    }
    let total = start[edges.len()];
    let mut out = vec![
        Cell {
            simplex: Simplex::vertex(0),
            value: 0.0,
        };
        total
    ];
    let mut next = start.clone();
    // Lex generation order keeps each bucket lexicographically sorted.
    for_each(&mut |r, i, j, k| {
        out[next[r as usize]] = Cell {
            simplex: Simplex::triangle(i as u32, j as u32, k as u32),
            value: edges[r as usize].value,
        };
        next[r as usize] += 1;
    });
    let mut lo = 0;
    while lo < total {
        let mut hi = lo + 1;
        while hi < total && out[hi].value.total_cmp(&out[lo].value).is_eq() {
            hi += 1;
        }
        if hi - lo > 1 {
            out[lo..hi].sort_by(cell_order);
        }
        lo = hi;
    }
    out
}

pub fn rips_filtration(d: &DistanceMatrix, max_dim: usize) -> Result<Filtration> {
    weighted_rips_filtration(d, &WeightVector::zeros(d.len()), max_dim, f64::INFINITY)
}
