//! Persistence diagrams by boundary-matrix reduction over GF(2).

use std::collections::HashMap;

use crate::filtration::Filtration;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagramPoint {
    pub birth: f64,
    pub death: f64,
    pub degree: usize,
    /// Index into the filtration's cells.
    pub birth_cell: usize,
    /// `None` for essential classes.
    pub death_cell: Option<usize>,
}

impl DiagramPoint {
    pub fn is_finite(&self) -> bool {
        self.death_cell.is_some()
    }

    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PersistenceDiagram {
    pub points: Vec<DiagramPoint>,
}

impl PersistenceDiagram {
    pub fn in_degree(&self, degree: usize) -> impl Iterator<Item = &DiagramPoint> {
        self.points.iter().filter(move |p| p.degree == degree)
    }

    pub fn finite(&self, degree: usize) -> Vec<(f64, f64)> {
        self.in_degree(degree)
            .filter(|p| p.is_finite())
            .map(|p| (p.birth, p.death))
            .collect()
    }

    pub fn essential_births(&self, degree: usize) -> Vec<f64> {
        self.in_degree(degree)
            .filter(|p| !p.is_finite())
            .map(|p| p.birth)
            .collect()
    }

    /// `(degree, birth, death)` triples, deaths `+inf` for essential classes.
    pub fn triples(&self) -> Vec<(usize, f64, f64)> {
        self.points.iter().map(|p| (p.degree, p.birth, p.death)).collect()
    }
}

const NONE: u32 = u32::MAX;

/// Symmetric difference of two ascending index lists.
fn add_columns(a: &[u32], b: &[u32], out: &mut Vec<u32>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

/// Boundary columns (ascending positions) in filtration order, after
/// checking that every facet appears earlier with a value no larger.
pub(crate) fn boundary_columns(f: &Filtration) -> Result<Vec<Vec<u32>>> {
    Ok(flat_boundaries(f)?
        .iter()
        .zip(f.cells())
        .map(|(b, c)| b[..c.simplex.dim() + 1].iter().copied().filter(|&p| p != NONE).collect())
        .collect())
}

/// Ascending facet positions per cell, padded with `NONE`.
fn flat_boundaries(f: &Filtration) -> Result<Vec<[u32; 3]>> {
    let n = f
        .cells()
        .iter()
        .flat_map(|c| c.simplex.vertices())
        .max()
        .map_or(0, |&v| v as usize + 1);
    let mut vertex_pos = vec![NONE; n];
    let mut edge_pos: HashMap<(u32, u32), u32> = HashMap::new();
    let dense_edges = n <= 4096;
    let mut edge_table = if dense_edges { vec![NONE; n * n] } else { Vec::new() };
    let mut cols = Vec::with_capacity(f.len());
    for (k, c) in f.cells().iter().enumerate() {
        let v = c.simplex.vertices();
        let mut col = [NONE; 3];
        let lookup_edge = |a: u32, b: u32| {
            if dense_edges {
                edge_table[a as usize * n + b as usize]
            } else {
                edge_pos.get(&(a, b)).copied().unwrap_or(NONE)
            }
        };
        let len = match c.simplex.dim() {
            0 => 0,
            1 => {
                col[0] = vertex_pos[v[0] as usize];
                col[1] = vertex_pos[v[1] as usize];
                2
            }
            _ => {
                col = [lookup_edge(v[0], v[1]), lookup_edge(v[0], v[2]), lookup_edge(v[1], v[2])];
                3
            }
        };
        for &p in &col[..len] {
            if p == NONE || p as usize >= k || f.cells()[p as usize].value > c.value {
                return Err(Error::NonMonotoneFiltration(k));
            }
        }
        col[..len].sort_unstable();
        let slot = match c.simplex.dim() {
            0 => &mut vertex_pos[v[0] as usize],
            1 if dense_edges => &mut edge_table[v[0] as usize * n + v[1] as usize],
            1 => edge_pos.entry((v[0], v[1])).or_insert(NONE),
            _ => {
                cols.push(col);
                continue;
            }
        };
        if *slot != NONE {
            return Err(Error::InvalidInput(format!("duplicate simplex at cell {k}")));
        }
        *slot = k as u32;
        cols.push(col);
    }
    Ok(cols)
}

/// Number of edges that close a cycle, by union-find over the edges in order.
fn count_cycle_edges(f: &Filtration, cols: &[Vec<u32>]) -> usize {
    let m = f.len();
    let mut parent: Vec<u32> = (0..m as u32).collect();
    fn find(p: &mut [u32], mut x: u32) -> u32 {
        while p[x as usize] != x {
            let up = p[p[x as usize] as usize];
            p[x as usize] = up;
            x = up;
        }
        x
    }
    let mut cycles = 0;
    for (k, c) in f.cells().iter().enumerate() {
        if c.simplex.dim() == 1 {
            let (a, b) = (find(&mut parent, cols[k][0]), find(&mut parent, cols[k][1]));
            if a == b {
                cycles += 1;
            } else {
                parent[a as usize] = b;
            }
        }
    }
    cycles
}

/// Standard column reduction of the boundary matrix with clearing.
///
/// Columns are reduced from the highest dimension down; whenever a column of
/// dimension `k + 1` ends with pivot `i`, column `i` is known to reduce to zero
/// and is skipped. Pairs with equal birth and death values are dropped.
///
/// In dimension two the sweep stops as soon as every cycle-closing edge has
/// been paired, since no later column can find a free pivot.
pub fn compute_persistence_homology(f: &Filtration, max_degree: usize) -> Result<PersistenceDiagram> {
    if max_degree > 1 {
        return Err(Error::InvalidInput(format!(
            "homology degree {max_degree} not supported"
        )));
    }
    let cells = f.cells();
    let m = cells.len();
    let boundaries = boundary_columns(f)?;
    let top = max_degree + 1;

    // pivot_col[row] = column whose reduced form has `row` as its lowest entry.
    let mut pivot_col = vec![NONE; m];
    let mut cleared = vec![false; m];
    let mut reduced: Vec<Vec<u32>> = vec![Vec::new(); m];
    // Columns known to reduce to zero; vertices trivially.
    let mut zero: Vec<bool> = cells.iter().map(|c| c.simplex.dim() == 0).collect();
    let mut scratch = Vec::new();

    let cycle_edges = if top == 2 { count_cycle_edges(f, &boundaries) } else { 0 };
    for dim in (1..=top).rev() {
        let mut found = 0;
        for j in 0..m {
            if dim == 2 && found == cycle_edges {
                break;
            }
            if cells[j].simplex.dim() != dim || cleared[j] {
                continue;
            }
            let mut col = boundaries[j].clone();
            while let Some(&low) = col.last() {
                let p = pivot_col[low as usize];
                if p == NONE {
                    break;
                }
                add_columns(&col, &reduced[p as usize], &mut scratch);
                std::mem::swap(&mut col, &mut scratch);
            }
            if let Some(&low) = col.last() {
                found += 1;
                pivot_col[low as usize] = j as u32;
                cleared[low as usize] = true;
                reduced[j] = col;
            } else {
                zero[j] = true;
            }
        }
    }

    let mut points = Vec::new();
    for (i, &j) in pivot_col.iter().enumerate() {
        if j == NONE {
            continue;
        }
        let degree = cells[i].simplex.dim();
        if degree > max_degree {
            continue;
        }
        let (b, d) = (cells[i].value, cells[j as usize].value);
        if b < d {
            points.push(DiagramPoint {
                birth: b,
                death: d,
                degree,
                birth_cell: i,
                death_cell: Some(j as usize),
            });
        }
    }
    points.sort_by_key(|p| p.death_cell);
    for (i, c) in cells.iter().enumerate() {
        let dim = c.simplex.dim();
        // Creators that nothing killed.
        if dim <= max_degree && zero[i] && pivot_col[i] == NONE {
            points.push(DiagramPoint {
                birth: c.value,
                death: f64::INFINITY,
                degree: dim,
                birth_cell: i,
                death_cell: None,
            });
        }
    }
    Ok(PersistenceDiagram { points })
}

/// Persistence diagram of `f` up to degree `max_degree` (0 or 1).
///
/// Degree-0 pairs come from the edge column reduction. Edges that kill a
/// component are cleared, and the remaining cycle-closing edges are paired by
/// reducing their coboundary columns in reverse filtration order. The pairing
/// is determined by the cell order alone, so the result is identical to
/// [`compute_persistence_homology`], only much cheaper on complete Rips
/// complexes where most triangles reduce to zero.
///
/// Pairs with equal birth and death values are dropped. Points are listed
/// finite pairs first (by death cell), then essential classes.
pub fn compute_persistence(f: &Filtration, max_degree: usize) -> Result<PersistenceDiagram> {
    if max_degree > 1 {
        return Err(Error::InvalidInput(format!(
            "homology degree {max_degree} not supported"
        )));
    }
    let cells = f.cells();
    let m = cells.len();
    let boundaries = flat_boundaries(f)?;

    // Degree 0 by union-find: an edge joining two components kills the
    // younger root, which is the pairing the edge column reduction produces.
    let mut parent: Vec<u32> = (0..m as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            let p = parent[parent[x as usize] as usize];
            parent[x as usize] = p;
            x = p;
        }
        x
    }
    let mut points = Vec::new();
    let mut vertex_killed = vec![false; m];
    let mut is_cycle = vec![false; m];
    let mut cycle_edges = Vec::new();
    for j in 0..m {
        if cells[j].simplex.dim() != 1 {
            continue;
        }
        let (a, b) = (find(&mut parent, boundaries[j][0]), find(&mut parent, boundaries[j][1]));
        if a == b {
            is_cycle[j] = true;
            cycle_edges.push(j);
            continue;
        }
        let (old, young) = if a < b { (a, b) } else { (b, a) };
        parent[young as usize] = old;
        vertex_killed[young as usize] = true;
        let (bv, dv) = (cells[young as usize].value, cells[j].value);
        if bv < dv {
            points.push(DiagramPoint {
                birth: bv,
                death: dv,
                degree: 0,
                birth_cell: young as usize,
                death_cell: Some(j),
            });
        }
    }

    if max_degree >= 1 {
        // Cofacets of each cycle edge as ascending triangle positions, in
        // one flat array indexed by `start`.
        let mut start = vec![0u32; m + 1];
        for (t, c) in cells.iter().enumerate() {
            if c.simplex.dim() == 2 {
                for &e in &boundaries[t] {
                    if is_cycle[e as usize] {
                        start[e as usize + 1] += 1;
                    }
                }
            }
        }
        for k in 0..m {
            start[k + 1] += start[k];
        }
        let mut flat = vec![0u32; start[m] as usize];
        let mut fill = start.clone();
        for (t, c) in cells.iter().enumerate() {
            if c.simplex.dim() == 2 {
                for &e in &boundaries[t] {
                    if is_cycle[e as usize] {
                        flat[fill[e as usize] as usize] = t as u32;
                        fill[e as usize] += 1;
                    }
                }
            }
        }
        let column = |e: usize| &flat[start[e] as usize..start[e + 1] as usize];
        // Pivot is the earliest triangle; columns go in reverse filtration
        // order. Only columns that needed additions are stored.
        let mut owner = vec![NONE; m];
        let mut reduced: HashMap<u32, Vec<u32>> = HashMap::new();
        let mut edge_deaths: Vec<(usize, Option<usize>)> = Vec::new();
        let mut scratch = Vec::new();
        for &e in cycle_edges.iter().rev() {
            let first = column(e).first().copied();
            let death = match first {
                Some(top) if owner[top as usize] != NONE => {
                    let mut col = column(e).to_vec();
                    while let Some(&top) = col.first() {
                        let o = owner[top as usize];
                        if o == NONE {
                            break;
                        }
                        let other = reduced.get(&o).map_or_else(|| column(o as usize), Vec::as_slice);
                        add_columns(&col, other, &mut scratch);
                        std::mem::swap(&mut col, &mut scratch);
                    }
                    let top = col.first().copied();
                    if let Some(t) = top {
                        owner[t as usize] = e as u32;
                        reduced.insert(e as u32, col);
                    }
                    top
                }
                Some(top) => {
                    owner[top as usize] = e as u32;
                    Some(top)
                }
                None => None,
            };
            edge_deaths.push((e, death.map(|t| t as usize)));
        }
        for (e, death) in edge_deaths {
            match death {
                Some(t) => {
                    let (b, d) = (cells[e].value, cells[t].value);
                    if b < d {
                        points.push(DiagramPoint {
                            birth: b,
                            death: d,
                            degree: 1,
                            birth_cell: e,
                            death_cell: Some(t),
                        });
                    }
                }
                None => points.push(DiagramPoint {
                    birth: cells[e].value,
                    death: f64::INFINITY,
                    degree: 1,
                    birth_cell: e,
                    death_cell: None,
                }),
            }
        }
    }
    points.sort_by_key(|p| p.death_cell);
    let essential_from = points.len();
    for (i, c) in cells.iter().enumerate() {
        if c.simplex.dim() == 0 && !vertex_killed[i] {
            points.push(DiagramPoint {
                birth: c.value,
                death: f64::INFINITY,
                degree: 0,
                birth_cell: i,
                death_cell: None,
            });
        }
    }
    points[..essential_from].sort_by_key(|p| p.death_cell.is_none());
    Ok(PersistenceDiagram { points })
}

fn linf(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

fn to_diagonal(a: (f64, f64)) -> f64 {
    (a.1 - a.0) / 2.0
}

/// Whether a perfect matching exists in the bipartite graph `adj` (left -> right).
fn has_perfect_matching(adj: &[Vec<usize>], n_right: usize) -> bool {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], match_r: &mut [usize]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if match_r[v] == usize::MAX || augment(match_r[v], adj, seen, match_r) {
                match_r[v] = u;
                return true;
            }
        }
        false
    }
    let mut match_r = vec![usize::MAX; n_right];
    let mut seen = vec![false; n_right];
    for u in 0..adj.len() {
        seen.iter_mut().for_each(|s| *s = false);
        if !augment(u, adj, &mut seen, &mut match_r) {
            return false;
        }
    }
    true
}

/// Bottleneck distance between finite point sets.
pub fn bottleneck_finite(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na + nb == 0 {
        return 0.0;
    }
    let mut candidates: Vec<f64> = vec![0.0];
    for &p in a {
        candidates.push(to_diagonal(p));
        for &q in b {
            candidates.push(linf(p, q));
        }
    }
    candidates.extend(b.iter().map(|&q| to_diagonal(q)));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // Left: a_0..a_na, then diagonal copies of b. Right: b_0..b_nb, then diagonal copies of a.
    let feasible = |r: f64| {
        let mut adj = vec![Vec::new(); na + nb];
        for i in 0..na {
            for j in 0..nb {
                if linf(a[i], b[j]) <= r {
                    adj[i].push(j);
                }
            }
            if to_diagonal(a[i]) <= r {
                adj[i].push(nb + i);
            }
        }
        for j in 0..nb {
            if to_diagonal(b[j]) <= r {
                adj[na + j].push(j);
            }
            adj[na + j].extend(nb..nb + na);
        }
        has_perfect_matching(&adj, na + nb)
    };

    let (mut lo, mut hi) = (0, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(candidates[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    candidates[lo]
}

/// Bottleneck distance in one degree. Essential classes must have equal
/// counts and are matched by sorted birth.
pub fn bottleneck_distance(a: &PersistenceDiagram, b: &PersistenceDiagram, degree: usize) -> Result<f64> {
    let mut ea = a.essential_births(degree);
    let mut eb = b.essential_births(degree);
    if ea.len() != eb.len() {
        return Err(Error::EssentialMismatch(ea.len(), eb.len()));
    }
    ea.sort_by(f64::total_cmp);
    eb.sort_by(f64::total_cmp);
    let ess = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(bottleneck_finite(&a.finite(degree), &b.finite(degree)).max(ess))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::filtration::{rips_filtration, weighted_rips_filtration, Cell, Simplex, WeightVector};
    use crate::geometry::{pairwise_distances, DistanceMatrix, PointCloud};
    use crate::rng::Stream;

    /// Dense GF(2) reduction without clearing: the textbook algorithm.
    pub(crate) fn naive_pairs(f: &Filtration) -> Vec<(usize, f64, f64)> {
        let cells = f.cells();
        let m = cells.len();
        let mut mat = vec![vec![false; m]; m];
        for (j, c) in cells.iter().enumerate() {
            for face in c.simplex.facets() {
                let i = cells.iter().position(|x| x.simplex == face).unwrap();
                mat[j][i] = true;
            }
        }
        let low = |col: &Vec<bool>| col.iter().rposition(|&x| x);
        for j in 0..m {
            while let Some(l) = low(&mat[j]) {
                let Some(k) = (0..j).find(|&k| low(&mat[k]) == Some(l)) else { break };
                let other = mat[k].clone();
                for (x, y) in mat[j].iter_mut().zip(other) {
                    *x ^= y;
                }
            }
        }
        let mut paired = vec![false; m];
        let mut out = Vec::new();
        for j in 0..m {
            if let Some(i) = low(&mat[j]) {
                paired[i] = true;
                paired[j] = true;
                if cells[i].value < cells[j].value {
                    out.push((cells[i].simplex.dim(), cells[i].value, cells[j].value));
                }
            }
        }
        for i in 0..m {
            if !paired[i] && cells[i].simplex.dim() <= 1 {
                out.push((cells[i].simplex.dim(), cells[i].value, f64::INFINITY));
            }
        }
        out
    }

    pub(crate) fn sorted(mut v: Vec<(usize, f64, f64)>) -> Vec<(usize, u64, u64)> {
        let mut out: Vec<_> = v
            .drain(..)
            .map(|(d, b, e)| (d, b.to_bits(), e.to_bits()))
            .collect();
        out.sort_unstable();
        out
    }

    fn square() -> DistanceMatrix {
        pairwise_distances(
            &PointCloud::new(vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
            ])
            .unwrap(),
        )
    }

    fn diag(points: &[(f64, f64)]) -> PersistenceDiagram {
        PersistenceDiagram {
            points: points
                .iter()
                .map(|&(b, d)| DiagramPoint {
                    birth: b,
                    death: d,
                    degree: 1,
                    birth_cell: 0,
                    death_cell: if d.is_finite() { Some(0) } else { None },
                })
                .collect(),
        }
    }

    #[test]
    fn unit_square_loop() {
        let f = rips_filtration(&square(), 2).unwrap();
        let pd = compute_persistence(&f, 1).unwrap();
        let h1 = pd.finite(1);
        assert_eq!(h1.len(), 1);
        assert!((h1[0].0 - 0.5).abs() < 1e-12);
        assert!((h1[0].1 - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(sorted(pd.triples()), sorted(naive_pairs(&f)));
    }

    #[test]
    fn equilateral_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let pc = PointCloud::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]]).unwrap();
        let f = rips_filtration(&pairwise_distances(&pc), 2).unwrap();
        let pd = compute_persistence(&f, 1).unwrap();
        assert!(pd.in_degree(1).next().is_none());
        let mut h0: Vec<(f64, f64)> = pd.in_degree(0).map(|p| (p.birth, p.death)).collect();
        h0.sort_by(|a, b| a.1.total_cmp(&b.1));
        assert_eq!(h0.len(), 3);
        for p in &h0[..2] {
            assert_eq!(p.0, 0.0);
            assert!((p.1 - 0.5).abs() < 1e-12);
        }
        assert_eq!(h0[2], (0.0, f64::INFINITY));
    }

    #[test]
    fn one_essential_class_per_component() {
        let mut rng = Stream::new(8);
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.uniform() * 4.0]).collect();
            let d = pairwise_distances(&PointCloud::new(pts).unwrap());
            let t_max = rng.uniform_range(0.05, 1.0);
            let f = weighted_rips_filtration(&d, &WeightVector::zeros(n), 2, t_max).unwrap();
            // Components at t_max by union-find.
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            for c in f.cells().iter().filter(|c| c.simplex.dim() == 1) {
                let v = c.simplex.vertices();
                let (a, b) = (find(&mut parent, v[0] as usize), find(&mut parent, v[1] as usize));
                parent[a] = b;
            }
            let comps = (0..n).filter(|&x| find(&mut parent, x) == x).count();
            let pd = compute_persistence(&f, 1).unwrap();
            assert_eq!(pd.essential_births(0).len(), comps);
        }
    }

    #[test]
    fn matches_naive_reduction_on_random_filtrations() {
        let mut rng = Stream::new(77);
        for _ in 0..200 {
            let n = 2 + rng.below(7);
            let (d, w) = crate::filtration::tests::random_instance(&mut rng, n);
            let t_max = if rng.uniform() < 0.3 { rng.uniform_range(0.2, 1.0) } else { f64::INFINITY };
            let f = weighted_rips_filtration(&d, &w, 2, t_max).unwrap();
            let pd = compute_persistence(&f, 1).unwrap();
            assert_eq!(sorted(pd.triples()), sorted(naive_pairs(&f)));
        }
    }

    #[test]
    fn coboundary_route_matches_column_reduction() {
        let mut rng = Stream::new(78);
        for case in 0..150 {
            let n = 3 + rng.below(18);
            let (d, w) = if case % 3 == 0 {
                // Integer grid points with zero weights give many value ties.
                let pts: Vec<Vec<f64>> =
                    (0..n).map(|_| vec![rng.below(4) as f64, rng.below(4) as f64]).collect();
                (pairwise_distances(&PointCloud::new(pts).unwrap()), WeightVector::zeros(n))
            } else {
                crate::filtration::tests::random_instance(&mut rng, n)
            };
            let t_max = if rng.uniform() < 0.3 { rng.uniform_range(0.2, 1.0) } else { f64::INFINITY };
            let f = weighted_rips_filtration(&d, &w, 2, t_max).unwrap();
            let a = compute_persistence(&f, 1).unwrap();
            let b = compute_persistence_homology(&f, 1).unwrap();
            let key = |pd: &PersistenceDiagram| {
                let mut v: Vec<_> = pd.points.iter().map(|p| (p.degree, p.birth_cell, p.death_cell)).collect();
                v.sort();
                v
            };
            assert_eq!(key(&a), key(&b));
        }
    }

    #[test]
    fn pairing_reproduces_values() {
        let mut rng = Stream::new(4);
        for _ in 0..50 {
            let (d, w) = crate::filtration::tests::random_instance(&mut rng, 7);
            let f = weighted_rips_filtration(&d, &w, 2, f64::INFINITY).unwrap();
            let pd = compute_persistence(&f, 1).unwrap();
            for p in &pd.points {
                assert_eq!(p.birth.to_bits(), f.cells()[p.birth_cell].value.to_bits());
                assert_eq!(p.degree, f.cells()[p.birth_cell].simplex.dim());
                match p.death_cell {
                    Some(j) => {
                        assert_eq!(p.death.to_bits(), f.cells()[j].value.to_bits());
                        assert!(p.death > p.birth);
                    }
                    None => assert_eq!(p.death, f64::INFINITY),
                }
            }
        }
    }

    #[test]
    fn non_monotone_rejected() {
        let cells = vec![
            Cell { simplex: Simplex::vertex(0), value: 0.0 },
            Cell { simplex: Simplex::edge(0, 1), value: 1.0 },
            Cell { simplex: Simplex::vertex(1), value: 0.0 },
        ];
        let f = Filtration::from_cells_unchecked(cells);
        assert!(matches!(compute_persistence(&f, 1), Err(Error::NonMonotoneFiltration(1))));
        let cells = vec![
            Cell { simplex: Simplex::vertex(0), value: 0.0 },
            Cell { simplex: Simplex::vertex(1), value: 2.0 },
            Cell { simplex: Simplex::edge(0, 1), value: 1.0 },
        ];
        let f = Filtration::from_cells_unchecked(cells);
        assert!(compute_persistence(&f, 1).is_err());
    }

    #[test]
    fn bottleneck_examples() {
        let a = diag(&[(0.0, 2.0)]);
        assert_eq!(bottleneck_distance(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(bottleneck_distance(&a, &diag(&[]), 1).unwrap(), 1.0);
        assert_eq!(bottleneck_distance(&a, &diag(&[(0.5, 2.5)]), 1).unwrap(), 0.5);
        assert!(matches!(
            bottleneck_distance(&diag(&[(0.0, f64::INFINITY)]), &diag(&[]), 1),
            Err(Error::EssentialMismatch(1, 0))
        ));
    }

    /// Exhaustive bottleneck over all partial matchings.
    fn brute_bottleneck(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        fn rec(i: usize, a: &[(f64, f64)], b: &[(f64, f64)], used: &mut Vec<bool>, cur: f64, best: &mut f64) {
            if cur >= *best {
                return;
            }
            if i == a.len() {
                let rest = b
                    .iter()
                    .zip(used.iter())
                    .filter(|(_, &u)| !u)
                    .map(|(&q, _)| to_diagonal(q))
                    .fold(cur, f64::max);
                *best = best.min(rest);
                return;
            }
            rec(i + 1, a, b, used, cur.max(to_diagonal(a[i])), best);
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    rec(i + 1, a, b, used, cur.max(linf(a[i], b[j])), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, a, b, &mut vec![false; b.len()], 0.0, &mut best);
        best
    }

    #[test]
    fn bottleneck_matches_exhaustive_search() {
        let mut rng = Stream::new(21);
        for _ in 0..300 {
            let mk = |rng: &mut Stream| {
                let k = rng.below(5);
                (0..k)
                    .map(|_| {
                        let b = rng.uniform();
                        (b, b + rng.uniform())
                    })
                    .collect::<Vec<_>>()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(bottleneck_finite(&a, &b), brute_bottleneck(&a, &b));
        }
    }

    #[test]
    fn stability_under_weight_perturbation() {
        let mut rng = Stream::new(31);
        for _ in 0..30 {
            let (d, w) = crate::filtration::tests::random_instance(&mut rng, 8);
            let eps = rng.uniform_range(0.01, 0.2);
            let w2 = WeightVector(w.0.iter().map(|v| v + rng.uniform_range(-eps, eps)).collect());
            let a = compute_persistence(&weighted_rips_filtration(&d, &w, 2, f64::INFINITY).unwrap(), 1).unwrap();
            let b = compute_persistence(&weighted_rips_filtration(&d, &w2, 2, f64::INFINITY).unwrap(), 1).unwrap();
            assert!(bottleneck_distance(&a, &b, 1).unwrap() <= eps + 1e-9);
        }
    }

    #[test]
    fn heavy_outlier_beyond_t_max_is_invisible() {
        let mut rng = Stream::new(12);
        for _ in 0..20 {
            let (d, w) = crate::filtration::tests::random_instance(&mut rng, 6);
            let t_max = 0.6;
            let base = compute_persistence(&weighted_rips_filtration(&d, &w, 2, t_max).unwrap(), 1).unwrap();
            // Append a seventh point with weight above t_max.
            let n = 7;
            let mut flat = vec![0.0; n * n];
            for i in 0..6 {
                for j in 0..6 {
                    flat[i * n + j] = d.get(i, j);
                }
                let x = rng.uniform();
                flat[i * n + 6] = x;
                flat[6 * n + i] = x;
            }
            let d7 = DistanceMatrix::from_flat(n, flat).unwrap();
            let mut w7 = w.0.clone();
            w7.push(t_max + 0.1);
            let ext = compute_persistence(&weighted_rips_filtration(&d7, &WeightVector(w7), 2, t_max).unwrap(), 1).unwrap();
            assert_eq!(sorted(base.triples()), sorted(ext.triples()));
        }
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = Stream::new(13);
        for _ in 0..20 {
            let (d, w) = crate::filtration::tests::random_instance(&mut rng, 7);
            let lambda = 4.0; // power of two keeps the scaling exact
            let a = compute_persistence(&weighted_rips_filtration(&d, &w, 2, f64::INFINITY).unwrap(), 1).unwrap();
            let w2 = WeightVector(w.0.iter().map(|v| v * lambda).collect());
            let b = compute_persistence(&weighted_rips_filtration(&d.scaled(lambda), &w2, 2, f64::INFINITY).unwrap(), 1).unwrap();
            let scaled: Vec<_> = a.triples().into_iter().map(|(k, x, y)| (k, x * lambda, y * lambda)).collect();
            assert_eq!(sorted(scaled), sorted(b.triples()));
        }
    }
}
