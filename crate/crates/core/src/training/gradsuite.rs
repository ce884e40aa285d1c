//! Finite-difference gradient suites over every differentiable stage.

use crate::autodiff::gradcheck::{check_inputs, check_params, rel_error};
use crate::autodiff::{Matrix, Mode, ParameterStore, Tape, Var};
use crate::filtration::{weighted_rips_filtration, WeightVector};
use crate::geometry::{pairwise_distances, DistanceMatrix, PointCloud};
use crate::persistence::compute_persistence;
use crate::perslay::{PersLay, PersLayConfig};
use crate::rng::Stream;
use crate::weightnet::{FinalInit, WeightNet, WeightNetConfig};
use crate::Result;

use super::topo::{pd_backward, topo_loss, FiltrationMode, TopoBranch, TopoClassifier};

/// Smallest accepted gap between distinct filtration terms.
pub const TIE_GAP: f64 = 1e-4;
/// Acceptance threshold on the maximum relative error.
pub const MAX_REL_ERROR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn rand_matrix(rng: &mut Stream, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

/// Random linear functional reducing any node to a scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let cols = tape.value(v).cols;
    let mut rng = Stream::new(seed);
    let w = tape.input(Matrix::new(cols, 1, (0..cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()));
    let p = tape.matmul(v, w)?;
    tape.sum_rows(p)
}

/// Smallest gap between the distinct vertex and edge terms of a weighted
/// Rips filtration; below [`TIE_GAP`] the argmax routing is ambiguous.
pub fn min_term_gap(d: &DistanceMatrix, w: &WeightVector) -> f64 {
    let n = d.len();
    let mut terms = w.0.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            terms.push((d.get(i, j) + w.0[i] + w.0[j]) / 2.0);
        }
    }
    terms.sort_by(f64::total_cmp);
    terms.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
}

fn random_cloud(rng: &mut Stream, n: usize) -> DistanceMatrix {
    let pts = (0..n).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
    pairwise_distances(&PointCloud::new(pts).expect("valid cloud"))
}

fn small_net(final_init: FinalInit) -> WeightNetConfig {
    WeightNetConfig {
        phi: [vec![1, 4, 4], vec![4, 8], vec![1, 4, 4], vec![4, 4], vec![4, 16], vec![24, 6, 1]],
        final_init,
        ..WeightNetConfig::desk()
    }
}

/// Every tape primitive on random small inputs.
fn primitives(rng: &mut Stream, trials: usize) -> Result<SuiteResult> {
    const STEP: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut note = |e: f64| {
        worst = worst.max(e);
        cases += 1;
    };
    for trial in 0..trials as u64 {
        let (r, k, c) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let (x, w, b) = (rand_matrix(rng, r, k), rand_matrix(rng, k, c), rand_matrix(rng, 1, c));
        note(check_inputs(&[x.clone(), w, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let y = t.scale(y, 0.7);
            let y2 = t.add(y, y)?;
            project(t, y2, trial)
        }, STEP)?);
        let mut xr = rand_matrix(rng, r, k);
        xr.data.iter_mut().filter(|v| v.abs() < 0.05).for_each(|v| *v += 0.1);
        note(check_inputs(&[xr], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, trial)
        }, STEP)?);
        let rows = 2 + rng.below(4);
        let (xb, gamma, beta) = (rand_matrix(rng, rows, k), rand_matrix(rng, 1, k), rand_matrix(rng, 1, k));
        let mut store = ParameterStore::new();
        let rm = store.add("rm", 1, k, vec![0.1; k], false)?;
        let rv = store.add("rv", 1, k, vec![0.7; k], false)?;
        for train in [true, false] {
            note(check_inputs(&[xb.clone(), gamma.clone(), beta.clone()], |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], (rm, rv), &store, train)?;
                project(t, y, trial)
            }, STEP)?);
        }
        note(check_inputs(std::slice::from_ref(&x), |t, v| {
            let y = t.dropout(v[0], 0.4, &mut Stream::new(trial));
            project(t, y, trial)
        }, STEP)?);
        let (seg, groups) = (1 + rng.below(3), 1 + rng.below(3));
        let xs = rand_matrix(rng, seg * groups, c);
        let idx: Vec<usize> = (0..seg * groups).map(|_| rng.below(seg * groups)).collect();
        note(check_inputs(&[xs], |t, v| {
            let a = t.segment_sum(v[0], seg)?;
            let b = t.gather_segment_sum(v[0], idx.clone(), seg)?;
            let y = t.concat_cols(a, b)?;
            project(t, y, trial)
        }, STEP)?);
        let row = rand_matrix(rng, 1, c);
        note(check_inputs(&[x.clone(), row], |t, v| {
            let br = t.broadcast_rows(v[1], r)?;
            let y = t.concat_cols(v[0], br)?;
            let y = t.gather_rows(y, vec![r - 1, 0])?;
            project(t, y, trial)
        }, STEP)?);
        let (np, nc) = (1 + rng.below(4), 1 + rng.below(4));
        let (pts, ctr) = (rand_matrix(rng, np, 2), rand_matrix(rng, nc, 2));
        note(check_inputs(&[pts, ctr], |t, v| {
            let y = t.gaussian_kernels(v[0], v[1])?;
            project(t, y, trial)
        }, STEP)?);
        let src = rand_matrix(rng, 4, 1);
        let routes = vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)], vec![(3, 1.0)], vec![(2, 0.5), (0, 0.5)]];
        note(check_inputs(&[src], |t, v| {
            let s = t.value(v[0]).data.clone();
            let value = Matrix::new(2, 2, vec![s[0], (s[1] + s[2]) / 2.0, s[3], (s[2] + s[0]) / 2.0]);
            let y = t.routed(v[0], value, routes.clone())?;
            project(t, y, trial)
        }, STEP)?);
        let labels: Vec<usize> = (0..r).map(|_| rng.below(c.max(2))).collect();
        let logits = rand_matrix(rng, r, c.max(2));
        note(check_inputs(&[logits], |t, v| t.cross_entropy(v[0], &labels), STEP)?);
        let target: Vec<f64> = (0..r * k).map(|_| rng.normal()).collect();
        note(check_inputs(&[x], |t, v| t.mse(v[0], &target), STEP)?);
    }
    Ok(SuiteResult {
        name: "primitives",
        cases,
        max_rel_error: worst,
    })
}

/// Weight network parameters under a regression loss.
fn weight_network(rng: &mut Stream, clouds: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for k in 0..clouds {
        let mut store = ParameterStore::new();
        let net = WeightNet::new(&mut store, "w", small_net(FinalInit::FanIn), &mut Stream::new(rng.next_u64()))?;
        let d = random_cloud(rng, 4 + k % 3);
        let target: Vec<f64> = (0..d.len()).map(|_| rng.normal()).collect();
        let e = check_params(&store, None, |t, s| {
            let w = net.weights_for_cloud(t, s, &d, &mut Mode::Eval)?;
            t.mse(w, &target)
        }, 1e-6, 6)?;
        worst = worst.max(e);
    }
    Ok(SuiteResult {
        name: "weight network",
        cases: clouds,
        max_rel_error: worst,
    })
}

/// PersLay centers, projection and input points.
fn perslay(rng: &mut Stream, diagrams: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for k in 0..diagrams {
        let mut store = ParameterStore::new();
        let cfg = PersLayConfig {
            n_centers: 6,
            ..Default::default()
        };
        let layer = PersLay::new(&mut store, "p", cfg, 1.0, &mut Stream::new(rng.next_u64()))?;
        let n = 1 + k % 4;
        let pts: Vec<f64> = (0..n).flat_map(|_| {
            let b = rng.uniform_range(0.0, 0.5);
            [b, b + rng.uniform_range(0.05, 0.5)]
        }).collect();
        let pts = Matrix::new(n, 2, pts);
        let seed = rng.next_u64();
        let e = check_params(&store, None, |t, s| {
            let x = t.input(pts.clone());
            let f = layer.topo_feature(t, s, x)?;
            project(t, f, seed)
        }, 1e-6, 8)?;
        worst = worst.max(e);
        let e = check_inputs(std::slice::from_ref(&pts), |t, v| {
            let f = layer.topo_feature(t, &store, v[0])?;
            project(t, f, seed)
        }, 1e-6)?;
        worst = worst.max(e);
    }
    Ok(SuiteResult {
        name: "perslay",
        cases: diagrams,
        max_rel_error: worst,
    })
}

/// Diagram coordinates with respect to the weights, through the pairing.
fn diagram_backward(rng: &mut Stream, instances: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let d = random_cloud(rng, 6);
        let w = WeightVector((0..6).map(|_| rng.uniform_range(-0.1, 0.3)).collect());
        if min_term_gap(&d, &w) < TIE_GAP {
            continue;
        }
        done += 1;
        let coef: Vec<(f64, f64)> = (0..40).map(|_| (rng.normal(), rng.normal())).collect();
        let objective = |w: &WeightVector| -> Result<f64> {
            let f = weighted_rips_filtration(&d, w, 2, f64::INFINITY)?;
            let diag = compute_persistence(&f, 1)?;
            let mut pts: Vec<_> = diag.points.iter().filter(|p| p.is_finite()).collect();
            pts.sort_by_key(|p| (p.birth_cell, p.death_cell));
            Ok(pts.iter().zip(&coef).map(|(p, (a, b))| a * p.birth + b * p.death).sum())
        };
        let f = weighted_rips_filtration(&d, &w, 2, f64::INFINITY)?;
        let diag = compute_persistence(&f, 1)?;
        let mut order: Vec<usize> = (0..diag.points.len()).filter(|&k| diag.points[k].is_finite()).collect();
        order.sort_by_key(|&k| (diag.points[k].birth_cell, diag.points[k].death_cell));
        let mut grads = vec![(0.0, 0.0); diag.points.len()];
        for (r, &k) in order.iter().enumerate() {
            grads[k] = coef[r];
        }
        let g = pd_backward(&f, &diag, &grads, &d, &w)?;
        let h = 1e-6;
        for i in 0..6 {
            let (mut up, mut down) = (w.clone(), w.clone());
            up.0[i] += h;
            down.0[i] -= h;
            let numeric = (objective(&up)? - objective(&down)?) / (2.0 * h);
            worst = worst.max(rel_error(g[i], numeric));
        }
    }
    Ok(SuiteResult {
        name: "diagram backward",
        cases: instances,
        max_rel_error: worst,
    })
}

/// The full classification loss on generic 6-point clouds, every parameter.
fn full_loss(rng: &mut Stream, instances: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let mut store = ParameterStore::new();
        let mut init = Stream::new(rng.next_u64());
        let pl = PersLayConfig {
            n_centers: 6,
            ..Default::default()
        };
        let branch = TopoBranch::new(&mut store, "topo", FiltrationMode::Learned, &small_net(FinalInit::FanIn), pl, 0.5, f64::INFINITY, 1, &mut init)?;
        let m = TopoClassifier::new(&mut store, "topo", branch, 2, &mut init)?;
        // Scaled-down final weights keep the learned weights comparable to distances.
        let ids = m.branch.weightnet.as_ref().expect("learned").param_ids();
        for v in &mut store.get_mut(ids[ids.len() - 2]).data {
            *v *= 0.3;
        }
        let d = random_cloud(rng, 6);
        let w = m.branch.weights(&store, &d)?;
        if min_term_gap(&d, &w) < TIE_GAP {
            continue;
        }
        done += 1;
        let label = rng.below(2);
        let e = check_params(&store, None, |t, s| topo_loss(&m, s, &d, label, t), 1e-6, 8)?;
        worst = worst.max(e);
    }
    Ok(SuiteResult {
        name: "full loss",
        cases: instances,
        max_rel_error: worst,
    })
}

/// Runs every suite with one seed.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = Stream::new(seed);
    Ok(vec![
        primitives(&mut rng, 20)?,
        weight_network(&mut rng, 4)?,
        perslay(&mut rng, 6)?,
        diagram_backward(&mut rng, 10)?,
        full_loss(&mut rng, 3)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in gradcheck_suite(11).unwrap() {
            assert!(r.max_rel_error < MAX_REL_ERROR, "{}: {}", r.name, r.max_rel_error);
            assert!(r.cases > 0);
        }
    }
}
