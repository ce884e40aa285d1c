//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records one forward pass as a list of nodes, each holding its
//! value and the operation that produced it. [`Tape::backward`] walks the list
//! in exact reverse order and accumulates adjoints additively, so replaying
//! identical inputs yields bit-identical gradients.
//!
//! The op set is the one the weight network, PersLay and the classifiers
//! need: affine maps, ReLU, batch normalization, dropout, segment sums,
//! concatenation, Gaussian kernels, routed gathers and two losses.

pub mod gradcheck;
mod mlp;
mod optim;
mod params;

pub use mlp::{apply_bn_observations, init_uniform_fan_in, Mlp, MlpSpec, Mode};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use params::{Checkpoint, Grads, ParamId, ParameterStore, Tensor};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn column(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::new(n, 1, v)
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::new(1, n, v)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    SegmentSum(Var, usize),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    GatherRows(Var, Vec<usize>),
    GatherSegmentSum(Var, Vec<usize>, usize),
    GaussianKernels {
        points: Var,
        centers: Var,
        kernel: Vec<f64>,
    },
    Routed(Var, Vec<Vec<(usize, f64)>>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Batch statistics observed by a train-mode batch-norm node, to be folded
/// into the running averages once the step is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bn_observations: Vec<BnObservation>,
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.data.len(), 1, "not a scalar node");
        m.data[0]
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    /// A constant input. Gradients with respect to it are still available.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(Matrix::new(t.rows, t.cols, t.data.clone()), Op::Param(id))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(w));
        if a.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let (r, k, c) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for kk in 0..k {
                let av = a.data[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let wrow = &b.data[kk * c..(kk + 1) * c];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += av * wv;
                }
            }
        }
        Ok(self.push(Matrix::new(r, c, out), Op::MatMul(x, w)))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (a, bv) = (self.value(x), self.value(b));
        if bv.rows != 1 || bv.cols != a.cols {
            return Err(Error::Shape(format!(
                "bias {}x{} for {}x{}",
                bv.rows, bv.cols, a.rows, a.cols
            )));
        }
        let mut data = a.data.clone();
        for row in data.chunks_exact_mut(a.cols) {
            for (o, &bb) in row.iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let m = Matrix::new(a.rows, a.cols, data);
        Ok(self.push(m, Op::AddRow(x, b)))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Shape("add of different shapes".into()));
        }
        let data = a.data.iter().zip(&b.data).map(|(p, q)| p + q).collect();
        let m = Matrix::new(a.rows, a.cols, data);
        Ok(self.push(m, Op::Add(x, y)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let a = self.value(x);
        let m = Matrix::new(a.rows, a.cols, a.data.iter().map(|v| v * s).collect());
        self.push(m, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let a = self.value(x);
        let m = Matrix::new(a.rows, a.cols, a.data.iter().map(|&v| v.max(0.0)).collect());
        self.push(m, Op::Relu(x))
    }

    /// Batch normalization over rows.
    ///
    /// With `running = Some(..)` and `train = false` the stored running
    /// statistics are used; in train mode with at least two rows the batch
    /// statistics are used and reported via [`Tape::bn_observations`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &ParameterStore,
        train: bool,
    ) -> Result<Var> {
        let a = self.value(x);
        let (r, c) = (a.rows, a.cols);
        if self.value(gamma).data.len() != c || self.value(beta).data.len() != c {
            return Err(Error::Shape("batch norm affine size".into()));
        }
        let batch_stats = train && r >= 2;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            for row in a.data.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= r as f64);
            let mut var = vec![0.0; c];
            for row in a.data.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let biased: Vec<f64> = var.iter().map(|s| s / r as f64).collect();
            self.bn_observations.push(BnObservation {
                running_mean: running.0,
                running_var: running.1,
                mean: mean.clone(),
                var: var.iter().map(|s| s / (r - 1) as f64).collect(),
            });
            (mean, biased)
        } else {
            (store.get(running.0).data.clone(), store.get(running.1).data.clone())
        };
        let a = self.value(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        for (dst, src) in xhat.chunks_exact_mut(c).zip(a.data.chunks_exact(c)) {
            for k in 0..c {
                dst[k] = (src[k] - mean[k]) * inv_std[k];
            }
        }
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = vec![0.0; r * c];
        for (dst, src) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for k in 0..c {
                dst[k] = src[k] * g[k] + b[k];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(self.push(Matrix::new(r, c, out), op))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut crate::rng::Stream) -> Var {
        let a = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..a.data.len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = a.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let m = Matrix::new(a.rows, a.cols, data);
        self.push(m, Op::Dropout(x, mask))
    }

    /// Sums consecutive groups of `seg` rows, in row order.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Result<Var> {
        let a = self.value(x);
        if seg == 0 || !a.rows.is_multiple_of(seg) {
            return Err(Error::Shape(format!("segment {seg} does not divide {} rows", a.rows)));
        }
        let c = a.cols;
        let groups = a.rows / seg;
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let dst = &mut out[g * c..(g + 1) * c];
            for r in g * seg..(g + 1) * seg {
                for (o, v) in dst.iter_mut().zip(a.row(r)) {
                    *o += v;
                }
            }
        }
        Ok(self.push(Matrix::new(groups, c, out), Op::SegmentSum(x, seg)))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows;
        self.segment_sum(x, r)
    }

    pub fn concat_cols(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.rows != b.rows {
            return Err(Error::Shape("concat row mismatch".into()));
        }
        let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let m = Matrix::new(a.rows, a.cols + b.cols, data);
        Ok(self.push(m, Op::ConcatCols(x, y)))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let a = self.value(x);
        if a.rows != 1 {
            return Err(Error::Shape("broadcast of a non-row".into()));
        }
        let mut data = Vec::with_capacity(n * a.cols);
        for _ in 0..n {
            data.extend_from_slice(&a.data);
        }
        let m = Matrix::new(n, a.cols, data);
        Ok(self.push(m, Op::BroadcastRows(x)))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let a = self.value(x);
        if idx.iter().any(|&i| i >= a.rows) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * a.cols);
        for &i in &idx {
            data.extend_from_slice(a.row(i));
        }
        let m = Matrix::new(idx.len(), a.cols, data);
        Ok(self.push(m, Op::GatherRows(x, idx)))
    }

    /// `segment_sum(gather_rows(x, idx), seg)` without the gathered
    /// intermediate. Sums run in `idx` order, as in the two-step version.
    pub fn gather_segment_sum(&mut self, x: Var, idx: Vec<usize>, seg: usize) -> Result<Var> {
        let a = self.value(x);
        if idx.iter().any(|&i| i >= a.rows) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        if seg == 0 || !idx.len().is_multiple_of(seg) {
            return Err(Error::Shape(format!("segment {seg} does not divide {} rows", idx.len())));
        }
        let c = a.cols;
        let groups = idx.len() / seg;
        let mut out = vec![0.0; groups * c];
        for (k, &i) in idx.iter().enumerate() {
            let g = k / seg;
            for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(a.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(Matrix::new(groups, c, out), Op::GatherSegmentSum(x, idx, seg)))
    }

    /// `out[m] = sum_q exp(-|q - c_m|^2 / 2)` over the rows `q` of `points`
    /// (`p x 2`) and centers `c` (`M x 2`), summed in row order.
    pub fn gaussian_kernels(&mut self, points: Var, centers: Var) -> Result<Var> {
        let (p, c) = (self.value(points), self.value(centers));
        if p.cols != 2 || c.cols != 2 {
            return Err(Error::Shape("gaussian kernels expect 2 columns".into()));
        }
        let (np, nc) = (p.rows, c.rows);
        let mut kernel = vec![0.0; np * nc];
        let mut out = vec![0.0; nc];
        for i in 0..np {
            let q = p.row(i);
            for m in 0..nc {
                let cm = c.row(m);
                let d2 = (q[0] - cm[0]).powi(2) + (q[1] - cm[1]).powi(2);
                let k = (-0.5 * d2).exp();
                kernel[i * nc + m] = k;
                out[m] += k;
            }
        }
        let op = Op::GaussianKernels {
            points,
            centers,
            kernel,
        };
        Ok(self.push(Matrix::new(1, nc, out), op))
    }

    /// A node whose entries are known values that depend piecewise-linearly
    /// on entries of `src`: entry `e` has gradient routes `routes[e]`, each a
    /// list of `(flat index into src, coefficient)`.
    pub fn routed(&mut self, src: Var, value: Matrix, routes: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let n = self.value(src).data.len();
        if routes.len() != value.data.len() {
            return Err(Error::Shape("one route per routed entry".into()));
        }
        if routes.iter().flatten().any(|&(i, _)| i >= n) {
            return Err(Error::Shape("route index out of range".into()));
        }
        Ok(self.push(value, Op::Routed(src, routes)))
    }

    /// Mean cross-entropy of the rows of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let a = self.value(logits);
        if a.rows != labels.len() {
            return Err(Error::Shape("one label per logit row".into()));
        }
        if labels.iter().any(|&l| l >= a.cols) {
            return Err(Error::Shape("label out of range".into()));
        }
        let mut probs = vec![0.0; a.data.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = a.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[label];
            for (k, v) in row.iter().enumerate() {
                probs[r * a.cols + k] = (v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Matrix::new(1, 1, vec![loss]), op))
    }

    /// Mean squared error against a fixed target of the same size.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let a = self.value(x);
        if a.data.len() != target.len() {
            return Err(Error::Shape("mse target size".into()));
        }
        let loss = a
            .data
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(Matrix::new(1, 1, vec![loss]), Op::Mse(x, target.to_vec())))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, out: Var) -> Adjoints {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[out.0] = Some(vec![1.0; self.nodes[out.0].value.data.len()]);
        for idx in (0..=out.0).rev() {
            let Some(go) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &go, &mut g);
            g[idx] = Some(go);
        }
        Adjoints { grads: g }
    }

    fn propagate(&self, node: &Node, go: &[f64], g: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.data.len();
            let slot = g[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                let (a, b) = (val(*x), val(*w));
                let (r, k, c) = (a.rows, a.cols, b.cols);
                // Row-wise accumulation over the transposed weights sums the
                // same terms in the same order as a dot product, but vectorizes.
                let mut wt = vec![0.0; k * c];
                for kk in 0..k {
                    for cc in 0..c {
                        wt[cc * k + kk] = b.data[kk * c + cc];
                    }
                }
                acc(*x, &mut |dx| {
                    let mut tmp = vec![0.0; k];
                    for i in 0..r {
                        tmp.iter_mut().for_each(|t| *t = 0.0);
                        for (cc, &gv) in go[i * c..(i + 1) * c].iter().enumerate() {
                            for (t, &wv) in tmp.iter_mut().zip(&wt[cc * k..(cc + 1) * k]) {
                                *t += gv * wv;
                            }
                        }
                        for (d, t) in dx[i * k..(i + 1) * k].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for i in 0..r {
                        let grow = &go[i * c..(i + 1) * c];
                        for kk in 0..k {
                            let av = a.data[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in dw[kk * c..(kk + 1) * c].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(go).for_each(|(d, v)| *d += v));
                let c = node.value.cols;
                acc(*b, &mut |db| {
                    for row in go.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Add(x, y) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(go).for_each(|(d, v)| *d += v));
                acc(*y, &mut |dy| dy.iter_mut().zip(go).for_each(|(d, v)| *d += v));
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(go).for_each(|(d, v)| *d += s * v));
            }
            Op::Relu(x) => {
                let a = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, v), xi) in dx.iter_mut().zip(go).zip(&a.data) {
                        if *xi > 0.0 {
                            *d += v;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (r, c) = (node.value.rows, node.value.cols);
                let gam = &val(*gamma).data;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..r {
                    for k in 0..c {
                        sum_dy[k] += go[i * c + k];
                        sum_dy_xhat[k] += go[i * c + k] * xhat[i * c + k];
                    }
                }
                acc(*gamma, &mut |dg| dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v));
                acc(*beta, &mut |db| db.iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v));
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for k in 0..c {
                            let dxhat = go[i * c + k] * gam[k];
                            dx[i * c + k] += if *batch_stats {
                                let n = r as f64;
                                inv_std[k] / n
                                    * (n * dxhat
                                        - gam[k] * sum_dy[k]
                                        - xhat[i * c + k] * gam[k] * sum_dy_xhat[k])
                            } else {
                                dxhat * inv_std[k]
                            };
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |dx| {
                    for ((d, v), m) in dx.iter_mut().zip(go).zip(mask) {
                        *d += v * m;
                    }
                });
            }
            Op::SegmentSum(x, seg) => {
                let c = node.value.cols;
                acc(*x, &mut |dx| {
                    for (r, row) in dx.chunks_exact_mut(c).enumerate() {
                        let grow = &go[(r / seg) * c..(r / seg + 1) * c];
                        row.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::ConcatCols(x, y) => {
                let (ca, cb) = (val(*x).cols, val(*y).cols);
                let c = ca + cb;
                acc(*x, &mut |dx| {
                    for (r, row) in dx.chunks_exact_mut(ca).enumerate() {
                        row.iter_mut().zip(&go[r * c..r * c + ca]).for_each(|(d, v)| *d += v);
                    }
                });
                acc(*y, &mut |dy| {
                    for (r, row) in dy.chunks_exact_mut(cb).enumerate() {
                        row.iter_mut().zip(&go[r * c + ca..(r + 1) * c]).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let c = node.value.cols;
                acc(*x, &mut |dx| {
                    for row in go.chunks_exact(c) {
                        dx.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.cols;
                acc(*x, &mut |dx| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += go[k * c + j];
                        }
                    }
                });
            }
            Op::GatherSegmentSum(x, idx, seg) => {
                let c = node.value.cols;
                acc(*x, &mut |dx| {
                    for (k, &i) in idx.iter().enumerate() {
                        let g = k / seg;
                        for j in 0..c {
                            dx[i * c + j] += go[g * c + j];
                        }
                    }
                });
            }
            Op::GaussianKernels {
                points,
                centers,
                kernel,
            } => {
                let (p, cm) = (val(*points), val(*centers));
                let (np, nc) = (p.rows, cm.rows);
                // d/dq exp(-|q-c|^2/2) = -(q - c) k, d/dc = (q - c) k.
                acc(*points, &mut |dp| {
                    for i in 0..np {
                        for m in 0..nc {
                            let s = go[m] * kernel[i * nc + m];
                            dp[2 * i] -= s * (p.data[2 * i] - cm.data[2 * m]);
                            dp[2 * i + 1] -= s * (p.data[2 * i + 1] - cm.data[2 * m + 1]);
                        }
                    }
                });
                acc(*centers, &mut |dc| {
                    for i in 0..np {
                        for m in 0..nc {
                            let s = go[m] * kernel[i * nc + m];
                            dc[2 * m] += s * (p.data[2 * i] - cm.data[2 * m]);
                            dc[2 * m + 1] += s * (p.data[2 * i + 1] - cm.data[2 * m + 1]);
                        }
                    }
                });
            }
            Op::Routed(src, routes) => {
                acc(*src, &mut |ds| {
                    for (e, route) in routes.iter().enumerate() {
                        for &(i, coeff) in route {
                            ds[i] += coeff * go[e];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols;
                let scale = go[0] / labels.len() as f64;
                acc(*logits, &mut |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let y = if k == label { 1.0 } else { 0.0 };
                            dl[r * c + k] += scale * (probs[r * c + k] - y);
                        }
                    }
                });
            }
            Op::Mse(x, target) => {
                let a = val(*x);
                let scale = 2.0 * go[0] / target.len() as f64;
                acc(*x, &mut |dx| {
                    for ((d, p), t) in dx.iter_mut().zip(&a.data).zip(target) {
                        *d += scale * (p - t);
                    }
                });
            }
        }
    }
}

/// Adjoints from one backward sweep.
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Gradient with respect to a node; zeros if the node did not feed the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.value(v).data.len()])
    }

    /// Sums gradients of every parameter node into `grads`, scaled by `weight`.
    pub fn accumulate_params(&self, tape: &Tape, grads: &mut Grads, weight: f64) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (d, v) in grads.0[id.0].iter_mut().zip(g) {
                    *d += weight * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
