//! Training loops, evaluation and reporting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, apply_bn_observations, lr_schedule, AdamConfig, AdamState, BnObservation, Checkpoint, Grads, Matrix,
    Mlp, MlpSpec, Mode, ParameterStore, Tape, Var,
};
use crate::filtration::dtm_weights;
use crate::geometry::PointCloud;
use crate::io::{parse_config, write_config};
use crate::perslay::t_cap_from_deaths;
use crate::rng::Stream;
use crate::weightnet::{DistMatrixNet, WeightNet};
use crate::{Error, Result};

use super::config::{ExperimentConfig, ExperimentMode};
use super::data::{kfold_split, Dataset};
use super::deepsets::DeepSets;
use super::topo::{fixed_diagram, FiltrationMode, FixedDiagram, TopoBranch, TopoClassifier};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub fold: usize,
    pub phase: String,
    pub epoch: usize,
    /// `train` (running mean over the epoch) or `test`.
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub mean_diagram_size: f64,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// One row of the final report: a method's score on every trained fold.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub filtration: String,
    pub metric: String,
    pub folds: Vec<f64>,
}

impl ReportRow {
    pub fn mean(&self) -> f64 {
        self.folds.iter().sum::<f64>() / self.folds.len() as f64
    }

    /// Population standard deviation over folds.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.folds.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.folds.len() as f64).sqrt()
    }
}

/// Report rows as CSV: `method,filtration,metric,mean,std,fold_0,...`.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.folds.len()).max().unwrap_or(0);
    let mut out = String::from("method,filtration,metric,mean,std");
    for k in 0..width {
        out.push_str(&format!(",fold_{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{:?},{:?}", r.method, r.filtration, r.metric, r.mean(), r.std()));
        for k in 0..width {
            match r.folds.get(k) {
                Some(v) => out.push_str(&format!(",{v:?}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub metrics: Vec<MetricRecord>,
    /// `(file stem, checkpoint)` per trained fold.
    pub checkpoints: Vec<(String, Checkpoint)>,
    /// For two-phase runs: whether every frozen tensor survived phase two
    /// bit for bit, per fold.
    pub frozen_unchanged: Vec<bool>,
}

/// Every model an experiment can train, sharing one parameter store.
#[derive(Clone, Debug)]
pub enum Models {
    Topo(TopoClassifier),
    TwoPhase {
        dnn: DeepSets,
        topo: TopoBranch,
        head: Mlp,
    },
    DistMatrix(DistMatrixNet),
    Regression(WeightNet),
}

impl Models {
    pub fn weightnet(&self) -> Option<&WeightNet> {
        match self {
            Models::Topo(m) => m.branch.weightnet.as_ref(),
            Models::TwoPhase { topo, .. } => topo.weightnet.as_ref(),
            Models::DistMatrix(m) => Some(&m.net),
            Models::Regression(n) => Some(n),
        }
    }

    pub fn topo_branch(&self) -> Option<&TopoBranch> {
        match self {
            Models::Topo(m) => Some(&m.branch),
            Models::TwoPhase { topo, .. } => Some(topo),
            _ => None,
        }
    }
}

pub const DNN_PREFIX: &str = "deepsets";

/// What model construction needs to know about the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub n_classes: usize,
    /// Coordinate dimension, when the samples have coordinates.
    pub input_dim: Option<usize>,
}

impl DataShape {
    pub fn of(data: &Dataset) -> Self {
        Self {
            n_classes: data.n_classes,
            input_dim: data.samples[0].cloud.as_ref().map(PointCloud::dim),
        }
    }

    /// Reads the shape recorded in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let n_classes = ckpt
            .meta
            .get("n_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint does not record n_classes".into()))?;
        let input_dim = match ckpt.meta.get("input_dim").map(String::as_str) {
            None | Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Checkpoint(format!("bad input_dim {v:?}")))?),
        };
        Ok(Self { n_classes, input_dim })
    }
}

/// Registers the models of `cfg` in a fresh store. Parameter values depend
/// only on the seed and fold; `t_cap` sets the PersLay center grid.
pub fn build_models(cfg: &ExperimentConfig, shape: DataShape, fold: usize, t_cap: f64) -> Result<(ParameterStore, Models)> {
    let mut store = ParameterStore::new();
    let mut rng = Stream::derive(cfg.seed, 1000 + fold as u64);
    let topo = |store: &mut ParameterStore, rng: &mut Stream| {
        TopoBranch::new(
            store,
            "topo",
            cfg.filtration.clone(),
            &cfg.weightnet,
            cfg.perslay.clone(),
            t_cap,
            cfg.t_max,
            cfg.degree,
            rng,
        )
    };
    let models = match cfg.mode {
        ExperimentMode::Classify => {
            let branch = topo(&mut store, &mut rng)?;
            Models::Topo(TopoClassifier::new(&mut store, "topo", branch, shape.n_classes, &mut rng)?)
        }
        ExperimentMode::TwoPhase => {
            let dim = shape
                .input_dim
                .ok_or_else(|| Error::Config("two-phase training needs point coordinates".into()))?;
            let dnn = DeepSets::new(&mut store, DNN_PREFIX, cfg.deepsets.clone(), dim, shape.n_classes, &mut rng)?;
            let branch = topo(&mut store, &mut rng)?;
            let width = cfg.deepsets.feature_dim() + branch.out_dim();
            let head = Mlp::new(&mut store, "joint.head", MlpSpec::new(&[width, shape.n_classes]), &mut rng)?;
            Models::TwoPhase { dnn, topo: branch, head }
        }
        ExperimentMode::DistMatrix => {
            Models::DistMatrix(DistMatrixNet::new(&mut store, "distmatrix", cfg.weightnet.clone(), shape.n_classes, &mut rng)?)
        }
        ExperimentMode::DtmRegression => Models::Regression(WeightNet::new(&mut store, "topo.weightnet", cfg.weightnet.clone(), &mut rng)?),
    };
    Ok((store, models))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Result of a forward pass over one item or batch.
struct Step {
    tape: Tape,
    loss: Var,
    /// Predicted classes, one per item.
    predictions: Vec<usize>,
    diagram_points: usize,
}

#[derive(Default)]
struct BatchOut {
    grads: Option<Grads>,
    loss_sum: f64,
    correct: usize,
    classified: usize,
    diagram_points: usize,
    items: usize,
    bn: Vec<BnObservation>,
}

type ItemStep<'a> = dyn Fn(&ParameterStore, usize, &mut Mode<'_>) -> Result<Step> + Sync + 'a;
type BatchStep<'a> = dyn Fn(&ParameterStore, &[usize], &mut Mode<'_>) -> Result<Step> + Sync + 'a;

/// How a phase computes losses.
enum Forward<'a> {
    /// One tape per item, losses averaged over the batch.
    PerItem(&'a ItemStep<'a>),
    /// One tape for the whole batch, whose loss is already a batch mean.
    Batched(&'a BatchStep<'a>),
}

struct EvalOut {
    loss: f64,
    accuracy: Option<f64>,
    mean_diagram_size: f64,
}

fn labels_of(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.samples[i].label).collect()
}

fn run_batch(store: &ParameterStore, fwd: &Forward<'_>, data: &Dataset, batch: &[usize], seed: u64, classify: bool) -> Result<BatchOut> {
    let mut out = BatchOut::default();
    let steps: Vec<(Step, f64)> = match fwd {
        Forward::PerItem(f) => batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = Stream::derive(seed, k as u64);
                f(store, i, &mut Mode::Train(&mut rng)).map(|s| (s, 1.0 / batch.len() as f64))
            })
            .collect::<Result<_>>()?,
        Forward::Batched(f) => {
            let mut rng = Stream::new(seed);
            vec![(f(store, batch, &mut Mode::Train(&mut rng))?, 1.0)]
        }
    };
    let labels = labels_of(data, batch);
    let mut grads = store.zero_grads();
    let mut preds = Vec::with_capacity(batch.len());
    for (s, weight) in &steps {
        let loss = s.tape.scalar(s.loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} on a batch starting with sample {}", batch[0])));
        }
        out.loss_sum += loss * if *weight == 1.0 { batch.len() as f64 } else { 1.0 };
        let adj = s.tape.backward(s.loss);
        adj.accumulate_params(&s.tape, &mut grads, *weight);
        out.bn.extend_from_slice(s.tape.bn_observations());
        out.diagram_points += s.diagram_points;
        preds.extend_from_slice(&s.predictions);
    }
    if classify {
        out.correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        out.classified = labels.len();
    }
    out.items = batch.len();
    out.grads = Some(grads);
    Ok(out)
}

fn evaluate(store: &ParameterStore, fwd: &Forward<'_>, data: &Dataset, idx: &[usize], classify: bool) -> Result<EvalOut> {
    let steps: Vec<Step> = match fwd {
        Forward::PerItem(f) => idx.par_iter().map(|&i| f(store, i, &mut Mode::Eval)).collect::<Result<_>>()?,
        Forward::Batched(f) => idx
            .chunks(64)
            .map(|c| f(store, c, &mut Mode::Eval))
            .collect::<Result<_>>()?,
    };
    let (mut loss, mut preds, mut diag) = (0.0, Vec::new(), 0);
    for (s, chunk) in steps.iter().zip(chunk_sizes(fwd, idx.len())) {
        loss += s.tape.scalar(s.loss) * chunk as f64;
        preds.extend_from_slice(&s.predictions);
        diag += s.diagram_points;
    }
    let labels = labels_of(data, idx);
    let n = idx.len() as f64;
    Ok(EvalOut {
        loss: loss / n,
        accuracy: classify.then(|| preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n),
        mean_diagram_size: diag as f64 / n,
    })
}

fn chunk_sizes(fwd: &Forward<'_>, n: usize) -> Vec<usize> {
    match fwd {
        Forward::PerItem(_) => vec![1; n],
        Forward::Batched(_) => (0..n).step_by(64).map(|s| (n - s).min(64)).collect(),
    }
}

struct Phase<'a> {
    name: &'a str,
    fold: usize,
    epochs: usize,
    eta_max: f64,
    classify: bool,
}

fn train_phase(
    cfg: &ExperimentConfig,
    phase: &Phase<'_>,
    store: &mut ParameterStore,
    fwd: &Forward<'_>,
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    metrics: &mut Vec<MetricRecord>,
) -> Result<(AdamState, EvalOut)> {
    let mut state = AdamState::new(store);
    let phase_seed = Stream::derive(cfg.seed, 7000 + phase.fold as u64).next_u64() ^ phase.name.len() as u64;
    let mut order = train.to_vec();
    let mut lr = 0.0;
    for epoch in 1..=phase.epochs {
        lr = lr_schedule(epoch, phase.eta_max, cfg.n_warmup)?;
        Stream::derive(phase_seed, epoch as u64).shuffle(&mut order);
        let mut tot = BatchOut::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seed = Stream::derive(phase_seed, ((epoch as u64) << 32) | b as u64).next_u64();
            let out = run_batch(store, fwd, data, batch, seed, phase.classify)?;
            log::debug!(
                "{} fold {} epoch {epoch} batch {b}: loss {:.6}, diagram points {}",
                phase.name,
                phase.fold,
                out.loss_sum / out.items as f64,
                out.diagram_points
            );
            match adam_step(store, out.grads.as_ref().unwrap(), &mut state, lr, AdamConfig::default()) {
                Ok(()) => apply_bn_observations(store, &out.bn, cfg.bn_momentum),
                Err(Error::NonFinite(what)) => log::warn!("skipped step with non-finite {what}"),
                Err(e) => return Err(e),
            }
            tot.loss_sum += out.loss_sum;
            tot.correct += out.correct;
            tot.classified += out.classified;
            tot.diagram_points += out.diagram_points;
            tot.items += out.items;
        }
        let n = tot.items as f64;
        metrics.push(MetricRecord {
            fold: phase.fold,
            phase: phase.name.to_string(),
            epoch,
            split: "train".into(),
            loss: tot.loss_sum / n,
            accuracy: phase.classify.then(|| tot.correct as f64 / tot.classified as f64),
            lr,
            mean_diagram_size: tot.diagram_points as f64 / n,
        });
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && epoch < phase.epochs {
            let e = evaluate(store, fwd, data, test, phase.classify)?;
            metrics.push(test_record(phase, epoch, lr, &e));
        }
    }
    let e = evaluate(store, fwd, data, test, phase.classify)?;
    metrics.push(test_record(phase, phase.epochs, lr, &e));
    Ok((state, e))
}

fn test_record(phase: &Phase<'_>, epoch: usize, lr: f64, e: &EvalOut) -> MetricRecord {
    MetricRecord {
        fold: phase.fold,
        phase: phase.name.to_string(),
        epoch,
        split: "test".into(),
        loss: e.loss,
        accuracy: e.accuracy,
        lr,
        mean_diagram_size: e.mean_diagram_size,
    }
}

/// Rips diagrams of every sample, used for the PersLay center grid and, in
/// Rips mode, as the fixed diagrams.
fn rips_diagrams(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<FixedDiagram>> {
    data.samples
        .par_iter()
        .map(|s| {
            let w = crate::filtration::WeightVector::zeros(s.distances.len());
            fixed_diagram(&s.distances, &w, cfg.t_max, cfg.degree)
        })
        .collect()
}

fn fixed_diagrams(cfg: &ExperimentConfig, data: &Dataset, rips: &[FixedDiagram]) -> Result<Option<Vec<FixedDiagram>>> {
    match &cfg.filtration {
        FiltrationMode::Learned => Ok(None),
        FiltrationMode::Rips => Ok(Some(rips.to_vec())),
        mode => data
            .samples
            .par_iter()
            .map(|s| {
                let w = mode.fixed_weights(&s.distances)?.expect("fixed filtration");
                fixed_diagram(&s.distances, &w, cfg.t_max, cfg.degree)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Death values of the Rips diagrams of `idx`.
fn t_cap(rips: &[FixedDiagram], idx: &[usize]) -> f64 {
    let deaths: Vec<f64> = idx
        .iter()
        .flat_map(|&i| {
            let m = &rips[i].points;
            (0..m.rows).map(move |r| m.at(r, 1))
        })
        .collect();
    t_cap_from_deaths(&deaths)
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    fixed: Option<Vec<FixedDiagram>>,
    /// Frozen DeepSets features, one `1 x 16` row per sample.
    dnn_features: Vec<Matrix>,
}

fn topo_step(ctx: &Context<'_>, m: &TopoClassifier, store: &ParameterStore, i: usize, mode: &mut Mode<'_>) -> Result<Step> {
    let s = &ctx.data.samples[i];
    let mut tape = Tape::new();
    let cached = ctx.fixed.as_ref().map(|f| &f[i]);
    let (logits, diag) = m.logits(&mut tape, store, &s.distances, cached, mode)?;
    let pred = argmax(tape.value(logits).row(0));
    let loss = tape.cross_entropy(logits, &[s.label])?;
    Ok(Step {
        tape,
        loss,
        predictions: vec![pred],
        diagram_points: diag,
    })
}

fn joint_step(
    ctx: &Context<'_>,
    topo: &TopoBranch,
    head: &Mlp,
    store: &ParameterStore,
    i: usize,
    mode: &mut Mode<'_>,
) -> Result<Step> {
    let s = &ctx.data.samples[i];
    let mut tape = Tape::new();
    let dnn = tape.input(ctx.dnn_features[i].clone());
    let (feature, diag) = if ctx.cfg.topo_enabled {
        let cached = ctx.fixed.as_ref().map(|f| &f[i]);
        let out = topo.forward(&mut tape, store, &s.distances, cached, mode)?;
        (out.feature, out.diagram_size)
    } else {
        (tape.input(Matrix::zeros(1, topo.out_dim())), 0)
    };
    let z = tape.concat_cols(dnn, feature)?;
    let logits = head.forward(&mut tape, store, z, mode)?;
    let pred = argmax(tape.value(logits).row(0));
    let loss = tape.cross_entropy(logits, &[s.label])?;
    Ok(Step {
        tape,
        loss,
        predictions: vec![pred],
        diagram_points: diag,
    })
}

fn clouds_of<'a>(data: &'a Dataset, idx: &[usize]) -> Result<Vec<&'a PointCloud>> {
    idx.iter()
        .map(|&i| {
            data.samples[i]
                .cloud
                .as_ref()
                .ok_or_else(|| Error::Config("DeepSets needs point coordinates".into()))
        })
        .collect()
}

fn dnn_step(data: &Dataset, dnn: &DeepSets, store: &ParameterStore, idx: &[usize], mode: &mut Mode<'_>) -> Result<Step> {
    let clouds = clouds_of(data, idx)?;
    let mut tape = Tape::new();
    let logits = dnn.logits(&mut tape, store, &clouds, mode)?;
    let v = tape.value(logits);
    let predictions = (0..v.rows).map(|r| argmax(v.row(r))).collect();
    let loss = tape.cross_entropy(logits, &labels_of(data, idx))?;
    Ok(Step {
        tape,
        loss,
        predictions,
        diagram_points: 0,
    })
}

fn distmatrix_step(data: &Dataset, m: &DistMatrixNet, store: &ParameterStore, i: usize, mode: &mut Mode<'_>) -> Result<Step> {
    let s = &data.samples[i];
    let mut tape = Tape::new();
    let logits = m.classify(&mut tape, store, &s.distances, mode)?;
    let pred = argmax(tape.value(logits).row(0));
    let loss = tape.cross_entropy(logits, &[s.label])?;
    Ok(Step {
        tape,
        loss,
        predictions: vec![pred],
        diagram_points: 0,
    })
}

fn regression_step(targets: &[Vec<f64>], data: &Dataset, net: &WeightNet, store: &ParameterStore, i: usize, mode: &mut Mode<'_>) -> Result<Step> {
    let mut tape = Tape::new();
    let w = net.weights_for_cloud(&mut tape, store, &data.samples[i].distances, mode)?;
    let loss = tape.mse(w, &targets[i])?;
    Ok(Step {
        tape,
        loss,
        predictions: Vec::new(),
        diagram_points: 0,
    })
}

/// Frozen DeepSets features of every sample, in eval mode.
fn dnn_features(data: &Dataset, dnn: &DeepSets, store: &ParameterStore) -> Result<Vec<Matrix>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in all.chunks(64) {
        let clouds = clouds_of(data, chunk)?;
        let mut tape = Tape::new();
        let f = dnn.features(&mut tape, store, &clouds, &mut Mode::Eval)?;
        let v = tape.value(f);
        for r in 0..v.rows {
            out.push(Matrix::row_vector(v.row(r).to_vec()));
        }
    }
    Ok(out)
}

fn frozen_snapshot(store: &ParameterStore) -> Vec<(String, Vec<u64>)> {
    store
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with(DNN_PREFIX))
        .map(|t| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn dtm_targets(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples
        .par_iter()
        .map(|s| dtm_weights(&s.distances, cfg.k0, cfg.q).map(|w| w.0))
        .collect()
}

fn checkpoint(cfg: &ExperimentConfig, shape: DataShape, store: &ParameterStore, state: AdamState, fold: usize, t_cap: f64) -> Checkpoint {
    let mut c = Checkpoint::new(store.clone(), Some(state));
    c.meta.insert("config".into(), write_config(&cfg.to_map()));
    c.meta.insert("n_classes".into(), shape.n_classes.to_string());
    c.meta.insert("input_dim".into(), shape.input_dim.map_or("none".into(), |d| d.to_string()));
    c.meta.insert("fold".into(), fold.to_string());
    c.meta.insert("mode".into(), cfg.mode.name().into());
    c.meta.insert("filtration".into(), cfg.filtration.name().into());
    c.meta.insert("t_cap".into(), format!("{t_cap:?}"));
    c
}

/// Trains every requested fold and collects metrics, scores and checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    cfg.validate()?;
    let splits = kfold_split(data.len(), cfg.folds, cfg.seed)?;
    let needs_rips = matches!(cfg.mode, ExperimentMode::Classify | ExperimentMode::TwoPhase);
    let rips = if needs_rips { rips_diagrams(cfg, data)? } else { Vec::new() };
    let fixed = if needs_rips { fixed_diagrams(cfg, data, &rips)? } else { None };
    let targets = if cfg.mode == ExperimentMode::DtmRegression { dtm_targets(cfg, data)? } else { Vec::new() };
    let mut ctx = Context {
        cfg,
        data,
        fixed,
        dnn_features: Vec::new(),
    };
    let mut report = ExperimentReport {
        rows: Vec::new(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        frozen_unchanged: Vec::new(),
    };
    let fname = cfg.filtration.name();
    let mut scores: Vec<(String, String, String, Vec<f64>)> = Vec::new();
    let mut push = |method: &str, filt: &str, metric: &str, v: f64| {
        match scores.iter_mut().find(|s| s.0 == method && s.1 == filt) {
            Some(s) => s.3.push(v),
            None => scores.push((method.into(), filt.into(), metric.into(), vec![v])),
        }
    };
    for (fold, (train, test)) in splits.iter().enumerate().take(cfg.run_folds) {
        let cap = if needs_rips { t_cap(&rips, train) } else { 1.0 };
        let (mut store, models) = build_models(cfg, DataShape::of(data), fold, cap)?;
        let phase = |name, epochs, eta_max, classify| Phase {
            name,
            fold,
            epochs,
            eta_max,
            classify,
        };
        let state = match &models {
            Models::Topo(m) => {
                let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| topo_step(&ctx, m, s, i, mode);
                let p = phase("topo", cfg.epochs2, cfg.eta_max2, true);
                let (state, e) = train_phase(cfg, &p, &mut store, &Forward::PerItem(&f), data, train, test, &mut report.metrics)?;
                push("topo", fname, "accuracy", e.accuracy.unwrap());
                state
            }
            Models::TwoPhase { dnn, topo, head } => {
                let f1 = |s: &ParameterStore, idx: &[usize], mode: &mut Mode<'_>| dnn_step(data, dnn, s, idx, mode);
                let p1 = phase("phase1", cfg.epochs1, cfg.eta_max1, true);
                let (_, e1) = train_phase(cfg, &p1, &mut store, &Forward::Batched(&f1), data, train, test, &mut report.metrics)?;
                push("deepsets", "none", "accuracy", e1.accuracy.unwrap());
                store.set_trainable_prefix(&format!("{DNN_PREFIX}."), false);
                let before = frozen_snapshot(&store);
                ctx.dnn_features = dnn_features(data, dnn, &store)?;
                let f2 = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| joint_step(&ctx, topo, head, s, i, mode);
                let p2 = phase("phase2", cfg.epochs2, cfg.eta_max2, true);
                let (state, e2) = train_phase(cfg, &p2, &mut store, &Forward::PerItem(&f2), data, train, test, &mut report.metrics)?;
                let topo_name = if cfg.topo_enabled { fname } else { "disabled" };
                push("deepsets+topo", topo_name, "accuracy", e2.accuracy.unwrap());
                report.frozen_unchanged.push(frozen_snapshot(&store) == before);
                state
            }
            Models::DistMatrix(m) => {
                let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| distmatrix_step(data, m, s, i, mode);
                let p = phase("distmatrix", cfg.epochs2, cfg.eta_max2, true);
                let (state, e) = train_phase(cfg, &p, &mut store, &Forward::PerItem(&f), data, train, test, &mut report.metrics)?;
                push("distmatrixnet", "none", "accuracy", e.accuracy.unwrap());
                state
            }
            Models::Regression(net) => {
                let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| regression_step(&targets, data, net, s, i, mode);
                let p = phase("regression", cfg.epochs2, cfg.eta_max2, false);
                let (state, e) = train_phase(cfg, &p, &mut store, &Forward::PerItem(&f), data, train, test, &mut report.metrics)?;
                push("weightnet", &format!("dtm-k0-{}", cfg.k0), "mse", e.loss);
                push("train-mean", &format!("dtm-k0-{}", cfg.k0), "mse", mean_predictor_mse(&targets, train, test));
                state
            }
        };
        report.checkpoints.push((format!("fold{fold}"), checkpoint(cfg, DataShape::of(data), &store, state, fold, cap)));
    }
    report.rows = scores
        .into_iter()
        .map(|(method, filtration, metric, folds)| ReportRow {
            method,
            filtration,
            metric,
            folds,
        })
        .collect();
    Ok(report)
}

/// Held-out MSE of predicting the mean training target everywhere.
fn mean_predictor_mse(targets: &[Vec<f64>], train: &[usize], test: &[usize]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for &i in train {
        s += targets[i].iter().sum::<f64>();
        n += targets[i].len();
    }
    let mean = s / n as f64;
    let per_cloud: Vec<f64> = test
        .iter()
        .map(|&i| targets[i].iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets[i].len() as f64)
        .collect();
    per_cloud.iter().sum::<f64>() / per_cloud.len() as f64
}

/// Re-evaluates a checkpoint on the held-out split of its fold.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<Vec<MetricRecord>> {
    let fold: usize = ckpt
        .meta
        .get("fold")
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::Checkpoint("checkpoint has no fold".into()))?;
    if fold >= cfg.folds {
        return Err(Error::Checkpoint(format!("fold {fold} outside {} folds", cfg.folds)));
    }
    if ckpt.meta.get("mode").map(String::as_str) != Some(cfg.mode.name()) {
        return Err(Error::Checkpoint("checkpoint was trained in a different mode".into()));
    }
    let (_, test) = kfold_split(data.len(), cfg.folds, cfg.seed)?.swap_remove(fold);
    let (mut store, models) = build_models(cfg, DataShape::of(data), fold, 1.0)?;
    store.load_from(&ckpt.params)?;
    let needs_fixed = models.topo_branch().is_some_and(|b| b.mode != FiltrationMode::Learned);
    let fixed = if needs_fixed {
        let rips = if cfg.filtration == FiltrationMode::Rips { rips_diagrams(cfg, data)? } else { Vec::new() };
        fixed_diagrams(cfg, data, &rips)?
    } else {
        None
    };
    let mut ctx = Context {
        cfg,
        data,
        fixed,
        dnn_features: Vec::new(),
    };
    let record = |phase: &str, e: EvalOut| MetricRecord {
        fold,
        phase: phase.into(),
        epoch: 0,
        split: "test".into(),
        loss: e.loss,
        accuracy: e.accuracy,
        lr: 0.0,
        mean_diagram_size: e.mean_diagram_size,
    };
    let out = match &models {
        Models::Topo(m) => {
            let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| topo_step(&ctx, m, s, i, mode);
            vec![record("topo", evaluate(&store, &Forward::PerItem(&f), data, &test, true)?)]
        }
        Models::TwoPhase { dnn, topo, head } => {
            let f1 = |s: &ParameterStore, idx: &[usize], mode: &mut Mode<'_>| dnn_step(data, dnn, s, idx, mode);
            let e1 = evaluate(&store, &Forward::Batched(&f1), data, &test, true)?;
            ctx.dnn_features = dnn_features(data, dnn, &store)?;
            let f2 = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| joint_step(&ctx, topo, head, s, i, mode);
            let e2 = evaluate(&store, &Forward::PerItem(&f2), data, &test, true)?;
            vec![record("phase1", e1), record("phase2", e2)]
        }
        Models::DistMatrix(m) => {
            let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| distmatrix_step(data, m, s, i, mode);
            vec![record("distmatrix", evaluate(&store, &Forward::PerItem(&f), data, &test, true)?)]
        }
        Models::Regression(net) => {
            let targets = dtm_targets(cfg, data)?;
            let f = |s: &ParameterStore, i: usize, mode: &mut Mode<'_>| regression_step(&targets, data, net, s, i, mode);
            vec![record("regression", evaluate(&store, &Forward::PerItem(&f), data, &test, false)?)]
        }
    };
    Ok(out)
}

/// The config a checkpoint was trained with.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let text = ckpt
        .meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint("checkpoint does not record its config".into()))?;
    ExperimentConfig::from_map(&parse_config(text)?)
}

/// Rebuilds the models a checkpoint was trained with and loads its values.
pub fn load_models(ckpt: &Checkpoint) -> Result<(ExperimentConfig, ParameterStore, Models)> {
    let cfg = checkpoint_config(ckpt)?;
    let fold = ckpt.meta.get("fold").and_then(|f| f.parse().ok()).unwrap_or(0);
    let (mut store, models) = build_models(&cfg, DataShape::from_checkpoint(ckpt)?, fold, 1.0)?;
    store
        .load_from(&ckpt.params)
        .map_err(|e| Error::Checkpoint(format!("checkpoint does not fit its config: {e}")))?;
    Ok((cfg, store, models))
}
