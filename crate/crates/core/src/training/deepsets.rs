//! DeepSets point-cloud classifier, the coordinate-based `Psi_DNN`.

use std::cmp::Ordering;

use crate::autodiff::{Matrix, Mlp, MlpSpec, Mode, ParamId, ParameterStore, Tape, Var};
use crate::geometry::PointCloud;
use crate::rng::Stream;
use crate::{Error, Result};

pub const DEEPSETS_PRESETS: &[&str] = &["full", "desk"];

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetsConfig {
    /// Hidden and output sizes of `phi1`; the input size is the cloud dimension.
    pub phi1_hidden: Vec<usize>,
    pub phi2: Vec<usize>,
    pub batch_norm: bool,
    /// Dropout on the last two layers of `phi2`.
    pub dropout_p: f64,
}

impl DeepSetsConfig {
    /// Full-size architecture.
    pub fn full() -> Self {
        Self {
            phi1_hidden: vec![64, 64, 64, 128, 1024],
            phi2: vec![1024, 512, 256, 16],
            batch_norm: true,
            dropout_p: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            phi1_hidden: vec![32, 64, 128],
            phi2: vec![128, 64, 16],
            batch_norm: true,
            dropout_p: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!(
                "unknown DeepSets preset {name:?}; expected one of {DEEPSETS_PRESETS:?}"
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.phi2.last().unwrap()
    }
}

/// `phi2( sum_i phi1(x_i) )` followed by a linear head.
#[derive(Clone, Debug)]
pub struct DeepSets {
    pub config: DeepSetsConfig,
    phi1: Mlp,
    phi2: Mlp,
    pub head: Mlp,
}

/// Point indices in lexicographic coordinate order, which fixes the pooling
/// order independently of how the cloud is listed.
fn canonical_points(pc: &PointCloud) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pc.len()).collect();
    idx.sort_by(|&a, &b| {
        for (x, y) in pc.point(a).iter().zip(pc.point(b)) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    });
    idx
}

impl DeepSets {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        config: DeepSetsConfig,
        input_dim: usize,
        n_classes: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if config.phi1_hidden.is_empty() || config.phi2.first() != config.phi1_hidden.last() {
            return Err(Error::Config("DeepSets phi2 input must equal phi1 output".into()));
        }
        let mut s1 = vec![input_dim];
        s1.extend(&config.phi1_hidden);
        let phi1 = Mlp::new(store, &format!("{prefix}.phi1"), MlpSpec::new(&s1).with_batch_norm(config.batch_norm), rng)?;
        let mut s2 = MlpSpec::new(&config.phi2).with_batch_norm(config.batch_norm);
        if config.dropout_p > 0.0 {
            s2 = s2.with_dropout(2, config.dropout_p);
        }
        let phi2 = Mlp::new(store, &format!("{prefix}.phi2"), s2, rng)?;
        let head = Mlp::new(store, &format!("{prefix}.head"), MlpSpec::new(&[config.feature_dim(), n_classes]), rng)?;
        Ok(Self {
            config,
            phi1,
            phi2,
            head,
        })
    }

    /// Parameters of `phi1` and `phi2`, without the head.
    pub fn feature_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.phi1.param_ids();
        ids.extend(self.phi2.param_ids());
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.feature_param_ids();
        ids.extend(self.head.param_ids());
        ids
    }

    /// Features of a batch of equally sized clouds as a `B x 16` node.
    /// Batch normalization sees every point (in `phi1`) or every cloud (in
    /// `phi2`) of the batch.
    pub fn features(&self, tape: &mut Tape, store: &ParameterStore, clouds: &[&PointCloud], mode: &mut Mode<'_>) -> Result<Var> {
        let first = clouds.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (n, dim) = (first.len(), first.dim());
        let mut data = Vec::with_capacity(clouds.len() * n * dim);
        for pc in clouds {
            if pc.len() != n || pc.dim() != dim {
                return Err(Error::InvalidInput("clouds in one batch must share size and dimension".into()));
            }
            for i in canonical_points(pc) {
                data.extend_from_slice(pc.point(i));
            }
        }
        let x = tape.input(Matrix::new(clouds.len() * n, dim, data));
        let e = self.phi1.forward(tape, store, x, mode)?;
        let pooled = tape.segment_sum(e, n)?;
        self.phi2.forward(tape, store, pooled, mode)
    }

    /// Logits (`B x n_classes`).
    pub fn logits(&self, tape: &mut Tape, store: &ParameterStore, clouds: &[&PointCloud], mode: &mut Mode<'_>) -> Result<Var> {
        let f = self.features(tape, store, clouds, mode)?;
        self.head.forward(tape, store, f, mode)
    }
}

/// Eval-mode logits of a single cloud.
pub fn deepsets_classify(model: &DeepSets, store: &ParameterStore, pc: &PointCloud, tape: &mut Tape) -> Result<Var> {
    model.logits(tape, store, &[pc], &mut Mode::Eval)
}
