use super::{Matrix, ParamId, ParameterStore, Tape, Var};
use crate::rng::Stream;
use crate::{Error, Result};

/// Layer sizes and regularization for a multi-layer perceptron.
///
/// `sizes = [d_in, d_1, ..., d_out]` gives `sizes.len() - 1` affine layers
/// with ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    /// Batch normalization after every hidden affine layer, before the ReLU.
    pub batch_norm: bool,
    /// Dropout on the inputs of this many trailing affine layers.
    pub dropout_last: usize,
    pub dropout_p: f64,
}

impl MlpSpec {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            batch_norm: false,
            dropout_last: 0,
            dropout_p: 0.5,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_dropout(mut self, last: usize, p: f64) -> Self {
        self.dropout_last = last;
        self.dropout_p = p;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    bn: Option<[ParamId; 4]>,
    dropout: bool,
}

/// Forward-pass mode. Dropout and batch statistics are only active in training.
pub enum Mode<'a> {
    Train(&'a mut Stream),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Layer>,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform_fan_in(rng: &mut Stream, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count).map(|_| rng.uniform_range(-bound, bound)).collect()
}

impl Mlp {
    /// Registers the layer parameters under `prefix` with fan-in uniform init.
    pub fn new(store: &mut ParameterStore, prefix: &str, spec: MlpSpec, rng: &mut Stream) -> Result<Self> {
        if spec.sizes.len() < 2 || spec.sizes.contains(&0) {
            return Err(Error::Config(format!("bad MLP sizes {:?}", spec.sizes)));
        }
        if !(0.0..1.0).contains(&spec.dropout_p) {
            return Err(Error::Config("dropout probability must lie in [0, 1)".into()));
        }
        let n = spec.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fi, fo) = (spec.sizes[l], spec.sizes[l + 1]);
            let w = store.add(&format!("{prefix}.{l}.weight"), fi, fo, init_uniform_fan_in(rng, fi, fi * fo), true)?;
            let b = store.add(&format!("{prefix}.{l}.bias"), 1, fo, init_uniform_fan_in(rng, fi, fo), true)?;
            let bn = if spec.batch_norm && l + 1 < n {
                Some([
                    store.add(&format!("{prefix}.{l}.bn.gamma"), 1, fo, vec![1.0; fo], true)?,
                    store.add(&format!("{prefix}.{l}.bn.beta"), 1, fo, vec![0.0; fo], true)?,
                    store.add(&format!("{prefix}.{l}.bn.running_mean"), 1, fo, vec![0.0; fo], false)?,
                    store.add(&format!("{prefix}.{l}.bn.running_var"), 1, fo, vec![1.0; fo], false)?,
                ])
            } else {
                None
            };
            layers.push(Layer {
                w,
                b,
                bn,
                dropout: l > 0 && l + spec.dropout_last >= n,
            });
        }
        Ok(Self { spec, layers })
    }

    /// Re-initializes the last affine layer with `N(0, std^2)` entries.
    pub fn init_last_gaussian(&self, store: &mut ParameterStore, std: f64, rng: &mut Stream) {
        let last = self.layers.last().unwrap();
        for id in [last.w, last.b] {
            for v in &mut store.get_mut(id).data {
                *v = std * rng.normal();
            }
        }
    }

    /// Sets the last affine layer to zero, making the network output identically zero.
    pub fn zero_last(&self, store: &mut ParameterStore) {
        let last = self.layers.last().unwrap();
        for id in [last.w, last.b] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v = vec![l.w, l.b];
                if let Some(bn) = l.bn {
                    v.extend(bn);
                }
                v
            })
            .collect()
    }

    pub fn last_layer(&self) -> (ParamId, ParamId) {
        let l = self.layers.last().unwrap();
        (l.w, l.b)
    }

    /// Applies the network row-wise to `x` (`rows x d_in`).
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let cols = tape.value(x).cols;
        if cols != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: cols,
            });
        }
        let n = self.layers.len();
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.dropout && self.spec.dropout_p > 0.0 {
                if let Mode::Train(rng) = mode {
                    h = tape.dropout(h, self.spec.dropout_p, rng);
                }
            }
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < n {
                if let Some([g, be, rm, rv]) = layer.bn {
                    let gv = tape.param(store, g);
                    let bv = tape.param(store, be);
                    h = tape.batch_norm(h, gv, bv, (rm, rv), store, mode.is_train())?;
                }
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Convenience: evaluates a single input vector.
    pub fn forward_vec(&self, tape: &mut Tape, store: &ParameterStore, x: &[f64], mode: &mut Mode<'_>) -> Result<Var> {
        let v = tape.input(Matrix::row_vector(x.to_vec()));
        self.forward(tape, store, v, mode)
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_observations(store: &mut ParameterStore, obs: &[super::BnObservation], momentum: f64) {
    for o in obs {
        for (r, m) in store.get_mut(o.running_mean).data.iter_mut().zip(&o.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(o.running_var).data.iter_mut().zip(&o.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}
