//! Central finite-difference checks against tape gradients.

use super::{Grads, Matrix, ParamId, ParameterStore, Tape, Var};
use crate::Result;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares gradients with respect to leaf inputs of a scalar function.
pub fn check_inputs<F>(inputs: &[Matrix], f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|m| tape.input(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let adj = tape.backward(out);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = adj.wrt(&tape, *v);
        for i in 0..inputs[k].data.len() {
            let orig = work[k].data[i];
            work[k].data[i] = orig + step;
            let (t1, _, o1) = eval(&work)?;
            work[k].data[i] = orig - step;
            let (t2, _, o2) = eval(&work)?;
            work[k].data[i] = orig;
            let numeric = (t1.scalar(o1) - t2.scalar(o2)) / (2.0 * step);
            worst = worst.max(rel_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Analytic parameter gradients of a scalar function.
pub fn param_grads<F>(store: &ParameterStore, f: &F) -> Result<Grads>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let adj = tape.backward(out);
    let mut g = store.zero_grads();
    adj.accumulate_params(&tape, &mut g, 1.0);
    Ok(g)
}

/// Compares parameter gradients for the listed tensors (all when `None`).
/// At most `max_per_tensor` entries of each tensor are probed, spread evenly.
pub fn check_params<F>(
    store: &ParameterStore,
    ids: Option<&[ParamId]>,
    f: F,
    step: f64,
    max_per_tensor: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let grads = param_grads(store, &f)?;
    let all: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let ids = ids.unwrap_or(&all);
    let mut work = store.clone();
    let value = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let len = store.get(id).data.len();
        let stride = (len / max_per_tensor.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = work.get(id).data[i];
            work.get_mut(id).data[i] = orig + step;
            let up = value(&work)?;
            work.get_mut(id).data[i] = orig - step;
            let down = value(&work)?;
            work.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_error(grads.get(id)[i], numeric));
        }
    }
    Ok(worst)
}
