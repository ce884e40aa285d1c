use super::gradcheck::{check_inputs, check_params};
use super::*;
use crate::rng::Stream;

fn rand_matrix(rng: &mut Stream, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

/// Fixed random linear functional so every primitive reduces to a scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let m = tape.value(v).clone();
    let mut rng = Stream::new(seed);
    let w = Matrix::new(m.cols, 1, (0..m.cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
    let wv = tape.input(w);
    let p = tape.matmul(v, wv)?;
    tape.sum_rows(p)
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn primitives_pass_finite_differences() {
    let mut rng = Stream::new(100);
    for trial in 0..50u64 {
        let r = 1 + rng.below(4);
        let k = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let x = rand_matrix(&mut rng, r, k);
        let w = rand_matrix(&mut rng, k, c);
        let b = rand_matrix(&mut rng, 1, c);
        let err = check_inputs(
            &[x.clone(), w.clone(), b.clone()],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.add_row(y, v[2])?;
                project(t, y, trial)
            },
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "affine {err}");

        // ReLU away from the kink.
        let mut xr = rand_matrix(&mut rng, r, k);
        xr.data.iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        let err = check_inputs(&[xr], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "relu {err}");

        let rr = 2 + rng.below(4);
        let xb = rand_matrix(&mut rng, rr, k);
        let gamma = rand_matrix(&mut rng, 1, k);
        let beta = rand_matrix(&mut rng, 1, k);
        let mut store = ParameterStore::new();
        let rm = store.add("rm", 1, k, vec![0.1; k], false).unwrap();
        let rv = store.add("rv", 1, k, vec![0.7; k], false).unwrap();
        for train in [true, false] {
            let err = check_inputs(&[xb.clone(), gamma.clone(), beta.clone()], |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], (rm, rv), &store, train)?;
                project(t, y, trial)
            }, STEP)
            .unwrap();
            assert!(err < TOL, "batch norm train={train} {err}");
        }

        let seg = 1 + rng.below(3);
        let nseg = 1 + rng.below(3);
        let xs = rand_matrix(&mut rng, seg * nseg, c);
        let err = check_inputs(&[xs], |t, v| {
            let y = t.segment_sum(v[0], seg)?;
            project(t, y, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "segment sum {err}");

        let idx: Vec<usize> = (0..seg * nseg).map(|_| rng.below(seg * nseg)).collect();
        let xs = rand_matrix(&mut rng, seg * nseg, c);
        let fused = {
            let mut t = Tape::new();
            let v = t.input(xs.clone());
            let y = t.gather_segment_sum(v, idx.clone(), seg).unwrap();
            t.value(y).clone()
        };
        let two_step = {
            let mut t = Tape::new();
            let v = t.input(xs.clone());
            let g = t.gather_rows(v, idx.clone()).unwrap();
            let y = t.segment_sum(g, seg).unwrap();
            t.value(y).clone()
        };
        assert_eq!(fused, two_step);
        let err = check_inputs(&[xs], |t, v| {
            let y = t.gather_segment_sum(v[0], idx.clone(), seg)?;
            project(t, y, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "gather segment sum {err}");

        let a = rand_matrix(&mut rng, r, k);
        let bm = rand_matrix(&mut rng, r, c);
        let row = rand_matrix(&mut rng, 1, c);
        let err = check_inputs(&[a, bm, row], |t, v| {
            let y = t.concat_cols(v[0], v[1])?;
            let br = t.broadcast_rows(v[2], r)?;
            let z = t.concat_cols(y, br)?;
            let z = t.gather_rows(z, vec![r - 1, 0])?;
            let z = t.scale(z, 1.5);
            let z2 = t.add(z, z)?;
            project(t, z2, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "concat/broadcast/gather {err}");

        let (np, nc) = (1 + rng.below(4), 1 + rng.below(4));
        let pts = rand_matrix(&mut rng, np, 2);
        let centers = rand_matrix(&mut rng, nc, 2);
        let err = check_inputs(&[pts, centers], |t, v| {
            let y = t.gaussian_kernels(v[0], v[1])?;
            project(t, y, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "gaussian kernels {err}");

        let logits = rand_matrix(&mut rng, r, c + 1);
        let labels: Vec<usize> = (0..r).map(|_| rng.below(c + 1)).collect();
        let err = check_inputs(&[logits], |t, v| t.cross_entropy(v[0], &labels), STEP).unwrap();
        assert!(err < 1e-6, "cross entropy {err}");

        let target: Vec<f64> = (0..r * c).map(|_| rng.uniform()).collect();
        let xm = rand_matrix(&mut rng, r, c);
        let err = check_inputs(&[xm], |t, v| t.mse(v[0], &target), STEP).unwrap();
        assert!(err < TOL, "mse {err}");

        let src = rand_matrix(&mut rng, 4, 1);
        let routes = vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)], vec![]];
        let err = check_inputs(&[src], |t, v| {
            let s = t.value(v[0]).data.clone();
            let vals = Matrix::row_vector(vec![s[0], 0.5 * (s[1] + s[2]), 7.0]);
            let y = t.routed(v[0], vals, routes.clone())?;
            project(t, y, trial)
        }, STEP)
        .unwrap();
        assert!(err < TOL, "routed {err}");
    }
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut rng = Stream::new(3);
    let x = rand_matrix(&mut rng, 3, 4);
    let err = check_inputs(&[x], |t, v| {
        let mut r = Stream::new(99);
        let y = t.dropout(v[0], 0.5, &mut r);
        project(t, y, 1)
    }, STEP)
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn identity_layer_and_zero_weights() {
    let mut store = ParameterStore::new();
    let mut rng = Stream::new(1);
    let mlp = Mlp::new(&mut store, "m", MlpSpec::new(&[2, 2]), &mut rng).unwrap();
    let (w, b) = mlp.last_layer();
    store.get_mut(w).data = vec![1.0, 0.0, 0.0, 1.0];
    store.get_mut(b).data = vec![0.0, 0.0];
    let mut tape = Tape::new();
    let y = mlp.forward_vec(&mut tape, &store, &[1.0, 2.0], &mut Mode::Eval).unwrap();
    assert_eq!(tape.value(y).data, vec![1.0, 2.0]);

    store.get_mut(w).data = vec![0.0; 4];
    store.get_mut(b).data = vec![0.25, -3.0];
    let y = mlp.forward_vec(&mut tape, &store, &[5.0, -8.0], &mut Mode::Eval).unwrap();
    assert_eq!(tape.value(y).data, vec![0.25, -3.0]);

    let mut tape = Tape::new();
    assert!(mlp.forward_vec(&mut tape, &store, &[1.0], &mut Mode::Eval).is_err());
}

#[test]
fn mlp_parameter_gradients() {
    for seed in 0..10 {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(seed);
        let spec = MlpSpec::new(&[3, 5, 4, 2]).with_batch_norm(seed % 2 == 0);
        let mlp = Mlp::new(&mut store, "m", spec, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 3);
        let f = |t: &mut Tape, s: &ParameterStore| {
            let xv = t.input(x.clone());
            let mut dummy = Stream::new(0);
            let mut mode = if seed % 2 == 0 { Mode::Train(&mut dummy) } else { Mode::Eval };
            let y = mlp.forward(t, s, xv, &mut mode)?;
            t.sum_rows(y).and_then(|r| project(t, r, 5))
        };
        let err = check_params(&store, None, f, 1e-5, 1000).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::new();
    let l = t.input(Matrix::row_vector(vec![0.0, 0.0]));
    let ce = t.cross_entropy(l, &[0]).unwrap();
    assert!((t.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);
    let l = t.input(Matrix::row_vector(vec![1000.0, 0.0]));
    let ce = t.cross_entropy(l, &[0]).unwrap();
    assert!(t.scalar(ce).is_finite() && t.scalar(ce) < 1e-300);
    let l = t.input(Matrix::row_vector(vec![1000.0, 0.0]));
    let ce = t.cross_entropy(l, &[1]).unwrap();
    assert_eq!(t.scalar(ce), 1000.0);
}

#[test]
fn sum_pool_cases() {
    let mut t = Tape::new();
    let v = t.input(Matrix::new(1, 3, vec![1.0, -2.0, 3.5]));
    let s = t.sum_rows(v).unwrap();
    assert_eq!(t.value(s).data, vec![1.0, -2.0, 3.5]);
    let vv = t.input(Matrix::new(2, 3, vec![1.0, -2.0, 3.5, -1.0, 2.0, -3.5]));
    let s = t.sum_rows(vv).unwrap();
    assert_eq!(t.value(s).data, vec![0.0, 0.0, 0.0]);
    let adj = t.backward(s);
    assert_eq!(adj.wrt(&t, vv), vec![1.0; 6]);
    assert!(t.segment_sum(vv, 0).is_err());
}

#[test]
fn adam_zero_gradient_is_noop_and_first_step_is_lr() {
    let mut store = ParameterStore::new();
    let id = store.add("p", 1, 3, vec![1.0, -2.0, 0.5], true).unwrap();
    let mut state = AdamState::new(&store);
    let before = store.clone();
    let zero = store.zero_grads();
    adam_step(&mut store, &zero, &mut state, 0.1, AdamConfig::default()).unwrap();
    assert_eq!(store.get(id).data, before.get(id).data);

    let mut state = AdamState::new(&store);
    let mut g = store.zero_grads();
    g.0[0] = vec![0.3, -5.0, 2.0];
    adam_step(&mut store, &g, &mut state, 0.01, AdamConfig::default()).unwrap();
    let delta: Vec<f64> = store.get(id).data.iter().zip(&before.get(id).data).map(|(a, b)| a - b).collect();
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for (d, gv) in delta.iter().zip(&g.0[0]) {
        let expected = -0.01 * gv / (gv.abs() + 1e-8);
        assert!((d - expected).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_non_finite_and_skips_frozen() {
    let mut store = ParameterStore::new();
    store.add("a", 1, 1, vec![1.0], true).unwrap();
    store.add("b", 1, 1, vec![1.0], false).unwrap();
    let mut state = AdamState::new(&store);
    let mut g = store.zero_grads();
    g.0[0][0] = f64::NAN;
    let before = store.clone();
    assert!(adam_step(&mut store, &g, &mut state, 0.1, AdamConfig::default()).is_err());
    assert_eq!(store, before);
    assert_eq!(state.step, 0);
    g.0[0][0] = 1.0;
    g.0[1][0] = 1.0;
    adam_step(&mut store, &g, &mut state, 0.1, AdamConfig::default()).unwrap();
    assert!(store.tensors()[0].data[0] < 1.0);
    assert_eq!(store.tensors()[1].data[0], 1.0);
}

#[test]
fn adam_deterministic() {
    let run = || {
        let mut store = ParameterStore::new();
        let mut rng = Stream::new(5);
        let mlp = Mlp::new(&mut store, "m", MlpSpec::new(&[2, 3, 1]), &mut rng).unwrap();
        let mut state = AdamState::new(&store);
        for step in 0..5 {
            let mut tape = Tape::new();
            let y = mlp.forward_vec(&mut tape, &store, &[step as f64, 1.0], &mut Mode::Eval).unwrap();
            let l = tape.mse(y, &[0.3]).unwrap();
            let mut g = store.zero_grads();
            tape.backward(l).accumulate_params(&tape, &mut g, 1.0);
            adam_step(&mut store, &g, &mut state, 0.01, AdamConfig::default()).unwrap();
        }
        (store, state)
    };
    assert_eq!(run(), run());
}

#[test]
fn schedule_values() {
    let eta = 0.01;
    assert!((lr_schedule(40, eta, 40).unwrap() - eta * 40f64.powf(-0.5)).abs() < 1e-15);
    assert!((lr_schedule(1, eta, 40).unwrap() - eta / 40f64.powf(1.5)).abs() < 1e-15);
    assert!(lr_schedule(0, eta, 40).is_err());
    let lrs: Vec<f64> = (1..200).map(|e| lr_schedule(e, eta, 40).unwrap()).collect();
    for e in 1..39 {
        assert!(lrs[e] >= lrs[e - 1]);
    }
    for e in 40..198 {
        assert!(lrs[e + 1] <= lrs[e]);
    }
}

#[test]
fn eval_mode_ignores_dropout_and_replay_is_bitwise() {
    let mut store = ParameterStore::new();
    let mut rng = Stream::new(8);
    let spec = MlpSpec::new(&[2, 6, 6, 3]).with_dropout(2, 0.5).with_batch_norm(true);
    let mlp = Mlp::new(&mut store, "m", spec, &mut rng).unwrap();
    let x = rand_matrix(&mut rng, 5, 2);
    let eval = || {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = mlp.forward(&mut t, &store, xv, &mut Mode::Eval).unwrap();
        t.value(y).clone()
    };
    assert_eq!(eval(), eval());

    let train = |seed| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let mut r = Stream::new(seed);
        let y = mlp.forward(&mut t, &store, xv, &mut Mode::Train(&mut r)).unwrap();
        let l = t.sum_rows(y).unwrap();
        let l = project(&mut t, l, 2).unwrap();
        let mut g = store.zero_grads();
        t.backward(l).accumulate_params(&t, &mut g, 1.0);
        (t.value(y).clone(), g)
    };
    assert_eq!(train(1), train(1));
    assert_ne!(train(1).0, train(2).0);
}

#[test]
fn running_stats_update() {
    let mut store = ParameterStore::new();
    let mut rng = Stream::new(2);
    let mlp = Mlp::new(&mut store, "m", MlpSpec::new(&[1, 2, 1]).with_batch_norm(true), &mut rng).unwrap();
    let mut t = Tape::new();
    let x = t.input(Matrix::column(vec![1.0, 2.0, 3.0]));
    let mut r = Stream::new(0);
    mlp.forward(&mut t, &store, x, &mut Mode::Train(&mut r)).unwrap();
    let obs = t.bn_observations().to_vec();
    assert_eq!(obs.len(), 1);
    let before = store.get(obs[0].running_mean).data.clone();
    apply_bn_observations(&mut store, &obs, 0.1);
    let after = &store.get(obs[0].running_mean).data;
    for ((a, b), m) in after.iter().zip(&before).zip(&obs[0].mean) {
        assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut store = ParameterStore::new();
    let mut rng = Stream::new(4);
    Mlp::new(&mut store, "m", MlpSpec::new(&[3, 7, 2]).with_batch_norm(true), &mut rng).unwrap();
    store.add("odd", 1, 3, vec![1e-300, -0.1 + 0.2, std::f64::consts::PI], true).unwrap();
    let mut state = AdamState::new(&store);
    state.step = 3;
    state.m[0][0] = 1.0 / 3.0;
    let ck = Checkpoint::new(store, Some(state));
    let json = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&json).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    assert_eq!(back.params.id("odd"), ck.params.id("odd"));
    assert!(Checkpoint::from_json("{}").is_err());
}

#[test]
fn store_rejects_duplicates_and_bad_shapes() {
    let mut s = ParameterStore::new();
    s.add("a", 1, 2, vec![0.0, 1.0], true).unwrap();
    assert!(s.add("a", 1, 2, vec![0.0, 1.0], true).is_err());
    assert!(s.add("b", 2, 2, vec![0.0], true).is_err());
    assert!(s.add("c", 1, 1, vec![f64::NAN], true).is_err());
}
