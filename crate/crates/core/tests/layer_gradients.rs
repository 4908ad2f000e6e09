//! Layer forward passes against dense oracles, and every layer's
//! parameters against finite differences.

mod common;

use common::*;
use nalgebra::DMatrix;
use stgcn::autodiff::Var;
use stgcn::graph::{LambdaMax, SpectralOperators};
use stgcn::layers::*;
use stgcn::params::{Mode, ParamStore, Session};
use stgcn::Tensor;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn project(s: &mut Session, out: Var, seed: u64) -> stgcn::Result<Var> {
    let proj = random_tensor(s.tape.shape(out), &mut rng(seed ^ 0x5EED));
    let p = s.tape.constant(&proj);
    let prod = s.tape.mul(out, p)?;
    Ok(s.tape.sum(prod))
}

fn assert_fd(store: &ParamStore, mode: Mode, name: &str, seed: u64, f: impl Fn(&mut Session) -> stgcn::Result<Var>) {
    let r = store_fd_check(store, mode, f);
    assert!(r.worst < TOL && r.kinks.is_empty(), "{name}, seed {seed}: {r:?}");
}

#[test]
fn cheb_conv_parameters() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let g = random_graph(5, 0.5, &mut r);
        let ops = SpectralOperators::from_graph(&g, LambdaMax::default()).unwrap();
        let order = (seed % 4) as usize;
        let mut store = ParamStore::new();
        let layer = ChebConvLayer::new(&mut store, "cheb", &ops, 3, 2, order, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[2, 5, 3, 4], &mut r);
        assert_fd(&store, Mode::Train, "cheb", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

#[test]
fn first_order_conv_parameters() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let g = random_graph(4, 0.6, &mut r);
        let mut store = ParamStore::new();
        let layer = FirstOrderConvLayer::new(&mut store, "gcn", &g, 2, 3, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[4, 2, 3], &mut r);
        assert_fd(&store, Mode::Train, "first-order", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

#[test]
fn temporal_conv_parameters() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let k = 1 + (seed % 3) as usize;
        let mut store = ParamStore::new();
        let layer = TemporalGatedConvLayer::new(&mut store, "temporal", 2, 3, k, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[2, 3, 2, 5], &mut r);
        assert_fd(&store, Mode::Train, "temporal", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

#[test]
fn lstm_parameters_through_five_steps() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = LstmBlock::new(&mut store, "lstm", 2, 3, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[4, 2, 5], &mut r);
        assert_fd(&store, Mode::Train, "lstm", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

#[test]
fn linear_parameters() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "head", 4, 2, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[3, 4], &mut r);
        assert_fd(&store, Mode::Train, "linear", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

#[test]
fn batch_norm_parameters_in_both_modes() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let mut layer = BatchNormLayer::new(&mut store, "norm", 3, 0);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[2, 4, 3, 5], &mut r);
        assert_fd(&store, Mode::Train, "batch norm", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
        layer.running = Some(RunningStats {
            mean: vec![0.1, 0.0, -0.2],
            var: vec![0.7, 1.2, 0.9],
        });
        assert_fd(&store, Mode::Eval, "batch norm eval", seed, |s| {
            let xv = s.tape.constant(&x);
            let y = layer.forward(s, xv)?;
            project(s, y, seed)
        });
    }
}

fn set(store: &mut ParamStore, id: stgcn::params::ParamId, t: &Tensor) {
    store.get_mut(id).data_mut().copy_from_slice(t.data());
}

#[test]
fn cheb_conv_matches_dense_polynomial() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let g = random_graph(4, 0.7, &mut r);
        let ops = SpectralOperators::from_graph(&g, LambdaMax::default()).unwrap();
        let mut store = ParamStore::new();
        let layer = ChebConvLayer::new(&mut store, "cheb", &ops, 3, 2, 2, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[4, 3, 1], &mut r);
        let mut s = Session::new(&store, Mode::Eval, false);
        let xv = s.tape.constant(&x);
        let y = layer.forward(&mut s, xv).unwrap();
        let got = s.tape.tensor(y);

        let lt = dense(&ops.scaled_laplacian);
        let xm = DMatrix::from_row_slice(4, 3, x.data());
        let mut expected = DMatrix::zeros(4, 2);
        for (k, tk) in chebyshev_matrices(&lt, 2).iter().enumerate() {
            expected += tk * &xm * dense(store.get(layer.weights[k]));
        }
        let b = store.get(layer.bias).data();
        for v in 0..4 {
            for c in 0..2 {
                let diff = (got.get(&[v, c, 0]) - expected[(v, c)] - b[c]).abs();
                assert!(diff < 1e-10, "seed {seed}: {diff:e}");
            }
        }
    }
}

#[test]
fn cheb_conv_time_slices_are_independent() {
    let mut r = rng(3);
    let g = random_graph(5, 0.5, &mut r);
    let ops = SpectralOperators::from_graph(&g, LambdaMax::default()).unwrap();
    let mut store = ParamStore::new();
    let layer = ChebConvLayer::new(&mut store, "cheb", &ops, 2, 3, 2, &mut r);
    perturb_params(&mut store, 3);
    let x = random_tensor(&[5, 2, 4], &mut r);
    let perm = [2, 0, 3, 1];
    let mut xp = x.clone();
    for v in 0..5 {
        for c in 0..2 {
            for (t, &p) in perm.iter().enumerate() {
                xp.set(&[v, c, t], x.get(&[v, c, p]));
            }
        }
    }
    let run = |input: &Tensor| {
        let mut s = Session::new(&store, Mode::Eval, false);
        let xv = s.tape.constant(input);
        let y = layer.forward(&mut s, xv).unwrap();
        s.tape.tensor(y)
    };
    let (y, yp) = (run(&x), run(&xp));
    for v in 0..5 {
        for c in 0..3 {
            for (t, &p) in perm.iter().enumerate() {
                assert!((yp.get(&[v, c, t]) - y.get(&[v, c, p])).abs() < 1e-12);
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn lstm_single_step_matches_cell_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (input, hidden) = (3, 2);
        let mut store = ParamStore::new();
        let layer = LstmBlock::new(&mut store, "lstm", input, hidden, &mut r);
        perturb_params(&mut store, seed);
        let x = random_tensor(&[4, input, 1], &mut r);
        let mut s = Session::new(&store, Mode::Eval, false);
        let xv = s.tape.constant(&x);
        let y = layer.forward(&mut s, xv).unwrap();
        let got = s.tape.tensor(y);
        assert_eq!(got.shape(), &[4, hidden]);
        for v in 0..4 {
            // h0 = c0 = 0, so only the input weights and biases matter
            let z = |g: usize, j: usize| -> f64 {
                let w = store.get(layer.w_input[g]);
                let b = store.get(layer.bias[g]).data()[j];
                (0..input).map(|c| x.get(&[v, c, 0]) * w.get(&[c, j])).sum::<f64>() + b
            };
            for j in 0..hidden {
                let i = sigmoid(z(0, j));
                let gc = z(2, j).tanh();
                let o = sigmoid(z(3, j));
                let c = i * gc;
                let h = o * c.tanh();
                assert!((got.get(&[v, j]) - h).abs() < 1e-12, "seed {seed}");
            }
        }
    }
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let mut store = ParamStore::new();
    let layer = LstmBlock::new(&mut store, "lstm", 2, 3, &mut rng(0));
    assert_eq!(store.get(layer.bias[1]).data(), &[1.0, 1.0, 1.0]);
    for g in [0, 2, 3] {
        assert_eq!(store.get(layer.bias[g]).data(), &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn two_first_order_layers_reach_two_hops() {
    let g = path_graph(3);
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let l1 = FirstOrderConvLayer::new(&mut store, "a", &g, 1, 1, &mut r);
    let l2 = FirstOrderConvLayer::new(&mut store, "b", &g, 1, 1, &mut r);
    set(&mut store, l1.weight, &Tensor::eye(1));
    set(&mut store, l2.weight, &Tensor::eye(1));
    let mut x = Tensor::zeros(&[3, 1, 1]);
    x.set(&[0, 0, 0], 1.0);
    let mut s = Session::new(&store, Mode::Eval, false);
    let xv = s.tape.constant(&x);
    let one = l1.forward(&mut s, xv).unwrap();
    let two = l2.forward(&mut s, one).unwrap();
    assert_eq!(s.tape.value(one)[2], 0.0);
    assert!(s.tape.value(two)[2] > 0.0);
}
