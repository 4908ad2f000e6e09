//! Tape gradients of every differentiable op against central differences.

mod common;

use common::{fd_check, random_tensor, rng};
use stgcn::autodiff::{Activation, NormStats, Tape};
use stgcn::Tensor;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn check_all(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[stgcn::Var]) -> stgcn::Result<stgcn::Var>) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
        let err = fd_check(&inputs, seed, &build);
        assert!(err < TOL, "{name}, seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check_all("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn contract_every_axis() {
    let shape = [2, 3, 4];
    for axis in 0..3 {
        check_all("contract", &[&shape, &[shape[axis], 5]], |t, v| t.contract(v[0], v[1], axis));
    }
}

#[test]
fn conv1d_valid() {
    check_all("conv1d", &[&[2, 3, 2, 6], &[4, 2, 3], &[4]], |t, v| t.conv1d_valid(v[0], v[1], v[2]));
}

#[test]
fn glu() {
    check_all("glu", &[&[2, 4, 3]], |t, v| t.glu(v[0]));
}

#[test]
fn activations() {
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        check_all("activation", &[&[3, 5]], |t, v| Ok(t.activation(v[0], kind)));
    }
}

#[test]
fn batch_norm_with_batch_statistics() {
    check_all("batch_norm", &[&[3, 2, 4, 3], &[4], &[4]], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 2, 1e-5, NormStats::Batch)?.0)
    });
}

#[test]
fn batch_norm_with_fixed_statistics() {
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check_all("batch_norm fixed", &[&[4, 3, 2], &[3], &[3]], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1, 1e-5, NormStats::Fixed { mean: &mean, var: &var })?.0)
    });
}

#[test]
fn elementwise() {
    check_all("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
    check_all("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]));
    check_all("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
    check_all("scale", &[&[2, 3]], |t, v| Ok(t.scale(v[0], -1.7)));
}

#[test]
fn add_bias_on_each_axis() {
    check_all("add_bias 0", &[&[3, 2, 2], &[3]], |t, v| t.add_bias(v[0], v[1], 0));
    check_all("add_bias 2", &[&[3, 2, 2], &[2]], |t, v| t.add_bias(v[0], v[1], 2));
}

#[test]
fn shape_ops() {
    check_all("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check_all("select", &[&[2, 3, 4]], |t, v| t.select(v[0], 2, 1));
    check_all("select", &[&[2, 3, 4]], |t, v| t.select(v[0], 0, 1));
}

#[test]
fn reductions_and_loss() {
    check_all("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0])));
    check_all("mean", &[&[2, 3]], |t, v| Ok(t.mean(v[0])));
    check_all("mse", &[&[4, 1], &[4, 1]], |t, v| t.mse(v[0], v[1]));
}

#[test]
fn mse_gradient_closed_form() {
    let mut r = rng(5);
    let p = random_tensor(&[6, 1], &mut r);
    let y = random_tensor(&[6, 1], &mut r);
    let mut tape = Tape::new();
    let (pv, yv) = (tape.param(&p), tape.constant(&y));
    let loss = tape.mse(pv, yv).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(pv).unwrap();
    for i in 0..6 {
        let expected = 2.0 * (p.data()[i] - y.data()[i]) / 6.0;
        assert!((g[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn composite_graph_reuses_nodes() {
    // x feeds several branches, so gradients must accumulate
    check_all("composite", &[&[3, 4], &[4, 4]], |t, v| {
        let a = t.matmul(v[0], v[1])?;
        let b = t.tanh(a);
        let c = t.mul(b, a)?;
        let d = t.matmul(c, v[1])?;
        t.add(d, v[0])
    });
}
