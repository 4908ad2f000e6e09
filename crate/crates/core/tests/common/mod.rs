//! Test-side oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgcn::autodiff::{Tape, Var};
use stgcn::{Tensor, WeightedGraph};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Symmetric graph with edge probability `density` and weights in
/// `[0.1, 2)`.
pub fn random_graph(n: usize, density: f64, rng: &mut impl Rng) -> WeightedGraph {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let w = rng.random_range(0.1..2.0);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
    }
    WeightedGraph::new(n, a, None).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of `sum(build(inputs) * r)` for a fixed random
/// `r` against central differences of the same function, returning the
/// largest relative error over every input entry.
pub fn fd_check(
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> stgcn::Result<Var>,
) -> f64 {
    let eval = |vals: &[Tensor], with_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if with_grad { tape.param(t) } else { tape.constant(t) })
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let mut r = rng(seed ^ 0xABCD);
        let proj = random_tensor(tape.shape(out), &mut r);
        let p = tape.constant(&proj);
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss)[0];
        if !with_grad {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub fn dense(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

pub fn adjacency_matrix(g: &WeightedGraph) -> DMatrix<f64> {
    let n = g.n_vertices();
    DMatrix::from_row_slice(n, n, g.adjacency())
}

/// `I - D^-1/2 W D^-1/2` built directly from the adjacency, zeroing the
/// scaling of isolated vertices.
pub fn oracle_laplacian(g: &WeightedGraph) -> DMatrix<f64> {
    let w = adjacency_matrix(g);
    let n = g.n_vertices();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = w.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - d[i] * w[(i, j)] * d[j])
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Dense `T_0..=T_order` matrices of `m`.
pub fn chebyshev_matrices(m: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = vec![DMatrix::identity(n, n)];
    if order >= 1 {
        out.push(m.clone());
    }
    for k in 2..=order {
        let next = m * &out[k - 1] * 2.0 - &out[k - 2];
        out.push(next);
    }
    out
}

pub fn path_graph(n: usize) -> WeightedGraph {
    WeightedGraph::path(n).unwrap()
}

/// Outcome of a parameter-store gradient check.
#[derive(Debug, Default)]
pub struct FdReport {
    /// Worst central-difference relative error over smooth coordinates.
    pub worst: f64,
    pub at: String,
    /// Coordinates whose central stencil straddles a ReLU kink: the
    /// central difference disagrees but one one-sided difference agrees
    /// with the tape gradient.
    pub kinks: Vec<String>,
    pub checked: usize,
}

/// Finite-difference check of every parameter in `store` for the scalar
/// built by `loss`.
pub fn store_fd_check(
    store: &stgcn::params::ParamStore,
    mode: stgcn::params::Mode,
    loss: impl Fn(&mut stgcn::params::Session) -> stgcn::Result<Var>,
) -> FdReport {
    use stgcn::params::Session;
    let value = |st: &stgcn::params::ParamStore| -> f64 {
        let mut s = Session::new(st, mode, false);
        let l = loss(&mut s).unwrap();
        s.tape.value(l)[0]
    };
    let mut s = Session::new(store, mode, true);
    let l = loss(&mut s).unwrap();
    let center = s.tape.value(l)[0];
    s.tape.backward(l).unwrap();
    let mut with_grads = store.clone();
    with_grads.absorb_grads(&s).unwrap();

    let mut report = FdReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = with_grads.get(id).grad().unwrap().to_vec();
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            report.checked += 1;
            let label = format!("{}[{j}]", store.label(id));
            let err = rel_err(analytic[j], (up - down) / (2.0 * FD_STEP));
            if err < 1e-4 {
                if err > report.worst {
                    report.worst = err;
                    report.at = label;
                }
                continue;
            }
            let forward = rel_err(analytic[j], (up - center) / FD_STEP);
            let backward = rel_err(analytic[j], (center - down) / FD_STEP);
            if forward.min(backward) < 1e-3 {
                report.kinks.push(label);
            } else if err > report.worst {
                report.worst = err;
                report.at = label;
            }
        }
    }
    report
}

/// Random non-zero parameters so that zero-initialized biases and the
/// unit forget bias do not hide gradient paths.
pub fn perturb_params(store: &mut stgcn::params::ParamStore, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

pub mod models {
    use super::*;
    use stgcn::models::{build_model, ArchitectureName, ArchitectureSpec, Model, SpecOverrides};
    use stgcn::params::Mode;

    /// Spec used by the gradient checks: c_h 4, window 8. The two-sandwich
    /// st-gcn needs kernel 2 to fit four convolutions into 8 steps.
    pub fn small_spec(arch: ArchitectureName, window: usize) -> ArchitectureSpec {
        let kernel = if arch == ArchitectureName::StGcn { 2 } else { 3 };
        let o = SpecOverrides {
            kernel,
            c_h: Some(4),
            ..SpecOverrides::default()
        };
        ArchitectureSpec::canonical(arch, window, &o).unwrap()
    }

    /// Worst relative error over every trainable parameter of a model on a
    /// random 4-vertex graph, loss = train-mode MSE on a batch of 3.
    pub fn model_fd_error(arch: ArchitectureName, seed: u64) -> (FdReport, usize) {
        let mut r = rng(seed);
        let g = random_graph(4, 0.6, &mut r);
        let spec = small_spec(arch, 8);
        let mut model = build_model(&spec, &g, seed).unwrap();
        perturb_params(model.params_mut(), seed);
        let x = random_tensor(&[3, 4, 1, 8], &mut r);
        let y = random_tensor(&[3, 4, 1], &mut r);
        let report = store_fd_check(model.params(), Mode::Train, |s| {
            let xv = s.tape.constant(&x);
            let pred = model.forward_var(s, xv)?;
            let t = s.tape.constant(&y);
            s.tape.mse(pred, t)
        });
        (report, model.parameter_count())
    }

    pub fn canonical(arch: ArchitectureName, window: usize) -> ArchitectureSpec {
        ArchitectureSpec::canonical(arch, window, &SpecOverrides::default()).unwrap()
    }

    /// Trains one step so batch norm has running statistics, then returns
    /// the model; eval-mode forward passes then exercise them.
    pub fn warmed(spec: &ArchitectureSpec, g: &WeightedGraph, seed: u64) -> Model {
        let mut model = build_model(spec, g, seed).unwrap();
        perturb_params(model.params_mut(), seed);
        let mut r = rng(seed ^ 77);
        let n = g.n_vertices();
        let x = random_tensor(&[4, n, 1, spec.window], &mut r);
        let y = random_tensor(&[4, n, 1], &mut r);
        model.train_step_grads(&x, &y).unwrap();
        model
    }

    /// Largest deviation from `forward(pi G, pi X) == pi forward(G, X)` in
    /// both modes, on a random 6-vertex graph. In train mode batch norm
    /// pools over vertices, which a permutation leaves unchanged.
    pub fn permutation_error(arch: ArchitectureName, seed: u64) -> f64 {
        let mut r = rng(seed);
        let n = 6;
        let g = random_graph(n, 0.5, &mut r);
        let spec = canonical(arch, 10);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let gp = g.permuted(&perm).unwrap();
        let model = warmed(&spec, &g, seed);
        let mut model_p = build_model(&spec, &gp, seed).unwrap();
        model_p.load_checkpoint(&model.checkpoint()).unwrap();
        let x = random_tensor(&[n, 1, 10], &mut r);
        let mut xp = x.clone();
        for v in 0..n {
            for t in 0..10 {
                xp.set(&[v, 0, t], x.get(&[perm[v], 0, t]));
            }
        }
        let mut worst: f64 = 0.0;
        for mode in [Mode::Eval, Mode::Train] {
            let y = model.forward(&x, mode).unwrap();
            let yp = model_p.forward(&xp, mode).unwrap();
            for v in 0..n {
                worst = worst.max((yp.get(&[v, 0]) - y.get(&[perm[v], 0])).abs());
            }
        }
        worst
    }

    /// Largest output change when every edge weight is multiplied by a
    /// random factor in `[0.1, 10]`.
    pub fn scaling_error(arch: ArchitectureName, seed: u64) -> f64 {
        let mut r = rng(seed);
        let g = random_graph(6, 0.5, &mut r);
        let c = r.random_range(0.1..10.0);
        let spec = canonical(arch, 10);
        let model = warmed(&spec, &g, seed);
        let mut scaled = build_model(&spec, &g.scaled(c).unwrap(), seed).unwrap();
        scaled.load_checkpoint(&model.checkpoint()).unwrap();
        let x = random_tensor(&[6, 1, 10], &mut r);
        let mut worst: f64 = 0.0;
        for mode in [Mode::Eval, Mode::Train] {
            let a = model.forward(&x, mode).unwrap();
            let b = scaled.forward(&x, mode).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
        worst
    }
}
