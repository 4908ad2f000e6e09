//! Reverse-mode gradients of a small graph-conv + tanh expression,
//! compared with central finite differences.

use stgcn::graph::{LambdaMax, SpectralOperators};
use stgcn::{Tape, Tensor, WeightedGraph};

fn loss(l: &Tensor, x: &Tensor, w: &Tensor, tape: &mut Tape) -> stgcn::Result<(f64, stgcn::Var, stgcn::Var)> {
    let lv = tape.constant(l);
    let xv = tape.constant(x);
    let wv = tape.param(w);
    let h = tape.matmul(lv, xv)?;
    let h = tape.matmul(h, wv)?;
    let h = tape.tanh(h);
    let out = tape.mean(h);
    Ok((tape.value(out)[0], wv, out))
}

fn main() -> stgcn::Result<()> {
    let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0), (0, 3, 1.0)])?;
    let ops = SpectralOperators::from_graph(&g, LambdaMax::default())?;
    let x = Tensor::new(vec![4, 2], vec![0.3, -1.0, 0.8, 0.1, -0.5, 0.7, 1.2, -0.2])?;
    let w = Tensor::new(vec![2, 3], vec![0.5, -0.4, 0.9, 0.2, 0.6, -0.7])?;

    let mut tape = Tape::new();
    let (_, wv, out) = loss(&ops.scaled_laplacian, &x, &w, &mut tape)?;
    tape.backward(out)?;
    let analytic = tape.grad(wv).unwrap().to_vec();

    let h = 1e-5;
    for (j, a) in analytic.iter().enumerate() {
        let mut up = w.clone();
        up.data_mut()[j] += h;
        let mut down = w.clone();
        down.data_mut()[j] -= h;
        let f = |t: &Tensor| loss(&ops.scaled_laplacian, &x, t, &mut Tape::new()).map(|r| r.0);
        let numeric = (f(&up)? - f(&down)?) / (2.0 * h);
        println!("dW[{j}]: tape {a:+.10}  fd {numeric:+.10}  diff {:.1e}", (a - numeric).abs());
    }
    Ok(())
}
