//! Laplacian, lambda_max estimate and Chebyshev filtering of a delta
//! signal on a small ring.

use stgcn::graph::{normalized_laplacian, LambdaMax, SpectralOperators};
use stgcn::{Tensor, WeightedGraph};

fn main() -> stgcn::Result<()> {
    let n = 8;
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    let g = WeightedGraph::from_edges(n, &edges)?;

    let lap = normalized_laplacian(&g);
    println!("degrees: {:?}", lap.degree);
    let ops = SpectralOperators::from_graph(&g, LambdaMax::default())?;
    println!("estimated lambda_max = {:.8} (an even ring has exactly 2)", ops.lambda_max);

    // T_k(L~) applied to a delta at vertex 0 spreads exactly k hops
    let mut delta = Tensor::zeros(&[n, 1]);
    delta.set(&[0, 0], 1.0);
    for (k, t) in ops.cheb_basis_apply(&delta, 4)?.iter().enumerate() {
        let row: Vec<String> = t.data().iter().map(|v| format!("{v:6.2}")).collect();
        println!("T_{k} x = [{}]", row.join(" "));
    }
    Ok(())
}
