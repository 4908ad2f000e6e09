//! Builds a company graph from an analyst coverage matrix and a table of
//! returns, in both weighting modes.

use stgcn::data::{build_finance_graph, CoverageMatrix, DistanceMode};

fn main() -> stgcn::Result<()> {
    let companies: Vec<String> = ["ACME", "BOLT", "CORE", "DYNA"].map(String::from).to_vec();
    // rows: companies, columns: articles mentioning them
    let coverage = CoverageMatrix::new(
        companies,
        vec![vec![1, 1, 0, 0, 1], vec![1, 0, 1, 0, 1], vec![0, 0, 1, 1, 0], vec![0, 1, 0, 1, 0]],
    )?;
    let returns: Vec<Vec<f64>> = (0..4)
        .map(|c| (0..30).map(|t| 0.01 * ((t * (c + 2)) as f64).sin()).collect())
        .collect();
    for mode in [DistanceMode::CosineDistance, DistanceMode::CosineSimilarity] {
        let ds = build_finance_graph(&coverage, &returns, mode, 5, "toy-finance")?;
        println!("{mode:?}: {} vertices, {} samples", ds.n_vertices(), ds.sample_count());
        for (i, j, w) in ds.graph.edges() {
            println!("  {} - {}: {w:.3}", coverage.companies[i], coverage.companies[j]);
        }
    }
    Ok(())
}
