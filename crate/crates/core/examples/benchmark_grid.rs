//! Runs every architecture on the three synthetic datasets and prints the
//! comparison table with the per-model mean overfit ratio.

use stgcn::cli::synthetic_suite;
use stgcn::models::{ArchitectureName, SpecOverrides};
use stgcn::training::{render_table, run_benchmark, TrainConfig};

fn main() -> stgcn::Result<()> {
    let datasets = synthetic_suite(3)?;
    let cfg = TrainConfig {
        max_epochs: 20,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let results = run_benchmark(&datasets, &ArchitectureName::CANONICAL, &SpecOverrides::default(), &cfg);
    println!("{}", render_table(&results));
    Ok(())
}
