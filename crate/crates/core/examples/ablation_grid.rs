//! Trains every row of the ablation grid on the self-consistency scene and prints the
//! comparison table.
//!
//!     cargo run --release --example ablation_grid [iterations]

use peelsplat::cli::{ablate, ablation_table, TableFormat};
use peelsplat::trainer::toy::{self_consistency_config, self_consistency_setup};

fn main() -> peelsplat::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let (_, data, init) = self_consistency_setup();
    let mut cfg = self_consistency_config(iterations);
    // let the grid's densification row differ from the base row
    cfg.ablation.no_densify = false;
    cfg.densify_period = 100;
    cfg.densify_per_event = 16;
    let rows = ablate(&init, &data, &cfg)?;
    print!("{}", ablation_table(&rows, TableFormat::Markdown));
    Ok(())
}
