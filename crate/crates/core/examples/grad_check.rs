//! Checks the analytic backward pass against central finite differences on a handful of
//! random micro-scenes and prints the worst error per parameter class.
//!
//!     cargo run --release --example grad_check [scenes] [seed]

use peelsplat::verify::gradient_report;

fn main() {
    let mut args = std::env::args().skip(1);
    let scenes = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let (on, off) = gradient_report(scenes, seed);
    for (label, r) in [("full", &on), ("detached transmittance", &off)] {
        println!("{label}:");
        for (class, c) in &r.classes {
            println!(
                "  {:<9} checked {:>4}  near boundary {:>3}  failed {:>2}  max rel error {:.2e}",
                class.name(),
                c.checked,
                c.skipped,
                c.failures.len(),
                c.max_error
            );
            if let Some(f) = c.failures.first() {
                println!("    first failure: {f:?}");
            }
        }
    }
    if !on.passed() || !off.passed() {
        std::process::exit(1);
    }
}
