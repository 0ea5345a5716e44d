//! Fits a perturbed copy of a hidden scene to images rendered from it, with and without
//! the transmittance gradient path, and reports train PSNR for both.
//!
//!     cargo run --release --example train_selfconsistency [iterations]

use peelsplat::trainer::toy::{self_consistency_config, self_consistency_setup};
use peelsplat::trainer::{evaluate_psnr, train};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> peelsplat::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3000);
    let (_, data, init) = self_consistency_setup();
    println!("initial PSNR {:.2} dB", mean(&evaluate_psnr(&init, &data, 3)?));
    for off in [false, true] {
        let mut cfg = self_consistency_config(iterations);
        cfg.ablation.trans_grad_off = off;
        let t = std::time::Instant::now();
        let out = train(init.clone(), &data, &cfg)?;
        let first = out.log.first().map(|r| r.loss.total).unwrap_or(0.0);
        let last = out.log.last().map(|r| r.loss.total).unwrap_or(0.0);
        println!(
            "{:<16} PSNR {:.3} dB  loss {:.5} -> {:.5}  ({:.1}s)",
            if off { "no-trans-grad" } else { "full" },
            mean(&evaluate_psnr(&out.scene, &data, 3)?),
            first,
            last,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
