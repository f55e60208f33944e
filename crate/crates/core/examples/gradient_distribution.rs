//! Captures activation gradients and weights mid-training and tests them
//! against Gaussian, Laplace and Student-t fits.
//!
//! Run: `cargo run --release --example gradient_distribution`

use int8_train::cli::subsample;
use int8_train::data::{synthetic_blobs, BlobSpec};
use int8_train::diagnostics::histogram::excess_kurtosis;
use int8_train::diagnostics::{ks_test, Family, Histogram};
use int8_train::nn::zoo;
use int8_train::train::{TrainConfig, Trainer};

fn main() -> int8_train::Result<()> {
    let split = synthetic_blobs(&BlobSpec { classes: 10, dim: 192, train: 2000, test: 500, seed: 1, noise: 1.5 })?;
    let model = zoo::tiny_mobilenet([3, 8, 8], 10, 8, 1)?;
    let cfg = TrainConfig { epochs: 2, seed: 1, capture_iters: vec![60], ..TrainConfig::default() };
    let mut captures = Vec::new();
    Trainer::new(model, cfg)?.run(&split, &mut |r| {
        captures.extend(r.captures.iter().cloned());
        Ok(())
    })?;

    for c in &captures {
        for (what, t) in [("grad", &c.gz), ("weight", &c.weight)] {
            let xs = subsample(t.data(), 5000);
            let mut line = format!("layer {} {what:<6} n {:>6} kurtosis {:>8.2}", c.layer, t.len(), excess_kurtosis(t.data()));
            for family in Family::ALL {
                let f = ks_test(&xs, family)?;
                line += &format!("  {} D={:.3}{}", family.name(), f.ks, if f.rejects() { "*" } else { " " });
            }
            println!("{line}");
        }
    }
    println!("* rejected at the 0.05 level");

    if let Some(c) = captures.first() {
        let h = Histogram::new(c.gz.data(), 64, c.layer, 60)?;
        println!("\nlayer {} gradient histogram, 64 bins merged in fours (|g| <= {:.2e}):", c.layer, h.max_abs);
        let merged: Vec<u64> = h.counts.chunks(4).map(|c| c.iter().sum()).collect();
        let peak = *merged.iter().max().unwrap_or(&1) as f64;
        for (edge, n) in h.edges().iter().step_by(4).zip(&merged) {
            println!("{edge:>10.2e} {}", "#".repeat((50.0 * *n as f64 / peak).ceil() as usize));
        }
    }
    Ok(())
}
