//! FP32 and INT8 training of the small MobileNet on a synthetic image task.
//!
//! Run: `cargo run --release --example train_int8 [epochs]`

use int8_train::data::{synthetic_blobs, BlobSpec};
use int8_train::nn::{zoo, Mode};
use int8_train::train::{TrainConfig, Trainer};

fn main() -> int8_train::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let split = synthetic_blobs(&BlobSpec { classes: 10, dim: 192, train: 2000, test: 1000, seed: 0, noise: 1.5 })?;
    for mode in [Mode::Fp32, Mode::Int8] {
        let model = zoo::tiny_mobilenet([3, 8, 8], 10, 8, 0)?;
        let cfg = TrainConfig { mode, epochs, seed: 0, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, cfg)?;
        let summary = trainer.run(&split, &mut |r| {
            if r.iter % 50 == 0 {
                let dc: Vec<String> = r.layers.iter().map(|l| format!("{:.3}", l.dc)).collect();
                println!("{mode:?} iter {:>4} loss {:.4} lr {:.4} dc [{}]", r.iter, r.loss, r.lr, dc.join(" "));
            }
            Ok(())
        })?;
        println!(
            "{mode:?}: accuracy {:.2}% -> {:.2}% after {} iterations ({:.1} s, {} clip searches)\n",
            100.0 * summary.initial_accuracy,
            100.0 * summary.final_accuracy,
            summary.iterations,
            summary.train_seconds,
            summary.clip_searches
        );
    }
    Ok(())
}
