//! INT8 training with and without gradient clipping and learning-rate
//! scaling, plus the linear and quadratic scaling forms.
//!
//! Run: `cargo run --release --example crash_ablation [seed]`

use int8_train::clip::ClipSearchConfig;
use int8_train::data::{synthetic_blobs, BlobSpec};
use int8_train::lr_scale::{LrScaleConfig, ScaleForm};
use int8_train::nn::{zoo, GradClip};
use int8_train::train::{TrainConfig, Trainer};

fn main() -> int8_train::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let split = synthetic_blobs(&BlobSpec { classes: 10, dim: 192, train: 5000, test: 2000, seed, noise: 1.5 })?;
    let scale = |form| Some(LrScaleConfig { form, ..LrScaleConfig::default() });
    let variants = [
        ("no clip, no scaling", GradClip::MaxAbs, None),
        ("clip search + exponential", GradClip::Search(ClipSearchConfig::default()), scale(ScaleForm::Exponential)),
        ("no clip + exponential", GradClip::MaxAbs, scale(ScaleForm::Exponential)),
        ("no clip + linear", GradClip::MaxAbs, scale(ScaleForm::Linear)),
        ("no clip + quadratic", GradClip::MaxAbs, scale(ScaleForm::Quadratic)),
    ];
    for (name, grad_clip, lr_scale) in variants {
        let model = zoo::tiny_mobilenet([3, 8, 8], 10, 8, seed)?;
        let cfg = TrainConfig { epochs: 5, seed, grad_clip, lr_scale, ..TrainConfig::default() };
        let s = Trainer::new(model, cfg)?.run(&split, &mut |_| Ok(()))?;
        let crash = s.crash.map(|(it, k)| format!(" crashed at {it} ({k:?})")).unwrap_or_default();
        let epochs: Vec<String> = s.epoch_accuracy.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
        println!("{name:<28} final {:>6.2}%  epochs [{}]{crash}", 100.0 * s.final_accuracy, epochs.join(" "));
    }
    Ok(())
}
