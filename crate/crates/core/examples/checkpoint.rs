//! Saves a partly trained INT8 model with its quantization state and
//! restores it into a fresh model.
//!
//! Run: `cargo run --release --example checkpoint`

use int8_train::checkpoint::Checkpoint;
use int8_train::data::{synthetic_blobs, BlobSpec};
use int8_train::nn::zoo;
use int8_train::train::{TrainConfig, Trainer};

fn main() -> int8_train::Result<()> {
    let split = synthetic_blobs(&BlobSpec { classes: 4, dim: 48, train: 512, test: 256, seed: 5, noise: 1.0 })?;
    let cfg = TrainConfig { epochs: 2, seed: 5, period: 10, ..TrainConfig::default() };
    let mut trainer = Trainer::new(zoo::tiny_resnet([3, 4, 4], 4, 4, 5)?, cfg.clone())?;
    let s = trainer.run(&split, &mut |_| Ok(()))?;
    println!("trained: {:.2}%", 100.0 * s.final_accuracy);

    let dir = std::env::temp_dir().join("int8train-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.i8ft");
    Checkpoint::capture(&trainer.model, &trainer.states).save(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let ck = Checkpoint::load(&path)?;
    let mut fresh = zoo::tiny_resnet([3, 4, 4], 4, 4, 999)?;
    let states = ck.restore(&mut fresh)?;
    for (name, t) in ck.tensors.iter().take(4) {
        println!("  {name} {:?}", t.dims());
    }
    for s in &states {
        println!("  layer {} weight clip {:.4} act clip {:.4} grad clip {:.3e}", s.grad.layer, s.weight_clip, s.act_clip, s.grad.clip);
    }
    let mut restored = Trainer::new(fresh, cfg)?;
    restored.states = states;
    println!("restored accuracy {:.2}%", 100.0 * restored.evaluate(&split.test)?);
    Ok(())
}
