//! Loads CIFAR-10 binary batches. Without a directory argument it parses a
//! few fake records in the same format from memory.
//!
//! Run: `cargo run --release --example cifar10 [cifar-10-batches-bin]`

use int8_train::data::{encode_cifar_records, load_cifar10, parse_cifar_records, Dataset, CIFAR_PIXELS};

fn describe(name: &str, ds: &Dataset) {
    let mut counts = [0usize; 10];
    for &l in ds.labels() {
        counts[l as usize] += 1;
    }
    let img = ds.image(0);
    let mean = img.iter().sum::<f32>() / img.len() as f32;
    println!("{name}: {} images {:?}, per class {counts:?}", ds.len(), ds.dims());
    println!("  first image label {}, mean normalized pixel {mean:.4}", ds.labels()[0]);
}

fn main() -> int8_train::Result<()> {
    match std::env::args().nth(1) {
        Some(dir) => {
            let split = load_cifar10(dir.as_ref(), None, None)?;
            describe("train", &split.train);
            describe("test", &split.test);
        }
        None => {
            let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
            let pixels: Vec<u8> = (0..20 * CIFAR_PIXELS).map(|i| (i * 7) as u8).collect();
            let bytes = encode_cifar_records(&pixels, &labels)?;
            println!("no directory given; {} bytes of fake records", bytes.len());
            describe("fake", &parse_cifar_records(&bytes)?);
        }
    }
    Ok(())
}
