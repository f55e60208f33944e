//! Symmetric int8 quantization with nearest and stochastic rounding.
//!
//! Run: `cargo run --example quantize`

use int8_train::quant::{fake_quantize, quantize, LcgStream, QuantParams, RoundingMode};
use int8_train::Tensor;

fn main() -> int8_train::Result<()> {
    let x = Tensor::from_vec(&[8], vec![-1.7, -0.5, -0.004, 0.0, 0.0037, 0.25, 0.9, 2.4])?;
    let params = QuantParams::new(1.0)?;
    println!("clip {} scale {:.6}", params.clip(), params.scale());

    let near = quantize(&x, params, RoundingMode::Nearest, None)?;
    let mut stream = LcgStream::new(42);
    let stoch = quantize(&x, params, RoundingMode::Stochastic, Some(&mut stream))?;
    println!("{:>8} {:>8} {:>8}", "x", "nearest", "stoch");
    for i in 0..x.len() {
        println!("{:>8.4} {:>8} {:>8}", x.data()[i], near.values()[i], stoch.values()[i]);
    }

    // Values off the grid: nearest rounding is biased, stochastic is not.
    let v = 0.3 * params.scale();
    let n = 100_000;
    let t = Tensor::full(&[n], v)?;
    let mean = |q: &Tensor| q.data().iter().map(|&a| a as f64).sum::<f64>() / n as f64;
    let fq_near = fake_quantize(&t, params, RoundingMode::Nearest, None)?;
    let fq_stoch = fake_quantize(&t, params, RoundingMode::Stochastic, Some(&mut stream))?;
    println!("\nx = {v:.6e}, {n} draws");
    println!("nearest mean    {:.6e}", mean(&fq_near));
    println!("stochastic mean {:.6e}", mean(&fq_stoch));

    // Same seed, same stream.
    let a = quantize(&x, params, RoundingMode::Stochastic, Some(&mut LcgStream::new(7)))?;
    let b = quantize(&x, params, RoundingMode::Stochastic, Some(&mut LcgStream::new(7)))?;
    assert_eq!(a, b);
    println!("seeded streams reproduce: ok");
    Ok(())
}
