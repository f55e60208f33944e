//! Integer GEMM and im2col convolution against their FP32 counterparts.
//!
//! Run: `cargo run --release --example int8_kernels`

use std::time::Instant;

use int8_train::kernels::gemm::{gemm_f32, gemm_i8, Int8Matrix};
use int8_train::kernels::{conv2d_f32, conv2d_q, ConvGeometry};
use int8_train::quant::{quantize, LcgStream, QuantParams, RoundingMode};
use int8_train::Tensor;

fn random(dims: &[usize], s: &mut LcgStream) -> int8_train::Result<Tensor> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| 2.0 * s.next_f32() - 1.0).collect())
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den).sqrt()
}

fn main() -> int8_train::Result<()> {
    let mut s = LcgStream::new(1);

    let a = Int8Matrix::new(2, 3, vec![1, -2, 3, 127, -127, 0])?;
    let b = Int8Matrix::new(3, 2, vec![4, 5, -6, 7, 8, -9])?;
    let c = gemm_i8(&a, &b)?;
    println!("2x3 * 3x2 = {:?}", c.data());

    let (m, k, n) = (128, 512, 64);
    let af = random(&[m, k], &mut s)?;
    let bf = random(&[k, n], &mut s)?;
    let pa = QuantParams::from_max_abs(af.max_abs())?;
    let pb = QuantParams::from_max_abs(bf.max_abs())?;
    let qa = quantize(&af, pa, RoundingMode::Nearest, None)?;
    let qb = quantize(&bf, pb, RoundingMode::Nearest, None)?;
    let t = Instant::now();
    let acc = gemm_i8(&Int8Matrix::new(m, k, qa.values().to_vec())?, &Int8Matrix::new(k, n, qb.values().to_vec())?)?;
    let t_i8 = t.elapsed();
    let t = Instant::now();
    let reference = gemm_f32(af.data(), bf.data(), m, k, n);
    let t_f32 = t.elapsed();
    let sab = pa.scale() * pb.scale();
    let approx: Vec<f32> = acc.data().iter().map(|&v| v as f32 * sab).collect();
    println!("gemm {m}x{k}x{n}: relative error {:.3e}, int8 {t_i8:?}, fp32 {t_f32:?}", rel_err(&approx, &reference));

    let geometries = [
        ConvGeometry::new([8, 16, 16, 16], 32, [3, 3], 1, 1, 1)?,
        ConvGeometry::new([8, 32, 16, 16], 32, [3, 3], 2, 1, 32)?,
        ConvGeometry::new([8, 32, 8, 8], 64, [1, 1], 1, 0, 1)?,
    ];
    for g in geometries {
        let x = random(&g.input_dims(), &mut s)?;
        let w = random(&g.weight_dims(), &mut s)?;
        let qx = quantize(&x, QuantParams::from_max_abs(x.max_abs())?, RoundingMode::Nearest, None)?;
        let qw = quantize(&w, QuantParams::from_max_abs(w.max_abs())?, RoundingMode::Nearest, None)?;
        let yq = conv2d_q(&qx, &qw, &g)?;
        let yf = conv2d_f32(&x, &w, &g)?;
        println!(
            "conv in {:?} w {:?} stride {} groups {}: out {:?}, relative error {:.3e}",
            g.input_dims(),
            g.weight_dims(),
            g.stride,
            g.groups,
            yq.dims(),
            rel_err(yq.data(), yf.data())
        );
    }
    Ok(())
}
