//! Fully connected products, `z = a W^T` with `a: N x in`, `W: out x in`.

use crate::error::{Error, Result};
use crate::kernels::conv::gemm_nt_exact;
use crate::kernels::gemm::{gemm_f32, transpose};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

fn dims2(dims: &[usize], what: &str) -> Result<(usize, usize)> {
    match dims {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::DimensionMismatch(format!("{what} must be rank 2, got {dims:?}"))),
    }
}

fn check_pair(a: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, fan_in) = dims2(a, "input")?;
    let (out, w_in) = dims2(w, "weight")?;
    if fan_in != w_in {
        return Err(Error::DimensionMismatch(format!("input {a:?} vs weight {w:?}")));
    }
    Ok((n, fan_in, out))
}

fn rescale(acc: Vec<i64>, scale: f64) -> Vec<f32> {
    acc.into_iter().map(|v| (scale * v as f64) as f32).collect()
}

pub fn linear_q(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    let (n, fan_in, out) = check_pair(a.dims(), w.dims())?;
    let acc = gemm_nt_exact(a.values(), n, w.values(), out, fan_in)?;
    Tensor::from_vec(&[n, out], rescale(acc, a.params().scale() as f64 * w.params().scale() as f64))
}

/// Returns `(g_W, g_a)`.
pub fn linear_backward_q(gz: &QuantizedTensor, a: &QuantizedTensor, w: &QuantizedTensor) -> Result<(Tensor, Tensor)> {
    let (n, fan_in, out) = check_pair(a.dims(), w.dims())?;
    if gz.dims() != [n, out] {
        return Err(Error::DimensionMismatch(format!("output gradient {:?}, expected [{n}, {out}]", gz.dims())));
    }
    let gzt = transpose(gz.values(), n, out);
    let at = transpose(a.values(), n, fan_in);
    let gw = gemm_nt_exact(&gzt, out, &at, fan_in, n)?;
    let wt = transpose(w.values(), out, fan_in);
    let ga = gemm_nt_exact(gz.values(), n, &wt, fan_in, out)?;
    let s = gz.params().scale() as f64;
    Ok((
        Tensor::from_vec(&[out, fan_in], rescale(gw, s * a.params().scale() as f64))?,
        Tensor::from_vec(&[n, fan_in], rescale(ga, s * w.params().scale() as f64))?,
    ))
}

pub fn linear_f32(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, fan_in, out) = check_pair(a.dims(), w.dims())?;
    let wt = transpose(w.data(), out, fan_in);
    Tensor::from_vec(&[n, out], gemm_f32(a.data(), &wt, n, fan_in, out))
}

pub fn linear_backward_f32(gz: &Tensor, a: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, fan_in, out) = check_pair(a.dims(), w.dims())?;
    if gz.dims() != [n, out] {
        return Err(Error::DimensionMismatch(format!("output gradient {:?}, expected [{n}, {out}]", gz.dims())));
    }
    let gzt = transpose(gz.data(), n, out);
    let gw = gemm_f32(&gzt, a.data(), out, n, fan_in);
    let ga = gemm_f32(gz.data(), w.data(), n, out, fan_in);
    Ok((Tensor::from_vec(&[out, fan_in], gw)?, Tensor::from_vec(&[n, fan_in], ga)?))
}
