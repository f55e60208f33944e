//! Symmetric uniform 8-bit quantization.
//!
//! `q = round(clip(x, c) / s)` with `s = c / 127`, and `x_hat = q * s`.
//! Rounding is either nearest (ties away from zero) or stochastic, where a
//! value is rounded up with probability equal to its fractional part. The
//! stochastic mode draws from a 32-bit linear congruential generator so runs
//! are reproducible bit for bit.

use std::thread;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Largest magnitude of a quantized value. `-128` is never produced.
pub const QMAX: i32 = 127;

/// 32-bit LCG, `X <- (a X + c) mod 2^32`, with the Numerical Recipes constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LcgStream {
    state: u32,
}

impl LcgStream {
    pub const MULTIPLIER: u32 = 1_664_525;
    pub const INCREMENT: u32 = 1_013_904_223;

    pub fn new(seed: u32) -> Self {
        LcgStream { state: seed }
    }

    /// Folds a 64-bit seed into the 32-bit state.
    pub fn from_seed(seed: u64) -> Self {
        LcgStream { state: (seed as u32) ^ ((seed >> 32) as u32) }
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Advances the state once and returns it.
    pub fn next_u32(&mut self) -> u32 {
        self.state = self
            .state
            .wrapping_mul(Self::MULTIPLIER)
            .wrapping_add(Self::INCREMENT);
        self.state
    }

    /// Uniform draw in `[0, 1)`: the new state divided by `2^32`.
    pub fn next_f64(&mut self) -> f64 {
        self.next_u32() as f64 / 4_294_967_296.0
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundingMode {
    Nearest,
    Stochastic,
}

/// Clip value `c` and the derived scale `s = c / 127`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    clip: f32,
    scale: f32,
}

impl QuantParams {
    pub fn new(clip: f32) -> Result<Self> {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::QuantParams(format!("clip must be positive and finite, got {clip}")));
        }
        Ok(QuantParams { clip, scale: clip / QMAX as f32 })
    }

    /// Clip at the tensor range. An all-zero range falls back to `c = 1`,
    /// which quantizes zeros to zeros like any other clip would.
    pub fn from_max_abs(max_abs: f32) -> Result<Self> {
        if max_abs == 0.0 {
            Self::new(1.0)
        } else {
            Self::new(max_abs)
        }
    }

    pub fn clip(&self) -> f32 {
        self.clip
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

/// 8-bit payload with the parameters it was produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Shape,
    q: Vec<i8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn from_parts(dims: &[usize], q: Vec<i8>, params: QuantParams) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != q.len() {
            return Err(Error::Shape(format!("payload length {} vs shape {dims:?}", q.len())));
        }
        if q.iter().any(|&v| v == i8::MIN) {
            return Err(Error::QuantParams("payload contains -128".into()));
        }
        Ok(QuantizedTensor { shape, q, params })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn values(&self) -> &[i8] {
        &self.q
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn dequantize(&self) -> Tensor {
        let s = self.params.scale;
        let data = self.q.iter().map(|&q| q as f32 * s).collect();
        Tensor::from_vec(self.shape.dims(), data).expect("shape already validated")
    }
}

/// Quantizes a single value. `draw` must be `Some` in stochastic mode.
#[inline]
pub fn quantize_scalar(x: f32, params: QuantParams, mode: RoundingMode, draw: Option<f64>) -> i8 {
    let c = params.clip;
    let clipped = x.clamp(-c, c) as f64;
    let v = clipped / params.scale as f64;
    let r = match mode {
        RoundingMode::Nearest => v.round(),
        RoundingMode::Stochastic => {
            let floor = v.floor();
            let frac = v - floor;
            let u = draw.expect("stochastic rounding needs a draw");
            if u < frac {
                floor + 1.0
            } else {
                floor
            }
        }
    };
    r.clamp(-(QMAX as f64), QMAX as f64) as i8
}

/// Quantizes `xs` into `out`, consuming exactly one draw per element in
/// stochastic mode.
pub fn quantize_into(
    xs: &[f32],
    params: QuantParams,
    mode: RoundingMode,
    mut stream: Option<&mut LcgStream>,
    out: &mut [i8],
) -> Result<()> {
    debug_assert_eq!(xs.len(), out.len());
    if mode == RoundingMode::Stochastic && stream.is_none() {
        return Err(Error::QuantParams("stochastic rounding requires a stream".into()));
    }
    for (i, (&x, o)) in xs.iter().zip(out.iter_mut()).enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let draw = match mode {
            RoundingMode::Nearest => None,
            RoundingMode::Stochastic => stream.as_deref_mut().map(|s| s.next_f64()),
        };
        *o = quantize_scalar(x, params, mode, draw);
    }
    Ok(())
}

pub fn quantize(
    x: &Tensor,
    params: QuantParams,
    mode: RoundingMode,
    stream: Option<&mut LcgStream>,
) -> Result<QuantizedTensor> {
    let mut q = vec![0i8; x.len()];
    quantize_into(x.data(), params, mode, stream, &mut q)?;
    Ok(QuantizedTensor { shape: x.shape().clone(), q, params })
}

pub fn dequantize(qt: &QuantizedTensor) -> Tensor {
    qt.dequantize()
}

/// Quantize followed by dequantize.
pub fn fake_quantize(
    x: &Tensor,
    params: QuantParams,
    mode: RoundingMode,
    stream: Option<&mut LcgStream>,
) -> Result<Tensor> {
    Ok(quantize(x, params, mode, stream)?.dequantize())
}

fn partition_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.max(1);
    let chunk = len.div_ceil(parts);
    (0..parts)
        .map(|p| ((p * chunk).min(len), ((p + 1) * chunk).min(len)))
        .collect()
}

/// Stochastic quantization split into `parts` contiguous ranges, range `p`
/// drawing from `LcgStream::new(base_seed + p)`. `threads > 1` runs the
/// ranges concurrently; the output does not depend on `threads`.
pub fn quantize_partitioned(
    x: &Tensor,
    params: QuantParams,
    base_seed: u32,
    parts: usize,
    threads: usize,
) -> Result<QuantizedTensor> {
    let bounds = partition_bounds(x.len(), parts);
    let mut q = vec![0i8; x.len()];
    let data = x.data();

    if threads <= 1 {
        for (p, &(lo, hi)) in bounds.iter().enumerate() {
            let mut stream = LcgStream::new(base_seed.wrapping_add(p as u32));
            quantize_into(&data[lo..hi], params, RoundingMode::Stochastic, Some(&mut stream), &mut q[lo..hi])?;
        }
    } else {
        let mut slices = Vec::with_capacity(bounds.len());
        let mut rest = q.as_mut_slice();
        for &(lo, hi) in &bounds {
            let (head, tail) = rest.split_at_mut(hi - lo);
            slices.push((lo, hi, head));
            rest = tail;
        }
        let results: Vec<Result<()>> = thread::scope(|scope| {
            let handles: Vec<_> = slices
                .into_iter()
                .enumerate()
                .map(|(p, (lo, hi, out))| {
                    scope.spawn(move || {
                        let mut stream = LcgStream::new(base_seed.wrapping_add(p as u32));
                        quantize_into(&data[lo..hi], params, RoundingMode::Stochastic, Some(&mut stream), out)
                            .map_err(|e| match e {
                                Error::NonFinite { index } => Error::NonFinite { index: index + lo },
                                other => other,
                            })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("quantize worker panicked")).collect()
        });
        for r in results {
            r?;
        }
    }
    Ok(QuantizedTensor { shape: x.shape().clone(), q, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn params(c: f32) -> QuantParams {
        QuantParams::new(c).unwrap()
    }

    #[test]
    fn lcg_first_steps() {
        let mut s = LcgStream::new(0);
        assert_eq!(s.next_u32(), 1_013_904_223);
        let expected = ((1_664_525u128 * 1_013_904_223u128 + 1_013_904_223u128) % (1u128 << 32)) as u32;
        assert_eq!(s.next_u32(), expected);
    }

    #[test]
    fn lcg_draw_is_state_over_modulus() {
        let mut s = LcgStream::new(99);
        let mut probe = s;
        let u = s.next_f64();
        assert_eq!(u, probe.next_u32() as f64 / (1u64 << 32) as f64);
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn lcg_prefix_has_no_repeats() {
        let mut s = LcgStream::new(12345);
        let mut seen = HashSet::with_capacity(1 << 20);
        for _ in 0..(1 << 20) {
            assert!(seen.insert(s.next_u32()));
        }
    }

    #[test]
    fn scale_is_clip_over_127() {
        let p = params(2.54);
        assert_eq!(p.scale(), 2.54f32 / 127.0);
        assert!(QuantParams::new(0.0).is_err());
        assert!(QuantParams::new(-1.0).is_err());
        assert!(QuantParams::new(f32::NAN).is_err());
    }

    #[test]
    fn zero_and_clip_cases() {
        let p = params(127.0);
        assert_eq!(quantize_scalar(0.0, p, RoundingMode::Nearest, None), 0);
        assert_eq!(quantize_scalar(200.0, p, RoundingMode::Nearest, None), 127);
        assert_eq!(quantize_scalar(-200.0, p, RoundingMode::Nearest, None), -127);
        assert_eq!(quantize_scalar(2.5, p, RoundingMode::Nearest, None), 3);
        assert_eq!(quantize_scalar(-2.5, p, RoundingMode::Nearest, None), -3);
    }

    #[test]
    fn stochastic_rounding_of_3_4() {
        let p = params(127.0);
        let mut stream = LcgStream::new(7);
        let n = 100_000;
        let mut ups = 0usize;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let q = quantize_scalar(3.4, p, RoundingMode::Stochastic, Some(stream.next_f64()));
            assert!(q == 3 || q == 4);
            ups += (q == 4) as usize;
            sum += q as f64;
        }
        let mean = sum / n as f64;
        let sigma = (0.4f64 * 0.6).sqrt();
        assert!((mean - 3.4).abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        let p_up = ups as f64 / n as f64;
        assert!((p_up - 0.4).abs() < 0.01);
    }

    #[test]
    fn stochastic_requires_stream_and_rejects_nan() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(quantize(&x, params(2.0), RoundingMode::Stochastic, None).is_err());
        let bad = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            quantize(&bad, params(2.0), RoundingMode::Nearest, None),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn stochastic_consumes_one_draw_per_element() {
        // Grid-aligned values still advance the stream.
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, 127.0]).unwrap();
        let mut stream = LcgStream::new(5);
        quantize(&x, params(127.0), RoundingMode::Stochastic, Some(&mut stream)).unwrap();
        let mut reference = LcgStream::new(5);
        for _ in 0..3 {
            reference.next_u32();
        }
        assert_eq!(stream, reference);
    }

    #[test]
    fn dequantize_examples() {
        let qt = QuantizedTensor::from_parts(&[2], vec![127, 0], params(1.27)).unwrap();
        let x = qt.dequantize();
        assert_eq!(x.data()[0], 127.0 * (1.27f32 / 127.0));
        assert!((x.data()[0] - 1.27).abs() < 1e-6);
        assert_eq!(x.data()[1], 0.0);
    }

    #[test]
    fn nearest_roundtrip_error_within_half_step() {
        let c = 3.7f32;
        let p = params(c);
        let n = 10_000;
        let xs: Vec<f32> = (0..=n).map(|i| -c + 2.0 * c * i as f32 / n as f32).collect();
        let t = Tensor::from_vec(&[xs.len()], xs.clone()).unwrap();
        let back = fake_quantize(&t, p, RoundingMode::Nearest, None).unwrap();
        let half = p.scale() as f64 / 2.0;
        for (x, y) in xs.iter().zip(back.data()) {
            assert!(((*x as f64) - (*y as f64)).abs() <= half + 1e-7, "{x} -> {y}");
        }
    }

    #[test]
    fn partitioned_threads_match_sequential() {
        let mut rng = LcgStream::new(1);
        let data: Vec<f32> = (0..10_007).map(|_| rng.next_f32() * 4.0 - 2.0).collect();
        let t = Tensor::from_vec(&[data.len()], data).unwrap();
        let p = params(1.5);
        let seq = quantize_partitioned(&t, p, 42, 4, 1).unwrap();
        let par = quantize_partitioned(&t, p, 42, 4, 4).unwrap();
        assert_eq!(seq, par);
        // A single partition is the plain stochastic quantizer.
        let one = quantize_partitioned(&t, p, 42, 1, 1).unwrap();
        let plain = quantize(&t, p, RoundingMode::Stochastic, Some(&mut LcgStream::new(42))).unwrap();
        assert_eq!(one, plain);
    }

    proptest! {
        #[test]
        fn negation_symmetry(x in -10.0f32..10.0, c in 0.01f32..8.0) {
            let p = params(c);
            let a = quantize_scalar(x, p, RoundingMode::Nearest, None);
            let b = quantize_scalar(-x, p, RoundingMode::Nearest, None);
            prop_assert_eq!(a, -b);
        }

        #[test]
        fn requantize_is_idempotent(xs in prop::collection::vec(-10.0f32..10.0, 1..128), c in 0.01f32..8.0) {
            let p = params(c);
            let t = Tensor::from_vec(&[xs.len()], xs).unwrap();
            let q1 = quantize(&t, p, RoundingMode::Nearest, None).unwrap();
            let q2 = quantize(&q1.dequantize(), p, RoundingMode::Nearest, None).unwrap();
            prop_assert_eq!(q1, q2);
        }

        #[test]
        fn payload_stays_symmetric(xs in prop::collection::vec(-1e4f32..1e4, 1..128), c in 1e-3f32..1e3, seed in any::<u32>()) {
            let t = Tensor::from_vec(&[xs.len()], xs).unwrap();
            let q = quantize(&t, params(c), RoundingMode::Stochastic, Some(&mut LcgStream::new(seed))).unwrap();
            prop_assert!(q.values().iter().all(|&v| (-127..=127).contains(&(v as i32))));
        }

        #[test]
        fn same_seed_same_payload(xs in prop::collection::vec(-3.0f32..3.0, 1..64), seed in any::<u32>()) {
            let t = Tensor::from_vec(&[xs.len()], xs).unwrap();
            let a = quantize(&t, params(2.0), RoundingMode::Stochastic, Some(&mut LcgStream::new(seed))).unwrap();
            let b = quantize(&t, params(2.0), RoundingMode::Stochastic, Some(&mut LcgStream::new(seed))).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
