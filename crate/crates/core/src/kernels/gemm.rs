//! Integer and float matrix products.
//!
//! The integer kernel is written in dot-product form over a transposed
//! right-hand operand so that its innermost unit is a four-wide
//! `i8 x i8 -> i32` multiply-accumulate (the semantics of DP4A). Integer
//! addition is associative, so blocking and threading never change results.

use std::thread;

use crate::error::{Error, Result};
use crate::quant::{self, LcgStream, QuantParams, RoundingMode};

/// Largest reduction length for which an `i32` accumulator cannot overflow:
/// `127 * 127 * K < 2^31`.
pub const MAX_REDUCTION: usize = 130_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int8Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl Int8Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("{rows}x{cols} matrix")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if data.contains(&i8::MIN) {
            return Err(Error::QuantParams("matrix contains -128".into()));
        }
        Ok(Int8Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Int8Matrix {
        Int8Matrix { rows: self.cols, cols: self.rows, data: transpose(&self.data, self.rows, self.cols) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl Int32Matrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.cols + j]
    }
}

/// Row-major transpose of an `rows x cols` buffer.
pub fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

/// Four-element signed byte dot product accumulated into `acc`.
#[inline(always)]
pub fn dp4a(a: [i8; 4], b: [i8; 4], acc: i32) -> i32 {
    acc + a[0] as i32 * b[0] as i32
        + a[1] as i32 * b[1] as i32
        + a[2] as i32 * b[2] as i32
        + a[3] as i32 * b[3] as i32
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    let mut acc = 0i32;
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc = dp4a([x[0], x[1], x[2], x[3]], [y[0], y[1], y[2], y[3]], acc);
    }
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x as i32 * y as i32;
    }
    acc
}

/// Blocking and threading knobs. Results are identical for every setting.
#[derive(Debug, Clone, Copy)]
pub struct GemmOptions {
    pub row_block: usize,
    pub col_block: usize,
    pub threads: usize,
}

impl Default for GemmOptions {
    fn default() -> Self {
        GemmOptions { row_block: 4, col_block: 64, threads: 1 }
    }
}

fn check_reduction(k: usize) -> Result<()> {
    if k > MAX_REDUCTION {
        return Err(Error::AccumulationOverflow { k, max: MAX_REDUCTION });
    }
    Ok(())
}

fn gemm_nt_rows(a: &[i8], bt: &[i8], k: usize, n: usize, out: &mut [i32], opts: GemmOptions) {
    let m = out.len() / n;
    let rb = opts.row_block.max(1);
    let cb = opts.col_block.max(1);
    for i0 in (0..m).step_by(rb) {
        for j0 in (0..n).step_by(cb) {
            for i in i0..(i0 + rb).min(m) {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in j0..(j0 + cb).min(n) {
                    orow[j] = dot_i8(arow, &bt[j * k..(j + 1) * k]);
                }
            }
        }
    }
}

/// `C = A * Bt^T` where both operands are stored with the reduction
/// dimension contiguous (`A: m x k`, `Bt: n x k`).
pub fn gemm_i8_nt_with(a: &Int8Matrix, bt: &Int8Matrix, opts: GemmOptions) -> Result<Int32Matrix> {
    if a.cols != bt.cols {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B^T is {}x{}",
            a.rows, a.cols, bt.rows, bt.cols
        )));
    }
    check_reduction(a.cols)?;
    let (m, k, n) = (a.rows, a.cols, bt.rows);
    let mut out = vec![0i32; m * n];
    let threads = opts.threads.max(1).min(m);
    if threads <= 1 {
        gemm_nt_rows(&a.data, &bt.data, k, n, &mut out, opts);
    } else {
        let rows_per = m.div_ceil(threads);
        thread::scope(|scope| {
            for (t, chunk) in out.chunks_mut(rows_per * n).enumerate() {
                let lo = t * rows_per;
                let rows = chunk.len() / n;
                let a_part = &a.data[lo * k..(lo + rows) * k];
                let bt = &bt.data;
                scope.spawn(move || gemm_nt_rows(a_part, bt, k, n, chunk, opts));
            }
        });
    }
    Ok(Int32Matrix { rows: m, cols: n, data: out })
}

pub fn gemm_i8_nt(a: &Int8Matrix, bt: &Int8Matrix) -> Result<Int32Matrix> {
    gemm_i8_nt_with(a, bt, GemmOptions::default())
}

/// Exact `C = A * B` over signed bytes with 32-bit accumulation.
pub fn gemm_i8(a: &Int8Matrix, b: &Int8Matrix) -> Result<Int32Matrix> {
    gemm_i8_with(a, b, GemmOptions::default())
}

pub fn gemm_i8_with(a: &Int8Matrix, b: &Int8Matrix, opts: GemmOptions) -> Result<Int32Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    check_reduction(a.cols)?;
    gemm_i8_nt_with(a, &b.transpose(), opts)
}

/// Quantizes the float left operand row by row while feeding the product,
/// without materializing the whole quantized matrix. Stream consumption is
/// row-major, so the result equals `quantize` followed by `gemm_i8_nt`.
pub fn gemm_quantize_fused_nt(
    a: &[f32],
    m: usize,
    params: QuantParams,
    mode: RoundingMode,
    mut stream: Option<&mut LcgStream>,
    bt: &Int8Matrix,
) -> Result<Int32Matrix> {
    let k = bt.cols;
    if m == 0 || a.len() != m * k {
        return Err(Error::DimensionMismatch(format!("{} values for {m}x{k}", a.len())));
    }
    check_reduction(k)?;
    let n = bt.rows;
    let mut row = vec![0i8; k];
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        quant::quantize_into(&a[i * k..(i + 1) * k], params, mode, stream.as_deref_mut(), &mut row)?;
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot_i8(&row, bt.row(j));
        }
    }
    Ok(Int32Matrix { rows: m, cols: n, data: out })
}

/// Float `C = A * B` (`A: m x k`, `B: k x n`) in broadcast-accumulate order.
pub fn gemm_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[i8]) -> Int8Matrix {
        Int8Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn naive(a: &Int8Matrix, b: &Int8Matrix) -> Vec<i32> {
        let mut out = vec![0i32; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0i32;
                for p in 0..a.cols() {
                    s += a.data()[i * a.cols() + p] as i32 * b.data()[p * b.cols() + j] as i32;
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, rng: &mut LcgStream) -> Int8Matrix {
        let data = (0..rows * cols).map(|_| (rng.next_u32() % 255) as i32 - 127).map(|v| v as i8).collect();
        Int8Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn two_by_two() {
        let c = gemm_i8(&mat(2, 2, &[1, 2, 3, 4]), &mat(2, 2, &[5, 6, 7, 8])).unwrap();
        assert_eq!(c.data(), &[19, 22, 43, 50]);
    }

    #[test]
    fn saturated_dot() {
        let c = gemm_i8(&mat(1, 4, &[127; 4]), &mat(4, 1, &[127; 4])).unwrap();
        assert_eq!(c.data(), &[64516]);
    }

    #[test]
    fn random_16_matches_triple_loop() {
        let mut rng = LcgStream::new(11);
        for _ in 0..20 {
            let a = random(16, 16, &mut rng);
            let b = random(16, 16, &mut rng);
            assert_eq!(gemm_i8(&a, &b).unwrap().data(), naive(&a, &b).as_slice());
        }
    }

    #[test]
    fn blocking_and_threads_do_not_change_results() {
        let mut rng = LcgStream::new(5);
        let a = random(37, 53, &mut rng);
        let b = random(53, 29, &mut rng);
        let reference = gemm_i8(&a, &b).unwrap();
        for (rb, cb, threads) in [(1, 1, 1), (3, 7, 2), (16, 128, 3), (64, 5, 8)] {
            let opts = GemmOptions { row_block: rb, col_block: cb, threads };
            assert_eq!(gemm_i8_with(&a, &b, opts).unwrap(), reference);
        }
    }

    #[test]
    fn dimension_and_overflow_errors() {
        assert!(matches!(
            gemm_i8(&mat(1, 2, &[1, 2]), &mat(3, 1, &[1, 2, 3])),
            Err(Error::DimensionMismatch(_))
        ));
        let k = MAX_REDUCTION + 1;
        let a = Int8Matrix::new(1, k, vec![1; k]).unwrap();
        let b = Int8Matrix::new(k, 1, vec![1; k]).unwrap();
        assert!(matches!(gemm_i8(&a, &b), Err(Error::AccumulationOverflow { .. })));
        assert!(Int8Matrix::new(1, 1, vec![-128]).is_err());
    }

    #[test]
    fn fused_equals_unfused() {
        let mut rng = LcgStream::new(9);
        let (m, k, n) = (7, 1029, 5);
        let a: Vec<f32> = (0..m * k).map(|_| rng.next_f32() * 6.0 - 3.0).collect();
        let bt = random(n, k, &mut rng);
        let params = QuantParams::new(2.5).unwrap();
        for mode in [RoundingMode::Nearest, RoundingMode::Stochastic] {
            let mut s1 = LcgStream::new(77);
            let mut s2 = LcgStream::new(77);
            let fused = gemm_quantize_fused_nt(&a, m, params, mode, Some(&mut s1), &bt).unwrap();
            let t = crate::tensor::Tensor::from_vec(&[m, k], a.clone()).unwrap();
            let q = quant::quantize(&t, params, mode, Some(&mut s2)).unwrap();
            let qa = Int8Matrix::new(m, k, q.values().to_vec()).unwrap();
            assert_eq!(fused, gemm_i8_nt(&qa, &bt).unwrap());
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn float_gemm_small() {
        let c = gemm_f32(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }
}
