//! Convolution lowered to matrix products through im2col.
//!
//! Layouts are NCHW for activations and `[K, C / groups, kH, kW]` for
//! weights. Grouped convolution covers the depthwise case (`groups == C`).

use crate::error::{Error, Result};
use crate::kernels::gemm::{self, Int8Matrix, MAX_REDUCTION};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input: [usize; 4],
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, channels, height, width] = input;
        let g = ConvGeometry {
            batch,
            channels,
            height,
            width,
            out_channels,
            kernel_h: kernel[0],
            kernel_w: kernel[1],
            stride,
            padding,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.batch, self.channels, self.height, self.width, self.out_channels, self.kernel_h, self.kernel_w];
        if dims.contains(&0) || self.stride == 0 || self.groups == 0 {
            return Err(Error::Geometry(format!("zero extent in {self:?}")));
        }
        if self.channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {} must divide channels {} and out_channels {}",
                self.groups, self.channels, self.out_channels
            )));
        }
        if self.height + 2 * self.padding < self.kernel_h || self.width + 2 * self.padding < self.kernel_w {
            return Err(Error::Geometry(format!("kernel larger than padded input in {self:?}")));
        }
        Ok(())
    }

    /// Same geometry with a different batch size.
    pub fn with_batch(&self, batch: usize) -> Self {
        ConvGeometry { batch, ..*self }
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.channels / self.groups, self.kernel_h, self.kernel_w]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Length of one receptive field within a group.
    pub fn patch_len(&self) -> usize {
        self.channels_per_group() * self.kernel_h * self.kernel_w
    }

    /// Number of output positions, `N * H' * W'`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.batch * self.channels * self.height * self.width {
            return Err(Error::DimensionMismatch(format!("input of {len} values for {self:?}")));
        }
        Ok(())
    }
}

/// Lowers an NCHW input to a `(C * kH * kW) x (N * H' * W')` matrix whose
/// column `j` is the receptive field of output position `j`.
pub fn im2col<T: Copy + Default>(x: &[T], geom: &ConvGeometry) -> Result<Vec<T>> {
    geom.validate()?;
    geom.check_input(x.len())?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let p = geom.positions();
    let rows = geom.channels * kh * kw;
    let mut out = vec![T::default(); rows * p];
    let plane = geom.height * geom.width;
    for c in 0..geom.channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let orow = &mut out[r * p..(r + 1) * p];
                for b in 0..geom.batch {
                    let src = &x[(b * geom.channels + c) * plane..(b * geom.channels + c + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        let base = (b * oh + oy) * ow;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix >= 0 && ix < geom.width as isize {
                                orow[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatters a column matrix back onto the input grid, summing overlaps.
pub fn col2im<T>(cols: &[T], geom: &ConvGeometry) -> Result<Vec<T>>
where
    T: Copy + Default + std::ops::AddAssign,
{
    geom.validate()?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let p = geom.positions();
    if cols.len() != geom.channels * kh * kw * p {
        return Err(Error::DimensionMismatch(format!("{} column values for {geom:?}", cols.len())));
    }
    let plane = geom.height * geom.width;
    let mut out = vec![T::default(); geom.batch * geom.channels * plane];
    for c in 0..geom.channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let crow = &cols[r * p..(r + 1) * p];
                for b in 0..geom.batch {
                    let dst = &mut out[(b * geom.channels + c) * plane..(b * geom.channels + c + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix >= 0 && ix < geom.width as isize {
                                dst[iy as usize * geom.width + ix as usize] += crow[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Rows of the column matrix belonging to group `g`.
fn group_block<'a, T>(cols: &'a [T], geom: &ConvGeometry, g: usize) -> &'a [T] {
    let len = geom.patch_len() * geom.positions();
    &cols[g * len..(g + 1) * len]
}

fn weight_block<'a, T>(w: &'a [T], geom: &ConvGeometry, g: usize) -> &'a [T] {
    let len = geom.out_per_group() * geom.patch_len();
    &w[g * len..(g + 1) * len]
}

/// Gathers the output-gradient rows of group `g` as a `K_g x P` matrix.
fn gather_output<T: Copy + Default>(gz: &[T], geom: &ConvGeometry, g: usize) -> Vec<T> {
    let kpg = geom.out_per_group();
    let hw = geom.out_h() * geom.out_w();
    let p = geom.positions();
    let mut out = vec![T::default(); kpg * p];
    for kk in 0..kpg {
        let ch = g * kpg + kk;
        for b in 0..geom.batch {
            let src = &gz[(b * geom.out_channels + ch) * hw..(b * geom.out_channels + ch + 1) * hw];
            out[kk * p + b * hw..kk * p + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`gather_output`]: writes a `K_g x P` block into NCHW.
fn scatter_output<T: Copy>(block: &[T], geom: &ConvGeometry, g: usize, out: &mut [T]) {
    let kpg = geom.out_per_group();
    let hw = geom.out_h() * geom.out_w();
    let p = geom.positions();
    for kk in 0..kpg {
        let ch = g * kpg + kk;
        for b in 0..geom.batch {
            out[(b * geom.out_channels + ch) * hw..(b * geom.out_channels + ch + 1) * hw]
                .copy_from_slice(&block[kk * p + b * hw..kk * p + (b + 1) * hw]);
        }
    }
}

/// `A * Bt^T` over signed bytes with an exact 64-bit result, splitting the
/// reduction into pieces that respect the `i32` accumulation bound.
pub(crate) fn gemm_nt_exact(a: &[i8], m: usize, bt: &[i8], n: usize, k: usize) -> Result<Vec<i64>> {
    if k <= MAX_REDUCTION {
        let am = Int8Matrix::new(m, k, a.to_vec())?;
        let bm = Int8Matrix::new(n, k, bt.to_vec())?;
        return Ok(gemm::gemm_i8_nt(&am, &bm)?.into_data().into_iter().map(i64::from).collect());
    }
    let mut acc = vec![0i64; m * n];
    let mut lo = 0;
    while lo < k {
        let hi = (lo + MAX_REDUCTION).min(k);
        let w = hi - lo;
        let slice = |src: &[i8], rows: usize| -> Vec<i8> {
            (0..rows).flat_map(|r| src[r * k + lo..r * k + hi].iter().copied()).collect()
        };
        let am = Int8Matrix::new(m, w, slice(a, m))?;
        let bm = Int8Matrix::new(n, w, slice(bt, n))?;
        for (o, v) in acc.iter_mut().zip(gemm::gemm_i8_nt(&am, &bm)?.into_data()) {
            *o += v as i64;
        }
        lo = hi;
    }
    Ok(acc)
}

fn check_dims(t: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if t != expected {
        return Err(Error::DimensionMismatch(format!("{what} is {t:?}, expected {expected:?}")));
    }
    Ok(())
}

/// Integer convolution: `z = s_a * s_w * (W_q (*) a_q)` with exact `i32`
/// accumulation. The final rescale is the only floating-point step.
pub fn conv2d_q(a: &QuantizedTensor, w: &QuantizedTensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.validate()?;
    check_dims(a.dims(), &geom.input_dims(), "activation")?;
    check_dims(w.dims(), &geom.weight_dims(), "weight")?;
    if geom.patch_len() > MAX_REDUCTION {
        return Err(Error::AccumulationOverflow { k: geom.patch_len(), max: MAX_REDUCTION });
    }
    let scale = a.params().scale() as f64 * w.params().scale() as f64;
    let cols = im2col(a.values(), geom)?;
    let (p, patch, kpg) = (geom.positions(), geom.patch_len(), geom.out_per_group());
    let mut out = vec![0.0f32; geom.output_dims().iter().product()];
    for g in 0..geom.groups {
        let rows = gemm::transpose(group_block(&cols, geom, g), patch, p);
        let wm = Int8Matrix::new(kpg, patch, weight_block(w.values(), geom, g).to_vec())?;
        let rm = Int8Matrix::new(p, patch, rows)?;
        let acc = gemm::gemm_i8_nt(&wm, &rm)?;
        let block: Vec<f32> = acc.data().iter().map(|&v| (scale * v as f64) as f32).collect();
        scatter_output(&block, geom, g, &mut out);
    }
    Tensor::from_vec(&geom.output_dims(), out)
}

/// Integer backward pass: `g_W` from quantized `g_z` and `a`, `g_a` from
/// quantized `g_z` and `W` (via col2im). Both are rescaled to `f32`.
pub fn conv2d_backward_q(
    gz: &QuantizedTensor,
    a: &QuantizedTensor,
    w: &QuantizedTensor,
    geom: &ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    geom.validate()?;
    check_dims(gz.dims(), &geom.output_dims(), "output gradient")?;
    check_dims(a.dims(), &geom.input_dims(), "activation")?;
    check_dims(w.dims(), &geom.weight_dims(), "weight")?;
    let (p, patch, kpg) = (geom.positions(), geom.patch_len(), geom.out_per_group());
    if kpg > MAX_REDUCTION {
        return Err(Error::AccumulationOverflow { k: kpg, max: MAX_REDUCTION });
    }
    let s_gw = gz.params().scale() as f64 * a.params().scale() as f64;
    let s_ga = gz.params().scale() as f64 * w.params().scale() as f64;
    let cols = im2col(a.values(), geom)?;

    let mut gw = Vec::with_capacity(geom.out_channels * patch);
    let mut gcols = vec![0i64; geom.channels * geom.kernel_h * geom.kernel_w * p];
    for g in 0..geom.groups {
        let gz_g = gather_output(gz.values(), geom, g);
        let acc = gemm_nt_exact(&gz_g, kpg, group_block(&cols, geom, g), patch, p)?;
        gw.extend(acc.iter().map(|&v| (s_gw * v as f64) as f32));

        let wt = gemm::transpose(weight_block(w.values(), geom, g), kpg, patch);
        let gzt = gemm::transpose(&gz_g, kpg, p);
        let acc = gemm_nt_exact(&wt, patch, &gzt, p, kpg)?;
        gcols[g * patch * p..(g + 1) * patch * p].copy_from_slice(&acc);
    }
    let ga: Vec<f32> = col2im(&gcols, geom)?.into_iter().map(|v| (s_ga * v as f64) as f32).collect();
    Ok((
        Tensor::from_vec(&geom.weight_dims(), gw)?,
        Tensor::from_vec(&geom.input_dims(), ga)?,
    ))
}

/// Float convolution through the same lowering.
pub fn conv2d_f32(x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.validate()?;
    check_dims(x.dims(), &geom.input_dims(), "input")?;
    check_dims(w.dims(), &geom.weight_dims(), "weight")?;
    let cols = im2col(x.data(), geom)?;
    let (p, patch, kpg) = (geom.positions(), geom.patch_len(), geom.out_per_group());
    let mut out = vec![0.0f32; geom.output_dims().iter().product()];
    for g in 0..geom.groups {
        let block = gemm::gemm_f32(weight_block(w.data(), geom, g), group_block(&cols, geom, g), kpg, patch, p);
        scatter_output(&block, geom, g, &mut out);
    }
    Tensor::from_vec(&geom.output_dims(), out)
}

pub fn conv2d_backward_f32(gz: &Tensor, x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Result<(Tensor, Tensor)> {
    geom.validate()?;
    check_dims(gz.dims(), &geom.output_dims(), "output gradient")?;
    check_dims(x.dims(), &geom.input_dims(), "input")?;
    check_dims(w.dims(), &geom.weight_dims(), "weight")?;
    let (p, patch, kpg) = (geom.positions(), geom.patch_len(), geom.out_per_group());
    let cols = im2col(x.data(), geom)?;
    let mut gw = Vec::with_capacity(geom.out_channels * patch);
    let mut gcols = vec![0.0f32; geom.channels * geom.kernel_h * geom.kernel_w * p];
    for g in 0..geom.groups {
        let gz_g = gather_output(gz.data(), geom, g);
        let rows = gemm::transpose(group_block(&cols, geom, g), patch, p);
        gw.extend(gemm::gemm_f32(&gz_g, &rows, kpg, p, patch));
        let wt = gemm::transpose(weight_block(w.data(), geom, g), kpg, patch);
        let block = gemm::gemm_f32(&wt, &gz_g, patch, kpg, p);
        gcols[g * patch * p..(g + 1) * patch * p].copy_from_slice(&block);
    }
    let gx = col2im(&gcols, geom)?;
    Ok((Tensor::from_vec(&geom.weight_dims(), gw)?, Tensor::from_vec(&geom.input_dims(), gx)?))
}
