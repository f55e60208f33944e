//! CPU integer kernels and their float counterparts.

pub mod conv;
pub mod gemm;
pub mod linear;

pub use conv::{col2im, conv2d_backward_f32, conv2d_backward_q, conv2d_f32, conv2d_q, im2col, ConvGeometry};
pub use gemm::{
    dp4a, gemm_f32, gemm_i8, gemm_i8_nt, gemm_i8_nt_with, gemm_i8_with, gemm_quantize_fused_nt, GemmOptions,
    Int32Matrix, Int8Matrix, MAX_REDUCTION,
};
pub use linear::{linear_backward_f32, linear_backward_q, linear_f32, linear_q};
