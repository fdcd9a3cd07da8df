//! Symmetric uniform quantization.
//!
//! `q = clamp(round_half_even(x / s), -2^(b-1), 2^(b-1) - 1)` with
//! `s = max|x| / (2^(b-1) - 1)`, under several scale layouts, plus
//! integer GEMM with fused scales and GPTQ weight rounding.

mod gemm;
mod gptq;
mod layout;
mod qtensor;

pub use gemm::{fuse_scales, int_gemm, int_gemm_requant};
pub use gptq::{
    gptq_or_rtn, gptq_quantize_weight, proxy_loss, rtn_quantize_weight, DEFAULT_DAMP_RATIO,
};
pub use layout::{compute_scale, qmax, qmin, scale_from_max, LayoutKind, ScaleLayout};
pub(crate) use qtensor::quantize_value;
pub use qtensor::{
    dequantize, fake_quantize, pack_nibbles, payload_len, quantize, unpack_nibbles, Payload,
    QTensor,
};

/// Nearest-rank percentile of `|values|` (`pct` in `(0, 100]`).
pub fn abs_percentile(values: &[f32], pct: f32) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f32> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f32::total_cmp);
    let exact = pct.clamp(0.0, 100.0) as f64 / 100.0 * v.len() as f64;
    let rank = (exact * (1.0 - 1e-6)).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
