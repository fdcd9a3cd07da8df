//! GPTQ: column-by-column weight rounding that pushes each column's rounding
//! error onto the not-yet-quantized columns through the inverse Hessian of the
//! layer's calibration inputs.

use nalgebra::DMatrix;

use super::layout::{check_bits, qmax, qmin, scale_from_max, LayoutKind, ScaleLayout};
use super::qtensor::{quantize, quantize_value, Payload, QTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DAMP_RATIO: f32 = 0.01;

fn group_layout(in_features: usize, group_size: usize) -> LayoutKind {
    LayoutKind::PerGroup {
        axis: 1,
        group_size: group_size.clamp(1, in_features.max(1)),
    }
}

/// Round-to-nearest with per-group scales; the GPTQ baseline.
pub fn rtn_quantize_weight(w: &Tensor, bits: u32, group_size: usize) -> Result<QTensor> {
    let (_, cols) = w.dims2()?;
    let layout = ScaleLayout::fit(w, group_layout(cols, group_size), bits)?;
    quantize(w, &layout, bits)
}

/// `H = 2·XᵀX + damp·I` with `damp = damp_ratio · mean(diag(2·XᵀX))`.
fn damped_hessian(calib: &Tensor, in_features: usize, damp_ratio: f32) -> Result<DMatrix<f64>> {
    let (samples, cols) = calib.dims2()?;
    if cols != in_features {
        return Err(Error::shape(format!(
            "calibration width {cols} vs weight in-features {in_features}"
        )));
    }
    if samples == 0 {
        return Err(Error::Calibration("GPTQ needs at least one sample".into()));
    }
    let x = DMatrix::from_row_slice(samples, cols, calib.data()).map(|v| v as f64);
    let mut h = x.transpose() * &x * 2.0;
    let mean_diag = h.diagonal().mean();
    let damp = damp_ratio as f64 * mean_diag;
    for i in 0..cols {
        h[(i, i)] += damp;
    }
    Ok(h)
}

/// Upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`).
fn inverse_hessian_factor(h: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if let Some(col) = (0..n).find(|&i| h[(i, i)] <= 0.0) {
        return Err(Error::SingularHessian { column: col });
    }
    let chol = h.cholesky().ok_or(Error::SingularHessian { column: 0 })?;
    let hinv = chol.inverse();
    let chol_inv = hinv
        .cholesky()
        .ok_or(Error::SingularHessian { column: 0 })?;
    Ok(chol_inv.l().transpose())
}

/// GPTQ-quantize `w[out×in]` against `calib_inputs[samples×in]`.
///
/// Columns are processed left to right. When a column opens a new group, each
/// row's scale for that group is computed from the current (error-updated)
/// weights.
pub fn gptq_quantize_weight(
    w: &Tensor,
    calib_inputs: &Tensor,
    bits: u32,
    group_size: usize,
    damp_ratio: f32,
) -> Result<QTensor> {
    check_bits(bits)?;
    let (rows, cols) = w.dims2()?;
    let h = damped_hessian(calib_inputs, cols, damp_ratio)?;
    let u = inverse_hessian_factor(h)?;

    let LayoutKind::PerGroup { group_size: gs, .. } = group_layout(cols, group_size) else {
        unreachable!()
    };
    let groups = cols.div_ceil(gs);
    let mut wk: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut scales = vec![1.0f32; rows * groups];
    let mut codes = vec![0i8; rows * cols];
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);

    for i in 0..cols {
        let g = i / gs;
        if i % gs == 0 {
            let end = (i + gs).min(cols);
            for r in 0..rows {
                let m = wk[r * cols + i..r * cols + end]
                    .iter()
                    .fold(0.0f32, |m, &v| m.max((v as f32).abs()));
                scales[r * groups + g] = scale_from_max(m, bits)?;
            }
        }
        let d = u[(i, i)];
        for r in 0..rows {
            let s = scales[r * groups + g];
            let cur = wk[r * cols + i];
            let q = quantize_value(cur as f32, s, lo, hi);
            codes[r * cols + i] = q;
            let err = (cur - q as f64 * s as f64) / d;
            if err != 0.0 {
                let row = &mut wk[r * cols..(r + 1) * cols];
                for j in i + 1..cols {
                    row[j] -= err * u[(i, j)];
                }
            }
        }
    }

    let payload = if bits == 8 {
        Payload::I8(codes)
    } else {
        Payload::U4Packed(super::qtensor::pack_nibbles(&codes, cols))
    };
    QTensor::from_parts(
        vec![rows, cols],
        bits,
        payload,
        ScaleLayout::new(group_layout(cols, group_size), scales),
    )
}

/// GPTQ with round-to-nearest fallback; the flag reports whether the fallback fired.
pub fn gptq_or_rtn(
    w: &Tensor,
    calib_inputs: &Tensor,
    bits: u32,
    group_size: usize,
    damp_ratio: f32,
) -> Result<(QTensor, bool)> {
    match gptq_quantize_weight(w, calib_inputs, bits, group_size, damp_ratio) {
        Ok(q) => Ok((q, false)),
        Err(Error::SingularHessian { .. }) => Ok((rtn_quantize_weight(w, bits, group_size)?, true)),
        Err(e) => Err(e),
    }
}

/// `‖W Xᵀ − Ŵ Xᵀ‖²_F`, the layer-output proxy loss GPTQ minimizes.
pub fn proxy_loss(w: &Tensor, w_hat: &Tensor, calib: &Tensor) -> Result<f64> {
    let a = crate::tensor::linear(calib, w)?;
    let b = crate::tensor::linear(calib, w_hat)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum())
}
