//! Integer GEMM with fused output scaling.

use super::layout::{qmax, qmin, LayoutKind, ScaleLayout};
use super::qtensor::{quantize_value, QTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_positive(s: f32, what: &str) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScale {
            value: s,
            context: what.into(),
        })
    }
}

/// `s_x / s_y`: folds the output scale into the input scale so that
/// `ȳ = s_w · s_fused · (W̄ X̄)` lands directly in output-integer units.
pub fn fuse_scales(s_x: f32, s_w: f32, s_y: f32) -> Result<f32> {
    check_positive(s_x, "input scale")?;
    check_positive(s_w, "weight scale")?;
    check_positive(s_y, "output scale")?;
    Ok(s_x / s_y)
}

/// Weight scale index for output row `n` and input column `k`.
fn weight_scale_fn(w: &QTensor) -> Result<(usize, Box<dyn Fn(usize, usize) -> usize + '_>)> {
    let cols = match w.shape() {
        [_, c] => *c,
        s => return Err(Error::shape(format!("weight must be 2-D, got {s:?}"))),
    };
    let f: Box<dyn Fn(usize, usize) -> usize> = match &w.layout().kind {
        LayoutKind::PerTensor => Box::new(|_, _| 0),
        LayoutKind::PerRow | LayoutKind::PerChannel { axis: 0 } => Box::new(|n, _| n),
        LayoutKind::PerGroup {
            axis: 1,
            group_size,
        } => {
            let g = *group_size;
            let per = cols.div_ceil(g);
            Box::new(move |n, k| n * per + k / g)
        }
        other => {
            return Err(Error::shape(format!(
                "integer GEMM needs per-tensor, per-row or per-group(axis 1) weights, got {other:?}"
            )))
        }
    };
    Ok((cols, f))
}

/// `x̄[T×K] · W̄[N×K]ᵀ` with `i32` accumulation inside each weight scale group;
/// the per-group partial sums are rescaled by `s_w · s_x` and added in
/// ascending group order. `x` must be per-tensor quantized.
pub fn int_gemm(x: &QTensor, w: &QTensor) -> Result<Tensor> {
    let (t, k) = match x.shape() {
        [t, k] => (*t, *k),
        s => return Err(Error::shape(format!("activation must be 2-D, got {s:?}"))),
    };
    if x.layout().kind != LayoutKind::PerTensor {
        return Err(Error::shape("int_gemm activation must be per-tensor"));
    }
    let s_x = x.layout().scales[0];
    let (kw, scale_of) = weight_scale_fn(w)?;
    if kw != k {
        return Err(Error::shape(format!("int_gemm inner dims {k} vs {kw}")));
    }
    let n = w.shape()[0];
    let xv = x.values();
    let wv = w.values();
    let ws = &w.layout().scales;
    // contiguous runs of equal scale index per weight row
    let segments: Vec<Vec<(usize, usize, usize)>> = (0..n)
        .map(|j| {
            let mut segs = Vec::new();
            let mut start = 0;
            for kk in 1..=k {
                if kk == k || scale_of(j, kk) != scale_of(j, start) {
                    segs.push((start, kk, scale_of(j, start)));
                    start = kk;
                }
            }
            segs
        })
        .collect();
    let mut out = vec![0.0f32; t * n];
    for i in 0..t {
        let xr = &xv[i * k..(i + 1) * k];
        for j in 0..n {
            let wr = &wv[j * k..(j + 1) * k];
            let mut total = 0.0f32;
            for &(a, b, g) in &segments[j] {
                let acc: i32 = xr[a..b]
                    .iter()
                    .zip(&wr[a..b])
                    .map(|(&x, &w)| x as i32 * w as i32)
                    .sum();
                total += acc as f32 * ws[g];
            }
            out[i * n + j] = total * s_x;
        }
    }
    Tensor::new(vec![t, n], out)
}

/// Integer GEMM whose result is requantized straight to `bits` with output
/// scale `s_y`, using the fused factor `s_w · (s_x / s_y)`.
pub fn int_gemm_requant(x: &QTensor, w: &QTensor, s_y: f32, bits: u32) -> Result<QTensor> {
    if w.layout().kind != LayoutKind::PerTensor && w.layout().kind != LayoutKind::PerRow {
        return Err(Error::shape(
            "requantizing GEMM needs per-tensor or per-row weight scales",
        ));
    }
    let s_x = x.layout().scales[0];
    let fused = fuse_scales(s_x, w.layout().scales[0], s_y)?;
    // unit input scale gives raw integer dot products per weight group
    let raw = {
        let unit = QTensor::from_parts(
            x.shape().to_vec(),
            x.bits(),
            x.payload().clone(),
            ScaleLayout::per_tensor(1.0),
        )?;
        let wunit = QTensor::from_parts(
            w.shape().to_vec(),
            w.bits(),
            w.payload().clone(),
            ScaleLayout::new(w.layout().kind.clone(), vec![1.0; w.layout().scales.len()]),
        )?;
        int_gemm(&unit, &wunit)?
    };
    let n = w.shape()[0];
    let per_row = w.layout().kind == LayoutKind::PerRow;
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let values: Vec<i8> = raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, &acc)| {
            let s_w = if per_row {
                w.layout().scales[i % n]
            } else {
                w.layout().scales[0]
            };
            quantize_value(acc * s_w * fused, 1.0, lo, hi)
        })
        .collect();
    let payload = if bits == 8 {
        super::qtensor::Payload::I8(values)
    } else {
        super::qtensor::Payload::U4Packed(super::qtensor::pack_nibbles(&values, n))
    };
    QTensor::from_parts(
        raw.shape().to_vec(),
        bits,
        payload,
        ScaleLayout::per_tensor(s_y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::qtensor::{dequantize, quantize};
    use crate::rng::Rng;
    use crate::tensor::{linear, metrics};

    #[test]
    fn fuse_scales_examples() {
        assert_eq!(fuse_scales(0.02, 0.1, 0.04).unwrap(), 0.5);
        assert_eq!(fuse_scales(0.3, 0.1, 0.3).unwrap(), 1.0);
        assert!(fuse_scales(0.0, 1.0, 1.0).is_err());
        assert!(fuse_scales(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn int_gemm_matches_dequantized_float() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(&[6, 32], |_| rng.normal());
        let w = Tensor::from_fn(&[10, 32], |_| rng.normal() * 0.2);
        let xl = ScaleLayout::fit(&x, LayoutKind::PerTensor, 8).unwrap();
        let wl = ScaleLayout::fit(
            &w,
            LayoutKind::PerGroup {
                axis: 1,
                group_size: 8,
            },
            4,
        )
        .unwrap();
        let xq = quantize(&x, &xl, 8).unwrap();
        let wq = quantize(&w, &wl, 4).unwrap();
        let a = int_gemm(&xq, &wq).unwrap();
        let b = linear(&dequantize(&xq), &dequantize(&wq)).unwrap();
        assert!(metrics::rel_l2(a.data(), b.data()) < 1e-5);
    }

    #[test]
    fn fused_gemm_close_to_float() {
        let mut rng = Rng::new(9);
        let x = Tensor::from_fn(&[16, 16], |_| rng.normal());
        let w = Tensor::from_fn(&[16, 16], |_| rng.normal());
        let y = linear(&x, &w).unwrap();
        let s_y = crate::quant::compute_scale(y.data(), 8).unwrap();
        let xq = quantize(
            &x,
            &ScaleLayout::fit(&x, LayoutKind::PerTensor, 8).unwrap(),
            8,
        )
        .unwrap();
        let wq = quantize(&w, &ScaleLayout::fit(&w, LayoutKind::PerRow, 8).unwrap(), 8).unwrap();
        let yq = int_gemm_requant(&xq, &wq, s_y, 8).unwrap();
        let rel = metrics::rel_l2(dequantize(&yq).data(), y.data());
        assert!(rel <= 0.02, "relative error {rel}");
    }

    #[test]
    fn unit_scales_integer_values_are_exact() {
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.0, 5.0, -7.0]]);
        let w = Tensor::from_rows(&[&[2.0, 1.0, -1.0]]);
        let xq = quantize(&x, &ScaleLayout::per_tensor(1.0), 8).unwrap();
        let wq = quantize(&w, &ScaleLayout::per_tensor(1.0), 8).unwrap();
        assert_eq!(int_gemm(&xq, &wq).unwrap(), linear(&x, &w).unwrap());
    }
}
