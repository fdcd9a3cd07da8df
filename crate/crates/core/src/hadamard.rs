//! Walsh–Hadamard transforms in Sylvester order and their offline fusion
//! into projection weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{qmax, qmin, Payload, QTensor, ScaleLayout};
use crate::ssm::{SsmBlockWeights, REWRITE_HADAMARD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    /// Multiply by `1/√n` so the transform is orthonormal.
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HadamardPlan {
    pub n: usize,
    pub normalize: Normalize,
    pub fused_output_scale: Option<f32>,
}

impl HadamardPlan {
    pub fn new(n: usize, normalize: Normalize) -> Result<Self> {
        check_pow2(n)?;
        Ok(Self {
            n,
            normalize,
            fused_output_scale: None,
        })
    }

    pub fn with_output_scale(mut self, s_y: f32) -> Self {
        self.fused_output_scale = Some(s_y);
        self
    }

    fn factor(&self) -> Option<f32> {
        match self.normalize {
            Normalize::None => None,
            Normalize::InvSqrt => Some(1.0 / (self.n as f32).sqrt()),
        }
    }

    fn apply_row(&self, row: &mut [f32]) {
        fwht_in_place(row);
        if let Some(f) = self.factor() {
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
}

pub fn check_pow2(n: usize) -> Result<()> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(n))
    }
}

/// Unnormalized in-place butterfly; `row.len()` must be a power of two.
pub(crate) fn fwht_in_place(row: &mut [f32]) {
    let n = row.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let a = row[j];
                let b = row[j + h];
                row[j] = a + b;
                row[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Dense `±1` Sylvester matrix, row-major: `H[i][j] = (−1)^popcount(i & j)`.
pub fn sylvester_matrix(n: usize) -> Result<Vec<i32>> {
    check_pow2(n)?;
    Ok((0..n * n)
        .map(|k| {
            if ((k / n) & (k % n)).count_ones().is_multiple_of(2) {
                1
            } else {
                -1
            }
        })
        .collect())
}

/// Transform every row along the last axis.
pub fn fwht(v: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    check_pow2(plan.n)?;
    if v.last_dim() != plan.n {
        return Err(Error::shape(format!(
            "fwht of size {} on last dim {}",
            plan.n,
            v.last_dim()
        )));
    }
    let mut out = v.clone();
    if plan.n > 0 {
        out.data_mut()
            .chunks_mut(plan.n)
            .for_each(|row| plan.apply_row(row));
    }
    Ok(out)
}

fn rows_times_h(w: &Tensor) -> Result<Tensor> {
    let (_, cols) = w.dims2()?;
    check_pow2(cols)?;
    let mut out = w.clone();
    out.data_mut().chunks_mut(cols).for_each(fwht_in_place);
    Ok(out)
}

/// `H_{d_out} · W · H_{d_in}ᵀ / √(d_out·d_in)`.
pub fn fuse_hadamard_out_proj(w_out: &Tensor, n_in: usize, n_out: usize) -> Result<Tensor> {
    let (d_out, d_in) = w_out.dims2()?;
    if d_in != n_in || d_out != n_out {
        return Err(Error::shape(format!(
            "out_proj fusion sizes ({n_out}, {n_in}) vs weight {d_out}×{d_in}"
        )));
    }
    check_pow2(n_in)?;
    check_pow2(n_out)?;
    let right = rows_times_h(w_out)?;
    let both = rows_times_h(&right.transpose()?)?.transpose()?;
    let f = 1.0 / ((n_in * n_out) as f32).sqrt();
    Ok(both.map(|v| v * f))
}

/// `W · H_{d_in}ᵀ / √d_in`.
pub fn fuse_hadamard_in_proj(w_in: &Tensor) -> Result<Tensor> {
    let (_, d_in) = w_in.dims2()?;
    let f = 1.0 / (d_in as f32).sqrt();
    Ok(rows_times_h(w_in)?.map(|v| v * f))
}

/// One-pass `clamp(round(H·y / s_y))` per row; identical to quantizing the
/// output of [`fwht`] with a per-tensor scale `s_y`.
pub fn hadamard_quantize(y: &Tensor, plan: &HadamardPlan, bits: u32) -> Result<QTensor> {
    let s_y = plan
        .fused_output_scale
        .ok_or_else(|| Error::Calibration("hadamard_quantize needs a fused output scale".into()))?;
    let layout = ScaleLayout::per_tensor(s_y);
    layout.resolver(&[1])?;
    if y.last_dim() != plan.n {
        return Err(Error::shape(format!(
            "hadamard_quantize of size {} on last dim {}",
            plan.n,
            y.last_dim()
        )));
    }
    check_pow2(plan.n)?;
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let mut codes = Vec::with_capacity(y.len());
    let mut scratch = vec![0.0f32; plan.n];
    for row in y.data().chunks(plan.n.max(1)) {
        scratch.copy_from_slice(row);
        plan.apply_row(&mut scratch);
        codes.extend(
            scratch
                .iter()
                .map(|&v| crate::quant::quantize_value(v, s_y, lo, hi)),
        );
    }
    let payload = if bits == 8 {
        Payload::I8(codes)
    } else {
        Payload::U4Packed(crate::quant::pack_nibbles(&codes, plan.n))
    };
    QTensor::from_parts(y.shape().to_vec(), bits, payload, layout)
}

/// Fold Hadamard rotations into a block.
///
/// `out_proj` absorbs the inverse of an unnormalized online transform on its
/// input. With `residual = Some(g)` the residual stream is also taken to be
/// rotated by `H/√d_model`: the pre-norm weight `g` is folded into `in_proj`
/// and the block output comes out rotated.
pub fn fuse_hadamard_block(
    w: &SsmBlockWeights,
    residual: Option<&[f32]>,
) -> Result<SsmBlockWeights> {
    if w.online_hadamard() {
        return Err(Error::shape(
            "block already carries a fused Hadamard rotation",
        ));
    }
    let d = &w.dims;
    check_pow2(d.d_inner)?;
    let mut out = w.clone();
    let inv_inner = 1.0 / d.d_inner as f32;
    match residual {
        None => {
            out.out_proj = rows_times_h(&w.out_proj)?.map(|v| v * inv_inner);
        }
        Some(g) => {
            if g.len() != d.d_model {
                return Err(Error::shape("pre-norm weight length vs d_model"));
            }
            let mut scaled = w.in_proj.clone();
            for r in 0..scaled.n_rows() {
                for (v, gi) in scaled.row_mut(r).iter_mut().zip(g) {
                    *v *= gi;
                }
            }
            out.in_proj = fuse_hadamard_in_proj(&scaled)?;
            out.out_proj = fuse_hadamard_out_proj(&w.out_proj, d.d_inner, d.d_model)?
                .map(|v| v * inv_inner.sqrt());
        }
    }
    out.rewrites.push(REWRITE_HADAMARD.into());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{compute_scale, dequantize, quantize};
    use crate::rng::Rng;
    use crate::tensor::{linear, metrics};

    fn dense(v: &[f32], n: usize) -> Vec<f32> {
        let h = sylvester_matrix(n).unwrap();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| h[i * n + j] as f64 * v[j] as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    #[test]
    fn n1_is_identity() {
        let p = HadamardPlan::new(1, Normalize::None).unwrap();
        let v = Tensor::vector(vec![3.25]);
        assert_eq!(fwht(&v, &p).unwrap(), v);
    }

    #[test]
    fn e0_maps_to_ones() {
        let p = HadamardPlan::new(4, Normalize::None).unwrap();
        let v = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(fwht(&v, &p).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalized_twice_is_identity() {
        let mut rng = Rng::new(3);
        let p = HadamardPlan::new(64, Normalize::InvSqrt).unwrap();
        let v = Tensor::from_fn(&[3, 64], |_| rng.normal());
        let back = fwht(&fwht(&v, &p).unwrap(), &p).unwrap();
        assert!(metrics::rel_l2(back.data(), v.data()) < 1e-6);
    }

    #[test]
    fn matches_dense_multiply() {
        let mut rng = Rng::new(4);
        for k in 1..=8 {
            let n = 1 << k;
            let v: Vec<f32> = rng.normal_vec(n, 1.0);
            let p = HadamardPlan::new(n, Normalize::None).unwrap();
            let fast = fwht(&Tensor::vector(v.clone()), &p).unwrap();
            assert!(metrics::rel_l2(fast.data(), &dense(&v, n)) < 1e-6);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(
            HadamardPlan::new(12, Normalize::None),
            Err(Error::NotPowerOfTwo(12))
        ));
        assert!(fuse_hadamard_in_proj(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn out_proj_identity_and_zero() {
        let id = fuse_hadamard_out_proj(&Tensor::identity(8), 8, 8).unwrap();
        assert!(metrics::rel_l2(id.data(), Tensor::identity(8).data()) < 1e-7);
        let z = fuse_hadamard_out_proj(&Tensor::zeros(&[4, 8]), 8, 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_proj_compute_invariance() {
        let mut rng = Rng::new(8);
        let w = Tensor::from_fn(&[4, 4], |_| rng.normal());
        let x = Tensor::from_fn(&[5, 4], |_| rng.normal());
        let p = HadamardPlan::new(4, Normalize::InvSqrt).unwrap();
        let fused = fuse_hadamard_out_proj(&w, 4, 4).unwrap();
        let y = fwht(&linear(&fwht(&x, &p).unwrap(), &fused).unwrap(), &p).unwrap();
        let reference = linear(&x, &w).unwrap();
        assert!(metrics::rel_l2(y.data(), reference.data()) < 1e-5);
    }

    #[test]
    fn in_proj_ones_row() {
        let w = Tensor::from_rows(&[&[1.0, 1.0]]);
        let f = fuse_hadamard_in_proj(&w).unwrap();
        assert!((f.data()[0] - 2f32.sqrt()).abs() < 1e-6);
        assert_eq!(f.data()[1], 0.0);
        let one = Tensor::from_rows(&[&[0.75]]);
        assert_eq!(fuse_hadamard_in_proj(&one).unwrap(), one);
    }

    #[test]
    fn two_layer_pairing_is_invariant() {
        let mut rng = Rng::new(12);
        let w1 = Tensor::from_fn(&[16, 8], |_| rng.normal());
        let w2 = Tensor::from_fn(&[4, 16], |_| rng.normal());
        let x = Tensor::from_fn(&[3, 8], |_| rng.normal());
        let p8 = HadamardPlan::new(8, Normalize::InvSqrt).unwrap();
        // first layer emits a rotated stream, second layer absorbs it
        let w1h = fuse_hadamard_out_proj(&w1, 8, 16).unwrap();
        let w2h = fuse_hadamard_in_proj(&w2).unwrap();
        let got = linear(&linear(&fwht(&x, &p8).unwrap(), &w1h).unwrap(), &w2h).unwrap();
        let want = linear(&linear(&x, &w1).unwrap(), &w2).unwrap();
        assert!(metrics::rel_l2(got.data(), want.data()) < 1e-5);
    }

    #[test]
    fn one_pass_equals_two_pass() {
        let mut rng = Rng::new(21);
        for bits in [4, 8] {
            let y = Tensor::from_fn(&[7, 32], |_| rng.normal() * 3.0);
            let p = HadamardPlan::new(32, Normalize::None).unwrap();
            let t = fwht(&y, &p).unwrap();
            let s = compute_scale(t.data(), bits).unwrap() * 0.7;
            let two = quantize(&t, &ScaleLayout::per_tensor(s), bits).unwrap();
            let one = hadamard_quantize(&y, &p.with_output_scale(s), bits).unwrap();
            assert_eq!(one, two);
        }
    }

    #[test]
    fn zero_input_zero_codes_and_missing_scale() {
        let p = HadamardPlan::new(8, Normalize::None).unwrap();
        let q = hadamard_quantize(&Tensor::zeros(&[2, 8]), &p.with_output_scale(0.1), 8).unwrap();
        assert!(q.values().iter().all(|&v| v == 0));
        assert!(hadamard_quantize(&Tensor::zeros(&[2, 8]), &p, 8).is_err());
    }

    #[test]
    fn outlier_vector_shrinks_by_sqrt_n() {
        let mut v = vec![0.0f32; 64];
        v[0] = 100.0;
        let p = HadamardPlan::new(64, Normalize::InvSqrt).unwrap();
        let t = fwht(&Tensor::vector(v.clone()), &p).unwrap();
        let ratio = compute_scale(&v, 8).unwrap() / compute_scale(t.data(), 8).unwrap();
        assert!((ratio - 8.0).abs() < 1e-4, "ratio {ratio}");
    }

    #[test]
    fn hadamard_lowers_outlier_quantization_error() {
        let p = HadamardPlan::new(64, Normalize::InvSqrt).unwrap();
        for trial in 0..100u64 {
            let mut rng = Rng::new(500 + trial);
            let mut v = rng.normal_vec(64, 1.0);
            v[rng.below(64)] = 60.0;
            let x = Tensor::vector(v);
            let plain = dequantize(
                &quantize(
                    &x,
                    &ScaleLayout::fit(&x, crate::quant::LayoutKind::PerTensor, 8).unwrap(),
                    8,
                )
                .unwrap(),
            );
            let t = fwht(&x, &p).unwrap();
            let tq = dequantize(
                &quantize(
                    &t,
                    &ScaleLayout::fit(&t, crate::quant::LayoutKind::PerTensor, 8).unwrap(),
                    8,
                )
                .unwrap(),
            );
            let back = fwht(&tq, &p).unwrap();
            assert!(metrics::mse(back.data(), x.data()) < metrics::mse(plain.data(), x.data()));
        }
    }

    #[test]
    fn block_fusion_is_compute_invariant() {
        use crate::ssm::{block_forward_float, BlockDims, Variant};
        let mut rng = Rng::new(31);
        for variant in [Variant::Mamba2, Variant::Mamba1] {
            let dims = match variant {
                Variant::Mamba2 => BlockDims::toy(),
                Variant::Mamba1 => BlockDims::toy_mamba1(),
            };
            let w = SsmBlockWeights::random(variant, dims, &mut rng).unwrap();
            let u = Tensor::from_fn(&[9, dims.d_model], |_| rng.normal());
            let want = block_forward_float(&u, &w).unwrap();
            let f = fuse_hadamard_block(&w, None).unwrap();
            let got = block_forward_float(&u, &f).unwrap();
            assert!(metrics::rel_l2(got.data(), want.data()) <= 1e-5);

            let g: Vec<f32> = (0..dims.d_model)
                .map(|_| rng.uniform_range(0.5, 2.0))
                .collect();
            let mut wg = w.clone();
            for r in 0..wg.in_proj.n_rows() {
                for (v, gi) in wg.in_proj.row_mut(r).iter_mut().zip(&g) {
                    *v *= gi;
                }
            }
            let want = fwht(
                &block_forward_float(&u, &wg).unwrap(),
                &HadamardPlan::new(dims.d_model, Normalize::InvSqrt).unwrap(),
            )
            .unwrap();
            let f = fuse_hadamard_block(&w, Some(&g)).unwrap();
            let ur = fwht(
                &u,
                &HadamardPlan::new(dims.d_model, Normalize::InvSqrt).unwrap(),
            )
            .unwrap();
            let got = block_forward_float(&ur, &f).unwrap();
            assert!(
                metrics::rel_l2(got.data(), want.data()) <= 1e-5,
                "{variant:?}"
            );
            assert!(fuse_hadamard_block(&f, None).is_err());
        }
    }
}
