//! Quantized tensors: integer payloads plus a scale layout.

use serde::{Deserialize, Serialize};

use super::layout::{check_bits, qmax, qmin, ScaleLayout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer storage. 4-bit values are packed two per byte along each row of the
/// last axis, low nibble first; an odd row length leaves the final high nibble zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    I8(Vec<i8>),
    U4Packed(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    bits: u32,
    payload: Payload,
    layout: ScaleLayout,
}

/// Pack signed 4-bit values (each in `[-8, 7]`) row-wise, two per byte.
pub fn pack_nibbles(values: &[i8], row_len: usize) -> Vec<u8> {
    if row_len == 0 {
        return Vec::new();
    }
    let rows = values.len() / row_len;
    let per_row = row_len.div_ceil(2);
    let mut out = Vec::with_capacity(rows * per_row);
    for row in values.chunks(row_len) {
        for pair in row.chunks(2) {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&v| (v as u8) & 0x0f);
            out.push(lo | (hi << 4));
        }
    }
    out
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

/// Inverse of [`pack_nibbles`].
pub fn unpack_nibbles(bytes: &[u8], row_len: usize, rows: usize) -> Vec<i8> {
    let per_row = row_len.div_ceil(2);
    let mut out = Vec::with_capacity(rows * row_len);
    for r in 0..rows {
        let row = &bytes[r * per_row..(r + 1) * per_row];
        for c in 0..row_len {
            let b = row[c / 2];
            let nib = if c % 2 == 0 { b & 0x0f } else { b >> 4 };
            out.push(sign_extend(nib));
        }
    }
    out
}

/// Bytes needed to store `shape` at `bits` precision.
pub fn payload_len(shape: &[usize], bits: u32) -> usize {
    let n: usize = shape.iter().product();
    if bits == 8 {
        return n;
    }
    let last = shape.last().copied().unwrap_or(1);
    if last == 0 {
        return 0;
    }
    (n / last) * last.div_ceil(2)
}

impl QTensor {
    /// Assemble from raw parts, checking every invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        bits: u32,
        payload: Payload,
        layout: ScaleLayout,
    ) -> Result<Self> {
        check_bits(bits)?;
        let n: usize = shape.iter().product();
        match (&payload, bits) {
            (Payload::I8(v), 8) => {
                if v.len() != n {
                    return Err(Error::shape(format!("i8 payload {} vs {n}", v.len())));
                }
            }
            (Payload::U4Packed(v), 4) => {
                if v.len() != payload_len(&shape, 4) {
                    return Err(Error::shape(format!(
                        "u4 payload {} bytes vs {} expected",
                        v.len(),
                        payload_len(&shape, 4)
                    )));
                }
            }
            _ => {
                return Err(Error::shape(format!(
                    "payload kind does not match {bits}-bit tensor"
                )))
            }
        }
        layout.resolver(&shape)?;
        let q = Self {
            shape,
            bits,
            payload,
            layout,
        };
        let (lo, hi) = (qmin(bits), qmax(bits));
        if q.values()
            .iter()
            .any(|&v| (v as i32) < lo || (v as i32) > hi)
        {
            return Err(Error::shape(format!("payload exceeds {bits}-bit range")));
        }
        Ok(q)
    }

    fn from_values(shape: Vec<usize>, bits: u32, values: Vec<i8>, layout: ScaleLayout) -> Self {
        let payload = if bits == 8 {
            Payload::I8(values)
        } else {
            let last = shape.last().copied().unwrap_or(1);
            Payload::U4Packed(pack_nibbles(&values, last))
        };
        Self {
            shape,
            bits,
            payload,
            layout,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn layout(&self) -> &ScaleLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unpacked integer codes in row-major order.
    pub fn values(&self) -> Vec<i8> {
        match &self.payload {
            Payload::I8(v) => v.clone(),
            Payload::U4Packed(b) => {
                let last = self.shape.last().copied().unwrap_or(1);
                let rows = self.len().checked_div(last).unwrap_or(0);
                unpack_nibbles(b, last, rows)
            }
        }
    }

    /// Storage footprint of payload plus scales.
    pub fn nbytes(&self) -> usize {
        let p = match &self.payload {
            Payload::I8(v) => v.len(),
            Payload::U4Packed(v) => v.len(),
        };
        p + 4 * self.layout.scales.len()
    }
}

/// `clamp(round_half_even(x / s), -2^(bits-1), 2^(bits-1)-1)` with `s` taken
/// from `layout` for every element.
pub fn quantize(x: &Tensor, layout: &ScaleLayout, bits: u32) -> Result<QTensor> {
    check_bits(bits)?;
    let r = layout.resolver(x.shape())?;
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let mut values = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite("quantize input".into()));
        }
        let s = layout.scales[r.index(i)];
        values.push(quantize_value(v, s, lo, hi));
    }
    Ok(QTensor::from_values(
        x.shape().to_vec(),
        bits,
        values,
        layout.clone(),
    ))
}

#[inline]
pub(crate) fn quantize_value(v: f32, s: f32, lo: f32, hi: f32) -> i8 {
    (v / s).round_ties_even().clamp(lo, hi) as i8
}

/// `x̂ = q · s`, elementwise with the governing scale.
pub fn dequantize(q: &QTensor) -> Tensor {
    let r = q
        .layout
        .resolver(&q.shape)
        .expect("QTensor invariants guarantee a valid layout");
    let data = q
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, v)| v as f32 * q.layout.scales[r.index(i)])
        .collect();
    Tensor::new(q.shape.clone(), data).expect("shape preserved")
}

/// Quantize then dequantize in one step; the simulated-quantization path.
pub fn fake_quantize(x: &Tensor, layout: &ScaleLayout, bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    let r = layout.resolver(x.shape())?;
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite("quantize input".into()));
        }
        let s = layout.scales[r.index(i)];
        *v = quantize_value(*v, s, lo, hi) as f32 * s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::layout::{compute_scale, LayoutKind};
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn quantize_example_half_even() {
        let x = Tensor::vector(vec![2.54, -1.27, 0.0]);
        let q = quantize(&x, &ScaleLayout::per_tensor(0.02), 8).unwrap();
        assert_eq!(q.values(), vec![127, -64, 0]);
    }

    #[test]
    fn quantize_clamps() {
        let x = Tensor::vector(vec![1000.0]);
        let s = compute_scale(&[1.0], 8).unwrap();
        let q = quantize(&x, &ScaleLayout::per_tensor(s), 8).unwrap();
        assert_eq!(q.values(), vec![127]);
    }

    #[test]
    fn lattice_points_round_trip_exactly() {
        let s = 0.37f32;
        let ints: Vec<i8> = (-8..=7).collect();
        let x = Tensor::vector(ints.iter().map(|&v| v as f32 * s).collect());
        let q = quantize(&x, &ScaleLayout::per_tensor(s), 4).unwrap();
        assert_eq!(q.values(), ints);
        assert_eq!(dequantize(&q), x);
    }

    #[test]
    fn dequantize_example() {
        let x = Tensor::vector(vec![2.54]);
        let q = quantize(&x, &ScaleLayout::per_tensor(0.02), 8).unwrap();
        let d = dequantize(&q);
        assert!((d.data()[0] - 2.54).abs() < 1e-6);
    }

    #[test]
    fn zeros_stay_zero_for_every_layout() {
        let x = Tensor::zeros(&[4, 6]);
        let kinds = [
            LayoutKind::PerTensor,
            LayoutKind::PerChannel { axis: 1 },
            LayoutKind::PerGroup {
                axis: 1,
                group_size: 4,
            },
            LayoutKind::PerRow,
            LayoutKind::Clustered {
                channel_group: vec![0, 1, 0, 1, 2, 2],
                inner: 1,
            },
            LayoutKind::PerStateGroup {
                bounds: vec![0, 3, 6],
            },
        ];
        for kind in kinds {
            for bits in [4, 8] {
                let l = ScaleLayout::fit(&x, kind.clone(), bits).unwrap();
                let q = quantize(&x, &l, bits).unwrap();
                assert!(dequantize(&q).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn random_grid_error_bound() {
        let mut rng = Rng::new(11);
        for bits in [4u32, 8] {
            let x = Tensor::from_fn(&[10, 10, 10], |_| rng.uniform_range(-3.0, 3.0));
            let l = ScaleLayout::fit(&x, LayoutKind::PerTensor, bits).unwrap();
            let s = l.scales[0];
            let d = dequantize(&quantize(&x, &l, bits).unwrap());
            for (a, b) in x.data().iter().zip(d.data()) {
                assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn nibble_packing_example() {
        assert_eq!(pack_nibbles(&[3, -2], 2), vec![0xE3]);
        assert_eq!(unpack_nibbles(&[0xE3], 2, 1), vec![3, -2]);
    }

    #[test]
    fn odd_row_packing() {
        let v = vec![1, -8, 7, -1, 0, 5];
        let p = pack_nibbles(&v, 3);
        assert_eq!(p.len(), 4);
        assert_eq!(unpack_nibbles(&p, 3, 2), v);
    }

    #[test]
    fn from_parts_rejects_out_of_range() {
        let l = ScaleLayout::per_tensor(1.0);
        let r = QTensor::from_parts(vec![1], 8, Payload::U4Packed(vec![0]), l.clone());
        assert!(r.is_err());
        let ok = QTensor::from_parts(vec![2], 4, Payload::U4Packed(vec![0xE3]), l);
        assert!(ok.is_ok());
    }

    proptest! {
        #[test]
        fn nibble_pack_unpack_identity(vals in proptest::collection::vec(-8i8..=7, 0..64), row in 1usize..9) {
            let n = vals.len() / row * row;
            let v = &vals[..n];
            let p = pack_nibbles(v, row);
            prop_assert_eq!(unpack_nibbles(&p, row, n / row), v.to_vec());
        }

        #[test]
        fn integer_codes_scale_homogeneous(
            xs in proptest::collection::vec(-50.0f32..50.0, 1..40),
            alpha in 0.01f32..100.0,
            bits in prop_oneof![Just(4u32), Just(8u32)],
        ) {
            // pick a power-of-two alpha so α·x / (α·s) is computed exactly
            let alpha = 2f32.powi(alpha.log2().round() as i32);
            let x = Tensor::vector(xs.clone());
            let s = compute_scale(&xs, bits).unwrap();
            let q1 = quantize(&x, &ScaleLayout::per_tensor(s), bits).unwrap();
            let xa = x.map(|v| v * alpha);
            let q2 = quantize(&xa, &ScaleLayout::per_tensor(s * alpha), bits).unwrap();
            prop_assert_eq!(q1.values(), q2.values());
        }

        #[test]
        fn in_range_error_at_most_half_step(
            xs in proptest::collection::vec(-1.0f32..1.0, 1..64),
            scale in 0.001f32..0.5,
            bits in prop_oneof![Just(4u32), Just(8u32)],
        ) {
            let lim = scale * qmax(bits) as f32;
            let x = Tensor::vector(xs.iter().map(|v| v * lim).collect());
            let l = ScaleLayout::per_tensor(scale);
            let d = dequantize(&quantize(&x, &l, bits).unwrap());
            for (a, b) in x.data().iter().zip(d.data()) {
                prop_assert!((a - b).abs() <= scale / 2.0 * (1.0 + 1e-5));
            }
        }
    }
}
