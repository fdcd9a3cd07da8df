use proptest::prelude::*;

use ssmq_core::hadamard::{fwht, HadamardPlan, Normalize};
use ssmq_core::quant::{
    dequantize, gptq_quantize_weight, quantize, rtn_quantize_weight, LayoutKind, ScaleLayout,
};
use ssmq_core::reorder::{apply_reorder, revert_reorder, ReorderPlan};
use ssmq_core::rng::Rng;
use ssmq_core::ssm::{block_forward_float, BlockDims, SsmBlockWeights, Variant};
use ssmq_core::tensor::metrics::rel_l2;
use ssmq_core::Tensor;

fn lattice(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let mut w = Tensor::from_fn(&[rows, cols], |_| (rng.below(255) as f32) - 127.0);
    // Pin each row's max to 127 so every per-row scale is exactly 1.
    for r in 0..rows {
        w.row_mut(r)[r % cols] = 127.0;
    }
    w
}

#[test]
fn integer_lattice_weights_are_lossless_at_8_bits() {
    let w = lattice(16, 32, 1);
    let x = Tensor::from_fn(&[8, 32], |i| ((i * 37 % 11) as f32) - 5.0);
    assert_eq!(dequantize(&rtn_quantize_weight(&w, 8, 32).unwrap()), w);
    assert_eq!(
        dequantize(&gptq_quantize_weight(&w, &x, 8, 32, 0.01).unwrap()),
        w
    );
    let layout = ScaleLayout::fit(&w, LayoutKind::PerRow, 8).unwrap();
    assert_eq!(dequantize(&quantize(&w, &layout, 8).unwrap()), w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_error_is_at_most_half_a_step(
        xs in prop::collection::vec(-1e3f32..1e3, 1..200),
        eight in any::<bool>(),
    ) {
        let bits = if eight { 8 } else { 4 };
        let x = Tensor::vector(xs);
        let layout = ScaleLayout::fit(&x, LayoutKind::PerTensor, bits).unwrap();
        let s = layout.scales[0] as f64;
        let q = quantize(&x, &layout, bits).unwrap();
        let lim = (1i32 << (bits - 1)) - 1;
        prop_assert!(q.values().iter().all(|&v| (-lim..=lim).contains(&(v as i32))));
        for (a, b) in x.data().iter().zip(dequantize(&q).data()) {
            prop_assert!((*a as f64 - *b as f64).abs() <= s / 2.0 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn normalized_fwht_is_an_involution(k in 1u32..9, seed in any::<u64>()) {
        let n = 1usize << k;
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[3, n], |_| rng.normal());
        let plan = HadamardPlan::new(n, Normalize::InvSqrt).unwrap();
        let back = fwht(&fwht(&x, &plan).unwrap(), &plan).unwrap();
        prop_assert!(rel_l2(back.data(), x.data()) <= 1e-6);
    }

    #[test]
    fn random_reorder_preserves_output(seed in any::<u64>(), mamba1 in any::<bool>()) {
        let (v, d) = if mamba1 {
            (Variant::Mamba1, BlockDims::toy_mamba1())
        } else {
            (Variant::Mamba2, BlockDims::toy())
        };
        let mut rng = Rng::new(seed);
        let w = SsmBlockWeights::random(v, d, &mut rng).unwrap();
        let plan = ReorderPlan::random(&d, &mut rng);
        let r = apply_reorder(&w, &plan).unwrap();
        let u = Tensor::from_fn(&[6, d.d_model], |_| rng.normal());
        let a = block_forward_float(&u, &w).unwrap();
        let b = block_forward_float(&u, &r).unwrap();
        prop_assert!(rel_l2(b.data(), a.data()) <= 1e-5);
        prop_assert_eq!(revert_reorder(&r, &plan).unwrap(), w);
    }
}
