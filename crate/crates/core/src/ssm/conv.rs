use crate::error::{Error, Result};
use crate::tensor::{silu, Tensor};

/// Depthwise causal convolution followed by SiLU.
///
/// `x` is `[T × C]`, `weight` is `[C × K]` (tap `K−1` multiplies the current
/// step), `bias` is `[C]`. `cache` holds the previous `K−1` inputs as
/// `[C × (K−1)]`, oldest first; it is read as the left context and then
/// advanced past `x`. Without a cache the left context is zero.
pub fn causal_conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    cache: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (t_len, ch) = x.dims2()?;
    let (wc, k) = weight.dims2()?;
    if k == 0 {
        return Err(Error::shape("conv kernel must be ≥ 1"));
    }
    if wc != ch || bias.len() != ch {
        return Err(Error::shape(format!(
            "conv weight {wc} / bias {} channels vs input {ch}",
            bias.len()
        )));
    }
    let hist = k - 1;
    let mut ctx = match &cache {
        Some(c) => {
            if c.shape() != [ch, hist] {
                return Err(Error::shape(format!(
                    "conv cache {:?} vs expected [{ch}, {hist}]",
                    c.shape()
                )));
            }
            c.data().to_vec()
        }
        None => vec![0.0; ch * hist],
    };
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0f32; t_len * ch];
    for c in 0..ch {
        let w = &wd[c * k..(c + 1) * k];
        let past = &ctx[c * hist..(c + 1) * hist];
        for t in 0..t_len {
            let mut acc = bias[c];
            for (tap, &wv) in w.iter().enumerate() {
                // input index relative to t: tap − (K−1)
                let back = hist - tap;
                let v = if back <= t {
                    xd[(t - back) * ch + c]
                } else {
                    past[hist - (back - t)]
                };
                acc += wv * v;
            }
            out[t * ch + c] = silu(acc);
        }
    }
    if let Some(cache) = cache {
        for c in 0..ch {
            let past = &mut ctx[c * hist..(c + 1) * hist];
            let mut seq: Vec<f32> = past.to_vec();
            seq.extend((0..t_len).map(|t| xd[t * ch + c]));
            past.copy_from_slice(&seq[seq.len() - hist..]);
        }
        cache.data_mut().copy_from_slice(&ctx);
    }
    Tensor::new(vec![t_len, ch], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::metrics;

    #[test]
    fn unit_kernel_is_silu() {
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let y = causal_conv1d(&x, &Tensor::full(&[2, 1], 1.0), &[0.0, 0.0], None).unwrap();
        assert_eq!(y, x.map(silu));
    }

    #[test]
    fn zero_input_gives_silu_bias() {
        let w = Tensor::full(&[3, 4], 0.7);
        let y = causal_conv1d(&Tensor::zeros(&[5, 3]), &w, &[0.1, -0.2, 2.0], None).unwrap();
        for t in 0..5 {
            assert_eq!(y.row(t), &[silu(0.1), silu(-0.2), silu(2.0)]);
        }
    }

    #[test]
    fn causal_taps() {
        // single channel, kernel [a, b, c]: y_t = c·x_t + b·x_{t−1} + a·x_{t−2}
        let x = Tensor::from_rows(&[&[1.0], &[10.0], &[100.0]]);
        let w = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let y = causal_conv1d(&x, &w, &[0.0], None).unwrap();
        let pre = [3.0, 32.0, 321.0];
        for t in 0..3 {
            assert_eq!(y.data()[t], silu(pre[t]));
        }
    }

    #[test]
    fn stepping_matches_full_sequence() {
        let mut rng = Rng::new(17);
        let (t_len, ch, k) = (23, 6, 4);
        let x = Tensor::from_fn(&[t_len, ch], |_| rng.normal());
        let w = Tensor::from_fn(&[ch, k], |_| rng.normal());
        let b: Vec<f32> = rng.normal_vec(ch, 0.1);
        let full = causal_conv1d(&x, &w, &b, None).unwrap();
        let mut cache = Tensor::zeros(&[ch, k - 1]);
        let mut steps = Vec::new();
        for t in 0..t_len {
            let xt = x.slice_rows(t, 1).unwrap();
            steps.extend_from_slice(causal_conv1d(&xt, &w, &b, Some(&mut cache)).unwrap().data());
        }
        assert!(metrics::rel_l2(&steps, full.data()) <= 1e-6);
        // uneven chunks too
        let mut cache = Tensor::zeros(&[ch, k - 1]);
        let a = causal_conv1d(&x.slice_rows(0, 2).unwrap(), &w, &b, Some(&mut cache)).unwrap();
        let rest = causal_conv1d(
            &x.slice_rows(2, t_len - 2).unwrap(),
            &w,
            &b,
            Some(&mut cache),
        )
        .unwrap();
        let joined = Tensor::concat_rows(&[&a, &rest]).unwrap();
        assert!(metrics::rel_l2(joined.data(), full.data()) <= 1e-6);
    }

    #[test]
    fn cache_mismatch_is_an_error() {
        let mut cache = Tensor::zeros(&[2, 2]);
        let r = causal_conv1d(
            &Tensor::zeros(&[1, 3]),
            &Tensor::zeros(&[3, 3]),
            &[0.0; 3],
            Some(&mut cache),
        );
        assert!(r.is_err());
    }
}
