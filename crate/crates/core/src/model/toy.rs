use serde::{Deserialize, Serialize};

use super::{FloatModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::ssm::{SsmBlockWeights, Variant};
use crate::tensor::Tensor;

/// Toy model recipe.
///
/// Weights are Gaussian with planted structure: a few hot residual
/// dimensions, per-head and per-channel gains on the `x` rows of in_proj
/// (a wide and persistent channel-max spread), B/C state groups whose ranges differ by 100× (with
/// balanced B·C products),
/// a few hot channels in each block's output norm, and a couple of large
/// input columns in in_proj and out_proj. A `sensitive_block`
/// additionally gets extreme gate rows, so quantizing its activations hurts
/// far more than anywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub config: ModelConfig,
    pub seed: u64,
    pub sensitive_block: Option<usize>,
}

impl ToySpec {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            sensitive_block: None,
        }
    }
}

const EMBED_OUTLIERS: usize = 4;
const EMBED_GAIN: f32 = 40.0;
const NORM_OUTLIERS: usize = 4;
const NORM_GAIN: f32 = 40.0;
const COL_OUTLIERS: usize = 2;
const COL_GAIN: f32 = 8.0;
const BC_GROUP_GAIN: f32 = 10.0;
const OUT_GAIN: f32 = 0.3;
const GATE_OUTLIERS: usize = 4;
const GATE_GAIN: f32 = 100.0;
const SENSITIVE_OUT_GAIN: f32 = 3.0;

fn lerp_pow10(lo: f32, hi: f32, i: usize, n: usize) -> f32 {
    let t = if n > 1 {
        i as f32 / (n - 1) as f32
    } else {
        0.0
    };
    10f32.powf(lo + (hi - lo) * t)
}

fn scale_row(t: &mut Tensor, r: usize, f: f32) {
    t.row_mut(r).iter_mut().for_each(|v| *v *= f);
}

fn plant_block(w: &mut SsmBlockWeights, rng: &mut Rng, hot_resid: &[usize], sensitive: bool) {
    let d = w.dims;
    let (x_start, _) = w.in_proj_slices()[1];
    let mut head_gain: Vec<f32> = (0..d.n_heads)
        .map(|h| lerp_pow10(-1.2, 0.6, h, d.n_heads))
        .collect();
    rng.shuffle(&mut head_gain);
    for (h, hg) in head_gain.iter().enumerate() {
        let mut ch: Vec<f32> = (0..d.head_dim)
            .map(|c| lerp_pow10(-0.8, 0.4, c, d.head_dim))
            .collect();
        rng.shuffle(&mut ch);
        for (c, cg) in ch.iter().enumerate() {
            scale_row(&mut w.in_proj, x_start + h * d.head_dim + c, hg * cg);
        }
    }
    if w.variant == Variant::Mamba2 {
        let [_, _, (b0, _), (c0, _), _] = w.in_proj_slices();
        for g in 0..d.n_state_groups {
            let gain = if g % 2 == 0 {
                BC_GROUP_GAIN
            } else {
                1.0 / BC_GROUP_GAIN
            };
            for s in 0..d.d_state {
                scale_row(&mut w.in_proj, b0 + g * d.d_state + s, gain);
                scale_row(&mut w.in_proj, c0 + g * d.d_state + s, 1.0 / gain);
            }
        }
    }
    let hot_norm: Vec<usize> = rng.permutation(d.d_inner)[..NORM_OUTLIERS.min(d.d_inner)].to_vec();
    for &c in &hot_norm {
        w.norm_weight.data_mut()[c] *= NORM_GAIN;
    }
    for (t, avoid) in [
        (&mut w.in_proj, hot_resid),
        (&mut w.out_proj, &hot_norm[..]),
    ] {
        let cols: Vec<usize> = rng
            .permutation(t.last_dim())
            .into_iter()
            .filter(|c| !avoid.contains(c))
            .collect();
        for &c in &cols[..COL_OUTLIERS.min(cols.len())] {
            for r in 0..t.n_rows() {
                t.row_mut(r)[c] *= COL_GAIN;
            }
        }
    }
    let mut out_gain = OUT_GAIN;
    if sensitive {
        for &r in &rng.permutation(d.d_inner)[..GATE_OUTLIERS.min(d.d_inner)] {
            scale_row(&mut w.in_proj, r, GATE_GAIN);
        }
        out_gain *= SENSITIVE_OUT_GAIN;
    }
    w.out_proj = w.out_proj.map(|v| v * out_gain);
}

pub fn gen_toy_model(spec: &ToySpec) -> Result<FloatModel> {
    let cfg = spec.config;
    cfg.validate()?;
    if let Some(s) = spec.sensitive_block {
        if s >= cfg.n_blocks {
            return Err(Error::shape(format!(
                "sensitive block {s} of {}",
                cfg.n_blocks
            )));
        }
    }
    let dm = cfg.dims.d_model;
    let mut rng = Rng::derive(spec.seed, &[0]);
    let mut embedding = Tensor::from_fn(&[cfg.vocab, dm], |_| rng.normal());
    let hot_resid: Vec<usize> = rng.permutation(dm)[..EMBED_OUTLIERS.min(dm)].to_vec();
    for &c in &hot_resid {
        for r in 0..cfg.vocab {
            embedding.row_mut(r)[c] *= EMBED_GAIN;
        }
    }
    let norms = (0..cfg.n_blocks)
        .map(|_| Tensor::from_fn(&[dm], |_| rng.uniform_range(0.8, 1.2)))
        .collect();
    let final_norm = Tensor::from_fn(&[dm], |_| rng.uniform_range(0.8, 1.2));
    let head = Tensor::from_fn(&[cfg.vocab, dm], |_| rng.normal() / (dm as f32).sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let mut brng = Rng::derive(spec.seed, &[1, i as u64]);
        let mut w = SsmBlockWeights::random(cfg.variant, cfg.dims, &mut brng)?;
        plant_block(
            &mut w,
            &mut brng,
            &hot_resid,
            spec.sensitive_block == Some(i),
        );
        w.validate()?;
        blocks.push(w);
    }
    let m = FloatModel {
        config: cfg,
        embedding,
        norms,
        blocks,
        final_norm,
        head,
        rotated: false,
    };
    m.validate()?;
    Ok(m)
}

/// Heavy-tailed token streams: `floor(vocab · u²)` favours low ids.
pub fn synthetic_tokens(
    n_samples: usize,
    seq_len: usize,
    vocab: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    (0..n_samples)
        .map(|s| {
            let mut rng = Rng::derive(seed, &[2, s as u64]);
            (0..seq_len)
                .map(|_| {
                    let u = rng.uniform();
                    ((vocab as f32 * u * u) as usize).min(vocab - 1) as u32
                })
                .collect()
        })
        .collect()
}
