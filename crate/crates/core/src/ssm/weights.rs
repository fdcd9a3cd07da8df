use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Mamba1,
    Mamba2,
}

/// Block dimensions.
///
/// For Mamba2, `d_inner = n_heads · head_dim` and the scan runs per head.
/// Mamba1 is purely channel-wise; `n_heads × head_dim` is then only the
/// grouping view used by sort-and-cluster, and `n_state_groups` must be 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_state_groups: usize,
    pub conv_kernel: usize,
    /// Low-rank width of Mamba1's Δ projection; unused by Mamba2.
    pub dt_rank: usize,
}

impl BlockDims {
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            d_inner: 128,
            d_state: 16,
            n_heads: 8,
            head_dim: 16,
            n_state_groups: 2,
            conv_kernel: 4,
            dt_rank: 4,
        }
    }

    pub fn toy_mamba1() -> Self {
        Self {
            n_state_groups: 1,
            ..Self::toy()
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let bad = |m: String| Err(Error::shape(m));
        if self.d_model == 0 || self.d_inner == 0 || self.d_state == 0 || self.conv_kernel == 0 {
            return bad(format!("zero-sized dims {self:?}"));
        }
        if self.n_heads * self.head_dim != self.d_inner {
            return bad(format!(
                "n_heads·head_dim = {} ≠ d_inner {}",
                self.n_heads * self.head_dim,
                self.d_inner
            ));
        }
        if self.n_state_groups == 0 || !self.n_heads.is_multiple_of(self.n_state_groups) {
            return bad(format!(
                "{} state groups do not divide {} heads",
                self.n_state_groups, self.n_heads
            ));
        }
        if variant == Variant::Mamba1 {
            if self.n_state_groups != 1 {
                return bad("Mamba1 blocks have a single state group".into());
            }
            if self.dt_rank == 0 {
                return bad("Mamba1 needs dt_rank ≥ 1".into());
            }
        }
        Ok(())
    }

    pub fn bc_width(&self) -> usize {
        self.n_state_groups * self.d_state
    }

    pub fn conv_channels(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mamba1 => self.d_inner,
            Variant::Mamba2 => self.d_inner + 2 * self.bc_width(),
        }
    }

    pub fn in_proj_rows(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mamba1 => 2 * self.d_inner,
            Variant::Mamba2 => 2 * self.d_inner + 2 * self.bc_width() + self.n_heads,
        }
    }

    /// Heads of the recurrence: per channel for Mamba1, per head for Mamba2.
    pub fn scan_heads(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mamba1 => self.d_inner,
            Variant::Mamba2 => self.n_heads,
        }
    }

    pub fn scan_head_dim(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mamba1 => 1,
            Variant::Mamba2 => self.head_dim,
        }
    }

    /// Columns of `A` per scan head.
    pub fn a_cols(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mamba1 => self.d_state,
            Variant::Mamba2 => 1,
        }
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_state_groups
    }
}

pub const REWRITE_REORDER: &str = "reorder";
pub const REWRITE_HADAMARD: &str = "hadamard";

/// All parameters of one block.
///
/// `in_proj` rows are laid out `z | x | B | C | Δ` for Mamba2 and `z | x` for
/// Mamba1, whose `x_proj` rows are `Δ_low | B | C` and `dt_proj` maps
/// `Δ_low` to one value per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlockWeights {
    pub variant: Variant,
    pub dims: BlockDims,
    pub in_proj: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub x_proj: Option<Tensor>,
    pub dt_proj: Option<Tensor>,
    pub a_log: Tensor,
    pub d_param: Tensor,
    pub dt_bias: Tensor,
    pub norm_weight: Tensor,
    pub out_proj: Tensor,
    /// Offline rewrites applied so far, in order.
    pub rewrites: Vec<String>,
}

fn expect(t: &Tensor, shape: &[usize], name: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(format!(
            "{name}: expected {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl SsmBlockWeights {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let v = self.variant;
        d.validate(v)?;
        expect(&self.in_proj, &[d.in_proj_rows(v), d.d_model], "in_proj")?;
        let ch = d.conv_channels(v);
        expect(&self.conv_weight, &[ch, d.conv_kernel], "conv_weight")?;
        expect(&self.conv_bias, &[ch], "conv_bias")?;
        let heads = d.scan_heads(v);
        expect(&self.a_log, &[heads, d.a_cols(v)], "a_log")?;
        expect(&self.d_param, &[heads], "d_param")?;
        expect(&self.dt_bias, &[heads], "dt_bias")?;
        expect(&self.norm_weight, &[d.d_inner], "norm_weight")?;
        expect(&self.out_proj, &[d.d_model, d.d_inner], "out_proj")?;
        match (v, &self.x_proj, &self.dt_proj) {
            (Variant::Mamba1, Some(xp), Some(dp)) => {
                expect(xp, &[d.dt_rank + 2 * d.d_state, d.d_inner], "x_proj")?;
                expect(dp, &[d.d_inner, d.dt_rank], "dt_proj")?;
            }
            (Variant::Mamba2, None, None) => {}
            _ => {
                return Err(Error::shape(
                    "x_proj/dt_proj presence does not match variant",
                ))
            }
        }
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    /// `A = −exp(a_log)`, shape `[scan_heads, a_cols]`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn has_rewrite(&self, name: &str) -> bool {
        self.rewrites.iter().any(|r| r == name)
    }

    pub fn online_hadamard(&self) -> bool {
        self.has_rewrite(REWRITE_HADAMARD)
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("in_proj", &self.in_proj),
            ("conv_weight", &self.conv_weight),
            ("conv_bias", &self.conv_bias),
            ("a_log", &self.a_log),
            ("d_param", &self.d_param),
            ("dt_bias", &self.dt_bias),
            ("norm_weight", &self.norm_weight),
            ("out_proj", &self.out_proj),
        ];
        if let Some(t) = &self.x_proj {
            v.push(("x_proj", t));
        }
        if let Some(t) = &self.dt_proj {
            v.push(("dt_proj", t));
        }
        v
    }

    /// Row ranges of the in_proj output: (z, x, B, C, Δ); B/C/Δ are empty
    /// for Mamba1.
    pub fn in_proj_slices(&self) -> [(usize, usize); 5] {
        let d = &self.dims;
        let di = d.d_inner;
        match self.variant {
            Variant::Mamba1 => [(0, di), (di, di), (2 * di, 0), (2 * di, 0), (2 * di, 0)],
            Variant::Mamba2 => {
                let bc = d.bc_width();
                [
                    (0, di),
                    (di, di),
                    (2 * di, bc),
                    (2 * di + bc, bc),
                    (2 * di + 2 * bc, d.n_heads),
                ]
            }
        }
    }

    /// Plain random initialization: Gaussian projections, `A < 0`, Δ biased
    /// into `[1e-3, 1e-1]`.
    pub fn random(variant: Variant, dims: BlockDims, rng: &mut Rng) -> Result<Self> {
        dims.validate(variant)?;
        let d = dims;
        let gauss = |rng: &mut Rng, shape: &[usize], std: f32| {
            Tensor::from_fn(shape, |_| rng.normal() * std)
        };
        let heads = d.scan_heads(variant);
        let ch = d.conv_channels(variant);
        let in_proj = gauss(
            rng,
            &[d.in_proj_rows(variant), d.d_model],
            1.0 / (d.d_model as f32).sqrt(),
        );
        let conv_weight = gauss(rng, &[ch, d.conv_kernel], 0.5);
        let conv_bias = gauss(rng, &[ch], 0.02);
        let a_log = match variant {
            Variant::Mamba1 => {
                Tensor::from_fn(&[heads, d.d_state], |i| ((i % d.d_state) as f32 + 1.0).ln())
            }
            Variant::Mamba2 => Tensor::from_fn(&[heads, 1], |_| rng.uniform_range(1.0, 16.0).ln()),
        };
        let dt_bias = Tensor::from_fn(&[heads], |_| {
            let dt = (rng.uniform_range(1e-3f32.ln(), 1e-1f32.ln())).exp();
            // softplus⁻¹
            dt + (-(-dt).exp_m1()).ln()
        });
        let d_param = Tensor::full(&[heads], 1.0);
        let norm_weight = Tensor::full(&[d.d_inner], 1.0);
        let out_proj = gauss(
            rng,
            &[d.d_model, d.d_inner],
            1.0 / (d.d_inner as f32).sqrt(),
        );
        let (x_proj, dt_proj) = match variant {
            Variant::Mamba1 => (
                Some(gauss(
                    rng,
                    &[d.dt_rank + 2 * d.d_state, d.d_inner],
                    1.0 / (d.d_inner as f32).sqrt(),
                )),
                Some(gauss(
                    rng,
                    &[d.d_inner, d.dt_rank],
                    1.0 / (d.dt_rank as f32).sqrt(),
                )),
            ),
            Variant::Mamba2 => (None, None),
        };
        let w = Self {
            variant,
            dims,
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            d_param,
            dt_bias,
            norm_weight,
            out_proj,
            rewrites: Vec::new(),
        };
        w.validate()?;
        Ok(w)
    }
}
