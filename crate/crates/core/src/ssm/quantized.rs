use std::fmt;

use serde::{Deserialize, Serialize};

use super::block::{run, Exec, NoHook, ScanMode, Site, SiteHook, SsmState};
use super::weights::SsmBlockWeights;
use crate::error::{Error, Result};
use crate::hadamard::{hadamard_quantize, HadamardPlan, Normalize};
use crate::quant::{dequantize, fake_quantize, int_gemm, quantize, QTensor, ScaleLayout};
use crate::tensor::{linear, Tensor};

/// Activation bits are 8 for every A8 profile.
pub const ACT_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Profile {
    W8A8,
    W4A8,
    W4A16,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::W8A8, Profile::W4A8, Profile::W4A16];

    pub fn weight_bits(self) -> u32 {
        match self {
            Profile::W8A8 => 8,
            Profile::W4A8 | Profile::W4A16 => 4,
        }
    }

    pub fn quantizes_activations(self) -> bool {
        self != Profile::W4A16
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Static activation scales of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActScales {
    /// in_proj input, per tensor.
    pub u: f32,
    pub z: f32,
    /// Δ after softplus.
    pub dt: f32,
    /// SSM input `x` over `[T × d_inner]`: clustered or per tensor.
    pub x: ScaleLayout,
    pub b: ScaleLayout,
    pub c: ScaleLayout,
    /// out_proj input; measured after the online Hadamard transform when the
    /// block carries one.
    pub y: f32,
    /// Cached recurrent state over `[heads·head_dim × d_state]`.
    pub state: Option<ScaleLayout>,
}

/// A block with quantized projections.
///
/// `base` holds every parameter in float form; quantized tensors appear there
/// dequantized and are used by the paths that do not run integer GEMMs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub profile: Profile,
    pub in_proj: QTensor,
    pub out_proj: QTensor,
    pub conv_weight: Option<QTensor>,
    pub x_proj: Option<QTensor>,
    pub dt_proj: Option<QTensor>,
    pub acts: Option<ActScales>,
    pub base: SsmBlockWeights,
}

impl QuantBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        profile: Profile,
        mut base: SsmBlockWeights,
        in_proj: QTensor,
        out_proj: QTensor,
        conv_weight: Option<QTensor>,
        x_proj: Option<QTensor>,
        dt_proj: Option<QTensor>,
        acts: Option<ActScales>,
    ) -> Result<Self> {
        if profile.quantizes_activations() && acts.is_none() {
            return Err(Error::Calibration(format!(
                "{profile} block needs activation scales"
            )));
        }
        base.in_proj = dequantize(&in_proj);
        base.out_proj = dequantize(&out_proj);
        if let Some(q) = &conv_weight {
            base.conv_weight = dequantize(q);
        }
        if let Some(q) = &x_proj {
            base.x_proj = Some(dequantize(q));
        }
        if let Some(q) = &dt_proj {
            base.dt_proj = Some(dequantize(q));
        }
        base.validate()?;
        Ok(Self {
            profile,
            in_proj,
            out_proj,
            conv_weight,
            x_proj,
            dt_proj,
            acts,
            base,
        })
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        self.forward_with(u, &mut NoHook, None, false)
    }

    /// With `quantize_state`, the carried state is rounded to 8 bits with the
    /// calibrated state scales after the call.
    pub fn forward_with(
        &self,
        u: &Tensor,
        hook: &mut dyn SiteHook,
        state: Option<&mut SsmState>,
        quantize_state: bool,
    ) -> Result<Tensor> {
        let state_layout = if quantize_state {
            Some(
                self.acts
                    .as_ref()
                    .and_then(|a| a.state.as_ref())
                    .ok_or_else(|| Error::Calibration("no state scales calibrated".into()))?,
            )
        } else {
            None
        };
        let Some(acts) = self
            .acts
            .as_ref()
            .filter(|_| self.profile.quantizes_activations())
        else {
            let inp = |x: &Tensor| linear(x, &self.base.in_proj);
            let out = |y: &Tensor| linear(y, &self.base.out_proj);
            let exec = Exec {
                w: &self.base,
                in_proj: &inp,
                out_proj: &out,
                state_layout,
                mode: ScanMode::Sequential,
                fused_online_hadamard: false,
            };
            return run(&exec, u, hook, state);
        };

        let inp = |x: &Tensor| {
            let xq = quantize(x, &ScaleLayout::per_tensor(acts.u), ACT_BITS)?;
            int_gemm(&xq, &self.in_proj)
        };
        let had = self.base.online_hadamard();
        let out = |y: &Tensor| {
            let yq = if had {
                let plan = HadamardPlan::new(self.base.dims.d_inner, Normalize::None)?
                    .with_output_scale(acts.y);
                hadamard_quantize(y, &plan, ACT_BITS)?
            } else {
                quantize(y, &ScaleLayout::per_tensor(acts.y), ACT_BITS)?
            };
            int_gemm(&yq, &self.out_proj)
        };
        let exec = Exec {
            w: &self.base,
            in_proj: &inp,
            out_proj: &out,
            state_layout,
            mode: ScanMode::Sequential,
            fused_online_hadamard: had,
        };
        let mut qhook = ActQuant { acts, inner: hook };
        run(&exec, u, &mut qhook, state)
    }
}

struct ActQuant<'a> {
    acts: &'a ActScales,
    inner: &'a mut dyn SiteHook,
}

impl SiteHook for ActQuant<'_> {
    fn visit(&mut self, site: Site, t: &mut Tensor) -> Result<()> {
        let a = self.acts;
        let layout = match site {
            Site::Z => Some(ScaleLayout::per_tensor(a.z)),
            Site::Dt => Some(ScaleLayout::per_tensor(a.dt)),
            Site::X => Some(a.x.clone()),
            Site::B => Some(a.b.clone()),
            Site::C => Some(a.c.clone()),
            _ => None,
        };
        if let Some(l) = layout {
            *t = fake_quantize(t, &l, ACT_BITS)?;
        }
        self.inner.visit(site, t)
    }

    fn wants_state(&self) -> bool {
        self.inner.wants_state()
    }
}

/// Quantized block forward for any profile.
pub fn block_forward_quantized(u: &Tensor, qb: &QuantBlock) -> Result<Tensor> {
    qb.forward(u)
}
