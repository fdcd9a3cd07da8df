//! Stacked-block language models: float reference, quantized variant, toy
//! generator and archive I/O.

mod float;
mod io;
mod quant;
mod toy;

pub use float::FloatModel;
pub use io::{load_float, load_quant, model_kind, put_meta, ModelKind, CONFIG_ENTRY};
pub use quant::{QuantModel, WeightStore};
pub use toy::{gen_toy_model, synthetic_tokens, ToySpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{BlockDims, NoHook, SiteHook, SsmState, Variant};
use crate::tensor::{rms_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dims: BlockDims,
    pub n_blocks: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            dims: match variant {
                Variant::Mamba1 => BlockDims::toy_mamba1(),
                Variant::Mamba2 => BlockDims::toy(),
            },
            n_blocks: 4,
            vocab: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate(self.variant)?;
        if self.n_blocks == 0 || self.vocab == 0 {
            return Err(Error::shape("model needs at least one block and one token"));
        }
        Ok(())
    }
}

/// Per-block hooks for a whole-model forward.
pub trait ModelHook {
    fn block(&mut self, i: usize) -> &mut dyn SiteHook;

    /// Residual stream after block `i`.
    fn residual(&mut self, _i: usize, _h: &Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct NoModelHook(NoHook);

impl ModelHook for NoModelHook {
    fn block(&mut self, _: usize) -> &mut dyn SiteHook {
        &mut self.0
    }
}

impl<H: SiteHook> ModelHook for Vec<H> {
    fn block(&mut self, i: usize) -> &mut dyn SiteHook {
        &mut self[i]
    }
}

/// Collects the residual stream after every block.
#[derive(Default)]
pub struct ResidualTrace {
    inner: NoHook,
    pub residuals: Vec<Tensor>,
}

impl ModelHook for ResidualTrace {
    fn block(&mut self, _: usize) -> &mut dyn SiteHook {
        &mut self.inner
    }

    fn residual(&mut self, _: usize, h: &Tensor) -> Result<()> {
        self.residuals.push(h.clone());
        Ok(())
    }
}

pub(crate) fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::shape("empty token sequence"));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::shape(format!(
            "token {t} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

pub(crate) fn gather_embedding(table: &Tensor, tokens: &[u32]) -> Result<Tensor> {
    let (vocab, d) = table.dims2()?;
    check_tokens(tokens, vocab)?;
    let mut out = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        out.extend_from_slice(table.row(t as usize));
    }
    Tensor::new(vec![tokens.len(), d], out)
}

/// Embedding → (pre-norm → block → residual add)* → final norm → head.
pub trait LanguageModel: Sync {
    fn config(&self) -> &ModelConfig;
    fn embed(&self, tokens: &[u32]) -> Result<Tensor>;
    fn pre_norm(&self, i: usize) -> &[f32];
    fn block_forward(
        &self,
        i: usize,
        u: &Tensor,
        hook: &mut dyn SiteHook,
        state: Option<&mut SsmState>,
    ) -> Result<Tensor>;
    fn final_norm(&self) -> &[f32];
    fn lm_head(&self, x: &Tensor) -> Result<Tensor>;
    fn init_states(&self) -> Vec<SsmState>;

    /// Residual stream is carried in the normalized Hadamard basis.
    fn rotated(&self) -> bool {
        false
    }

    fn forward_with(
        &self,
        tokens: &[u32],
        hooks: &mut dyn ModelHook,
        mut states: Option<&mut [SsmState]>,
    ) -> Result<Tensor> {
        let n = self.config().n_blocks;
        if let Some(s) = &states {
            if s.len() != n {
                return Err(Error::shape("one state per block required"));
            }
        }
        let mut h = self.embed(tokens)?;
        for i in 0..n {
            let u = rms_norm(&h, self.pre_norm(i))?;
            let st = states.as_deref_mut().map(|s| &mut s[i]);
            let o = self.block_forward(i, &u, hooks.block(i), st)?;
            for (a, b) in h.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
            hooks.residual(i, &h)?;
        }
        let x = rms_norm(&h, self.final_norm())?;
        self.lm_head(&x)
    }

    fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_with(tokens, &mut NoModelHook::default(), None)
    }
}
