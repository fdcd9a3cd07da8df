use super::{gather_embedding, LanguageModel, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{dequantize, QTensor};
use crate::ssm::{Profile, QuantBlock, SiteHook, SsmState};
use crate::tensor::{linear, Tensor};

/// Embedding or head weights, kept in float or quantized form.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightStore {
    Float(Tensor),
    /// `dense` is the dequantized copy used at run time.
    Quant {
        q: QTensor,
        dense: Tensor,
    },
}

impl WeightStore {
    pub fn quant(q: QTensor) -> Self {
        let dense = dequantize(&q);
        WeightStore::Quant { q, dense }
    }

    pub fn dense(&self) -> &Tensor {
        match self {
            WeightStore::Float(t) => t,
            WeightStore::Quant { dense, .. } => dense,
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            WeightStore::Float(_) => 32,
            WeightStore::Quant { q, .. } => q.bits(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub config: ModelConfig,
    pub embedding: WeightStore,
    pub norms: Vec<Tensor>,
    pub blocks: Vec<QuantBlock>,
    pub final_norm: Tensor,
    pub head: WeightStore,
    pub rotated: bool,
    /// Round each block's carried state to 8 bits between calls.
    pub quantize_state: bool,
}

impl QuantModel {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let dm = c.dims.d_model;
        if self.embedding.dense().shape() != [c.vocab, dm]
            || self.head.dense().shape() != [c.vocab, dm]
        {
            return Err(Error::shape("embedding/head must be [vocab × d_model]"));
        }
        if self.norms.len() != c.n_blocks || self.blocks.len() != c.n_blocks {
            return Err(Error::shape("one norm and one block per layer"));
        }
        for b in &self.blocks {
            if b.base.variant != c.variant || b.base.dims != c.dims {
                return Err(Error::shape("block variant/dims differ from model config"));
            }
            b.base.validate()?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Vec<Profile> {
        self.blocks.iter().map(|b| b.profile).collect()
    }
}

impl LanguageModel for QuantModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        gather_embedding(self.embedding.dense(), tokens)
    }

    fn pre_norm(&self, i: usize) -> &[f32] {
        self.norms[i].data()
    }

    fn block_forward(
        &self,
        i: usize,
        u: &Tensor,
        hook: &mut dyn SiteHook,
        state: Option<&mut SsmState>,
    ) -> Result<Tensor> {
        let q = self.quantize_state && state.is_some();
        self.blocks[i].forward_with(u, hook, state, q)
    }

    fn final_norm(&self) -> &[f32] {
        self.final_norm.data()
    }

    fn lm_head(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, self.head.dense())
    }

    fn init_states(&self) -> Vec<SsmState> {
        self.blocks
            .iter()
            .map(|b| SsmState::zeros(&b.base))
            .collect()
    }

    fn rotated(&self) -> bool {
        self.rotated
    }
}
