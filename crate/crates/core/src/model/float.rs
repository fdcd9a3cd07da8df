use super::{gather_embedding, LanguageModel, ModelConfig};
use crate::error::{Error, Result};
use crate::hadamard::{
    check_pow2, fuse_hadamard_block, fuse_hadamard_in_proj, fwht, HadamardPlan, Normalize,
};
use crate::ssm::{block_forward_float_with, ScanMode, SiteHook, SsmBlockWeights, SsmState};
use crate::tensor::{linear, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub config: ModelConfig,
    /// `[vocab × d_model]`.
    pub embedding: Tensor,
    /// Pre-norm weight of each block.
    pub norms: Vec<Tensor>,
    pub blocks: Vec<SsmBlockWeights>,
    pub final_norm: Tensor,
    /// `[vocab × d_model]`.
    pub head: Tensor,
    pub rotated: bool,
}

fn scale_cols(w: &Tensor, g: &[f32]) -> Tensor {
    let mut out = w.clone();
    for r in 0..out.n_rows() {
        for (v, gi) in out.row_mut(r).iter_mut().zip(g) {
            *v *= gi;
        }
    }
    out
}

impl FloatModel {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let dm = c.dims.d_model;
        let bad = |m: &str| Err(Error::shape(m.to_string()));
        if self.embedding.shape() != [c.vocab, dm] || self.head.shape() != [c.vocab, dm] {
            return bad("embedding/head must be [vocab × d_model]");
        }
        if self.norms.len() != c.n_blocks || self.blocks.len() != c.n_blocks {
            return bad("one norm and one block per layer");
        }
        if self
            .norms
            .iter()
            .chain([&self.final_norm])
            .any(|n| n.shape() != [dm])
        {
            return bad("norm weights must be [d_model]");
        }
        for b in &self.blocks {
            if b.variant != c.variant || b.dims != c.dims {
                return bad("block variant/dims differ from model config");
            }
            b.validate()?;
        }
        if !self.embedding.is_finite() || !self.head.is_finite() {
            return Err(Error::NonFinite("embedding/head".into()));
        }
        Ok(())
    }

    /// Rotate the residual stream by `H/√d_model`: norm weights are folded
    /// into the following projections, every block gets an online transform
    /// before `out_proj`, and logits are unchanged up to rounding.
    pub fn fuse_hadamard(&self) -> Result<FloatModel> {
        if self.rotated {
            return Err(Error::Pipeline("model is already rotated".into()));
        }
        let dm = self.config.dims.d_model;
        check_pow2(dm)?;
        let plan = HadamardPlan::new(dm, Normalize::InvSqrt)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&self.norms)
            .map(|(b, g)| fuse_hadamard_block(b, Some(g.data())))
            .collect::<Result<Vec<_>>>()?;
        let ones = Tensor::full(&[dm], 1.0);
        Ok(FloatModel {
            config: self.config,
            embedding: fwht(&self.embedding, &plan)?,
            norms: vec![ones.clone(); self.config.n_blocks],
            blocks,
            final_norm: ones,
            head: fuse_hadamard_in_proj(&scale_cols(&self.head, self.final_norm.data()))?,
            rotated: true,
        })
    }
}

impl LanguageModel for FloatModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        gather_embedding(&self.embedding, tokens)
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
        block_forward_float_with(u, &self.blocks[i], hook, state, ScanMode::Sequential)
    }

    fn final_norm(&self) -> &[f32] {
        self.final_norm.data()
    }

    fn lm_head(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.head)
    }

    fn init_states(&self) -> Vec<SsmState> {
        self.blocks.iter().map(SsmState::zeros).collect()
    }

    fn rotated(&self) -> bool {
        self.rotated
    }
}
