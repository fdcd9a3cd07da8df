//! Offline channel reordering of SSM block weights.
//!
//! Permuting the `x` channels permutes `y` identically, so rewriting the
//! producers of `x`/`z` and the consumer of `y` leaves the block output
//! unchanged while runtime activations come out already sorted.

use serde::{Deserialize, Serialize};

use crate::calibrate::ClusterMap;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::ssm::{BlockDims, SsmBlockWeights, Variant, REWRITE_HADAMARD, REWRITE_REORDER};
use crate::tensor::Tensor;

/// `perm[new] = old` over `d_inner`, plus the head-level permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub n_heads: usize,
    pub head_dim: usize,
    pub perm: Vec<usize>,
    pub head_perm: Vec<usize>,
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (new, &old) in p.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

fn is_perm(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n
        && p.iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

impl ReorderPlan {
    pub fn identity(n_heads: usize, head_dim: usize) -> Self {
        Self {
            n_heads,
            head_dim,
            perm: (0..n_heads * head_dim).collect(),
            head_perm: (0..n_heads).collect(),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            perm: invert(&self.perm),
            head_perm: invert(&self.head_perm),
            ..self.clone()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.head_dim;
        if !is_perm(&self.perm, self.n_heads * p) || !is_perm(&self.head_perm, self.n_heads) {
            return Err(Error::Reorder("plan is not a bijection".into()));
        }
        for (i, &old) in self.perm.iter().enumerate() {
            if old / p != self.head_perm[i / p] {
                return Err(Error::Reorder("channel moved out of its head".into()));
            }
        }
        Ok(())
    }

    /// Random head- and channel-level shuffle that keeps heads inside their
    /// state group.
    pub fn random(dims: &BlockDims, rng: &mut Rng) -> Self {
        let hpg = dims.heads_per_group();
        let mut cmap = ClusterMap::trivial(dims.n_heads, dims.head_dim, dims.n_state_groups, 1.0);
        for g in 0..dims.n_state_groups {
            let local = rng.permutation(hpg);
            for (i, &h) in local.iter().enumerate() {
                cmap.head_perm[g * hpg + i] = g * hpg + h;
            }
        }
        for cp in &mut cmap.channel_perm {
            *cp = rng.permutation(dims.head_dim);
        }
        build_reorder_plan(&cmap, dims).expect("random cluster map is consistent")
    }
}

pub fn build_reorder_plan(cmap: &ClusterMap, dims: &BlockDims) -> Result<ReorderPlan> {
    cmap.validate()
        .map_err(|e| Error::Reorder(format!("inconsistent cluster map: {e}")))?;
    if cmap.n_heads != dims.n_heads
        || cmap.head_dim != dims.head_dim
        || cmap.n_state_groups != dims.n_state_groups
    {
        return Err(Error::Reorder(format!(
            "cluster map {}×{} (G={}) vs block {}×{} (G={})",
            cmap.n_heads,
            cmap.head_dim,
            cmap.n_state_groups,
            dims.n_heads,
            dims.head_dim,
            dims.n_state_groups
        )));
    }
    let plan = ReorderPlan {
        n_heads: cmap.n_heads,
        head_dim: cmap.head_dim,
        perm: cmap.permutation(),
        head_perm: cmap.head_perm.clone(),
    };
    plan.validate()?;
    Ok(plan)
}

fn gather_rows(t: &Tensor, start: usize, perm: &[usize]) -> Result<Tensor> {
    let (_, cols) = t.dims2()?;
    let mut out = t.clone();
    for (new, &old) in perm.iter().enumerate() {
        let src = t.row(start + old).to_vec();
        out.row_mut(start + new).copy_from_slice(&src);
    }
    debug_assert_eq!(out.last_dim(), cols);
    Ok(out)
}

fn gather_cols(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    if cols != perm.len() {
        return Err(Error::shape("column permutation width mismatch"));
    }
    let mut out = t.clone();
    for r in 0..rows {
        let src = t.row(r).to_vec();
        for (dst, &old) in out.row_mut(r).iter_mut().zip(perm) {
            *dst = src[old];
        }
    }
    Ok(out)
}

fn gather_vec(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = t.clone();
    let d = t.data();
    for (dst, &old) in out.data_mut().iter_mut().zip(perm) {
        *dst = d[old];
    }
    out
}

fn permute(w: &SsmBlockWeights, plan: &ReorderPlan) -> Result<SsmBlockWeights> {
    let d = &w.dims;
    if plan.n_heads != d.n_heads || plan.head_dim != d.head_dim {
        return Err(Error::Reorder(format!(
            "plan {}×{} vs block {}×{}",
            plan.n_heads, plan.head_dim, d.n_heads, d.head_dim
        )));
    }
    plan.validate()?;
    let pi = &plan.perm;
    let di = d.d_inner;
    let mut out = w.clone();
    let ip = gather_rows(&w.in_proj, 0, pi)?;
    out.in_proj = gather_rows(&ip, di, pi)?;
    out.conv_weight = gather_rows(&w.conv_weight, 0, pi)?;
    let mut cb = w.conv_bias.clone();
    for (new, &old) in pi.iter().enumerate() {
        cb.data_mut()[new] = w.conv_bias.data()[old];
    }
    out.conv_bias = cb;
    out.norm_weight = gather_vec(&w.norm_weight, pi);
    out.out_proj = gather_cols(&w.out_proj, pi)?;
    match w.variant {
        Variant::Mamba2 => {
            let hp = &plan.head_perm;
            let (dt_start, _) = w.in_proj_slices()[4];
            out.in_proj = gather_rows(&out.in_proj, dt_start, hp)?;
            out.a_log = gather_rows(&w.a_log, 0, hp)?;
            out.d_param = gather_vec(&w.d_param, hp);
            out.dt_bias = gather_vec(&w.dt_bias, hp);
        }
        Variant::Mamba1 => {
            let xp = w
                .x_proj
                .as_ref()
                .ok_or_else(|| Error::shape("Mamba1 block without x_proj"))?;
            let dp = w
                .dt_proj
                .as_ref()
                .ok_or_else(|| Error::shape("Mamba1 block without dt_proj"))?;
            out.x_proj = Some(gather_cols(xp, pi)?);
            out.dt_proj = Some(gather_rows(dp, 0, pi)?);
            out.a_log = gather_rows(&w.a_log, 0, pi)?;
            out.d_param = gather_vec(&w.d_param, pi);
            out.dt_bias = gather_vec(&w.dt_bias, pi);
        }
    }
    Ok(out)
}

/// Rewrite a block so its `x`, `z` and `y` channels appear in plan order.
///
/// Fails if the block was already reordered or already carries a fused
/// Hadamard rotation.
pub fn apply_reorder(w: &SsmBlockWeights, plan: &ReorderPlan) -> Result<SsmBlockWeights> {
    if w.has_rewrite(REWRITE_REORDER) {
        return Err(Error::Reorder("block is already reordered".into()));
    }
    if w.has_rewrite(REWRITE_HADAMARD) {
        return Err(Error::Reorder(
            "reorder must precede Hadamard fusion".into(),
        ));
    }
    w.validate()?;
    let mut out = permute(w, plan)?;
    out.rewrites.push(REWRITE_REORDER.into());
    Ok(out)
}

/// Undo [`apply_reorder`] given the same plan.
pub fn revert_reorder(w: &SsmBlockWeights, plan: &ReorderPlan) -> Result<SsmBlockWeights> {
    if w.rewrites.last().map(String::as_str) != Some(REWRITE_REORDER) {
        return Err(Error::Reorder(
            "reorder is not the last rewrite of this block".into(),
        ));
    }
    let mut out = permute(w, &plan.inverse())?;
    out.rewrites.pop();
    Ok(out)
}
