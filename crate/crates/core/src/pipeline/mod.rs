//! End-to-end quantization: calibrate → reorder → rotate → recalibrate →
//! quantize weights and scales → embedding and head.

mod eval;

pub use eval::{evaluate, BlockError, EvalReport, SCHEMA_VERSION};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    build_state_group_scales, calibrate_site_scale, collect_stats, sort_and_cluster, ClusterMap,
    ModelStats, RecordSpec,
};
use crate::error::{Error, Result};
use crate::model::{FloatModel, QuantModel, WeightStore};
use crate::quant::{
    gptq_or_rtn, quantize, rtn_quantize_weight, LayoutKind, ScaleLayout, DEFAULT_DAMP_RATIO,
};
use crate::reorder::{apply_reorder, build_reorder_plan, ReorderPlan};
use crate::ssm::{ActScales, Profile, QuantBlock, Site, Variant, ACT_BITS, REWRITE_REORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            seq_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileChoice {
    W8A8,
    W4A8,
    W4A16,
    /// Per-block profiles from `PipelineConfig::plan`.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub archive: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Every pipeline knob. Weight per-group quantization is always on; the
/// boolean stages can be toggled independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model_path: Option<PathBuf>,
    pub calib: CalibConfig,
    pub profile: ProfileChoice,
    /// Block profiles for `Mixed`.
    pub plan: Option<Vec<Profile>>,
    pub m: usize,
    pub n: usize,
    /// Must match the model when given.
    pub n_state_groups: Option<usize>,
    pub clip_percentile: Option<f32>,
    pub gptq: bool,
    pub hadamard: bool,
    pub reorder: bool,
    pub per_state_group: bool,
    pub sort_and_cluster: bool,
    pub group_size: usize,
    pub head_group_size: usize,
    /// 4, 8, or 16 (kept in float).
    pub embedding_bits: u32,
    pub head_bits: u32,
    pub quantize_state: bool,
    pub output: OutputPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            calib: CalibConfig::default(),
            profile: ProfileChoice::W4A8,
            plan: None,
            m: 4,
            n: 4,
            n_state_groups: None,
            clip_percentile: None,
            gptq: true,
            hadamard: true,
            reorder: true,
            per_state_group: true,
            sort_and_cluster: true,
            group_size: 32,
            head_group_size: 32,
            embedding_bits: 16,
            head_bits: 16,
            quantize_state: false,
            output: OutputPaths::default(),
        }
    }
}

impl PipelineConfig {
    /// The five ablation rows in order: per-group weights only, then adding
    /// Hadamard, GPTQ, per-state-group B/C, and sort-and-cluster `x`.
    pub fn ablation_rows() -> Vec<(&'static str, PipelineConfig)> {
        let base = PipelineConfig {
            profile: ProfileChoice::W4A8,
            gptq: false,
            hadamard: false,
            reorder: false,
            per_state_group: false,
            sort_and_cluster: false,
            ..Default::default()
        };
        let had = PipelineConfig {
            hadamard: true,
            ..base.clone()
        };
        let gptq = PipelineConfig {
            gptq: true,
            ..had.clone()
        };
        let persg = PipelineConfig {
            per_state_group: true,
            ..gptq.clone()
        };
        let snc = PipelineConfig {
            sort_and_cluster: true,
            reorder: true,
            ..persg.clone()
        };
        vec![
            ("PerG", base),
            ("PerG+Had", had),
            ("PerG+GPTQ+Had", gptq),
            ("+PerSG", persg),
            ("+SnC", snc),
        ]
    }

    pub fn block_profiles(&self, n_blocks: usize) -> Result<Vec<Profile>> {
        Ok(match self.profile {
            ProfileChoice::W8A8 => vec![Profile::W8A8; n_blocks],
            ProfileChoice::W4A8 => vec![Profile::W4A8; n_blocks],
            ProfileChoice::W4A16 => vec![Profile::W4A16; n_blocks],
            ProfileChoice::Mixed => {
                let p = self
                    .plan
                    .clone()
                    .ok_or_else(|| Error::Pipeline("mixed profile needs a plan".into()))?;
                if p.len() != n_blocks {
                    return Err(Error::Pipeline(format!(
                        "plan has {} entries for {n_blocks} blocks",
                        p.len()
                    )));
                }
                p
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Pipeline(m.into()));
        if self.calib.n_samples == 0 || self.calib.seq_len == 0 {
            return bad("calibration needs at least one token");
        }
        if self.m == 0 || self.n == 0 {
            return bad("m and n must be positive");
        }
        if self.group_size == 0 || self.head_group_size == 0 {
            return bad("group sizes must be positive");
        }
        for b in [self.embedding_bits, self.head_bits] {
            if ![4, 8, 16].contains(&b) {
                return bad("embedding/head bits must be 4, 8 or 16");
            }
        }
        if let Some(p) = self.clip_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return bad("clip percentile must lie in (0, 100]");
            }
        }
        Ok(())
    }

    fn needs_clusters(&self) -> bool {
        self.sort_and_cluster || self.reorder
    }
}

/// Everything computed before weights are rounded; shared by every profile.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Reordered and/or rotated float model.
    pub model: FloatModel,
    pub stats: ModelStats,
    /// Cluster maps in the coordinates of `model`.
    pub cmaps: Vec<Option<ClusterMap>>,
    pub plans: Vec<Option<ReorderPlan>>,
}

fn check_stage_order(float: &FloatModel, cfg: &PipelineConfig) -> Result<()> {
    let reordered = float
        .blocks
        .iter()
        .filter(|b| b.has_rewrite(REWRITE_REORDER))
        .count();
    if reordered != 0 && reordered != float.blocks.len() {
        return Err(Error::Pipeline("archive is partially reordered".into()));
    }
    if reordered != 0 && cfg.reorder {
        return Err(Error::Pipeline("archive is already reordered".into()));
    }
    if float.rotated || float.blocks.iter().any(|b| b.online_hadamard()) {
        return Err(Error::Pipeline(
            "input must be an unrotated float model".into(),
        ));
    }
    if let Some(g) = cfg.n_state_groups {
        if g != float.config.dims.n_state_groups {
            return Err(Error::Pipeline(format!(
                "config asks for {g} state groups, model has {}",
                float.config.dims.n_state_groups
            )));
        }
    }
    Ok(())
}

fn calib_spec(cfg: &PipelineConfig, variant: Variant) -> RecordSpec {
    let mut capture = Vec::new();
    if cfg.gptq {
        capture.extend([Site::U, Site::Y, Site::YHad]);
        if variant == Variant::Mamba1 {
            capture.push(Site::X);
        }
    }
    let mut sites = vec![
        Site::U,
        Site::Z,
        Site::X,
        Site::B,
        Site::C,
        Site::Dt,
        Site::Y,
        Site::YHad,
    ];
    if cfg.quantize_state {
        sites.push(Site::State);
    }
    RecordSpec {
        sites,
        keep_values: if cfg.clip_percentile.is_some() {
            vec![Site::X]
        } else {
            vec![]
        },
        capture_rows: capture,
    }
}

/// Stages up to and including recalibration on the rewritten model.
pub fn prepare(float: &FloatModel, calib: &[Vec<u32>], cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    float.validate()?;
    check_stage_order(float, cfg)?;
    let d = float.config.dims;
    let nb = float.config.n_blocks;
    let mut model = float.clone();
    let mut cmaps = vec![None; nb];
    let mut plans = vec![None; nb];
    if cfg.needs_clusters() {
        let spec = RecordSpec {
            sites: vec![Site::X],
            ..Default::default()
        };
        let st = collect_stats(&model, calib, &spec)?;
        let m = cfg.m.min(d.heads_per_group());
        let n = cfg.n.min(d.head_dim);
        for i in 0..nb {
            let cm = sort_and_cluster(
                st.site(i, Site::X)?,
                d.n_heads,
                d.head_dim,
                d.n_state_groups,
                m,
                n,
            )?;
            if cfg.reorder {
                let plan = build_reorder_plan(&cm, &d)?;
                model.blocks[i] = apply_reorder(&model.blocks[i], &plan)?;
                cmaps[i] = Some(cm.reordered());
                plans[i] = Some(plan);
            } else {
                cmaps[i] = Some(cm);
            }
        }
    }
    if cfg.hadamard {
        model = model.fuse_hadamard()?;
    }
    let stats = collect_stats(&model, calib, &calib_spec(cfg, float.config.variant))?;
    Ok(Prepared {
        model,
        stats,
        cmaps,
        plans,
    })
}

fn quantize_weight(
    w: &crate::tensor::Tensor,
    rows: Option<&crate::tensor::Tensor>,
    bits: u32,
    group: usize,
) -> Result<crate::quant::QTensor> {
    match rows {
        Some(x) => Ok(gptq_or_rtn(w, x, bits, group, DEFAULT_DAMP_RATIO)?.0),
        None => rtn_quantize_weight(w, bits, group),
    }
}

fn act_scales(prep: &Prepared, i: usize, cfg: &PipelineConfig) -> Result<ActScales> {
    let st = &prep.stats;
    let w = &prep.model.blocks[i];
    let d = w.dims;
    let site = |s: Site| calibrate_site_scale(st.site(i, s)?, ACT_BITS, None);
    let x_stats = st.site(i, Site::X)?;
    let cmap = match (&prep.cmaps[i], cfg.sort_and_cluster) {
        (Some(cm), true) => {
            let mut cm = cm.clone();
            cm.rescale(&x_stats.channel_max, ACT_BITS)?;
            Some(cm)
        }
        _ => None,
    };
    let x = match &cmap {
        Some(cm) => cm.x_layout(),
        None => ScaleLayout::per_tensor(calibrate_site_scale(
            x_stats,
            ACT_BITS,
            cfg.clip_percentile,
        )?),
    };
    let (b, c) = if cfg.per_state_group {
        let sg = build_state_group_scales(
            st.site(i, Site::B)?,
            st.site(i, Site::C)?,
            d.n_state_groups,
            d.d_state,
        )?;
        (sg.b_layout(), sg.c_layout())
    } else {
        (
            ScaleLayout::per_tensor(site(Site::B)?),
            ScaleLayout::per_tensor(site(Site::C)?),
        )
    };
    let y = if w.online_hadamard() {
        site(Site::YHad)?
    } else {
        site(Site::Y)?
    };
    let state = if cfg.quantize_state {
        let s = st.site(i, Site::State)?;
        Some(match &cmap {
            Some(cm) => cm.state_layout(&s.channel_max, d.d_state, ACT_BITS)?,
            None => ScaleLayout::per_tensor(calibrate_site_scale(s, ACT_BITS, None)?),
        })
    } else {
        None
    };
    Ok(ActScales {
        u: site(Site::U)?,
        z: site(Site::Z)?,
        dt: site(Site::Dt)?,
        x,
        b,
        c,
        y,
        state,
    })
}

/// Quantize block `i` of a prepared model under one profile.
pub fn quantize_block(
    prep: &Prepared,
    i: usize,
    profile: Profile,
    cfg: &PipelineConfig,
) -> Result<QuantBlock> {
    let w = &prep.model.blocks[i];
    let bits = profile.weight_bits();
    let g = cfg.group_size;
    let rows = |s: Site| -> Result<Option<&crate::tensor::Tensor>> {
        if cfg.gptq {
            prep.stats.captured(i, s).map(Some)
        } else {
            Ok(None)
        }
    };
    let y_site = if w.online_hadamard() {
        Site::YHad
    } else {
        Site::Y
    };
    let in_proj = quantize_weight(&w.in_proj, rows(Site::U)?, bits, g)?;
    let out_proj = quantize_weight(&w.out_proj, rows(y_site)?, bits, g)?;
    let (x_proj, dt_proj) = match (&w.x_proj, &w.dt_proj) {
        (Some(xp), Some(dp)) => (
            Some(quantize_weight(xp, rows(Site::X)?, bits, g)?),
            Some(rtn_quantize_weight(dp, bits, g)?),
        ),
        _ => (None, None),
    };
    let (conv_weight, acts) = if profile.quantizes_activations() {
        let conv = quantize(
            &w.conv_weight,
            &ScaleLayout::fit(&w.conv_weight, LayoutKind::PerRow, 8)?,
            8,
        )?;
        (Some(conv), Some(act_scales(prep, i, cfg)?))
    } else {
        (None, None)
    };
    QuantBlock::new(
        profile,
        w.clone(),
        in_proj,
        out_proj,
        conv_weight,
        x_proj,
        dt_proj,
        acts,
    )
}

/// Wrap quantized blocks with the (optionally quantized) embedding and head.
pub fn assemble(
    prep: &Prepared,
    blocks: Vec<QuantBlock>,
    cfg: &PipelineConfig,
) -> Result<QuantModel> {
    let m = &prep.model;
    let embedding = match cfg.embedding_bits {
        16 => WeightStore::Float(m.embedding.clone()),
        b => WeightStore::quant(quantize(
            &m.embedding,
            &ScaleLayout::fit(&m.embedding, LayoutKind::PerRow, b)?,
            b,
        )?),
    };
    let head = match cfg.head_bits {
        16 => WeightStore::Float(m.head.clone()),
        b => WeightStore::quant(rtn_quantize_weight(&m.head, b, cfg.head_group_size)?),
    };
    let q = QuantModel {
        config: m.config,
        embedding,
        norms: m.norms.clone(),
        blocks,
        final_norm: m.final_norm.clone(),
        head,
        rotated: m.rotated,
        quantize_state: cfg.quantize_state,
    };
    q.validate()?;
    Ok(q)
}

/// Result of [`quantize`]: the model plus what was decided along the way.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub model: QuantModel,
    pub prepared: Prepared,
}

pub fn quantize_model(
    float: &FloatModel,
    calib: &[Vec<u32>],
    cfg: &PipelineConfig,
) -> Result<Quantized> {
    let prep = prepare(float, calib, cfg)?;
    let profiles = cfg.block_profiles(float.config.n_blocks)?;
    let blocks = profiles
        .iter()
        .enumerate()
        .map(|(i, &p)| quantize_block(&prep, i, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let model = assemble(&prep, blocks, cfg)?;
    Ok(Quantized {
        model,
        prepared: prep,
    })
}

impl Quantized {
    /// Archive entries: the model plus per-block cluster maps and reorder plans.
    pub fn to_archive(&self) -> Result<crate::archive::ArchiveMap> {
        let mut map = self.model.to_archive()?;
        for (i, cm) in self.prepared.cmaps.iter().enumerate() {
            if let Some(cm) = cm {
                crate::model::put_meta(
                    &mut map,
                    &format!("blocks.{i}.cluster_map"),
                    serde_json::to_value(cm)?,
                )?;
            }
        }
        for (i, p) in self.prepared.plans.iter().enumerate() {
            if let Some(p) = p {
                crate::model::put_meta(
                    &mut map,
                    &format!("blocks.{i}.reorder_plan"),
                    serde_json::to_value(p)?,
                )?;
            }
        }
        Ok(map)
    }
}
