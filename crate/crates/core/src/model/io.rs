use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FloatModel, ModelConfig, QuantModel, WeightStore};
use crate::archive::{ArchiveExt, ArchiveMap, ArchiveValue};
use crate::error::{Error, Result};
use crate::ssm::{ActScales, Profile, QuantBlock, SsmBlockWeights};
use crate::tensor::Tensor;

pub const CONFIG_ENTRY: &str = "model.config";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Float,
    Quant,
}

#[derive(Serialize, Deserialize)]
struct ConfigMeta {
    kind: ModelKind,
    config: ModelConfig,
    rotated: bool,
    #[serde(default)]
    quantize_state: bool,
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    rewrites: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    acts: Option<ActScales>,
}

fn block_key(i: usize, field: &str) -> String {
    format!("blocks.{i}.{field}")
}

fn put(map: &mut ArchiveMap, name: String, v: impl Into<ArchiveValue>) {
    map.insert(name, v.into());
}

fn put_store(map: &mut ArchiveMap, name: &str, w: &WeightStore) {
    match w {
        WeightStore::Float(t) => put(map, name.into(), t.clone()),
        WeightStore::Quant { q, .. } => put(map, name.into(), q.clone()),
    }
}

fn get_store(map: &ArchiveMap, name: &str) -> Result<WeightStore> {
    match map.get(name) {
        Some(ArchiveValue::Tensor(t)) => Ok(WeightStore::Float(t.clone())),
        Some(ArchiveValue::Quantized(q)) => Ok(WeightStore::quant(q.clone())),
        Some(_) => Err(Error::Archive(format!("`{name}` is not a weight tensor"))),
        None => Err(Error::MissingEntry(name.into())),
    }
}

fn write_common(
    map: &mut ArchiveMap,
    meta: ConfigMeta,
    embedding: &WeightStore,
    norms: &[Tensor],
    final_norm: &Tensor,
    head: &WeightStore,
) -> Result<()> {
    put(map, CONFIG_ENTRY.into(), serde_json::to_value(meta)?);
    put_store(map, "embedding", embedding);
    put_store(map, "head", head);
    put(map, "final_norm".into(), final_norm.clone());
    for (i, n) in norms.iter().enumerate() {
        put(map, format!("norms.{i}"), n.clone());
    }
    Ok(())
}

impl FloatModel {
    pub fn to_archive(&self) -> Result<ArchiveMap> {
        let mut map = ArchiveMap::new();
        let meta = ConfigMeta {
            kind: ModelKind::Float,
            config: self.config,
            rotated: self.rotated,
            quantize_state: false,
        };
        write_common(
            &mut map,
            meta,
            &WeightStore::Float(self.embedding.clone()),
            &self.norms,
            &self.final_norm,
            &WeightStore::Float(self.head.clone()),
        )?;
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named_tensors() {
                put(&mut map, block_key(i, name), t.clone());
            }
            let bm = BlockMeta {
                rewrites: b.rewrites.clone(),
                profile: None,
                acts: None,
            };
            put(&mut map, block_key(i, "meta"), serde_json::to_value(bm)?);
        }
        Ok(map)
    }
}

impl QuantModel {
    pub fn to_archive(&self) -> Result<ArchiveMap> {
        let mut map = ArchiveMap::new();
        let meta = ConfigMeta {
            kind: ModelKind::Quant,
            config: self.config,
            rotated: self.rotated,
            quantize_state: self.quantize_state,
        };
        write_common(
            &mut map,
            meta,
            &self.embedding,
            &self.norms,
            &self.final_norm,
            &self.head,
        )?;
        for (i, qb) in self.blocks.iter().enumerate() {
            let mut quantized: Vec<(&str, &crate::quant::QTensor)> =
                vec![("in_proj", &qb.in_proj), ("out_proj", &qb.out_proj)];
            if let Some(q) = &qb.conv_weight {
                quantized.push(("conv_weight", q));
            }
            if let Some(q) = &qb.x_proj {
                quantized.push(("x_proj", q));
            }
            if let Some(q) = &qb.dt_proj {
                quantized.push(("dt_proj", q));
            }
            for (name, t) in qb.base.named_tensors() {
                match quantized.iter().find(|(n, _)| *n == name) {
                    Some((_, q)) => put(&mut map, block_key(i, name), (*q).clone()),
                    None => put(&mut map, block_key(i, name), t.clone()),
                }
            }
            let bm = BlockMeta {
                rewrites: qb.base.rewrites.clone(),
                profile: Some(qb.profile),
                acts: qb.acts.clone(),
            };
            put(&mut map, block_key(i, "meta"), serde_json::to_value(bm)?);
        }
        Ok(map)
    }
}

fn read_config(map: &ArchiveMap) -> Result<ConfigMeta> {
    let meta: ConfigMeta = serde_json::from_value(map.meta(CONFIG_ENTRY)?.clone())?;
    meta.config.validate()?;
    Ok(meta)
}

pub fn model_kind(map: &ArchiveMap) -> Result<ModelKind> {
    Ok(read_config(map)?.kind)
}

fn read_block_meta(map: &ArchiveMap, i: usize) -> Result<BlockMeta> {
    Ok(serde_json::from_value::<BlockMeta>(
        map.meta(&block_key(i, "meta"))?.clone(),
    )?)
}

/// Float view of a block; quantized entries are dequantized.
fn read_block(
    map: &ArchiveMap,
    i: usize,
    cfg: &ModelConfig,
    rewrites: Vec<String>,
) -> Result<SsmBlockWeights> {
    let dense =
        |name: &str| -> Result<Tensor> { Ok(get_store(map, &block_key(i, name))?.dense().clone()) };
    let opt = |name: &str| -> Result<Option<Tensor>> {
        if map.contains_key(&block_key(i, name)) {
            dense(name).map(Some)
        } else {
            Ok(None)
        }
    };
    let w = SsmBlockWeights {
        variant: cfg.variant,
        dims: cfg.dims,
        in_proj: dense("in_proj")?,
        conv_weight: dense("conv_weight")?,
        conv_bias: dense("conv_bias")?,
        x_proj: opt("x_proj")?,
        dt_proj: opt("dt_proj")?,
        a_log: dense("a_log")?,
        d_param: dense("d_param")?,
        dt_bias: dense("dt_bias")?,
        norm_weight: dense("norm_weight")?,
        out_proj: dense("out_proj")?,
        rewrites,
    };
    w.validate()?;
    Ok(w)
}

fn norms(map: &ArchiveMap, n: usize) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| map.tensor(&format!("norms.{i}")).cloned())
        .collect()
}

pub fn load_float(map: &ArchiveMap) -> Result<FloatModel> {
    let meta = read_config(map)?;
    if meta.kind != ModelKind::Float {
        return Err(Error::Archive("expected a float model archive".into()));
    }
    let cfg = meta.config;
    let blocks = (0..cfg.n_blocks)
        .map(|i| read_block(map, i, &cfg, read_block_meta(map, i)?.rewrites))
        .collect::<Result<Vec<_>>>()?;
    let m = FloatModel {
        config: cfg,
        embedding: map.tensor("embedding")?.clone(),
        norms: norms(map, cfg.n_blocks)?,
        blocks,
        final_norm: map.tensor("final_norm")?.clone(),
        head: map.tensor("head")?.clone(),
        rotated: meta.rotated,
    };
    m.validate()?;
    Ok(m)
}

pub fn load_quant(map: &ArchiveMap) -> Result<QuantModel> {
    let meta = read_config(map)?;
    if meta.kind != ModelKind::Quant {
        return Err(Error::Archive("expected a quantized model archive".into()));
    }
    let cfg = meta.config;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let bm = read_block_meta(map, i)?;
        let profile = bm
            .profile
            .ok_or_else(|| Error::Archive(format!("block {i} has no profile")))?;
        let base = read_block(map, i, &cfg, bm.rewrites)?;
        let q = |name: &str| -> Result<Option<crate::quant::QTensor>> {
            match map.get(&block_key(i, name)) {
                Some(ArchiveValue::Quantized(q)) => Ok(Some(q.clone())),
                _ => Ok(None),
            }
        };
        let in_proj = map.qtensor(&block_key(i, "in_proj"))?.clone();
        let out_proj = map.qtensor(&block_key(i, "out_proj"))?.clone();
        blocks.push(QuantBlock::new(
            profile,
            base,
            in_proj,
            out_proj,
            q("conv_weight")?,
            q("x_proj")?,
            q("dt_proj")?,
            bm.acts,
        )?);
    }
    let m = QuantModel {
        config: cfg,
        embedding: get_store(map, "embedding")?,
        norms: norms(map, cfg.n_blocks)?,
        blocks,
        final_norm: map.tensor("final_norm")?.clone(),
        head: get_store(map, "head")?,
        rotated: meta.rotated,
        quantize_state: meta.quantize_state,
    };
    m.validate()?;
    Ok(m)
}

/// Metadata value stored next to a model, e.g. reorder plans.
pub fn put_meta(map: &mut ArchiveMap, name: &str, v: Value) -> Result<()> {
    if map.contains_key(name) {
        return Err(Error::NameCollision(name.into()));
    }
    map.insert(name.into(), ArchiveValue::Meta(v));
    Ok(())
}
