//! Model archive: a JSON manifest followed by one little-endian blob.
//!
//! ```text
//! [u64 LE header_len][header_len bytes of UTF-8 JSON manifest][blob]
//! ```
//!
//! The manifest is `{"format": "ssmq-archive", "version": 1, "entries": [...]}`
//! where each entry is `{name, dtype, shape, offset, length}` with `offset`
//! relative to the blob start. Entries are sorted by name, packed without gaps
//! and never overlap. `dtype` is one of `f32`, `i8`, `u4packed` (two signed
//! nibbles per byte along each row of the last axis, low nibble first) or
//! `json-meta` (a UTF-8 JSON document).
//!
//! A quantized tensor `w` occupies three entries: `w` (integer payload),
//! `w.scales` (`f32`) and `w.layout` (`json-meta`: `{"bits": .., "layout": ..}`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::quant::{payload_len, LayoutKind, Payload, QTensor, ScaleLayout};
use crate::tensor::Tensor;

pub const FORMAT: &str = "ssmq-archive";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "i8")]
    I8,
    #[serde(rename = "u4packed")]
    U4Packed,
    #[serde(rename = "json-meta")]
    JsonMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveValue {
    Tensor(Tensor),
    Quantized(QTensor),
    Meta(Value),
}

impl From<Tensor> for ArchiveValue {
    fn from(t: Tensor) -> Self {
        ArchiveValue::Tensor(t)
    }
}

impl From<QTensor> for ArchiveValue {
    fn from(q: QTensor) -> Self {
        ArchiveValue::Quantized(q)
    }
}

impl From<Value> for ArchiveValue {
    fn from(v: Value) -> Self {
        ArchiveValue::Meta(v)
    }
}

pub type ArchiveMap = BTreeMap<String, ArchiveValue>;

#[derive(Serialize, Deserialize)]
struct QLayoutMeta {
    bits: u32,
    layout: LayoutKind,
}

const SCALES_SUFFIX: &str = ".scales";
const LAYOUT_SUFFIX: &str = ".layout";

struct RawEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn expand(entries: &ArchiveMap) -> Result<BTreeMap<String, RawEntry>> {
    let mut raw: BTreeMap<String, RawEntry> = BTreeMap::new();
    let mut put = |name: String, e: RawEntry| -> Result<()> {
        if raw.contains_key(&name) {
            return Err(Error::NameCollision(name));
        }
        raw.insert(name, e);
        Ok(())
    };
    for (name, value) in entries {
        match value {
            ArchiveValue::Tensor(t) => {
                if !t.is_finite() {
                    return Err(Error::NonFinite(name.clone()));
                }
                put(
                    name.clone(),
                    RawEntry {
                        dtype: Dtype::F32,
                        shape: t.shape().to_vec(),
                        bytes: f32_bytes(t.data()),
                    },
                )?;
            }
            ArchiveValue::Quantized(q) => {
                let (dtype, bytes) = match q.payload() {
                    Payload::I8(v) => (Dtype::I8, v.iter().map(|&b| b as u8).collect()),
                    Payload::U4Packed(v) => (Dtype::U4Packed, v.clone()),
                };
                put(
                    name.clone(),
                    RawEntry {
                        dtype,
                        shape: q.shape().to_vec(),
                        bytes,
                    },
                )?;
                let scales = &q.layout().scales;
                put(
                    format!("{name}{SCALES_SUFFIX}"),
                    RawEntry {
                        dtype: Dtype::F32,
                        shape: vec![scales.len()],
                        bytes: f32_bytes(scales),
                    },
                )?;
                let meta = serde_json::to_vec(&QLayoutMeta {
                    bits: q.bits(),
                    layout: q.layout().kind.clone(),
                })?;
                put(
                    format!("{name}{LAYOUT_SUFFIX}"),
                    RawEntry {
                        dtype: Dtype::JsonMeta,
                        shape: vec![],
                        bytes: meta,
                    },
                )?;
            }
            ArchiveValue::Meta(v) => {
                put(
                    name.clone(),
                    RawEntry {
                        dtype: Dtype::JsonMeta,
                        shape: vec![],
                        bytes: serde_json::to_vec(v)?,
                    },
                )?;
            }
        }
    }
    Ok(raw)
}

/// Serialize to the archive byte format.
pub fn encode(entries: &ArchiveMap) -> Result<Vec<u8>> {
    let raw = expand(entries)?;
    let mut manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        entries: Vec::with_capacity(raw.len()),
    };
    let mut offset = 0u64;
    for (name, e) in &raw {
        manifest.entries.push(ManifestEntry {
            name: name.clone(),
            dtype: e.dtype,
            shape: e.shape.clone(),
            offset,
            length: e.bytes.len() as u64,
        });
        offset += e.bytes.len() as u64;
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in raw.values() {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

/// Parse and validate only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Archive(
            "file shorter than header length field".into(),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let hend = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Archive("declared header length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..hend])
        .map_err(|e| Error::Archive(format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Archive(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_len = (bytes.len() - hend) as u64;
    let mut seen = std::collections::BTreeSet::new();
    let mut prev_end = 0u64;
    for e in &manifest.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::NameCollision(e.name.clone()));
        }
        if e.offset < prev_end {
            return Err(Error::Archive(format!(
                "entry `{}` overlaps or is out of order",
                e.name
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| Error::Archive("entry extent overflows".into()))?;
        if end > blob_len {
            return Err(Error::Archive("blob shorter than manifest extent".into()));
        }
        let n: usize = e.shape.iter().product();
        let expected = match e.dtype {
            Dtype::F32 => Some(4 * n),
            Dtype::I8 => Some(n),
            Dtype::U4Packed => Some(payload_len(&e.shape, 4)),
            Dtype::JsonMeta => None,
        };
        if let Some(x) = expected {
            if x as u64 != e.length {
                return Err(Error::Archive(format!(
                    "entry `{}`: {} bytes for shape {:?} as {:?}",
                    e.name, e.length, e.shape, e.dtype
                )));
            }
        }
        prev_end = end;
    }
    Ok((manifest, hend))
}

/// Parse the archive byte format, validating every invariant.
pub fn decode(bytes: &[u8]) -> Result<ArchiveMap> {
    let (manifest, blob_start) = read_manifest(bytes)?;
    let blob = &bytes[blob_start..];
    let slice = |e: &ManifestEntry| &blob[e.offset as usize..(e.offset + e.length) as usize];
    let by_name: BTreeMap<&str, &ManifestEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    let read_f32 = |e: &ManifestEntry| -> Result<Vec<f32>> {
        let v: Vec<f32> = slice(e)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(e.name.clone()));
        }
        Ok(v)
    };

    // companions of quantized payloads are folded into their owner
    let mut consumed = std::collections::BTreeSet::new();
    let mut out = ArchiveMap::new();
    for e in &manifest.entries {
        if matches!(e.dtype, Dtype::I8 | Dtype::U4Packed) {
            let sname = format!("{}{SCALES_SUFFIX}", e.name);
            let lname = format!("{}{LAYOUT_SUFFIX}", e.name);
            let (Some(se), Some(le)) = (by_name.get(sname.as_str()), by_name.get(lname.as_str()))
            else {
                return Err(Error::Archive(format!(
                    "quantized entry `{}` lacks scales or layout",
                    e.name
                )));
            };
            if se.dtype != Dtype::F32 || le.dtype != Dtype::JsonMeta {
                return Err(Error::Archive(format!(
                    "companions of `{}` have wrong dtypes",
                    e.name
                )));
            }
            let meta: QLayoutMeta = serde_json::from_slice(slice(le))
                .map_err(|err| Error::Archive(format!("layout of `{}`: {err}", e.name)))?;
            let payload = match e.dtype {
                Dtype::I8 => Payload::I8(slice(e).iter().map(|&b| b as i8).collect()),
                _ => Payload::U4Packed(slice(e).to_vec()),
            };
            let q = QTensor::from_parts(
                e.shape.clone(),
                meta.bits,
                payload,
                ScaleLayout::new(meta.layout, read_f32(se)?),
            )?;
            consumed.insert(sname);
            consumed.insert(lname);
            out.insert(e.name.clone(), ArchiveValue::Quantized(q));
        }
    }
    for e in &manifest.entries {
        if consumed.contains(&e.name) || out.contains_key(&e.name) {
            continue;
        }
        let v = match e.dtype {
            Dtype::F32 => ArchiveValue::Tensor(Tensor::new(e.shape.clone(), read_f32(e)?)?),
            Dtype::JsonMeta => ArchiveValue::Meta(
                serde_json::from_slice(slice(e))
                    .map_err(|err| Error::Archive(format!("meta `{}`: {err}", e.name)))?,
            ),
            _ => unreachable!(),
        };
        out.insert(e.name.clone(), v);
    }
    Ok(out)
}

pub fn archive_write(entries: &ArchiveMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn archive_read(path: impl AsRef<Path>) -> Result<ArchiveMap> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode(&bytes)
}

/// Typed accessors used by model loaders.
pub trait ArchiveExt {
    fn tensor(&self, name: &str) -> Result<&Tensor>;
    fn qtensor(&self, name: &str) -> Result<&QTensor>;
    fn meta(&self, name: &str) -> Result<&Value>;
}

impl ArchiveExt for ArchiveMap {
    fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(ArchiveValue::Tensor(t)) => Ok(t),
            Some(_) => Err(Error::Archive(format!("`{name}` is not an f32 tensor"))),
            None => Err(Error::MissingEntry(name.into())),
        }
    }

    fn qtensor(&self, name: &str) -> Result<&QTensor> {
        match self.get(name) {
            Some(ArchiveValue::Quantized(q)) => Ok(q),
            Some(_) => Err(Error::Archive(format!("`{name}` is not quantized"))),
            None => Err(Error::MissingEntry(name.into())),
        }
    }

    fn meta(&self, name: &str) -> Result<&Value> {
        match self.get(name) {
            Some(ArchiveValue::Meta(v)) => Ok(v),
            Some(_) => Err(Error::Archive(format!("`{name}` is not json-meta"))),
            None => Err(Error::MissingEntry(name.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, ScaleLayout};
    use proptest::prelude::*;

    fn blob_of(bytes: &[u8]) -> (&[u8], Manifest) {
        let (m, start) = read_manifest(bytes).unwrap();
        (&bytes[start..], m)
    }

    #[test]
    fn zeros_round_trip() {
        let mut m = ArchiveMap::new();
        m.insert("w".into(), Tensor::zeros(&[2, 2]).into());
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn f32_encoding_is_little_endian() {
        let mut m = ArchiveMap::new();
        m.insert("x".into(), Tensor::vector(vec![1.5]).into());
        let bytes = encode(&m).unwrap();
        let (blob, man) = blob_of(&bytes);
        let e = &man.entries[0];
        assert_eq!(e.dtype, Dtype::F32);
        assert_eq!(&blob[e.offset as usize..][..4], &[0x00, 0x00, 0xC0, 0x3F]);
    }

    #[test]
    fn u4_payload_byte() {
        let q = quantize(
            &Tensor::vector(vec![3.0, -2.0]),
            &ScaleLayout::per_tensor(1.0),
            4,
        )
        .unwrap();
        let mut m = ArchiveMap::new();
        m.insert("q".into(), q.into());
        let bytes = encode(&m).unwrap();
        let (blob, man) = blob_of(&bytes);
        let e = man.entries.iter().find(|e| e.name == "q").unwrap();
        assert_eq!(e.dtype, Dtype::U4Packed);
        assert_eq!(e.length, 1);
        assert_eq!(blob[e.offset as usize], 0xE3);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_archive() {
        let m = ArchiveMap::new();
        assert!(decode(&encode(&m).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut m = ArchiveMap::new();
        m.insert("w".into(), Tensor::zeros(&[4]).into());
        let mut bytes = encode(&m).unwrap();
        bytes.truncate(bytes.len() - 1);
        match decode(&bytes) {
            Err(Error::Archive(msg)) => assert_eq!(msg, "blob shorter than manifest extent"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn three_tensor_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.qarc");
        let mut m = ArchiveMap::new();
        m.insert(
            "a".into(),
            Tensor::from_fn(&[3, 4], |i| i as f32 * 0.5 - 2.0).into(),
        );
        m.insert("b".into(), Tensor::vector(vec![-0.0, 1e-30, 3.4e38]).into());
        m.insert("c".into(), serde_json::json!({"k": [1, 2, 3]}).into());
        archive_write(&m, &path).unwrap();
        assert_eq!(archive_read(&path).unwrap(), m);
    }

    #[test]
    fn name_collision_with_companion() {
        let q = quantize(&Tensor::vector(vec![1.0]), &ScaleLayout::per_tensor(1.0), 8).unwrap();
        let mut m = ArchiveMap::new();
        m.insert("w".into(), q.into());
        m.insert("w.scales".into(), Tensor::vector(vec![1.0]).into());
        assert!(matches!(encode(&m), Err(Error::NameCollision(_))));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let mut m = ArchiveMap::new();
        m.insert("w".into(), Tensor::vector(vec![f32::INFINITY]).into());
        assert!(matches!(encode(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn non_finite_rejected_on_read() {
        let mut m = ArchiveMap::new();
        m.insert("w".into(), Tensor::vector(vec![1.0]).into());
        let mut bytes = encode(&m).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn overlapping_entries_rejected() {
        let mut m = ArchiveMap::new();
        m.insert("a".into(), Tensor::vector(vec![1.0]).into());
        m.insert("b".into(), Tensor::vector(vec![2.0]).into());
        let bytes = encode(&m).unwrap();
        let (mut man, start) = read_manifest(&bytes).unwrap();
        man.entries[1].offset = 0;
        let header = serde_json::to_vec(&man).unwrap();
        let mut forged = (header.len() as u64).to_le_bytes().to_vec();
        forged.extend_from_slice(&header);
        forged.extend_from_slice(&bytes[start..]);
        assert!(matches!(decode(&forged), Err(Error::Archive(_))));
    }

    #[test]
    fn corrupt_manifest_rejected() {
        let mut bytes = 5u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{nope");
        assert!(matches!(decode(&bytes), Err(Error::Archive(_))));
    }

    fn arb_value() -> impl Strategy<Value = ArchiveValue> {
        prop_oneof![
            (1usize..5, 1usize..5, any::<u64>()).prop_map(|(r, c, seed)| {
                let mut rng = crate::rng::Rng::new(seed);
                ArchiveValue::Tensor(Tensor::from_fn(&[r, c], |_| rng.normal() * 100.0))
            }),
            (
                1usize..4,
                1usize..7,
                any::<u64>(),
                prop_oneof![Just(4u32), Just(8u32)]
            )
                .prop_map(|(r, c, seed, bits)| {
                    let mut rng = crate::rng::Rng::new(seed);
                    let t = Tensor::from_fn(&[r, c], |_| rng.normal());
                    let l = ScaleLayout::fit(&t, LayoutKind::PerRow, bits).unwrap();
                    ArchiveValue::Quantized(quantize(&t, &l, bits).unwrap())
                }),
            any::<i64>().prop_map(|v| ArchiveValue::Meta(serde_json::json!({"v": v}))),
        ]
    }

    proptest! {
        #[test]
        fn random_archives_round_trip(entries in proptest::collection::btree_map("[a-z]{1,6}", arb_value(), 0..6)) {
            let m: ArchiveMap = entries;
            let bytes = encode(&m).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), m.clone());
            // re-encoding is byte-identical
            prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
