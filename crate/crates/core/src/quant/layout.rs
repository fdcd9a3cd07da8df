//! Scale layouts: which scale governs which element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest representable magnitude for a signed `bits`-wide integer, `2^(bits-1) - 1`.
pub fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

pub fn qmin(bits: u32) -> i32 {
    -(1 << (bits - 1))
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::Bits(bits))
    }
}

/// Symmetric scale for a slice with absolute maximum `max_abs`.
/// An all-zero slice gets scale 1.0.
pub fn scale_from_max(max_abs: f32, bits: u32) -> Result<f32> {
    check_bits(bits)?;
    if !max_abs.is_finite() {
        return Err(Error::NonFinite("scale source maximum".into()));
    }
    if max_abs == 0.0 {
        return Ok(1.0);
    }
    Ok(max_abs / qmax(bits) as f32)
}

/// `max|x| / (2^(bits-1) - 1)`, or 1.0 for an all-zero slice.
pub fn compute_scale(x_slice: &[f32], bits: u32) -> Result<f32> {
    check_bits(bits)?;
    let mut m = 0.0f32;
    for v in x_slice {
        if !v.is_finite() {
            return Err(Error::NonFinite("scale input".into()));
        }
        m = m.max(v.abs());
    }
    scale_from_max(m, bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutKind {
    PerTensor,
    /// One scale per index along `axis`.
    PerChannel {
        axis: usize,
    },
    /// One scale per contiguous run of `group_size` indices along `axis`
    /// (the last run may be short), independently for every other coordinate.
    PerGroup {
        axis: usize,
        group_size: usize,
    },
    /// One scale per index of the leading axis (per token / per embedding row).
    PerRow,
    /// Trailing block viewed as `[channels, inner]`; channel `c` at inner
    /// offset `i` uses scale `channel_group[c] * inner + i`.
    Clustered {
        channel_group: Vec<u32>,
        inner: usize,
    },
    /// Last axis split at `bounds` (first 0, last = width); one scale per span.
    PerStateGroup {
        bounds: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLayout {
    pub kind: LayoutKind,
    pub scales: Vec<f32>,
}

/// Resolved flat-index → scale-index mapping for one concrete shape.
#[derive(Debug, Clone)]
pub(crate) enum Resolver<'a> {
    Tensor,
    Axis {
        stride: usize,
        dim: usize,
    },
    Group {
        stride: usize,
        dim: usize,
        group: usize,
        per_outer: usize,
    },
    Clustered {
        map: &'a [u32],
        inner: usize,
    },
    Spans {
        bounds: &'a [usize],
        width: usize,
    },
}

impl Resolver<'_> {
    #[inline]
    pub(crate) fn index(&self, flat: usize) -> usize {
        match *self {
            Resolver::Tensor => 0,
            Resolver::Axis { stride, dim } => (flat / stride) % dim,
            Resolver::Group {
                stride,
                dim,
                group,
                per_outer,
            } => {
                let inner = flat % stride;
                let c = (flat / stride) % dim;
                let outer = flat / (stride * dim);
                (outer * per_outer + c / group) * stride + inner
            }
            Resolver::Clustered { map, inner } => {
                let within = flat % (map.len() * inner);
                map[within / inner] as usize * inner + within % inner
            }
            Resolver::Spans { bounds, width } => {
                let c = flat % width;
                // bounds is short; linear scan keeps it simple
                bounds[1..].iter().position(|&b| c < b).unwrap_or(0)
            }
        }
    }
}

impl ScaleLayout {
    pub fn per_tensor(scale: f32) -> Self {
        Self {
            kind: LayoutKind::PerTensor,
            scales: vec![scale],
        }
    }

    pub fn new(kind: LayoutKind, scales: Vec<f32>) -> Self {
        Self { kind, scales }
    }

    /// Number of scales this layout needs for `shape`.
    pub fn expected_scales(kind: &LayoutKind, shape: &[usize]) -> Result<usize> {
        let n: usize = shape.iter().product();
        Ok(match kind {
            LayoutKind::PerTensor => 1,
            LayoutKind::PerChannel { axis } => *shape
                .get(*axis)
                .ok_or_else(|| Error::shape(format!("axis {axis} out of {shape:?}")))?,
            LayoutKind::PerGroup { axis, group_size } => {
                let dim = *shape
                    .get(*axis)
                    .ok_or_else(|| Error::shape(format!("axis {axis} out of {shape:?}")))?;
                if *group_size == 0 {
                    return Err(Error::shape("group_size must be positive"));
                }
                let stride: usize = shape[axis + 1..].iter().product();
                let outer = if dim == 0 { 0 } else { n / (dim * stride) };
                outer * dim.div_ceil(*group_size) * stride
            }
            LayoutKind::PerRow => *shape
                .first()
                .ok_or_else(|| Error::shape("per-row layout on a scalar"))?,
            LayoutKind::Clustered {
                channel_group,
                inner,
            } => {
                let block = channel_group.len() * inner;
                if block == 0 || !n.is_multiple_of(block) {
                    return Err(Error::shape(format!(
                        "clustered layout block {block} does not tile {shape:?}"
                    )));
                }
                let groups = channel_group.iter().max().map_or(0, |&g| g as usize + 1);
                groups * inner
            }
            LayoutKind::PerStateGroup { bounds } => {
                let width = shape.last().copied().unwrap_or(1);
                if bounds.len() < 2
                    || bounds[0] != 0
                    || *bounds.last().unwrap() != width
                    || bounds.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::shape(format!(
                        "state-group bounds {bounds:?} do not partition width {width}"
                    )));
                }
                bounds.len() - 1
            }
        })
    }

    pub(crate) fn resolver(&self, shape: &[usize]) -> Result<Resolver<'_>> {
        let expected = Self::expected_scales(&self.kind, shape)?;
        let clustered_ok =
            matches!(self.kind, LayoutKind::Clustered { .. }) && self.scales.len() >= expected;
        if self.scales.len() != expected && !clustered_ok {
            return Err(Error::shape(format!(
                "layout {:?} needs {expected} scales for {shape:?}, has {}",
                self.kind,
                self.scales.len()
            )));
        }
        for &s in &self.scales {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidScale {
                    value: s,
                    context: "layout scales must be finite and positive".into(),
                });
            }
        }
        Ok(match &self.kind {
            LayoutKind::PerTensor => Resolver::Tensor,
            LayoutKind::PerChannel { axis } => Resolver::Axis {
                stride: shape[axis + 1..].iter().product(),
                dim: shape[*axis],
            },
            LayoutKind::PerGroup { axis, group_size } => Resolver::Group {
                stride: shape[axis + 1..].iter().product(),
                dim: shape[*axis],
                group: *group_size,
                per_outer: shape[*axis].div_ceil(*group_size),
            },
            LayoutKind::PerRow => Resolver::Axis {
                stride: shape[1..].iter().product(),
                dim: shape[0],
            },
            LayoutKind::Clustered {
                channel_group,
                inner,
            } => Resolver::Clustered {
                map: channel_group,
                inner: *inner,
            },
            LayoutKind::PerStateGroup { bounds } => Resolver::Spans {
                bounds,
                width: *shape.last().unwrap_or(&1),
            },
        })
    }

    /// Scale index for every element of a tensor of `shape`.
    pub fn scale_indices(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let r = self.resolver(shape)?;
        let n: usize = shape.iter().product();
        Ok((0..n).map(|i| r.index(i)).collect())
    }

    /// Fit a layout of the given kind to `x` by taking the absolute maximum of
    /// every scale group.
    pub fn fit(x: &Tensor, kind: LayoutKind, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let count = Self::expected_scales(&kind, x.shape())?;
        let mut maxima = vec![0.0f32; count];
        let probe = Self {
            kind,
            scales: vec![1.0; count],
        };
        let r = probe.resolver(x.shape())?;
        for (i, &v) in x.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite("layout fit input".into()));
            }
            let k = r.index(i);
            maxima[k] = maxima[k].max(v.abs());
        }
        let scales = maxima
            .into_iter()
            .map(|m| scale_from_max(m, bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: probe.kind,
            scales,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compute_scale_examples() {
        let s = compute_scale(&[2.54, -1.27, 0.0], 8).unwrap();
        assert!((s - 0.02).abs() < 1e-9);
        assert_eq!(compute_scale(&[0.0, 0.0], 8).unwrap(), 1.0);
        assert_eq!(compute_scale(&[7.0], 4).unwrap(), 1.0);
    }

    #[test]
    fn compute_scale_errors() {
        assert!(matches!(compute_scale(&[1.0], 3), Err(Error::Bits(3))));
        assert!(matches!(
            compute_scale(&[f32::NAN], 8),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn per_group_indices() {
        let l = ScaleLayout::new(
            LayoutKind::PerGroup {
                axis: 1,
                group_size: 2,
            },
            vec![1.0; 6],
        );
        // 2 rows × 5 cols → 3 groups per row, last group short
        let idx = l.scale_indices(&[2, 5]).unwrap();
        assert_eq!(idx, vec![0, 0, 1, 1, 2, 3, 3, 4, 4, 5]);
    }

    #[test]
    fn per_channel_axis0_matches_per_row() {
        let a = ScaleLayout::new(LayoutKind::PerChannel { axis: 0 }, vec![1.0; 3]);
        let b = ScaleLayout::new(LayoutKind::PerRow, vec![1.0; 3]);
        assert_eq!(
            a.scale_indices(&[3, 4]).unwrap(),
            b.scale_indices(&[3, 4]).unwrap()
        );
    }

    #[test]
    fn clustered_indices_with_inner() {
        let l = ScaleLayout::new(
            LayoutKind::Clustered {
                channel_group: vec![1, 0, 1],
                inner: 2,
            },
            vec![1.0; 4],
        );
        let idx = l.scale_indices(&[3, 2]).unwrap();
        assert_eq!(idx, vec![2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn state_group_spans() {
        let l = ScaleLayout::new(
            LayoutKind::PerStateGroup {
                bounds: vec![0, 2, 5],
            },
            vec![1.0, 2.0],
        );
        let idx = l.scale_indices(&[1, 5]).unwrap();
        assert_eq!(idx, vec![0, 0, 1, 1, 1]);
        let bad = ScaleLayout::new(
            LayoutKind::PerStateGroup {
                bounds: vec![0, 2, 4],
            },
            vec![1.0, 2.0],
        );
        assert!(bad.scale_indices(&[1, 5]).is_err());
    }

    #[test]
    fn non_positive_scales_rejected() {
        let l = ScaleLayout::per_tensor(0.0);
        assert!(matches!(
            l.scale_indices(&[2]),
            Err(Error::InvalidScale { .. })
        ));
    }

    #[test]
    fn fit_per_row() {
        let x = Tensor::from_rows(&[&[1.0, -127.0], &[0.0, 0.0]]);
        let l = ScaleLayout::fit(&x, LayoutKind::PerRow, 8).unwrap();
        assert_eq!(l.scales, vec![1.0, 1.0]);
    }
}
