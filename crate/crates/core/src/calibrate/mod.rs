//! Calibration statistics, sort-and-cluster grouping of `x`, and
//! per-state-group scales for B/C.

mod cluster;
mod collect;
mod kmeans;
mod state_groups;
mod stats;

pub use cluster::{sort_and_cluster, ClusterMap, KMEANS_ITERS, KMEANS_SEED};
pub use collect::{collect_stats, ModelStats};
pub use kmeans::{kmeans, KMeans};
pub use state_groups::{build_state_group_scales, StateGroupScales};
pub use stats::{CalibStats, RecordSpec, Recorder};

use crate::error::{Error, Result};
use crate::quant::scale_from_max;

/// Percentile used when clipping is switched on without a value.
pub const DEFAULT_CLIP_PERCENTILE: f32 = 99.9;

/// Static scale for one site, from its max or a clipped percentile of `|v|`.
pub fn calibrate_site_scale(
    stats: &CalibStats,
    bits: u32,
    clip_percentile: Option<f32>,
) -> Result<f32> {
    let m = match clip_percentile {
        None => stats.max(),
        Some(p) => {
            let vals = stats.values.as_ref().ok_or_else(|| {
                Error::Calibration("percentile clipping needs recorded values".into())
            })?;
            percentile_sorted(vals, p)
        }
    };
    scale_from_max(m, bits)
}

/// Nearest-rank percentile of an ascending slice.
fn percentile_sorted(v: &[f32], pct: f32) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    let exact = pct.clamp(0.0, 100.0) as f64 / 100.0 * v.len() as f64;
    let rank = (exact * (1.0 - 1e-6)).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
