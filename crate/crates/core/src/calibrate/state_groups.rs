use serde::{Deserialize, Serialize};

use super::stats::CalibStats;
use crate::error::{Error, Result};
use crate::quant::{scale_from_max, LayoutKind, ScaleLayout};
use crate::ssm::ACT_BITS;

/// One 8-bit scale per B/C state group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGroupScales {
    /// `n_state_groups + 1` edges over the `n_state_groups · d_state` axis.
    pub boundaries: Vec<usize>,
    pub scales_b: Vec<f32>,
    pub scales_c: Vec<f32>,
}

impl StateGroupScales {
    fn layout(&self, scales: &[f32]) -> ScaleLayout {
        ScaleLayout::new(
            LayoutKind::PerStateGroup {
                bounds: self.boundaries.clone(),
            },
            scales.to_vec(),
        )
    }

    pub fn b_layout(&self) -> ScaleLayout {
        self.layout(&self.scales_b)
    }

    pub fn c_layout(&self) -> ScaleLayout {
        self.layout(&self.scales_c)
    }
}

fn group_scales(stats: &CalibStats, bounds: &[usize]) -> Result<Vec<f32>> {
    bounds
        .windows(2)
        .map(|w| {
            let m = stats.channel_max[w[0]..w[1]]
                .iter()
                .fold(0.0f32, |a, &b| a.max(b));
            scale_from_max(m, ACT_BITS)
        })
        .collect()
}

pub fn build_state_group_scales(
    stats_b: &CalibStats,
    stats_c: &CalibStats,
    n_state_groups: usize,
    d_state: usize,
) -> Result<StateGroupScales> {
    let width = n_state_groups * d_state;
    if n_state_groups == 0 || d_state == 0 {
        return Err(Error::Calibration("empty state-group structure".into()));
    }
    for (name, s) in [("B", stats_b), ("C", stats_c)] {
        if s.channel_max.len() != width {
            return Err(Error::Calibration(format!(
                "{name} stats width {} vs {n_state_groups}×{d_state}",
                s.channel_max.len()
            )));
        }
    }
    let boundaries: Vec<usize> = (0..=n_state_groups).map(|g| g * d_state).collect();
    Ok(StateGroupScales {
        scales_b: group_scales(stats_b, &boundaries)?,
        scales_c: group_scales(stats_c, &boundaries)?,
        boundaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(v: Vec<f32>) -> CalibStats {
        CalibStats {
            channel_max: v,
            sample_count: 1,
            values: None,
        }
    }

    #[test]
    fn two_group_example() {
        let b = st(vec![10.0, 3.0, 0.1, 0.05]);
        let s = build_state_group_scales(&b, &b, 2, 2).unwrap();
        assert_eq!(s.scales_b, vec![10.0 / 127.0, 0.1 / 127.0]);
        assert_eq!(s.boundaries, vec![0, 2, 4]);
    }

    #[test]
    fn single_group_and_uniform() {
        let b = st(vec![1.0, 2.0, 2.0, 1.0]);
        let s = build_state_group_scales(&b, &b, 1, 4).unwrap();
        assert_eq!(s.scales_b, vec![2.0 / 127.0]);
        let s = build_state_group_scales(&b, &b, 2, 2).unwrap();
        assert_eq!(s.scales_c[0], s.scales_c[1]);
    }

    #[test]
    fn width_mismatch() {
        let b = st(vec![1.0; 3]);
        assert!(build_state_group_scales(&b, &b, 2, 2).is_err());
    }
}
