use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{Site, SiteHook};
use crate::tensor::Tensor;

/// Running per-channel absolute maxima of one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub channel_max: Vec<f32>,
    /// Number of sequences merged in.
    pub sample_count: usize,
    /// All observed `|v|`, kept sorted, when a percentile is needed.
    pub values: Option<Vec<f32>>,
}

impl CalibStats {
    pub fn new(channels: usize, keep_values: bool) -> Self {
        Self {
            channel_max: vec![0.0; channels],
            sample_count: 0,
            values: keep_values.then(Vec::new),
        }
    }

    /// Fold in a tensor whose trailing data is rows of `channels` values.
    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        let ch = self.channel_max.len();
        if ch == 0 || !t.len().is_multiple_of(ch) {
            return Err(Error::shape(format!(
                "stats over {ch} channels cannot absorb {:?}",
                t.shape()
            )));
        }
        for row in t.data().chunks(ch) {
            for (m, &v) in self.channel_max.iter_mut().zip(row) {
                if !v.is_finite() {
                    return Err(Error::NonFinite("calibration activation".into()));
                }
                *m = m.max(v.abs());
            }
        }
        if let Some(vals) = &mut self.values {
            vals.extend(t.data().iter().map(|v| v.abs()));
            vals.sort_by(f32::total_cmp);
        }
        Ok(())
    }

    /// Order-independent merge.
    pub fn merge(&mut self, other: &CalibStats) -> Result<()> {
        if other.channel_max.len() != self.channel_max.len() {
            return Err(Error::shape("merging stats of different widths"));
        }
        for (a, b) in self.channel_max.iter_mut().zip(&other.channel_max) {
            *a = a.max(*b);
        }
        self.sample_count += other.sample_count;
        match (&mut self.values, &other.values) {
            (Some(a), Some(b)) => {
                a.extend_from_slice(b);
                a.sort_by(f32::total_cmp);
            }
            (a, _) => *a = None,
        }
        Ok(())
    }

    pub fn max(&self) -> f32 {
        self.channel_max.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Which sites to record and how.
#[derive(Debug, Clone, Default)]
pub struct RecordSpec {
    pub sites: Vec<Site>,
    /// Sites whose raw values are kept for percentiles.
    pub keep_values: Vec<Site>,
    /// Sites whose rows are captured verbatim (GPTQ inputs).
    pub capture_rows: Vec<Site>,
}

/// Per-block recorder; one per (sample, block).
#[derive(Debug, Clone)]
pub struct Recorder<'a> {
    spec: &'a RecordSpec,
    pub stats: BTreeMap<Site, CalibStats>,
    pub rows: BTreeMap<Site, Vec<Tensor>>,
}

impl<'a> Recorder<'a> {
    pub fn new(spec: &'a RecordSpec) -> Self {
        Self {
            spec,
            stats: BTreeMap::new(),
            rows: BTreeMap::new(),
        }
    }
}

impl SiteHook for Recorder<'_> {
    fn visit(&mut self, site: Site, t: &mut Tensor) -> Result<()> {
        if self.spec.sites.contains(&site) {
            let keep = self.spec.keep_values.contains(&site);
            let width = if site == Site::State {
                t.len()
            } else {
                t.last_dim()
            };
            let e = self.stats.entry(site).or_insert_with(|| {
                let mut s = CalibStats::new(width, keep);
                s.sample_count = 1;
                s
            });
            e.observe(t)?;
        }
        if self.spec.capture_rows.contains(&site) {
            self.rows.entry(site).or_default().push(t.clone());
        }
        Ok(())
    }

    fn wants_state(&self) -> bool {
        self.spec.sites.contains(&Site::State)
    }
}
