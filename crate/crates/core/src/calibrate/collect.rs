use std::collections::BTreeMap;

use rayon::prelude::*;

use super::stats::{CalibStats, RecordSpec, Recorder};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::ssm::Site;
use crate::tensor::Tensor;

/// Statistics of every block over a calibration set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelStats {
    pub blocks: Vec<BTreeMap<Site, CalibStats>>,
    /// Captured rows per block and site, samples concatenated in order.
    pub rows: Vec<BTreeMap<Site, Tensor>>,
}

impl ModelStats {
    pub fn site(&self, block: usize, site: Site) -> Result<&CalibStats> {
        self.blocks
            .get(block)
            .and_then(|m| m.get(&site))
            .ok_or_else(|| Error::Calibration(format!("no {site:?} stats for block {block}")))
    }

    pub fn captured(&self, block: usize, site: Site) -> Result<&Tensor> {
        self.rows
            .get(block)
            .and_then(|m| m.get(&site))
            .ok_or_else(|| {
                Error::Calibration(format!("no captured {site:?} rows for block {block}"))
            })
    }
}

type SampleStats = (
    Vec<BTreeMap<Site, CalibStats>>,
    Vec<BTreeMap<Site, Vec<Tensor>>>,
);

/// Run the model over each sample (in parallel) and merge per-site maxima.
pub fn collect_stats(
    model: &dyn LanguageModel,
    samples: &[Vec<u32>],
    spec: &RecordSpec,
) -> Result<ModelStats> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let n = model.config().n_blocks;
    let per_sample: Vec<SampleStats> = samples
        .par_iter()
        .map(|s| {
            let mut recs: Vec<Recorder> = (0..n).map(|_| Recorder::new(spec)).collect();
            model.forward_with(s, &mut recs, None)?;
            Ok(recs.into_iter().map(|r| (r.stats, r.rows)).unzip())
        })
        .collect::<Result<_>>()?;

    let mut out = ModelStats {
        blocks: vec![BTreeMap::new(); n],
        rows: vec![BTreeMap::new(); n],
    };
    let mut rows: Vec<BTreeMap<Site, Vec<Tensor>>> = vec![BTreeMap::new(); n];
    for (stats, captured) in per_sample {
        for (b, (st, cap)) in stats.into_iter().zip(captured).enumerate() {
            for (site, s) in st {
                match out.blocks[b].get_mut(&site) {
                    Some(acc) => acc.merge(&s)?,
                    None => {
                        out.blocks[b].insert(site, s);
                    }
                }
            }
            for (site, ts) in cap {
                rows[b].entry(site).or_default().extend(ts);
            }
        }
    }
    for (b, per_site) in rows.into_iter().enumerate() {
        for (site, ts) in per_site {
            let refs: Vec<&Tensor> = ts.iter().collect();
            out.rows[b].insert(site, Tensor::concat_rows(&refs)?);
        }
    }
    Ok(out)
}
