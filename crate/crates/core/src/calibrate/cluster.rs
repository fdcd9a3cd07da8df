use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::stats::CalibStats;
use crate::error::{Error, Result};
use crate::quant::{scale_from_max, LayoutKind, ScaleLayout};
use crate::ssm::ACT_BITS;

pub const KMEANS_SEED: u64 = 0;
pub const KMEANS_ITERS: usize = 100;

/// Sort-and-cluster grouping of the SSM input channels.
///
/// Heads are clustered separately inside each B/C state group, so a head
/// never leaves the group whose B/C it reads. Positions are "new" (sorted)
/// coordinates: `head_perm[new] = old head` and
/// `channel_perm[old head][new] = old channel`. Cell `(g, i, j)` is head
/// group `i` and channel group `j` of state group `g`; its scale sits at
/// `scales[(g·m + i)·n + j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_state_groups: usize,
    pub m: usize,
    pub n: usize,
    pub head_perm: Vec<usize>,
    pub channel_perm: Vec<Vec<usize>>,
    /// Per state group, `m + 1` absolute head positions.
    pub head_group_bounds: Vec<Vec<usize>>,
    /// Per state group and head group, `n + 1` channel positions.
    pub channel_group_bounds: Vec<Vec<Vec<usize>>>,
    pub scales: Vec<f32>,
    /// Equal-size groups were used because there were too few distinct values.
    pub fallback: bool,
}

fn is_perm(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n
        && p.iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

fn check_bounds(b: &[usize], lo: usize, hi: usize, k: usize) -> bool {
    b.len() == k + 1 && b[0] == lo && b[k] == hi && b.windows(2).all(|w| w[0] < w[1])
}

fn bucket(bounds: &[usize], pos: usize) -> usize {
    bounds[1..]
        .iter()
        .position(|&b| pos < b)
        .unwrap_or(bounds.len() - 2)
}

fn equal_bounds(lo: usize, hi: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| lo + (hi - lo) * i / k).collect()
}

impl ClusterMap {
    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_state_groups
    }

    pub fn n_cells(&self) -> usize {
        self.n_state_groups * self.m * self.n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Cluster(m.into()));
        if self.n_state_groups == 0 || !self.n_heads.is_multiple_of(self.n_state_groups) {
            return bad("state groups do not divide heads");
        }
        let hpg = self.heads_per_group();
        if self.m == 0 || self.m > hpg || self.n == 0 || self.n > self.head_dim {
            return bad("cluster counts out of range");
        }
        if !is_perm(&self.head_perm, self.n_heads) {
            return bad("head_perm is not a permutation");
        }
        if self.channel_perm.len() != self.n_heads
            || !self.channel_perm.iter().all(|p| is_perm(p, self.head_dim))
        {
            return bad("channel_perm is not a permutation per head");
        }
        for (pos, &h) in self.head_perm.iter().enumerate() {
            if pos / hpg != h / hpg {
                return bad("head_perm moves a head across state groups");
            }
        }
        if self.head_group_bounds.len() != self.n_state_groups
            || self.channel_group_bounds.len() != self.n_state_groups
        {
            return bad("bounds per state group missing");
        }
        for g in 0..self.n_state_groups {
            if !check_bounds(&self.head_group_bounds[g], g * hpg, (g + 1) * hpg, self.m) {
                return bad("head group bounds not strictly increasing and exhaustive");
            }
            if self.channel_group_bounds[g].len() != self.m
                || !self.channel_group_bounds[g]
                    .iter()
                    .all(|b| check_bounds(b, 0, self.head_dim, self.n))
            {
                return bad("channel group bounds not strictly increasing and exhaustive");
            }
        }
        if self.scales.len() != self.n_cells()
            || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad("scales must be positive, one per cell");
        }
        Ok(())
    }

    /// Identity grouping with a single cell per state group.
    pub fn trivial(n_heads: usize, head_dim: usize, n_state_groups: usize, scale: f32) -> Self {
        let hpg = n_heads / n_state_groups;
        Self {
            n_heads,
            head_dim,
            n_state_groups,
            m: 1,
            n: 1,
            head_perm: (0..n_heads).collect(),
            channel_perm: vec![(0..head_dim).collect(); n_heads],
            head_group_bounds: (0..n_state_groups)
                .map(|g| vec![g * hpg, (g + 1) * hpg])
                .collect(),
            channel_group_bounds: vec![vec![vec![0, head_dim]]; n_state_groups],
            scales: vec![scale; n_state_groups],
            fallback: false,
        }
    }

    fn head_pos(&self) -> Vec<usize> {
        let mut pos = vec![0; self.n_heads];
        for (p, &h) in self.head_perm.iter().enumerate() {
            pos[h] = p;
        }
        pos
    }

    /// Cell index of every channel, indexed by original flat channel
    /// `head · head_dim + channel`.
    pub fn cell_map(&self) -> Vec<u32> {
        let hpos = self.head_pos();
        let mut out = vec![0u32; self.n_heads * self.head_dim];
        for h in 0..self.n_heads {
            let hp = hpos[h];
            let g = hp / self.heads_per_group();
            let i = bucket(&self.head_group_bounds[g], hp);
            for (cp, &c) in self.channel_perm[h].iter().enumerate() {
                let j = bucket(&self.channel_group_bounds[g][i], cp);
                out[h * self.head_dim + c] = ((g * self.m + i) * self.n + j) as u32;
            }
        }
        out
    }

    /// Scale layout for `x[T × n_heads·head_dim]` in original channel order.
    pub fn x_layout(&self) -> ScaleLayout {
        ScaleLayout::new(
            LayoutKind::Clustered {
                channel_group: self.cell_map(),
                inner: 1,
            },
            self.scales.clone(),
        )
    }

    /// The same grouping expressed in already-reordered coordinates.
    pub fn reordered(&self) -> Self {
        Self {
            head_perm: (0..self.n_heads).collect(),
            channel_perm: vec![(0..self.head_dim).collect(); self.n_heads],
            ..self.clone()
        }
    }

    /// Recompute cell scales from per-channel maxima in this map's channel order.
    pub fn rescale(&mut self, channel_max: &[f32], bits: u32) -> Result<()> {
        if channel_max.len() != self.n_heads * self.head_dim {
            return Err(Error::shape("rescale: channel maxima width mismatch"));
        }
        let mut cell_max = vec![0.0f32; self.n_cells()];
        for (ch, &cell) in self.cell_map().iter().enumerate() {
            let c = &mut cell_max[cell as usize];
            *c = c.max(channel_max[ch]);
        }
        self.scales = cell_max
            .into_iter()
            .map(|m| scale_from_max(m, bits))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Per-cell, per-state-index scales for a cached state
    /// `[n_heads·head_dim × d_state]`, from its per-element maxima.
    pub fn state_layout(
        &self,
        state_max: &[f32],
        d_state: usize,
        bits: u32,
    ) -> Result<ScaleLayout> {
        let chans = self.n_heads * self.head_dim;
        if state_max.len() != chans * d_state {
            return Err(Error::shape("state maxima width mismatch"));
        }
        let cells = self.cell_map();
        let mut cell_max = vec![0.0f32; self.n_cells() * d_state];
        for ch in 0..chans {
            let base = cells[ch] as usize * d_state;
            for s in 0..d_state {
                let c = &mut cell_max[base + s];
                *c = c.max(state_max[ch * d_state + s]);
            }
        }
        let scales = cell_max
            .into_iter()
            .map(|m| scale_from_max(m, bits))
            .collect::<Result<_>>()?;
        Ok(ScaleLayout::new(
            LayoutKind::Clustered {
                channel_group: cells,
                inner: d_state,
            },
            scales,
        ))
    }

    /// `π[new flat] = old flat` over `n_heads · head_dim`.
    pub fn permutation(&self) -> Vec<usize> {
        let p = self.head_dim;
        let mut pi = Vec::with_capacity(self.n_heads * p);
        for &h in &self.head_perm {
            pi.extend(self.channel_perm[h].iter().map(|&c| h * p + c));
        }
        pi
    }
}

/// Contiguous segments of a non-increasing profile via 1-D k-means; split
/// the longest segment until there are exactly `k`.
fn channel_segments(profile: &[f32], pooled: &[f32], k: usize) -> Result<(Vec<usize>, bool)> {
    let len = profile.len();
    let mut distinct: Vec<f32> = pooled.to_vec();
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        return Ok((equal_bounds(0, len, k), true));
    }
    let pts: Vec<Vec<f32>> = pooled.iter().map(|&v| vec![v]).collect();
    let km = kmeans(&pts, k, KMEANS_ITERS, KMEANS_SEED)?;
    let mut cents: Vec<f32> = km.centroids.iter().map(|c| c[0]).collect();
    cents.sort_by(|a, b| b.total_cmp(a));
    let labels: Vec<usize> = profile
        .iter()
        .map(|&v| {
            let mut best = (0, f32::INFINITY);
            for (i, &c) in cents.iter().enumerate() {
                let d = (v - c).abs();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    let mut bounds = vec![0];
    for pos in 1..len {
        if labels[pos] != labels[pos - 1] {
            bounds.push(pos);
        }
    }
    bounds.push(len);
    while bounds.len() - 1 < k {
        let (i, _) = bounds
            .windows(2)
            .enumerate()
            .max_by(|a, b| {
                (a.1[1] - a.1[0])
                    .cmp(&(b.1[1] - b.1[0]))
                    .then(b.0.cmp(&a.0))
            })
            .unwrap();
        let mid = (bounds[i] + bounds[i + 1]) / 2;
        bounds.insert(i + 1, mid);
    }
    Ok((bounds, false))
}

/// Sort channels per head by calibrated maximum, cluster heads (per state
/// group) into `m` groups on their sorted-maxima profiles, then split the
/// sorted channel axis of each head group into `n` contiguous groups.
///
/// `m` and `n` are capped at the heads per state group and `head_dim`.
pub fn sort_and_cluster(
    stats_x: &CalibStats,
    n_heads: usize,
    head_dim: usize,
    n_state_groups: usize,
    m: usize,
    n: usize,
) -> Result<ClusterMap> {
    if stats_x.channel_max.len() != n_heads * head_dim {
        return Err(Error::Cluster(format!(
            "stats width {} vs {n_heads}×{head_dim}",
            stats_x.channel_max.len()
        )));
    }
    if m == 0 || n == 0 || m > n_heads || n > head_dim {
        return Err(Error::Cluster(format!(
            "m={m}, n={n} out of range for {n_heads} heads × {head_dim}"
        )));
    }
    if n_state_groups == 0 || !n_heads.is_multiple_of(n_state_groups) {
        return Err(Error::Cluster("state groups do not divide heads".into()));
    }
    let hpg = n_heads / n_state_groups;
    let m = m.min(hpg);
    let maxima = &stats_x.channel_max;

    let mut channel_perm = Vec::with_capacity(n_heads);
    let mut profiles = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let row = &maxima[h * head_dim..(h + 1) * head_dim];
        let mut idx: Vec<usize> = (0..head_dim).collect();
        // stable: ties keep original order
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        profiles.push(idx.iter().map(|&c| row[c]).collect::<Vec<f32>>());
        channel_perm.push(idx);
    }

    let mut fallback = false;
    let mut head_perm = Vec::with_capacity(n_heads);
    let mut head_group_bounds = Vec::with_capacity(n_state_groups);
    let mut channel_group_bounds = Vec::with_capacity(n_state_groups);
    for g in 0..n_state_groups {
        let heads: Vec<usize> = (g * hpg..(g + 1) * hpg).collect();
        let feats: Vec<Vec<f32>> = heads.iter().map(|&h| profiles[h].clone()).collect();
        let mut uniq = feats.clone();
        uniq.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        uniq.dedup();
        let groups: Vec<Vec<usize>> = if uniq.len() < m {
            fallback = true;
            let b = equal_bounds(0, hpg, m);
            b.windows(2).map(|w| heads[w[0]..w[1]].to_vec()).collect()
        } else {
            let km = kmeans(&feats, m, KMEANS_ITERS, KMEANS_SEED)?;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
            for (i, &l) in km.labels.iter().enumerate() {
                groups[l].push(heads[i]);
            }
            if groups.iter().any(|g| g.is_empty()) {
                fallback = true;
                let b = equal_bounds(0, hpg, m);
                b.windows(2).map(|w| heads[w[0]..w[1]].to_vec()).collect()
            } else {
                let peak =
                    |grp: &Vec<usize>| grp.iter().map(|&h| profiles[h][0]).fold(0.0f32, f32::max);
                groups.sort_by(|a, b| peak(b).total_cmp(&peak(a)).then(a[0].cmp(&b[0])));
                groups
            }
        };
        let mut bounds = vec![g * hpg];
        let mut cbounds = Vec::with_capacity(m);
        for grp in &groups {
            head_perm.extend_from_slice(grp);
            bounds.push(bounds.last().unwrap() + grp.len());
            let profile: Vec<f32> = (0..head_dim)
                .map(|pos| grp.iter().map(|&h| profiles[h][pos]).fold(0.0f32, f32::max))
                .collect();
            let pooled: Vec<f32> = grp
                .iter()
                .flat_map(|&h| profiles[h].iter().copied())
                .collect();
            let (cb, fb) = channel_segments(&profile, &pooled, n)?;
            fallback |= fb;
            cbounds.push(cb);
        }
        head_group_bounds.push(bounds);
        channel_group_bounds.push(cbounds);
    }

    let mut map = ClusterMap {
        n_heads,
        head_dim,
        n_state_groups,
        m,
        n,
        head_perm,
        channel_perm,
        head_group_bounds,
        channel_group_bounds,
        scales: Vec::new(),
        fallback,
    };
    map.rescale(maxima, ACT_BITS)?;
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: Vec<f32>) -> CalibStats {
        CalibStats {
            channel_max: v,
            sample_count: 1,
            values: None,
        }
    }

    #[test]
    fn single_cluster_is_sort_plus_per_tensor() {
        let s = stats(vec![1.0, 3.0, 2.0, 0.5, 4.0, 0.25]);
        let c = sort_and_cluster(&s, 2, 3, 1, 1, 1).unwrap();
        assert_eq!(c.channel_perm, vec![vec![1, 2, 0], vec![1, 0, 2]]);
        assert_eq!(c.scales, vec![4.0 / 127.0]);
    }

    #[test]
    fn four_head_example() {
        let s = stats(vec![10.0, 1.0, 0.1, 0.05, 9.0, 1.2, 0.12, 0.04]);
        let c = sort_and_cluster(&s, 4, 2, 1, 2, 1).unwrap();
        let grp = |b: usize, e: usize| {
            let mut v = c.head_perm[b..e].to_vec();
            v.sort();
            v
        };
        let b = &c.head_group_bounds[0];
        assert_eq!(grp(b[0], b[1]), vec![0, 2]);
        assert_eq!(grp(b[1], b[2]), vec![1, 3]);
    }

    #[test]
    fn fallback_on_identical_heads() {
        let s = stats(vec![1.0; 8]);
        let c = sort_and_cluster(&s, 4, 2, 1, 2, 2).unwrap();
        assert!(c.fallback);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_oversized_counts() {
        let s = stats(vec![1.0; 8]);
        assert!(sort_and_cluster(&s, 4, 2, 1, 5, 1).is_err());
        assert!(sort_and_cluster(&s, 4, 2, 1, 1, 3).is_err());
    }

    #[test]
    fn permutation_example() {
        let c = ClusterMap {
            head_perm: vec![1, 0],
            channel_perm: vec![vec![1, 0], vec![1, 0]],
            ..ClusterMap::trivial(2, 2, 1, 1.0)
        };
        assert_eq!(c.permutation(), vec![3, 2, 1, 0]);
    }
}
