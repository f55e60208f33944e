//! Gradient histograms and the range/shape summary over training snapshots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MIN_BINS: usize = 64;

/// Counts over `bins` uniform bins spanning `[-max_abs, max_abs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub layer: usize,
    pub iter: u64,
    pub max_abs: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f32], bins: usize, layer: usize, iter: u64) -> Result<Self> {
        if bins < MIN_BINS {
            return Err(Error::Config(format!("histograms need at least {MIN_BINS} bins, got {bins}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let half = if max_abs > 0.0 { max_abs as f64 } else { 1.0 };
        let mut counts = vec![0u64; bins];
        for &v in values {
            let pos = (v as f64 + half) / (2.0 * half) * bins as f64;
            counts[(pos.floor().max(0.0) as usize).min(bins - 1)] += 1;
        }
        Ok(Histogram { layer, iter, max_abs, counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let half = if self.max_abs > 0.0 { self.max_abs as f64 } else { 1.0 };
        let b = self.bins();
        (0..=b).map(|i| -half + 2.0 * half * i as f64 / b as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Excess kurtosis `m4 / m2^2 - 3`; zero for constant input.
pub fn excess_kurtosis(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in values {
        let d = v as f64 - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

/// Values of one layer at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: u64,
    pub layer: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStats {
    pub iter: u64,
    pub layer: usize,
    pub count: usize,
    pub range: f32,
    pub kurtosis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotReport {
    pub histograms: Vec<Histogram>,
    pub stats: Vec<SnapshotStats>,
    /// Per layer: range at its latest snapshot is below the earliest.
    pub c2: BTreeMap<usize, bool>,
    /// Per iteration: the shallowest layer's range exceeds the deepest's.
    pub c3: BTreeMap<u64, bool>,
    /// Per marked layer and iteration: its range exceeds both neighbours'.
    pub c4: BTreeMap<(usize, u64), bool>,
}

impl SnapshotReport {
    pub fn c2_fraction(&self) -> f64 {
        if self.c2.is_empty() {
            return 0.0;
        }
        self.c2.values().filter(|&&b| b).count() as f64 / self.c2.len() as f64
    }
}

/// Histograms and characteristic flags. `marked` lists layers (for example
/// depthwise convolutions) compared against layers `l - 1` and `l + 1`.
pub fn gradient_snapshot(snaps: &[Snapshot], bins: usize, marked: &[usize]) -> Result<SnapshotReport> {
    let mut histograms = Vec::with_capacity(snaps.len());
    let mut stats = Vec::with_capacity(snaps.len());
    let mut range: BTreeMap<(u64, usize), f32> = BTreeMap::new();
    for s in snaps {
        let h = Histogram::new(&s.values, bins, s.layer, s.iter)?;
        range.insert((s.iter, s.layer), h.max_abs);
        stats.push(SnapshotStats {
            iter: s.iter,
            layer: s.layer,
            count: s.values.len(),
            range: h.max_abs,
            kurtosis: excess_kurtosis(&s.values),
        });
        histograms.push(h);
    }

    let mut per_layer: BTreeMap<usize, Vec<(u64, f32)>> = BTreeMap::new();
    let mut per_iter: BTreeMap<u64, Vec<(usize, f32)>> = BTreeMap::new();
    for (&(it, l), &r) in &range {
        per_layer.entry(l).or_default().push((it, r));
        per_iter.entry(it).or_default().push((l, r));
    }
    let c2 = per_layer
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&l, v)| (l, v[v.len() - 1].1 < v[0].1))
        .collect();
    let c3 = per_iter
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&it, v)| (it, v[0].1 > v[v.len() - 1].1))
        .collect();
    let mut c4 = BTreeMap::new();
    for &l in marked {
        for &it in per_iter.keys() {
            let get = |layer: usize| range.get(&(it, layer)).copied();
            if let (Some(m), Some(a), Some(b)) = (get(l), l.checked_sub(1).and_then(get), get(l + 1)) {
                c4.insert((l, it), m > a && m > b);
            }
        }
    }
    Ok(SnapshotReport { histograms, stats, c2, c3, c4 })
}
