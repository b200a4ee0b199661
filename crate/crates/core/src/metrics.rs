//! Clustering and detection metrics.

use std::collections::VecDeque;

use crate::cluster::Labeling;
use crate::corpus::Mask;
use crate::error::{Error, Result};
use crate::tensor::AnomalyMap;

/// `n_pred × n_true` co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub n_pred: usize,
    pub n_true: usize,
    pub counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn get(&self, p: usize, t: usize) -> u64 {
        self.counts[p * self.n_true + t]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks_exact(self.n_true).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut out = vec![0; self.n_true];
        for row in self.counts.chunks_exact(self.n_true) {
            for (o, &c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }
}

pub fn contingency(pred: &Labeling, truth: &Labeling) -> Result<ContingencyTable> {
    if pred.len() != truth.len() {
        return Err(Error::param(format!(
            "labelings differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (np, nt) = (pred.n_clusters.max(1), truth.n_clusters.max(1));
    let mut counts = vec![0u64; np * nt];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        counts[p * nt + t] += 1;
    }
    Ok(ContingencyTable {
        n_pred: np,
        n_true: nt,
        counts,
    })
}

fn entropy(marginal: &[u64], n: f64) -> f64 {
    marginal
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(a: &Labeling, b: &Labeling) -> Result<f64> {
    let t = contingency(a, b)?;
    let n = t.total() as f64;
    if n == 0.0 {
        return Err(Error::UndefinedMetric("nmi of empty labelings".into()));
    }
    let (ra, cb) = (t.row_sums(), t.col_sums());
    let (ha, hb) = (entropy(&ra, n), entropy(&cb, n));
    if ha + hb == 0.0 {
        // both partitions are a single block, hence identical
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for p in 0..t.n_pred {
        for q in 0..t.n_true {
            let c = t.get(p, q);
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ra[p] as f64 * cb[q] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts over the contingency table.
pub fn ari(a: &Labeling, b: &Labeling) -> Result<f64> {
    let t = contingency(a, b)?;
    let index: f64 = t.counts.iter().map(|&c| comb2(c)).sum();
    let sa: f64 = t.row_sums().into_iter().map(comb2).sum();
    let sb: f64 = t.col_sums().into_iter().map(comb2).sum();
    let pairs = comb2(t.total());
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / pairs;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both all-singletons or both one block
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost perfect assignment on a square `n × n` cost matrix
/// (shortest augmenting paths with potentials). Returns the column
/// assigned to each row.
pub fn linear_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Cluster-to-class mapping maximizing matched items; `None` for
/// clusters left without a class.
pub fn best_mapping(table: &ContingencyTable) -> Vec<Option<usize>> {
    let n = table.n_pred.max(table.n_true);
    let big = table.counts.iter().copied().max().unwrap_or(0) as f64;
    let mut cost = vec![big; n * n];
    for p in 0..table.n_pred {
        for t in 0..table.n_true {
            cost[p * n + t] = big - table.get(p, t) as f64;
        }
    }
    let rows = linear_assignment(&cost, n);
    (0..table.n_pred)
        .map(|p| Some(rows[p]).filter(|&t| t < table.n_true))
        .collect()
}

/// Micro-averaged F1 under the optimal one-to-one cluster-to-class mapping.
pub fn f1_assignment(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    let t = contingency(pred, truth)?;
    let n = t.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("f1 of empty labelings".into()));
    }
    let matched: u64 = best_mapping(&t)
        .iter()
        .enumerate()
        .filter_map(|(p, m)| m.map(|q| t.get(p, q)))
        .sum();
    Ok(matched as f64 / n as f64)
}

/// Area under the ROC curve via the rank-sum statistic with average
/// ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::param("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 8-connected components of the set bits, each as ascending pixel indices.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut region = Vec::new();
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

/// Per-region overlap curve, normalized area up to `fpr_max`.
///
/// Thresholds sweep the pooled score range from the maximum down to the
/// minimum in `n_thresholds` evenly spaced steps; a pixel is positive when
/// its score is at least the threshold.
pub fn pro(maps: &[AnomalyMap], masks: &[Mask], fpr_max: f64, n_thresholds: usize) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::param("maps and masks are not aligned"));
    }
    if !(fpr_max > 0.0 && fpr_max <= 1.0) || n_thresholds < 2 {
        return Err(Error::param("pro needs fpr_max in (0, 1] and >= 2 thresholds"));
    }
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut normal: Vec<f64> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.height() != mask.height() || map.width() != mask.width() {
            return Err(Error::param("map and mask extents differ"));
        }
        let s = map.scores();
        for r in connected_components(mask) {
            regions.push(r.iter().map(|&p| s[p]).collect());
        }
        normal.extend(s.iter().zip(mask.bits()).filter(|(_, &b)| !b).map(|(&v, _)| v));
    }
    if regions.is_empty() {
        return Err(Error::UndefinedMetric("no anomalous pixels in ground truth".into()));
    }
    if normal.is_empty() {
        return Err(Error::UndefinedMetric("no normal pixels in ground truth".into()));
    }
    let all = regions.iter().flatten().chain(&normal);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));

    let mut curve = vec![(0.0, 0.0)];
    for k in 0..n_thresholds {
        let th = if k + 1 == n_thresholds {
            lo
        } else {
            hi - (hi - lo) * k as f64 / (n_thresholds - 1) as f64
        };
        let fpr = normal.iter().filter(|&&v| v >= th).count() as f64 / normal.len() as f64;
        let overlap = regions
            .iter()
            .map(|r| r.iter().filter(|&&v| v >= th).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, overlap));
    }

    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0);
            area += (fpr_max - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    Ok(area / fpr_max)
}
