//! Final clustering of image descriptors and pixel-level segmentation.

use serde::{Deserialize, Serialize};

use crate::contrastive::prepare_features;
use crate::error::{Error, Result};
use crate::nets::{head_forward, PixelNet};
use crate::rng::RngState;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_clusters) {
            return Err(Error::param(format!("label {bad} out of range for {n_clusters} clusters")));
        }
        Ok(Self { labels, n_clusters })
    }

    /// Cluster count inferred as `max label + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, n_clusters }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_clusters];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Ward,
    Kmeans,
}

fn check_points(points: &[Vec<f64>], n_clusters: usize) -> Result<usize> {
    let n = points.len();
    if n_clusters == 0 {
        return Err(Error::param("n_clusters must be >= 1"));
    }
    if n_clusters > n {
        return Err(Error::param(format!("n_clusters {n_clusters} exceeds {n} points")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::param("points differ in dimension"));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relabel so clusters are numbered by their first member.
fn canonical(raw: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|&r| {
            let next = map.len();
            *map.entry(r).or_insert(next)
        })
        .collect()
}

/// Agglomerative clustering with Ward linkage.
///
/// Works on the merge cost `Δ(A, B) = |A||B| / (|A| + |B|) · ‖c_A − c_B‖²`
/// updated with the Lance–Williams recurrence. Among equal costs the pair
/// with the smallest `(i, j)` cluster indices merges first.
pub fn ward_cluster(points: &[Vec<f64>], n_clusters: usize) -> Result<Labeling> {
    check_points(points, n_clusters)?;
    let n = points.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let c = 0.5 * sq_dist(&points[i], &points[j]);
            cost[i * n + j] = c;
            cost[j * n + i] = c;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - n_clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && cost[i * n + j] < best.0 {
                    best = (cost[i * n + j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let c = ((ni + nk) * cost[i * n + k] + (nj + nk) * cost[j * n + k] - nk * dij)
                / (ni + nj + nk);
            cost[i * n + k] = c;
            cost[k * n + i] = c;
        }
        size[i] += size[j];
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    Labeling::new(canonical(&owner), n_clusters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labeling: Labeling,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.push(points[pick].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centers
}

/// Lloyd iterations from `centers`. Returns labels, final centers and the
/// objective after every assignment step.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let k = centers.len();
    let d = points[0].len();
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let assigned: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centers)).collect();
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        history.push(assigned.iter().map(|a| a.1).sum());
        let converged = new_labels == labels;
        labels = new_labels;
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // empty clusters take the point farthest from its own center
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (0, -1.0);
            for (i, p) in points.iter().enumerate() {
                let dd = sq_dist(p, &centers[labels[i]]);
                if dd > far.1 && counts[labels[i]] > 1 {
                    far = (i, dd);
                }
            }
            counts[labels[far.0]] -= 1;
            labels[far.0] = c;
            counts[c] = 1;
            centers[c] = points[far.0].clone();
        }
    }
    (labels, centers, history)
}

/// k-means with k-means++ seeding, best of `n_init` restarts.
pub fn kmeans(
    points: &[Vec<f64>],
    n_clusters: usize,
    rng: &mut RngState,
    n_init: usize,
    max_iter: usize,
) -> Result<KMeansResult> {
    check_points(points, n_clusters)?;
    let mut best: Option<KMeansResult> = None;
    for _ in 0..n_init.max(1) {
        let seeds = kmeans_pp(points, n_clusters, rng);
        let (labels, centers, _) = lloyd(points, seeds, max_iter);
        let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult {
                labeling: Labeling::new(labels, n_clusters)?,
                centers,
                inertia,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn cluster_points(
    points: &[Vec<f64>],
    method: ClusterMethod,
    n_clusters: usize,
    rng: &mut RngState,
) -> Result<Labeling> {
    match method {
        ClusterMethod::Ward => ward_cluster(points, n_clusters),
        ClusterMethod::Kmeans => Ok(kmeans(points, n_clusters, rng, 10, 300)?.labeling),
    }
}

/// Mean point of every cluster of `labeling`; empty clusters get the origin.
pub fn centroids(points: &[Vec<f64>], labeling: &Labeling) -> Result<Vec<Vec<f64>>> {
    if points.len() != labeling.len() {
        return Err(Error::param(format!(
            "{} points but {} labels",
            points.len(),
            labeling.len()
        )));
    }
    let d = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; labeling.n_clusters];
    let mut counts = vec![0usize; labeling.n_clusters];
    for (p, &l) in points.iter().zip(&labeling.labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(sums)
}

/// Fraction of items sharing their cluster's majority class.
pub fn purity(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    let t = crate::metrics::contingency(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("purity of empty labeling".into()));
    }
    let majority: u64 = (0..t.n_pred).map(|p| (0..t.n_true).map(|q| t.get(p, q)).max().unwrap_or(0)).sum();
    Ok(majority as f64 / pred.len() as f64)
}

/// Ward purity for each requested cluster count.
pub fn purity_curve(
    descriptors: &[Vec<f64>],
    truth: &Labeling,
    cluster_counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if descriptors.len() != truth.len() {
        return Err(Error::param("descriptors and truth are not aligned"));
    }
    cluster_counts
        .iter()
        .map(|&k| Ok((k, purity(&ward_cluster(descriptors, k)?, truth)?)))
        .collect()
}

/// Per-pixel cluster assignment over the cropped extent of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLabels {
    pub height: usize,
    pub width: usize,
    pub labeling: Labeling,
}

/// Label each pixel of an unseen image by the nearest cluster center to
/// its unit embedding. `raw` goes through the same smoothing, cropping and
/// centering as training descriptors.
pub fn segment_pixels(
    raw: &FeatureMap,
    head: &PixelNet,
    centers: &[Vec<f64>],
    smooth_sigma: f64,
    border_margin: usize,
) -> Result<PixelLabels> {
    if centers.is_empty() {
        return Err(Error::param("no cluster centers"));
    }
    if centers.iter().any(|c| c.len() != head.out_dim()) {
        return Err(Error::param("center dimension differs from head output"));
    }
    let feats = prepare_features(raw, smooth_sigma, border_margin)?;
    let emb = head_forward(head, &feats)?;
    let labels = emb.pixels().map(|p| nearest(p, centers).0).collect();
    Ok(PixelLabels {
        height: emb.height(),
        width: emb.width(),
        labeling: Labeling::new(labels, centers.len())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Layer};
    use proptest::prelude::*;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        canonical(a) == canonical(b)
    }

    fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        total
    }

    /// Minimum SSE over all partitions into exactly k non-empty blocks.
    fn exhaustive_sse(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; n];
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % k;
                c /= k;
            }
            let mut used = vec![false; k];
            labels.iter().for_each(|&l| used[l] = true);
            if used.iter().all(|&u| u) {
                best = best.min(sse(points, &labels, k));
            }
        }
        best
    }

    #[test]
    fn ward_singletons_and_duplicates() {
        let p = pts(&[&[0.0], &[5.0], &[9.0]]);
        assert_eq!(ward_cluster(&p, 3).unwrap().labels, vec![0, 1, 2]);
        let p = pts(&[&[0.0], &[4.0], &[4.0], &[10.0]]);
        let l = ward_cluster(&p, 3).unwrap();
        assert_eq!(l.labels[1], l.labels[2]);
        assert!(matches!(ward_cluster(&p, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn ward_recovers_separated_blobs() {
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let n = 4 + rng.below(7);
            let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
            let p: Vec<Vec<f64>> = truth
                .iter()
                .map(|&t| vec![t as f64 * 100.0 + rng.normal(), rng.normal()])
                .collect();
            let l = ward_cluster(&p, 2).unwrap();
            assert!(same_partition(&l.labels, &truth));
            assert!((sse(&p, &l.labels, 2) - exhaustive_sse(&p, 2)).abs() < 1e-9);
        }
    }

    #[test]
    fn ward_matches_naive_centroid_recomputation() {
        // the recurrence must agree with recomputing the Ward cost from
        // cluster centroids at every step
        let mut rng = RngState::new(17);
        for _ in 0..20 {
            let n = 3 + rng.below(8);
            let p: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
            let k = 1 + rng.below(n);
            let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            while clusters.len() > k {
                let centroid = |c: &[usize]| -> Vec<f64> {
                    (0..3).map(|j| c.iter().map(|&i| p[i][j]).sum::<f64>() / c.len() as f64).collect()
                };
                let mut best = (f64::INFINITY, 0, 0);
                for a in 0..clusters.len() {
                    for b in a + 1..clusters.len() {
                        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                        let c = na * nb / (na + nb) * sq_dist(&centroid(&clusters[a]), &centroid(&clusters[b]));
                        if c < best.0 - 1e-12 {
                            best = (c, a, b);
                        }
                    }
                }
                let merged = clusters.remove(best.2);
                clusters[best.1].extend(merged);
            }
            let mut naive = vec![0; n];
            for (c, members) in clusters.iter().enumerate() {
                for &i in members {
                    naive[i] = c;
                }
            }
            assert!(same_partition(&ward_cluster(&p, k).unwrap().labels, &naive));
        }
    }

    #[test]
    fn kmeans_examples() {
        let p = pts(&[&[0.0], &[0.1], &[10.0], &[10.1]]);
        let r = kmeans(&p, 2, &mut RngState::new(0), 10, 300).unwrap();
        assert!(same_partition(&r.labeling.labels, &[0, 0, 1, 1]));
        let p = pts(&[&[1.0, 1.0], &[5.0, 5.0], &[1.0, 1.0], &[9.0, 0.0], &[5.0, 5.0]]);
        let r = kmeans(&p, 3, &mut RngState::new(1), 10, 300).unwrap();
        assert!(same_partition(&r.labeling.labels, &[0, 1, 0, 2, 1]));
        assert_eq!(r.inertia, 0.0);
        assert!(kmeans(&p, 6, &mut RngState::new(1), 10, 300).is_err());
    }

    #[test]
    fn kmeans_reaches_exhaustive_optimum() {
        let mut rng = RngState::new(99);
        let trials = 100;
        let mut hits = 0;
        for _ in 0..trials {
            let n = 3 + rng.below(6);
            let p: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let r = kmeans(&p, 2, &mut rng, 10, 300).unwrap();
            if r.inertia <= exhaustive_sse(&p, 2) + 1e-9 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn lloyd_objective_never_increases() {
        let mut rng = RngState::new(5);
        for _ in 0..20 {
            let p: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let seeds = kmeans_pp(&p, 4, &mut rng);
            let (_, _, hist) = lloyd(&p, seeds, 300);
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn centroids_average_members() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![10.0, 10.0]];
        let l = Labeling::new(vec![0, 0, 2], 3).unwrap();
        let c = centroids(&pts, &l).unwrap();
        assert_eq!(c, vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert!(centroids(&pts[..2], &l).is_err());
    }

    #[test]
    fn purity_examples() {
        let p = pts(&[&[0.0], &[0.2], &[5.0], &[5.1], &[9.0]]);
        let truth = Labeling::from_labels(vec![0, 0, 1, 1, 0]);
        let curve = purity_curve(&p, &truth, &[1, 2, 5]).unwrap();
        assert!((curve[0].1 - 0.6).abs() < 1e-12);
        assert_eq!(curve[2].1, 1.0);
    }

    #[test]
    fn purity_non_decreasing_along_ward() {
        let mut rng = RngState::new(6);
        for _ in 0..10 {
            let n = 12;
            let p: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let truth = Labeling::from_labels((0..n).map(|_| rng.below(3)).collect());
            let counts: Vec<usize> = (1..=n).collect();
            let curve = purity_curve(&p, &truth, &counts).unwrap();
            for w in curve.windows(2) {
                assert!(w[1].1 >= w[0].1 - 1e-12);
            }
        }
    }

    fn identity_head(c: usize) -> PixelNet {
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        PixelNet::new(vec![Layer {
            in_dim: c,
            out_dim: c,
            weight: eye,
            bias: vec![0.0; c],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn segment_examples() {
        let mut rng = RngState::new(2);
        let f = FeatureMap::from_fn(6, 6, 2, |_, _, _| rng.normal());
        let head = identity_head(2);
        let one = segment_pixels(&f, &head, &[vec![0.3, 0.1]], 0.0, 1).unwrap();
        assert_eq!((one.height, one.width), (4, 4));
        assert!(one.labeling.labels.iter().all(|&l| l == 0));
        let emb = head_forward(&head, &prepare_features(&f, 0.0, 1).unwrap()).unwrap();
        let target = emb.pixel(5).to_vec();
        let flipped: Vec<f64> = target.iter().map(|v| -v).collect();
        let seg = segment_pixels(&f, &head, &[flipped, target], 0.0, 1).unwrap();
        assert_eq!(seg.labeling.labels[5], 1);
        assert!(segment_pixels(&f, &head, &[], 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariance(shift in -50.0f64..50.0, seed in 0u64..500) {
            let mut rng = RngState::new(seed);
            let p: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.normal() * 3.0, rng.normal()]).collect();
            let q: Vec<Vec<f64>> = p.iter().map(|v| vec![v[0] + shift, v[1] - shift]).collect();
            let a = ward_cluster(&p, 3).unwrap();
            let b = ward_cluster(&q, 3).unwrap();
            prop_assert!(same_partition(&a.labels, &b.labels));
            let ka = kmeans(&p, 3, &mut RngState::new(seed), 10, 300).unwrap();
            let kb = kmeans(&q, 3, &mut RngState::new(seed), 10, 300).unwrap();
            prop_assert!((ka.inertia - kb.inertia).abs() < 1e-6 * (1.0 + ka.inertia));
        }
    }
}
