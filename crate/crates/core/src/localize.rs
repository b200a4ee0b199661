//! Blind anomaly localization.
//!
//! Each image's `[0, 1]`-rescaled features are reconstructed through the
//! VAE latent mean; the residual is scored per pixel by its contribution to
//! the 1D optimal-transport cost between the pixel's local (Gaussian
//! window) distribution and the image-wide distribution, channel by channel.
//!
//! For one channel with global quantile function `Q`, a pixel with value
//! `v` and weighted local rank `u` contributes `(v - Q(u))²`: the squared
//! distance its local quantile is transported under the monotone coupling.

use serde::{Deserialize, Serialize};

use crate::cluster::kmeans;
use crate::contrastive::ImageDescriptor;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nets::VaeModel;
use crate::rng::RngState;
use crate::tensor::{kernel_radius, AnomalyMap, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcaConfig {
    /// Local window scale.
    pub sigma_p: f64,
    /// Final score smoothing.
    pub sigma_s: f64,
    /// Pixels discarded at every edge; `None` means `ceil(3 * sigma_p)`.
    pub border_margin: Option<usize>,
}

impl Default for FcaConfig {
    fn default() -> Self {
        Self {
            sigma_p: 3.0,
            sigma_s: 1.0,
            border_margin: None,
        }
    }
}

impl FcaConfig {
    pub fn margin(&self) -> usize {
        self.border_margin.unwrap_or_else(|| kernel_radius(self.sigma_p))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::Config(format!("fca.sigma_p must be > 0, got {}", self.sigma_p)));
        }
        if !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::Config(format!("fca.sigma_s must be >= 0, got {}", self.sigma_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub t: f64,
    pub normal_ratio: f64,
    pub normal_cluster_index: usize,
}

pub fn vae_residual(features: &FeatureMap, model: &VaeModel) -> Result<FeatureMap> {
    features.sub(&model.reconstruct_mean(features)?)
}

/// Value at quantile `q ∈ [0, 1]` of ascending `sorted`, linearly
/// interpolated between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-pixel local-vs-global transport contribution, summed over channels
/// and smoothed with `sigma_s`.
pub fn fca_score(residual: &FeatureMap, config: &FcaConfig) -> Result<AnomalyMap> {
    config.validate()?;
    let (h, w, c) = (residual.height(), residual.width(), residual.channels());
    let r = kernel_radius(config.sigma_p);
    if h.min(w) <= 2 * r {
        return Err(Error::param(format!(
            "{h}x{w} map is too small for a local window of radius {r}"
        )));
    }
    let side = 2 * r + 1;
    let two_s2 = 2.0 * config.sigma_p * config.sigma_p;
    let window: Vec<f64> = (0..side * side)
        .map(|k| {
            let dy = (k / side) as f64 - r as f64;
            let dx = (k % side) as f64 - r as f64;
            (-(dy * dy + dx * dx) / two_s2).exp()
        })
        .collect();

    let mut scores = vec![0.0; h * w];
    for ch in 0..c {
        let plane = residual.channel(ch);
        let mut sorted = plane.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[0] == sorted[sorted.len() - 1] {
            continue;
        }
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for x in 0..w {
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                let v = plane[y * w + x];
                let (mut below, mut ties, mut total) = (0.0, 0.0, 0.0);
                for yy in y0..=y1 {
                    let wrow = &window[(yy + r - y) * side..];
                    let prow = &plane[yy * w..];
                    for xx in x0..=x1 {
                        let wt = wrow[xx + r - x];
                        let q = prow[xx];
                        total += wt;
                        if q < v {
                            below += wt;
                        } else if q == v {
                            ties += wt;
                        }
                    }
                }
                let u = (below + 0.5 * ties) / total;
                let d = v - quantile_sorted(&sorted, u);
                scores[y * w + x] += d * d;
            }
        }
    }
    AnomalyMap::new(h, w, scores)?.gaussian_smooth(config.sigma_s)
}

/// Anomaly maps for every item: rescale, subtract the VAE mean
/// reconstruction (skipped when `model` is `None`), score, crop.
pub fn localize(
    corpus: &Corpus,
    model: Option<&VaeModel>,
    config: &FcaConfig,
) -> Result<Vec<AnomalyMap>> {
    config.validate()?;
    crate::par_map(&corpus.items, |item| {
        let scaled = item.features.minmax_rescale();
        let residual = match model {
            Some(m) => vae_residual(&scaled, m)?,
            None => scaled,
        };
        fca_score(&residual, config)?.crop_border(config.margin())
    })
    .into_iter()
    .collect()
}

/// Image-level score: the largest pixel score.
pub fn image_score(map: &AnomalyMap) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::param("empty anomaly map"));
    }
    Ok(map.max_score())
}

/// Estimate the binarization threshold without labels: cluster image
/// descriptors, take the cluster with the lowest mean image score as the
/// normal group, and return the matching quantile of the image scores.
pub fn estimate_threshold(
    descriptors: &[ImageDescriptor],
    image_scores: &[f64],
    n_clusters: usize,
    rng: &mut RngState,
) -> Result<ThresholdEstimate> {
    let n = descriptors.len();
    if n != image_scores.len() {
        return Err(Error::param("descriptors and image scores are not aligned"));
    }
    if n_clusters < 2 {
        return Err(Error::param("threshold estimation needs n_clusters >= 2"));
    }
    if n_clusters > n {
        return Err(Error::param(format!("n_clusters {n_clusters} exceeds {n} images")));
    }
    let points: Vec<Vec<f64>> = descriptors.iter().map(|d| d.values.clone()).collect();
    let km = kmeans(&points, n_clusters, rng, 10, 300)?;
    let mut sums = vec![0.0; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (&l, &s) in km.labeling.labels.iter().zip(image_scores) {
        sums[l] += s;
        counts[l] += 1;
    }
    let mut normal = 0;
    let mut best = f64::INFINITY;
    for k in 0..n_clusters {
        if counts[k] == 0 {
            continue;
        }
        let m = sums[k] / counts[k] as f64;
        if m < best {
            best = m;
            normal = k;
        }
    }
    let normal_ratio = counts[normal] as f64 / n as f64;
    let mut sorted = image_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ThresholdEstimate {
        t: quantile_sorted(&sorted, normal_ratio),
        normal_ratio,
        normal_cluster_index: normal,
    })
}

/// Threshold at a known normal ratio.
pub fn threshold_at_ratio(image_scores: &[f64], normal_ratio: f64) -> f64 {
    let mut sorted = image_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, normal_ratio)
}
