//! Anomaly-weighted descriptors and contrastive training of the projection
//! head.
//!
//! Pixel sets per image `i`, given a threshold `t` on its anomaly map:
//! `S_i` anomalous pixels (`A > t`), `S̄_i` the rest, `P_i` / `P̄_i` the
//! union of `S` / `S̄` over `i` and its nearest images, and `C_i` the union
//! of `S` over a random sample of far images. Positive pairs come from
//! `S×P` and `S̄×P̄`, negative pairs from `S×P̄` and `P×C`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::localize::ThresholdEstimate;
use crate::nets::{head_backward, head_forward, head_forward_batch, new_head, AdamW, Params, PixelNet};
use crate::rng::RngState;
use crate::tensor::{AnomalyMap, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub k: usize,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub pairs_per_batch: usize,
    pub feature_smooth_sigma: f64,
    /// Width of the head's first layer. The output width is the channel count.
    pub hidden_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.002,
            k: 3,
            margin: 0.5,
            epochs: 10,
            lr: 5e-4,
            weight_decay: 0.01,
            pairs_per_batch: 1024,
            feature_smooth_sigma: 2.0,
            hidden_dim: 512,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("contrastive.{m}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return bad(format!("margin must be in (0, 2], got {}", self.margin));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.pairs_per_batch == 0 {
            return bad("pairs_per_batch must be >= 1".into());
        }
        if !(self.feature_smooth_sigma >= 0.0 && self.feature_smooth_sigma.is_finite()) {
            return bad("feature_smooth_sigma must be >= 0".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDescriptor {
    pub values: Vec<f64>,
    pub image_index: usize,
}

/// Smooth, crop to the anomaly-map extent and mean-center raw features.
pub fn prepare_features(raw: &FeatureMap, sigma: f64, border_margin: usize) -> Result<FeatureMap> {
    Ok(raw.gaussian_smooth(sigma)?.crop_border(border_margin)?.mean_center())
}

/// Softmax of `A / tau` over all pixels, with max subtraction.
pub fn softmax_weights(anomaly: &AnomalyMap, tau: f64) -> Vec<f64> {
    let m = anomaly.max_score();
    let mut w: Vec<f64> = anomaly.scores().iter().map(|&a| ((a - m) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Anomaly-weighted pooling of `features`. The returned descriptor carries
/// image index 0; callers set it.
pub fn compute_descriptor(features: &FeatureMap, anomaly: &AnomalyMap, tau: f64) -> Result<ImageDescriptor> {
    if !features.same_extent(anomaly) {
        return Err(Error::param(format!(
            "feature map {}x{} and anomaly map {}x{} differ",
            features.height(),
            features.width(),
            anomaly.height(),
            anomaly.width()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::param("tau must be > 0"));
    }
    let c = features.channels();
    let mut values = vec![0.0; c];
    for (w, px) in softmax_weights(anomaly, tau).iter().zip(features.pixels()) {
        for (v, f) in values.iter_mut().zip(px) {
            *v += w * f;
        }
    }
    Ok(ImageDescriptor { values, image_index: 0 })
}

/// Crop margin that brings `raw` down to the extent of `map`.
fn margin_for(raw: &FeatureMap, map: &AnomalyMap) -> Result<usize> {
    let (dh, dw) = (raw.height().checked_sub(map.height()), raw.width().checked_sub(map.width()));
    match (dh, dw) {
        (Some(dh), Some(dw)) if dh == dw && dh % 2 == 0 => Ok(dh / 2),
        _ => Err(Error::param(format!(
            "anomaly map {}x{} is not a symmetric crop of {}x{} features",
            map.height(),
            map.width(),
            raw.height(),
            raw.width()
        ))),
    }
}

fn aligned_features(corpus: &Corpus, maps: &[AnomalyMap], sigma: f64) -> Result<Vec<FeatureMap>> {
    if corpus.len() != maps.len() {
        return Err(Error::param(format!("{} images but {} anomaly maps", corpus.len(), maps.len())));
    }
    crate::par_map(&corpus.items.iter().zip(maps).collect::<Vec<_>>(), |(item, map)| {
        prepare_features(&item.features, sigma, margin_for(&item.features, map)?)
    })
    .into_iter()
    .collect()
}

/// Descriptors of the raw (pre-head) features.
pub fn raw_descriptors(corpus: &Corpus, maps: &[AnomalyMap], config: &ContrastiveConfig) -> Result<Vec<ImageDescriptor>> {
    let feats = aligned_features(corpus, maps, config.feature_smooth_sigma)?;
    feats
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (f, m))| {
            let mut d = compute_descriptor(f, m, config.tau)?;
            d.image_index = i;
            Ok(d)
        })
        .collect()
}

/// Descriptors of the head's unit embeddings.
pub fn embed_descriptors(
    corpus: &Corpus,
    maps: &[AnomalyMap],
    head: &PixelNet,
    config: &ContrastiveConfig,
) -> Result<Vec<ImageDescriptor>> {
    let feats = aligned_features(corpus, maps, config.feature_smooth_sigma)?;
    feats
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (f, m))| {
            let mut d = compute_descriptor(&head_forward(head, f)?, m, config.tau)?;
            d.image_index = i;
            Ok(d)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// `k` nearest images of each image.
    pub near: Vec<Vec<usize>>,
    /// `k` images sampled from the farther half of each image's distances.
    pub far: Vec<Vec<usize>>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn mine_neighbors(descriptors: &[ImageDescriptor], k: usize, rng: &mut RngState) -> Result<Neighbors> {
    let n = descriptors.len();
    if k == 0 || n <= 2 * k {
        return Err(Error::param(format!("neighbor mining with k = {k} needs more than {} images, got {n}", 2 * k)));
    }
    let mut near = Vec::with_capacity(n);
    let mut far = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclid(&descriptors[i].values, &descriptors[j].values), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nn: Vec<usize> = others[..k].iter().map(|o| o.1).collect();
        let median = others[others.len() / 2].0;
        let pool: Vec<usize> = others
            .iter()
            .filter(|o| o.0 >= median && !nn.contains(&o.1))
            .map(|o| o.1)
            .collect();
        let picked = rng.sample_distinct(pool.len(), k).into_iter().map(|p| pool[p]).collect();
        near.push(nn);
        far.push(picked);
    }
    Ok(Neighbors { near, far })
}

/// Pixel indices with `A > t`.
pub fn anomalous_pixels(anomaly: &AnomalyMap, t: f64) -> Vec<usize> {
    (0..anomaly.len()).filter(|&p| anomaly.scores()[p] > t).collect()
}

/// Split embedded pixels into the anomalous set `S` (`A > t`) and its
/// complement.
pub fn partition_features(
    embedded: &FeatureMap,
    anomaly: &AnomalyMap,
    t: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !embedded.same_extent(anomaly) {
        return Err(Error::param("embedded features and anomaly map differ in extent"));
    }
    let mut s = Vec::new();
    let mut rest = Vec::new();
    for (p, px) in embedded.pixels().enumerate() {
        if anomaly.scores()[p] > t {
            s.push(px.to_vec());
        } else {
            rest.push(px.to_vec());
        }
    }
    Ok((s, rest))
}

/// Margin loss of one pair and its gradients with respect to both vectors.
pub fn hadsell_loss(e1: &[f64], e2: &[f64], positive: bool, margin: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let diff: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a - b).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if positive {
        let g2 = diff.iter().map(|v| -v).collect();
        return (0.5 * d * d, diff, g2);
    }
    if d >= margin || d == 0.0 {
        let loss = if d >= margin { 0.0 } else { 0.5 * margin * margin };
        return (loss, vec![0.0; e1.len()], vec![0.0; e1.len()]);
    }
    let s = -(margin - d) / d;
    let g1: Vec<f64> = diff.iter().map(|v| s * v).collect();
    let g2 = g1.iter().map(|v| -v).collect();
    (0.5 * (margin - d) * (margin - d), g1, g2)
}

/// Union of per-image pixel lists, sampled uniformly.
struct PixelPool<'a> {
    parts: Vec<(usize, &'a [usize])>,
    total: usize,
}

impl<'a> PixelPool<'a> {
    fn new(images: impl IntoIterator<Item = usize>, lists: &'a [Vec<usize>]) -> Self {
        let parts: Vec<(usize, &[usize])> = images
            .into_iter()
            .map(|i| (i, lists[i].as_slice()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let total = parts.iter().map(|p| p.1.len()).sum();
        Self { parts, total }
    }

    fn sample(&self, rng: &mut RngState) -> (usize, usize) {
        let mut r = rng.below(self.total);
        for &(img, list) in &self.parts {
            if r < list.len() {
                return (img, list[r]);
            }
            r -= list.len();
        }
        unreachable!("index within pool total")
    }
}

/// Trained head with the mean pair loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: PixelNet,
    pub epoch_losses: Vec<f64>,
}

pub fn train_head(
    corpus: &Corpus,
    maps: &[AnomalyMap],
    threshold: &ThresholdEstimate,
    config: &ContrastiveConfig,
    rng: &mut RngState,
) -> Result<TrainedHead> {
    config.validate()?;
    let feats = aligned_features(corpus, maps, config.feature_smooth_sigma)?;
    let c = corpus.channels();
    let mut head = new_head(c, config.hidden_dim, c, rng);
    if config.epochs == 0 {
        return Ok(TrainedHead { head, epoch_losses: Vec::new() });
    }

    let descriptors: Vec<ImageDescriptor> = feats
        .iter()
        .zip(maps)
        .map(|(f, m)| compute_descriptor(f, m, config.tau))
        .collect::<Result<_>>()?;
    let neighbors = mine_neighbors(&descriptors, config.k, rng)?;
    let anomalous: Vec<Vec<usize>> = maps.iter().map(|m| anomalous_pixels(m, threshold.t)).collect();
    if anomalous.iter().all(|s| s.is_empty()) {
        return Err(Error::Training {
            iteration: 0,
            message: format!(
                "no pixel exceeds the threshold {} in any image; inspect the threshold estimate",
                threshold.t
            ),
        });
    }
    let normal: Vec<Vec<usize>> = maps
        .iter()
        .map(|m| (0..m.len()).filter(|&p| m.scores()[p] <= threshold.t).collect())
        .collect();

    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for &i in &order {
            let with_near = || std::iter::once(i).chain(neighbors.near[i].iter().copied());
            let s = PixelPool::new([i], &anomalous);
            let s_bar = PixelPool::new([i], &normal);
            let p = PixelPool::new(with_near(), &anomalous);
            let p_bar = PixelPool::new(with_near(), &normal);
            let far = PixelPool::new(neighbors.far[i].iter().copied(), &anomalous);
            let families: Vec<(&PixelPool, &PixelPool, bool)> =
                [(&s, &p, true), (&s_bar, &p_bar, true), (&s, &p_bar, false), (&p, &far, false)]
                    .into_iter()
                    .filter(|(a, b, _)| a.total > 0 && b.total > 0)
                    .collect();
            if families.is_empty() {
                continue;
            }
            let base = config.pairs_per_batch / families.len();
            let extra = config.pairs_per_batch % families.len();
            let mut rows = Vec::with_capacity(2 * config.pairs_per_batch * c);
            let mut signs = Vec::with_capacity(config.pairs_per_batch);
            for (f, (a, b, positive)) in families.iter().enumerate() {
                for _ in 0..base + usize::from(f < extra) {
                    for (img, px) in [a.sample(rng), b.sample(rng)] {
                        rows.extend_from_slice(feats[img].pixel(px));
                    }
                    signs.push(*positive);
                }
            }
            let n_pairs = signs.len();
            let fwd = head_forward_batch(&head, &rows, 2 * n_pairs)?;
            let mut grad = vec![0.0; fwd.embeddings.len()];
            let mut loss = 0.0;
            let scale = 1.0 / n_pairs as f64;
            for (k, &positive) in signs.iter().enumerate() {
                let (l, r) = (2 * k * c, (2 * k + 1) * c);
                let (pl, g1, g2) =
                    hadsell_loss(&fwd.embeddings[l..l + c], &fwd.embeddings[r..r + c], positive, config.margin);
                loss += pl * scale;
                for j in 0..c {
                    grad[l + j] += g1[j] * scale;
                    grad[r + j] += g2[j] * scale;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: step,
                    message: "contrastive loss is not finite".into(),
                });
            }
            let mut grads = head.zero_grads();
            head_backward(&head, &fwd, &grad, &mut grads);
            opt.step(head.param_slices_mut(), &grads.slices());
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(if batches > 0 { loss_sum / batches as f64 } else { 0.0 });
    }
    Ok(TrainedHead { head, epoch_losses })
}

pub fn write_descriptors_csv(path: &Path, ids: &[String], descriptors: &[ImageDescriptor]) -> Result<()> {
    if ids.len() != descriptors.len() {
        return Err(Error::param("ids and descriptors are not aligned"));
    }
    let dim = descriptors.first().map_or(0, |d| d.values.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::corpus::csv_err(path, e))?;
    let mut header = vec!["image_id".to_string()];
    header.extend((0..dim).map(|k| format!("d_{k}")));
    w.write_record(&header).map_err(|e| crate::corpus::csv_err(path, e))?;
    for (id, d) in ids.iter().zip(descriptors) {
        let mut rec = vec![id.clone()];
        rec.extend(d.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(|e| crate::corpus::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_descriptors_csv(path: &Path) -> Result<(Vec<String>, Vec<ImageDescriptor>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::corpus::csv_err(path, e))?;
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| crate::corpus::csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        ids.push(rec.get(0).unwrap_or_default().to_string());
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(offset, format!("bad descriptor value: {e}")))?;
        if let Some(first) = out.first().map(|d: &ImageDescriptor| d.values.len()) {
            if values.len() != first {
                return Err(Error::format(offset, "descriptor rows differ in length"));
            }
        }
        out.push(ImageDescriptor { values, image_index: i });
    }
    Ok((ids, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_corpus, SyntheticSpec};
    use crate::nets::{grad_check, Activation, Layer};
    use proptest::prelude::*;

    fn amap(h: usize, w: usize, s: &[f64]) -> AnomalyMap {
        AnomalyMap::new(h, w, s.to_vec()).unwrap()
    }

    #[test]
    fn descriptor_examples() {
        let mut rng = RngState::new(1);
        let f = FeatureMap::from_fn(3, 4, 2, |_, _, _| rng.normal());
        let flat = compute_descriptor(&f, &AnomalyMap::zeros(3, 4), 0.002).unwrap();
        let means = f.channel_means();
        for (a, b) in flat.values.iter().zip(&means) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut peak = AnomalyMap::zeros(3, 4);
        peak.scores_mut()[7] = 1.0;
        let d = compute_descriptor(&f, &peak, 0.002).unwrap();
        for (a, b) in d.values.iter().zip(f.pixel(7)) {
            assert!((a - b).abs() < 1e-6);
        }
        let tau = 0.002;
        let two = FeatureMap::new(2, 1, 2, vec![1.0, -2.0, 5.0, 4.0]).unwrap();
        let d = compute_descriptor(&two, &amap(2, 1, &[0.0, tau * 3f64.ln()]), tau).unwrap();
        assert!((d.values[0] - (0.25 * 1.0 + 0.75 * 5.0)).abs() < 1e-12);
        assert!((d.values[1] - (0.25 * -2.0 + 0.75 * 4.0)).abs() < 1e-12);
        assert!(compute_descriptor(&two, &AnomalyMap::zeros(1, 2), tau).is_err());
    }

    #[test]
    fn descriptor_tau_limits() {
        let mut rng = RngState::new(2);
        let f = FeatureMap::from_fn(4, 4, 3, |_, _, _| rng.normal());
        let a = AnomalyMap::new(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let wide = compute_descriptor(&f, &a, 1e6).unwrap();
        for (x, m) in wide.values.iter().zip(f.channel_means()) {
            assert!((x - m).abs() < 1e-6);
        }
        let arg = (0..16).max_by(|&i, &j| a.scores()[i].total_cmp(&a.scores()[j])).unwrap();
        let sharp = compute_descriptor(&f, &a, 1e-9).unwrap();
        for (x, v) in sharp.values.iter().zip(f.pixel(arg)) {
            assert!((x - v).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_offsets(
            s in prop::collection::vec(-1.0f64..1.0, 1..30),
            shift in -100.0f64..100.0,
            tau in 0.001f64..2.0,
        ) {
            let n = s.len();
            let w = softmax_weights(&amap(1, n, &s), tau);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
            let w2 = softmax_weights(&amap(1, n, &shifted), tau);
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn hadsell_nonnegative(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            positive: bool,
        ) {
            prop_assert!(hadsell_loss(&a, &b, positive, 0.5).0 >= 0.0);
        }
    }

    fn desc(v: &[f64]) -> Vec<ImageDescriptor> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| ImageDescriptor { values: vec![x], image_index: i })
            .collect()
    }

    #[test]
    fn neighbor_examples() {
        let d = desc(&[0.0, 1.0, 2.0, 10.0]);
        let n = mine_neighbors(&d, 1, &mut RngState::new(0)).unwrap();
        assert_eq!(n.near[0], vec![1]);
        let dup = desc(&[5.0, 0.0, 3.0, 3.0, 9.0]);
        let n = mine_neighbors(&dup, 1, &mut RngState::new(0)).unwrap();
        assert_eq!(n.near[0], vec![2]);
        assert!(matches!(mine_neighbors(&d, 2, &mut RngState::new(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn neighbor_lists_are_consistent() {
        let mut rng = RngState::new(3);
        for _ in 0..30 {
            let n = 7 + rng.below(20);
            let k = 1 + rng.below(3);
            let d: Vec<ImageDescriptor> = (0..n)
                .map(|i| ImageDescriptor { values: vec![rng.normal(), rng.normal()], image_index: i })
                .collect();
            let seed = rng.below(1000) as u64;
            let a = mine_neighbors(&d, k, &mut RngState::new(seed)).unwrap();
            let b = mine_neighbors(&d, k, &mut RngState::new(seed)).unwrap();
            assert_eq!(a, b);
            for i in 0..n {
                assert_eq!(a.near[i].len(), k);
                assert_eq!(a.far[i].len(), k);
                assert!(!a.near[i].contains(&i) && !a.far[i].contains(&i));
                assert!(a.far[i].iter().all(|j| !a.near[i].contains(j)));
                let mut dist: Vec<f64> =
                    (0..n).filter(|&j| j != i).map(|j| euclid(&d[i].values, &d[j].values)).collect();
                dist.sort_by(f64::total_cmp);
                let median = dist[dist.len() / 2];
                for &j in &a.far[i] {
                    assert!(euclid(&d[i].values, &d[j].values) >= median);
                }
            }
        }
    }

    #[test]
    fn partition_examples() {
        let e = FeatureMap::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64);
        let a = amap(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (s, rest) = partition_features(&e, &a, 2.5).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(rest.len(), 2);
        assert_eq!(partition_features(&e, &a, 9.0).unwrap().0.len(), 0);
        assert_eq!(partition_features(&e, &a, f64::MIN).unwrap().0.len(), 4);
        // strict inequality
        assert_eq!(partition_features(&e, &a, 2.0).unwrap().0.len(), 2);
    }

    #[test]
    fn hadsell_examples() {
        let v = [0.6, 0.8];
        assert_eq!(hadsell_loss(&v, &v, true, 0.5).0, 0.0);
        let (l, g1, g2) = hadsell_loss(&[0.0, 0.0], &[0.6, 0.0], false, 0.5);
        assert_eq!(l, 0.0);
        assert!(g1.iter().chain(&g2).all(|&g| g == 0.0));
        let (l, _, _) = hadsell_loss(&[0.0, 0.0], &[0.3, 0.0], false, 0.5);
        assert!((l - 0.02).abs() < 1e-15);
    }

    #[test]
    fn hadsell_gradients() {
        let mut rng = RngState::new(4);
        let mut checked = 0;
        while checked < 50 {
            let x: Vec<f64> = (0..6).map(|_| 0.3 * rng.normal()).collect();
            let positive = rng.uniform() < 0.5;
            let d = euclid(&x[..3], &x[3..]);
            if (d - 0.5).abs() < 1e-3 {
                continue;
            }
            let f = |p: &[f64]| {
                let (l, g1, g2) = hadsell_loss(&p[..3], &p[3..], positive, 0.5);
                (l, g1.into_iter().chain(g2).collect())
            };
            assert!(grad_check(f, &x, 1e-6) < 1e-4);
            checked += 1;
        }
    }

    fn small_corpus(seed: u64) -> Corpus {
        let spec = SyntheticSpec {
            n_images: 12,
            height: 40,
            width: 40,
            channels: 4,
            ..SyntheticSpec::default()
        };
        gen_synthetic_corpus(&spec, &mut RngState::new(seed)).unwrap()
    }

    fn cropped_masks_as_maps(corpus: &Corpus, margin: usize) -> Vec<AnomalyMap> {
        corpus
            .items
            .iter()
            .map(|it| {
                let m = it.gt_mask.as_ref().unwrap().crop_border(margin).unwrap();
                AnomalyMap::new(m.height(), m.width(), m.bits().iter().map(|&b| b as u8 as f64).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn all_normal_under_threshold_is_an_error() {
        let corpus = small_corpus(1);
        let maps = cropped_masks_as_maps(&corpus, 9);
        let t = ThresholdEstimate { t: 5.0, normal_ratio: 1.0, normal_cluster_index: 0 };
        let err = train_head(&corpus, &maps, &t, &ContrastiveConfig::default(), &mut RngState::new(0));
        assert!(matches!(err, Err(Error::Training { .. })));
    }

    #[test]
    fn zero_epochs_returns_fresh_head() {
        let corpus = small_corpus(1);
        let maps = cropped_masks_as_maps(&corpus, 9);
        let t = ThresholdEstimate { t: 0.5, normal_ratio: 0.25, normal_cluster_index: 0 };
        let cfg = ContrastiveConfig { epochs: 0, ..Default::default() };
        let trained = train_head(&corpus, &maps, &t, &cfg, &mut RngState::new(7)).unwrap();
        let c = corpus.channels();
        assert_eq!(trained.head, new_head(c, cfg.hidden_dim, c, &mut RngState::new(7)));
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let corpus = small_corpus(2);
        let maps = cropped_masks_as_maps(&corpus, 9);
        let t = ThresholdEstimate { t: 0.5, normal_ratio: 0.25, normal_cluster_index: 0 };
        let cfg = ContrastiveConfig { epochs: 6, pairs_per_batch: 256, lr: 5e-3, ..Default::default() };
        let a = train_head(&corpus, &maps, &t, &cfg, &mut RngState::new(3)).unwrap();
        let b = train_head(&corpus, &maps, &t, &cfg, &mut RngState::new(3)).unwrap();
        assert_eq!(a.head, b.head);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0], "{:?}", a.epoch_losses);
    }

    #[test]
    fn identity_like_head_gives_normalized_pooling() {
        // first layer: identity plus a large bias keeps every unit active;
        // second layer removes the bias again
        let c = 4;
        let big = 1e3;
        let mut w1 = vec![0.0; c * c];
        let mut w2 = vec![0.0; c * c];
        for i in 0..c {
            w1[i * c + i] = 1.0;
            w2[i * c + i] = 1.0;
        }
        let head = PixelNet::new(vec![
            Layer { in_dim: c, out_dim: c, weight: w1, bias: vec![big; c], activation: Activation::Relu },
            Layer { in_dim: c, out_dim: c, weight: w2, bias: vec![-big; c], activation: Activation::Identity },
        ])
        .unwrap();
        let corpus = small_corpus(3);
        let maps: Vec<AnomalyMap> = corpus.items.iter().map(|_| AnomalyMap::zeros(22, 22)).collect();
        let cfg = ContrastiveConfig::default();
        let got = embed_descriptors(&corpus, &maps, &head, &cfg).unwrap();
        for (i, item) in corpus.items.iter().enumerate() {
            let f = prepare_features(&item.features, 2.0, 9).unwrap();
            let mut want = vec![0.0; c];
            for px in f.pixels() {
                let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
                for k in 0..c {
                    want[k] += px[k] / n / f.n_pixels() as f64;
                }
            }
            for (a, b) in got[i].values.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(got[i].image_index, i);
        }
        assert_eq!(got, embed_descriptors(&corpus, &maps, &head, &cfg).unwrap());
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ids = vec!["a".to_string(), "b".to_string()];
        let d = vec![
            ImageDescriptor { values: vec![0.1, -2.5e-7], image_index: 0 },
            ImageDescriptor { values: vec![3.0, 1.0 / 3.0], image_index: 1 },
        ];
        write_descriptors_csv(&path, &ids, &d).unwrap();
        let (ri, rd) = read_descriptors_csv(&path).unwrap();
        assert_eq!(ri, ids);
        assert_eq!(rd, d);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_id,d_0,d_1\n"));
    }
}
