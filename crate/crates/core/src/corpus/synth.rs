//! Synthetic texture corpora with planted, labeled anomalies.
//!
//! Normal features are a per-mode affine image of a few smooth Gaussian
//! fields (so channels are correlated, like backbone activations), plus a
//! little white noise. Each anomalous image gets one elliptical region whose
//! statistics are perturbed by a type-specific family:
//!
//! * family 0, mean shift: every channel moves by `perturbation_strength`;
//! * family 1, variance scaling: the even channels are multiplied by
//!   `1 + perturbation_strength`, like a local contrast change seen through
//!   a backbone. Their variance grows by the square of that factor and their
//!   mean moves with the mode's channel means, so the family leaves a
//!   first-order trace a pooled descriptor can pick up;
//! * family 2, channel permutation: channel `c` takes the value of channel
//!   `c + 1` (cyclically).
//!
//! Type `t ≥ 1` uses family `(t - 1) % 3`; later cycles grow the magnitude
//! (and the permutation offset).

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusItem, Mask};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{gaussian_kernel, FeatureMap};

const WHITE_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_anomaly_types: usize,
    pub normal_fraction: f64,
    pub anomaly_area_fraction: f64,
    pub base_smoothness: f64,
    pub perturbation_strength: f64,
    pub n_normal_modes: usize,
    /// Region centers stay `2 * border_margin` pixels from every edge.
    pub border_margin: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 64,
            height: 48,
            width: 48,
            channels: 8,
            n_anomaly_types: 3,
            normal_fraction: 0.25,
            anomaly_area_fraction: 0.04,
            base_smoothness: 1.5,
            perturbation_strength: 3.0,
            n_normal_modes: 1,
            border_margin: 9,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        if self.n_images == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("n_images, height, width and channels must be positive".into());
        }
        if self.n_anomaly_types == 0 {
            return bad("n_anomaly_types must be >= 1".into());
        }
        if !(self.normal_fraction > 0.0 && self.normal_fraction <= 1.0) {
            return bad(format!("normal_fraction {} outside (0, 1]", self.normal_fraction));
        }
        if !(self.anomaly_area_fraction > 0.0 && self.anomaly_area_fraction <= 0.25) {
            return bad(format!(
                "anomaly_area_fraction {} outside (0, 0.25]",
                self.anomaly_area_fraction
            ));
        }
        if !(self.base_smoothness > 0.0 && self.base_smoothness.is_finite()) {
            return bad("base_smoothness must be > 0".into());
        }
        if !(self.perturbation_strength > 0.0 && self.perturbation_strength.is_finite()) {
            return bad("perturbation_strength must be > 0".into());
        }
        if self.n_normal_modes == 0 {
            return bad("n_normal_modes must be >= 1".into());
        }
        if self.n_anomaly_types >= 3 && self.channels < 2 {
            return bad("channel permutation anomalies need at least 2 channels".into());
        }
        Ok(())
    }

    /// Per-class image counts, index 0 = normal.
    pub fn class_counts(&self) -> Vec<usize> {
        let n_normal = (self.normal_fraction * self.n_images as f64 + 1e-9).floor() as usize;
        let n_anom = self.n_images - n_normal.min(self.n_images);
        let mut counts = vec![n_normal.min(self.n_images)];
        let k = self.n_anomaly_types;
        counts.extend((0..k).map(|t| n_anom / k + usize::from(t < n_anom % k)));
        counts
    }
}

struct Mode {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `channels × n_fields`, rows of unit norm.
    mixing: Vec<f64>,
}

fn n_fields(channels: usize) -> usize {
    (channels / 2).max(1)
}

fn make_mode(channels: usize, rng: &mut RngState) -> Mode {
    let l = n_fields(channels);
    // Channel means: a shuffled ladder on [-2, 2].
    let mut mean: Vec<f64> = (0..channels)
        .map(|c| {
            if channels == 1 {
                0.0
            } else {
                -2.0 + 4.0 * c as f64 / (channels - 1) as f64
            }
        })
        .collect();
    rng.shuffle(&mut mean);
    let std = (0..channels).map(|_| rng.uniform_range(0.75, 1.25)).collect();
    let mut mixing = vec![0.0; channels * l];
    for row in mixing.chunks_exact_mut(l) {
        row.iter_mut().for_each(|v| *v = rng.normal());
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Mode { mean, std, mixing }
}

/// Unit-variance smooth Gaussian fields, `h × w × n`.
fn smooth_fields(h: usize, w: usize, n: usize, sigma: f64, rng: &mut RngState) -> FeatureMap {
    let white = FeatureMap::from_fn(h, w, n, |_, _, _| rng.normal());
    let mut s = white.gaussian_smooth(sigma).expect("sigma validated");
    let k1: f64 = gaussian_kernel(sigma).iter().map(|v| v * v).sum();
    let scale = 1.0 / k1; // 1 / sqrt((Σk²)²)
    s.data_mut().iter_mut().for_each(|v| *v *= scale);
    s
}

fn ellipse_mask(spec: &SyntheticSpec, rng: &mut RngState) -> Mask {
    let (h, w) = (spec.height, spec.width);
    let area = spec.anomaly_area_fraction * (h * w) as f64;
    let ratio = rng.uniform_range(0.6, 1.0);
    let a = (area / (std::f64::consts::PI * ratio)).sqrt();
    let b = ratio * a;
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let center = |n: usize, rng: &mut RngState| {
        let m = (2 * spec.border_margin) as f64;
        let hi = n as f64 - 1.0 - m;
        if hi > m {
            rng.uniform_range(m, hi)
        } else {
            (n as f64 - 1.0) / 2.0
        }
    };
    let cy = center(h, rng);
    let cx = center(w, rng);
    let (sin, cos) = theta.sin_cos();
    let mut mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask.set(y, x, true);
            }
        }
    }
    if mask.is_empty() {
        mask.set(cy.round() as usize, cx.round() as usize, true);
    }
    mask
}

fn perturb(features: &mut FeatureMap, mask: &Mask, anomaly_type: usize, strength: f64) {
    let c = features.channels();
    let family = (anomaly_type - 1) % 3;
    let cycle = (anomaly_type - 1) / 3;
    let magnitude = strength * (1.0 + 0.5 * cycle as f64);
    let mut buf = vec![0.0; c];
    for (p, &inside) in mask.bits().iter().enumerate() {
        if !inside {
            continue;
        }
        let px = &mut features.data_mut()[p * c..(p + 1) * c];
        match family {
            0 => px.iter_mut().for_each(|v| *v += magnitude),
            1 => {
                let factor = 1.0 + magnitude;
                px.iter_mut().step_by(2).for_each(|v| *v *= factor);
            }
            _ => {
                let shift = 1 + cycle % (c - 1).max(1);
                buf.copy_from_slice(px);
                for (k, v) in px.iter_mut().enumerate() {
                    *v = buf[(k + shift) % c];
                }
            }
        }
    }
}

/// Generate a corpus as a pure function of `(spec, rng)`.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, rng: &mut RngState) -> Result<Corpus> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let l = n_fields(c);
    let modes: Vec<Mode> = (0..spec.n_normal_modes).map(|_| make_mode(c, rng)).collect();

    let mut types: Vec<usize> = spec
        .class_counts()
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| std::iter::repeat_n(t, n))
        .collect();
    rng.shuffle(&mut types);

    let mut items = Vec::with_capacity(spec.n_images);
    for (i, &t) in types.iter().enumerate() {
        let mode = &modes[rng.below(modes.len())];
        let fields = smooth_fields(h, w, l, spec.base_smoothness, rng);
        let mut features = FeatureMap::zeros(h, w, c);
        for p in 0..h * w {
            let z = fields.pixel(p);
            for k in 0..c {
                let row = &mode.mixing[k * l..(k + 1) * l];
                let latent: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                let v = mode.mean[k] + mode.std[k] * latent + WHITE_NOISE_STD * rng.normal();
                features.data_mut()[p * c + k] = v;
            }
        }
        let mask = if t == 0 {
            Mask::empty(h, w)
        } else {
            let m = ellipse_mask(spec, rng);
            perturb(&mut features, &m, t, spec.perturbation_strength);
            m
        };
        items.push(CorpusItem {
            id: format!("img_{i:04}"),
            features,
            gt_mask: Some(mask),
            gt_type: Some(t),
        });
    }
    Corpus::new("synthetic", items)
}
