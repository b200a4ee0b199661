//! Browser bindings: a small synthetic corpus, its FCA anomaly maps and
//! the softmax pooling weights derived from them.

use blindcluster::contrastive::softmax_weights;
use blindcluster::corpus::synth::{gen_synthetic_corpus, SyntheticSpec};
use blindcluster::corpus::Corpus;
use blindcluster::localize::{fca_score, FcaConfig};
use blindcluster::{AnomalyMap, RngState};
use wasm_bindgen::prelude::*;

fn js(e: blindcluster::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Scale to [0, 1] for display; constant input maps to zeros.
fn unit(v: &[f64]) -> Vec<f32> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    v.iter()
        .map(|&x| if span > 0.0 { ((x - lo) / span) as f32 } else { 0.0 })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    corpus: Corpus,
    map: Option<AnomalyMap>,
}

#[wasm_bindgen]
impl Demo {
    /// Generate `n_images` square textures of side `size` with planted
    /// anomalies of the given strength.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, n_images: usize, size: usize, strength: f64) -> Result<Demo, JsError> {
        let spec = SyntheticSpec {
            n_images,
            height: size,
            width: size,
            perturbation_strength: strength,
            anomaly_area_fraction: 0.06,
            ..SyntheticSpec::default()
        };
        let corpus = gen_synthetic_corpus(&spec, &mut RngState::new(seed)).map_err(js)?;
        Ok(Demo { corpus, map: None })
    }

    pub fn count(&self) -> usize {
        self.corpus.items.len()
    }

    pub fn size(&self) -> usize {
        self.corpus.items[0].features.width()
    }

    pub fn channels(&self) -> usize {
        self.corpus.items[0].features.channels()
    }

    /// Anomaly type of image `i`, 0 for normal.
    pub fn kind(&self, i: usize) -> usize {
        self.corpus.items[i].gt_type.unwrap_or(0)
    }

    /// One feature channel of image `i`, scaled to [0, 1].
    pub fn channel(&self, i: usize, c: usize) -> Vec<f32> {
        unit(&self.corpus.items[i].features.channel(c))
    }

    /// Ground-truth region of image `i`, 1 inside.
    pub fn mask(&self, i: usize) -> Vec<u8> {
        let item = &self.corpus.items[i];
        match &item.gt_mask {
            Some(m) => m.bits().iter().map(|&b| b as u8).collect(),
            None => vec![0; item.features.n_pixels()],
        }
    }

    /// Score image `i` with a local window of scale `sigma_p` and keep the
    /// result for `weights`. Returns the map scaled to [0, 1] at full size.
    pub fn anomaly_map(&mut self, i: usize, sigma_p: f64) -> Result<Vec<f32>, JsError> {
        let config = FcaConfig { sigma_p, ..FcaConfig::default() };
        let scaled = self.corpus.items[i].features.minmax_rescale();
        let map = fca_score(&scaled, &config).map_err(js)?;
        let out = unit(map.scores());
        self.map = Some(map);
        Ok(out)
    }

    /// Softmax pooling weights of the last map at temperature `tau`,
    /// divided by their maximum.
    pub fn weights(&self, tau: f64) -> Result<Vec<f32>, JsError> {
        let map = self.map.as_ref().ok_or_else(|| JsError::new("compute an anomaly map first"))?;
        if !(tau > 0.0) {
            return Err(JsError::new("tau must be positive"));
        }
        let w = softmax_weights(map, tau);
        let top = w.iter().cloned().fold(0.0, f64::max);
        Ok(w.iter().map(|&v| (v / top) as f32).collect())
    }

    /// Effective number of pooled pixels, `1 / sum(w^2)`.
    pub fn effective_pixels(&self, tau: f64) -> f64 {
        match &self.map {
            Some(map) if tau > 0.0 => 1.0 / softmax_weights(map, tau).iter().map(|w| w * w).sum::<f64>(),
            _ => f64::NAN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_follow_the_map() {
        let mut d = Demo::new(3, 4, 40, 3.0).unwrap();
        let i = (0..d.count()).find(|&i| d.kind(i) > 0).unwrap();
        let map = d.anomaly_map(i, 3.0).unwrap();
        assert_eq!(map.len(), 40 * 40);
        let w = d.weights(0.01).unwrap();
        let top = map.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(w[top], 1.0);
        assert!(d.effective_pixels(1e-4) < d.effective_pixels(1.0));
        assert!((d.effective_pixels(1e9) - 1600.0).abs() < 1e-3);
    }

    #[test]
    fn unit_handles_constant_input() {
        assert_eq!(unit(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(unit(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
