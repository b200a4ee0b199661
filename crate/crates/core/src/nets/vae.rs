//! Feature-space variational autoencoder built from 1×1 layers.
//!
//! Encoder: three ReLU hidden layers shared by two linear heads that
//! produce the latent mean and log-variance. Decoder: two ReLU hidden layers
//! and a linear output layer. Hidden widths equal the input channel count.

use serde::{Deserialize, Serialize};

use super::{Activation, AdamW, ForwardCache, Layer, NetGrads, Params, PixelNet};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub latent_dim: usize,
    pub batch_size: usize,
    /// Weight of the KL term.
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-4,
            weight_decay: 0.1,
            latent_dim: 128,
            batch_size: 4096,
            kl_weight: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("vae.latent_dim and vae.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("vae.lr must be > 0 and vae.weight_decay >= 0".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("vae.kl_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub trunk: PixelNet,
    pub mu_head: PixelNet,
    pub logvar_head: PixelNet,
    pub decoder: PixelNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub trunk: NetGrads,
    pub mu_head: NetGrads,
    pub logvar_head: NetGrads,
    pub decoder: NetGrads,
}

impl VaeGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.mu_head.slices());
        v.extend(self.logvar_head.slices());
        v.extend(self.decoder.slices());
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VaeTrainReport {
    /// Loss at every iteration.
    pub losses: Vec<f64>,
}

impl VaeModel {
    /// Freshly initialized model for `channels` inputs.
    pub fn new(channels: usize, latent_dim: usize, rng: &mut RngState) -> Self {
        let c = channels;
        let trunk = PixelNet {
            layers: (0..3).map(|_| Layer::init(c, c, Activation::Relu, rng)).collect(),
        };
        let mu_head = PixelNet {
            layers: vec![Layer::init(c, latent_dim, Activation::Identity, rng)],
        };
        let logvar_head = PixelNet {
            layers: vec![Layer::init(c, latent_dim, Activation::Identity, rng)],
        };
        let decoder = PixelNet {
            layers: vec![
                Layer::init(latent_dim, c, Activation::Relu, rng),
                Layer::init(c, c, Activation::Relu, rng),
                Layer::init(c, c, Activation::Identity, rng),
            ],
        };
        Self {
            trunk,
            mu_head,
            logvar_head,
            decoder,
        }
    }

    /// Assemble from explicit parts, validating that dimensions chain.
    pub fn from_parts(
        trunk: PixelNet,
        mu_head: PixelNet,
        logvar_head: PixelNet,
        decoder: PixelNet,
    ) -> Result<Self> {
        let h = trunk.out_dim();
        if mu_head.in_dim() != h || logvar_head.in_dim() != h {
            return Err(Error::param("latent heads must read the trunk output"));
        }
        if mu_head.out_dim() != logvar_head.out_dim() {
            return Err(Error::param("mu and logvar heads disagree on latent size"));
        }
        if decoder.in_dim() != mu_head.out_dim() || decoder.out_dim() != trunk.in_dim() {
            return Err(Error::param("decoder must map latent back to the input size"));
        }
        Ok(Self {
            trunk,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn channels(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_dim()
    }

    /// `(mu, logvar)` for `n` input rows.
    pub fn encode(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.trunk.forward(x, n)?;
        Ok((self.mu_head.forward(&h, n)?, self.logvar_head.forward(&h, n)?))
    }

    pub fn decode(&self, z: &[f64], n: usize) -> Result<Vec<f64>> {
        self.decoder.forward(z, n)
    }

    /// Decode the latent mean of every pixel; no sampling.
    pub fn reconstruct_mean(&self, features: &FeatureMap) -> Result<FeatureMap> {
        if features.channels() != self.channels() {
            return Err(Error::param(format!(
                "model expects {} channels, map has {}",
                self.channels(),
                features.channels()
            )));
        }
        let n = features.n_pixels();
        let (mu, _) = self.encode(features.data(), n)?;
        let r = self.decode(&mu, n)?;
        FeatureMap::new(features.height(), features.width(), features.channels(), r)
    }

    /// Mean squared reconstruction error (over rows and channels) plus
    /// `kl_weight` times the row-averaged KL divergence to N(0, I), with
    /// exact gradients through the reparameterization.
    pub fn loss(
        &self,
        x: &[f64],
        n: usize,
        kl_weight: f64,
        rng: &mut RngState,
    ) -> Result<(f64, VaeGrads)> {
        if n == 0 {
            return Err(Error::param("empty batch"));
        }
        let c = self.channels();
        let l = self.latent_dim();
        let trunk_cache = self.trunk.forward_cached(x, n)?;
        let h = trunk_cache.output();
        let mu_cache = self.mu_head.forward_cached(h, n)?;
        let lv_cache = self.logvar_head.forward_cached(h, n)?;
        let mu = mu_cache.output();
        let logvar = lv_cache.output();
        let eps: Vec<f64> = (0..n * l).map(|_| rng.normal()).collect();
        let z: Vec<f64> = (0..n * l)
            .map(|k| mu[k] + (0.5 * logvar[k]).exp() * eps[k])
            .collect();
        let dec_cache: ForwardCache = self.decoder.forward_cached(&z, n)?;
        let recon = dec_cache.output();

        let scale_rec = 1.0 / (n * c) as f64;
        let rec: f64 = recon
            .iter()
            .zip(x)
            .map(|(r, t)| (r - t) * (r - t))
            .sum::<f64>()
            * scale_rec;
        let kl: f64 = mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
            .sum::<f64>()
            / n as f64;
        let loss = rec + kl_weight * kl;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite VAE loss ({rec} + {kl_weight}*{kl})")));
        }

        let d_recon: Vec<f64> = recon
            .iter()
            .zip(x)
            .map(|(r, t)| 2.0 * (r - t) * scale_rec)
            .collect();
        let mut grads = self.zero_grads();
        let dz = self.decoder.backward(&dec_cache, &d_recon, &mut grads.decoder);
        let kw = kl_weight / n as f64;
        let d_mu: Vec<f64> = (0..n * l).map(|k| dz[k] + kw * mu[k]).collect();
        let d_lv: Vec<f64> = (0..n * l)
            .map(|k| {
                let s = (0.5 * logvar[k]).exp();
                dz[k] * 0.5 * s * eps[k] + kw * 0.5 * (s * s - 1.0)
            })
            .collect();
        let mut dh = self.mu_head.backward(&mu_cache, &d_mu, &mut grads.mu_head);
        let dh2 = self
            .logvar_head
            .backward(&lv_cache, &d_lv, &mut grads.logvar_head);
        dh.iter_mut().zip(&dh2).for_each(|(a, b)| *a += b);
        self.trunk.backward(&trunk_cache, &dh, &mut grads.trunk);
        Ok((loss, grads))
    }

    pub fn zero_grads(&self) -> VaeGrads {
        VaeGrads {
            trunk: self.trunk.zero_grads(),
            mu_head: self.mu_head.zero_grads(),
            logvar_head: self.logvar_head.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }
}

impl Params for VaeModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.param_slices();
        v.extend(self.mu_head.param_slices());
        v.extend(self.logvar_head.param_slices());
        v.extend(self.decoder.param_slices());
        v
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.param_slices_mut();
        v.extend(self.mu_head.param_slices_mut());
        v.extend(self.logvar_head.param_slices_mut());
        v.extend(self.decoder.param_slices_mut());
        v
    }
}

/// `z = mu + exp(logvar / 2) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::param("mu and logvar lengths differ"));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
        .collect())
}

/// Train on pooled pixel rows (`rows × channels`, already rescaled to
/// `[0, 1]`). Batches are drawn uniformly with replacement.
pub fn train_vae(
    pixels: &[f64],
    channels: usize,
    config: &VaeConfig,
    rng: &mut RngState,
) -> Result<(VaeModel, VaeTrainReport)> {
    config.validate()?;
    if channels == 0 || pixels.is_empty() || pixels.len() % channels != 0 {
        return Err(Error::param("pixel pool must be a non-empty multiple of channels"));
    }
    let rows = pixels.len() / channels;
    let mut model = VaeModel::new(channels, config.latent_dim, rng);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut report = VaeTrainReport::default();
    let bs = config.batch_size;
    let mut batch = vec![0.0; bs * channels];
    for it in 0..config.iterations {
        for row in batch.chunks_exact_mut(channels) {
            let r = rng.below(rows);
            row.copy_from_slice(&pixels[r * channels..(r + 1) * channels]);
        }
        let (loss, grads) = model
            .loss(&batch, bs, config.kl_weight, rng)
            .map_err(|e| Error::Training {
                iteration: it,
                message: e.to_string(),
            })?;
        report.losses.push(loss);
        opt.step(model.param_slices_mut(), &grads.slices());
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::grad_check;

    fn zero_model(c: usize, l: usize) -> VaeModel {
        let mut m = VaeModel::new(c, l, &mut RngState::new(0));
        let n = m.n_params();
        m.set_flat_params(&vec![0.0; n]);
        m
    }

    #[test]
    fn zero_model_encodes_to_zero() {
        let m = zero_model(3, 2);
        let (mu, lv) = m.encode(&[0.3, -1.0, 2.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
        let f = FeatureMap::from_fn(2, 2, 3, |y, x, c| (y + x + c) as f64);
        let r = m.reconstruct_mean(&f).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_layer_toy_encoder() {
        // trunk: identity (ReLU passes positives), mu = [[1,2],[0,1]]x + [0.5,0]
        let trunk = PixelNet::new(vec![Layer {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
            activation: Activation::Relu,
        }])
        .unwrap();
        let mu = PixelNet::new(vec![Layer {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 2.0, 0.0, 1.0],
            bias: vec![0.5, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let lv = PixelNet::new(vec![Layer::zeros(2, 2, Activation::Identity)]).unwrap();
        let dec = PixelNet::new(vec![Layer {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 0.0, 0.0, -1.0],
            bias: vec![0.0, 1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let m = VaeModel::from_parts(trunk, mu, lv, dec).unwrap();
        let (mu, lv) = m.encode(&[1.0, 2.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(mu, vec![5.5, 2.0, 5.5, 2.0]);
        assert_eq!(lv, vec![0.0; 4]);
        let f = FeatureMap::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let r = m.reconstruct_mean(&f).unwrap();
        assert_eq!(r.data(), &[5.5, -1.0]);
        assert_eq!(m.reconstruct_mean(&f).unwrap(), r);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = zero_model(3, 2);
        assert!(matches!(m.encode(&[1.0, 2.0], 1), Err(Error::Parameter(_))));
        assert!(m.reconstruct_mean(&FeatureMap::zeros(2, 2, 4)).is_err());
    }

    #[test]
    fn reparameterize_limits() {
        let mut rng = RngState::new(4);
        let z = reparameterize(&[1.0, -2.0], &[-60.0, -60.0], &mut rng).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-9 && (z[1] + 2.0).abs() < 1e-9);

        let z = reparameterize(&[0.0; 5], &[0.0; 5], &mut RngState::new(8)).unwrap();
        let mut r = RngState::new(8);
        let raw: Vec<f64> = (0..5).map(|_| r.normal()).collect();
        assert_eq!(z, raw);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let n = 100_000;
        let mu = vec![0.7; n];
        let lv = vec![(0.5f64).ln(); n];
        let z = reparameterize(&mu, &lv, &mut RngState::new(12)).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let sigma = 0.5f64.sqrt();
        assert!((mean - 0.7).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn loss_closed_forms() {
        // Decoder outputs a constant equal to the input; mu = logvar = 0.
        let mut m = zero_model(2, 1);
        m.decoder.layers_mut()[2].bias = vec![0.25, 0.75];
        let x = [0.25, 0.75, 0.25, 0.75];
        let (loss, _) = m.loss(&x, 2, 1.0, &mut RngState::new(1)).unwrap();
        assert_eq!(loss, 0.0);

        // mu = 1 via bias, logvar = 0, perfect reconstruction: KL = 0.5.
        m.mu_head.layers_mut()[0].bias = vec![1.0];
        let (loss, _) = m.loss(&x, 2, 1.0, &mut RngState::new(1)).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for trial in 0..20u64 {
            let mut rng = RngState::new(100 + trial);
            let mut model = VaeModel::new(3, 2, &mut rng);
            // nonzero biases keep pre-activations off the ReLU kink
            for net in [&mut model.trunk, &mut model.mu_head, &mut model.logvar_head, &mut model.decoder] {
                for l in net.layers_mut() {
                    l.bias.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
                }
            }
            let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_flat_params(p);
                let (l, g) = m.loss(&x, 4, 1.0, &mut RngState::new(77)).unwrap();
                (l, g.flat())
            };
            let err = grad_check(f, &model.flat_params(), 1e-5);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let cfg = VaeConfig {
            iterations: 0,
            latent_dim: 2,
            ..VaeConfig::default()
        };
        let (m, rep) = train_vae(&[0.1, 0.2, 0.3, 0.4], 2, &cfg, &mut RngState::new(3)).unwrap();
        assert_eq!(m, VaeModel::new(2, 2, &mut RngState::new(3)));
        assert!(rep.losses.is_empty());
    }

    #[test]
    fn constant_corpus_is_learned() {
        let pixels: Vec<f64> = (0..200).flat_map(|_| [0.2, 0.6, 0.9]).collect();
        let cfg = VaeConfig {
            iterations: 500,
            lr: 1e-2,
            weight_decay: 0.0,
            latent_dim: 2,
            batch_size: 64,
            kl_weight: 1.0,
        };
        let (m, rep) = train_vae(&pixels, 3, &cfg, &mut RngState::new(5)).unwrap();
        let f = FeatureMap::new(1, 1, 3, vec![0.2, 0.6, 0.9]).unwrap();
        let err = |m: &VaeModel| {
            let r = m.reconstruct_mean(&f).unwrap();
            r.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let init = VaeModel::new(3, 2, &mut RngState::new(5));
        assert!(err(&m) <= 1e-3 * err(&init), "{} vs {}", err(&m), err(&init));
        assert!(rep.losses.iter().all(|l| l.is_finite()));

        let (m2, _) = train_vae(&pixels, 3, &cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(m.flat_params(), m2.flat_params());
    }
}
