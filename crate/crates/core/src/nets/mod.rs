//! Per-pixel multilayer networks (1×1 convolutions) with exact gradients.

pub mod adamw;
pub mod gradcheck;
pub mod head;
pub mod persist;
pub mod vae;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::FeatureMap;

pub use adamw::AdamW;
pub use gradcheck::grad_check;
pub use head::{head_backward, head_forward, head_forward_batch, new_head};
pub use vae::{VaeConfig, VaeModel, VaeTrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Dense layer `out = act(W · in + b)` with `W` stored `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut RngState) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut l = Self::zeros(in_dim, out_dim, activation);
        l.weight
            .iter_mut()
            .for_each(|w| *w = rng.uniform_range(-bound, bound));
        l
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.out_dim];
        for (xr, orow) in x.chunks_exact(self.in_dim).zip(out.chunks_exact_mut(self.out_dim)) {
            for (o, (wr, &b)) in orow
                .iter_mut()
                .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
            {
                let v = dot(wr, xr) + b;
                *o = match self.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Identity => v,
                };
            }
        }
        out
    }
}

/// Dot product with four fixed accumulators so the loop vectorizes while
/// the summation order stays deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelNet {
    layers: Vec<Layer>,
}

/// Gradient buffers mirroring a [`PixelNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Activations retained for the backward pass: the input followed by each
/// layer's output.
pub struct ForwardCache {
    pub n: usize,
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds the input")
    }
}

impl PixelNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::param(format!("layer {i} has a zero dimension")));
            }
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::param(format!("layer {i} parameter sizes are inconsistent")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::param(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Layers with the given widths, ReLU on all but the last.
    pub fn mlp(widths: &[usize], rng: &mut RngState) -> Self {
        assert!(widths.len() >= 2);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 < n {
                    Activation::Relu
                } else {
                    Activation::Identity
                };
                Layer::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }
    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    fn check_input(&self, x: &[f64], n: usize) -> Result<()> {
        if x.len() != n * self.in_dim() {
            return Err(Error::param(format!(
                "network expects {} inputs per row, got {} values for {n} rows",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Inference on `n` rows.
    pub fn forward(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_input(x, n)?;
        let mut cur = self.layers[0].forward(x, n);
        for l in &self.layers[1..] {
            cur = l.forward(&cur, n);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64], n: usize) -> Result<ForwardCache> {
        self.check_input(x, n)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap(), n);
            acts.push(next);
        }
        Ok(ForwardCache { n, acts })
    }

    /// Accumulate parameter gradients into `grads` and return `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut NetGrads) -> Vec<f64> {
        let n = cache.n;
        let mut g = grad_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[li];
            let output = &cache.acts[li + 1];
            if l.activation == Activation::Relu {
                for (gv, &o) in g.iter_mut().zip(output) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let (gw, gb) = &mut grads.layers[li];
            let mut gin = vec![0.0; n * l.in_dim];
            for ((grow, xrow), girow) in g
                .chunks_exact(l.out_dim)
                .zip(input.chunks_exact(l.in_dim))
                .zip(gin.chunks_exact_mut(l.in_dim))
            {
                for (o, &go) in grow.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let wr = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
                    let gwr = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                    for ((gwv, &xv), (giv, &wv)) in gwr.iter_mut().zip(xrow).zip(girow.iter_mut().zip(wr)) {
                        *gwv += go * xv;
                        *giv += go * wv;
                    }
                }
            }
            g = gin;
        }
        g
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Apply per pixel (a 1×1 convolution).
    pub fn apply_map(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if map.channels() != self.in_dim() {
            return Err(Error::param(format!(
                "network expects {} channels, map has {}",
                self.in_dim(),
                map.channels()
            )));
        }
        let out = self.forward(map.data(), map.n_pixels())?;
        FeatureMap::new(map.height(), map.width(), self.out_dim(), out)
    }
}

/// Uniform view over model parameters, in a fixed order.
pub trait Params {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

impl Params for PixelNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl NetGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_chaining_is_validated() {
        let a = Layer::zeros(3, 4, Activation::Relu);
        let b = Layer::zeros(5, 2, Activation::Identity);
        assert!(PixelNet::new(vec![a.clone(), b]).is_err());
        let c = Layer::zeros(4, 2, Activation::Identity);
        assert!(PixelNet::new(vec![a, c]).is_ok());
    }

    #[test]
    fn per_pixel_independence_under_permutation() {
        let mut rng = RngState::new(2);
        let net = PixelNet::mlp(&[3, 5, 2], &mut rng);
        let x: Vec<f64> = (0..3 * 6).map(|_| rng.normal()).collect();
        let y = net.forward(&x, 6).unwrap();
        let perm = [4, 0, 5, 1, 3, 2];
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 3..p * 3 + 3].to_vec()).collect();
        let yp = net.forward(&xp, 6).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(&yp[k * 2..k * 2 + 2], &y[p * 2..p * 2 + 2]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(5);
        let mut net = PixelNet::mlp(&[3, 4, 4, 2], &mut rng);
        for l in net.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
        }
        let x: Vec<f64> = (0..3 * 5).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..2 * 5).map(|_| rng.normal()).collect();
        let loss = |p: &[f64]| {
            let mut n2 = net.clone();
            n2.set_flat_params(p);
            let c = n2.forward_cached(&x, 5).unwrap();
            let diff: Vec<f64> = c.output().iter().zip(&target).map(|(a, b)| a - b).collect();
            let l = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            let mut g = n2.zero_grads();
            n2.backward(&c, &diff, &mut g);
            (l, g.flat())
        };
        let err = grad_check(loss, &net.flat_params(), 1e-5);
        assert!(err < 1e-5, "{err}");
    }
}
