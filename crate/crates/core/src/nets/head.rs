//! Projection head: two 1×1 layers (ReLU between them) followed by
//! per-pixel L2 normalization. Zero vectors stay zero.

use super::{Activation, ForwardCache, Layer, NetGrads, PixelNet};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::FeatureMap;

pub fn new_head(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngState) -> PixelNet {
    PixelNet::new(vec![
        Layer::init(in_dim, hidden, Activation::Relu, rng),
        Layer::init(hidden, out_dim, Activation::Identity, rng),
    ])
    .expect("head dimensions chain")
}

/// Forward pass on rows with everything needed for [`head_backward`].
pub struct HeadForward {
    pub cache: ForwardCache,
    /// Unit-norm embeddings, `n × out_dim`.
    pub embeddings: Vec<f64>,
    pub norms: Vec<f64>,
}

pub fn head_forward_batch(head: &PixelNet, x: &[f64], n: usize) -> Result<HeadForward> {
    let cache = head.forward_cached(x, n)?;
    let d = head.out_dim();
    let mut embeddings = cache.output().to_vec();
    let mut norms = Vec::with_capacity(n);
    for row in embeddings.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        norms.push(norm);
    }
    Ok(HeadForward {
        cache,
        embeddings,
        norms,
    })
}

/// Backpropagate `∂L/∂embedding` through the normalization and the layers.
pub fn head_backward(head: &PixelNet, fwd: &HeadForward, grad_emb: &[f64], grads: &mut NetGrads) {
    let d = head.out_dim();
    let mut g_raw = vec![0.0; grad_emb.len()];
    for (((gr, ge), y), &norm) in g_raw
        .chunks_exact_mut(d)
        .zip(grad_emb.chunks_exact(d))
        .zip(fwd.embeddings.chunks_exact(d))
        .zip(&fwd.norms)
    {
        if norm == 0.0 {
            continue;
        }
        let dot: f64 = ge.iter().zip(y).map(|(a, b)| a * b).sum();
        for k in 0..d {
            gr[k] = (ge[k] - y[k] * dot) / norm;
        }
    }
    head.backward(&fwd.cache, &g_raw, grads);
}

/// Unit-norm embedding of every pixel.
pub fn head_forward(head: &PixelNet, features: &FeatureMap) -> Result<FeatureMap> {
    if features.channels() != head.in_dim() {
        return Err(Error::param(format!(
            "head expects {} channels, map has {}",
            head.in_dim(),
            features.channels()
        )));
    }
    let f = head_forward_batch(head, features.data(), features.n_pixels())?;
    FeatureMap::new(features.height(), features.width(), head.out_dim(), f.embeddings)
}
