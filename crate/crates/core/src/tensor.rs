//! Dense grid containers and the numerical primitives shared by every stage.

use crate::error::{Error, Result};

/// Dense `height × width × channels` grid, row-major in `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// One score per pixel; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::param("feature map dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::param(format!(
                "feature map data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Build from a closure over `(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut m = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    m.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Feature vector of the pixel with flat index `p = y * width + x`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    /// Copy of channel `c` as a `height × width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels().map(|px| px[c]).collect()
    }

    pub fn same_extent(&self, map: &AnomalyMap) -> bool {
        self.height == map.height && self.width == map.width
    }

    pub fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let mut out = self.clone();
        if sigma == 0.0 {
            return Ok(out);
        }
        let kernel = gaussian_kernel(sigma);
        smooth_interleaved(
            &self.data,
            &mut out.data,
            self.height,
            self.width,
            self.channels,
            &kernel,
        );
        Ok(out)
    }

    pub fn crop_border(&self, margin: usize) -> Result<Self> {
        check_margin(self.height, self.width, margin)?;
        let h = self.height - 2 * margin;
        let w = self.width - 2 * margin;
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in margin..margin + h {
            let start = (y * self.width + margin) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Per-channel affine map onto `[0, 1]`; constant channels become zero.
    pub fn minmax_rescale(&self) -> Self {
        let c = self.channels;
        let mut lo = vec![f64::INFINITY; c];
        let mut hi = vec![f64::NEG_INFINITY; c];
        for px in self.pixels() {
            for (k, &v) in px.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                let range = hi[k] - lo[k];
                *v = if range > 0.0 { (*v - lo[k]) / range } else { 0.0 };
            }
        }
        out
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.pixels() {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.n_pixels() as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    /// Subtract each channel's spatial mean.
    pub fn mean_center(&self) -> Self {
        let means = self.channel_means();
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(self.channels) {
            for (v, m) in px.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &FeatureMap) -> Result<Self> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::param("feature map shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        })
    }
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("anomaly map dimensions must be positive"));
        }
        if scores.len() != height * width {
            return Err(Error::param(format!(
                "anomaly map has {} scores, expected {}",
                scores.len(),
                height * width
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("anomaly map contains non-finite scores".into()));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            scores: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }
    pub fn len(&self) -> usize {
        self.scores.len()
    }
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let mut out = self.clone();
        if sigma == 0.0 {
            return Ok(out);
        }
        let kernel = gaussian_kernel(sigma);
        smooth_interleaved(
            &self.scores,
            &mut out.scores,
            self.height,
            self.width,
            1,
            &kernel,
        );
        Ok(out)
    }

    pub fn crop_border(&self, margin: usize) -> Result<Self> {
        check_margin(self.height, self.width, margin)?;
        let h = self.height - 2 * margin;
        let w = self.width - 2 * margin;
        let mut scores = Vec::with_capacity(h * w);
        for y in margin..margin + h {
            let start = y * self.width + margin;
            scores.extend_from_slice(&self.scores[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            scores,
        })
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::param(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

fn check_margin(h: usize, w: usize, margin: usize) -> Result<()> {
    if 2 * margin >= h.min(w) {
        return Err(Error::param(format!(
            "border margin {margin} too large for {h}x{w} map"
        )));
    }
    Ok(())
}

/// Kernel radius used for a given sigma.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1D Gaussian taps of length `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with edge replication on an interleaved grid.
fn smooth_interleaved(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: &[f64],
) {
    let r = (kernel.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    // horizontal pass
    for y in 0..h {
        for x in 0..w {
            let out = &mut tmp[(y * w + x) * c..(y * w + x + 1) * c];
            for (t, &kv) in kernel.iter().enumerate() {
                let xs = clamp(x as i64 + t as i64 - r, w);
                let inp = &src[(y * w + xs) * c..(y * w + xs + 1) * c];
                for (o, &v) in out.iter_mut().zip(inp) {
                    *o += kv * v;
                }
            }
        }
    }
    // vertical pass
    dst.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let ys = clamp(y as i64 + t as i64 - r, h);
            let row_in = &tmp[ys * w * c..(ys + 1) * w * c];
            let row_out = &mut dst[y * w * c..(y + 1) * w * c];
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o += kv * v;
            }
        }
    }
}
