//! Classical filter-bank features for grayscale images.
//!
//! Per scale the extractor emits four channels: Gaussian-smoothed intensity,
//! central-difference x and y derivatives of the smoothed image, and its
//! 5-point Laplacian. Borders use edge replication.

use crate::error::{Error, Result};
use crate::tensor::{AnomalyMap, FeatureMap};

pub const CHANNELS_PER_SCALE: usize = 4;

/// `image` is a single-channel grid with values in `[0, 1]`.
pub fn extract_classical_features(image: &FeatureMap, scales: &[f64]) -> Result<FeatureMap> {
    if scales.is_empty() {
        return Err(Error::param("at least one scale is required"));
    }
    if image.channels() != 1 {
        return Err(Error::param(format!(
            "expected a grayscale image (C=1), got C={}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let plane = AnomalyMap::new(h, w, image.data().to_vec())?;
    let c = CHANNELS_PER_SCALE * scales.len();
    let mut out = FeatureMap::zeros(h, w, c);
    for (si, &sigma) in scales.iter().enumerate() {
        let g = plane.gaussian_smooth(sigma)?;
        let at = |y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            g.get(yy, xx)
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let v = at(y, x);
                let dx = 0.5 * (at(y, x + 1) - at(y, x - 1));
                let dy = 0.5 * (at(y + 1, x) - at(y - 1, x));
                let lap = at(y, x + 1) + at(y, x - 1) + at(y + 1, x) + at(y - 1, x) - 4.0 * v;
                let base = si * CHANNELS_PER_SCALE;
                let (yu, xu) = (y as usize, x as usize);
                out.set(yu, xu, base, v);
                out.set(yu, xu, base + 1, dx);
                out.set(yu, xu, base + 2, dy);
                out.set(yu, xu, base + 3, lap);
            }
        }
    }
    Ok(out)
}

/// Parse a binary (P5) or ASCII (P2) PGM into a `[0, 1]` grayscale map.
pub fn parse_pgm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(start as u64, "unexpected end of PGM header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
    };
    let (magic, _) = token(bytes)?;
    let mut num = |bytes: &[u8]| -> Result<usize> {
        let (t, off) = token(bytes)?;
        t.parse()
            .map_err(|_| Error::format(off as u64, format!("bad PGM number {t:?}")))
    };
    let w = num(bytes)?;
    let h = num(bytes)?;
    let maxval = num(bytes)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(0, "bad PGM dimensions or maxval"));
    }
    let mut data = Vec::with_capacity(w * h);
    match magic.as_str() {
        "P5" => {
            let start = pos + 1;
            let bpp = if maxval > 255 { 2 } else { 1 };
            let need = w * h * bpp;
            if bytes.len() < start + need {
                return Err(Error::format(bytes.len() as u64, "truncated PGM payload"));
            }
            for i in 0..w * h {
                let v = if bpp == 1 {
                    bytes[start + i] as usize
                } else {
                    (bytes[start + 2 * i] as usize) << 8 | bytes[start + 2 * i + 1] as usize
                };
                data.push(v as f64 / maxval as f64);
            }
        }
        "P2" => {
            for _ in 0..w * h {
                data.push(num(bytes)? as f64 / maxval as f64);
            }
        }
        _ => return Err(Error::format(0, format!("unsupported PGM magic {magic:?}"))),
    }
    FeatureMap::new(h, w, 1, data)
}
