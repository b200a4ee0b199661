//! Binary model containers (little-endian).
//!
//! `PNET`: magic, version u16 = 1, reserved u16 = 0, layer count u32, then
//! one `(in_dim u32, out_dim u32, activation u32)` entry per layer
//! (activation 0 = identity, 1 = ReLU), then for each layer its weights
//! (`out × in`, row-major) and biases as `f64`.
//!
//! `VAEM`: magic, version u16 = 1, reserved u16 = 0, followed by four
//! `PNET` containers: trunk, mu head, logvar head, decoder.

use std::path::Path;

use super::{Activation, Layer, PixelNet, VaeModel};
use crate::corpus::fmap::write_bytes;
use crate::error::{Error, Result};

const PNET: &[u8; 4] = b"PNET";
const VAEM: &[u8; 4] = b"VAEM";
const VERSION: u16 = 1;

pub fn encode_net(net: &PixelNet, out: &mut Vec<u8>) {
    out.extend_from_slice(PNET);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        let act: u32 = match l.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        };
        out.extend_from_slice(&act.to_le_bytes());
    }
    for l in net.layers() {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.bytes.len() as u64, "truncated model file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        if self.take(4)? != magic {
            return Err(Error::format(
                at,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let at = self.pos as u64;
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        self.u16()?;
        Ok(())
    }
}

fn read_net(r: &mut Reader) -> Result<PixelNet> {
    r.header(PNET)?;
    let count_at = r.pos as u64;
    let n = r.u32()? as usize;
    if n == 0 || n > 1024 {
        return Err(Error::format(count_at, format!("implausible layer count {n}")));
    }
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos as u64;
        let (i, o, a) = (r.u32()? as usize, r.u32()? as usize, r.u32()?);
        let act = match a {
            0 => Activation::Identity,
            1 => Activation::Relu,
            _ => return Err(Error::format(at + 8, format!("unknown activation {a}"))),
        };
        if i == 0 || o == 0 || i.checked_mul(o).is_none_or(|p| p > 1 << 28) {
            return Err(Error::format(at, "bad layer dimensions"));
        }
        dims.push((i, o, act));
    }
    for (k, w) in dims.windows(2).enumerate() {
        if w[0].1 != w[1].0 {
            return Err(Error::format(
                count_at + 4 + 12 * (k as u64 + 1),
                format!("layer {} input {} does not chain from output {}", k + 1, w[1].0, w[0].1),
            ));
        }
    }
    let mut layers = Vec::with_capacity(n);
    for (i, o, act) in dims {
        let mut l = Layer::zeros(i, o, act);
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = r.f64()?;
        }
        layers.push(l);
    }
    PixelNet::new(layers)
}

pub fn decode_net(bytes: &[u8]) -> Result<PixelNet> {
    let mut r = Reader { bytes, pos: 0 };
    let net = read_net(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after network"));
    }
    Ok(net)
}

pub fn encode_vae(model: &VaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VAEM);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for net in [&model.trunk, &model.mu_head, &model.logvar_head, &model.decoder] {
        encode_net(net, &mut out);
    }
    out
}

pub fn decode_vae(bytes: &[u8]) -> Result<VaeModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(VAEM)?;
    let trunk = read_net(&mut r)?;
    let mu = read_net(&mut r)?;
    let lv = read_net(&mut r)?;
    let dec = read_net(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after model"));
    }
    VaeModel::from_parts(trunk, mu, lv, dec)
        .map_err(|e| Error::format(8, format!("inconsistent VAE parts: {e}")))
}

pub fn save_net(net: &PixelNet, path: &Path) -> Result<()> {
    let mut b = Vec::new();
    encode_net(net, &mut b);
    write_bytes(path, &b)
}

pub fn load_net(path: &Path) -> Result<PixelNet> {
    decode_net(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_vae(model: &VaeModel, path: &Path) -> Result<()> {
    write_bytes(path, &encode_vae(model))
}

pub fn load_vae(path: &Path) -> Result<VaeModel> {
    decode_vae(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
