//! Image sets: ingestion, the synthetic generator, and ground-truth handling.

pub mod extract;
pub mod fmap;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub use extract::extract_classical_features;
pub use synth::{gen_synthetic_corpus, SyntheticSpec};

/// Binary ground-truth mask (evaluation only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || height == 0 || width == 0 {
            return Err(Error::param("mask size does not match its dimensions"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn crop_border(&self, margin: usize) -> Result<Self> {
        if 2 * margin >= self.height.min(self.width) {
            return Err(Error::param(format!("border margin {margin} too large for mask")));
        }
        let h = self.height - 2 * margin;
        let w = self.width - 2 * margin;
        let mut bits = Vec::with_capacity(h * w);
        for y in margin..margin + h {
            bits.extend_from_slice(&self.bits[y * self.width + margin..y * self.width + margin + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            bits,
        })
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        FeatureMap::new(self.height, self.width, 1, data).expect("mask shape is valid")
    }

    pub fn from_feature_map(m: &FeatureMap) -> Result<Self> {
        if m.channels() != 1 {
            return Err(Error::format(16, "mask files must have C=1"));
        }
        let mut bits = Vec::with_capacity(m.n_pixels());
        for (i, &v) in m.data().iter().enumerate() {
            match v {
                0.0 => bits.push(false),
                1.0 => bits.push(true),
                _ => {
                    return Err(Error::format(
                        (fmap::HEADER_LEN + 4 * i) as u64,
                        format!("mask value {v} is not 0 or 1"),
                    ))
                }
            }
        }
        Mask::new(m.height(), m.width(), bits)
    }
}

/// One image of the input set.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub features: FeatureMap,
    /// Ground-truth region, evaluation only.
    pub gt_mask: Option<Mask>,
    /// Anomaly type, 0 = normal. Evaluation only.
    pub gt_type: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, items: Vec<CorpusItem>) -> Result<Self> {
        let c = Self {
            name: name.into(),
            items,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else {
            return Err(Error::param("corpus is empty"));
        };
        let ch = first.features.channels();
        for it in &self.items {
            if it.features.channels() != ch {
                return Err(Error::param(format!(
                    "item {} has {} channels, expected {ch}",
                    it.id,
                    it.features.channels()
                )));
            }
            if let Some(m) = &it.gt_mask {
                if (m.height(), m.width()) != (it.features.height(), it.features.width()) {
                    return Err(Error::param(format!("mask of item {} has wrong extent", it.id)));
                }
                if let Some(t) = it.gt_type {
                    if (t == 0) != m.is_empty() {
                        return Err(Error::param(format!(
                            "item {}: gt_type {t} inconsistent with its mask",
                            it.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
    pub fn channels(&self) -> usize {
        self.items[0].features.channels()
    }
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    /// Ground-truth types when every item carries one.
    pub fn gt_types(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|i| i.gt_type).collect()
    }

    pub fn gt_masks(&self) -> Option<Vec<Mask>> {
        self.items.iter().map(|i| i.gt_mask.clone()).collect()
    }

    /// Write `features/<id>.fmap`, `masks/<id>.fmap` and `labels.csv`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let fdir = dir.join("features");
        create_dir(&fdir)?;
        for it in &self.items {
            let p = fdir.join(format!("{}.fmap", it.id));
            fmap::save(&it.features, &p)?;
            written.push(p);
        }
        if self.items.iter().any(|i| i.gt_mask.is_some()) {
            let mdir = dir.join("masks");
            create_dir(&mdir)?;
            for it in &self.items {
                if let Some(m) = &it.gt_mask {
                    let p = mdir.join(format!("{}.fmap", it.id));
                    fmap::save(&m.to_feature_map(), &p)?;
                    written.push(p);
                }
            }
        }
        if let Some(types) = self.gt_types() {
            let p = dir.join("labels.csv");
            let rows: Vec<(String, usize)> = self.ids().into_iter().zip(types).collect();
            write_id_csv(&p, "gt_type", &rows)?;
            written.push(p);
        }
        Ok(written)
    }

    /// Load `dir/features/*.fmap` in file-name order. Masks are read from
    /// `dir/masks` when present; labels from `labels` (or `dir/labels.csv`).
    pub fn load_dir(dir: &Path, labels: Option<&Path>) -> Result<Self> {
        let fdir = dir.join("features");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&fdir)
            .map_err(|e| Error::io(&fdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "fmap"))
            .collect();
        paths.sort();
        let label_path = labels
            .map(Path::to_path_buf)
            .or_else(|| Some(dir.join("labels.csv")).filter(|p| p.exists()));
        let labels = match &label_path {
            Some(p) => Some(read_id_csv(p)?),
            None => None,
        };
        let mdir = dir.join("masks");
        let mut items = Vec::with_capacity(paths.len());
        for p in paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::param(format!("bad file name {}", p.display())))?
                .to_string();
            let features = fmap::load(&p)?;
            let mp = mdir.join(format!("{id}.fmap"));
            let gt_mask = if mp.exists() {
                Some(Mask::from_feature_map(&fmap::load(&mp)?)?)
            } else {
                None
            };
            let gt_type = labels.as_ref().and_then(|l| l.get(&id).copied());
            items.push(CorpusItem {
                id,
                features,
                gt_mask,
                gt_type,
            });
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Corpus::new(name, items)
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write a two-column CSV `id,<column>`.
pub fn write_id_csv(path: &Path, column: &str, rows: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", column]).map_err(|e| csv_err(path, e))?;
    for (id, v) in rows {
        w.write_record([id.as_str(), &v.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a two-column `id,<value>` CSV into an id-keyed map.
pub fn read_id_csv(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(Error::format(offset, format!("{}: expected 2 columns", path.display())));
        }
        let v: usize = rec[1].trim().parse().map_err(|_| {
            Error::format(offset, format!("{}: bad integer {:?}", path.display(), &rec[1]))
        })?;
        if out.insert(rec[0].trim().to_string(), v).is_some() {
            return Err(Error::format(offset, format!("duplicate id {:?}", &rec[0])));
        }
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(offset, format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_round_trip() {
        let spec = SyntheticSpec {
            n_images: 6,
            height: 24,
            width: 24,
            channels: 3,
            ..SyntheticSpec::default()
        };
        let c = gen_synthetic_corpus(&spec, &mut crate::RngState::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save_dir(dir.path()).unwrap();
        let back = Corpus::load_dir(dir.path(), None).unwrap();
        assert_eq!(back.ids(), c.ids());
        assert_eq!(back.gt_types(), c.gt_types());
        assert_eq!(back.gt_masks(), c.gt_masks());
        for (a, b) in back.items.iter().zip(&c.items) {
            for (x, y) in a.features.data().iter().zip(b.features.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn inconsistent_mask_rejected() {
        let mut m = Mask::empty(2, 2);
        m.set(0, 0, true);
        let item = CorpusItem {
            id: "a".into(),
            features: FeatureMap::zeros(2, 2, 1),
            gt_mask: Some(m),
            gt_type: Some(0),
        };
        assert!(Corpus::new("x", vec![item]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_id_csv(&p, "label", &[("a".into(), 1), ("b".into(), 0)]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "id,label\na,1\nb,0\n");
        let m = read_id_csv(&p).unwrap();
        assert_eq!(m["a"], 1);
        std::fs::write(&p, "id,label\na,x\n").unwrap();
        assert!(matches!(read_id_csv(&p), Err(Error::Format { .. })));
    }
}
