//! End-to-end orchestration: configuration, stages, evaluation.

pub mod artifacts;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{centroids, cluster_points, ClusterMethod, Labeling};
use crate::contrastive::{embed_descriptors, raw_descriptors, train_head, ContrastiveConfig, ImageDescriptor, TrainedHead};
use crate::corpus::{Corpus, Mask};
use crate::error::{Error, Result};
use crate::localize::{estimate_threshold, image_score, localize, FcaConfig, ThresholdEstimate};
use crate::metrics::{ari, auroc, f1_assignment, nmi, pro};
use crate::nets::vae::train_vae;
use crate::nets::{VaeConfig, VaeModel};
use crate::rng::RngState;
use crate::tensor::AnomalyMap;

pub use artifacts::{run_pipeline_dir, RunManifest};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub method: ClusterMethod,
    /// Number of final clusters, the normal cluster included.
    pub n_clusters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Ward,
            n_clusters: 4,
        }
    }
}

/// Switches for ablation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    /// Subtract the VAE reconstruction before scoring.
    pub vae: bool,
    /// Train the projection head; when off, raw descriptors are clustered.
    pub contrastive: bool,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            vae: true,
            contrastive: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Temperatures at which clustering is re-run with and without the
    /// head; results go to the metrics report.
    pub tau_sweep: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fixed binarization threshold instead of the estimate.
    pub threshold: Option<f64>,
    pub paths: PathsConfig,
    pub fca: FcaConfig,
    pub vae: VaeConfig,
    pub contrastive: ContrastiveConfig,
    pub clustering: ClusteringConfig,
    pub stages: StagesConfig,
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read a TOML config, or the config snapshot of a run manifest
    /// (`.json`). Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            m.config.validate()?;
            m.config
        } else {
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.labels, &mut cfg.paths.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(c) = &cfg.paths.corpus {
            if !c.is_dir() {
                return Err(Error::Config(format!("paths.corpus {} is not a directory", c.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fca.validate()?;
        self.vae.validate()?;
        self.contrastive.validate()?;
        if self.clustering.n_clusters < 2 {
            return Err(Error::Config("clustering.n_clusters must be >= 2 (one is the normal cluster)".into()));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::Config("threshold must be finite".into()));
            }
        }
        if self.analysis.tau_sweep.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("analysis.tau_sweep values must be > 0".into()));
        }
        Ok(())
    }
}

/// Independent random streams for the stochastic stages, derived from the
/// run seed in a fixed order so that toggling a stage does not shift the
/// others.
pub struct StageRngs {
    pub vae: RngState,
    pub threshold: RngState,
    pub head: RngState,
    pub cluster: RngState,
}

impl StageRngs {
    pub fn new(seed: u64) -> Self {
        let mut master = RngState::new(seed);
        Self {
            vae: master.fork(1),
            threshold: master.fork(2),
            head: master.fork(3),
            cluster: master.fork(4),
        }
    }
}

pub(crate) fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Every pixel of every `[0, 1]`-rescaled image, as rows.
pub fn pooled_rescaled_pixels(corpus: &Corpus) -> Vec<f64> {
    corpus.items.iter().flat_map(|it| it.features.minmax_rescale().into_data()).collect()
}

pub fn fit_vae(corpus: &Corpus, config: &VaeConfig, rng: &mut RngState) -> Result<(VaeModel, Vec<f64>)> {
    let pixels = pooled_rescaled_pixels(corpus);
    let (model, report) = train_vae(&pixels, corpus.channels(), config, rng)?;
    Ok((model, report.losses))
}

#[derive(Debug, Clone)]
pub struct Localized {
    pub vae: Option<VaeModel>,
    pub vae_losses: Vec<f64>,
    pub maps: Vec<AnomalyMap>,
}

pub fn run_localization(corpus: &Corpus, config: &PipelineConfig, rngs: &mut StageRngs) -> Result<Localized> {
    let (vae, vae_losses) = if config.stages.vae {
        let (m, l) = stage("train_vae", fit_vae(corpus, &config.vae, &mut rngs.vae))?;
        (Some(m), l)
    } else {
        (None, Vec::new())
    };
    let maps = stage("localize", localize(corpus, vae.as_ref(), &config.fca))?;
    Ok(Localized { vae, vae_losses, maps })
}

#[derive(Debug, Clone)]
pub struct Clustered {
    pub raw_descriptors: Vec<ImageDescriptor>,
    pub threshold: ThresholdEstimate,
    pub head: Option<TrainedHead>,
    pub descriptors: Vec<ImageDescriptor>,
    pub labeling: Labeling,
    /// k-means centers of the final descriptors, for segmenting new images.
    pub centers: Vec<Vec<f64>>,
}

pub fn image_scores(maps: &[AnomalyMap]) -> Result<Vec<f64>> {
    maps.iter().map(image_score).collect()
}

pub fn threshold_stage(
    raw: &[ImageDescriptor],
    maps: &[AnomalyMap],
    config: &PipelineConfig,
    rng: &mut RngState,
) -> Result<ThresholdEstimate> {
    let scores = image_scores(maps)?;
    match config.threshold {
        Some(t) => Ok(ThresholdEstimate {
            t,
            normal_ratio: scores.iter().filter(|&&s| s <= t).count() as f64 / scores.len() as f64,
            normal_cluster_index: 0,
        }),
        None => estimate_threshold(raw, &scores, config.clustering.n_clusters, rng),
    }
}

pub fn run_clustering(
    corpus: &Corpus,
    maps: &[AnomalyMap],
    config: &PipelineConfig,
    rngs: &mut StageRngs,
) -> Result<Clustered> {
    let raw = stage("descriptors", raw_descriptors(corpus, maps, &config.contrastive))?;
    let threshold = stage("estimate_threshold", threshold_stage(&raw, maps, config, &mut rngs.threshold))?;
    let (head, descriptors) = if config.stages.contrastive {
        let trained = stage(
            "train_head",
            train_head(corpus, maps, &threshold, &config.contrastive, &mut rngs.head),
        )?;
        let d = stage(
            "embed_descriptors",
            embed_descriptors(corpus, maps, &trained.head, &config.contrastive),
        )?;
        (Some(trained), d)
    } else {
        (None, raw.clone())
    };
    let points: Vec<Vec<f64>> = descriptors.iter().map(|d| d.values.clone()).collect();
    let labeling = stage(
        "cluster",
        cluster_points(&points, config.clustering.method, config.clustering.n_clusters, &mut rngs.cluster),
    )?;
    let centers = stage("cluster", centroids(&points, &labeling))?;
    Ok(Clustered {
        raw_descriptors: raw,
        threshold,
        head,
        descriptors,
        labeling,
        centers,
    })
}

/// Metrics keyed by name, plus the reason for every metric left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    pub omitted: BTreeMap<String, String>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    fn record(&mut self, name: &str, r: Result<f64>) {
        match r {
            Ok(v) => {
                self.values.insert(name.into(), v);
            }
            Err(e) => {
                self.omitted.insert(name.into(), e.to_string());
            }
        }
    }

    fn omit(&mut self, names: &[&str], reason: &str) {
        for n in names {
            self.omitted.insert((*n).into(), reason.into());
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.values {
            obj.insert(k.clone(), serde_json::json!(v));
        }
        if !self.omitted.is_empty() {
            let o: serde_json::Map<String, serde_json::Value> = self
                .omitted
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::json!({ "reason": v })))
                .collect();
            obj.insert("omitted".into(), o.into());
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        obj.into()
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut s = String::from("metric          value\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k:<15} {v:.4}\n"));
        }
        for (k, why) in &self.omitted {
            s.push_str(&format!("{k:<15} -       ({why})\n"));
        }
        s
    }
}

fn crop_masks_to(masks: &[Mask], maps: &[AnomalyMap]) -> Result<Vec<Mask>> {
    masks
        .iter()
        .zip(maps)
        .map(|(m, a)| {
            let d = m.height().checked_sub(a.height()).filter(|d| d % 2 == 0);
            match d {
                Some(d) if m.width().checked_sub(a.width()) == Some(d) => m.crop_border(d / 2),
                _ => Err(Error::param("mask is not a symmetric crop match for its anomaly map")),
            }
        })
        .collect()
}

/// Every applicable metric; ones that cannot be computed are listed with
/// a reason. `masks` may be full-size: they are cropped to the map extent.
pub fn evaluate(
    pred: &Labeling,
    truth: Option<&Labeling>,
    maps: Option<&[AnomalyMap]>,
    masks: Option<&[Mask]>,
) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    match truth {
        Some(t) => {
            if t.len() != pred.len() {
                return Err(Error::param("prediction and truth differ in length"));
            }
            r.record("nmi", nmi(pred, t));
            r.record("ari", ari(pred, t));
            r.record("f1", f1_assignment(pred, t));
        }
        None => r.omit(&["nmi", "ari", "f1"], "no labels"),
    }
    let Some(maps) = maps else {
        r.omit(&["auroc_image", "auroc_pixel", "pro"], "no maps");
        return Ok(r);
    };
    if maps.len() != pred.len() {
        return Err(Error::param("maps and labeling differ in length"));
    }
    match truth {
        Some(t) => {
            let scores = image_scores(maps)?;
            let anomalous: Vec<bool> = t.labels.iter().map(|&l| l > 0).collect();
            r.record("auroc_image", auroc(&scores, &anomalous));
        }
        None => r.omit(&["auroc_image"], "no labels"),
    }
    match masks {
        Some(masks) => {
            if masks.len() != maps.len() {
                return Err(Error::param("masks and maps differ in length"));
            }
            let cropped = crop_masks_to(masks, maps)?;
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.scores().iter().copied()).collect();
            let bits: Vec<bool> = cropped.iter().flat_map(|m| m.bits().iter().copied()).collect();
            r.record("auroc_pixel", auroc(&scores, &bits));
            r.record("pro", pro(maps, &cropped, 0.3, 200));
        }
        None => r.omit(&["auroc_pixel", "pro"], "no masks"),
    }
    Ok(r)
}

pub fn truth_labeling(corpus: &Corpus) -> Option<Labeling> {
    corpus.gt_types().map(Labeling::from_labels)
}

/// NMI at one temperature with and without the trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub nmi_with_cl: f64,
    pub nmi_without_cl: f64,
}

/// Re-run threshold estimation, head training and clustering at each
/// temperature on fixed anomaly maps.
pub fn tau_sweep(
    corpus: &Corpus,
    maps: &[AnomalyMap],
    truth: &Labeling,
    config: &PipelineConfig,
    taus: &[f64],
) -> Result<Vec<TauPoint>> {
    taus.iter()
        .map(|&tau| {
            let mut nmis = [0.0; 2];
            for (slot, cl) in [(0, true), (1, false)] {
                let mut cfg = config.clone();
                cfg.contrastive.tau = tau;
                cfg.stages.contrastive = cl;
                let out = run_clustering(corpus, maps, &cfg, &mut StageRngs::new(cfg.seed))?;
                nmis[slot] = nmi(&out.labeling, truth)?;
            }
            Ok(TauPoint {
                tau,
                nmi_with_cl: nmis[0],
                nmi_without_cl: nmis[1],
            })
        })
        .collect()
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Full in-memory run: localization, clustering and, when ground truth is
/// present, evaluation.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub localized: Localized,
    pub clustered: Clustered,
    pub metrics: Option<MetricsReport>,
}

pub fn run_pipeline(corpus: &Corpus, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let mut rngs = StageRngs::new(config.seed);
    let localized = run_localization(corpus, config, &mut rngs)?;
    let clustered = run_clustering(corpus, &localized.maps, config, &mut rngs)?;
    let truth = truth_labeling(corpus);
    let metrics = match &truth {
        Some(t) => {
            let masks = corpus.gt_masks();
            let mut m = stage(
                "evaluate",
                evaluate(&clustered.labeling, Some(t), Some(&localized.maps), masks.as_deref()),
            )?;
            if !config.analysis.tau_sweep.is_empty() {
                let sweep = stage(
                    "tau_sweep",
                    tau_sweep(corpus, &localized.maps, t, config, &config.analysis.tau_sweep),
                )?;
                m.extra.insert("tau_sweep".into(), tau_sweep_json(&sweep));
            }
            Some(m)
        }
        None => None,
    };
    Ok(PipelineOutput {
        localized,
        clustered,
        metrics,
    })
}

pub fn tau_sweep_json(points: &[TauPoint]) -> serde_json::Value {
    let with: Vec<f64> = points.iter().map(|p| p.nmi_with_cl).collect();
    let without: Vec<f64> = points.iter().map(|p| p.nmi_without_cl).collect();
    serde_json::json!({
        "points": points,
        "nmi_std_with_cl": std_dev(&with),
        "nmi_std_without_cl": std_dev(&without),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_corpus, SyntheticSpec};

    #[test]
    fn config_parses_dotted_keys_and_rejects_unknown() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 7\nfca.sigma_p = 2.0\ncontrastive.k = 2\nclustering.method = \"kmeans\"\nclustering.n_clusters = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fca.sigma_p, 2.0);
        assert_eq!(cfg.contrastive.k, 2);
        assert_eq!(cfg.contrastive.tau, 0.002);
        assert_eq!(cfg.clustering.method, ClusterMethod::Kmeans);
        assert!(matches!(PipelineConfig::from_toml_str("fca.sigma_q = 1.0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("clustering.n_clusters = 1"), Err(Error::Config(_))));
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn evaluate_reports_reasons() {
        let pred = Labeling::from_labels(vec![0, 1, 1, 0]);
        let r = evaluate(&pred, Some(&pred), None, None).unwrap();
        assert_eq!(r.get("nmi"), Some(1.0));
        assert_eq!(r.get("ari"), Some(1.0));
        assert_eq!(r.get("f1"), Some(1.0));
        assert_eq!(r.omitted["pro"], "no maps");
        let maps: Vec<AnomalyMap> = (0..4).map(|i| AnomalyMap::new(1, 1, vec![i as f64]).unwrap()).collect();
        let r = evaluate(&pred, Some(&pred), Some(&maps), None).unwrap();
        assert_eq!(r.omitted["auroc_pixel"], "no masks");
        assert_eq!(r.get("auroc_image"), Some(0.5));
        let json = r.to_json();
        assert_eq!(json["omitted"]["pro"]["reason"], "no masks");
    }

    #[test]
    fn tiny_pipeline_runs_and_is_deterministic() {
        let spec = SyntheticSpec {
            n_images: 16,
            height: 40,
            width: 40,
            channels: 4,
            ..SyntheticSpec::default()
        };
        let corpus = gen_synthetic_corpus(&spec, &mut RngState::new(4)).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.vae.iterations = 20;
        cfg.vae.batch_size = 64;
        cfg.vae.latent_dim = 2;
        cfg.contrastive.epochs = 2;
        cfg.contrastive.pairs_per_batch = 64;
        let a = run_pipeline(&corpus, &cfg).unwrap();
        let b = run_pipeline(&corpus, &cfg).unwrap();
        assert_eq!(a.clustered.labeling, b.clustered.labeling);
        assert_eq!(a.clustered.descriptors, b.clustered.descriptors);
        let m = a.metrics.unwrap();
        for k in ["nmi", "ari", "f1", "auroc_pixel", "auroc_image", "pro"] {
            assert!(m.get(k).is_some(), "{k} missing: {:?}", m.omitted);
        }
    }
}
