//! On-disk artifacts of a run and the directory-level pipeline driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, image_scores, stage, tau_sweep, tau_sweep_json, threshold_stage, truth_labeling, fit_vae, MetricsReport, PipelineConfig, StageRngs};
use crate::cluster::{centroids, cluster_points, segment_pixels, Labeling, PixelLabels};
use crate::contrastive::{embed_descriptors, raw_descriptors, train_head, write_descriptors_csv};
use crate::corpus::fmap::{self, write_bytes};
use crate::corpus::{create_dir, csv_err, read_id_csv, write_id_csv, Corpus, Mask};
use crate::error::{Error, Result};
use crate::localize::{localize, ThresholdEstimate};
use crate::nets::persist::{load_net, save_net, save_vae};
use crate::tensor::{AnomalyMap, FeatureMap};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub timings: Vec<StageTiming>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub notices: Vec<String>,
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "FAILED";

/// 8-bit binary PGM of a map, min-max scaled.
pub fn render_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn save_maps(dir: &Path, ids: &[String], maps: &[AnomalyMap]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for (id, m) in ids.iter().zip(maps) {
        let p = dir.join(format!("{id}.fmap"));
        fmap::save_anomaly(m, &p)?;
        let g = dir.join(format!("{id}.pgm"));
        write_bytes(&g, &render_pgm(m.height(), m.width(), m.scores()))?;
        written.extend([p, g]);
    }
    Ok(written)
}

pub fn load_maps(dir: &Path, ids: &[String]) -> Result<Vec<AnomalyMap>> {
    let missing: Vec<&String> = ids.iter().filter(|id| !dir.join(format!("{id}.fmap")).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::param(format!(
            "{} lacks anomaly maps for: {}",
            dir.display(),
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    ids.iter().map(|id| fmap::load_anomaly(&dir.join(format!("{id}.fmap")))).collect()
}

pub fn load_masks(dir: &Path, ids: &[String]) -> Result<Vec<Mask>> {
    ids.iter()
        .map(|id| Mask::from_feature_map(&fmap::load(&dir.join(format!("{id}.fmap")))?))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_threshold(path: &Path) -> Result<ThresholdEstimate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

pub fn write_centers_csv(path: &Path, centers: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let dim = centers.first().map_or(0, Vec::len);
    w.write_record((0..dim).map(|k| format!("c_{k}"))).map_err(|e| csv_err(path, e))?;
    for c in centers {
        w.write_record(c.iter().map(|v| format!("{v:e}"))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_centers_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(offset, format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_labeling_csv(path: &Path, ids: &[String], labeling: &Labeling) -> Result<()> {
    let rows: Vec<(String, usize)> = ids.iter().cloned().zip(labeling.labels.iter().copied()).collect();
    write_id_csv(path, "label", &rows)
}

/// Align two id-keyed label files; mismatched ids are an error listing them.
pub fn align_labelings(
    pred: &BTreeMap<String, usize>,
    truth: &BTreeMap<String, usize>,
) -> Result<(Vec<String>, Labeling, Labeling)> {
    let only_pred: Vec<&str> = pred.keys().filter(|k| !truth.contains_key(*k)).map(String::as_str).collect();
    let only_truth: Vec<&str> = truth.keys().filter(|k| !pred.contains_key(*k)).map(String::as_str).collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        return Err(Error::param(format!(
            "unmatched ids; only in prediction: [{}]; only in truth: [{}]",
            only_pred.join(", "),
            only_truth.join(", ")
        )));
    }
    let ids: Vec<String> = pred.keys().cloned().collect();
    let p = Labeling::from_labels(ids.iter().map(|k| pred[k]).collect());
    let t = Labeling::from_labels(ids.iter().map(|k| truth[k]).collect());
    Ok((ids, p, t))
}

/// Metrics from label files and optional map/mask directories.
pub fn evaluate_files(
    pred: &Path,
    truth: &Path,
    maps_dir: Option<&Path>,
    masks_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let (ids, p, t) = align_labelings(&read_id_csv(pred)?, &read_id_csv(truth)?)?;
    let maps = maps_dir.map(|d| load_maps(d, &ids)).transpose()?;
    let masks = masks_dir.map(|d| load_masks(d, &ids)).transpose()?;
    evaluate(&p, Some(&t), maps.as_deref(), masks.as_deref())
}

/// Files a model directory must provide for segmentation.
pub const SEGMENT_INPUTS: [&str; 3] = ["head.pnet", "centers.csv", "manifest.json"];

/// Segment one feature map with the head, centers and configuration
/// stored in `model_dir`. Writes a `C=1` label FMAP to `out` and a
/// paletted PGM next to it.
pub fn segment_file(features: &Path, model_dir: &Path, out: &Path) -> Result<PixelLabels> {
    let missing: Vec<String> = SEGMENT_INPUTS
        .iter()
        .map(|f| model_dir.join(f))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        let msg = format!("missing {}; a model dir needs {}", missing.join(", "), SEGMENT_INPUTS.join(", "));
        return Err(Error::Io { path: model_dir.to_path_buf(), source: std::io::Error::new(std::io::ErrorKind::NotFound, msg) });
    }
    let manifest_path = model_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(0, format!("{}: {e}", manifest_path.display())))?;
    let head = load_net(&model_dir.join("head.pnet"))?;
    let centers = read_centers_csv(&model_dir.join("centers.csv"))?;
    let raw = fmap::load(features)?;
    let cfg = &manifest.config;
    let seg = segment_pixels(&raw, &head, &centers, cfg.contrastive.feature_smooth_sigma, cfg.fca.margin())?;
    let values: Vec<f64> = seg.labeling.labels.iter().map(|&l| l as f64).collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fmap::save(&FeatureMap::new(seg.height, seg.width, 1, values)?, out)?;
    let step = 255 / seg.labeling.n_clusters.saturating_sub(1).max(1);
    let mut pgm = format!("P5\n{} {}\n255\n", seg.width, seg.height).into_bytes();
    pgm.extend(seg.labeling.labels.iter().map(|&l| (l * step).min(255) as u8));
    write_bytes(&out.with_extension("pgm"), &pgm)?;
    Ok(seg)
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = stage(name, f());
        self.manifest.timings.push(StageTiming {
            stage: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        r
    }

    fn keep(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        for p in paths {
            let rel = p.strip_prefix(self.out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            self.manifest.artifacts.push(rel);
        }
    }
}

/// Config copy with absolute paths, so the manifest can be rerun from
/// its own directory.
fn snapshot(config: &PipelineConfig) -> PipelineConfig {
    let mut c = config.clone();
    for p in [&mut c.paths.corpus, &mut c.paths.labels, &mut c.paths.out].into_iter().flatten() {
        if let Ok(abs) = std::path::absolute(&*p) {
            *p = abs;
        }
    }
    c
}

/// Load the configured corpus, run every stage, and persist artifacts to
/// `out` as they are produced. The manifest is written last, also on
/// failure (with status `FAILED` and the failing stage).
pub fn run_pipeline_dir(config: &PipelineConfig, out: &Path) -> Result<(RunManifest, Option<MetricsReport>)> {
    config.validate()?;
    create_dir(out)?;
    let mut run = Run {
        out,
        manifest: RunManifest {
            version: VERSION.into(),
            seed: config.seed,
            status: STATUS_OK.into(),
            failed_stage: None,
            error: None,
            config: snapshot(config),
            timings: Vec::new(),
            artifacts: Vec::new(),
            notices: Vec::new(),
        },
    };
    let result = run_stages(config, &mut run);
    if let Err(e) = &result {
        run.manifest.status = STATUS_FAILED.into();
        if let Error::Stage { stage, .. } = e {
            run.manifest.failed_stage = Some(stage.clone());
        }
        run.manifest.error = Some(e.to_string());
    }
    let mp = out.join("manifest.json");
    write_json(&mp, &run.manifest)?;
    result.map(|m| (run.manifest, m))
}

fn run_stages(config: &PipelineConfig, run: &mut Run) -> Result<Option<MetricsReport>> {
    let out = run.out;
    let corpus_dir = config
        .paths
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("paths.corpus is not set".into()))?;
    let labels = match &config.paths.labels {
        Some(p) if !p.exists() => {
            run.manifest.notices.push(format!("labels file {} not found; metrics skipped", p.display()));
            None
        }
        other => other.clone(),
    };
    let corpus = run.timed("load_corpus", || {
        let mut c = Corpus::load_dir(&corpus_dir, labels.as_deref())?;
        if config.paths.labels.is_some() && labels.is_none() {
            c.items.iter_mut().for_each(|it| it.gt_type = None);
        }
        Ok(c)
    })?;
    let ids = corpus.ids();
    let mut rngs = StageRngs::new(config.seed);

    let vae = if config.stages.vae {
        let (model, losses) = run.timed("train_vae", || fit_vae(&corpus, &config.vae, &mut rngs.vae))?;
        let p = out.join("vae.vaem");
        save_vae(&model, &p)?;
        let lp = out.join("vae_losses.csv");
        write_losses(&lp, &losses)?;
        run.keep([p, lp]);
        Some(model)
    } else {
        None
    };

    let maps = run.timed("localize", || localize(&corpus, vae.as_ref(), &config.fca))?;
    let written = save_maps(&out.join("maps"), &ids, &maps)?;
    run.keep(written);

    let raw = run.timed("descriptors", || raw_descriptors(&corpus, &maps, &config.contrastive))?;
    let p = out.join("descriptors_raw.csv");
    write_descriptors_csv(&p, &ids, &raw)?;
    run.keep([p]);

    let threshold = run.timed("estimate_threshold", || threshold_stage(&raw, &maps, config, &mut rngs.threshold))?;
    let p = out.join("threshold.json");
    write_json(&p, &threshold)?;
    run.keep([p]);

    let descriptors = if config.stages.contrastive {
        let trained = run.timed("train_head", || {
            train_head(&corpus, &maps, &threshold, &config.contrastive, &mut rngs.head)
        })?;
        let p = out.join("head.pnet");
        save_net(&trained.head, &p)?;
        run.keep([p]);
        run.timed("embed_descriptors", || {
            embed_descriptors(&corpus, &maps, &trained.head, &config.contrastive)
        })?
    } else {
        raw
    };
    let p = out.join("descriptors.csv");
    write_descriptors_csv(&p, &ids, &descriptors)?;
    run.keep([p]);

    let points: Vec<Vec<f64>> = descriptors.iter().map(|d| d.values.clone()).collect();
    let (labeling, centers) = run.timed("cluster", || {
        let l = cluster_points(&points, config.clustering.method, config.clustering.n_clusters, &mut rngs.cluster)?;
        let c = centroids(&points, &l)?;
        Ok((l, c))
    })?;
    let lp = out.join("labels.csv");
    write_labeling_csv(&lp, &ids, &labeling)?;
    let cp = out.join("centers.csv");
    write_centers_csv(&cp, &centers)?;
    run.keep([lp, cp]);

    let Some(truth) = truth_labeling(&corpus) else {
        run.manifest.notices.push("no ground-truth labels; metrics stage skipped".into());
        return Ok(None);
    };
    let mut report = run.timed("evaluate", || {
        evaluate(&labeling, Some(&truth), Some(&maps), corpus.gt_masks().as_deref())
    })?;
    if !config.analysis.tau_sweep.is_empty() {
        let sweep = run.timed("tau_sweep", || tau_sweep(&corpus, &maps, &truth, config, &config.analysis.tau_sweep))?;
        report.extra.insert("tau_sweep".into(), tau_sweep_json(&sweep));
    }
    report.extra.insert(
        "image_scores".into(),
        serde_json::json!(image_scores(&maps)?),
    );
    let p = out.join("metrics.json");
    write_json(&p, &report.to_json())?;
    run.keep([p]);
    Ok(Some(report))
}

/// `iteration,loss` rows.
pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", "loss"]).map_err(|e| csv_err(path, e))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
