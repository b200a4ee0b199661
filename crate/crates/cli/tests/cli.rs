use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = "seed = 5
paths.corpus = \"c\"
vae.iterations = 100
vae.batch_size = 256
vae.latent_dim = 8
contrastive.epochs = 1
contrastive.hidden_dim = 32
";

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blindcluster"))
        .current_dir(dir)
        .env_remove("BLINDCLUSTER_THREADS")
        .args(args)
        .output()
        .expect("spawn blindcluster")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn gen(dir: &Path, out: &str) {
    ok(&bin(dir, &["gen-synthetic", "--out", out, "--n-images", "16", "--height", "24", "--width", "24", "--seed", "5"]));
}

fn setup() -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cfg.toml"), SMALL).unwrap();
    gen(tmp.path(), "c");
    tmp
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synthetic_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "a");
    gen(tmp.path(), "b");
    let a = tree(&tmp.path().join("a"));
    assert_eq!(a, tree(&tmp.path().join("b")));
    let rows = fs::read_to_string(tmp.path().join("a/labels.csv")).unwrap().lines().count() - 1;
    let features = fs::read_dir(tmp.path().join("a/features")).unwrap().count();
    assert_eq!(rows, 16);
    assert_eq!(features, rows);
}

#[test]
fn invalid_spec_exits_two_without_writing() {
    let tmp = TempDir::new().unwrap();
    let o = bin(tmp.path(), &["gen-synthetic", "--out", "c", "--normal-fraction", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn zero_threads_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = bin(tmp.path(), &["--threads", "0", "gen-synthetic", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_corpus_exits_three() {
    let tmp = TempDir::new().unwrap();
    let o = bin(tmp.path(), &["--out", "o", "train-vae", "--corpus", "nope"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn pipeline_writes_metrics_and_reruns_from_manifest() {
    let tmp = setup();
    let dir = tmp.path();
    ok(&bin(dir, &["--config", "cfg.toml", "--out", "run", "-q", "pipeline"]));
    let m = read_json(&dir.join("run/metrics.json"));
    for k in ["nmi", "ari", "f1", "auroc_pixel", "auroc_image", "pro"] {
        let v = m[k].as_f64().unwrap_or_else(|| panic!("missing {k}"));
        assert!(v.is_finite(), "{k} = {v}");
    }
    ok(&bin(dir, &["--config", "run/manifest.json", "--out", "again", "-q", "pipeline"]));
    assert_eq!(
        fs::read(dir.join("run/labels.csv")).unwrap(),
        fs::read(dir.join("again/labels.csv")).unwrap()
    );

    let o = bin(dir, &["segment", "--features", "c/features/img_0003.fmap", "--model-dir", "run", "--output", "seg/x.fmap"]);
    ok(&o);
    assert!(dir.join("seg/x.fmap").exists());
    assert!(dir.join("seg/x.pgm").exists());

    fs::remove_file(dir.join("run/head.pnet")).unwrap();
    let o = bin(dir, &["segment", "--features", "c/features/img_0003.fmap", "--model-dir", "run", "--output", "seg/y.fmap"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("head.pnet"));
}

#[test]
fn pipeline_without_labels_skips_metrics() {
    let tmp = setup();
    let dir = tmp.path();
    fs::remove_file(dir.join("c/labels.csv")).unwrap();
    let o = bin(dir, &["--config", "cfg.toml", "--out", "run", "pipeline"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("notice"));
    assert!(!dir.join("run/metrics.json").exists());
    assert!(dir.join("run/labels.csv").exists());
}

#[test]
fn pipeline_requires_config() {
    let tmp = TempDir::new().unwrap();
    let o = bin(tmp.path(), &["--out", "run", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_perfect_labeling() {
    let tmp = setup();
    let dir = tmp.path();
    let o = bin(dir, &["--out", "ev", "evaluate", "--pred", "c/labels.csv", "--truth", "c/labels.csv"]);
    ok(&o);
    let m = read_json(&dir.join("ev/metrics.json"));
    for k in ["nmi", "ari", "f1"] {
        assert_eq!(m[k].as_f64(), Some(1.0), "{k}");
    }
    assert_eq!(m["omitted"]["pro"]["reason"], "no maps");
}

#[test]
fn stage_chain_produces_artifacts() {
    let tmp = setup();
    let dir = tmp.path();
    let cfg = ["--config", "cfg.toml", "-q"];
    let step = |extra: &[&str]| ok(&bin(dir, &[&cfg[..], extra].concat()));
    step(&["--out", "s", "train-vae"]);
    step(&["--out", "s", "localize", "--vae", "s/vae.vaem"]);
    step(&["--out", "s", "estimate-threshold", "--maps", "s/maps"]);
    step(&["--out", "s", "train-head", "--maps", "s/maps", "--threshold", "s/threshold.json"]);
    step(&["--out", "s", "cluster", "--maps", "s/maps", "--head", "s/head.pnet"]);
    step(&["--out", "ev", "evaluate", "--pred", "s/labels.csv", "--truth", "c/labels.csv", "--maps", "s/maps", "--masks", "c/masks"]);
    let m = read_json(&dir.join("ev/metrics.json"));
    assert!(m["pro"].as_f64().is_some());
    let rows = fs::read_to_string(dir.join("s/labels.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 16);
}

#[test]
fn evaluate_matches_library_metrics() {
    use blindcluster::cluster::Labeling;
    use blindcluster::metrics::{ari, f1_assignment, nmi};

    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let truth: Vec<usize> = (0..30).map(|i| i % 4).collect();
    let pred: Vec<usize> = (0..30).map(|i| (i * 7 + i / 5) % 3).collect();
    let csv = |col: &str, v: &[usize]| {
        let mut s = format!("id,{col}\n");
        v.iter().enumerate().for_each(|(i, l)| s += &format!("im{i:02},{l}\n"));
        s
    };
    fs::write(dir.join("truth.csv"), csv("gt_type", &truth)).unwrap();
    fs::write(dir.join("pred.csv"), csv("label", &pred)).unwrap();
    ok(&bin(dir, &["--out", "ev", "-q", "evaluate", "--pred", "pred.csv", "--truth", "truth.csv"]));
    let m = read_json(&dir.join("ev/metrics.json"));

    let (p, t) = (Labeling::from_labels(pred), Labeling::from_labels(truth));
    let close = |k: &str, v: f64| assert!((m[k].as_f64().unwrap() - v).abs() < 1e-12, "{k}");
    close("nmi", nmi(&p, &t).unwrap());
    close("ari", ari(&p, &t).unwrap());
    close("f1", f1_assignment(&p, &t).unwrap());
}
