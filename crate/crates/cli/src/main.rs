use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blindcluster::cluster::{centroids, cluster_points};
use blindcluster::contrastive::{embed_descriptors, raw_descriptors, train_head, write_descriptors_csv};
use blindcluster::corpus::{extract_classical_features, fmap, gen_synthetic_corpus, Corpus, SyntheticSpec};
use blindcluster::corpus::extract::parse_pgm;
use blindcluster::localize::localize;
use blindcluster::nets::persist::{load_net, load_vae, save_net, save_vae};
use blindcluster::pipeline::artifacts::{
    evaluate_files, load_maps, read_threshold, run_pipeline_dir, save_maps, segment_file, write_centers_csv,
    write_json, write_labeling_csv, write_losses,
};
use blindcluster::pipeline::{fit_vae, threshold_stage, PipelineConfig, StageRngs};
use blindcluster::{configure_threads, Error, Result, RngState};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blindcluster", version, about = "Blind anomaly localization and anomaly-type clustering")]
struct Cli {
    /// Pipeline configuration (TOML, or a run manifest .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-image stages.
    #[arg(long, global = true, env = "BLINDCLUSTER_THREADS")]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted anomalies.
    GenSynthetic(GenArgs),
    /// Turn grayscale PGM images into classical filter-bank features.
    ExtractFeatures {
        /// Directory of .pgm images.
        #[arg(long)]
        images: PathBuf,
        /// Filter scales.
        #[arg(long, value_delimiter = ',', default_value = "1.0,2.0")]
        scales: Vec<f64>,
    },
    /// Train the feature-space VAE on a corpus.
    TrainVae(CorpusArg),
    /// Compute anomaly maps.
    Localize {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Trained VAE; plain FCA on rescaled features when omitted.
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Raw descriptors and the binarization threshold.
    EstimateThreshold {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        maps: PathBuf,
        /// Fixed threshold instead of the estimate.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train the contrastive projection head.
    TrainHead {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        maps: PathBuf,
        /// threshold.json from estimate-threshold.
        #[arg(long)]
        threshold: PathBuf,
    },
    /// Descriptors, clustering and cluster centers.
    Cluster {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        maps: PathBuf,
        /// Trained head; raw descriptors are clustered when omitted.
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Score a labeling against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Pixel-level clustering of one feature map with a trained run.
    Segment {
        /// FMAP feature file.
        #[arg(long)]
        features: PathBuf,
        /// Output directory of a pipeline run.
        #[arg(long)]
        model_dir: PathBuf,
        /// Label FMAP to write; a .pgm rendering is written next to it.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run every stage and persist all artifacts.
    Pipeline {
        /// Fixed threshold instead of the estimate.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory (defaults to paths.corpus of the config).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    n_anomaly_types: Option<usize>,
    #[arg(long)]
    normal_fraction: Option<f64>,
    #[arg(long)]
    anomaly_area_fraction: Option<f64>,
    #[arg(long)]
    base_smoothness: Option<f64>,
    #[arg(long)]
    perturbation_strength: Option<f64>,
    #[arg(long)]
    n_normal_modes: Option<usize>,
    #[arg(long)]
    border_margin: Option<usize>,
}

impl GenArgs {
    fn spec(&self) -> SyntheticSpec {
        let mut s = SyntheticSpec::default();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        set!(
            n_images,
            height,
            width,
            channels,
            n_anomaly_types,
            normal_fraction,
            anomaly_area_fraction,
            base_smoothness,
            perturbation_strength,
            n_normal_modes,
            border_margin
        );
        s
    }
}

struct Ctx {
    config: PipelineConfig,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = self.out()?;
        std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
        Ok(out)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn corpus(&self, arg: &CorpusArg) -> Result<Corpus> {
        let dir = arg
            .corpus
            .clone()
            .or_else(|| self.config.paths.corpus.clone())
            .ok_or_else(|| Error::Config("no corpus: pass --corpus or set paths.corpus".into()))?;
        Corpus::load_dir(&dir, self.config.paths.labels.as_deref())
    }

    fn rngs(&self) -> StageRngs {
        StageRngs::new(self.config.seed)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Format { .. } | Error::Io { .. } | Error::UndefinedMetric(_) => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
        Error::Stage { .. } => unreachable!("root() looks through stage wrappers"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        configure_threads(n)?;
    }
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.clone().or_else(|| config.paths.out.clone());
    let ctx = Ctx { config, out, quiet: cli.quiet };

    match cli.command {
        Command::GenSynthetic(args) => gen_synthetic(&ctx, &args),
        Command::ExtractFeatures { images, scales } => extract_features(&ctx, &images, &scales),
        Command::TrainVae(c) => {
            let corpus = ctx.corpus(&c)?;
            let out = ctx.out_dir()?;
            let (model, losses) = fit_vae(&corpus, &ctx.config.vae, &mut ctx.rngs().vae)?;
            save_vae(&model, &out.join("vae.vaem"))?;
            write_losses(&out.join("vae_losses.csv"), &losses)?;
            ctx.say(format!(
                "trained VAE for {} iterations, final loss {:.5}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            ));
            Ok(())
        }
        Command::Localize { corpus, vae } => {
            let corpus = ctx.corpus(&corpus)?;
            let out = ctx.out_dir()?;
            let model = vae.as_deref().map(load_vae).transpose()?;
            let maps = localize(&corpus, model.as_ref(), &ctx.config.fca)?;
            save_maps(&out.join("maps"), &corpus.ids(), &maps)?;
            ctx.say(format!("wrote {} anomaly maps to {}", maps.len(), out.join("maps").display()));
            Ok(())
        }
        Command::EstimateThreshold { corpus, maps, threshold } => {
            let corpus = ctx.corpus(&corpus)?;
            let out = ctx.out_dir()?;
            let maps = load_maps(&maps, &corpus.ids())?;
            let raw = raw_descriptors(&corpus, &maps, &ctx.config.contrastive)?;
            write_descriptors_csv(&out.join("descriptors_raw.csv"), &corpus.ids(), &raw)?;
            let mut cfg = ctx.config.clone();
            cfg.threshold = threshold.or(cfg.threshold);
            let t = threshold_stage(&raw, &maps, &cfg, &mut ctx.rngs().threshold)?;
            write_json(&out.join("threshold.json"), &t)?;
            ctx.say(format!("threshold {:.6} (normal ratio {:.3})", t.t, t.normal_ratio));
            Ok(())
        }
        Command::TrainHead { corpus, maps, threshold } => {
            let corpus = ctx.corpus(&corpus)?;
            let out = ctx.out_dir()?;
            let maps = load_maps(&maps, &corpus.ids())?;
            let t = read_threshold(&threshold)?;
            let trained = train_head(&corpus, &maps, &t, &ctx.config.contrastive, &mut ctx.rngs().head)?;
            save_net(&trained.head, &out.join("head.pnet"))?;
            write_losses(&out.join("head_losses.csv"), &trained.epoch_losses)?;
            ctx.say(format!("trained head for {} epochs", trained.epoch_losses.len()));
            Ok(())
        }
        Command::Cluster { corpus, maps, head } => {
            let corpus = ctx.corpus(&corpus)?;
            let out = ctx.out_dir()?;
            let ids = corpus.ids();
            let maps = load_maps(&maps, &ids)?;
            let cfg = &ctx.config;
            let descriptors = match head {
                Some(p) => embed_descriptors(&corpus, &maps, &load_net(&p)?, &cfg.contrastive)?,
                None => raw_descriptors(&corpus, &maps, &cfg.contrastive)?,
            };
            write_descriptors_csv(&out.join("descriptors.csv"), &ids, &descriptors)?;
            let points: Vec<Vec<f64>> = descriptors.into_iter().map(|d| d.values).collect();
            let labeling = cluster_points(
                &points,
                cfg.clustering.method,
                cfg.clustering.n_clusters,
                &mut ctx.rngs().cluster,
            )?;
            write_labeling_csv(&out.join("labels.csv"), &ids, &labeling)?;
            write_centers_csv(&out.join("centers.csv"), &centroids(&points, &labeling)?)?;
            ctx.say(format!("cluster sizes {:?}", labeling.cluster_sizes()));
            Ok(())
        }
        Command::Evaluate { pred, truth, maps, masks } => {
            let report = evaluate_files(&pred, &truth, maps.as_deref(), masks.as_deref())?;
            let json = report.to_json();
            if let Some(out) = &ctx.out {
                std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                write_json(&out.join("metrics.json"), &json)?;
            }
            ctx.say(json.to_string());
            Ok(())
        }
        Command::Segment { features, model_dir, output } => {
            let seg = segment_file(&features, &model_dir, &output)?;
            let mut counts = vec![0usize; seg.labeling.n_clusters];
            seg.labeling.labels.iter().for_each(|&l| counts[l] += 1);
            ctx.say(format!("{}x{} pixels, per-cluster counts {counts:?}", seg.height, seg.width));
            Ok(())
        }
        Command::Pipeline { threshold } => {
            if cli.config.is_none() {
                return Err(Error::Config("pipeline needs --config".into()));
            }
            let mut cfg = ctx.config.clone();
            cfg.threshold = threshold.or(cfg.threshold);
            let out = ctx.out()?.to_path_buf();
            let (manifest, metrics) = run_pipeline_dir(&cfg, &out)?;
            for n in &manifest.notices {
                eprintln!("notice: {n}");
            }
            match metrics {
                Some(m) => ctx.say(m.table()),
                None => ctx.say("no metrics (ground truth unavailable)"),
            }
            ctx.say(format!("artifacts in {}", out.display()));
            Ok(())
        }
    }
}

fn gen_synthetic(ctx: &Ctx, args: &GenArgs) -> Result<()> {
    let spec = args.spec();
    spec.validate()?;
    let out = ctx.out()?;
    let corpus = gen_synthetic_corpus(&spec, &mut RngState::new(ctx.config.seed))?;
    let written = corpus.save_dir(out)?;
    write_json(&out.join("spec.json"), &spec)?;
    ctx.say(format!("wrote {} files to {}", written.len() + 1, out.display()));
    Ok(())
}

fn extract_features(ctx: &Ctx, images: &Path, scales: &[f64]) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(|e| Error::Io { path: images.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Parameter(format!("no .pgm images in {}", images.display())));
    }
    let fdir = ctx.out()?.join("features");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::Io { path: fdir.clone(), source: e })?;
    for p in &paths {
        let bytes = std::fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        let image = parse_pgm(&bytes)?;
        let features = extract_classical_features(&image, scales)?;
        let stem = p.file_stem().unwrap_or_default().to_string_lossy();
        fmap::save(&features, &fdir.join(format!("{stem}.fmap")))?;
    }
    ctx.say(format!("extracted features for {} images into {}", paths.len(), fdir.display()));
    Ok(())
}
