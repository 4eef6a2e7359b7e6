//! `dpl`: fit indicators, train, evaluate, score images, generate
//! synthetic data and export embeddings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpl::config::{CompressionMode, CompressionPolicy, RunConfig};
use dpl::data::{make_synthetic_dataset, write_manifest, Dataset, Split};
use dpl::evaluation::{
    evaluate, export_embeddings, robustness_grid, write_robustness, Detector, PerturbationKind, PerturbationSpec,
};
use dpl::indicators::{quantize, IndicatorKind};
use dpl::training::{self, load_detector, load_quantizers};
use dpl::Error;

#[derive(Parser, Debug)]
#[command(name = "dpl", version, about = "Quality-routed progressive deepfake detection")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker for training, so repeated runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score the training split and write both quantizers to the run directory.
    FitIndicators,
    /// Run both training stages.
    Train {
        /// Continue after the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `none`, `random_jpeg` or `fixed:Q`; defaults to the configured test policy.
        #[arg(long)]
        policy: Option<String>,
        /// Single perturbation, `kind:severity` (e.g. `noise:3`).
        #[arg(long)]
        perturb: Option<String>,
        /// Also sweep 4 perturbations x 5 severities and write a CSV and a plot.
        #[arg(long)]
        robustness: bool,
        /// Report file stem; defaults to `<run>/eval/report-<policy>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an indicator score and its level for one image.
    Score {
        #[arg(value_enum)]
        which: Which,
        image: PathBuf,
    },
    /// Generate the synthetic dataset next to the configured manifest.
    Synth {
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write label, levels and fused feature per test image.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Vqi,
    Fii,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.training.workers = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_policy(text: &str, cfg: &RunConfig) -> Result<CompressionPolicy, Failure> {
    match text {
        "none" => Ok(CompressionPolicy::none()),
        "random_jpeg" => {
            let range = match cfg.data.test_compression.mode {
                CompressionMode::RandomJpeg => cfg.data.test_compression.quality_range,
                _ => CompressionPolicy::default().quality_range,
            };
            Ok(CompressionPolicy {
                mode: CompressionMode::RandomJpeg,
                quality_range: range,
            })
        }
        other => {
            let q = other
                .strip_prefix("fixed:")
                .and_then(|q| q.parse::<u8>().ok())
                .ok_or_else(|| Failure::Usage(format!("unknown policy `{other}`")))?;
            let p = CompressionPolicy::fixed(q);
            p.validate()?;
            Ok(p)
        }
    }
}

fn parse_perturbation(text: &str) -> Result<PerturbationSpec, Failure> {
    let (kind, sev) = text
        .split_once(':')
        .ok_or_else(|| Failure::Usage(format!("perturbation must be kind:severity, got `{text}`")))?;
    let kind: PerturbationKind = kind.parse()?;
    let sev: u8 = sev
        .parse()
        .map_err(|_| Failure::Usage(format!("bad severity `{sev}`")))?;
    Ok(PerturbationSpec::new(kind, sev)?)
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::FitIndicators => {
            let train = Dataset::load(&cfg.data.manifest, Split::Train, cfg.model.image_size)?;
            let fitted = training::fit_indicators(&cfg, &train.images)?;
            training::save_quantizers(&cfg.output_dir, &fitted)?;
            for (name, hist) in ["vqi", "fii"].iter().zip(&fitted.histogram) {
                let cells: Vec<String> = hist.iter().enumerate().map(|(i, n)| format!("k={}:{n}", i + 1)).collect();
                println!("{name} levels {}", cells.join(" "));
            }
        }
        Command::Train { resume } => {
            let out = training::train::<f64>(&cfg, *resume)?;
            println!("epochs run: {}", out.epochs_run);
            println!("checkpoint: {}", out.last_checkpoint.display());
            println!("metrics: {}", out.metrics_path.display());
        }
        Command::Eval {
            checkpoint,
            policy,
            perturb,
            robustness,
            out,
        } => {
            let policy = match policy {
                Some(p) => parse_policy(p, &cfg)?,
                None => cfg.data.test_compression,
            };
            let perturbation = perturb.as_deref().map(parse_perturbation).transpose()?;
            let (model, router) = load_detector::<f64>(&cfg, checkpoint)?;
            let test = Dataset::load(&cfg.data.manifest, Split::Test, model.config.image_size)?;
            let det = Detector {
                model: &model,
                router: &router,
            };
            let report = evaluate(&det, &test, &policy, perturbation, cfg.seed)?;
            let stem = match out {
                Some(p) => p.clone(),
                None => {
                    let mut name = format!("report-{}", file_safe(&policy.label()));
                    if let Some(p) = perturbation {
                        name.push_str(&format!("-{}{}", p.kind.name(), p.severity));
                    }
                    cfg.output_dir.join("eval").join(name)
                }
            };
            report.write(&stem)?;
            print!("{}", report.to_text());
            if *robustness {
                let cells = robustness_grid(&det, &test, &policy, cfg.seed)?;
                let dir = stem.parent().unwrap_or(Path::new("."));
                let csv = dir.join("robustness.csv");
                let png = dir.join("robustness.png");
                write_robustness(&cells, &csv, &png)?;
                println!("robustness: {} cells -> {}, {}", cells.len(), csv.display(), png.display());
            }
        }
        Command::Score { which, image } => {
            let (qv, qf) = load_quantizers(&cfg.output_dir)?;
            let (vqi, fii) = training::build_indicators(&cfg)?;
            let img = dpl::backbone::FaceImage::load(image, None)?;
            let (ind, q, kind) = match which {
                Which::Vqi => (&vqi, &qv, IndicatorKind::Vqi),
                Which::Fii => (&fii, &qf, IndicatorKind::Fii),
            };
            let s = ind.score(&img)?;
            println!("{} q={:.6} level={}", kind.name(), s.value(), quantize(s, q).get());
        }
        Command::Synth { out } => {
            let dir = match out {
                Some(d) => d.clone(),
                None => cfg
                    .data
                    .manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let ds = make_synthetic_dataset(&cfg.data.synth, cfg.seed, &dir)?;
            if out.is_none() && ds.manifest_path != cfg.data.manifest {
                write_manifest(&cfg.data.manifest, &ds.entries)?;
            }
            println!("{} images -> {}", ds.entries.len(), ds.manifest_path.display());
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let (model, router) = load_detector::<f64>(&cfg, checkpoint)?;
            let test = Dataset::load(&cfg.data.manifest, Split::Test, model.config.image_size)?;
            let det = Detector {
                model: &model,
                router: &router,
            };
            let n = export_embeddings(&det, &test, &cfg.data.test_compression, cfg.seed, out)?;
            println!("{n} rows -> {}", out.display());
        }
    }
    Ok(())
}
