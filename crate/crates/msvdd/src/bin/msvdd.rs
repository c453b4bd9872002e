//! Command-line entry points: synthesize data, train, score, evaluate,
//! inspect.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/format error,
//! 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use msvdd::datapipe::{self, Split, SynthConfig};
use msvdd::model::{Mode, ModelConfig};
use msvdd::robust;
use msvdd::scoring::{self, ScoreRecord};
use msvdd::trainer::{self, TrainConfig, TrainedArtifact};
use msvdd::{Error, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "msvdd", about = "Multimodal anomaly detection with a robust latent ellipsoid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (WAV + CSV + manifest)
    Synth(SynthArgs),
    /// Train on the manifest's train split and write an artifact
    Train(TrainArgs),
    /// Score a manifest split with a trained artifact
    Score(ScoreArgs),
    /// Compute metrics from a labeled scores CSV
    Eval(EvalArgs),
    /// Summarize a trained artifact
    Inspect(InspectArgs),
}

/// JSON config file: any subset of these sections, each with defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    synth: Option<SynthConfig>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Contract(format!("config {}: {e}", path.display())))
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config file (uses the `synth` section)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the generator seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the dataset
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `synth` (or hand-assembled)
    #[arg(long)]
    manifest: PathBuf,
    /// JSON config file (uses the `model` and `train` sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Distance metric: mahalanobis or euclidean
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Artifact output path (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: artifact path + .log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which manifest split to score
    #[arg(long, default_value = "test")]
    split: String,
    /// Scores CSV output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores CSV produced by `score` (labels required)
    #[arg(long)]
    scores: PathBuf,
    /// Also report point-adjusted metrics
    #[arg(long)]
    point_adjust: bool,
    /// Metrics JSON output path
    #[arg(long)]
    out: PathBuf,
    /// Optional ROC curve CSV output path
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    artifact: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.synth.unwrap_or_default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let raws = datapipe::synth_generate_raw(&cfg)?;
    let manifest = datapipe::export_dataset(&args.out, &cfg, &raws)?;
    let count = |split: Split, anomalous: Option<bool>| {
        manifest
            .entries
            .iter()
            .filter(|e| e.split == split && anomalous.map_or(true, |a| e.label.is_anomalous() == a))
            .count()
    };
    println!(
        "wrote {} windows to {} (train: {} normal; test: {} normal, {} anomalous)",
        manifest.entries.len(),
        args.out.display(),
        count(Split::Train, None),
        count(Split::Test, Some(false)),
        count(Split::Test, Some(true)),
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file_cfg = load_config(args.config.as_deref())?;
    let mut model_cfg = file_cfg.model.unwrap_or_default();
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        model_cfg.mode = mode;
    }

    let manifest = datapipe::load_manifest(&args.manifest)?;
    let ds = datapipe::load_split(&args.manifest, &manifest, Split::Train)?;
    if ds.windows.is_empty() {
        return Err(Error::Contract("manifest train split is empty".into()));
    }
    if let Some(w) = ds.windows.iter().find(|w| w.label.is_some_and(|l| l.is_anomalous())) {
        return Err(Error::Contract(format!(
            "train split contains anomaly label on '{}'; training is unsupervised and accepts only normal data",
            w.source
        )));
    }
    // window geometry comes from the data
    model_cfg.l_a = ds.l_a;
    model_cfg.l_i = ds.l_i;
    model_cfg.validate()?;
    train_cfg.validate()?;

    let (windows, _) = ds.to_model_windows();
    let quiet = args.quiet;
    let (params, log) = trainer::train(&windows, &model_cfg, &train_cfg, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.6}  svdd {:.6}  rec {:.6}  reg {:.3}  r2 {:.4}  lr {:.2e}",
                e.epoch, e.loss, e.svdd, e.rec, e.reg, e.r2, e.lr
            );
        }
    })?;
    let artifact = trainer::finalize(params, &model_cfg, &train_cfg, &windows)?;
    artifact.save(&args.out)?;
    let log_path = args
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));
    trainer::write_log_csv(&log_path, &log)?;
    println!(
        "artifact written to {} (threshold {:.6}, trace(Sigma_z) {:.6}); log at {}",
        args.out.display(),
        artifact.stats.threshold,
        artifact.stats.trace_sigma,
        log_path.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Contract(format!("unknown split '{other}' (expected train|test)"))),
    }
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let artifact = TrainedArtifact::load(&args.artifact)?;
    let manifest = datapipe::load_manifest(&args.manifest)?;
    let split = parse_split(&args.split)?;
    let ds = datapipe::load_split(&args.manifest, &manifest, split)?;
    if !ds.windows.is_empty() && (ds.l_a != artifact.model.l_a || ds.l_i != artifact.model.l_i) {
        return Err(Error::Dimension(format!(
            "artifact expects windows of (L_A = {}, L_I = {}) but the dataset has ({}, {})",
            artifact.model.l_a, artifact.model.l_i, ds.l_a, ds.l_i
        )));
    }
    let (windows, labels) = ds.to_model_windows();
    let label_vec: Option<Vec<bool>> = labels.iter().copied().collect();
    let records = scoring::score_windows(&artifact, &windows, label_vec.as_deref())?;
    let file = std::fs::File::create(&args.out)?;
    scoring::write_scores_csv(file, &records)?;
    let flagged = records.iter().filter(|r| r.predicted).count();
    println!("scored {} windows ({} flagged) -> {}", records.len(), flagged, args.out.display());
    Ok(())
}

fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let idx = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("scores CSV lacks column '{name}' (has: {})", headers.join(", "))))
    };
    let (ii, di, ri, dli, li, pi) =
        (idx("id")?, idx("D")?, idx("rec")?, idx("delta")?, idx("label")?, idx("predicted")?);
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row + 2)))?;
        let cell = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| -> Result<f64> {
            cell(i)
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: '{}' is not numeric", row + 2, cell(i))))
        };
        let flag = |i: usize| -> Result<Option<bool>> {
            match cell(i).as_str() {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                other => Err(Error::Parse(format!("row {}: '{other}' is not a 0/1 flag", row + 2))),
            }
        };
        out.push(ScoreRecord {
            id: cell(ii),
            d: num(di)?,
            rec: num(ri)?,
            delta: num(dli)?,
            label: flag(li)?,
            predicted: flag(pi)?.ok_or_else(|| Error::Parse(format!("row {}: missing predicted flag", row + 2)))?,
        });
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let records = read_scores_csv(&args.scores)?;
    if records.is_empty() {
        return Err(Error::Contract("scores file has no rows".into()));
    }
    let labels: Vec<bool> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Contract(format!("window {} has no label", r.id))))
        .collect::<Result<_>>()?;
    let preds: Vec<bool> = records.iter().map(|r| r.predicted).collect();
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();

    let metrics = scoring::prf1(&labels, &preds)?;
    let single_class = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
    let mut json = serde_json::json!({ "metrics": metrics });
    if single_class {
        json["warning"] = serde_json::json!("labels contain a single class; AUC and best-F1 threshold omitted");
    } else {
        json["auc"] = serde_json::json!(scoring::roc_auc(&labels, &deltas)?);
        let (bt, bf1) = scoring::best_f1_threshold(&labels, &deltas)?;
        json["best_f1_threshold"] = serde_json::json!(bt);
        json["best_f1"] = serde_json::json!(bf1);
        if let Some(roc_path) = &args.roc {
            let curve = scoring::roc_curve(&labels, &deltas)?;
            let file = std::fs::File::create(roc_path)?;
            scoring::write_roc_csv(file, &curve)?;
        }
    }
    if args.point_adjust {
        let adjusted = scoring::point_adjust(&labels, &preds)?;
        json["point_adjusted_metrics"] = serde_json::json!(scoring::prf1(&labels, &adjusted)?);
    }
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Format(format!("metrics json: {e}")))?;
    std::fs::write(&args.out, &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let artifact = TrainedArtifact::load(&args.artifact)?;
    let s = artifact.model.s;
    let rho = artifact
        .params
        .get("rho")
        .ok_or_else(|| Error::Format("artifact lacks the rho parameter".into()))?
        .values[0];
    let r2 = (1.0 + rho.exp()).ln(); // softplus
    println!("mode:         {:?}", artifact.model.mode);
    println!("dims:         d = {}, s = {}, L_A = {}, L_I = {}", artifact.model.d, s, artifact.model.l_a, artifact.model.l_i);
    println!("R^2:          {r2:.6}");
    println!("threshold:    {:.6}", artifact.stats.threshold);
    println!("mu_D:         {:.6}", artifact.stats.mu_d);
    println!("mu_rec:       {:.6}", artifact.stats.mu_rec);
    println!("trace(Sigma): {:.6}", artifact.stats.trace_sigma);
    match artifact.model.mode {
        Mode::Euclidean => println!("Sigma_z:      identity (euclidean mode ignores the covariance)"),
        Mode::Mahalanobis => {
            let (lmin, lmax, _, _) = robust::eigen_extremes(&artifact.stats.sigma, s)?;
            println!("lambda_min:   {lmin:.6e}");
            println!("lambda_max:   {lmax:.6e}");
            println!("condition:    {:.6e}", lmax / lmin);
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Contract(_) => 1,
        Error::Dimension(_) | Error::Format(_) | Error::Parse(_) | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() {
    // MSVDD_THREADS caps loader parallelism; loading is currently
    // sequential, so any valid value is accepted as-is
    if let Ok(v) = std::env::var("MSVDD_THREADS") {
        if v.parse::<usize>().map(|n| n == 0).unwrap_or(true) {
            eprintln!("error: MSVDD_THREADS must be a positive integer (got '{v}')");
            std::process::exit(1);
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
