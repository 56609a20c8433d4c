//! The `tta` command line: pretrain a source model, fit its feature
//! statistics, run adaptation streams and ablations, and summarize the
//! results. Every command is deterministic given config and seed —
//! rerunning writes byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{corrupt, generate_dataset, Corruption, SceneSpec};
use crate::config::{load_config, ConfigError, ExperimentConfig};
use crate::detector::{load_checkpoint, save_checkpoint, Annotation, ToyScene};
use crate::engine::{
    fit_source_stats, run_stream, save_state, AdaptMode, RunLog, SourceArtifacts, TtaConfig,
};
use crate::pretrain::{pretrain, source_splits, PretrainError};
use crate::seeds::{child_seed, child_seed_n, rng_from};
use crate::stats::GaussianStats;

/// Minimum held-out clean mAP a pretrained model must reach; anything
/// below signals a broken build rather than a tuning problem.
pub const LEARNABILITY_FLOOR: f64 = 0.85;

#[derive(Parser)]
#[command(name = "tta", about = "Test-time adaptation of a toy detector on corrupted streams")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train the source detector on clean scenes and save a checkpoint.
    Pretrain(CommonArgs),
    /// Fit the source feature Gaussians from the checkpoint.
    FitStats(CommonArgs),
    /// Run the adaptation protocol over each configured corruption.
    Adapt(CommonArgs),
    /// Run every component combination over the configured seeds.
    Ablate(CommonArgs),
    /// Summarize whatever artifacts earlier commands produced.
    Report(CommonArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Path to the experiment JSON config.
    #[arg(long)]
    pub config: PathBuf,
    /// Dot-path overrides, e.g. --set tta.gamma=0.03125
    #[arg(long = "set")]
    pub set: Vec<String>,
    /// Override the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Exit 2: the config failed to parse or validate.
    Config(String),
    /// Exit 3: pretraining finished below the learnability floor.
    Floor(f64),
    /// Exit 4: a fitted covariance is not positive definite.
    NotPd(String),
    /// Exit 5: statistics dimensions disagree with the model.
    DimMismatch(String),
    /// Exit 1: anything else.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Floor(_) => 3,
            CliError::NotPd(_) => 4,
            CliError::DimMismatch(_) => 5,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config error: {m}"),
            CliError::Floor(map) => format!(
                "pretraining reached clean mAP {map:.4}, below the learnability floor \
                 {LEARNABILITY_FLOOR}"
            ),
            CliError::NotPd(m) => format!("covariance not positive definite: {m}"),
            CliError::DimMismatch(m) => format!("dimension mismatch: {m}"),
            CliError::Other(m) => m.clone(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        CliError::Other(e.to_string())
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

/// Parse, run, report: the whole binary behind `main`.
pub fn run(cli: Cli) -> i32 {
    let (cmd, args): (&str, &CommonArgs) = match &cli.cmd {
        Cmd::Pretrain(a) => ("pretrain", a),
        Cmd::FitStats(a) => ("fit-stats", a),
        Cmd::Adapt(a) => ("adapt", a),
        Cmd::Ablate(a) => ("ablate", a),
        Cmd::Report(a) => ("report", a),
    };
    let result = load_config(&args.config, &args.set)
        .map_err(CliError::from)
        .and_then(|mut cfg| {
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.output_dir = out.display().to_string();
            }
            dispatch(cmd, &cfg)
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &str, cfg: &ExperimentConfig) -> Result<(), CliError> {
    match cmd {
        "pretrain" => cmd_pretrain(cfg),
        "fit-stats" => cmd_fit_stats(cfg),
        "adapt" => cmd_adapt(cfg),
        "ablate" => cmd_ablate(cfg),
        "report" => cmd_report(cfg),
        _ => unreachable!("clap limits the command set"),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(other)?;
    }
    fs::write(path, text).map_err(|e| CliError::Other(format!("writing {path:?}: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(other)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let (params, report) = pretrain(&cfg.model, &cfg.scene, &cfg.pretrain, cfg.seed)?;
    save_checkpoint(&out.join("checkpoint"), &cfg.model, &params).map_err(other)?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    println!(
        "pretrain: clean val mAP {:.4} after {} epochs -> {}",
        report.final_val.map,
        report.epochs_run,
        out.join("checkpoint").display()
    );
    if report.final_val.map < LEARNABILITY_FLOOR {
        return Err(CliError::Floor(report.final_val.map));
    }
    Ok(())
}

fn load_model(cfg: &ExperimentConfig) -> Result<(crate::detector::ModelConfig, crate::detector::DetectorParams), CliError> {
    let dir = out_dir(cfg).join("checkpoint");
    let (model, params) = load_checkpoint(&dir)
        .map_err(|e| CliError::Other(format!("loading checkpoint {dir:?}: {e}")))?;
    if model != cfg.model {
        return Err(CliError::Config(
            "checkpoint was trained with a different model config".into(),
        ));
    }
    Ok((model, params))
}

pub fn cmd_fit_stats(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let (model, params) = load_model(cfg)?;
    let (train_spec, _) = source_splits(&cfg.scene);
    let scenes: Vec<ToyScene> = generate_dataset(&train_spec, cfg.pretrain.train_scenes)
        .map_err(other)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let (global, fg) = fit_source_stats(&model, &params, &scenes).map_err(other)?;
    for (name, stats) in [("global", &global), ("foreground", &fg)] {
        if crate::align::sym_kl(stats, stats).is_err() {
            return Err(CliError::NotPd(format!("{name} covariance fails Cholesky after jitter")));
        }
    }
    write_text(&out.join("stats").join("global.json"), &global.to_json())?;
    write_text(&out.join("stats").join("foreground.json"), &fg.to_json())?;
    println!(
        "fit-stats: global dim {}, foreground dim {} -> {}",
        global.dim(),
        fg.dim(),
        out.join("stats").display()
    );
    Ok(())
}

fn load_artifacts(cfg: &ExperimentConfig) -> Result<SourceArtifacts, CliError> {
    let (model, params) = load_model(cfg)?;
    let stats_dir = out_dir(cfg).join("stats");
    let read = |name: &str| -> Result<GaussianStats, CliError> {
        let path = stats_dir.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Other(format!("loading stats {path:?}: {e}")))?;
        GaussianStats::from_json(&text).map_err(other)
    };
    let global = read("global.json")?;
    let fg = read("foreground.json")?;
    if global.dim() != model.feature_channels {
        return Err(CliError::DimMismatch(format!(
            "global stats dim {} vs model feature channels {}",
            global.dim(),
            model.feature_channels
        )));
    }
    if fg.dim() != model.roi_dim {
        return Err(CliError::DimMismatch(format!(
            "foreground stats dim {} vs model proposal feature dim {}",
            fg.dim(),
            model.roi_dim
        )));
    }
    Ok(SourceArtifacts { params, global_stats: global, fg_stats: fg })
}

/// The corrupted stream for one corruption entry: scenes drawn from a
/// dedicated child of the scene seed, corrupted with per-scene rngs
/// derived from the corruption label, annotations untouched.
pub fn build_stream(
    cfg: &ExperimentConfig,
    corruption: &Corruption,
) -> Result<Vec<(ToyScene, Vec<Annotation>)>, CliError> {
    let stream_spec =
        SceneSpec { seed: child_seed(cfg.scene.seed, "stream"), ..cfg.scene.clone() };
    let clean = generate_dataset(&stream_spec, cfg.stream.scenes).map_err(other)?;
    let corrupt_seed = child_seed(stream_spec.seed, "corrupt");
    Ok(clean
        .into_iter()
        .enumerate()
        .map(|(i, (scene, truths))| {
            let mut rng = rng_from(child_seed_n(corrupt_seed, &corruption.label(), i as u64));
            (corrupt(&scene, corruption, &mut rng), truths)
        })
        .collect())
}

#[derive(Serialize)]
struct CorruptionOutcome {
    corruption: String,
    direct_map: f64,
    adapted_map: f64,
}

#[derive(Serialize)]
struct AdaptSummary {
    runs: Vec<CorruptionOutcome>,
    mean_direct_map: f64,
    mean_adapted_map: f64,
}

fn run_with_flags(
    cfg: &ExperimentConfig,
    source: &SourceArtifacts,
    stream: &[(ToyScene, Vec<Annotation>)],
    mode: Option<AdaptMode>,
    seed: u64,
) -> Result<RunLog, CliError> {
    let tta = match mode {
        Some(m) => TtaConfig { flags: m.flags(), ..cfg.tta.clone() },
        None => cfg.tta.clone(),
    };
    let (log, _) = run_stream(&cfg.model, source, stream, &tta, &cfg.augment, cfg.eval.iou, seed)
        .map_err(other)?;
    Ok(log)
}

pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let source = load_artifacts(cfg)?;
    let mut runs = Vec::new();
    for corruption in &cfg.stream.corruptions {
        let label = corruption.label();
        let stream = build_stream(cfg, corruption)?;
        let direct = run_with_flags(cfg, &source, &stream, Some(AdaptMode::Direct), cfg.seed)?;
        let tta = cfg.tta.clone();
        let (log, state) =
            run_stream(&cfg.model, &source, &stream, &tta, &cfg.augment, cfg.eval.iou, cfg.seed)
                .map_err(other)?;
        let dir = out.join("runs").join(&label);
        write_text(&dir.join("log.csv"), &log.to_csv())?;
        write_text(&dir.join("summary.json"), &log.summary_json())?;
        save_state(&dir.join("state"), &state).map_err(other)?;
        println!(
            "adapt [{label}]: direct mAP {:.4} -> adapted mAP {:.4} over {} batches",
            direct.final_map(),
            log.final_map(),
            log.records.len()
        );
        runs.push(CorruptionOutcome {
            corruption: label,
            direct_map: direct.final_map(),
            adapted_map: log.final_map(),
        });
    }
    let n = runs.len().max(1) as f64;
    let summary = AdaptSummary {
        mean_direct_map: runs.iter().map(|r| r.direct_map).sum::<f64>() / n,
        mean_adapted_map: runs.iter().map(|r| r.adapted_map).sum::<f64>() / n,
        runs,
    };
    write_json(&out.join("adapt_summary.json"), &summary)?;
    println!(
        "adapt: mean direct mAP {:.4} -> mean adapted mAP {:.4}",
        summary.mean_direct_map, summary.mean_adapted_map
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    mode: String,
    per_seed_map: Vec<f64>,
    mean_map: f64,
    std_map: f64,
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let source = load_artifacts(cfg)?;
    let corruption = cfg
        .stream
        .corruptions
        .first()
        .ok_or_else(|| CliError::Config("ablate needs at least one stream corruption".into()))?;
    let stream = build_stream(cfg, corruption)?;

    let mut rows = Vec::new();
    for mode in AdaptMode::ALL {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let log = run_with_flags(cfg, &source, &stream, Some(mode), seed)?;
            per_seed.push(log.final_map());
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        println!(
            "ablate [{}]: mean final mAP {:.4} (std {:.4}) over {} seeds",
            mode.name(),
            mean,
            var.sqrt(),
            per_seed.len()
        );
        rows.push(AblationRow {
            mode: mode.name().into(),
            per_seed_map: per_seed,
            mean_map: mean,
            std_map: var.sqrt(),
        });
    }

    let mut csv = String::from("mode,mean_map,std_map,per_seed_map\n");
    for r in &rows {
        let seeds: Vec<String> = r.per_seed_map.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.mode,
            r.mean_map,
            r.std_map,
            seeds.join(";")
        ));
    }
    let dir = out.join("ablation");
    write_text(&dir.join("table.csv"), &csv)?;
    write_json(&dir.join("summary.json"), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct Report {
    pretrain: Option<serde_json::Value>,
    adapt: Option<serde_json::Value>,
    ablation: Option<serde_json::Value>,
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let read = |path: PathBuf| -> Option<serde_json::Value> {
        fs::read_to_string(path).ok().and_then(|t| serde_json::from_str(&t).ok())
    };
    let report = Report {
        pretrain: read(out.join("pretrain_report.json")),
        adapt: read(out.join("adapt_summary.json")),
        ablation: read(out.join("ablation").join("summary.json")),
    };
    if report.pretrain.is_none() && report.adapt.is_none() && report.ablation.is_none() {
        return Err(CliError::Other(format!(
            "nothing to report: no artifacts under {}",
            out.display()
        )));
    }
    write_json(&out.join("report").join("report.json"), &report)?;
    let present = [
        ("pretrain", report.pretrain.is_some()),
        ("adapt", report.adapt.is_some()),
        ("ablation", report.ablation.is_some()),
    ];
    let listed: Vec<&str> =
        present.iter().filter(|(_, ok)| *ok).map(|(name, _)| *name).collect();
    println!(
        "report: combined {} -> {}",
        listed.join(", "),
        out.join("report").join("report.json").display()
    );
    Ok(())
}
