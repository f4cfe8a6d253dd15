use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cra_core::checkpoint::Stage;
use cra_core::metrics::{format_table, MetricsReport};
use cra_core::trainer::{
    class_names, gen_data, run_comparison, run_pipeline, Run, RunConfig, RunControl, Variant,
};
use cra_core::verify::{check_losses, GRAD_TOLERANCE};
use cra_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "cra", version, about = "Cross-region adaptation for domain-adaptive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `data.root`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Accept artifacts produced by a different config hash.
    #[arg(long)]
    allow_hash_mismatch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalStage {
    Source,
    Cda,
    Cra,
    PseudoOnly,
    EntropyMin,
}

impl EvalStage {
    fn stage(self) -> (Stage, &'static str) {
        match self {
            EvalStage::Source => (Stage::Source, "Source only"),
            EvalStage::Cda => (Stage::Cda, "CDA"),
            EvalStage::Cra => (Stage::Cra, "CDA+CRA"),
            EvalStage::PseudoOnly => (Stage::PseudoOnly, "Pseudo labels only"),
            EvalStage::EntropyMin => (Stage::EntropyMin, "Entropy minimization"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target dataset.
    GenData(Common),
    /// Train G on labelled source images.
    TrainSource(Common),
    /// Align source and target features adversarially (C frozen).
    TrainCda(Common),
    /// Persist pseudo-labels, entropy maps and trusted masks of the target pool.
    SplitRegions(Common),
    /// Fine-tune with cross-region adaptation.
    TrainCra(Common),
    /// Evaluate a finished stage on the held-out target images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "cra")]
        stage: EvalStage,
        /// Baseline report; adds a difference column to the table.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Run source, CDA, split and CRA, resuming finished stages.
    Pipeline(Common),
    /// Pseudo-labels only, entropy minimization and CRA from one CDA checkpoint.
    CompareBaselines(Common),
    /// Finite-difference check of every loss.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &c.data_root {
        cfg.data.root = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn control(c: &Common) -> RunControl {
    RunControl {
        allow_hash_mismatch: c.allow_hash_mismatch,
        stop_after: None,
        echo_logs: true,
    }
}

fn open(c: &Common) -> Result<Run, Error> {
    Run::open(load_config(c)?, control(c))
}

fn emit(kind: &str, value: serde_json::Value) {
    println!("{}", json!({"event": kind, "result": value}));
}

fn emit_report(report: &MetricsReport) -> Result<(), Error> {
    emit("report", serde_json::to_value(report)?);
    Ok(())
}

fn table(rows: &[&MetricsReport], baseline: Option<&MetricsReport>) {
    let k = rows.first().map_or(0, |r| r.per_class_iou.len());
    eprint!("{}", format_table(rows, &class_names(k), baseline));
}

fn read_report(path: &Path) -> Result<MetricsReport, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// `Ok(false)` means the command ran but its check failed.
fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            gen_data(&cfg)?;
            emit("dataset", json!({"root": cfg.data.root, "spec": cfg.data.scene}));
        }
        Command::TrainSource(c) => {
            if let Some(r) = open(&c)?.train_source()? {
                table(&[&r], None);
                emit_report(&r)?;
            }
        }
        Command::TrainCda(c) => {
            if let Some(r) = open(&c)?.train_cda()? {
                table(&[&r], None);
                emit_report(&r)?;
            }
        }
        Command::SplitRegions(c) => {
            let (summary, telemetry, _) = open(&c)?.split_regions()?;
            emit("split", json!({"summary": summary, "telemetry": telemetry}));
        }
        Command::TrainCra(c) => {
            if let Some(r) = open(&c)?.train_variant(Variant::Cra)? {
                table(&[&r], None);
                emit_report(&r)?;
            }
        }
        Command::Eval { common, stage, against } => {
            let (stage, name) = stage.stage();
            let report = open(&common)?.evaluate_stage(stage, name)?;
            match against {
                Some(path) => {
                    let base = read_report(&path)?;
                    table(&[&base, &report], Some(&base));
                }
                None => table(&[&report], None),
            }
            emit_report(&report)?;
        }
        Command::Pipeline(c) => {
            if let Some(r) = run_pipeline(&load_config(&c)?, control(&c))? {
                let rows: Vec<&MetricsReport> = r.stages.iter().collect();
                table(&rows, r.stages.first());
                emit("pipeline", serde_json::to_value(&r)?);
            }
        }
        Command::CompareBaselines(c) => {
            if let Some(r) = run_comparison(&load_config(&c)?, control(&c))? {
                let rows: Vec<&MetricsReport> = r.rows.iter().collect();
                table(&rows, r.rows.first());
                emit("comparison", serde_json::to_value(&r)?);
            }
        }
        Command::GradCheck { seeds } => {
            let checks = check_losses(seeds)?;
            let ok = checks.iter().all(|c| c.passed());
            for c in &checks {
                eprintln!(
                    "{:<28} max rel error {:.3e}  {}",
                    c.name,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            emit("grad-check", json!({"tolerance": GRAD_TOLERANCE, "passed": ok, "checks": checks}));
            return Ok(ok);
        }
    }
    Ok(true)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::MissingPrerequisite => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Io => 5,
        ErrorKind::Other => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let code = exit_code(e.kind());
            println!(
                "{}",
                json!({"event": "error", "error": {"kind": format!("{:?}", e.kind()), "message": e.to_string(), "exit_code": code}})
            );
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
