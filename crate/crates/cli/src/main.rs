//! `sda` — operator surface for the self-domain adaptation toolkit.
//!
//! Subcommands mirror the pipeline: generate data, meta-train, test-time
//! adapt, evaluate, run the leave-one-domain-out protocol, and render
//! reports. Exit codes: 0 success, 2 configuration error, 3 numeric
//! failure, 4 missing input.

mod config;
mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sda_core::datagen::{make_domains, read_batches, sample_batch, write_batches, DomainBatch};
use sda_core::eval::{
    evaluate, read_protocol, run_protocol, write_protocol, write_roc_csv, ProtocolConfig, ScoredSet,
};
use sda_core::metatrain::{train, write_trace, TrainError, TrainedModel};
use sda_core::model::{load_manifest, save_manifest};
use sda_core::ttadapt::{adapt, predict, write_report, BaselineMode};

use config::RunConfig;

const EXIT_CONFIG: i32 = 2;
const EXIT_NUMERIC: i32 = 3;
const EXIT_MISSING: i32 = 4;

enum AppError {
    Config(String),
    Numeric(String),
    Missing(String),
}

impl AppError {
    fn exit(self) -> ! {
        let (code, tag, msg) = match self {
            AppError::Config(m) => (EXIT_CONFIG, "configuration error", m),
            AppError::Numeric(m) => (EXIT_NUMERIC, "numeric failure", m),
            AppError::Missing(m) => (EXIT_MISSING, "missing input", m),
        };
        eprintln!("sda: {tag}: {msg}");
        std::process::exit(code);
    }
}

type AppResult<T> = Result<T, AppError>;

fn io_missing<T>(path: &Path, r: std::io::Result<T>) -> AppResult<T> {
    r.map_err(|e| AppError::Missing(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(name = "sda", version, about = "Self-domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to a key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set iterations=100 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write one data file per synthetic domain.
    Generate(CommonArgs),
    /// Meta-train on the configured source domains.
    Train(CommonArgs),
    /// Test-time adapt a trained model on unlabeled target data.
    Adapt {
        model: PathBuf,
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a model manifest on a labeled data file.
    Eval {
        model: PathBuf,
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Leave-one-domain-out protocol over variants × seeds.
    Protocol(CommonArgs),
    /// Render the summary table and ROC plots from a protocol result.
    Report { dir: PathBuf },
}

fn load_config(common: &CommonArgs) -> AppResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = io_missing(path, std::fs::read_to_string(path))?;
            RunConfig::parse(&text).map_err(AppError::Config)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.apply(k.trim(), v).map_err(AppError::Config)?;
    }
    Ok(cfg)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    config_digest: u64,
    code_version: String,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_run_manifest(
    out_dir: &Path,
    cfg: &RunConfig,
    started: u64,
    artifacts: &[PathBuf],
) -> AppResult<()> {
    for a in artifacts {
        if !a.exists() {
            return Err(AppError::Numeric(format!(
                "artifact {} missing at run completion",
                a.display()
            )));
        }
    }
    let manifest = RunManifest {
        config_digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now_unix(),
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io_missing(&path, std::fs::write(&path, text + "\n"))
}

fn ensure_out_dir(cfg: &RunConfig) -> AppResult<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    io_missing(&dir, std::fs::create_dir_all(&dir))?;
    Ok(dir)
}

fn cmd_generate(cfg: &RunConfig) -> AppResult<()> {
    let started = now_unix();
    let out = ensure_out_dir(cfg)?;
    let domains = make_domains(cfg.domains, cfg.domain_seed)
        .map_err(|e| AppError::Config(e.to_string()))?;
    let mut artifacts = Vec::new();
    for d in &domains {
        let batch = sample_batch(d, cfg.eval_samples, cfg.seed);
        let path = out.join(format!("data_d{}.txt", d.id));
        let mut buf = Vec::new();
        write_batches(&mut buf, std::slice::from_ref(&batch))
            .map_err(|e| AppError::Numeric(e.to_string()))?;
        io_missing(&path, std::fs::write(&path, buf))?;
        artifacts.push(path);
    }
    write_run_manifest(&out, cfg, started, &artifacts)?;
    println!("wrote {} domain files to {}", domains.len(), out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig) -> AppResult<TrainedModel> {
    let meta = cfg.meta().map_err(AppError::Config)?;
    let domains = make_domains(cfg.domains, cfg.domain_seed)
        .map_err(|e| AppError::Config(e.to_string()))?;
    train(&meta, &domains).map_err(|e| match e {
        TrainError::NonFinite { iteration, ref trace } => AppError::Numeric(format!(
            "{e}\nlast trace: {}",
            serde_json::to_string(trace).unwrap_or_else(|_| format!("iteration {iteration}"))
        )),
        TrainError::Config(m) => AppError::Config(m),
        other => AppError::Config(other.to_string()),
    })
}

fn cmd_train(cfg: &RunConfig) -> AppResult<()> {
    let started = now_unix();
    let out = ensure_out_dir(cfg)?;
    let model = run_train(cfg)?;
    let model_path = out.join("model.txt");
    save_manifest(&model_path, &model.spec, &model.params)
        .map_err(|e| AppError::Numeric(e.to_string()))?;
    let trace_path = out.join("trace.jsonl");
    let mut buf = Vec::new();
    write_trace(&mut buf, &model.trace).map_err(|e| AppError::Numeric(e.to_string()))?;
    io_missing(&trace_path, std::fs::write(&trace_path, buf))?;
    write_run_manifest(&out, cfg, started, &[model_path.clone(), trace_path])?;
    println!(
        "trained {} iterations; model at {}",
        model.trace.len(),
        model_path.display()
    );
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig) -> AppResult<TrainedModel> {
    let (spec, params) = load_manifest(path).map_err(|e| AppError::Missing(format!("{}: {e}", path.display())))?;
    Ok(TrainedModel {
        spec,
        params,
        config: cfg.meta().map_err(AppError::Config)?,
        trace: Vec::new(),
        src_moments: None,
        bn_recal: None,
    })
}

fn load_data(path: &Path) -> AppResult<Vec<DomainBatch>> {
    let file = io_missing(path, std::fs::File::open(path))?;
    read_batches(std::io::BufReader::new(file)).map_err(|e| AppError::Missing(format!("{}: {e}", path.display())))
}

fn cmd_adapt(model_path: &Path, data_path: &Path, cfg: &RunConfig) -> AppResult<()> {
    let started = now_unix();
    let out = ensure_out_dir(cfg)?;
    let acfg = cfg.adapt().map_err(AppError::Config)?;
    if acfg.baseline == BaselineMode::BnStats {
        return Err(AppError::Config(
            "the bn_stats baseline needs source moments; run it through the protocol command".into(),
        ));
    }
    let model = load_model(model_path, cfg)?;
    let data = load_data(data_path)?;
    let batches: Vec<_> = data
        .iter()
        .flat_map(|b| {
            b.samples
                .chunks(acfg.batch_size.max(2))
                .map(|c| DomainBatch {
                    domain: b.domain,
                    samples: c.to_vec(),
                }.inputs())
                .collect::<Vec<_>>()
        })
        .collect();
    let (adapted, report) =
        adapt(&model, &batches, &acfg).map_err(|e| AppError::Numeric(e.to_string()))?;
    let adapted_path = out.join("model_adapted.txt");
    save_manifest(&adapted_path, &adapted.spec, &adapted.params)
        .map_err(|e| AppError::Numeric(e.to_string()))?;
    let report_path = out.join("adapt_report.json");
    let mut buf = Vec::new();
    write_report(&mut buf, &report).map_err(|e| AppError::Numeric(e.to_string()))?;
    io_missing(&report_path, std::fs::write(&report_path, buf))?;
    write_run_manifest(&out, cfg, started, &[adapted_path.clone(), report_path])?;
    println!(
        "adapted over {} batch steps (θ_A delta {:.3e}); model at {}",
        report.batches.len(),
        report.theta_a_delta_norm,
        adapted_path.display()
    );
    Ok(())
}

fn cmd_eval(model_path: &Path, data_path: &Path, cfg: &RunConfig) -> AppResult<()> {
    let started = now_unix();
    let out = ensure_out_dir(cfg)?;
    let model = load_model(model_path, cfg)?;
    let data = load_data(data_path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for batch in &data {
        let probs = predict(&model, &batch.inputs()).map_err(|e| AppError::Numeric(e.to_string()))?;
        scores.extend_from_slice(probs.data());
        labels.extend(batch.samples.iter().map(|s| s.y));
    }
    let scored = ScoredSet::new(scores, labels).map_err(|e| AppError::Numeric(e.to_string()))?;
    let report = evaluate(&scored);
    let eval_path = out.join("eval.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    io_missing(&eval_path, std::fs::write(&eval_path, text + "\n"))?;
    let roc_path = out.join("roc.csv");
    let mut buf = Vec::new();
    write_roc_csv(&mut buf, &report.roc).map_err(|e| AppError::Numeric(e.to_string()))?;
    io_missing(&roc_path, std::fs::write(&roc_path, buf))?;
    write_run_manifest(&out, cfg, started, &[eval_path, roc_path])?;
    println!(
        "HTER {:.2}% AUC {:.2}% (τ* = {:.4}, {} live / {} spoof)",
        report.hter * 100.0,
        report.auc * 100.0,
        report.eer_threshold,
        report.n_live,
        report.n_spoof
    );
    Ok(())
}

fn cmd_protocol(cfg: &RunConfig) -> AppResult<()> {
    let started = now_unix();
    let out = ensure_out_dir(cfg)?;
    let domains = make_domains(cfg.domains, cfg.domain_seed)
        .map_err(|e| AppError::Config(e.to_string()))?;
    let pcfg = ProtocolConfig {
        meta: cfg.meta().map_err(AppError::Config)?,
        adapt: cfg.adapt().map_err(AppError::Config)?,
        eval_samples: cfg.eval_samples,
    };
    let variants: Vec<&str> = cfg.variants.iter().map(|s| s.as_str()).collect();
    let result = run_protocol(&pcfg, &domains, &variants, &cfg.seeds)
        .map_err(|e| AppError::Config(e.to_string()))?;
    let failures: Vec<&sda_core::eval::ProtocolCell> =
        result.cells.iter().filter(|c| c.error.is_some()).collect();
    for f in &failures {
        eprintln!(
            "cell failed: task {} variant {} seed {}: {}",
            f.task,
            f.variant,
            f.seed,
            f.error.as_deref().unwrap_or("")
        );
    }
    let proto_path = out.join("protocol.json");
    let mut buf = Vec::new();
    write_protocol(&mut buf, &result).map_err(|e| AppError::Numeric(e.to_string()))?;
    io_missing(&proto_path, std::fs::write(&proto_path, buf))?;
    let table = result.summary_table();
    let summary_path = out.join("summary.txt");
    io_missing(&summary_path, std::fs::write(&summary_path, &table))?;
    write_run_manifest(&out, cfg, started, &[proto_path, summary_path])?;
    print!("{table}");
    Ok(())
}

fn cmd_report(dir: &Path) -> AppResult<()> {
    let proto_path = dir.join("protocol.json");
    let file = io_missing(&proto_path, std::fs::File::open(&proto_path))?;
    let result = read_protocol(file).map_err(|e| AppError::Missing(format!("{}: {e}", proto_path.display())))?;
    print!("{}", result.summary_table());
    // one ROC plot per task: first-seed curve per variant
    let mut tasks: Vec<usize> = result.cells.iter().map(|c| c.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    for t in tasks {
        let mut series = Vec::new();
        let mut seen = Vec::new();
        for c in result.cells.iter().filter(|c| c.task == t) {
            if seen.contains(&c.variant) {
                continue;
            }
            if let Some(r) = &c.report {
                seen.push(c.variant.clone());
                series.push((c.variant.clone(), r.roc.clone()));
            }
        }
        if series.is_empty() {
            eprintln!("task {t}: no successful cells, skipping plot");
            continue;
        }
        let svg = plot::roc_svg(&format!("ROC — held-out domain {t}"), &series);
        let path = dir.join(format!("roc_task{t}.svg"));
        io_missing(&path, std::fs::write(&path, svg))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Generate(common) => load_config(common).and_then(|cfg| cmd_generate(&cfg)),
        Cmd::Train(common) => load_config(common).and_then(|cfg| cmd_train(&cfg)),
        Cmd::Adapt { model, data, common } => {
            load_config(common).and_then(|cfg| cmd_adapt(model, data, &cfg))
        }
        Cmd::Eval { model, data, common } => {
            load_config(common).and_then(|cfg| cmd_eval(model, data, &cfg))
        }
        Cmd::Protocol(common) => load_config(common).and_then(|cfg| cmd_protocol(&cfg)),
        Cmd::Report { dir } => cmd_report(dir),
    };
    if let Err(e) = result {
        e.exit();
    }
}
