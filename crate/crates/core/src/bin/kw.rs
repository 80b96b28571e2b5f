use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kernel_warehouse::attention::temperature;
use kernel_warehouse::checkpoint::{self, CheckpointError};
use kernel_warehouse::config::{Config, ConfigError};
use kernel_warehouse::manifest::{ManifestError, ModelManifest};
use kernel_warehouse::model::{build_model, ModelError, ModelGraph};
use kernel_warehouse::partition::PlanError;
use kernel_warehouse::report::{attention_csv, plan_report};
use kernel_warehouse::train::{collect_attention_stats, gen_synthetic, gradcheck, train, TrainError};
use kernel_warehouse::Exec;

#[derive(Parser)]
#[command(name = "kw", version, about = "Kernel warehouse planner and trainer")]
struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the partition plan and parameter breakdown.
    Plan {
        config: PathBuf,
        /// Print only the JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Train on the synthetic dataset and write a checkpoint.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-epoch metrics as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in f64.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Number of dataset items in the probe batch.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Coordinates checked per parameter slot.
        #[arg(long, default_value_t = 6)]
        per_slot: usize,
    },
    /// Write the mean attention of every warehouse as CSV.
    AttnDump {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the temperature at the checkpoint's step.
        #[arg(long)]
        tau: Option<f64>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

fn plan_failure(err: &PlanError, manifest: Option<&ModelManifest>) -> Failure {
    let mut msg = err.to_string();
    if let (PlanError::NonIntegralBudget { group, .. }, Some(m)) = (err, manifest) {
        let layers: Vec<&str> = m
            .layers
            .iter()
            .filter(|l| l.binding.to_string() == *group)
            .map(|l| l.id.as_str())
            .collect();
        msg.push_str(&format!("\nlayers in group `{group}`: {}", layers.join(", ")));
    }
    Failure::new(3, msg)
}

fn manifest_failure(err: ManifestError, manifest: &ModelManifest) -> Failure {
    match &err {
        ManifestError::Plan { source, .. } => plan_failure(source, Some(manifest)),
        _ => Failure::new(2, err.to_string()),
    }
}

impl From<ConfigError> for Failure {
    fn from(err: ConfigError) -> Self {
        match err {
            ConfigError::PresetBudget(e) => plan_failure(&e, None),
            e => Failure::new(2, e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::Manifest(ManifestError::Plan { .. }) => Failure::new(3, err.to_string()),
            ModelError::Manifest(_) => Failure::new(2, err.to_string()),
            e => Failure::new(1, e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Model(e) => e.into(),
            e => Failure::new(1, e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(err: CheckpointError) -> Self {
        let code = if matches!(err, CheckpointError::Topology { .. }) {
            4
        } else {
            1
        };
        Failure::new(code, err.to_string())
    }
}

fn io_failure(path: &Path, err: std::io::Error) -> Failure {
    Failure::new(1, format!("{}: {err}", path.display()))
}

fn load(path: &Path) -> Result<(Config, ModelManifest), Failure> {
    let cfg = Config::load(path)?;
    let manifest = cfg.manifest()?;
    manifest.validate().map_err(|e| manifest_failure(e, &manifest))?;
    Ok((cfg, manifest))
}

fn cmd_plan(config: &Path, json: bool) -> Result<(), Failure> {
    let (_, manifest) = load(config)?;
    let report = plan_report(&manifest).map_err(|e| manifest_failure(e, &manifest))?;
    let line = serde_json::to_string(&report).expect("report serializes");
    if json {
        println!("{line}");
    } else {
        println!("{report}");
        println!("{line}");
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
    metrics: Option<&Path>,
    exec: Exec,
) -> Result<(), Failure> {
    let (mut cfg, manifest) = load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let data = gen_synthetic::<f32>(&cfg.data)?;
    let mut graph: ModelGraph<f32> = build_model(&manifest, cfg.train.seed)?;
    let mut csv = String::from("epoch,loss,accuracy,tau\n");
    let stdout = std::io::stdout();
    train(&mut graph, &data, &cfg.train, exec, |m| {
        let _ = writeln!(stdout.lock(), "{m}");
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.loss, m.accuracy, m.tau));
    })?;
    let steps = cfg.train.steps_per_epoch(data.len()) * cfg.train.epochs as u64;
    checkpoint::save(out, &graph, steps)?;
    if let Some(p) = metrics {
        fs::write(p, csv).map_err(|e| io_failure(p, e))?;
    }
    Ok(())
}

fn cmd_gradcheck(
    config: &Path,
    eps: f64,
    tau: f64,
    threshold: f64,
    samples: usize,
    per_slot: usize,
) -> Result<(), Failure> {
    let (cfg, manifest) = load(config)?;
    let data = gen_synthetic::<f64>(&cfg.data)?;
    let graph: ModelGraph<f64> = build_model(&manifest, cfg.train.seed)?;
    let idx: Vec<usize> = (0..samples.clamp(1, data.len()))
        .map(|i| i * data.len() / samples.clamp(1, data.len()))
        .collect();
    let (x, y) = data.batch(&idx);
    let r = gradcheck(&graph, &x, &y, tau, eps, per_slot, cfg.train.seed)?;
    println!(
        "max_rel_err={:e} slot={} index={} checked={} skipped={}",
        r.max_rel_err, r.worst_slot, r.worst_index, r.checked, r.skipped
    );
    if r.max_rel_err >= threshold {
        return Err(Failure::new(
            1,
            format!("gradient check failed: {:e} >= {threshold:e}", r.max_rel_err),
        ));
    }
    Ok(())
}

fn cmd_attn_dump(ckpt: &Path, config: &Path, out: &Path, tau: Option<f64>, exec: Exec) -> Result<(), Failure> {
    let (cfg, manifest) = load(config)?;
    let mut graph: ModelGraph<f32> = build_model(&manifest, cfg.train.seed)?;
    let step = checkpoint::load(ckpt, &mut graph)?;
    let data = gen_synthetic::<f32>(&cfg.data)?;
    let tau = tau.unwrap_or_else(|| temperature(step, &cfg.train.schedule(data.len())));
    let stats = collect_attention_stats(&graph, &data, cfg.train.batch_size, tau, exec)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for s in &stats {
        let path = out.join(format!("{}.csv", s.group_id));
        fs::write(&path, attention_csv(s)).map_err(|e| io_failure(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let result = match &cli.cmd {
        Cmd::Plan { config, json } => cmd_plan(config, *json),
        Cmd::Train {
            config,
            seed,
            epochs,
            out,
            metrics,
        } => cmd_train(config, *seed, *epochs, out, metrics.as_deref(), exec),
        Cmd::Gradcheck {
            config,
            eps,
            tau,
            threshold,
            samples,
            per_slot,
        } => cmd_gradcheck(config, *eps, *tau, *threshold, *samples, *per_slot),
        Cmd::AttnDump {
            checkpoint,
            config,
            out,
            tau,
        } => cmd_attn_dump(checkpoint, config, out, *tau, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
