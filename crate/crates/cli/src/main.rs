//! Single entry point for the laboratory: data generation, training,
//! fine-tuning, passkey evaluation, balance-gate analysis, and checkpoint
//! inspection. Execution is single-threaded and fully seeded, so repeating
//! a command with the same flags reproduces its artifacts byte for byte.
//!
//! Commands that define a run (generate-data, train, finetune) echo the
//! effective config into `<run-dir>/config.resolved`; read-only commands
//! leave it alone and only add files under `results/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use infinilab_core::checkpoint;
use infinilab_core::data::{self, GRID_DEPTHS};
use infinilab_core::eval;
use infinilab_core::telemetry::{self, BalanceSnapshot};
use infinilab_core::train::{load_train_state, train_loop, RunConfig, Start, TaskKind};
use infinilab_core::{Dtype, Error, Result};

#[derive(Parser)]
#[command(
    name = "infinilab",
    version,
    about = "Desk-scale laboratory for compressive-memory attention",
    after_help = config_reference()
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Preset name (desk_pretrain, desk_baseline_pretrain, desk_finetune,
    /// desk_baseline_finetune, reference_pretrain) or a TOML file giving
    /// every field; a run's config.resolved works as-is. Defaults to
    /// desk_pretrain, except finetune which defaults to desk_finetune.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,

    /// Run directory: receives config.resolved, telemetry.csv, checkpoints/
    /// and results/. Created if missing.
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,

    /// Replace run.seed. Applied after every --override, so it wins.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Accepted so pipelines can state the requirement explicitly; runs are
    /// deterministic whether or not the flag is present.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Edit one config field by dotted key, e.g. model.d_model=64 or
    /// run.finetune_contexts=[64,128]. Repeatable, applied in order; keys
    /// are listed at the bottom of --help. Unquoted values that are not
    /// valid TOML are taken as strings (run.task=finetune works).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the pretraining corpus and a passkey grid as JSONL under data/.
    GenerateData {
        /// Grid preset (desk, reference) or comma-separated context lengths.
        #[arg(long, default_value = "desk")]
        grid: String,
        #[arg(long, default_value_t = 10)]
        samples_per_cell: usize,
    },
    /// Pretrain from scratch, or continue an interrupted run.
    Train {
        /// Checkpoint holding the full train state to continue from.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Fine-tune pretrained weights on passkey samples with masked answers.
    Finetune {
        /// Checkpoint supplying the starting weights; the optimizer and the
        /// step counter start fresh.
        #[arg(
            long,
            value_name = "CKPT",
            required_unless_present = "resume",
            conflicts_with = "resume"
        )]
        from: Option<PathBuf>,
        /// Continue an interrupted fine-tune (full state, not just weights).
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score passkey retrieval over a context-length x depth grid.
    EvalPasskey {
        /// Defaults to <run-dir>/checkpoints/latest.ckpt.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Grid preset (desk, reference) or comma-separated context lengths.
        #[arg(long, default_value = "desk")]
        grid: String,
        #[arg(long, default_value_t = 10)]
        samples_per_cell: usize,
        /// Defaults to <run-dir>/results/passkey_grid.csv.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Export balance-gate reports from a checkpoint into results/balance/.
    AnalyzeBalance {
        /// Defaults to <run-dir>/checkpoints/latest.ckpt.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Histogram bin count over [0, 1].
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// A head counts as memory-preferring when alpha exceeds this.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Print a checkpoint's config, parameter count and tensor shapes.
    InspectCheckpoint { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::GenerateData { grid, samples_per_cell } => {
            cmd_generate_data(cli, grid, *samples_per_cell)
        }
        Cmd::Train { resume } => cmd_train(cli, resume.as_deref()),
        Cmd::Finetune { from, resume } => cmd_finetune(cli, from.as_deref(), resume.as_deref()),
        Cmd::EvalPasskey { checkpoint, grid, samples_per_cell, out } => {
            cmd_eval_passkey(cli, checkpoint.as_deref(), grid, *samples_per_cell, out.as_deref())
        }
        Cmd::AnalyzeBalance { checkpoint, bins, threshold } => {
            cmd_analyze_balance(cli, checkpoint.as_deref(), *bins, *threshold)
        }
        Cmd::InspectCheckpoint { path } => cmd_inspect_checkpoint(path),
    }
}

// ---------------------------------------------------------------------------
// Config resolution

fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "desk_pretrain" => Some(RunConfig::desk_pretrain()),
        "desk_baseline_pretrain" => Some(RunConfig::desk_baseline_pretrain()),
        "desk_finetune" => Some(RunConfig::desk_finetune()),
        "desk_baseline_finetune" => Some(RunConfig::desk_baseline_finetune()),
        "reference_pretrain" => Some(RunConfig::reference_pretrain()),
        _ => None,
    }
}

fn base_value(spec: &str) -> Result<toml::Value> {
    if let Some(cfg) = preset(spec) {
        return Ok(toml::Value::try_from(cfg).expect("preset config serializes"));
    }
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::Config(format!("cannot read config `{spec}`: {e}")))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("config `{spec}`: {e}")))
}

/// Base config (preset or file), then --override edits in order, then --seed.
fn resolve_config(cli: &Cli, default_preset: &str) -> Result<RunConfig> {
    let spec = cli.config.as_deref().unwrap_or(default_preset);
    let mut value = base_value(spec)?;
    for entry in &cli.overrides {
        apply_override(&mut value, entry)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut value, &format!("run.seed={seed}"))?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config `{spec}`: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{entry}` is not KEY=VALUE")))?;
    let unknown = || Error::Config(format!("unknown config field `{key}`"));

    let parts: Vec<&str> = key.split('.').collect();
    let mut node = &mut *root;
    for part in &parts[..parts.len() - 1] {
        node = node.get_mut(part).ok_or_else(unknown)?;
    }
    let table = node.as_table_mut().ok_or_else(unknown)?;
    let leaf = *parts.last().expect("split yields at least one part");
    if !table.contains_key(leaf) {
        return Err(unknown());
    }
    table.insert(leaf.to_string(), parse_value(raw));
    Ok(())
}

/// `raw` as a TOML value if it parses as one (ints, floats, bools, arrays),
/// otherwise as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Every config field as a dotted --override key, straight from the default
/// config's serialization so the list cannot drift from the code.
fn config_reference() -> String {
    let value =
        toml::Value::try_from(RunConfig::desk_pretrain()).expect("default config serializes");
    let mut lines =
        vec!["Config fields (dotted --override keys; desk_pretrain defaults):".to_string()];
    flatten_fields("", &value, &mut lines);
    lines.push(String::new());
    lines.push("model.attention.* must stay consistent with model.*; mismatches are".to_string());
    lines.push("rejected with the offending field named.".to_string());
    lines.join("\n")
}

fn flatten_fields(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(table) => {
            for (k, child) in table {
                let key =
                    if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_fields(&key, child, out);
            }
        }
        leaf => out.push(format!("  {prefix} = {leaf}")),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn require_run_dir(cli: &Cli) -> Result<&Path> {
    cli.run_dir
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --run-dir".into()))
}

/// Create the run layout and echo the effective config for provenance.
fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("results"))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
    fs::write(dir.join("config.resolved"), text)?;
    Ok(())
}

fn default_checkpoint(cli: &Cli, explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => Ok(require_run_dir(cli)?.join("checkpoints/latest.ckpt")),
    }
}

fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    match spec {
        "desk" => Ok(data::grid_lengths(64)),
        "reference" => Ok(data::grid_lengths(1024)),
        _ => spec
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "grid `{spec}`: expected desk, reference, or comma-separated lengths"
                    ))
                })
            })
            .collect(),
    }
}

fn expect_task(cfg: &RunConfig, want: TaskKind, cmd: &str) -> Result<()> {
    if cfg.run.task != want {
        return Err(Error::Config(format!(
            "{cmd} needs run.task = \"{}\", config says \"{}\"",
            want.name(),
            cfg.run.task.name()
        )));
    }
    Ok(())
}

/// Run the loop; a divergence additionally leaves a diagnostic file next to
/// the checkpoints so the failure survives the terminal scrollback.
fn run_training(cfg: &RunConfig, dir: &Path, start: Start) -> Result<()> {
    match train_loop(cfg, dir, start) {
        Ok(out) => {
            match out.losses.last() {
                Some(loss) => println!("finished at step {} with loss {:.4}", out.final_step, loss),
                None => println!("finished at step {} (no steps executed)", out.final_step),
            }
            if let Some(ckpt) = &out.last_checkpoint {
                println!("checkpoint {}", ckpt.display());
            }
            Ok(())
        }
        Err(Error::Diverged { step, msg }) => {
            let dump = dir.join("results/divergence.txt");
            let latest = dir.join("checkpoints/latest.ckpt");
            let mut report = format!("training aborted at step {step}: {msg}\n");
            if latest.exists() {
                report.push_str(&format!("last good state: {}\n", latest.display()));
            }
            report.push_str("effective config: config.resolved\n");
            fs::write(&dump, report)?;
            eprintln!("diagnostics written to {}", dump.display());
            Err(Error::Diverged { step, msg })
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_generate_data(cli: &Cli, grid: &str, samples_per_cell: usize) -> Result<()> {
    let cfg = resolve_config(cli, "desk_pretrain")?;
    let dir = require_run_dir(cli)?;
    prepare_run_dir(dir, &cfg)?;
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir)?;

    let docs = data::generate_corpus(&cfg.data, cfg.run.seed)?;
    let corpus_path = data_dir.join("corpus.jsonl");
    data::write_jsonl(&corpus_path, &docs)?;
    println!("wrote {} documents to {}", docs.len(), corpus_path.display());

    let lengths = parse_grid(grid)?;
    let samples =
        data::make_eval_grid(&lengths, &GRID_DEPTHS, samples_per_cell, cfg.run.key_digits, cfg.run.seed)?;
    let grid_path = data_dir.join("passkey.jsonl");
    data::write_jsonl(&grid_path, &samples)?;
    println!(
        "wrote {} passkey samples ({} lengths x {} depths x {}) to {}",
        samples.len(),
        lengths.len(),
        GRID_DEPTHS.len(),
        samples_per_cell,
        grid_path.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, resume: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(cli, "desk_pretrain")?;
    expect_task(&cfg, TaskKind::Pretrain, "train")?;
    let dir = require_run_dir(cli)?;
    prepare_run_dir(dir, &cfg)?;
    let start = match resume {
        Some(p) => Start::Resume(p),
        None => Start::Fresh,
    };
    run_training(&cfg, dir, start)
}

fn cmd_finetune(cli: &Cli, from: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(cli, "desk_finetune")?;
    expect_task(&cfg, TaskKind::Finetune, "finetune")?;
    let dir = require_run_dir(cli)?;
    prepare_run_dir(dir, &cfg)?;
    let start = match (resume, from) {
        (Some(p), _) => Start::Resume(p),
        (None, Some(p)) => Start::FromWeights(p),
        (None, None) => unreachable!("clap enforces --from unless --resume"),
    };
    run_training(&cfg, dir, start)
}

fn cmd_eval_passkey(
    cli: &Cli,
    ckpt: Option<&Path>,
    grid: &str,
    samples_per_cell: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(cli, "desk_pretrain")?;
    let dir = require_run_dir(cli)?;
    fs::create_dir_all(dir.join("results"))?;
    let ckpt = default_checkpoint(cli, ckpt)?;
    // The checkpoint's own config drives the forward pass; the run config
    // only contributes the eval seed and key width.
    let (model_cfg, weights, _) = load_train_state::<f32>(&ckpt)?;

    let lengths = parse_grid(grid)?;
    let samples =
        data::make_eval_grid(&lengths, &GRID_DEPTHS, samples_per_cell, cfg.run.key_digits, cfg.run.seed)?;
    let cells = eval::run_grid(&weights, &model_cfg, &samples)?;

    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => dir.join("results/passkey_grid.csv"),
    };
    fs::write(&out_path, eval::grid_to_csv(&cells))?;

    println!("{:>8} {:>6} {:>9} {:>4}", "context", "depth", "accuracy", "n");
    for c in &cells {
        println!("{:>8} {:>6.2} {:>9.2} {:>4}", c.context_length, c.depth, c.accuracy, c.n);
    }
    let mean = eval::mean_accuracy_where(&cells, |_| true).unwrap_or(0.0);
    println!("mean accuracy {:.3} over {} cells", mean, cells.len());
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_analyze_balance(
    cli: &Cli,
    ckpt: Option<&Path>,
    bins: usize,
    threshold: f64,
) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("--bins must be positive".into()));
    }
    let dir = require_run_dir(cli)?;
    let out_dir = dir.join("results/balance");
    fs::create_dir_all(&out_dir)?;
    let ckpt = default_checkpoint(cli, ckpt)?;
    let (_, weights, opt) = load_train_state::<f32>(&ckpt)?;
    let snap = BalanceSnapshot::from_gate_raws(opt.step, &weights.gate_raws());

    fs::write(out_dir.join("heatmap.csv"), telemetry::alpha_heatmap_export(&snap))?;

    let mut hist = String::from("bin_start,bin_end,count\n");
    for (i, count) in telemetry::alpha_histogram(&snap, bins).iter().enumerate() {
        let lo = i as f64 / bins as f64;
        let hi = (i + 1) as f64 / bins as f64;
        hist.push_str(&format!("{lo},{hi},{count}\n"));
    }
    fs::write(out_dir.join("histogram.csv"), hist)?;

    let heads = snap.heads();
    let mut pref = String::from("layer,memory_heads,heads,fraction\n");
    for (layer, count) in telemetry::layer_memory_preference(&snap, threshold).iter().enumerate() {
        pref.push_str(&format!("{layer},{count},{heads},{}\n", *count as f64 / heads as f64));
    }
    fs::write(out_dir.join("preference.csv"), pref)?;

    // Training history, when the checkpoint sits in a run directory.
    let alpha_log = dir.join("alpha.csv");
    if alpha_log.exists() {
        let mut traj = String::from("step,mean_alpha\n");
        for s in telemetry::read_alpha_log(&alpha_log)? {
            traj.push_str(&format!("{},{}\n", s.step, telemetry::mean_alpha(&s)));
        }
        fs::write(out_dir.join("trajectory.csv"), traj)?;
    }

    println!(
        "mean alpha {:.4} over {} layers x {} heads at step {}",
        telemetry::mean_alpha(&snap),
        snap.layers(),
        heads,
        snap.step
    );
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_inspect_checkpoint(path: &Path) -> Result<()> {
    let summary = checkpoint::inspect(path)?;
    println!("version: {}", summary.version);
    if let Some(step) = summary.meta.get("step").and_then(|v| v.as_u64()) {
        println!("step: {step}");
    }
    if let Some(task) = summary.meta.get("task").and_then(|v| v.as_str()) {
        println!("task: {task}");
    }
    let c = &summary.config;
    println!("layers: {}", c.layers);
    println!("d_model: {}", c.d_model);
    println!("d_ff: {}", c.d_ff);
    println!("heads: {}", c.heads);
    println!("vocab_size: {}", c.vocab_size);
    println!("max_context: {}", c.max_context);
    println!("segment_length: {}", c.attention.segment_length);
    println!("memory_enabled: {}", c.attention.memory_enabled);
    println!("parameters: {}", summary.total_params);
    println!("tensors: {}", summary.tensors.len());
    for t in &summary.tensors {
        let dtype = match t.dtype {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        };
        println!("  {:<32} {:?} {}", t.name, t.shape, dtype);
    }
    Ok(())
}
