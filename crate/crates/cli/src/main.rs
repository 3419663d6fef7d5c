//! `tsdlab`: change-rate oracles, adapter training runs and ablation grids
//! from the command line.
//!
//! Exit status: 0 on success, 2 on usage, config or I/O errors, 3 when
//! training diverges.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tsdlab::adapters::{AdapterState, Method};
use tsdlab::config::{render_pairs, KvConfig};
use tsdlab::harness::{
    load_runs, run_matrix, spectrum_csv, spectrum_rows, train_method, write_report, write_runs,
    ExperimentConfig,
};
use tsdlab::metrics::{
    alignment, amplification, ground_truth_tsd, metrics_csv, pr_score, MetricsRow, K_PREC_REF,
    K_PRED, K_REC_REF,
};
use tsdlab::models::{gen_task, TaskSpec, TrainConfig};
use tsdlab::spectral::{change_rates, io, svd, top_k, DEFAULT_EPSILON};

#[derive(Parser)]
#[command(
    name = "tsdlab",
    version,
    about = "Task-specific direction experiments on planted tasks"
)]
struct Cli {
    /// Print nothing but errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print per-run details.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for every stochastic choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Change-rate spectrum of `w_star − w` against the singular directions of `w`.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Pretrained weight (TSDW or CSV).
        #[arg(long)]
        w: Option<PathBuf>,
        /// Target weight (TSDW or CSV).
        #[arg(long)]
        w_star: Option<PathBuf>,
        /// Stabilizer added to each singular value.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// One training run on a planted task.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Method and ablation grid over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a saved adapter state.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// State directory written by `train`.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Rebuild report files from stored runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory of run records; defaults to `<out>/runs`.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Verbosity {
    Quiet,
    Normal,
    Verbose,
}

struct Ctx {
    verbosity: Verbosity,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if self.verbosity >= Verbosity::Normal {
            println!("{}", msg.as_ref());
        }
    }

    fn detail(&self, msg: impl AsRef<str>) {
        if self.verbosity >= Verbosity::Verbose {
            println!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        verbosity: if cli.quiet {
            Verbosity::Quiet
        } else if cli.verbose {
            Verbosity::Verbose
        } else {
            Verbosity::Normal
        },
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(tsdlab::Error::Diverged { .. })));
            ExitCode::from(if diverged { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("TSDLAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("TSDLAB_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")
}

fn run(ctx: &Ctx, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Oracle {
            common,
            w,
            w_star,
            epsilon,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = w {
                cfg.set("w", w.display())?;
            }
            if let Some(w_star) = w_star {
                cfg.set("w_star", w_star.display())?;
            }
            if let Some(eps) = epsilon {
                cfg.set("epsilon", eps)?;
            }
            cmd_oracle(ctx, &cfg, &common.out)
        }
        Command::Train { common } => cmd_train(ctx, &load_config(&common)?, &common.out),
        Command::Ablate { common } => cmd_ablate(ctx, &load_config(&common)?, &common.out),
        Command::Analyze { common, state } => {
            let mut cfg = load_config(&common)?;
            if let Some(state) = state {
                cfg.set("state_dir", state.display())?;
            }
            cmd_analyze(ctx, &cfg, &common.out)
        }
        Command::Report { common, runs } => {
            let runs = runs.unwrap_or_else(|| common.out.join("runs"));
            cmd_report(ctx, &runs, &common.out)
        }
    }
}

/// File values, then `--set` overrides in order, then `--seed`.
fn load_config(common: &Common) -> anyhow::Result<KvConfig> {
    let mut cfg = match &common.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    for pair in &common.set {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed)?;
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_effective(out: &Path, pairs: Vec<(&str, String)>) -> anyhow::Result<()> {
    write(&out.join("effective_config.txt"), &render_pairs(pairs))
}

fn required_path(cfg: &KvConfig, key: &str) -> anyhow::Result<PathBuf> {
    match cfg.raw(key) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => bail!(
            "missing {key}: pass --{} or set {key}=PATH",
            key.replace('_', "-")
        ),
    }
}

fn cmd_oracle(ctx: &Ctx, cfg: &KvConfig, out: &Path) -> anyhow::Result<()> {
    let w_path = required_path(cfg, "w")?;
    let ws_path = required_path(cfg, "w_star")?;
    let epsilon = cfg.get_or("epsilon", DEFAULT_EPSILON)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        bail!("epsilon must be positive");
    }
    let w = io::read_matrix(&w_path)?;
    let w_star = io::read_matrix(&ws_path)?;
    w_star.check_shape(w.shape())?;
    let f = svd(&w)?;
    let cr = change_rates(&f, &w_star.sub(&w), epsilon)?;
    let rows = spectrum_rows(&f.sigma, &cr)?;

    create_out(out)?;
    write_effective(
        out,
        vec![
            ("w", w_path.display().to_string()),
            ("w_star", ws_path.display().to_string()),
            ("epsilon", epsilon.to_string()),
        ],
    )?;
    write(&out.join("spectrum.csv"), &spectrum_csv(&rows))?;
    let top: Vec<String> = cr
        .ranking
        .iter()
        .take(K_PRED)
        .map(|i| i.to_string())
        .collect();
    ctx.say(format!("top change rates: {}", top.join(" ")));
    Ok(())
}

fn train_settings(cfg: &KvConfig) -> anyhow::Result<(TaskSpec, TrainConfig, Method, String)> {
    let task = TaskSpec::from_config(cfg)?;
    let mut train = TrainConfig::from_config(cfg)?;
    train.seed = task.seed;
    let method: Method = cfg.get_or("method", Method::Lora)?;
    let mode = match method {
        Method::Init => cfg.raw("init_mode"),
        _ => cfg.raw("direction_mode"),
    }
    .unwrap_or("tsd")
    .to_string();
    Ok((task, train, method, mode))
}

fn cmd_train(ctx: &Ctx, cfg: &KvConfig, out: &Path) -> anyhow::Result<()> {
    let (spec, tc, method, mode) = train_settings(cfg)?;
    let mut pairs = spec.config_pairs();
    pairs.extend(tc.config_pairs());
    pairs.push(("method", method.name().to_string()));
    match method {
        Method::Lora => {}
        Method::Init => pairs.push(("init_mode", mode.clone())),
        _ => pairs.push(("direction_mode", mode.clone())),
    }

    let task = gen_task(&spec)?;
    create_out(out)?;
    write_effective(out, pairs)?;
    let trace = train_method(&task, &tc, method, &mode)?;

    trace.write_csv(&out.join("trace.csv"))?;
    trace.final_state.save(&out.join("state"))?;
    io::write_matrix(&out.join("w.tsdw"), &task.base_w)?;
    io::write_matrix(&out.join("w_star.tsdw"), &task.w_star)?;

    let truth = ground_truth_tsd(&task.base_w, &task.w_star, tc.epsilon)?;
    let rows = trace
        .ltsd_snapshots
        .iter()
        .map(|(step, snap)| {
            let pr = pr_score(snap, &truth, K_PREC_REF, K_REC_REF)?;
            Ok(MetricsRow {
                seed: tc.seed,
                step: *step,
                ..MetricsRow::default()
            }
            .with_pr(&pr))
        })
        .collect::<tsdlab::Result<Vec<_>>>()?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;

    ctx.say(format!(
        "{method}: final train loss {:.6e}, val loss {:.6e}",
        trace.final_train_loss, trace.final_val_loss
    ));
    if let Some(d) = &trace.final_state.dash {
        ctx.detail(format!("dash directions {:?}", d.indices));
    }
    if !trace.final_state.split_indices.is_empty() {
        ctx.detail(format!(
            "split directions {:?}",
            trace.final_state.split_indices
        ));
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, cfg: &KvConfig, out: &Path) -> anyhow::Result<()> {
    let mut exp_cfg = ExperimentConfig::from_config(cfg)?;
    exp_cfg.out_dir = out.to_path_buf();
    let cells = exp_cfg.cells().len();
    ctx.say(format!(
        "running {} cells × {} seeds",
        cells,
        exp_cfg.seeds.len()
    ));

    create_out(out)?;
    write_effective(out, exp_cfg.config_pairs())?;
    let exp = run_matrix(&exp_cfg)?;
    write_runs(&exp, &out.join("runs"))?;
    write_report(&exp, out)?;
    for rec in &exp.records {
        ctx.detail(format!(
            "{} val loss {:.6e}",
            rec.row.run_id(),
            rec.row.final_val_loss
        ));
    }
    ctx.say(format!(
        "wrote {} rows to {}",
        exp.records.len(),
        out.join("report.csv").display()
    ));
    Ok(())
}

/// Metrics of a saved state. `w` and `w_star` default to the files `train`
/// writes next to its state directory.
fn cmd_analyze(ctx: &Ctx, cfg: &KvConfig, out: &Path) -> anyhow::Result<()> {
    let state_dir = required_path(cfg, "state_dir")?;
    let parent = state_dir.parent().unwrap_or(Path::new(".")).to_path_buf();
    let w_path = cfg.raw("w").map_or(parent.join("w.tsdw"), PathBuf::from);
    let ws_path = cfg
        .raw("w_star")
        .map_or(parent.join("w_star.tsdw"), PathBuf::from);
    let epsilon = cfg.get_or("epsilon", DEFAULT_EPSILON)?;
    let seed = cfg.get_or("seed", 0u64)?;

    let state = AdapterState::load(&state_dir)?;
    let w = io::read_matrix(&w_path)?;
    let w_star = io::read_matrix(&ws_path)?;
    w.check_shape(state.shape())?;
    let truth = ground_truth_tsd(&w, &w_star, epsilon)?;
    let f = svd(&w)?;
    let delta = state.merged_weight().sub(&w);
    let dtsd = change_rates(&f, &delta, epsilon)?;

    let ltsd = top_k(&dtsd, K_PRED.min(dtsd.len()))?;
    let pr = pr_score(&ltsd, &truth, K_PREC_REF, K_REC_REF)?;
    let mut row = MetricsRow {
        seed,
        ..MetricsRow::default()
    }
    .with_pr(&pr);
    if let Some(dash) = &state.dash {
        row = row.with_alignment(&alignment(&dash.indices, &dtsd, &truth, dash.len())?);
        row = row.with_amp(&amplification(&w, &state)?);
    }

    create_out(out)?;
    write_effective(
        out,
        vec![
            ("state_dir", state_dir.display().to_string()),
            ("w", w_path.display().to_string()),
            ("w_star", ws_path.display().to_string()),
            ("epsilon", epsilon.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    write(
        &out.join("analysis.csv"),
        &metrics_csv(std::slice::from_ref(&row)),
    )?;
    write(
        &out.join("delta_spectrum.csv"),
        &spectrum_csv(&spectrum_rows(&f.sigma, &dtsd)?),
    )?;
    ctx.say(format!(
        "precision {:.3} recall {:.3}",
        pr.precision, pr.recall
    ));
    if let (Some(all), Some(ab), Some(dash)) = (row.amp_all, row.amp_ab, row.amp_dash) {
        ctx.say(format!(
            "amplification all {all:.4} ab {ab:.4} dash {dash:.4}"
        ));
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, runs: &Path, out: &Path) -> anyhow::Result<()> {
    let exp = load_runs(runs)?;
    create_out(out)?;
    write_effective(out, vec![("runs", runs.display().to_string())])?;
    write_report(&exp, out)?;
    ctx.say(format!(
        "wrote {} rows to {}",
        exp.records.len(),
        out.join("report.csv").display()
    ));
    Ok(())
}
