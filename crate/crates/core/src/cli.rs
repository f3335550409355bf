//! Command-line front end. Every subcommand owns its run directory through a
//! lock file for as long as it runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{delta_p, head_to_head, save_reports, segment_table, PowerReport};
use crate::persist::{write_atomic, write_json};
use crate::pipeline::{data_driven_comparison, load_state, run_baseline, save_iteration, BaselineReport, IterationRecord, RunStore};
use crate::rl::pretrain;

pub const RUNS_ROOT_ENV: &str = "POWERTUNE_RUNS_ROOT";

#[derive(Debug, Parser)]
#[command(name = "powertune", version, about = "Fine-tune a locomotion policy for measured battery power")]
pub struct Cli {
    /// Parent directory of run directories; overrides `runs_root` in the config.
    #[arg(long, global = true, env = RUNS_ROOT_ENV)]
    pub runs_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default configuration (to stdout without --out).
    InitConfig {
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train the pre-trained policy on simulator rewards only.
    Pretrain {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "default")]
        run: String,
    },
    /// Run the outer loop until N iterations exist in the run.
    Iterate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "default")]
        run: String,
        /// Total iterations; defaults to the config's loop.iterations.
        #[arg(long, short = 'n')]
        iterations: Option<usize>,
    },
    /// Head-to-head a saved policy against the pre-trained one.
    Evaluate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "default")]
        run: String,
        /// Policy id, or `best` for the latest best.
        #[arg(long)]
        policy: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.8, 1.1])]
        commands: Vec<f64>,
    },
    /// Run the analytical-proxy baseline sweep and compare both proxies.
    CompareBaseline {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "default")]
        run: String,
    },
    /// Print the iteration summary of a run.
    Report {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        run: String,
    },
}

/// Exit status for an error: 1 for usage or configuration, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::RejectedInput(_) => 1,
        _ => 2,
    }
}

/// Held for the lifetime of a command; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::rejected(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn validate_run_id(run: &str) -> Result<()> {
    if run.is_empty() || !run.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') || run.starts_with('.') {
        return Err(Error::rejected(format!("run id {run:?} must be [A-Za-z0-9._-] and not start with '.'")));
    }
    Ok(())
}

fn run_dir(cli_root: &Option<PathBuf>, cfg_root: Option<&Path>, run: &str) -> Result<PathBuf> {
    validate_run_id(run)?;
    let root = cli_root.clone().or_else(|| cfg_root.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("runs"));
    Ok(root.join(run))
}

/// Iteration summary: net ΔP at the evaluation command per iteration.
pub fn summary_table(records: &[IterationRecord]) -> String {
    let mut s = String::from("iteration\tbest\tnet_delta_p\tgross_delta_p\tnet_power\treal_steps\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.6}\t{}",
            r.iteration, r.best_id, r.best_net_delta_p, r.best_gross_delta_p, r.best_net_power, r.real_steps
        );
    }
    s
}

/// One row per command: gross and net ΔP against the pre-trained policy.
pub fn delta_table(rows: &[(f64, PowerReport, PowerReport)]) -> String {
    let mut s = String::from("command\tgross_delta_p\tnet_delta_p\tnet_power\tpretrained_net_power\tband_occupancy\n");
    let fmt = |x: Option<f64>| x.map_or("nan".to_string(), |v| format!("{v:.4}"));
    for (cmd, fine, pre) in rows {
        let d = |a: Option<f64>, b: Option<f64>| a.zip(b).and_then(|(a, b)| delta_p(a, b).ok());
        let _ = writeln!(
            s,
            "{cmd}\t{}\t{}\t{}\t{}\t{:.4}",
            fmt(d(pre.gross_power, fine.gross_power)),
            fmt(d(pre.net_power, fine.net_power)),
            fmt(fine.net_power),
            fmt(pre.net_power),
            fine.band_occupancy
        );
    }
    s
}

pub fn comparison_table(report: &BaselineReport, data_driven: &crate::metrics::ProxyComparison) -> String {
    let mut s = String::from("proxy\tpolicy\tpredicted\tmeasured\n");
    for c in [data_driven, &report.comparison] {
        for ((id, p), m) in c.policy_ids.iter().zip(&c.predicted).zip(&c.measured) {
            let _ = writeln!(s, "{}\t{id}\t{p:.6}\t{m:.6}", c.proxy);
        }
    }
    s
}

/// Parse arguments and run; the caller turns the result into an exit code.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let w = |out: &mut dyn std::io::Write, text: &str| out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e));
    match cli.command {
        Command::InitConfig { out: path, force } => {
            let text = RunConfig::default().to_toml()?;
            match path {
                Some(p) => {
                    if p.exists() && !force {
                        return Err(Error::rejected(format!("{} exists; pass --force to overwrite", p.display())));
                    }
                    write_atomic(&p, text.as_bytes())?;
                    w(out, &format!("{}\n", p.display()))
                }
                None => w(out, &text),
            }
        }
        Command::Pretrain { config, run } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir(&cli.runs_root, Some(&cfg.runs_root), &run)?;
            let _lock = RunLock::acquire(&dir)?;
            let store = RunStore::new(&dir);
            if store.pretrained_path().exists() {
                return Err(Error::rejected(format!("{} already has a pre-trained policy", dir.display())));
            }
            let (policy, stats) = pretrain(&cfg.env, &cfg.pretrain, cfg.seed)?;
            let mut jsonl = String::new();
            for s in &stats {
                jsonl.push_str(&serde_json::to_string(s).map_err(|e| Error::Numeric(e.to_string()))?);
                jsonl.push('\n');
            }
            write_atomic(&dir.join("pretrain_stats.jsonl"), jsonl.as_bytes())?;
            cfg.save(&dir.join("config.toml"))?;
            store.init(&policy, cfg.seed)?;
            w(out, &format!("{}\n", store.pretrained_path().display()))
        }
        Command::Iterate { config, run, iterations } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir(&cli.runs_root, Some(&cfg.runs_root), &run)?;
            let store = RunStore::new(&dir);
            if !store.pretrained_path().is_file() {
                return Err(Error::rejected(format!("no pre-trained policy in {}; run pretrain first", dir.display())));
            }
            let _lock = RunLock::acquire(&dir)?;
            let n = iterations.unwrap_or(cfg.pipeline.iterations);
            let pipeline = cfg.pipeline()?;
            let state = load_state(&store)?;
            pipeline.run(state, n, |next, output| {
                save_iteration(&store, next, output)?;
                let r = &output.record;
                eprintln!("iteration {}: best {} net dP {:.2}%", r.iteration, r.best_id, r.best_net_delta_p);
                Ok(())
            })?;
            let table = summary_table(&store.records()?);
            write_atomic(&dir.join("summary.tsv"), table.as_bytes())?;
            w(out, &table)
        }
        Command::Evaluate { config, run, policy, commands } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir(&cli.runs_root, Some(&cfg.runs_root), &run)?;
            let store = RunStore::new(&dir);
            if commands.is_empty() || commands.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::rejected("commands must be finite and >= 0"));
            }
            let _lock = RunLock::acquire(&dir)?;
            let fine = store.find_policy(&policy)?;
            let pre = store.find_policy("pretrained")?;
            let real = cfg.real();
            let lc = &cfg.pipeline;
            let mut rows = Vec::new();
            let mut reports = BTreeMap::new();
            for &cmd in &commands {
                let (a, b) = head_to_head(&real, &fine, &pre, cmd, lc.block_seconds, lc.total_seconds, 0)?;
                reports.insert(format!("{}@{cmd}", fine.id), a.clone());
                reports.insert(format!("{}@{cmd}:reference", pre.id), b.clone());
                rows.push((cmd, a, b));
            }
            let edir = dir.join("eval").join(&policy);
            let table = delta_table(&rows);
            write_atomic(&edir.join("table.tsv"), table.as_bytes())?;
            let fine_reports: Vec<&PowerReport> = rows.iter().map(|r| &r.1).collect();
            write_atomic(&edir.join("segments.tsv"), segment_table(&fine_reports).as_bytes())?;
            let pre_reports: Vec<&PowerReport> = rows.iter().map(|r| &r.2).collect();
            write_atomic(&edir.join("reference_segments.tsv"), segment_table(&pre_reports).as_bytes())?;
            save_reports(&edir.join("reports.json"), &reports)?;
            w(out, &table)
        }
        Command::CompareBaseline { config, run } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir(&cli.runs_root, Some(&cfg.runs_root), &run)?;
            let store = RunStore::new(&dir);
            let records = store.records()?;
            if records.len() < 2 {
                return Err(Error::rejected(format!("{} needs at least two completed iterations", dir.display())));
            }
            let _lock = RunLock::acquire(&dir)?;
            let pipeline = cfg.pipeline()?;
            let pre = store.find_policy("pretrained")?;
            let (report, policies) = run_baseline(&pipeline, &pre, &cfg.baseline, store.seed()?)?;
            let bdir = store.baseline_dir();
            for p in &policies {
                p.save(&bdir.join("candidates").join(format!("{}.ckpt", p.id)))?;
            }
            write_json(&bdir.join("report.json"), &report)?;
            let dd = data_driven_comparison(&records, 2);
            write_json(&bdir.join("data_driven.json"), &dd)?;
            write_atomic(&bdir.join("pairs.tsv"), comparison_table(&report, &dd).as_bytes())?;
            let pipeline_steps: usize = records.iter().map(|r| r.real_steps).sum();
            let last = records.last().expect("two records");
            let corr = |c: Option<f64>| c.map_or("nan".to_string(), |v| format!("{v:.4}"));
            let mut table = String::from("method\tbest\tnet_delta_p\treal_steps\tcorrelation\n");
            let _ = writeln!(
                table,
                "data-driven\t{}\t{:.4}\t{pipeline_steps}\t{}",
                last.best_id,
                last.best_net_delta_p,
                corr(dd.correlation)
            );
            let _ = writeln!(
                table,
                "analytical\t{}\t{:.4}\t{}\t{}",
                report.best_id,
                report.best_net_delta_p,
                report.real_steps,
                corr(report.comparison.correlation)
            );
            write_atomic(&bdir.join("summary.tsv"), table.as_bytes())?;
            w(out, &table)
        }
        Command::Report { config, run } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let dir = run_dir(&cli.runs_root, cfg.as_ref().map(|c| c.runs_root.as_path()), &run)?;
            let store = RunStore::new(&dir);
            if !store.pretrained_path().is_file() {
                return Err(Error::rejected(format!("{} is not a run directory", dir.display())));
            }
            w(out, &summary_table(&store.records()?))
        }
    }
}
