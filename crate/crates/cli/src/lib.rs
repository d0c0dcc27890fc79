//! `toolselect` command-line driver.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolselect::baselines::{train_records, Router, RouterKind};
use toolselect::checkpoint::{load_checkpoint, save_checkpoint};
use toolselect::domain::{AlignedPrediction, Panel, ToolId};
use toolselect::evalharness::{compare, render_report, PanelSize};
use toolselect::io::write_atomic;
use toolselect::selector::{select, SlotInput};
use toolselect::simworld::{generate_world, QueryRecord, SimWorld, Split};
use toolselect::trainer::{fit, sample_world_panel, EpochRecord};
use toolselect::{Error, Result};

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "selector.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Parser, Debug)]
#[command(name = "toolselect", version, about = "Route queries to specialist tools with a learned selector")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a world and export its splits and tools.
    Simulate,
    /// Train a selector; writes a checkpoint and the epoch log.
    Train,
    /// Evaluate routers on paired panels and write a report.
    Eval {
        /// Selector checkpoint; defaults to `<out>/selector.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Route one query record read from a file or standard input.
    Route {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// File holding one query record; standard input when omitted.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Comma-separated tool ids; sampled from the task population when omitted.
        #[arg(long, value_delimiter = ',')]
        panel: Option<Vec<usize>>,
    },
}

/// Runs the CLI with `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let rendered = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{rendered}") } else { write!(stderr, "{rendered}") };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn load_config(global: &Global) -> Result<RunConfig> {
    match &global.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

pub fn build_world(cfg: &RunConfig, seed: u64) -> Result<SimWorld> {
    generate_world(&cfg.world, seed)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    fs::create_dir_all(&g.out)?;
    match cli.command {
        Command::Simulate => simulate(&cfg, g.seed, &g.out, out),
        Command::Train => train(&cfg, g.seed, &g.out, out),
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| g.out.join(CHECKPOINT_FILE));
            eval(&cfg, g.seed, &g.out, &ckpt, out)
        }
        Command::Route { checkpoint, input, panel } => {
            let ckpt = checkpoint.unwrap_or_else(|| g.out.join(CHECKPOINT_FILE));
            let mut text = String::new();
            match input {
                Some(p) => text = fs::read_to_string(p)?,
                None => {
                    std::io::stdin().read_to_string(&mut text)?;
                }
            }
            route(&cfg, g.seed, &ckpt, &text, panel, out)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

pub fn simulate(cfg: &RunConfig, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let w = build_world(cfg, seed)?;
    for split in Split::ALL {
        let p = dir.join(format!("{}.ndjson", split.name()));
        w.export_dataset(split, &p)?;
        writeln!(out, "wrote {} ({} queries)", p.display(), w.split(split).len()).map_err(io_err)?;
    }
    let p = dir.join("tools.ndjson");
    w.export_tools(&p)?;
    writeln!(out, "wrote {} ({} tools)", p.display(), w.tools.len()).map_err(io_err)?;
    writeln!(out, "world_digest={}", w.digest()).map_err(io_err)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let w = build_world(cfg, seed)?;
    let mut log = String::new();
    let mut write_err = None;
    let r = fit(&cfg.train, &cfg.selector_for(&w), &w, seed, |e: &EpochRecord| {
        let line = e.log_line();
        if let Err(err) = writeln!(out, "{line}") {
            write_err.get_or_insert(err);
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    write_atomic(&dir.join(TRAIN_LOG_FILE), log.as_bytes())?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&r.params, &ckpt)?;
    writeln!(out, "best_epoch={} checkpoint={}", r.best_epoch, ckpt.display()).map_err(io_err)?;
    Ok(())
}

/// Fits or loads every router named in the config, in config order.
pub fn routers(cfg: &RunConfig, world: &SimWorld, seed: u64, checkpoint: &Path) -> Result<Vec<(String, Router)>> {
    let mut records = None;
    let mut out = Vec::new();
    for name in &cfg.eval.routers {
        let kind: RouterKind = name.parse()?;
        let r = match kind {
            RouterKind::ToolSelect => Router::ToolSelect(load_checkpoint(checkpoint, &cfg.selector_for(world))?),
            RouterKind::Random | RouterKind::Oracle => Router::fit(kind, &[], &cfg.baseline, seed)?,
            _ => {
                if records.is_none() {
                    records = Some(train_records(world, Split::Train)?);
                }
                Router::fit(kind, records.as_deref().unwrap_or(&[]), &cfg.baseline, seed)?
            }
        };
        out.push((kind.name().to_string(), r));
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, seed: u64, dir: &Path, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let trained = build_world(cfg, seed)?;
    let fitted = routers(cfg, &trained, seed, checkpoint)?;
    let world = if cfg.eval.fresh_tools > 0.0 { trained.with_fresh_tools(cfg.eval.fresh_tools, seed)? } else { trained };
    let split: Split = cfg.eval.split.parse()?;
    let size: PanelSize = cfg.eval.panel_size.parse()?;
    let refs: Vec<(&str, &Router)> = fitted.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let reports = compare(&refs, &world, split, size, seed)?;
    let text = render_report(&reports);
    write_atomic(&dir.join(REPORT_FILE), text.as_bytes())?;
    write!(out, "{text}").map_err(io_err)?;
    Ok(())
}

pub fn route(cfg: &RunConfig, seed: u64, checkpoint: &Path, input: &str, panel: Option<Vec<usize>>, out: &mut dyn Write) -> Result<()> {
    let w = build_world(cfg, seed)?;
    let line = input.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| Error::Parse { line: 1, msg: "no query record".into() })?;
    let record: QueryRecord = serde_json::from_str(line).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let lq = record.into_labeled()?;
    if lq.query.task.0 >= w.num_tasks() {
        return Err(Error::Contract(format!("query task {} not in this world", lq.query.task.0)));
    }
    let tools = match panel {
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|&&i| i >= w.tools.len()) {
                return Err(Error::Contract(format!("unknown tool id {bad}")));
            }
            Panel { task: lq.query.task, tools: ids.into_iter().map(ToolId).collect() }
        }
        None => {
            let m: usize = match cfg.eval.panel_size.parse()? {
                PanelSize::Sampled(m) => m,
                PanelSize::Full => w.population(lq.query.task).len().max(2),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lq.query.uid);
            sample_world_panel(&w, &lq.query, m, &mut rng)?
        }
    };
    let params = load_checkpoint(checkpoint, &cfg.selector_for(&w))?;
    let n = w.space(lq.query.task).size();
    let preds = tools
        .tools
        .iter()
        .map(|&id| if w.tool(id).tool.supports(lq.query.task) { w.predict(id, &lq) } else { Ok(AlignedPrediction::null(n)) })
        .collect::<Result<Vec<_>>>()?;
    let slots: Vec<SlotInput> = tools.tools.iter().zip(&preds).map(|(&id, p)| SlotInput { tool: &w.tool(id).tool, prediction: p }).collect();
    let d = select(&params, &lq.query, &slots)?;
    writeln!(out, "tool={} pi={}", tools.tools[d.selected].0, d.probs[d.selected]).map_err(io_err)?;
    let slots: Vec<String> = tools.tools.iter().zip(&d.probs).map(|(t, p)| format!("{}:{p}", t.0)).collect();
    writeln!(out, "panel={}", slots.join(",")).map_err(io_err)?;
    Ok(())
}
