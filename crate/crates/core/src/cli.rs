//! Command-line front end for the `scn` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use crate::config::{parse_override, Preset, RunConfig};
use crate::data::{load_frame_dir, synth_generate};
use crate::error::{Error, Result};
use crate::eval::{ablation_table1, ablation_table2, window_sweep, EvalReport, GridReport};
use crate::model::ScnParams;
use crate::pipeline::{dump_templates, evaluate, load_splits, train_run, Splits};
use crate::train::load_checkpoint;
use crate::verify::{check_end_to_end, run_ops, tiny_config, CheckRow, OPS};

#[derive(Debug, Parser)]
#[command(
    name = "scn",
    version,
    about = "Sequential convolutional network for gait recognition"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// desk, casia-b or ou-mvlp.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic silhouette dataset into `data.root`.
    Synth(Overrides),
    /// Train on the train split and evaluate on the test split.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cross-view rank-1 evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference gradient checks of every operation and of the full
    /// network plus loss on a tiny configuration.
    Gradcheck {
        /// Check a single operation (`end_to_end` for the full network).
        #[arg(long)]
        op: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the motion templates of one sequence as PGM grids.
    DumpTemplates {
        /// Parameters to use; freshly initialized from the seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of silhouette frames.
        #[arg(long)]
        sequence: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and evaluate every cell of the ablation grids.
    Ablate(Overrides),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Dotted-key overrides such as `train.iterations=100`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::Synth(o) | Command::Ablate(o) => &o.overrides,
            Command::Train { overrides, .. }
            | Command::Eval { overrides, .. }
            | Command::Gradcheck { overrides, .. }
            | Command::DumpTemplates { overrides, .. } => &overrides.overrides,
        }
    }
}

/// Resolves the configuration layers for `cli`.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let preset = cli
        .common
        .preset
        .as_deref()
        .map(str::parse::<Preset>)
        .transpose()?;
    let overrides = cli
        .command
        .overrides()
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = RunConfig::resolve(
        preset,
        cli.common.config.as_deref(),
        cli.common.seed,
        cli.common.out.as_deref(),
        &overrides,
    )?;
    if let Command::Gradcheck { op: Some(op), .. } = &cli.command {
        cfg.gradcheck.op = op.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the parsed command and returns the process exit code: 0 on success,
/// 1 on a numeric or check failure, 2 on a configuration or input error.
pub fn run(cli: Cli) -> i32 {
    let outcome = resolve(&cli).and_then(|cfg| dispatch(&cli.command, cfg));
    match outcome {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command, cfg: RunConfig) -> Result<i32> {
    match command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Train { resume, .. } => cmd_train(&cfg, resume.as_deref()),
        Command::Eval { checkpoint, .. } => cmd_eval(cfg, checkpoint),
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg),
        Command::DumpTemplates {
            checkpoint,
            sequence,
            ..
        } => cmd_dump_templates(cfg, checkpoint.as_deref(), sequence),
        Command::Ablate(_) => cmd_ablate(&cfg),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<i32> {
    let root = &cfg.data.root;
    let summary = synth_generate(&cfg.synth, root)?;
    cfg.echo(root)?;
    println!(
        "wrote {} sequences ({} frames) to {}",
        summary.sequences,
        summary.frames,
        root.display()
    );
    Ok(0)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<i32> {
    cfg.echo(&cfg.out)?;
    let splits = load_splits(cfg)?;
    let outcome = train_run(cfg, &splits, &cfg.out, resume)?;
    if let Some(reason) = &outcome.summary.stop_reason {
        println!("stopped early: {reason}");
    }
    println!(
        "trained to step {} ({} steps in {:.1} s)",
        outcome.summary.final_step,
        outcome.summary.steps_run,
        outcome.summary.elapsed.as_secs_f64()
    );
    if let Some(report) = &outcome.report {
        cfg.echo(&cfg.out.join("eval"))?;
        print!("{}", report.summary_text());
    }
    Ok(0)
}

fn print_report(report: &EvalReport) {
    for c in &report.conditions {
        println!("{}", c.condition);
        print!("{}", report.condition_text(c));
    }
    print!("{}", report.summary_text());
}

pub fn cmd_eval(mut cfg: RunConfig, checkpoint: &Path) -> Result<i32> {
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!(
            "{} does not exist",
            checkpoint.display()
        )));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.params.config != cfg.model {
        info!(
            "using the model configuration stored in {}",
            checkpoint.display()
        );
        cfg.model = ckpt.params.config.clone();
    }
    let dir = cfg.out.join("eval");
    cfg.echo(&dir)?;
    let splits = load_splits(&cfg)?;
    let report = evaluate(
        &ckpt.params,
        &splits,
        cfg.eval.exclude_identical_view,
        cfg.eval.gallery_as_probe,
    )?;
    report.write(&dir)?;
    print_report(&report);
    let absent = report.absent();
    if absent > 0 {
        warn!("{absent} report cell(s) have no data");
        return Ok(1);
    }
    Ok(0)
}

fn gradcheck_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(9);
    let mut lines = vec![format!(
        "{:<width$} {:>12} {:>9} {:>8} {:>6} {:>9}  result",
        "operation", "max rel err", "tolerance", "checked", "kinks", "time (s)"
    )];
    for r in rows {
        lines.push(format!(
            "{:<width$} {:>12.3e} {:>9.0e} {:>8} {:>6} {:>9.2}  {}",
            r.name,
            r.report.max_rel_error,
            r.report.tol,
            r.report.checked,
            r.report.skipped_kinks,
            r.elapsed.as_secs_f64(),
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    lines.join("\n") + "\n"
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let g = &cfg.gradcheck;
    let start = Instant::now();
    let selected = g.op.trim();
    let all = selected.is_empty() || selected == "all";
    let mut rows = Vec::new();
    if all || selected != "end_to_end" {
        let ops: Vec<&str> = if all {
            OPS.to_vec()
        } else {
            selected.split(',').map(str::trim).collect()
        };
        rows.extend(run_ops(
            &ops,
            cfg.seed,
            g.op_tolerance,
            g.end_to_end_tolerance,
        )?);
    }
    if all || selected == "end_to_end" {
        let t = Instant::now();
        let report = check_end_to_end(&tiny_config(), cfg.seed, g.end_to_end_tolerance)?;
        rows.push(CheckRow {
            name: "end_to_end".into(),
            report,
            elapsed: t.elapsed(),
        });
    }
    let table = gradcheck_table(&rows);
    let dir = cfg.out.join("gradcheck");
    cfg.echo(&dir)?;
    std::fs::write(dir.join("gradcheck.txt"), &table)
        .map_err(|e| Error::io("writing gradcheck table", e))?;
    print!("{table}");
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} checks passed in {:.1} s",
        rows.len() - failed,
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if rows.iter().any(|r| !r.report.max_rel_error.is_finite()) {
        eprintln!("error: non-finite gradient error");
    }
    Ok(if failed > 0 { 1 } else { 0 })
}

pub fn cmd_dump_templates(
    mut cfg: RunConfig,
    checkpoint: Option<&Path>,
    sequence: &Path,
) -> Result<i32> {
    let params = match checkpoint {
        Some(path) => {
            let params = load_checkpoint(path)?.params;
            cfg.model = params.config.clone();
            params
        }
        None => ScnParams::init(&cfg.model, cfg.seed)?,
    };
    let seq = load_frame_dir(sequence, cfg.model.height, cfg.model.width)?;
    let written = dump_templates(&params, &seq.to_tensor(), &cfg.out)?;
    cfg.echo(&cfg.out)?;
    println!(
        "wrote {} template images under {}",
        written.len(),
        cfg.out.display()
    );
    Ok(0)
}

fn build_grid(cfg: &RunConfig, name: &str) -> GridReport {
    match name {
        "bie" => ablation_table1(&cfg.model),
        "mfa" => ablation_table2(&cfg.model),
        _ => window_sweep(&cfg.model, &cfg.ablate.windows),
    }
}

/// The window length with the best overall rank-1 (the shortest on ties), as
/// a report line.
pub fn window_summary(grid: &GridReport) -> Option<String> {
    let best = grid
        .rows
        .iter()
        .filter_map(|r| {
            Some((
                r.config.mfa.window,
                r.outcome.as_ref()?.as_ref().ok()?.overall_mean()?,
            ))
        })
        .fold(None, |best: Option<(usize, f64)>, (l, acc)| match best {
            Some((_, b)) if b >= acc => best,
            _ => Some((l, acc)),
        })?;
    Some(format!(
        "best window length L = {} (mean rank-1 {:.1}%)",
        best.0, best.1
    ))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<i32> {
    let dir = cfg.out.join("ablate");
    cfg.echo(&dir)?;
    let splits: Splits = load_splits(cfg)?;
    let mut failures = 0;
    for name in &cfg.ablate.tables {
        let mut grid = build_grid(cfg, name);
        grid.run(|i, model| {
            let mut row = cfg.clone();
            row.model = model.clone();
            let row_dir = dir.join(name).join(format!("row{:02}", i + 1));
            row.echo(&row_dir)?;
            train_run(&row, &splits, &row_dir, None)?
                .report
                .ok_or_else(|| Error::Config("the dataset has no gallery/probe split".into()))
        });
        failures += grid.failures();
        let mut text = grid.text();
        if name == "window" {
            if let Some(line) = window_summary(&grid) {
                text.push_str(&line);
                text.push('\n');
            }
        }
        let csv_path = dir.join(format!("{name}.csv"));
        std::fs::write(&csv_path, grid.csv())
            .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
        let txt_path = dir.join(format!("{name}.txt"));
        std::fs::write(&txt_path, &text)
            .map_err(|e| Error::io(format!("writing {}", txt_path.display()), e))?;
        println!("{name}");
        print!("{text}");
    }
    Ok(if failures > 0 { 1 } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_and_flags_resolve() {
        let cli = Cli::try_parse_from([
            "scn",
            "--preset",
            "casia-b",
            "train",
            "--seed",
            "9",
            "train.iterations=3",
            "mfa.window=5",
        ])
        .unwrap();
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.iterations, 3);
        assert_eq!(cfg.model.mfa.window, 5);
        assert_eq!((cfg.train.batch.p, cfg.train.batch.k), (8, 6));
    }

    #[test]
    fn gradcheck_op_flag_selects_one_operation() {
        let cli = Cli::try_parse_from(["scn", "gradcheck", "--op", "conv2d"]).unwrap();
        assert_eq!(resolve(&cli).unwrap().gradcheck.op, "conv2d");
    }

    #[test]
    fn unknown_keys_and_presets_are_configuration_errors() {
        let cli = Cli::try_parse_from(["scn", "synth", "synth.colour=3"]).unwrap();
        assert_eq!(resolve(&cli).unwrap_err().exit_code(), 2);
        let cli = Cli::try_parse_from(["scn", "--preset", "huge", "synth"]).unwrap();
        assert_eq!(resolve(&cli).unwrap_err().exit_code(), 2);
    }
}
