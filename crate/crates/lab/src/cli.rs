//! The `rlrs` subcommands.
//!
//! Exit codes: 0 success, 1 configuration error (including bad flags),
//! 2 divergence, 3 I/O error. `RLRS_LOG` sets the log filter
//! (e.g. `RLRS_LOG=info`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rlrs_core::metrics::{checkpoint_step, mean_curve, RunLog, SpeedupOutcome};
use rlrs_core::schedule::{preset, ComponentTag, ModelKind, RelativeRate};
use rlrs_core::search::{local_search, tune_base_lr, transfer, SearchMode, SearchOptions, SearchResult, SearchSpace, TuneResult};
use rlrs_core::trainer::{compare, CompareReport, Runner, TrainConfig, TrainError};
use serde_json::{json, Value};

use crate::config;
use crate::error::{LabError, Result};
use crate::export::{self, write, write_json};
use crate::runner::{LabObserver, LabRunner, TrainObjective};

#[derive(Debug, Parser)]
#[command(name = "rlrs", version, about = "Relative learning-rate schedule laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Rlrs,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Moe,
    Dense,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one config and write its curve CSV and metadata JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.init_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.data_seed`.
        #[arg(long)]
        data_seed: Option<u64>,
        /// Defaults to the config file name without extension.
        #[arg(long)]
        run_id: Option<String>,
        /// Also write wall-clock seconds per checkpoint to `<run_id>.timing.csv`.
        #[arg(long)]
        timing: bool,
        /// Save model and optimizer state to `<run_id>.ckpt` every N steps.
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<u64>,
    },
    /// Local search over relative rates (or baseline endpoints), weight decay
    /// and init scale.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Maximum number of distinct configurations evaluated.
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        /// Data seeds averaged per evaluation; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Evaluate the four factor trials of an entry together (parallel
        /// with --jobs); the search path is unchanged.
        #[arg(long)]
        batch_trials: bool,
    },
    /// Train a baseline and an RLRS config on matched seeds and report the speedup.
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rlrs: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        timing: bool,
    },
    /// Carry tuned relative rates to a larger model, re-tune the base LR of
    /// both arms over a grid and compare them.
    Extrapolate {
        /// Config holding the tuned small-model rates (e.g. `best.conf` from `tune`).
        #[arg(long)]
        small_result: PathBuf,
        /// Large-model baseline config.
        #[arg(long)]
        large_config: PathBuf,
        /// Base-LR exponents `n1..n2`; the grid is {1,2,5}·10^-n.
        #[arg(long)]
        grid: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Vary one relative multiplier and record final losses per value and seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        component: String,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the shipped relative rates as config lines.
    Presets {
        #[arg(long, value_enum)]
        kind: Kind,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rlrs: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, seed, data_seed, run_id, timing, checkpoint_every } => {
            train_cmd(&config, &out, seed, data_seed, run_id, timing, checkpoint_every)
        }
        Command::Tune { config, mode, budget, out, seeds, jobs, batch_trials } => {
            tune_cmd(&config, mode, budget, &out, seeds, jobs, batch_trials)
        }
        Command::Compare { base, rlrs, seeds, out, jobs, timing } => compare_cmd(&base, &rlrs, &seeds, &out, jobs, timing),
        Command::Extrapolate { small_result, large_config, grid, seeds, out, jobs } => {
            extrapolate_cmd(&small_result, &large_config, &grid, seeds, &out, jobs)
        }
        Command::Ablate { config, component, which, values, seeds, out, jobs } => {
            ablate_cmd(&config, &component, which, &values, seeds, &out, jobs)
        }
        Command::Presets { kind } => {
            let kind = match kind {
                Kind::Moe => ModelKind::Moe,
                Kind::Dense => ModelKind::Dense,
            };
            print!("# shipped relative rates, {kind} models\n{}", config::render_rates(&preset(kind)));
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn seeds_or_default(seeds: Vec<u64>, cfg: &TrainConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.data_seed]
    } else {
        seeds
    }
}

/// Exports a finished or diverged run and converts the outcome.
fn finish_run(result: std::result::Result<RunLog, TrainError>, out: &Path) -> Result<RunLog> {
    match result {
        Ok(log) => {
            export::export(&log, out, None)?;
            Ok(log)
        }
        Err(TrainError::Diverged(d)) => {
            export::export(&d.partial, out, Some(&d))?;
            Err(LabError::Diverged(d))
        }
        Err(TrainError::Failed(e)) => Err(e.into()),
    }
}

fn train_cmd(
    path: &Path,
    out: &Path,
    seed: Option<u64>,
    data_seed: Option<u64>,
    run_id: Option<String>,
    timing: bool,
    checkpoint_every: Option<u64>,
) -> Result<()> {
    let mut cfg = config::load(path)?;
    cfg.init_seed = seed.unwrap_or(cfg.init_seed);
    cfg.data_seed = data_seed.unwrap_or(cfg.data_seed);
    let run_id = run_id.unwrap_or_else(|| stem(path));
    create_dir(out)?;
    let runner = LabRunner::new(1);
    runner.preload([&cfg])?;
    let mut obs = LabObserver::new(&cfg, &run_id, timing);
    if let Some(n) = checkpoint_every {
        obs = obs.with_checkpoints(n, out.join(format!("{run_id}.ckpt")));
    }
    let result = runner.run_observed(&cfg, &run_id, &mut obs);
    if let Some(e) = obs.io_error.take() {
        return Err(e);
    }
    let log = finish_run(result, out)?;
    println!("{run_id}: final loss {}", log.losses[100]);
    Ok(())
}

fn mode_of(mode: Mode) -> SearchMode {
    match mode {
        Mode::Rlrs => SearchMode::Rlrs,
        Mode::Baseline => SearchMode::Baseline,
    }
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// One JSON line per evaluation.
pub fn audit_jsonl(result: &SearchResult) -> String {
    let mut text = String::new();
    for r in &result.trail {
        let cfg: serde_json::Map<String, Value> = r.config.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let line = json!({
            "index": r.index,
            "entry": r.entry,
            "factor": r.factor,
            "config": cfg,
            "objective": finite_or_null(r.objective),
            "accepted": r.accepted,
            "error": r.error,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    text
}

fn tune_cmd(
    path: &Path,
    mode: Mode,
    budget: usize,
    out: &Path,
    seeds: Vec<u64>,
    jobs: usize,
    batch_trials: bool,
) -> Result<()> {
    let cfg = config::load(path)?;
    if budget == 0 {
        return Err(LabError::Config("--budget must be at least 1".into()));
    }
    let seeds = seeds_or_default(seeds, &cfg);
    create_dir(out)?;
    let mut runner = LabRunner::new(jobs);
    runner.preload([&cfg])?;
    let start = SearchSpace::from_config(&cfg, mode_of(mode));
    let mut objective = TrainObjective::new(cfg.clone(), seeds.clone(), &mut runner, "tune");
    let options = SearchOptions { batch_trials, ..SearchOptions::budget(budget) };
    let result = local_search(&start, &mut objective, options)?;

    write(&out.join("audit.jsonl"), audit_jsonl(&result).as_bytes())?;
    let mut best = cfg.clone();
    result.best.apply(&mut best)?;
    best.provenance = Some(format!("tune:{}", path.display()));
    config::save(&best, &out.join("best.conf"))?;
    let summary = json!({
        "mode": match mode { Mode::Rlrs => "rlrs", Mode::Baseline => "baseline" },
        "seeds": seeds,
        "budget": budget,
        "evaluations": result.evaluations(),
        "sweeps": result.sweeps,
        "converged": result.stop == rlrs_core::search::StopReason::Converged,
        "best_objective": finite_or_null(result.best_objective),
        "best": result.best.values().into_iter().map(|(k, v)| (k, json!(v))).collect::<serde_json::Map<_, _>>(),
    });
    write_json(&out.join("tune.json"), &summary)?;
    println!("best objective {} after {} evaluations", result.best_objective, result.evaluations());
    Ok(())
}

fn outcome_json(s: &SpeedupOutcome) -> Value {
    match *s {
        SpeedupOutcome::Measured { percent, t_base, t_relative, checkpoint } => {
            json!({ "reached": true, "percent": percent, "t_base": t_base, "t_relative": t_relative, "checkpoint": checkpoint })
        }
        SpeedupOutcome::NotReached => json!({ "reached": false }),
    }
}

/// Report with one row per arm, in the style of a speedup table.
pub fn report_json(base: &TrainConfig, rlrs: &TrainConfig, report: &CompareReport) -> Value {
    let tokens = |c: &TrainConfig| c.schedule.total_steps * (c.batch_size * c.model.seq_len) as u64;
    let row = |c: &TrainConfig, lr_type: &str, speedup: Value| {
        json!({
            "type": c.kind().to_string(),
            "lr_type": lr_type,
            "base_lr": c.schedule.eta_base,
            "train_tokens": tokens(c),
            "speedup": speedup,
        })
    };
    let ids = |logs: &[RunLog]| logs.iter().map(|l| l.run_id.clone()).collect::<Vec<_>>();
    json!({
        "rows": [
            row(base, "baseline", Value::Null),
            row(rlrs, "relative", report.speedup.percent().map_or(Value::Null, |p| json!(p))),
        ],
        "speedup": outcome_json(&report.speedup),
        "seeds": report.seeds,
        "base_final_loss": report.base_mean.final_loss(),
        "rlrs_final_loss": report.rlrs_mean.final_loss(),
        "runs": { "base": ids(&report.base_logs), "rlrs": ids(&report.rlrs_logs) },
    })
}

fn means_csv(report: &CompareReport) -> String {
    let mut text = String::from("percent,step,base,rlrs\n");
    let t = report.base_mean.total_steps();
    for (p, (b, r)) in report.base_mean.samples().iter().zip(report.rlrs_mean.samples()).enumerate() {
        text.push_str(&format!("{p},{},{b},{r}\n", checkpoint_step(p, t)));
    }
    text
}

/// Runs the comparison and writes per-run files, `means.csv` and
/// `report.json` into `out`.
fn run_compare(base: &TrainConfig, rlrs: &TrainConfig, seeds: &[u64], out: &Path, runner: &mut LabRunner) -> Result<CompareReport> {
    runner.preload([base, rlrs])?;
    let mut recorder = Recording { inner: runner, out, failure: None };
    let result = compare(base, rlrs, seeds, &mut recorder);
    if let Some(e) = recorder.failure {
        return Err(e);
    }
    let report = result?;
    write(&out.join("means.csv"), means_csv(&report).as_bytes())?;
    write_json(&out.join("report.json"), &report_json(base, rlrs, &report))?;
    Ok(report)
}

/// Exports every run as it finishes, diverged ones included.
struct Recording<'a> {
    inner: &'a mut LabRunner,
    out: &'a Path,
    failure: Option<LabError>,
}

impl Recording<'_> {
    fn record(&mut self, r: &std::result::Result<RunLog, TrainError>) {
        let e = match r {
            Ok(log) => export::export(log, self.out, None).err(),
            Err(TrainError::Diverged(d)) => export::export(&d.partial, self.out, Some(d)).err(),
            Err(TrainError::Failed(_)) => None,
        };
        if self.failure.is_none() {
            self.failure = e;
        }
    }
}

impl Runner for Recording<'_> {
    fn run(&mut self, cfg: &TrainConfig, run_id: &str) -> std::result::Result<RunLog, TrainError> {
        let r = self.inner.run(cfg, run_id);
        self.record(&r);
        r
    }

    fn run_all(&mut self, jobs: &[(TrainConfig, String)]) -> Vec<std::result::Result<RunLog, TrainError>> {
        let rs = self.inner.run_all(jobs);
        rs.iter().for_each(|r| self.record(r));
        rs
    }
}

fn print_speedup(report: &CompareReport) {
    match report.speedup {
        SpeedupOutcome::Measured { percent, t_relative, .. } => {
            println!("speedup {percent:.2}% (RLRS reaches the baseline final loss at step {t_relative})")
        }
        SpeedupOutcome::NotReached => println!("speedup not measurable: RLRS never reaches the baseline final loss"),
    }
}

fn compare_cmd(base: &Path, rlrs: &Path, seeds: &[u64], out: &Path, jobs: usize, timing: bool) -> Result<()> {
    let (b, r) = (config::load(base)?, config::load(rlrs)?);
    create_dir(out)?;
    let mut runner = LabRunner::new(jobs);
    runner.timing = timing;
    let report = run_compare(&b, &r, seeds, out, &mut runner)?;
    print_speedup(&report);
    Ok(())
}

/// Parses `n1..n2` (inclusive) or a single exponent.
pub fn parse_grid(grid: &str) -> Result<Vec<i32>> {
    let bad = || LabError::Config(format!("--grid: expected n1..n2, got {grid:?}"));
    let (a, b) = grid.split_once("..").unwrap_or((grid, grid));
    let (a, b): (i32, i32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

fn tune_json(t: &TuneResult) -> Value {
    json!({
        "eta_base": t.eta_base,
        "objective": t.objective,
        "grid": t.evaluated.iter().map(|(lr, o)| json!({ "eta_base": lr, "objective": finite_or_null(*o) })).collect::<Vec<_>>(),
    })
}

fn extrapolate_cmd(small: &Path, large: &Path, grid: &str, seeds: Vec<u64>, out: &Path, jobs: usize) -> Result<()> {
    let exponents = parse_grid(grid)?;
    let small_cfg = config::load(small)?;
    let base = config::load(large)?;
    let carried = transfer(&small_cfg, &small.display().to_string(), &base.model)?;
    let mut rlrs = base.clone();
    rlrs.rates = carried.rates;
    rlrs.provenance = carried.provenance;
    rlrs.validate()?;
    let seeds = seeds_or_default(seeds, &base);
    create_dir(out)?;
    let mut runner = LabRunner::new(jobs);
    runner.preload([&base])?;

    let mut tuned = Vec::new();
    for (label, cfg) in [("lr-base", &base), ("lr-rlrs", &rlrs)] {
        let mut obj = TrainObjective::new(cfg.clone(), seeds.clone(), &mut runner, label);
        tuned.push(tune_base_lr(&exponents, &mut obj)?);
    }
    let mut base = base;
    base.schedule.eta_base = tuned[0].eta_base;
    rlrs.schedule.eta_base = tuned[1].eta_base;
    config::save(&base, &out.join("baseline.conf"))?;
    config::save(&rlrs, &out.join("transferred.conf"))?;
    write_json(&out.join("lr_tuning.json"), &json!({ "baseline": tune_json(&tuned[0]), "rlrs": tune_json(&tuned[1]) }))?;
    let report = run_compare(&base, &rlrs, &seeds, out, &mut runner)?;
    println!("base LR: baseline {}, rlrs {}", tuned[0].eta_base, tuned[1].eta_base);
    print_speedup(&report);
    Ok(())
}

fn ablate_cmd(
    path: &Path,
    component: &str,
    which: Which,
    values: &[f64],
    seeds: Vec<u64>,
    out: &Path,
    jobs: usize,
) -> Result<()> {
    let cfg = config::load(path)?;
    let tag: ComponentTag = component.parse()?;
    let current = cfg.rates.require(tag)?;
    let seeds = seeds_or_default(seeds, &cfg);
    let which_key = match which {
        Which::Start => "start",
        Which::End => "end",
    };
    let mut jobs_list = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        let rate = match which {
            Which::Start => RelativeRate::new(v, current.end),
            Which::End => RelativeRate::new(current.start, v),
        };
        c.rates.set(tag, rate);
        c.validate()?;
        for &s in &seeds {
            let mut c = c.clone();
            c.data_seed = s;
            jobs_list.push((c, format!("ablate-{tag}-{which_key}-{v}-seed{s}")));
        }
    }
    create_dir(out)?;
    let mut runner = LabRunner::new(jobs);
    runner.preload([&cfg])?;
    let results = runner.run_all(&jobs_list);

    let mut rows = Vec::new();
    for (vi, &v) in values.iter().enumerate() {
        let mut finals = Vec::new();
        for (si, _) in seeds.iter().enumerate() {
            let r = &results[vi * seeds.len() + si];
            match r {
                Ok(log) => {
                    export::export(log, out, None)?;
                    finals.push(json!(log.losses[100]));
                }
                Err(TrainError::Diverged(d)) => {
                    export::export(&d.partial, out, Some(d))?;
                    finals.push(Value::Null);
                }
                Err(TrainError::Failed(e)) => return Err(e.clone().into()),
            }
        }
        let ok: Vec<f64> = finals.iter().filter_map(Value::as_f64).collect();
        let curves: Vec<_> = results[vi * seeds.len()..(vi + 1) * seeds.len()]
            .iter()
            .filter_map(|r| r.as_ref().ok().and_then(|l| l.curve().ok()))
            .collect();
        let mean_final = (!curves.is_empty()).then(|| mean_curve(&curves).map(|c| c.final_loss())).transpose()?;
        println!("{tag}.{which_key} = {v}: {} of {} runs finished", ok.len(), seeds.len());
        rows.push(json!({
            "value": v,
            "seeds": seeds,
            "final_losses": finals,
            "mean_final_loss": mean_final,
        }));
    }
    let summary = json!({ "component": tag.to_string(), "which": which_key, "values": rows });
    write_json(&out.join("ablate.json"), &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("2..4").unwrap(), [2, 3, 4]);
        assert_eq!(parse_grid("3").unwrap(), [3]);
        assert!(parse_grid("4..2").is_err());
        assert!(parse_grid("a..b").is_err());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert_eq!(main_with(["rlrs", "presets", "--kind", "moe", "--colour"]), 1);
        assert_eq!(main_with(["rlrs", "presets", "--kind", "sparse"]), 1);
        assert_eq!(main_with(["rlrs"]), 1);
    }
}
