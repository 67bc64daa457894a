//! Trainer-backed [`Runner`] with thread-level parallelism, and the search
//! objectives built on it.

use std::collections::HashMap;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rlrs_core::data::{tokenize_bytes, TokenSource, TokenStream};
use rlrs_core::metrics::RunLog;
use rlrs_core::model::Model;
use rlrs_core::optimizer::AdamWState;
use rlrs_core::search::{Evaluator, SearchSpace};
use rlrs_core::trainer::{synthetic_stream, train_on, DataSpec, Observer, Runner, TrainConfig, TrainError};
use rlrs_core::Error;

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};

type RunResult = std::result::Result<RunLog, TrainError>;

/// Logs progress, optionally timestamps checkpoints and writes periodic
/// model checkpoints.
pub struct LabObserver<'a> {
    run_id: &'a str,
    cfg: &'a TrainConfig,
    start: Option<Instant>,
    checkpoint: Option<(u64, std::path::PathBuf)>,
    pub io_error: Option<LabError>,
}

impl<'a> LabObserver<'a> {
    pub fn new(cfg: &'a TrainConfig, run_id: &'a str, timing: bool) -> Self {
        LabObserver { run_id, cfg, start: timing.then(Instant::now), checkpoint: None, io_error: None }
    }

    /// Saves model and optimizer state to `path` every `every` steps and at
    /// the last step.
    pub fn with_checkpoints(mut self, every: u64, path: std::path::PathBuf) -> Self {
        self.checkpoint = Some((every.max(1), path));
        self
    }
}

impl Observer for LabObserver<'_> {
    fn clock(&mut self) -> Option<f64> {
        self.start.map(|t| t.elapsed().as_secs_f64())
    }

    fn on_checkpoint(&mut self, percent: usize, step: u64, log: &RunLog) {
        if percent % 10 == 0 {
            log::info!("{}: {percent}% (step {step}) loss {:.4}", self.run_id, log.losses[percent]);
        }
    }

    fn on_step(&mut self, step: u64, _loss: f64, model: &Model, opt: &AdamWState) {
        let Some((every, path)) = &self.checkpoint else { return };
        if self.io_error.is_none() && (step % every == 0 || step == self.cfg.schedule.total_steps) {
            if let Err(e) = Checkpoint::capture(self.cfg, step, model, Some(opt)).save(path) {
                log::error!("{}: checkpoint at step {step} failed: {e}", self.run_id);
                self.io_error = Some(e);
            }
        }
    }
}

/// Runs configs on up to `jobs` threads. File corpora are read once and
/// shared between runs.
pub struct LabRunner {
    pub jobs: usize,
    pub timing: bool,
    files: Mutex<HashMap<String, Arc<TokenStream>>>,
}

impl LabRunner {
    pub fn new(jobs: usize) -> Self {
        LabRunner { jobs: jobs.max(1), timing: false, files: Mutex::new(HashMap::new()) }
    }

    /// Reads every data file the configs refer to, so that I/O failures
    /// surface before any training starts.
    pub fn preload<'c>(&self, cfgs: impl IntoIterator<Item = &'c TrainConfig>) -> Result<()> {
        for cfg in cfgs {
            if let DataSpec::File { path } = &cfg.data {
                if self.files.lock().unwrap().contains_key(path) {
                    continue;
                }
                let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
                let stream = tokenize_bytes(&bytes, TokenSource::File(path.clone()))?;
                self.files.lock().unwrap().insert(path.clone(), Arc::new(stream));
            }
        }
        Ok(())
    }

    pub fn stream(&self, cfg: &TrainConfig) -> Result<Arc<TokenStream>> {
        match &cfg.data {
            DataSpec::Synthetic(_) => Ok(Arc::new(synthetic_stream(cfg)?)),
            DataSpec::File { .. } => {
                self.preload([cfg])?;
                let DataSpec::File { path } = &cfg.data else { unreachable!() };
                Ok(self.files.lock().unwrap()[path].clone())
            }
        }
    }

    pub fn run_observed(&self, cfg: &TrainConfig, run_id: &str, observer: &mut dyn Observer) -> RunResult {
        let stream = self.stream(cfg).map_err(|e| match e {
            LabError::Core(e) => TrainError::Failed(e),
            other => TrainError::Failed(Error::Config(other.to_string())),
        })?;
        log::debug!("{run_id}: starting ({} steps)", cfg.schedule.total_steps);
        let r = train_on(cfg, &stream, run_id, observer);
        match &r {
            Ok(log) => log::debug!("{run_id}: final loss {}", log.losses.last().copied().unwrap_or(f64::NAN)),
            Err(e) => log::warn!("{run_id}: {e}"),
        }
        r
    }
}

impl Runner for LabRunner {
    fn run(&mut self, cfg: &TrainConfig, run_id: &str) -> RunResult {
        let mut obs = LabObserver::new(cfg, run_id, self.timing);
        self.run_observed(cfg, run_id, &mut obs)
    }

    fn run_all(&mut self, jobs: &[(TrainConfig, String)]) -> Vec<RunResult> {
        let this = &*self;
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..this.jobs.min(jobs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((cfg, id)) = jobs.get(i) else { break };
                    let mut obs = LabObserver::new(cfg, id, this.timing);
                    let r = this.run_observed(cfg, id, &mut obs);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
    }
}

/// Mean final loss of the configs in `runs`, taken in groups of `seeds`.
fn mean_finals(results: Vec<RunResult>, seeds: usize) -> Vec<rlrs_core::Result<f64>> {
    let mut out = Vec::new();
    let mut it = results.into_iter();
    loop {
        let group: Vec<RunResult> = it.by_ref().take(seeds).collect();
        if group.is_empty() {
            return out;
        }
        let mut sum = 0.0;
        let mut err = None;
        for r in group {
            match r {
                Ok(log) => sum += log.curve().map(|c| c.final_loss()).unwrap_or(f64::INFINITY),
                Err(e) => err = Some(e),
            }
        }
        out.push(match err {
            Some(TrainError::Failed(e)) => Err(e),
            Some(TrainError::Diverged(d)) => Err(Error::Numeric(d.to_string())),
            None => Ok(sum / seeds as f64),
        });
    }
}

/// Search objective: mean final-checkpoint loss over `seeds` data seeds.
pub struct TrainObjective<'r> {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub runner: &'r mut LabRunner,
    pub label: String,
    evaluated: usize,
}

impl<'r> TrainObjective<'r> {
    pub fn new(base: TrainConfig, seeds: Vec<u64>, runner: &'r mut LabRunner, label: &str) -> Self {
        TrainObjective { base, seeds, runner, label: label.to_string(), evaluated: 0 }
    }

    fn jobs_for(&mut self, cfgs: Vec<TrainConfig>) -> Vec<(TrainConfig, String)> {
        let mut jobs = Vec::new();
        for cfg in cfgs {
            for &s in &self.seeds {
                let mut c = cfg.clone();
                c.data_seed = s;
                jobs.push((c, format!("{}-{}-seed{s}", self.label, self.evaluated)));
            }
            self.evaluated += 1;
        }
        jobs
    }

    fn evaluate_configs(&mut self, cfgs: Vec<TrainConfig>) -> Vec<rlrs_core::Result<f64>> {
        let jobs = self.jobs_for(cfgs);
        let results = self.runner.run_all(&jobs);
        mean_finals(results, self.seeds.len())
    }
}

impl Evaluator<SearchSpace> for TrainObjective<'_> {
    fn evaluate(&mut self, candidate: &SearchSpace) -> rlrs_core::Result<f64> {
        self.evaluate_batch(core::slice::from_ref(candidate)).pop().expect("one result per candidate")
    }

    fn evaluate_batch(&mut self, candidates: &[SearchSpace]) -> Vec<rlrs_core::Result<f64>> {
        let mut cfgs = Vec::new();
        let mut bad = Vec::new();
        for (i, space) in candidates.iter().enumerate() {
            let mut c = self.base.clone();
            match space.apply(&mut c).and_then(|_| c.validate()) {
                Ok(()) => cfgs.push(c),
                Err(e) => bad.push((i, e)),
            }
        }
        let mut good = self.evaluate_configs(cfgs).into_iter();
        let mut bad = bad.into_iter().peekable();
        (0..candidates.len())
            .map(|i| match bad.peek() {
                Some((j, _)) if *j == i => Err(bad.next().unwrap().1),
                _ => good.next().expect("result per valid candidate"),
            })
            .collect()
    }
}

/// Base-LR objective for grid tuning.
impl Evaluator<f64> for TrainObjective<'_> {
    fn evaluate(&mut self, eta: &f64) -> rlrs_core::Result<f64> {
        Evaluator::<f64>::evaluate_batch(self, core::slice::from_ref(eta)).pop().expect("one result per candidate")
    }

    fn evaluate_batch(&mut self, etas: &[f64]) -> Vec<rlrs_core::Result<f64>> {
        let cfgs = etas
            .iter()
            .map(|&eta| {
                let mut c = self.base.clone();
                c.schedule.eta_base = eta;
                c
            })
            .collect();
        self.evaluate_configs(cfgs)
    }
}
