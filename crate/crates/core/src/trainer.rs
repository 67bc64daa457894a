//! Training runs: configuration, the step loop and baseline-vs-RLRS
//! comparisons.
//!
//! [`TrainConfig`] reads and writes itself as flat `section.key` pairs so the
//! same names serve the config file, the run-log echo and the search entries.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Tape, Tensor};
use crate::data::{batches, synthetic_corpus, SyntheticSpec, TokenStream};
use crate::error::{config_err, domain_err, Error, Result};
use crate::losses::{objective_on_tape, LossConfig};
use crate::metrics::{mean_curve, speedup, CurveRecorder, LossCurve, RunLog, SpeedupOutcome, Trace};
use crate::model::{Model, ModelConfig};
use crate::optimizer::{AdamWConfig, AdamWState, PreLrUpdates};
use crate::schedule::{preset, ComponentTag, ModelKind, RelativeRate, RelativeRates, ScheduleSpec, Schedules};

/// Where training tokens come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// Byte-level file; read by the caller and handed to [`train_on`].
    File { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub rates: RelativeRates,
    pub loss: LossConfig,
    pub weight_decay: f64,
    pub init_scale: f64,
    pub batch_size: usize,
    pub data: DataSpec,
    pub init_seed: u64,
    pub data_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub no_decay: Vec<String>,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Free-form origin of the configuration (e.g. the run its rates came from).
    pub provenance: Option<String>,
}

impl Default for TrainConfig {
    /// The desk-scale MoE setup with identity rates.
    fn default() -> Self {
        let model = ModelConfig { vocab_size: 64, ..ModelConfig::default() };
        TrainConfig {
            rates: RelativeRates::identity(model.kind()),
            model,
            schedule: ScheduleSpec { eta_base: 3e-3, alpha_end: 0.04, warmup_fraction: 0.01, total_steps: 10_000 },
            loss: LossConfig::default(),
            weight_decay: 0.1,
            init_scale: 0.15,
            batch_size: 4,
            data: DataSpec::Synthetic(SyntheticSpec::default()),
            init_seed: 0,
            data_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            no_decay: Vec::new(),
            grad_clip: None,
            provenance: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config_err!("{key}: cannot parse {value:?}"))
}

impl TrainConfig {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            no_decay: self.no_decay.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.rates.validate_for(self.kind())?;
        self.loss.validate()?;
        self.optimizer().validate()?;
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(config_err!("train.init_scale must be positive, got {}", self.init_scale));
        }
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be at least 1"));
        }
        if self.schedule.total_steps < 100 {
            return Err(config_err!(
                "schedule.total_steps must be at least 100 for 1% checkpoints, got {}",
                self.schedule.total_steps
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(config_err!("optimizer.grad_clip must be positive, got {c}"));
            }
        }
        if let DataSpec::Synthetic(s) = &self.data {
            if s.vocab_size != self.model.vocab_size {
                return Err(config_err!(
                    "data.synthetic.vocab_size ({}) differs from model.vocab_size ({})",
                    s.vocab_size,
                    self.model.vocab_size
                ));
            }
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let m = &self.model;
        put("model.d_model", m.d_model.to_string());
        put("model.n_layers", m.n_layers.to_string());
        put("model.n_heads", m.n_heads.to_string());
        put("model.ff_multiplier", m.ff_multiplier.to_string());
        put("model.n_experts", m.n_experts.to_string());
        put("model.vocab_size", m.vocab_size.to_string());
        put("model.seq_len", m.seq_len.to_string());
        let s = &self.schedule;
        put("schedule.eta_base", s.eta_base.to_string());
        put("schedule.alpha_end", s.alpha_end.to_string());
        put("schedule.warmup_fraction", s.warmup_fraction.to_string());
        put("schedule.total_steps", s.total_steps.to_string());
        for (tag, r) in self.rates.iter() {
            put(&format!("rlrs.{}.start", tag.key()), r.start.to_string());
            put(&format!("rlrs.{}.end", tag.key()), r.end.to_string());
        }
        put("loss.z_loss_weight", self.loss.z_loss_weight.to_string());
        put("loss.load_balance_weight", self.loss.load_balance_weight.to_string());
        put("optimizer.weight_decay", self.weight_decay.to_string());
        put("optimizer.beta1", self.beta1.to_string());
        put("optimizer.beta2", self.beta2.to_string());
        put("optimizer.epsilon", self.epsilon.to_string());
        put("optimizer.no_decay", self.no_decay.join(","));
        put("optimizer.grad_clip", self.grad_clip.map_or_else(|| "none".to_string(), |c| c.to_string()));
        put("train.init_scale", self.init_scale.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.init_seed", self.init_seed.to_string());
        put("train.data_seed", self.data_seed.to_string());
        match &self.data {
            DataSpec::Synthetic(d) => {
                put("data.source", "synthetic".to_string());
                put("data.synthetic.seed", d.seed.to_string());
                put("data.synthetic.length", d.length.to_string());
                put("data.synthetic.order", d.order.to_string());
                put("data.synthetic.vocab_size", d.vocab_size.to_string());
                put("data.synthetic.branching", d.branching.to_string());
            }
            DataSpec::File { path } => {
                put("data.source", "file".to_string());
                put("data.path", path.clone());
            }
        }
        if let Some(p) = &self.provenance {
            put("provenance.source", p.clone());
        }
        out
    }

    /// Current value of `key`, formatted as in [`to_pairs`](Self::to_pairs).
    pub fn get(&self, key: &str) -> Option<String> {
        self.to_pairs().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Sets one key. Besides the keys of [`to_pairs`](Self::to_pairs) this
    /// accepts `rlrs.preset` (`identity` or `shipped`), which replaces all
    /// rates for the current model kind. Setting `model.n_experts` across
    /// the dense/MoE boundary resets the rates to identity for the new kind.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.ff_multiplier" => self.model.ff_multiplier = parse(key, v)?,
            "model.n_experts" => {
                let before = self.kind();
                self.model.n_experts = parse(key, v)?;
                if self.kind() != before {
                    self.rates = RelativeRates::identity(self.kind());
                }
            }
            "model.vocab_size" => self.model.vocab_size = parse(key, v)?,
            "model.seq_len" => self.model.seq_len = parse(key, v)?,
            "schedule.eta_base" => self.schedule.eta_base = parse(key, v)?,
            "schedule.alpha_end" => self.schedule.alpha_end = parse(key, v)?,
            "schedule.warmup_fraction" => self.schedule.warmup_fraction = parse(key, v)?,
            "schedule.total_steps" => self.schedule.total_steps = parse(key, v)?,
            "rlrs.preset" => {
                self.rates = match v {
                    "identity" => RelativeRates::identity(self.kind()),
                    "shipped" => preset(self.kind()),
                    _ => return Err(config_err!("rlrs.preset must be identity or shipped, got {v:?}")),
                }
            }
            "loss.z_loss_weight" => self.loss.z_loss_weight = parse(key, v)?,
            "loss.load_balance_weight" => self.loss.load_balance_weight = parse(key, v)?,
            "optimizer.weight_decay" => self.weight_decay = parse(key, v)?,
            "optimizer.beta1" => self.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.beta2 = parse(key, v)?,
            "optimizer.epsilon" => self.epsilon = parse(key, v)?,
            "optimizer.no_decay" => {
                self.no_decay = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "optimizer.grad_clip" => {
                self.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            "train.init_scale" => self.init_scale = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.init_seed" => self.init_seed = parse(key, v)?,
            "train.data_seed" => self.data_seed = parse(key, v)?,
            "data.source" => {
                self.data = match (v, &self.data) {
                    ("synthetic", DataSpec::Synthetic(_)) | ("file", DataSpec::File { .. }) => return Ok(()),
                    ("synthetic", _) => DataSpec::Synthetic(SyntheticSpec {
                        vocab_size: self.model.vocab_size,
                        ..SyntheticSpec::default()
                    }),
                    ("file", _) => DataSpec::File { path: String::new() },
                    _ => return Err(config_err!("data.source must be synthetic or file, got {v:?}")),
                }
            }
            "data.path" => match &mut self.data {
                DataSpec::File { path } => *path = v.to_string(),
                _ => return Err(config_err!("data.path requires data.source = file")),
            },
            "provenance.source" => self.provenance = Some(v.to_string()),
            _ if key.starts_with("data.synthetic.") => {
                let DataSpec::Synthetic(d) = &mut self.data else {
                    return Err(config_err!("{key} requires data.source = synthetic"));
                };
                match &key["data.synthetic.".len()..] {
                    "seed" => d.seed = parse(key, v)?,
                    "length" => d.length = parse(key, v)?,
                    "order" => d.order = parse(key, v)?,
                    "vocab_size" => d.vocab_size = parse(key, v)?,
                    "branching" => d.branching = parse(key, v)?,
                    _ => return Err(config_err!("unknown key {key}")),
                }
            }
            _ if key.starts_with("rlrs.") => {
                let rest = &key["rlrs.".len()..];
                let (tag, which) = rest.rsplit_once('.').ok_or_else(|| config_err!("unknown key {key}"))?;
                let tag: ComponentTag = tag.parse()?;
                let mut r = self.rates.get(tag).unwrap_or(RelativeRate::IDENTITY);
                match which {
                    "start" => r.start = parse(key, v)?,
                    "end" => r.end = parse(key, v)?,
                    _ => return Err(config_err!("unknown key {key}")),
                }
                self.rates.set(tag, r);
            }
            _ => return Err(config_err!("unknown key {key}")),
        }
        Ok(())
    }

    /// Builds a config from pairs over the defaults. Keys that reset other
    /// keys (`model.n_experts`, `rlrs.preset`, `data.source`) are applied
    /// first, the rest in the given order, so file order does not matter.
    pub fn from_pairs<'k>(pairs: impl IntoIterator<Item = (&'k str, &'k str)>) -> Result<Self> {
        let rank = |k: &str| match k {
            "model.n_experts" => 0,
            "rlrs.preset" | "data.source" => 1,
            _ => 2,
        };
        let mut pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        pairs.sort_by_key(|(k, _)| rank(k));
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hooks into a running training loop. All methods have no-op defaults.
pub trait Observer {
    /// Seconds since some fixed origin; `None` disables wall-clock traces.
    fn clock(&mut self) -> Option<f64> {
        None
    }

    /// Called after each completed checkpoint with the log so far.
    fn on_checkpoint(&mut self, _percent: usize, _step: u64, _log: &RunLog) {}

    /// Called after every optimizer step with the freshly updated model.
    fn on_step(&mut self, _step: u64, _loss: f64, _model: &Model, _optimizer: &AdamWState) {}
}

/// Observer that does nothing.
pub struct Quiet;

impl Observer for Quiet {}

/// A run stopped by a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
    /// Per-component update norms of the last completed step.
    pub last_update_norms: Vec<(ComponentTag, f64)>,
    /// Log up to the last completed checkpoint.
    pub partial: RunLog,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run {} diverged at step {}: {}", self.partial.run_id, self.step, self.reason)?;
        if !self.last_update_norms.is_empty() {
            f.write_str("; last update norms:")?;
            for (tag, n) in &self.last_update_norms {
                write!(f, " {tag}={n:.4e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Failed(Error),
    Diverged(Box<Divergence>),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Failed(e) => e.fmt(f),
            TrainError::Diverged(d) => d.fmt(f),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

/// Builds the token stream of a synthetic config.
pub fn synthetic_stream(cfg: &TrainConfig) -> Result<TokenStream> {
    match &cfg.data {
        DataSpec::Synthetic(s) => synthetic_corpus(s),
        DataSpec::File { path } => Err(config_err!("data file {path:?} must be loaded by the caller")),
    }
}

/// Trains a synthetic-data config without hooks.
pub fn train(cfg: &TrainConfig, run_id: &str) -> core::result::Result<RunLog, TrainError> {
    let stream = synthetic_stream(cfg)?;
    train_on(cfg, &stream, run_id, &mut Quiet)
}

fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum())
}

fn norms(updates: &PreLrUpdates, tags: &[ComponentTag]) -> Vec<(ComponentTag, f64)> {
    tags.iter().map(|&t| (t, updates.update_magnitude(t).unwrap_or(0.0))).collect()
}

/// One forward/backward pass: training cross-entropy, total loss, gradients
/// aligned with `model.params()`.
pub fn loss_and_grads(
    model: &Model,
    batch: &crate::data::Batch,
    loss: &LossConfig,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &batch.inputs)?;
    let terms = objective_on_tape(&mut tape, fwd.logits, &batch.targets, &fwd.routers, loss)?;
    let ce = tape.value(terms.ce).data()[0];
    let total = tape.value(terms.total).data()[0];
    if !total.is_finite() {
        return Err(crate::error::numeric_err!("non-finite loss {total}"));
    }
    let mut grads = tape.backward(terms.total)?;
    let g = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((ce, total, g))
}

/// Trains `cfg` on `stream`. The curve records the training cross-entropy;
/// the z- and load-balancing terms only enter the gradients.
pub fn train_on(
    cfg: &TrainConfig,
    stream: &TokenStream,
    run_id: &str,
    observer: &mut dyn Observer,
) -> core::result::Result<RunLog, TrainError> {
    cfg.validate()?;
    if stream.vocab_size() > cfg.model.vocab_size {
        return Err(config_err!(
            "data vocabulary {} exceeds model.vocab_size {}",
            stream.vocab_size(),
            cfg.model.vocab_size
        )
        .into());
    }
    let kind = cfg.kind();
    let tags: Vec<ComponentTag> = kind.components().to_vec();
    let mut model = Model::init(&cfg.model, cfg.init_scale, cfg.init_seed)?;
    let mut opt = AdamWState::new(cfg.optimizer(), model.params())?;
    let schedules = Schedules::new(&cfg.schedule, &cfg.rates, kind)?;
    let mut data = batches(stream, cfg.batch_size, cfg.model.seq_len, Some(cfg.data_seed))?;
    let total_steps = cfg.schedule.total_steps;
    let mut recorder = CurveRecorder::new(total_steps)?;
    let origin = observer.clock();

    let mut log = RunLog {
        run_id: run_id.to_string(),
        config: cfg.to_pairs(),
        init_seed: cfg.init_seed,
        data_seed: cfg.data_seed,
        total_steps,
        losses: Vec::new(),
        lr: tags.iter().map(|&tag| Trace { tag, values: Vec::new() }).collect(),
        update_norm: tags.iter().map(|&tag| Trace { tag, values: Vec::new() }).collect(),
        wall_clock: origin.map(|_| Vec::new()),
    };
    let mut last_norms: Vec<(ComponentTag, f64)> = Vec::new();

    for step in 1..=total_steps {
        let batch = data.next().ok_or_else(|| domain_err!("data iterator ended"))?;
        let diverged = |reason: String, norms: &[(ComponentTag, f64)], log: &RunLog| {
            TrainError::Diverged(Box::new(Divergence {
                step,
                reason,
                last_update_norms: norms.to_vec(),
                partial: log.clone(),
            }))
        };
        let (ce, mut grads) = match loss_and_grads(&model, &batch, &cfg.loss) {
            Ok((ce, _, g)) => (ce, g),
            Err(Error::Numeric(m)) => return Err(diverged(m, &last_norms, &log)),
            Err(e) => return Err(e.into()),
        };
        if let Some(clip) = cfg.grad_clip {
            let n = global_norm(&grads);
            if n > clip {
                let s = clip / n;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        let lrs = schedules.lrs_at(step)?;
        let updates = match opt.step(model.params_mut(), &grads, &lrs) {
            Ok(u) => u,
            Err(Error::Numeric(m)) => return Err(diverged(m, &last_norms, &log)),
            Err(e) => return Err(e.into()),
        };
        last_norms = norms(&updates, &tags);
        observer.on_step(step, ce, &model, &opt);

        for percent in recorder.record(step, ce) {
            log.losses.push(recorder.samples()[percent]);
            for (trace, (tag, n)) in log.update_norm.iter_mut().zip(&last_norms) {
                debug_assert_eq!(trace.tag, *tag);
                trace.values.push(*n);
            }
            for trace in &mut log.lr {
                trace.values.push(lrs.get(trace.tag).unwrap_or_default());
            }
            if let (Some(t0), Some(w)) = (origin, log.wall_clock.as_mut()) {
                w.push(observer.clock().map_or(0.0, |t| t - t0));
            }
            observer.on_checkpoint(percent, step, &log);
        }
    }
    Ok(log)
}

/// Something that turns configs into run logs: the real trainer, or canned
/// curves in tests.
pub trait Runner {
    fn run(&mut self, cfg: &TrainConfig, run_id: &str) -> core::result::Result<RunLog, TrainError>;

    /// Runs several independent configs; the default runs them in order.
    fn run_all(&mut self, jobs: &[(TrainConfig, String)]) -> Vec<core::result::Result<RunLog, TrainError>> {
        jobs.iter().map(|(c, id)| self.run(c, id)).collect()
    }
}

/// [`Runner`] backed by [`train`] on synthetic data.
pub struct SyntheticRunner;

impl Runner for SyntheticRunner {
    fn run(&mut self, cfg: &TrainConfig, run_id: &str) -> core::result::Result<RunLog, TrainError> {
        train(cfg, run_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub base_logs: Vec<RunLog>,
    pub rlrs_logs: Vec<RunLog>,
    pub base_mean: LossCurve,
    pub rlrs_mean: LossCurve,
    pub speedup: SpeedupOutcome,
}

const ARM_FREE_KEYS: [&str; 3] = ["rlrs.", "schedule.eta_base", "provenance."];

/// Checks that two configs differ only in relative rates and base LR.
pub fn check_comparable(base: &TrainConfig, rlrs: &TrainConfig) -> Result<()> {
    let strip = |c: &TrainConfig| -> Vec<(String, String)> {
        c.to_pairs().into_iter().filter(|(k, _)| !ARM_FREE_KEYS.iter().any(|p| k.starts_with(p))).collect()
    };
    let (a, b) = (strip(base), strip(rlrs));
    if a.len() != b.len() {
        return Err(config_err!("compared configs have different key sets"));
    }
    for ((ka, va), (kb, vb)) in a.iter().zip(&b) {
        if ka != kb || va != vb {
            return Err(config_err!("compared configs differ in {ka}: {va} vs {vb}"));
        }
    }
    if base.rates.kind() != rlrs.rates.kind() {
        return Err(config_err!("compared configs cover different components"));
    }
    Ok(())
}

/// Trains both arms once per data seed and measures the speedup of the mean
/// RLRS curve over the mean baseline curve.
pub fn compare(
    base: &TrainConfig,
    rlrs: &TrainConfig,
    seeds: &[u64],
    runner: &mut dyn Runner,
) -> core::result::Result<CompareReport, TrainError> {
    if seeds.is_empty() {
        return Err(config_err!("compare needs at least one seed").into());
    }
    check_comparable(base, rlrs)?;
    let mut jobs = Vec::with_capacity(2 * seeds.len());
    for (arm, cfg) in [("base", base), ("rlrs", rlrs)] {
        for &s in seeds {
            let mut c = cfg.clone();
            c.data_seed = s;
            jobs.push((c, format!("{arm}-seed{s}")));
        }
    }
    let mut logs = Vec::with_capacity(jobs.len());
    for r in runner.run_all(&jobs) {
        logs.push(r?);
    }
    let rlrs_logs = logs.split_off(seeds.len());
    let base_logs = logs;
    let curves = |ls: &[RunLog]| ls.iter().map(RunLog::curve).collect::<Result<Vec<_>>>();
    let base_mean = mean_curve(&curves(&base_logs)?)?;
    let rlrs_mean = mean_curve(&curves(&rlrs_logs)?)?;
    let speedup = speedup(&base_mean, &rlrs_mean)?;
    Ok(CompareReport { seeds: seeds.to_vec(), base_logs, rlrs_logs, base_mean, rlrs_mean, speedup })
}
