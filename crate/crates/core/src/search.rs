//! Greedy multiplicative local search over schedule hyperparameters, base-LR
//! grid tuning and small-to-large transfer of relative rates.
//!
//! Values move on the lattice `x0 · 5^i · 1.5^j`: the trial factors are
//! 2/3, 3/2, 1/5 and 5, tried in that order. Positions are kept as integer
//! exponents so revisiting a point reproduces the exact same value and hits
//! the evaluation cache.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{config_err, numeric_err, Error, Result};
use crate::model::ModelConfig;
use crate::schedule::{ModelKind, RelativeRate, RelativeRates};
use crate::trainer::TrainConfig;

/// Trial factors as `(power of 5, power of 3/2)`, nearest first.
pub const FACTORS: [(i32, i32); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

pub fn factor_value((fives, halves): (i32, i32)) -> f64 {
    libm::pow(5.0, fives as f64) * libm::pow(1.5, halves as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Per-component `lambda_start`/`lambda_end`, weight decay, init scale.
    Rlrs,
    /// One shared start/end multiplier, weight decay, init scale.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchEntry {
    pub name: String,
    pub initial: f64,
    pub fives: i32,
    pub halves: i32,
}

impl SearchEntry {
    pub fn new(name: impl Into<String>, initial: f64) -> Self {
        SearchEntry { name: name.into(), initial, fives: 0, halves: 0 }
    }

    pub fn value(&self) -> f64 {
        self.initial * factor_value((self.fives, self.halves))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub mode: SearchMode,
    pub entries: Vec<SearchEntry>,
}

impl SearchSpace {
    /// Entries `lambda_start.<tag>` for every component in tag order, then
    /// `lambda_end.<tag>`, then `weight_decay` and `init_scale`.
    pub fn rlrs(rates: &RelativeRates, weight_decay: f64, init_scale: f64) -> Self {
        let mut entries: Vec<SearchEntry> =
            rates.iter().map(|(t, r)| SearchEntry::new(format!("lambda_start.{}", t.key()), r.start)).collect();
        entries.extend(rates.iter().map(|(t, r)| SearchEntry::new(format!("lambda_end.{}", t.key()), r.end)));
        entries.push(SearchEntry::new("weight_decay", weight_decay));
        entries.push(SearchEntry::new("init_scale", init_scale));
        SearchSpace { mode: SearchMode::Rlrs, entries }
    }

    /// Entries `baseline.start`, `baseline.end`, `weight_decay`, `init_scale`.
    /// The two baseline entries scale the shared peak and final LR.
    pub fn baseline(start: f64, end: f64, weight_decay: f64, init_scale: f64) -> Self {
        SearchSpace {
            mode: SearchMode::Baseline,
            entries: alloc::vec![
                SearchEntry::new("baseline.start", start),
                SearchEntry::new("baseline.end", end),
                SearchEntry::new("weight_decay", weight_decay),
                SearchEntry::new("init_scale", init_scale),
            ],
        }
    }

    /// Search space seeded from a training config.
    pub fn from_config(cfg: &TrainConfig, mode: SearchMode) -> Self {
        match mode {
            SearchMode::Rlrs => Self::rlrs(&cfg.rates, cfg.weight_decay, cfg.init_scale),
            SearchMode::Baseline => Self::baseline(1.0, 1.0, cfg.weight_decay, cfg.init_scale),
        }
    }

    pub fn values(&self) -> Vec<(String, f64)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value())).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(SearchEntry::value)
    }

    fn position(&self) -> Vec<(i32, i32)> {
        self.entries.iter().map(|e| (e.fives, e.halves)).collect()
    }

    fn stepped(&self, i: usize, (df, dh): (i32, i32)) -> Self {
        let mut s = self.clone();
        s.entries[i].fives += df;
        s.entries[i].halves += dh;
        s
    }

    /// Writes the entries into `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for e in &self.entries {
            let v = e.value();
            match e.name.as_str() {
                "weight_decay" => cfg.weight_decay = v,
                "init_scale" => cfg.init_scale = v,
                "baseline.start" | "baseline.end" => {
                    let start = e.name == "baseline.start";
                    for tag in cfg.kind().components() {
                        let mut r = cfg.rates.get(*tag).unwrap_or(RelativeRate::IDENTITY);
                        if start {
                            r.start = v;
                        } else {
                            r.end = v;
                        }
                        cfg.rates.set(*tag, r);
                    }
                }
                name => {
                    let (which, tag) = name.split_once('.').ok_or_else(|| config_err!("unknown search entry {name}"))?;
                    let key = match which {
                        "lambda_start" => format!("rlrs.{tag}.start"),
                        "lambda_end" => format!("rlrs.{tag}.end"),
                        _ => return Err(config_err!("unknown search entry {name}")),
                    };
                    cfg.set(&key, &v.to_string())?;
                }
            }
        }
        Ok(())
    }
}

/// Objective provider; lower is better.
pub trait Evaluator<C> {
    fn evaluate(&mut self, candidate: &C) -> Result<f64>;

    /// Evaluates independent candidates; the default goes one by one.
    fn evaluate_batch(&mut self, candidates: &[C]) -> Vec<Result<f64>> {
        candidates.iter().map(|c| self.evaluate(c)).collect()
    }
}

impl<C, F: FnMut(&C) -> Result<f64>> Evaluator<C> for F {
    fn evaluate(&mut self, candidate: &C) -> Result<f64> {
        self(candidate)
    }
}

/// One evaluation in the audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub index: usize,
    /// Entry being varied, `None` for the starting point.
    pub entry: Option<String>,
    pub factor: Option<f64>,
    pub config: Vec<(String, f64)>,
    /// `+∞` when the evaluation failed.
    pub objective: f64,
    pub accepted: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// A full sweep made no change.
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: SearchSpace,
    pub best_objective: f64,
    pub trail: Vec<AuditRecord>,
    pub sweeps: usize,
    pub stop: StopReason,
}

impl SearchResult {
    pub fn evaluations(&self) -> usize {
        self.trail.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Maximum number of evaluations, the starting point included.
    pub budget: usize,
    /// Evaluate all uncached trials of an entry as one batch before picking
    /// the first improvement. The trajectory is the same; more evaluations
    /// may be spent.
    pub batch_trials: bool,
}

impl SearchOptions {
    pub fn budget(budget: usize) -> Self {
        SearchOptions { budget, batch_trials: false }
    }
}

struct Search<'e, E> {
    evaluator: &'e mut E,
    cache: BTreeMap<Vec<(i32, i32)>, usize>,
    trail: Vec<AuditRecord>,
    budget: usize,
}

impl<E: Evaluator<SearchSpace>> Search<'_, E> {
    fn cached(&self, s: &SearchSpace) -> Option<usize> {
        self.cache.get(&s.position()).copied()
    }

    /// Evaluates the uncached candidates that fit in the budget.
    fn run(&mut self, items: Vec<(SearchSpace, Option<String>, Option<f64>)>) {
        let fresh: Vec<_> = items
            .into_iter()
            .filter(|(s, ..)| self.cached(s).is_none())
            .take(self.budget.saturating_sub(self.trail.len()))
            .collect();
        if fresh.is_empty() {
            return;
        }
        let spaces: Vec<SearchSpace> = fresh.iter().map(|(s, ..)| s.clone()).collect();
        let results = self.evaluator.evaluate_batch(&spaces);
        for ((space, entry, factor), r) in fresh.into_iter().zip(results) {
            let (objective, error) = match r {
                Ok(v) if !v.is_nan() => (v, None),
                Ok(v) => (f64::INFINITY, Some(format!("objective {v}"))),
                Err(e) => (f64::INFINITY, Some(e.to_string())),
            };
            let index = self.trail.len();
            self.cache.insert(space.position(), index);
            self.trail.push(AuditRecord {
                index,
                entry,
                factor,
                config: space.values(),
                objective,
                accepted: false,
                error,
            });
        }
    }
}

/// Greedy coordinate search: for each entry in order, try the four factors
/// and keep the first strict improvement; repeat sweeps until one makes no
/// change or the budget runs out. Failed evaluations count as `+∞`.
pub fn local_search<E: Evaluator<SearchSpace>>(
    start: &SearchSpace,
    evaluator: &mut E,
    options: SearchOptions,
) -> Result<SearchResult> {
    if options.budget == 0 {
        return Err(config_err!("search budget must be at least 1"));
    }
    if start.entries.is_empty() {
        return Err(config_err!("search space has no entries"));
    }
    let mut s = Search { evaluator, cache: BTreeMap::new(), trail: Vec::new(), budget: options.budget };
    s.run(alloc::vec![(start.clone(), None, None)]);
    let mut current = start.clone();
    let mut best = s.trail[0].objective;
    s.trail[0].accepted = true;
    let mut sweeps = 0;

    loop {
        sweeps += 1;
        let mut changed = false;
        for i in 0..current.entries.len() {
            let trials: Vec<_> = FACTORS
                .iter()
                .map(|&f| (current.stepped(i, f), Some(current.entries[i].name.clone()), Some(factor_value(f))))
                .collect();
            if options.batch_trials {
                s.run(trials.clone());
            }
            for (cand, entry, factor) in trials {
                if s.cached(&cand).is_none() {
                    s.run(alloc::vec![(cand.clone(), entry, factor)]);
                }
                let Some(idx) = s.cached(&cand) else {
                    return Ok(SearchResult {
                        best: current,
                        best_objective: best,
                        trail: s.trail,
                        sweeps,
                        stop: StopReason::BudgetExhausted,
                    });
                };
                if s.trail[idx].objective < best {
                    best = s.trail[idx].objective;
                    s.trail[idx].accepted = true;
                    current = cand;
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            return Ok(SearchResult { best: current, best_objective: best, trail: s.trail, sweeps, stop: StopReason::Converged });
        }
    }
}

/// Answers evaluations from a recorded trail, for replaying a search.
pub struct Replay {
    answers: BTreeMap<Vec<u64>, f64>,
}

impl Replay {
    pub fn new(trail: &[AuditRecord]) -> Self {
        let answers = trail.iter().map(|r| (Self::key(&r.config), r.objective)).collect();
        Replay { answers }
    }

    fn key(config: &[(String, f64)]) -> Vec<u64> {
        config.iter().map(|(_, v)| v.to_bits()).collect()
    }
}

impl Evaluator<SearchSpace> for Replay {
    fn evaluate(&mut self, candidate: &SearchSpace) -> Result<f64> {
        let o = self
            .answers
            .get(&Self::key(&candidate.values()))
            .copied()
            .ok_or_else(|| config_err!("replay has no record for {:?}", candidate.values()))?;
        if o.is_finite() {
            Ok(o)
        } else {
            Err(numeric_err!("recorded failure"))
        }
    }
}

/// `{1, 2, 5} · 10^-n` for each `n`, ascending.
pub fn lr_grid(exponents: &[i32]) -> Vec<f64> {
    let mut g: Vec<f64> = exponents
        .iter()
        .flat_map(|&n| [1.0, 2.0, 5.0].map(|m| m / libm::pow(10.0, n as f64)))
        .collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub eta_base: f64,
    pub objective: f64,
    /// Every grid point with its objective (`+∞` on failure), ascending LR.
    pub evaluated: Vec<(f64, f64)>,
}

/// Picks the grid LR with the lowest objective, preferring the smaller LR on
/// ties.
pub fn tune_base_lr<E: Evaluator<f64>>(exponents: &[i32], evaluator: &mut E) -> Result<TuneResult> {
    tune_over(&lr_grid(exponents), evaluator)
}

/// [`tune_base_lr`] over an explicit list of learning rates.
pub fn tune_over<E: Evaluator<f64>>(grid: &[f64], evaluator: &mut E) -> Result<TuneResult> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() {
        return Err(config_err!("empty base-LR grid"));
    }
    let results = evaluator.evaluate_batch(&grid);
    let evaluated: Vec<(f64, f64)> = grid
        .iter()
        .zip(results)
        .map(|(&lr, r)| (lr, r.ok().filter(|v| !v.is_nan()).unwrap_or(f64::INFINITY)))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &(lr, obj) in &evaluated {
        if obj.is_finite() && best.is_none_or(|(_, b)| obj < b) {
            best = Some((lr, obj));
        }
    }
    let (eta_base, objective) = best.ok_or_else(|| numeric_err!("every base LR in the grid diverged"))?;
    Ok(TuneResult { eta_base, objective, evaluated })
}

/// Builds a config for `large_model` carrying the relative rates of `small`
/// verbatim. Everything else starts from `small`; the base LR still has to
/// be re-tuned on the large model.
pub fn transfer(small: &TrainConfig, source_run: &str, large_model: &ModelConfig) -> Result<TrainConfig> {
    let from: ModelKind = small.kind();
    let to = large_model.kind();
    if from != to {
        return Err(config_err!("cannot transfer {from} relative rates to a {to} model"));
    }
    let mut large = small.clone();
    large.model = large_model.clone();
    if let crate::trainer::DataSpec::Synthetic(d) = &mut large.data {
        d.vocab_size = large_model.vocab_size;
    }
    large.provenance = Some(source_run.to_string());
    large.validate().map_err(|e| match e {
        Error::Config(m) => config_err!("transferred config invalid: {m}"),
        other => other,
    })?;
    Ok(large)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{preset, ComponentTag};
    use alloc::vec;

    fn sq_log(target: f64) -> impl FnMut(&SearchSpace) -> Result<f64> {
        move |s| {
            let d = libm::log(s.entries[0].value()) - libm::log(target);
            Ok(d * d)
        }
    }

    #[test]
    fn one_dimensional_walk() {
        let start = SearchSpace { mode: SearchMode::Rlrs, entries: vec![SearchEntry::new("x", 1.0)] };
        let r = local_search(&start, &mut sq_log(4.0), SearchOptions::budget(100)).unwrap();
        let x = r.best.entries[0].value();
        assert!(x / 4.0 < 1.5 && 4.0 / x < 1.5, "{x}");
        assert_eq!(r.stop, StopReason::Converged);
        assert!(r.trail.iter().filter(|t| t.accepted).count() >= 2);
    }

    #[test]
    fn optimal_start_takes_one_sweep() {
        let start = SearchSpace { mode: SearchMode::Rlrs, entries: vec![SearchEntry::new("x", 4.0)] };
        let r = local_search(&start, &mut sq_log(4.0), SearchOptions::budget(100)).unwrap();
        assert_eq!((r.sweeps, r.evaluations()), (1, 5));
        assert_eq!(r.best, start);
    }

    #[test]
    fn budget_and_failures() {
        let start = SearchSpace { mode: SearchMode::Rlrs, entries: vec![SearchEntry::new("x", 1.0)] };
        let r = local_search(&start, &mut sq_log(100.0), SearchOptions::budget(3)).unwrap();
        assert_eq!((r.stop, r.evaluations()), (StopReason::BudgetExhausted, 3));
        assert!(local_search(&start, &mut sq_log(1.0), SearchOptions::budget(0)).is_err());

        let mut fails = |s: &SearchSpace| {
            let x = s.entries[0].value();
            if x < 1.0 {
                Err(numeric_err!("diverged"))
            } else {
                Ok((x - 2.0).abs())
            }
        };
        let r = local_search(&start, &mut fails, SearchOptions::budget(6)).unwrap();
        let failed = r.trail.iter().find(|t| t.error.is_some()).unwrap();
        assert_eq!(failed.objective, f64::INFINITY);
        assert!(!failed.accepted);
    }

    #[test]
    fn cached_points_are_not_re_evaluated() {
        let start = SearchSpace { mode: SearchMode::Rlrs, entries: vec![SearchEntry::new("x", 1.0)] };
        let r = local_search(&start, &mut sq_log(3.0), SearchOptions::budget(100)).unwrap();
        let mut keys: Vec<_> = r.trail.iter().map(|t| t.config[0].1.to_bits()).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), r.trail.len());
    }

    #[test]
    fn space_layouts_and_apply() {
        let s = SearchSpace::rlrs(&preset(ModelKind::Moe), 0.1, 0.15);
        assert_eq!(s.entries.len(), 12);
        assert_eq!(s.entries[0].name, "lambda_start.embedding");
        assert_eq!(s.entries[5].name, "lambda_end.embedding");
        let mut cfg = TrainConfig::default();
        s.apply(&mut cfg).unwrap();
        assert_eq!(cfg.rates, preset(ModelKind::Moe));

        let b = SearchSpace::baseline(2.0, 0.5, 0.2, 0.3);
        b.apply(&mut cfg).unwrap();
        assert_eq!(cfg.rates.get(ComponentTag::Router), Some(RelativeRate::new(2.0, 0.5)));
        assert_eq!((cfg.weight_decay, cfg.init_scale), (0.2, 0.3));
    }

    #[test]
    fn grid_and_ties() {
        assert_eq!(lr_grid(&[3]), vec![1e-3, 2e-3, 5e-3]);
        let r = tune_base_lr(&[3], &mut |_: &f64| Ok(1.0)).unwrap();
        assert_eq!(r.eta_base, 1e-3);
        assert!(tune_base_lr(&[3], &mut |_: &f64| Err(numeric_err!("nan"))).is_err());
    }

    #[test]
    fn transfer_checks_kind() {
        let mut small = TrainConfig::default();
        small.rates = preset(ModelKind::Moe);
        let large_model = ModelConfig { d_model: 128, vocab_size: 64, ..ModelConfig::default() };
        let large = transfer(&small, "small", &large_model).unwrap();
        assert_eq!(large.rates, small.rates);
        assert_eq!(large.provenance.as_deref(), Some("small"));
        let dense = ModelConfig { n_experts: 0, ..large_model };
        assert!(matches!(transfer(&small, "small", &dense), Err(Error::Config(_))));
    }
}
