//! Per-component learning-rate schedules.
//!
//! A [`ScheduleSpec`] describes the shared base schedule: peak rate
//! `eta_base`, final fraction `alpha_end`, a linear warmup over the first
//! `warmup_fraction` of training, then a cosine decay. [`RelativeRates`]
//! attaches a `(lambda_start, lambda_end)` pair to every component, giving
//!
//! ```text
//! eta_start(m) = eta_base * lambda_start(m)
//! eta_end(m)   = eta_base * alpha_end * lambda_end(m)
//! ```
//!
//! Warmup ramps from zero to the component's own `eta_start(m)`; the cosine
//! segment then spans the remaining `total_steps - warmup_steps` steps so both
//! endpoints are actually attained. Everything here is a pure function of the
//! step, so schedules can be queried in any order.

use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use crate::error::{config_err, domain_err, Error, Result};

/// The parameter classes that get their own schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentTag {
    Embedding,
    Attention,
    FeedForward,
    Router,
    Experts,
    Unembedding,
}

impl ComponentTag {
    /// All tags in canonical order. Column and sweep orders follow this.
    pub const ALL: [ComponentTag; 6] = [
        ComponentTag::Embedding,
        ComponentTag::Attention,
        ComponentTag::FeedForward,
        ComponentTag::Router,
        ComponentTag::Experts,
        ComponentTag::Unembedding,
    ];

    /// Lower-case key used in config files and CSV headers.
    pub fn key(self) -> &'static str {
        match self {
            ComponentTag::Embedding => "embedding",
            ComponentTag::Attention => "attention",
            ComponentTag::FeedForward => "feedforward",
            ComponentTag::Router => "router",
            ComponentTag::Experts => "experts",
            ComponentTag::Unembedding => "unembedding",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ComponentTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let tag = match lower.as_str() {
            "embedding" => ComponentTag::Embedding,
            "attention" => ComponentTag::Attention,
            "feedforward" | "feed_forward" | "ff" => ComponentTag::FeedForward,
            "router" => ComponentTag::Router,
            "experts" | "expert" => ComponentTag::Experts,
            "unembedding" => ComponentTag::Unembedding,
            _ => return Err(config_err!("unknown component `{s}`")),
        };
        Ok(tag)
    }
}

/// Dense transformer or mixture-of-experts transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Dense,
    Moe,
}

impl ModelKind {
    /// The schedule set of this model kind, in canonical order.
    pub fn components(self) -> &'static [ComponentTag] {
        match self {
            ModelKind::Dense => &[
                ComponentTag::Embedding,
                ComponentTag::Attention,
                ComponentTag::FeedForward,
                ComponentTag::Unembedding,
            ],
            ModelKind::Moe => &[
                ComponentTag::Embedding,
                ComponentTag::Attention,
                ComponentTag::Router,
                ComponentTag::Experts,
                ComponentTag::Unembedding,
            ],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Moe => "moe",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(ModelKind::Dense),
            "moe" => Ok(ModelKind::Moe),
            _ => Err(config_err!("unknown model kind `{s}` (expected moe or dense)")),
        }
    }
}

/// Shared base schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub eta_base: f64,
    pub alpha_end: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(eta_base: f64, alpha_end: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        let spec = ScheduleSpec { eta_base, alpha_end, warmup_fraction, total_steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_base.is_finite() && self.eta_base > 0.0) {
            return Err(config_err!("schedule.eta_base must be positive, got {}", self.eta_base));
        }
        if !(self.alpha_end > 0.0 && self.alpha_end <= 1.0) {
            return Err(config_err!("schedule.alpha_end must lie in (0, 1], got {}", self.alpha_end));
        }
        if !(self.warmup_fraction >= 0.0 && self.warmup_fraction < 1.0) {
            return Err(config_err!(
                "schedule.warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.total_steps == 0 {
            return Err(config_err!("schedule.total_steps must be positive"));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(config_err!(
                "warmup of {} steps leaves no cosine segment in {} total steps",
                self.warmup_steps(),
                self.total_steps
            ));
        }
        Ok(())
    }

    /// `round(warmup_fraction * total_steps)`.
    pub fn warmup_steps(&self) -> u64 {
        libm::round(self.warmup_fraction * self.total_steps as f64) as u64
    }
}

/// Relative multipliers of one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeRate {
    pub start: f64,
    pub end: f64,
}

impl RelativeRate {
    pub const IDENTITY: RelativeRate = RelativeRate { start: 1.0, end: 1.0 };

    pub const fn new(start: f64, end: f64) -> Self {
        RelativeRate { start, end }
    }
}

/// Per-component `(lambda_start, lambda_end)` multipliers.
///
/// A multiplier of zero is accepted and freezes the component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelativeRates {
    rates: [Option<RelativeRate>; 6],
}

impl RelativeRates {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every component of `kind` mapped to `(1, 1)`.
    pub fn identity(kind: ModelKind) -> Self {
        Self::uniform(kind, RelativeRate::IDENTITY)
    }

    pub fn uniform(kind: ModelKind, rate: RelativeRate) -> Self {
        let mut rates = Self::empty();
        for &tag in kind.components() {
            rates.set(tag, rate);
        }
        rates
    }

    pub fn get(&self, tag: ComponentTag) -> Option<RelativeRate> {
        self.rates[tag.index()]
    }

    /// Like [`get`](Self::get) but reports a missing tag as a configuration error.
    pub fn require(&self, tag: ComponentTag) -> Result<RelativeRate> {
        self.get(tag)
            .ok_or_else(|| config_err!("no relative rates configured for component `{tag}`"))
    }

    pub fn set(&mut self, tag: ComponentTag, rate: RelativeRate) {
        self.rates[tag.index()] = Some(rate);
    }

    pub fn remove(&mut self, tag: ComponentTag) {
        self.rates[tag.index()] = None;
    }

    /// Configured tags in canonical order.
    pub fn components(&self) -> impl Iterator<Item = ComponentTag> + '_ {
        ComponentTag::ALL.into_iter().filter(|t| self.rates[t.index()].is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ComponentTag, RelativeRate)> + '_ {
        ComponentTag::ALL
            .into_iter()
            .filter_map(|t| self.rates[t.index()].map(|r| (t, r)))
    }

    /// The model kind whose schedule set matches the configured tags exactly.
    pub fn kind(&self) -> Option<ModelKind> {
        [ModelKind::Dense, ModelKind::Moe]
            .into_iter()
            .find(|k| self.components().eq(k.components().iter().copied()))
    }

    /// Checks the configured set is exactly the schedule set of `kind` and
    /// every multiplier is finite and non-negative.
    pub fn validate_for(&self, kind: ModelKind) -> Result<()> {
        for &tag in kind.components() {
            self.require(tag)?;
        }
        if let Some(extra) = self.components().find(|t| !kind.components().contains(t)) {
            return Err(config_err!("component `{extra}` is not scheduled in a {kind} model"));
        }
        for (tag, rate) in self.iter() {
            for (which, v) in [("start", rate.start), ("end", rate.end)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(config_err!("rlrs.{tag}.{which} must be finite and >= 0, got {v}"));
                }
            }
        }
        Ok(())
    }
}

/// Shipped relative rates, tuned on the smallest dense and MoE models.
pub fn preset(kind: ModelKind) -> RelativeRates {
    let table: &[(ComponentTag, f64, f64)] = match kind {
        ModelKind::Moe => &[
            (ComponentTag::Embedding, 5.0, 0.6),
            (ComponentTag::Attention, 1.0, 1.0),
            (ComponentTag::Router, 0.6, 1.0),
            (ComponentTag::Experts, 0.3, 1.125),
            (ComponentTag::Unembedding, 0.6, 0.4),
        ],
        ModelKind::Dense => &[
            (ComponentTag::Embedding, 5.0, 0.6),
            (ComponentTag::Attention, 1.0, 0.2),
            (ComponentTag::FeedForward, 1.0, 0.6),
            (ComponentTag::Unembedding, 1.0, 0.4),
        ],
    };
    let mut rates = RelativeRates::empty();
    for &(tag, start, end) in table {
        rates.set(tag, RelativeRate::new(start, end));
    }
    rates
}

/// `(eta_base * lambda_start, eta_base * alpha_end * lambda_end)` for `tag`.
pub fn endpoint_lrs(spec: &ScheduleSpec, rates: &RelativeRates, tag: ComponentTag) -> Result<(f64, f64)> {
    let rate = rates.require(tag)?;
    Ok((spec.eta_base * rate.start, spec.eta_base * spec.alpha_end * rate.end))
}

/// Learning rate of component `tag` at `step` (`0 ..= total_steps`).
pub fn lr_at(spec: &ScheduleSpec, rates: &RelativeRates, tag: ComponentTag, step: u64) -> Result<f64> {
    ComponentSchedule::new(spec, rates, tag)?.lr_at(step)
}

/// One component's schedule with its endpoints resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSchedule {
    pub eta_start: f64,
    pub eta_end: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ComponentSchedule {
    pub fn new(spec: &ScheduleSpec, rates: &RelativeRates, tag: ComponentTag) -> Result<Self> {
        spec.validate()?;
        let (eta_start, eta_end) = endpoint_lrs(spec, rates, tag)?;
        Ok(ComponentSchedule {
            eta_start,
            eta_end,
            warmup_steps: spec.warmup_steps(),
            total_steps: spec.total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(domain_err!("step {step} outside 0..={}", self.total_steps));
        }
        let w = self.warmup_steps;
        if step < w {
            return Ok(self.eta_start * step as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.eta_end + 0.5 * (self.eta_start - self.eta_end) * (1.0 + libm::cos(PI * progress)))
    }
}

/// All component schedules of one run, resolved once.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    entries: alloc::vec::Vec<(ComponentTag, ComponentSchedule)>,
}

impl Schedules {
    pub fn new(spec: &ScheduleSpec, rates: &RelativeRates, kind: ModelKind) -> Result<Self> {
        spec.validate()?;
        rates.validate_for(kind)?;
        let entries = kind
            .components()
            .iter()
            .map(|&tag| ComponentSchedule::new(spec, rates, tag).map(|s| (tag, s)))
            .collect::<Result<_>>()?;
        Ok(Schedules { entries })
    }

    pub fn tags(&self) -> impl Iterator<Item = ComponentTag> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    /// Learning rate of every scheduled tag at `step`, in canonical order.
    pub fn lrs_at(&self, step: u64) -> Result<LrByTag> {
        let mut lrs = LrByTag::default();
        for (tag, sched) in &self.entries {
            lrs.set(*tag, sched.lr_at(step)?);
        }
        Ok(lrs)
    }
}

/// A learning rate per component tag.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LrByTag {
    lrs: [Option<f64>; 6],
}

impl LrByTag {
    pub fn uniform(tags: impl IntoIterator<Item = ComponentTag>, lr: f64) -> Self {
        let mut out = Self::default();
        for tag in tags {
            out.set(tag, lr);
        }
        out
    }

    pub fn set(&mut self, tag: ComponentTag, lr: f64) {
        self.lrs[tag.index()] = Some(lr);
    }

    pub fn get(&self, tag: ComponentTag) -> Option<f64> {
        self.lrs[tag.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ComponentTag, f64)> + '_ {
        ComponentTag::ALL
            .into_iter()
            .filter_map(|t| self.lrs[t.index()].map(|lr| (t, lr)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(total: u64) -> ScheduleSpec {
        ScheduleSpec::new(3e-3, 0.04, 0.01, total).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn endpoints_of_moe_experts() {
        let (s, e) = endpoint_lrs(&spec(1000), &preset(ModelKind::Moe), ComponentTag::Experts).unwrap();
        assert!(rel(s, 9e-4) < 1e-12, "{s}");
        assert!(rel(e, 1.35e-4) < 1e-12, "{e}");
    }

    #[test]
    fn endpoints_identity_and_forced() {
        let sp = spec(1000);
        let rates = RelativeRates::identity(ModelKind::Dense);
        let (s, e) = endpoint_lrs(&sp, &rates, ComponentTag::FeedForward).unwrap();
        assert_eq!(s, sp.eta_base);
        assert_eq!(e, sp.eta_base * sp.alpha_end);

        let sp = ScheduleSpec::new(1e-3, 1.0, 0.0, 10).unwrap();
        let mut rates = RelativeRates::empty();
        rates.set(ComponentTag::Attention, RelativeRate::new(2.0, 0.5));
        let (s, e) = endpoint_lrs(&sp, &rates, ComponentTag::Attention).unwrap();
        assert!(rel(s, 2e-3) < 1e-15);
        assert!(rel(e, 5e-4) < 1e-15);
    }

    #[test]
    fn missing_component_is_config_error() {
        let rates = RelativeRates::identity(ModelKind::Dense);
        let err = endpoint_lrs(&spec(100), &rates, ComponentTag::Router).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn lr_at_landmarks() {
        let sp = spec(1000);
        let rates = preset(ModelKind::Moe);
        let tag = ComponentTag::Embedding;
        let (s, e) = endpoint_lrs(&sp, &rates, tag).unwrap();
        let w = sp.warmup_steps();
        assert_eq!(w, 10);
        assert_eq!(lr_at(&sp, &rates, tag, 0).unwrap(), 0.0);
        assert!(rel(lr_at(&sp, &rates, tag, w).unwrap(), s) < 1e-15);
        assert!(rel(lr_at(&sp, &rates, tag, 1000).unwrap(), e) < 1e-12);
        let mid = w + (1000 - w) / 2;
        assert!(rel(lr_at(&sp, &rates, tag, mid).unwrap(), (s + e) / 2.0) < 1e-12);
        assert!(rel(lr_at(&sp, &rates, tag, 5).unwrap(), s / 2.0) < 1e-15);
    }

    #[test]
    fn lr_at_rejects_out_of_range_step() {
        let err = lr_at(&spec(100), &preset(ModelKind::Dense), ComponentTag::Attention, 101).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn presets_match_tables() {
        let moe = preset(ModelKind::Moe);
        assert_eq!(moe.get(ComponentTag::Experts), Some(RelativeRate::new(0.3, 1.125)));
        assert_eq!(moe.get(ComponentTag::Attention), Some(RelativeRate::new(1.0, 1.0)));
        assert_eq!(moe.get(ComponentTag::Router), Some(RelativeRate::new(0.6, 1.0)));
        assert_eq!(moe.get(ComponentTag::Embedding), Some(RelativeRate::new(5.0, 0.6)));
        assert_eq!(moe.get(ComponentTag::Unembedding), Some(RelativeRate::new(0.6, 0.4)));
        assert_eq!(moe.kind(), Some(ModelKind::Moe));

        let dense = preset(ModelKind::Dense);
        assert_eq!(dense.get(ComponentTag::Attention), Some(RelativeRate::new(1.0, 0.2)));
        assert_eq!(dense.get(ComponentTag::FeedForward), Some(RelativeRate::new(1.0, 0.6)));
        assert_eq!(dense.get(ComponentTag::Unembedding), Some(RelativeRate::new(1.0, 0.4)));
        assert_eq!(dense.kind(), Some(ModelKind::Dense));
    }

    #[test]
    fn schedule_sets_are_exact() {
        assert!(preset(ModelKind::Dense).validate_for(ModelKind::Moe).is_err());
        assert!(preset(ModelKind::Moe).validate_for(ModelKind::Dense).is_err());
        let mut rates = RelativeRates::identity(ModelKind::Moe);
        rates.set(ComponentTag::Experts, RelativeRate::new(-1.0, 1.0));
        assert!(rates.validate_for(ModelKind::Moe).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ScheduleSpec::new(0.0, 0.1, 0.0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 0.0, 0.0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 1.5, 0.0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 0.5, 1.0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 0.5, 0.99, 1).is_err());
        assert!(ScheduleSpec::new(1e-3, 0.5, 0.0, 0).is_err());
    }

    #[test]
    fn tag_keys_round_trip() {
        for tag in ComponentTag::ALL {
            assert_eq!(tag.key().parse::<ComponentTag>().unwrap(), tag);
        }
    }
}
