//! Flat `section.key = value` config files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are those of [`TrainConfig::to_pairs`] plus `rlrs.preset`; unknown
//! or repeated keys are errors that name the line.

use std::fs;
use std::path::Path;

use rlrs_core::schedule::RelativeRates;
use rlrs_core::trainer::TrainConfig;

use crate::error::{LabError, Result};

/// Keys a config file must set explicitly; everything else has a default.
pub const REQUIRED: [&str; 4] = ["model.d_model", "model.n_layers", "schedule.eta_base", "schedule.total_steps"];

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(LabError::Config(format!("line {}: malformed key {k:?}", i + 1)));
        }
        if pairs.iter().any(|(p, _)| p == k) {
            return Err(LabError::Config(format!("line {}: {k} set twice", i + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Builds a validated config from file text.
pub fn from_text(text: &str) -> Result<TrainConfig> {
    let pairs = parse(text)?;
    if let Some(missing) = REQUIRED.iter().find(|k| !pairs.iter().any(|(p, _)| p == *k)) {
        return Err(LabError::Config(format!("missing required key {missing}")));
    }
    Ok(TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    from_text(&text).map_err(|e| match e {
        LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Renders every key of `cfg`; the output parses back to `cfg`.
pub fn render(cfg: &TrainConfig) -> String {
    render_pairs(&cfg.to_pairs())
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    let mut section = "";
    for (k, v) in pairs {
        let s = k.split('.').next().unwrap_or("");
        if s != section && !out.is_empty() {
            out.push('\n');
        }
        section = s;
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Relative-rate lines only, as printed by `rlrs presets`.
pub fn render_rates(rates: &RelativeRates) -> String {
    let mut out = String::new();
    for (tag, r) in rates.iter() {
        out.push_str(&format!("rlrs.{tag}.start = {}\nrlrs.{tag}.end = {}\n", r.start, r.end));
    }
    out
}

pub fn save(cfg: &TrainConfig, path: &Path) -> Result<()> {
    fs::write(path, render(cfg)).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlrs_core::schedule::{preset, ModelKind};

    const MINIMAL: &str = "model.d_model = 32\nmodel.n_layers = 2\nschedule.eta_base = 2e-3\nschedule.total_steps = 200\n";

    #[test]
    fn comments_and_blank_lines() {
        let p = parse("# header\n\nmodel.d_model = 32 # width\n  schedule.eta_base=1e-3\n").unwrap();
        assert_eq!(p, [("model.d_model".into(), "32".into()), ("schedule.eta_base".into(), "1e-3".into())]);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse("model.d_model 32").is_err());
        assert!(parse("a = 1\na = 2").is_err());
        assert!(from_text(&format!("{MINIMAL}model.depth = 3\n")).is_err());
        let err = from_text("model.d_model = 32\nmodel.n_layers = 2\nschedule.total_steps = 200\n").unwrap_err();
        assert!(err.to_string().contains("schedule.eta_base"));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = from_text(&format!("{MINIMAL}rlrs.preset = shipped\n")).unwrap();
        cfg.provenance = Some("small run".into());
        assert_eq!(cfg.rates, preset(ModelKind::Moe));
        assert_eq!(from_text(&render(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn preset_lines() {
        let text = render_rates(&preset(ModelKind::Moe));
        assert!(text.contains("rlrs.experts.start = 0.3\n"));
        assert_eq!(text.lines().count(), 10);
    }
}
