//! Loss curves sampled at every whole percent of training, seed averaging,
//! the speedup metric and the run log that carries LR and update-magnitude
//! traces.
//!
//! Checkpoint `p` (0..=100) sits at step `max(1, round(p·T/100))`. The loss
//! stored there is the mean training loss over the steps since the previous
//! checkpoint, which smooths single-batch noise before curves are compared.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{domain_err, Result};
use crate::schedule::ComponentTag;

/// Number of checkpoints in a curve (0% through 100%).
pub const CHECKPOINTS: usize = 101;

/// Step of checkpoint `percent` in a run of `total_steps` steps.
pub fn checkpoint_step(percent: usize, total_steps: u64) -> u64 {
    let s = libm::round(percent as f64 * total_steps as f64 / 100.0) as u64;
    s.max(1)
}

/// All 101 checkpoint steps.
pub fn checkpoint_steps(total_steps: u64) -> Vec<u64> {
    (0..CHECKPOINTS).map(|p| checkpoint_step(p, total_steps)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    total_steps: u64,
    samples: Vec<f64>,
}

impl LossCurve {
    pub fn new(total_steps: u64, samples: Vec<f64>) -> Result<Self> {
        if total_steps < 100 {
            return Err(domain_err!("a loss curve needs at least 100 steps, got {total_steps}"));
        }
        if samples.len() != CHECKPOINTS {
            return Err(domain_err!("a loss curve has {CHECKPOINTS} samples, got {}", samples.len()));
        }
        if let Some(p) = samples.iter().position(|x| !x.is_finite()) {
            return Err(domain_err!("non-finite loss at checkpoint {p}%"));
        }
        Ok(LossCurve { total_steps, samples })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn final_loss(&self) -> f64 {
        self.samples[CHECKPOINTS - 1]
    }

    pub fn steps(&self) -> Vec<u64> {
        checkpoint_steps(self.total_steps)
    }
}

/// Pointwise arithmetic mean of curves with equal step counts.
pub fn mean_curve(curves: &[LossCurve]) -> Result<LossCurve> {
    let first = curves.first().ok_or_else(|| domain_err!("mean_curve of no curves"))?;
    if let Some(c) = curves.iter().find(|c| c.total_steps != first.total_steps) {
        return Err(domain_err!("mean_curve: {} steps vs {} steps", c.total_steps, first.total_steps));
    }
    let n = curves.len() as f64;
    let samples = (0..CHECKPOINTS)
        .map(|p| curves.iter().map(|c| c.samples[p]).sum::<f64>() / n)
        .collect();
    LossCurve::new(first.total_steps, samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedupOutcome {
    Measured {
        /// `(T_base / T_relative − 1) · 100`.
        percent: f64,
        t_base: u64,
        t_relative: u64,
        /// Checkpoint percent at which the candidate crossed.
        checkpoint: usize,
    },
    /// The candidate never reached the baseline's final loss.
    NotReached,
}

impl SpeedupOutcome {
    pub fn percent(&self) -> Option<f64> {
        match self {
            SpeedupOutcome::Measured { percent, .. } => Some(*percent),
            SpeedupOutcome::NotReached => None,
        }
    }
}

/// Speedup of `candidate` over `base`.
///
/// The target is the baseline's final loss. `T_relative` is the first
/// checkpoint step where the candidate is at or below it, `T_base` the first
/// where the baseline itself is. `T_base` is the full step count unless the
/// baseline dipped to its final level earlier; measuring both the same way
/// keeps `speedup(c, c) = 0` for noisy curves too.
pub fn speedup(base: &LossCurve, candidate: &LossCurve) -> Result<SpeedupOutcome> {
    if base.total_steps != candidate.total_steps {
        return Err(domain_err!(
            "speedup: curves of {} and {} steps",
            base.total_steps,
            candidate.total_steps
        ));
    }
    let target = base.final_loss();
    let Some(p) = candidate.samples.iter().position(|&x| x <= target) else {
        return Ok(SpeedupOutcome::NotReached);
    };
    let reached = base.samples.iter().position(|&x| x <= target).unwrap_or(CHECKPOINTS - 1);
    let t_base = checkpoint_step(reached, base.total_steps);
    let t_relative = checkpoint_step(p, candidate.total_steps);
    let percent = (t_base as f64 / t_relative as f64 - 1.0) * 100.0;
    Ok(SpeedupOutcome::Measured { percent, t_base, t_relative, checkpoint: p })
}

/// Accumulates per-step training losses into checkpoint samples.
#[derive(Debug, Clone)]
pub struct CurveRecorder {
    total_steps: u64,
    steps: Vec<u64>,
    next: usize,
    sum: f64,
    count: u64,
    samples: Vec<f64>,
}

impl CurveRecorder {
    pub fn new(total_steps: u64) -> Result<Self> {
        if total_steps < 100 {
            return Err(domain_err!("curve recording needs at least 100 steps, got {total_steps}"));
        }
        Ok(CurveRecorder {
            total_steps,
            steps: checkpoint_steps(total_steps),
            next: 0,
            sum: 0.0,
            count: 0,
            samples: Vec::with_capacity(CHECKPOINTS),
        })
    }

    /// Records the loss of `step` (1-based, consecutive). Returns the
    /// checkpoint indices completed by this step, usually empty or a single
    /// index; short runs can close two checkpoints on the same step.
    pub fn record(&mut self, step: u64, loss: f64) -> Range<usize> {
        self.sum += loss;
        self.count += 1;
        let start = self.next;
        while self.next < CHECKPOINTS && self.steps[self.next] == step {
            let sample = if self.count > 0 { self.sum / self.count as f64 } else { loss };
            self.samples.push(sample);
            self.sum = 0.0;
            self.count = 0;
            self.next += 1;
        }
        start..self.next
    }

    /// Samples recorded so far.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn finish(self) -> Result<LossCurve> {
        LossCurve::new(self.total_steps, self.samples)
    }
}

/// Per-component values sampled at each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub tag: ComponentTag,
    pub values: Vec<f64>,
}

/// Everything a finished (or partial) run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub run_id: String,
    /// Flat `key = value` echo of the configuration that produced the run.
    pub config: Vec<(String, String)>,
    pub init_seed: u64,
    pub data_seed: u64,
    pub total_steps: u64,
    /// Checkpoint losses recorded so far; 101 for a complete run.
    pub losses: Vec<f64>,
    pub lr: Vec<Trace>,
    pub update_norm: Vec<Trace>,
    /// Seconds since the start of training at each checkpoint, when timed.
    pub wall_clock: Option<Vec<f64>>,
}

impl RunLog {
    pub fn is_complete(&self) -> bool {
        self.losses.len() == CHECKPOINTS
    }

    pub fn curve(&self) -> Result<LossCurve> {
        LossCurve::new(self.total_steps, self.losses.clone())
    }

    pub fn tags(&self) -> Vec<ComponentTag> {
        self.lr.iter().map(|t| t.tag).collect()
    }

    pub fn lr_trace(&self, tag: ComponentTag) -> Option<&[f64]> {
        self.lr.iter().find(|t| t.tag == tag).map(|t| t.values.as_slice())
    }

    pub fn update_norm_trace(&self, tag: ComponentTag) -> Option<&[f64]> {
        self.update_norm.iter().find(|t| t.tag == tag).map(|t| t.values.as_slice())
    }

    /// Checks that every trace is aligned with the recorded checkpoints.
    pub fn validate(&self) -> Result<()> {
        let n = self.losses.len();
        for t in self.lr.iter().chain(&self.update_norm) {
            if t.values.len() != n {
                return Err(domain_err!("trace for {} has {} values, expected {n}", t.tag, t.values.len()));
            }
        }
        if let Some(w) = &self.wall_clock {
            if w.len() != n {
                return Err(domain_err!("wall-clock trace has {} values, expected {n}", w.len()));
            }
        }
        Ok(())
    }

    /// Checkpoint steps covered by this log.
    pub fn steps(&self) -> Vec<u64> {
        checkpoint_steps(self.total_steps).into_iter().take(self.losses.len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn constant(v: f64) -> LossCurve {
        LossCurve::new(1000, vec![v; CHECKPOINTS]).unwrap()
    }

    fn linear(from: f64, to: f64) -> LossCurve {
        let s = (0..CHECKPOINTS).map(|p| from + (to - from) * p as f64 / 100.0).collect();
        LossCurve::new(1000, s).unwrap()
    }

    #[test]
    fn checkpoint_grid() {
        let s = checkpoint_steps(1000);
        assert_eq!((s[0], s[1], s[50], s[100]), (1, 10, 500, 1000));
        let short = checkpoint_steps(120);
        assert_eq!((short[0], short[1], short[2]), (1, 1, 2));
    }

    #[test]
    fn mean_of_constants() {
        let m = mean_curve(&[constant(2.0), constant(4.0)]).unwrap();
        assert!(m.samples().iter().all(|&x| x == 3.0));
        assert_eq!(mean_curve(&[constant(2.5)]).unwrap(), constant(2.5));
        let other = LossCurve::new(500, vec![1.0; CHECKPOINTS]).unwrap();
        assert!(mean_curve(&[constant(1.0), other]).is_err());
        assert!(mean_curve(&[]).is_err());
    }

    #[test]
    fn speedup_examples() {
        let c = linear(5.0, 3.0);
        assert_eq!(speedup(&c, &c).unwrap().percent(), Some(0.0));

        // Candidate reaches 3.0 at 80%.
        let mut s = vec![4.0; CHECKPOINTS];
        for x in &mut s[80..] {
            *x = 2.9;
        }
        s[80] = 3.0;
        let fast = LossCurve::new(1000, s).unwrap();
        match speedup(&c, &fast).unwrap() {
            SpeedupOutcome::Measured { percent, t_base, t_relative, checkpoint } => {
                assert_eq!((t_base, t_relative, checkpoint), (1000, 800, 80));
                assert!((percent - 25.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(speedup(&c, &constant(3.5)).unwrap(), SpeedupOutcome::NotReached);

        // A baseline that already sat at its final level at 50%.
        let mut bumpy = linear(5.0, 3.0).samples().to_vec();
        bumpy[50] = 2.5;
        let bumpy = LossCurve::new(1000, bumpy).unwrap();
        assert_eq!(speedup(&bumpy, &bumpy).unwrap().percent(), Some(0.0));
        match speedup(&bumpy, &fast).unwrap() {
            SpeedupOutcome::Measured { t_base, percent, .. } => {
                assert_eq!(t_base, 500);
                assert!((percent - (500.0 / 800.0 - 1.0) * 100.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn curve_rejects_bad_input() {
        assert!(LossCurve::new(99, vec![1.0; CHECKPOINTS]).is_err());
        assert!(LossCurve::new(100, vec![1.0; 100]).is_err());
        let mut s = vec![1.0; CHECKPOINTS];
        s[7] = f64::NAN;
        assert!(LossCurve::new(100, s).is_err());
    }

    #[test]
    fn recorder_windows() {
        let mut r = CurveRecorder::new(200).unwrap();
        let mut hits = Vec::new();
        for step in 1..=200u64 {
            for p in r.record(step, step as f64) {
                hits.push(p);
            }
        }
        assert_eq!(hits, (0..CHECKPOINTS).collect::<Vec<_>>());
        let curve = r.finish().unwrap();
        // Checkpoint 0 is step 1, checkpoint 1 averages steps 2..=2, then pairs.
        assert_eq!(curve.samples()[0], 1.0);
        assert_eq!(curve.samples()[1], 2.0);
        assert_eq!(curve.samples()[2], 3.5);
        assert_eq!(curve.final_loss(), 199.5);
    }

    #[test]
    fn recorder_short_run_repeats_sample() {
        let mut r = CurveRecorder::new(120).unwrap();
        assert_eq!(r.record(1, 7.0), 0..2);
        assert_eq!(r.samples(), &[7.0, 7.0]);
    }
}
