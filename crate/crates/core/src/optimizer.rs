//! AdamW with one parameter group per component tag.
//!
//! Every step returns the pre-LR update `m̂/(√v̂+ε) + wd·θ` of each parameter,
//! which is what the update-magnitude traces measure. Weight decay is
//! decoupled and scaled by the same per-tag learning rate as the Adam term.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::error::{config_err, domain_err, numeric_err, Result};
use crate::model::TaggedParameter;
use crate::schedule::{ComponentTag, LrByTag};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Parameter names exempt from weight decay.
    pub no_decay: Vec<String>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.1, no_decay: Vec::new() }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{key} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(config_err!("optimizer.epsilon must be finite and > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err!("optimizer.weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    fn decays(&self, name: &str) -> bool {
        !self.no_decay.iter().any(|n| n == name)
    }
}

/// Moments and step counter, aligned with the parameter list they were
/// created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
    /// Return full update tensors from [`step`](Self::step), not just norms.
    pub keep_updates: bool,
}

/// Pre-LR update of one parameter from the latest step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamUpdate {
    pub tag: ComponentTag,
    /// Sum of squared update entries.
    pub sum_sq: f64,
    /// The full update, kept only when [`AdamWState::keep_updates`] is set.
    pub update: Option<Tensor>,
}

/// Pre-LR updates of all parameters, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreLrUpdates {
    pub params: Vec<ParamUpdate>,
}

impl PreLrUpdates {
    /// L2 norm over all update entries carrying `tag`.
    pub fn update_magnitude(&self, tag: ComponentTag) -> Result<f64> {
        update_magnitude(self, tag)
    }
}

/// L2 norm over the concatenation of all pre-LR updates tagged `tag`.
pub fn update_magnitude(updates: &PreLrUpdates, tag: ComponentTag) -> Result<f64> {
    let mut found = false;
    let mut sum = 0.0;
    for p in updates.params.iter().filter(|p| p.tag == tag) {
        found = true;
        sum += p.sum_sq;
    }
    if !found {
        return Err(config_err!("no parameters tagged {tag} in this update"));
    }
    Ok(libm::sqrt(sum))
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[TaggedParameter]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Ok(AdamWState { config, m: zeros.clone(), v: zeros, step_count: 0, keep_updates: false })
    }

    /// Rebuilds a state from saved moments, checking alignment with `params`.
    pub fn from_parts(
        config: AdamWConfig,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step_count: u64,
        params: &[TaggedParameter],
    ) -> Result<Self> {
        config.validate()?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(domain_err!("optimizer state has {} / {} moments for {} parameters", m.len(), v.len(), params.len()));
        }
        for ((p, m), v) in params.iter().zip(&m).zip(&v) {
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(domain_err!("optimizer state shape mismatch for {}", p.name));
            }
            if v.data().iter().any(|&x| !(x >= 0.0)) {
                return Err(domain_err!("negative second moment for {}", p.name));
            }
        }
        Ok(AdamWState { config, m, v, step_count, keep_updates: false })
    }

    /// One AdamW step. Nothing is modified when an error is returned.
    pub fn step(&mut self, params: &mut [TaggedParameter], grads: &[Tensor], lrs: &LrByTag) -> Result<PreLrUpdates> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(domain_err!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.tensor.shape() {
                return Err(domain_err!("gradient for {} has shape {:?}, expected {:?}", p.name, g.shape(), p.tensor.shape()));
            }
            if lrs.get(p.tag).is_none() {
                return Err(config_err!("no learning rate for component {} (parameter {})", p.tag, p.name));
            }
            if !g.all_finite() {
                return Err(numeric_err!("non-finite gradient in {}", p.name));
            }
        }

        let c = &self.config;
        let (b1, b2, eps) = (c.beta1, c.beta2, c.epsilon);
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - power(b1, t);
        let bc2 = 1.0 - power(b2, t);

        let mut updates = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs.get(p.tag).unwrap_or_default();
            let wd = if c.decays(&p.name) { c.weight_decay } else { 0.0 };
            let mut kept = Vec::with_capacity(if self.keep_updates { g.len() } else { 0 });
            let mut sum_sq = 0.0;
            let moments = self.m[i].data_mut().iter_mut().zip(self.v[i].data_mut().iter_mut());
            for ((theta, &gj), (m, v)) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *m = b1 * *m + (1.0 - b1) * gj;
                *v = b2 * *v + (1.0 - b2) * gj * gj;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let u = m_hat / (libm::sqrt(v_hat) + eps) + wd * *theta;
                *theta -= lr * u;
                sum_sq += u * u;
                if self.keep_updates {
                    kept.push(u);
                }
            }
            let update = if self.keep_updates { Some(Tensor::new(p.tensor.shape(), kept)?) } else { None };
            updates.push(ParamUpdate { tag: p.tag, sum_sq, update });
        }
        Ok(PreLrUpdates { params: updates })
    }
}

/// `b^t` by repeated multiplication, so the bias corrections do not depend
/// on a particular `pow` implementation.
fn power(b: f64, t: u64) -> f64 {
    (0..t).fold(1.0, |acc, _| acc * b)
}

/// Free-function form of [`AdamWState::step`].
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut [TaggedParameter],
    grads: &[Tensor],
    lrs: &LrByTag,
) -> Result<PreLrUpdates> {
    state.step(params, grads, lrs)
}
