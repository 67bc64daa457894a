//! Training objective: next-token cross-entropy plus, for MoE models, the
//! router z-loss and the load-balancing loss.
//!
//! * z-loss: mean over tokens of `(ln Σ_i exp(logit_i))²`.
//! * load balancing: `n_experts · Σ_i f_i · P_i` where `f_i` is the fraction of
//!   tokens whose top-1 choice is expert `i` and `P_i` the mean router
//!   probability of expert `i`. `f` is a hard census and carries no gradient.
//!
//! With several MoE layers the two auxiliary terms are averaged over layers.
//! Each loss has a plain value function and a tape function; they are kept
//! as independent routes so one can check the other.

use alloc::vec::Vec;

use crate::autodiff::kernels::logsumexp;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config_err, domain_err, numeric_err, Result};
use crate::model::{RouterDecision, RouterTrace};
use crate::schedule::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub z_loss_weight: f64,
    pub load_balance_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { z_loss_weight: 0.001, load_balance_weight: 0.01 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.z_loss_weight", self.z_loss_weight),
            ("loss.load_balance_weight", self.load_balance_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{key} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

fn rows(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [.., w] if t.rank() >= 2 => Ok(*w),
        s => Err(domain_err!("{what}: expected at least rank 2, got {s:?}")),
    }
}

/// Mean negative log-likelihood of `targets` under the row-wise softmax of
/// `logits` (`[.., vocab]`, one row per target).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let width = rows(logits, "cross_entropy")?;
    if logits.len() / width != targets.len() {
        return Err(domain_err!("cross_entropy: {} targets for logits {:?}", targets.len(), logits.shape()));
    }
    if !logits.all_finite() {
        return Err(numeric_err!("cross_entropy: non-finite logits"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(width).zip(targets) {
        if t >= width {
            return Err(domain_err!("cross_entropy: target {t} out of range for {width} classes"));
        }
        total += logsumexp(row) - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// Mean squared log-partition of router logits `[tokens, experts]`.
pub fn z_loss(router_logits: &Tensor) -> Result<f64> {
    let width = rows(router_logits, "z_loss")?;
    if !router_logits.all_finite() {
        return Err(numeric_err!("z_loss: non-finite router logits"));
    }
    let n = router_logits.len() / width;
    let sum: f64 = router_logits
        .data()
        .chunks(width)
        .map(|row| {
            let z = logsumexp(row);
            z * z
        })
        .sum();
    Ok(sum / n as f64)
}

/// Per-expert token fractions `f_i` of a decision.
pub fn expert_fractions(decision: &RouterDecision, n_experts: usize) -> Vec<f64> {
    let mut f = alloc::vec![0.0; n_experts];
    for &c in &decision.chosen {
        f[c] += 1.0;
    }
    let n = decision.chosen.len() as f64;
    f.iter_mut().for_each(|x| *x /= n);
    f
}

/// `n_experts · Σ_i f_i · P_i`.
pub fn load_balance_loss(decision: &RouterDecision, n_experts: usize) -> Result<f64> {
    let n = decision.n_tokens();
    if n == 0 {
        return Err(domain_err!("load_balance_loss: decision covers no tokens"));
    }
    if decision.n_experts() != n_experts || decision.probs.len() != n * n_experts {
        return Err(domain_err!(
            "load_balance_loss: probs {:?} do not match {n} tokens x {n_experts} experts",
            decision.probs.shape()
        ));
    }
    if let Some(&bad) = decision.chosen.iter().find(|&&c| c >= n_experts) {
        return Err(domain_err!("load_balance_loss: expert {bad} out of range"));
    }
    let f = expert_fractions(decision, n_experts);
    let mut p = alloc::vec![0.0; n_experts];
    for row in decision.probs.data().chunks(n_experts) {
        p.iter_mut().zip(row).for_each(|(a, x)| *a += x);
    }
    let dot: f64 = f.iter().zip(&p).map(|(fi, pi)| fi * pi / n as f64).sum();
    Ok(n_experts as f64 * dot)
}

/// `ce + w_z · z + w_lb · lb` for MoE models; `ce` for dense models.
pub fn total_loss(ce: f64, z: f64, lb: f64, cfg: &LossConfig, kind: ModelKind) -> f64 {
    match kind {
        ModelKind::Dense => ce,
        ModelKind::Moe => ce + cfg.z_loss_weight * z + cfg.load_balance_weight * lb,
    }
}

/// Tape version of [`z_loss`].
pub fn z_loss_on_tape(tape: &mut Tape<'_>, router_logits: Var) -> Result<Var> {
    let n = tape.value(router_logits).shape()[0];
    let lse = tape.logsumexp(router_logits)?;
    let sq = tape.mul(lse, lse)?;
    let sum = tape.reduce_sum(sq);
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Tape version of [`load_balance_loss`]; gradient flows through `P` only.
pub fn load_balance_on_tape(tape: &mut Tape<'_>, probs: Var, decision: &RouterDecision) -> Result<Var> {
    let n_experts = decision.n_experts();
    let n = decision.n_tokens();
    if n == 0 {
        return Err(domain_err!("load_balance_loss: decision covers no tokens"));
    }
    let f = tape.constant(Tensor::from_vec(expert_fractions(decision, n_experts)));
    let col = tape.sum_rows(probs)?;
    let weighted = tape.mul(col, f)?;
    let sum = tape.reduce_sum(weighted);
    Ok(tape.scale(sum, n_experts as f64 / n as f64))
}

/// Loss terms recorded on a tape.
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// Mean over MoE layers; `None` for dense models.
    pub z: Option<Var>,
    pub lb: Option<Var>,
}

/// Full objective on the tape: cross-entropy plus weighted router losses
/// averaged over the given router layers.
pub fn objective_on_tape(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[usize],
    routers: &[RouterTrace],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ce = tape.cross_entropy(logits, targets)?;
    if routers.is_empty() {
        return Ok(LossTerms { total: ce, ce, z: None, lb: None });
    }
    let layers = routers.len() as f64;
    let mut z_terms = Vec::with_capacity(routers.len());
    let mut lb_terms = Vec::with_capacity(routers.len());
    for r in routers {
        z_terms.push(z_loss_on_tape(tape, r.logits)?);
        lb_terms.push(load_balance_on_tape(tape, r.probs, &r.decision)?);
    }
    let z = mean_of(tape, &z_terms, layers)?;
    let lb = mean_of(tape, &lb_terms, layers)?;
    let wz = tape.scale(z, cfg.z_loss_weight);
    let wlb = tape.scale(lb, cfg.load_balance_weight);
    let aux = tape.add(wz, wlb)?;
    let total = tape.add(ce, aux)?;
    Ok(LossTerms { total, ce, z: Some(z), lb: Some(lb) })
}

fn mean_of(tape: &mut Tape<'_>, terms: &[Var], count: f64) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn decision(probs: &[f64], experts: usize) -> RouterDecision {
        let n = probs.len() / experts;
        let logits: Vec<f64> = probs.iter().map(|p| libm::log(p.max(1e-300))).collect();
        let probs = Tensor::new(&[n, experts], probs.to_vec()).unwrap();
        let chosen = crate::model::argmax_rows(&probs);
        RouterDecision { probs, chosen, logits: Tensor::new(&[n, experts], logits).unwrap() }
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Tensor::zeros(&[3, 7]);
        let ce = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((ce - libm::log(7.0)).abs() < 1e-15);
    }

    #[test]
    fn confident_margin_drives_ce_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Tensor::new(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let ce = cross_entropy(&logits, &[0]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn z_loss_closed_forms() {
        let z = z_loss(&Tensor::zeros(&[5, 8])).unwrap();
        let ln8 = libm::log(8.0);
        assert!((z - ln8 * ln8).abs() < 1e-12);
        let shifted = Tensor::full(&[2, 8], -ln8);
        assert!(z_loss(&shifted).unwrap().abs() < 1e-12);
    }

    #[test]
    fn load_balance_closed_forms() {
        let uniform = decision(&[0.25; 16], 4);
        // argmax on exact ties picks expert 0 for every token, so build the
        // uniform assignment explicitly.
        let uniform = RouterDecision { chosen: vec![0, 1, 2, 3], ..uniform };
        assert!((load_balance_loss(&uniform, 4).unwrap() - 1.0).abs() < 1e-12);

        let mut one_hot = vec![0.0; 12];
        for i in 0..3 {
            one_hot[i * 4 + 2] = 1.0;
        }
        let collapsed = decision(&one_hot, 4);
        assert!((load_balance_loss(&collapsed, 4).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hard_census_can_fall_below_one() {
        // Three tokens sit on a tie and go to expert 0, one token is sure of
        // expert 1: f = (3/4, 1/4), P = (3/8, 5/8), so 2 * (9/32 + 5/32) = 7/8.
        let d = decision(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 1.0], 2);
        assert_eq!(d.chosen, [0, 0, 0, 1]);
        assert!((load_balance_loss(&d, 2).unwrap() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn load_balance_errors() {
        let empty = RouterDecision {
            probs: Tensor::zeros(&[1, 2]),
            chosen: vec![],
            logits: Tensor::zeros(&[1, 2]),
        };
        assert!(load_balance_loss(&empty, 2).is_err());
        assert!(load_balance_loss(&decision(&[0.5, 0.5], 2), 3).is_err());
    }

    #[test]
    fn total_loss_combines_terms() {
        let cfg = LossConfig::default();
        assert!((total_loss(2.0, 4.0, 1.0, &cfg, ModelKind::Moe) - 2.014).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 4.0, 1.0, &cfg, ModelKind::Dense), 2.0);
        let zero = LossConfig { z_loss_weight: 0.0, load_balance_weight: 0.0 };
        assert_eq!(total_loss(2.0, 4.0, 1.0, &zero, ModelKind::Moe), 2.0);
        assert!(LossConfig { z_loss_weight: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn tape_and_value_routes_agree() {
        let probs = [0.1, 0.2, 0.7, 0.5, 0.25, 0.25, 0.3, 0.3, 0.4];
        let d = decision(&probs, 3);
        let mut tape = Tape::new();
        let lv = tape.constant(d.logits.clone());
        let pv = tape.constant(d.probs.clone());
        let z = z_loss_on_tape(&mut tape, lv).unwrap();
        let lb = load_balance_on_tape(&mut tape, pv, &d).unwrap();
        assert!((tape.value(z).item().unwrap() - z_loss(&d.logits).unwrap()).abs() < 1e-12);
        assert!((tape.value(lb).item().unwrap() - load_balance_loss(&d, 3).unwrap()).abs() < 1e-12);
    }
}
