//! Reference computations for tests. The formula functions are written
//! directly from their definitions on plain `f64` slices, without touching
//! `rlrs-core`, so the two can be checked against each other. The
//! [`gradcheck`] module is the one piece of glue that drives a core tape.

pub mod gradcheck;

use std::collections::HashMap;
use std::f64::consts::PI;

/// Learning rate at `step` of a warmup-then-cosine schedule.
pub fn cosine_lr(peak: f64, last: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    last + (peak - last) * 0.5 * (1.0 + (PI * frac).cos())
}

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(max |n|, 1e-10)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-10);
    diff / scale
}

/// Ungrouped AdamW over one flat parameter vector.
pub struct FlatAdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    beta1_power: f64,
    beta2_power: f64,
}

impl FlatAdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        FlatAdamW { beta1, beta2, eps, weight_decay, m: vec![0.0; n], v: vec![0.0; n], beta1_power: 1.0, beta2_power: 1.0 }
    }

    /// Applies one step and returns the pre-LR update.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Vec<f64> {
        self.beta1_power *= self.beta1;
        self.beta2_power *= self.beta2;
        let c1 = 1.0 - self.beta1_power;
        let c2 = 1.0 - self.beta2_power;
        let mut updates = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let u = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps) + self.weight_decay * theta[i];
            theta[i] -= lr * u;
            updates.push(u);
        }
        updates
    }
}

/// `ln Σ exp(row)` by shifting with the maximum.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(row);
    row.iter().map(|x| (x - z).exp()).collect()
}

/// Mean cross-entropy of rows of `logits` (width `classes`).
pub fn cross_entropy(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    let rows: Vec<&[f64]> = logits.chunks(classes).collect();
    let total: f64 = rows.iter().zip(targets).map(|(r, &t)| log_sum_exp(r) - r[t]).sum();
    total / targets.len() as f64
}

/// Mean squared log-partition of router logits.
pub fn z_loss(logits: &[f64], experts: usize) -> f64 {
    let rows: Vec<f64> = logits.chunks(experts).map(|r| log_sum_exp(r).powi(2)).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// `E · Σ_i f_i P_i` with `f` from the given assignments.
pub fn load_balance(probs: &[f64], experts: usize, chosen: &[usize]) -> f64 {
    let n = chosen.len() as f64;
    let mut total = 0.0;
    for e in 0..experts {
        let f = chosen.iter().filter(|&&c| c == e).count() as f64 / n;
        let p: f64 = probs.chunks(experts).map(|r| r[e]).sum::<f64>() / n;
        total += f * p;
    }
    experts as f64 * total
}

/// Stationary distribution of a row-stochastic matrix, by solving
/// `π (P - I) = 0` with `Σ π = 1` through Gaussian elimination.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    // Rows of the system: (Pᵀ - I) π = 0, with the last equation replaced
    // by the normalisation.
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| p[j][i]).collect();
            row[i] -= 1.0;
            row.push(0.0);
            row
        })
        .collect();
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for k in col..=n {
            a[col][k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    a.iter().map(|row| row[n]).collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Standard deviation of a standard normal truncated to `[-k, k]`, by
/// composite Simpson integration of the density.
pub fn truncated_normal_std(k: f64) -> f64 {
    let n = 20_000;
    let h = 2.0 * k / n as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut s = f(-k) + f(k);
        for i in 1..n {
            let x = -k + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    };
    let mass = simpson(&phi);
    let second = simpson(&|x| x * x * phi(x));
    (second / mass).sqrt()
}

/// Minimiser of `f` over `x0 · 5^i · 1.5^j` for `|i| <= fives`, `|j| <= halves`.
pub fn lattice_argmin(f: impl Fn(f64) -> f64, x0: f64, fives: i32, halves: i32) -> (f64, f64) {
    let mut best = (x0, f(x0));
    for i in -fives..=fives {
        for j in -halves..=halves {
            let x = x0 * 5f64.powi(i) * 1.5f64.powi(j);
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    best
}

/// `a + b · exp(-t / tau)`.
#[derive(Debug, Clone, Copy)]
pub struct ExpCurve {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
}

impl ExpCurve {
    pub fn at(&self, t: f64) -> f64 {
        self.a + self.b * (-t / self.tau).exp()
    }

    /// Time at which the curve reaches `level`.
    pub fn crossing(&self, level: f64) -> f64 {
        -self.tau * ((level - self.a) / self.b).ln()
    }
}

/// `(T / t_cross - 1) · 100`, with `t_cross` where `fast` reaches the value
/// of `base` at `T`.
pub fn crossing_speedup(base: ExpCurve, fast: ExpCurve, total: f64) -> f64 {
    (total / fast.crossing(base.at(total)) - 1.0) * 100.0
}

/// Parameters of a tiny transformer for [`reference_logits`], by name.
pub type Params = HashMap<String, Vec<f64>>;

/// Shape of the transformer evaluated by [`reference_logits`].
#[derive(Debug, Clone, Copy)]
pub struct RefShape {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub experts: usize,
    pub vocab: usize,
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

/// `x[1×rows] · w[rows×cols]`.
fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn swiglu(x: &[f64], p: &Params, prefix: &str, hidden: usize, d: usize) -> Vec<f64> {
    let g = vecmat(x, &p[&format!("{prefix}.w_gate")], hidden);
    let u = vecmat(x, &p[&format!("{prefix}.w_up")], hidden);
    let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
    vecmat(&h, &p[&format!("{prefix}.w_down")], d)
}

/// Logits `[seq][vocab]` of one sequence through a pre-norm decoder with
/// learned positions, causal multi-head attention and a SwiGLU feed-forward
/// or a top-1 mixture whose output is scaled by the chosen probability.
pub fn reference_logits(p: &Params, s: RefShape, ids: &[usize]) -> Vec<Vec<f64>> {
    let (d, t) = (s.d, ids.len());
    let dh = d / s.heads;
    let emb = &p["embed.weight"];
    let pos = &p["embed.position"];
    let mut x: Vec<Vec<f64>> =
        ids.iter().enumerate().map(|(i, &id)| (0..d).map(|k| emb[id * d + k] + pos[i * d + k]).collect()).collect();
    for l in 0..s.layers {
        let a = format!("layers.{l}.attention");
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &p[&format!("{a}.norm")])).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &p[&format!("{a}.wq")], d)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &p[&format!("{a}.wk")], d)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &p[&format!("{a}.wv")], d)).collect();
        let mut ctx = vec![vec![0.0; d]; t];
        for head in 0..s.heads {
            let o = head * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q[i][o + c] * k[j][o + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (j, wj) in w.iter().enumerate() {
                    for c in 0..dh {
                        ctx[i][o + c] += wj * v[j][o + c];
                    }
                }
            }
        }
        for i in 0..t {
            let out = vecmat(&ctx[i], &p[&format!("{a}.wo")], d);
            x[i].iter_mut().zip(out).for_each(|(a, b)| *a += b);
        }
        for i in 0..t {
            let y = if s.experts == 0 {
                let f = format!("layers.{l}.feed_forward");
                swiglu(&rms(&x[i], &p[&format!("{f}.norm")]), p, &f, s.hidden, d)
            } else {
                let m = format!("layers.{l}.moe");
                let h = rms(&x[i], &p[&format!("{m}.norm")]);
                let probs = softmax(&vecmat(&h, &p[&format!("{m}.router")], s.experts));
                let e = argmax(&probs);
                swiglu(&h, p, &format!("{m}.experts.{e}"), s.hidden, d).into_iter().map(|v| v * probs[e]).collect()
            };
            x[i].iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
    }
    x.iter().map(|r| vecmat(&rms(r, &p["final_norm"]), &p["unembed.weight"], s.vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_of_two_state_chain() {
        let p = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let pi = stationary_distribution(&p);
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-14);
        assert!((pi[1] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn truncated_std_limits() {
        assert!((truncated_normal_std(12.0) - 1.0).abs() < 1e-9);
        assert!((truncated_normal_std(2.0) - 0.879_625_661).abs() < 1e-8);
    }

    #[test]
    fn crossing_inverts_curve() {
        let c = ExpCurve { a: 1.0, b: 3.0, tau: 200.0 };
        assert!((c.at(c.crossing(2.0)) - 2.0).abs() < 1e-12);
    }
}
