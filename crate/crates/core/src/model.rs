//! Decoder-only transformer with component-tagged parameters.
//!
//! Blocks are pre-norm residual: RMS-norm, causal multi-head attention, then
//! RMS-norm and either a dense SwiGLU feed-forward or a token-choice top-1
//! mixture of experts. Positions use a learned absolute embedding. Embedding
//! and unembedding matrices are not tied.
//!
//! Parameter names follow a fixed scheme and [`tag_of`] maps each name onto
//! its [`ComponentTag`]:
//!
//! | name                                   | tag         |
//! |----------------------------------------|-------------|
//! | `embed.weight`, `embed.position`       | Embedding   |
//! | `layers.N.attention.{norm,wq,wk,wv,wo}`| Attention   |
//! | `layers.N.feed_forward.{norm,w_gate,w_up,w_down}` | FeedForward |
//! | `layers.N.moe.router`                  | Router      |
//! | `layers.N.moe.norm`, `layers.N.moe.experts.E.{w_gate,w_up,w_down}` | Experts |
//! | `final_norm`, `unembed.weight`         | Unembedding |

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::TokenBatch;
use crate::error::{config_err, domain_err, Result};
use crate::schedule::{ComponentTag, ModelKind};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// SwiGLU hidden width as a multiple of `d_model`.
    pub ff_multiplier: f64,
    /// `0` selects the dense feed-forward block.
    pub n_experts: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ff_multiplier: 8.0 / 3.0,
            n_experts: 8,
            vocab_size: 256,
            seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.vocab_size", self.vocab_size),
            ("model.seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(config_err!("{key} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config_err!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model,
                self.n_heads
            ));
        }
        if !(self.ff_multiplier.is_finite() && self.ff_multiplier > 0.0) {
            return Err(config_err!("model.ff_multiplier must be positive"));
        }
        if self.n_experts == 1 {
            return Err(config_err!("model.n_experts must be 0 (dense) or at least 2"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        if self.n_experts == 0 {
            ModelKind::Dense
        } else {
            ModelKind::Moe
        }
    }

    /// `ff_multiplier * d_model` rounded to a multiple of 8 (at least 8).
    pub fn ff_hidden(&self) -> usize {
        let raw = self.ff_multiplier * self.d_model as f64;
        (libm::round(raw / 8.0) as usize).max(1) * 8
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width/depth/expert count of the named reference model sizes, with a
    /// caller-chosen vocabulary. Head count keeps a head width of 64.
    pub fn reference(size: ReferenceSize, kind: ModelKind, vocab_size: usize) -> Self {
        let (d_model, n_layers, seq_len) = match size {
            ReferenceSize::Desk => (64, 4, 32),
            ReferenceSize::Small => (512, 8, 512),
            ReferenceSize::Medium => (768, 12, 512),
            ReferenceSize::Large => (1536, 24, 1024),
        };
        ModelConfig {
            d_model,
            n_layers,
            n_heads: (d_model / 64).max(1),
            ff_multiplier: 8.0 / 3.0,
            n_experts: if kind == ModelKind::Moe { 8 } else { 0 },
            vocab_size,
            seq_len,
        }
    }
}

/// Named model sizes. `Small`, `Medium` and `Large` carry the width and depth
/// of the 34M, 113M and 906M-active-parameter models; `Desk` is a ~1M
/// parameter stand-in that trains on a CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSize {
    Desk,
    Small,
    Medium,
    Large,
}

/// A named parameter tensor and the schedule it follows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedParameter {
    pub name: String,
    pub tensor: Tensor,
    pub tag: ComponentTag,
}

/// Routing outcome of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision {
    /// `[tokens, experts]`, rows sum to one.
    pub probs: Tensor,
    /// Top-1 expert per token (lowest index on ties).
    pub chosen: Vec<usize>,
    /// Raw router outputs, `[tokens, experts]`.
    pub logits: Tensor,
}

impl RouterDecision {
    /// Builds a decision from router logits, choosing the argmax expert.
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let experts = match logits.shape() {
            &[_, e] => e,
            s => return Err(domain_err!("router logits must be rank 2, got {s:?}")),
        };
        let mut probs = logits.clone();
        for row in probs.data_mut().chunks_mut(experts) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let chosen = argmax_rows(&probs);
        Ok(RouterDecision { probs, chosen, logits })
    }

    pub fn n_tokens(&self) -> usize {
        self.chosen.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.last_dim()
    }
}

pub(crate) fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    probs
        .data()
        .chunks(probs.last_dim())
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Maps a parameter name onto its component.
pub fn tag_of(name: &str) -> Result<ComponentTag> {
    let parts: Vec<&str> = name.split('.').collect();
    let unknown = || config_err!("unknown parameter name `{name}`");
    let tag = match parts.as_slice() {
        ["embed", "weight" | "position"] => ComponentTag::Embedding,
        ["final_norm"] | ["unembed", "weight"] => ComponentTag::Unembedding,
        ["layers", idx, rest @ ..] => {
            idx.parse::<usize>().map_err(|_| unknown())?;
            match rest {
                ["attention", "norm" | "wq" | "wk" | "wv" | "wo"] => ComponentTag::Attention,
                ["feed_forward", "norm" | "w_gate" | "w_up" | "w_down"] => ComponentTag::FeedForward,
                ["moe", "router"] => ComponentTag::Router,
                ["moe", "norm"] => ComponentTag::Experts,
                ["moe", "experts", e, "w_gate" | "w_up" | "w_down"] => {
                    e.parse::<usize>().map_err(|_| unknown())?;
                    ComponentTag::Experts
                }
                _ => return Err(unknown()),
            }
        }
        _ => return Err(unknown()),
    };
    Ok(tag)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Truncated normal with std `init_scale / sqrt(fan_in)`.
    Normal { fan_in: usize },
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Canonical parameter order. Forward passes walk parameters in this order.
fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.ff_hidden());
    let mut specs = Vec::new();
    let mut push = |name: String, shape: &[usize], init: Init| {
        specs.push(ParamSpec { name, shape: shape.to_vec(), init })
    };
    push("embed.weight".into(), &[v, d], Init::Normal { fan_in: d });
    push("embed.position".into(), &[cfg.seq_len, d], Init::Normal { fan_in: d });
    for l in 0..cfg.n_layers {
        push(format!("layers.{l}.attention.norm"), &[d], Init::Ones);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("layers.{l}.attention.{w}"), &[d, d], Init::Normal { fan_in: d });
        }
        if cfg.n_experts == 0 {
            push(format!("layers.{l}.feed_forward.norm"), &[d], Init::Ones);
            push(format!("layers.{l}.feed_forward.w_gate"), &[d, h], Init::Normal { fan_in: d });
            push(format!("layers.{l}.feed_forward.w_up"), &[d, h], Init::Normal { fan_in: d });
            push(format!("layers.{l}.feed_forward.w_down"), &[h, d], Init::Normal { fan_in: h });
        } else {
            push(format!("layers.{l}.moe.norm"), &[d], Init::Ones);
            push(format!("layers.{l}.moe.router"), &[d, cfg.n_experts], Init::Normal { fan_in: d });
            for e in 0..cfg.n_experts {
                push(format!("layers.{l}.moe.experts.{e}.w_gate"), &[d, h], Init::Normal { fan_in: d });
                push(format!("layers.{l}.moe.experts.{e}.w_up"), &[d, h], Init::Normal { fan_in: d });
                push(format!("layers.{l}.moe.experts.{e}.w_down"), &[h, d], Init::Normal { fan_in: h });
            }
        }
    }
    push("final_norm".into(), &[d], Init::Ones);
    push("unembed.weight".into(), &[d, v], Init::Normal { fan_in: d });
    specs
}

/// Draws from a standard normal truncated to `[-2, 2]`, scaled by `std`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Model parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<TaggedParameter>,
}

/// Tape handles produced by [`Model::forward_on_tape`].
pub struct TapeForward {
    /// One handle per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// `[batch * seq, vocab]`.
    pub logits: Var,
    pub routers: Vec<RouterTrace>,
}

/// Router values of one MoE layer on the tape.
pub struct RouterTrace {
    pub logits: Var,
    pub probs: Var,
    pub decision: RouterDecision,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[batch, seq, vocab]`.
    pub logits: Tensor,
    pub routers: Vec<RouterDecision>,
}

impl Model {
    /// Weight matrices get truncated-normal values with std
    /// `init_scale / sqrt(fan_in)`; norm gains start at one.
    pub fn init(config: &ModelConfig, init_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(init_scale.is_finite() && init_scale > 0.0) {
            return Err(config_err!("init_scale must be positive, got {init_scale}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(config)
            .into_iter()
            .map(|spec| {
                let len: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Ones => vec![1.0; len],
                    Init::Normal { fan_in } => {
                        let std = init_scale / libm::sqrt(fan_in as f64);
                        (0..len).map(|_| truncated_normal(&mut rng, std)).collect()
                    }
                };
                let tag = tag_of(&spec.name)?;
                Ok(TaggedParameter { name: spec.name, tensor: Tensor::new(&spec.shape, data)?, tag })
            })
            .collect::<Result<_>>()?;
        Ok(Model { config: config.clone(), params })
    }

    /// Reassembles a model from named tensors (e.g. a checkpoint). Names and
    /// shapes must match the layout of `config` exactly.
    pub fn from_parameters(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = layout(config);
        if specs.len() != tensors.len() {
            return Err(config_err!("expected {} parameters, got {}", specs.len(), tensors.len()));
        }
        let params = specs
            .into_iter()
            .zip(tensors)
            .map(|(spec, (name, tensor))| {
                if spec.name != name || spec.shape != tensor.shape() {
                    return Err(config_err!(
                        "parameter `{name}` {:?} does not match expected `{}` {:?}",
                        tensor.shape(),
                        spec.name,
                        spec.shape
                    ));
                }
                Ok(TaggedParameter { tag: tag_of(&name)?, name, tensor })
            })
            .collect::<Result<_>>()?;
        Ok(Model { config: config.clone(), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[TaggedParameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [TaggedParameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&TaggedParameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut TaggedParameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Distinct tags present, in canonical order.
    pub fn tag_census(&self) -> Vec<ComponentTag> {
        ComponentTag::ALL
            .into_iter()
            .filter(|t| self.params.iter().any(|p| p.tag == *t))
            .collect()
    }

    /// Forward pass without gradient bookkeeping for the caller.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, tokens)?;
        let logits = tape
            .value(out.logits)
            .clone()
            .reshape(&[tokens.batch, tokens.seq, self.config.vocab_size])?;
        let routers = out.routers.into_iter().map(|r| r.decision).collect();
        Ok(ForwardOutput { logits, routers })
    }

    /// Records the forward pass on `tape` with every parameter as a trainable leaf.
    pub fn forward_on_tape<'a>(&'a self, tape: &mut Tape<'a>, tokens: &TokenBatch) -> Result<TapeForward> {
        let cfg = &self.config;
        if tokens.seq > cfg.seq_len {
            return Err(domain_err!("sequence length {} exceeds model.seq_len {}", tokens.seq, cfg.seq_len));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(domain_err!("token id {bad} out of range for vocabulary of {}", cfg.vocab_size));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(&p.tensor)).collect();
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("parameter layout matches config");

        let (b, t, d) = (tokens.batch, tokens.seq, cfg.d_model);
        let n = b * t;
        let heads = HeadIndex::new(b, t, cfg.n_heads, cfg.head_dim());

        let (embed, position) = (take(), take());
        let tok = tape.embedding_lookup(embed, &tokens.ids)?;
        let positions: Vec<usize> = (0..n).map(|i| i % t).collect();
        let pos = tape.embedding_lookup(position, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut routers = Vec::new();
        for _ in 0..cfg.n_layers {
            let (norm, wq, wk, wv, wo) = (take(), take(), take(), take(), take());
            let h = tape.rms_norm(x, norm)?;
            let attn = attention(tape, h, [wq, wk, wv, wo], &heads)?;
            x = tape.add(x, attn)?;

            let norm = take();
            let h = tape.rms_norm(x, norm)?;
            let ff = if cfg.n_experts == 0 {
                let (wg, wu, wd) = (take(), take(), take());
                tape.swiglu(h, wg, wu, wd)?
            } else {
                let router = take();
                let experts: Vec<[Var; 3]> = (0..cfg.n_experts).map(|_| [take(), take(), take()]).collect();
                let (out, trace) = moe(tape, h, router, &experts, n, d)?;
                routers.push(trace);
                out
            };
            x = tape.add(x, ff)?;
        }
        let (final_norm, unembed) = (take(), take());
        let h = tape.rms_norm(x, final_norm)?;
        let logits = tape.matmul(h, unembed)?;
        Ok(TapeForward { params: vars, logits, routers })
    }
}

/// Index maps between `[batch*seq, d_model]` and `[batch*heads, seq, head_dim]`.
struct HeadIndex {
    split: Vec<usize>,
    merge: Vec<usize>,
    bh: usize,
    t: usize,
    dh: usize,
    n: usize,
    d: usize,
}

impl HeadIndex {
    fn new(b: usize, t: usize, h: usize, dh: usize) -> Self {
        let d = h * dh;
        let mut split = vec![0; b * t * d];
        let mut merge = vec![0; b * t * d];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    for di in 0..dh {
                        let headed = ((bi * h + hi) * t + ti) * dh + di;
                        let flat = (bi * t + ti) * d + hi * dh + di;
                        split[headed] = flat;
                        merge[flat] = headed;
                    }
                }
            }
        }
        HeadIndex { split, merge, bh: b * h, t, dh, n: b * t, d }
    }
}

fn attention(tape: &mut Tape<'_>, h: Var, [wq, wk, wv, wo]: [Var; 4], idx: &HeadIndex) -> Result<Var> {
    let headed = [idx.bh, idx.t, idx.dh];
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let q = tape.gather(q, idx.split.clone(), &headed)?;
    let k = tape.gather(k, idx.split.clone(), &headed)?;
    let v = tape.gather(v, idx.split.clone(), &headed)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(idx.dh as f64));
    let probs = tape.causal_softmax(scores)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.gather(ctx, idx.merge.clone(), &[idx.n, idx.d])?;
    tape.matmul(ctx, wo)
}

/// Top-1 token-choice mixture of experts with dropless dispatch. Each token's
/// expert output is scaled by the router probability of the chosen expert,
/// which is the only gradient path into the router from the main loss.
fn moe(tape: &mut Tape<'_>, h: Var, router: Var, experts: &[[Var; 3]], n: usize, d: usize) -> Result<(Var, RouterTrace)> {
    let n_experts = experts.len();
    let logits = tape.matmul(h, router)?;
    let probs = tape.softmax(logits);
    let chosen = argmax_rows(tape.value(probs));
    let gate_index = chosen.iter().enumerate().map(|(i, &e)| i * n_experts + e).collect();
    let gate = tape.gather(probs, gate_index, &[n])?;

    let mut combined: Option<Var> = None;
    for (e, &[wg, wu, wd]) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| chosen[i] == e).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = tape.embedding_lookup(h, &rows)?;
        let ye = tape.swiglu(xe, wg, wu, wd)?;
        let placed = tape.scatter_rows(ye, &rows, n)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let combined = combined.ok_or_else(|| domain_err!("moe: no tokens to route"))?;
    debug_assert_eq!(tape.value(combined).shape(), &[n, d]);
    let out = tape.mul_rows(combined, gate)?;
    let decision = RouterDecision {
        probs: tape.value(probs).clone(),
        chosen,
        logits: tape.value(logits).clone(),
    };
    Ok((out, RouterTrace { logits, probs, decision }))
}
