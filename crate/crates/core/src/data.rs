//! Token streams and batching.
//!
//! Real text goes through an identity byte tokenizer (vocabulary 256). For
//! self-contained experiments a seeded Markov chain produces a corpus with a
//! learnable next-token structure.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, domain_err, Result};

/// A `[batch, seq]` block of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(domain_err!("{} ids do not form a {batch}x{seq} batch", ids.len()));
        }
        Ok(TokenBatch { batch, seq, ids })
    }
}

/// Inputs and next-token targets (`targets[i]` follows `inputs.ids[i]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

/// Where a stream came from.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSource {
    File(String),
    Synthetic(SyntheticSpec),
    Inline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    tokens: Vec<u32>,
    vocab_size: usize,
    source: TokenSource,
}

impl TokenStream {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, source: TokenSource) -> Result<Self> {
        if tokens.is_empty() {
            return Err(domain_err!("empty token stream"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(domain_err!("token {bad} out of range for vocabulary of {vocab_size}"));
        }
        Ok(TokenStream { tokens, vocab_size, source })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> &TokenSource {
        &self.source
    }
}

/// Identity byte tokenizer.
pub fn tokenize_bytes(bytes: &[u8], source: TokenSource) -> Result<TokenStream> {
    if bytes.is_empty() {
        return Err(domain_err!("cannot tokenize empty input"));
    }
    TokenStream::new(bytes.iter().map(|&b| u32::from(b)).collect(), 256, source)
}

pub fn detokenize(stream: &TokenStream) -> Result<Vec<u8>> {
    stream
        .tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| domain_err!("token {t} is not a byte")))
        .collect()
}

/// Parameters of a seeded Markov corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub length: usize,
    /// Markov order, 1 or 2.
    pub order: usize,
    pub vocab_size: usize,
    /// Successors per context; 1 makes the chain deterministic.
    pub branching: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 0, length: 1 << 16, order: 1, vocab_size: 64, branching: 4 }
    }
}

/// Sparse transition table of an order-1 or order-2 chain.
///
/// Every context's first successor follows a fixed random cycle through the
/// whole vocabulary, so the order-1 chain is irreducible.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    order: usize,
    vocab_size: usize,
    /// Indexed by context (`prev` or `prev2 * vocab + prev`); `(token, prob)`.
    transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    pub fn new(seed: u64, order: usize, vocab_size: usize, branching: usize) -> Result<Self> {
        Self::build(&mut ChaCha8Rng::seed_from_u64(seed), order, vocab_size, branching)
    }

    fn build(rng: &mut ChaCha8Rng, order: usize, vocab_size: usize, branching: usize) -> Result<Self> {
        if !(order == 1 || order == 2) {
            return Err(config_err!("data.synthetic.order must be 1 or 2, got {order}"));
        }
        if vocab_size < 2 {
            return Err(config_err!("data.synthetic.vocab must be at least 2"));
        }
        if branching == 0 || branching > vocab_size {
            return Err(config_err!("data.synthetic.branching must lie in 1..={vocab_size}, got {branching}"));
        }
        let mut cycle: Vec<usize> = (0..vocab_size).collect();
        cycle.shuffle(rng);
        let mut succ = vec![0; vocab_size];
        for i in 0..vocab_size {
            succ[cycle[i]] = cycle[(i + 1) % vocab_size];
        }
        let contexts = if order == 1 { vocab_size } else { vocab_size * vocab_size };
        let mut transitions = Vec::with_capacity(contexts);
        for ctx in 0..contexts {
            let prev = ctx % vocab_size;
            let mut next = vec![succ[prev]];
            while next.len() < branching {
                let cand = rng.random_range(0..vocab_size);
                if !next.contains(&cand) {
                    next.push(cand);
                }
            }
            let weights: Vec<f64> = next.iter().map(|_| rng.random_range(0.25..1.0)).collect();
            let total: f64 = weights.iter().sum();
            transitions.push(next.into_iter().zip(weights).map(|(t, w)| (t, w / total)).collect());
        }
        Ok(MarkovChain { order, vocab_size, transitions })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Successors of a context and their probabilities.
    pub fn successors(&self, context: &[usize]) -> &[(usize, f64)] {
        let idx = match *context {
            [prev] if self.order == 1 => prev,
            [prev2, prev] if self.order == 2 => prev2 * self.vocab_size + prev,
            _ => panic!("context length must equal the chain order"),
        };
        &self.transitions[idx]
    }

    /// Dense `vocab x vocab` transition matrix of an order-1 chain.
    pub fn transition_matrix(&self) -> Option<Vec<Vec<f64>>> {
        (self.order == 1).then(|| {
            self.transitions
                .iter()
                .map(|row| {
                    let mut dense = vec![0.0; self.vocab_size];
                    for &(t, p) in row {
                        dense[t] += p;
                    }
                    dense
                })
                .collect()
        })
    }

    fn sample<R: Rng>(&self, rng: &mut R, length: usize) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::with_capacity(length);
        for _ in 0..self.order.min(length) {
            out.push(rng.random_range(0..self.vocab_size) as u32);
        }
        while out.len() < length {
            let n = out.len();
            let ctx: Vec<usize> = out[n - self.order..].iter().map(|&t| t as usize).collect();
            let row = self.successors(&ctx);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = row[row.len() - 1].0;
            for &(t, p) in row {
                acc += p;
                if u < acc {
                    pick = t;
                    break;
                }
            }
            out.push(pick as u32);
        }
        out
    }
}

/// Seeded Markov corpus. The chain and the sampled path both derive from `spec.seed`.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<TokenStream> {
    if spec.length == 0 {
        return Err(config_err!("data.synthetic.length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chain = MarkovChain::build(&mut rng, spec.order, spec.vocab_size, spec.branching)?;
    let tokens = chain.sample(&mut rng, spec.length);
    TokenStream::new(tokens, spec.vocab_size, TokenSource::Synthetic(spec.clone()))
}

/// The chain behind [`synthetic_corpus`] for the same spec.
pub fn synthetic_chain(spec: &SyntheticSpec) -> Result<MarkovChain> {
    MarkovChain::new(spec.seed, spec.order, spec.vocab_size, spec.branching)
}

/// Endless iterator over batches of non-overlapping windows.
///
/// Window `w` covers inputs `tokens[w*seq .. (w+1)*seq]` and the targets
/// shifted by one. Each epoch visits the windows in a fresh seeded order (or
/// in stream order without a seed); windows that do not fill a batch at the
/// end of an epoch are skipped.
pub struct Batches<'a> {
    stream: &'a TokenStream,
    batch_size: usize,
    seq_len: usize,
    rng: Option<ChaCha8Rng>,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batches(stream: &TokenStream, batch_size: usize, seq_len: usize, seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(domain_err!("batch size and sequence length must be positive"));
    }
    let windows = (stream.len() - 1) / seq_len;
    if windows < batch_size {
        return Err(domain_err!(
            "{} tokens give {windows} windows of {seq_len}, fewer than a batch of {batch_size}",
            stream.len()
        ));
    }
    let mut it = Batches {
        stream,
        batch_size,
        seq_len,
        rng: seed.map(ChaCha8Rng::seed_from_u64),
        order: (0..windows).collect(),
        cursor: 0,
    };
    it.reshuffle();
    Ok(it)
}

impl Batches<'_> {
    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }

    fn reshuffle(&mut self) {
        if let Some(rng) = self.rng.as_mut() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
        }
        self.cursor = 0;
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let sl = self.seq_len;
        let tokens = self.stream.tokens();
        let mut ids = Vec::with_capacity(self.batch_size * sl);
        let mut targets = Vec::with_capacity(self.batch_size * sl);
        for &w in &self.order[self.cursor..self.cursor + self.batch_size] {
            let start = w * sl;
            ids.extend(tokens[start..start + sl].iter().map(|&t| t as usize));
            targets.extend(tokens[start + 1..start + sl + 1].iter().map(|&t| t as usize));
        }
        self.cursor += self.batch_size;
        Some(Batch { inputs: TokenBatch { batch: self.batch_size, seq: sl, ids }, targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_tokens() {
        let s = tokenize_bytes(b"AB", TokenSource::Inline).unwrap();
        assert_eq!(s.tokens(), &[65, 66]);
        assert_eq!(s.vocab_size(), 256);
        assert_eq!(detokenize(&s).unwrap(), b"AB");
        assert!(tokenize_bytes(b"", TokenSource::Inline).is_err());
    }

    #[test]
    fn first_window_in_stream_order() {
        let s = TokenStream::new((0..10).collect(), 10, TokenSource::Inline).unwrap();
        let mut it = batches(&s, 1, 4, None).unwrap();
        let b = it.next().unwrap();
        assert_eq!(b.inputs.ids, [0, 1, 2, 3]);
        assert_eq!(b.targets, [1, 2, 3, 4]);
        let b = it.next().unwrap();
        assert_eq!(b.inputs.ids, [4, 5, 6, 7]);
        // only two windows fit; the third batch starts a new epoch
        assert_eq!(it.next().unwrap().inputs.ids, [0, 1, 2, 3]);
    }

    #[test]
    fn too_short_stream_is_rejected() {
        let s = TokenStream::new((0..9).collect(), 10, TokenSource::Inline).unwrap();
        assert!(batches(&s, 3, 4, Some(1)).is_err());
    }

    #[test]
    fn seeded_order_is_reproducible_and_a_partition() {
        let s = TokenStream::new((0..401).map(|i| i % 7).collect(), 7, TokenSource::Inline).unwrap();
        let a: Vec<Batch> = batches(&s, 4, 10, Some(5)).unwrap().take(10).collect();
        let b: Vec<Batch> = batches(&s, 4, 10, Some(5)).unwrap().take(10).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = batches(&s, 4, 10, Some(6)).unwrap().take(10).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_validation() {
        let mut spec = SyntheticSpec { order: 3, ..SyntheticSpec::default() };
        assert!(synthetic_corpus(&spec).is_err());
        spec.order = 2;
        spec.branching = 100;
        assert!(synthetic_corpus(&spec).is_err());
        spec.branching = 2;
        let s = synthetic_corpus(&spec).unwrap();
        assert_eq!(s.len(), spec.length);
        assert!(s.tokens().iter().all(|&t| (t as usize) < spec.vocab_size));
    }

    #[test]
    fn deterministic_chain_follows_its_successor() {
        let spec = SyntheticSpec { branching: 1, length: 500, vocab_size: 16, ..SyntheticSpec::default() };
        let chain = synthetic_chain(&spec).unwrap();
        let s = synthetic_corpus(&spec).unwrap();
        for w in s.tokens().windows(2) {
            let row = chain.successors(&[w[0] as usize]);
            assert_eq!(row, &[(w[1] as usize, 1.0)]);
        }
    }
}
