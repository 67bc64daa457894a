use rlrs_core::data::{batches, detokenize, synthetic_chain, synthetic_corpus, tokenize_bytes, SyntheticSpec, TokenSource};
use rlrs_oracles::stationary_distribution;

#[test]
fn unigram_frequencies_follow_the_stationary_distribution() {
    let spec = SyntheticSpec { seed: 4, length: 400_000, vocab_size: 16, ..SyntheticSpec::default() };
    let chain = synthetic_chain(&spec).unwrap();
    let p = chain.transition_matrix().unwrap();
    for row in &p {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let pi = stationary_distribution(&p);
    let stream = synthetic_corpus(&spec).unwrap();
    let mut counts = vec![0usize; 16];
    for &t in stream.tokens() {
        counts[t as usize] += 1;
    }
    for (c, want) in counts.iter().zip(&pi) {
        let got = *c as f64 / stream.len() as f64;
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
    }
}

#[test]
fn corpus_is_seeded() {
    let spec = SyntheticSpec { length: 1000, ..SyntheticSpec::default() };
    assert_eq!(synthetic_corpus(&spec).unwrap(), synthetic_corpus(&spec).unwrap());
    let other = SyntheticSpec { seed: 1, ..spec.clone() };
    assert_ne!(synthetic_corpus(&spec).unwrap().tokens(), synthetic_corpus(&other).unwrap().tokens());
}

#[test]
fn deterministic_chain_repeats_its_cycle() {
    let spec = SyntheticSpec { length: 200, vocab_size: 10, branching: 1, ..SyntheticSpec::default() };
    let t = synthetic_corpus(&spec).unwrap();
    let toks = t.tokens();
    for i in 10..toks.len() {
        assert_eq!(toks[i], toks[i - 10]);
    }
}

#[test]
fn batches_are_shifted_windows() {
    let spec = SyntheticSpec { length: 1001, ..SyntheticSpec::default() };
    let stream = synthetic_corpus(&spec).unwrap();
    let toks: Vec<usize> = stream.tokens().iter().map(|&t| t as usize).collect();
    let mut it = batches(&stream, 3, 10, Some(9)).unwrap();
    assert_eq!(it.windows_per_epoch(), 100);
    let mut seen = Vec::new();
    for _ in 0..33 {
        let b = it.next().unwrap();
        for r in 0..3 {
            let input = &b.inputs.ids[r * 10..(r + 1) * 10];
            let start = (0..100).find(|w| &toks[w * 10..w * 10 + 10] == input).unwrap();
            assert_eq!(&b.targets[r * 10..(r + 1) * 10], &toks[start * 10 + 1..start * 10 + 11]);
            seen.push(start);
        }
    }
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 99, "one epoch visits distinct windows");

    let a: Vec<_> = batches(&stream, 3, 10, Some(9)).unwrap().take(5).map(|b| b.inputs.ids).collect();
    let b: Vec<_> = batches(&stream, 3, 10, Some(9)).unwrap().take(5).map(|b| b.inputs.ids).collect();
    let c: Vec<_> = batches(&stream, 3, 10, Some(10)).unwrap().take(5).map(|b| b.inputs.ids).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn too_short_for_a_batch() {
    let spec = SyntheticSpec { length: 50, ..SyntheticSpec::default() };
    let stream = synthetic_corpus(&spec).unwrap();
    assert!(batches(&stream, 8, 10, None).is_err());
}

#[test]
fn bytes_round_trip() {
    let text = b"relative rates\n";
    let s = tokenize_bytes(text, TokenSource::Inline).unwrap();
    assert_eq!(s.vocab_size(), 256);
    assert_eq!(detokenize(&s).unwrap(), text);
}
