use std::collections::HashMap;

use rlrs_core::data::TokenBatch;
use rlrs_core::model::{Model, ModelConfig};
use rlrs_core::schedule::{ComponentTag, ModelKind};
use rlrs_oracles::{reference_logits, truncated_normal_std, RefShape};

fn tiny(n_experts: usize) -> ModelConfig {
    ModelConfig { d_model: 12, n_layers: 2, n_heads: 3, ff_multiplier: 2.0, n_experts, vocab_size: 13, seq_len: 7 }
}

fn reference_check(cfg: ModelConfig) {
    let model = Model::init(&cfg, 1.0, 5).unwrap();
    let params: HashMap<String, Vec<f64>> =
        model.params().iter().map(|p| (p.name.clone(), p.tensor.data().to_vec())).collect();
    let shape = RefShape {
        d: cfg.d_model,
        layers: cfg.n_layers,
        heads: cfg.n_heads,
        hidden: cfg.ff_hidden(),
        experts: cfg.n_experts,
        vocab: cfg.vocab_size,
    };
    let seqs: [Vec<usize>; 2] = [vec![1, 4, 9, 12, 0, 3, 3], vec![7, 7, 2, 11, 5, 6, 8]];
    let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
    let out = model.forward(&TokenBatch::new(2, 7, ids).unwrap()).unwrap();
    for (b, seq) in seqs.iter().enumerate() {
        let want = reference_logits(&params, shape, seq);
        for (t, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                let got = out.logits.data()[(b * 7 + t) * cfg.vocab_size + v];
                assert!((got - w).abs() < 1e-10, "b{b} t{t} v{v}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn dense_forward_matches_reference() {
    reference_check(tiny(0));
}

#[test]
fn moe_forward_matches_reference() {
    reference_check(tiny(4));
}

#[test]
fn future_tokens_do_not_leak() {
    let model = Model::init(&tiny(4), 0.5, 2).unwrap();
    let a = model.forward(&TokenBatch::new(1, 7, vec![1, 2, 3, 4, 5, 6, 7]).unwrap()).unwrap();
    let b = model.forward(&TokenBatch::new(1, 7, vec![1, 2, 3, 4, 12, 0, 9]).unwrap()).unwrap();
    let v = 13;
    assert_eq!(a.logits.data()[..4 * v], b.logits.data()[..4 * v]);
    assert_ne!(a.logits.data()[4 * v..5 * v], b.logits.data()[4 * v..5 * v]);
}

#[test]
fn init_statistics() {
    let cfg = ModelConfig { d_model: 256, n_layers: 1, n_heads: 4, n_experts: 0, vocab_size: 64, seq_len: 8, ..ModelConfig::default() };
    let model = Model::init(&cfg, 0.15, 0).unwrap();
    let w = model.param("layers.0.attention.wq").unwrap().tensor.data();
    let sigma = 0.15 / 16.0;
    assert!(w.iter().all(|x| x.abs() <= 2.0 * sigma));
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    let expected = sigma * truncated_normal_std(2.0);
    // 65k samples: the std estimate is good to well under 1%.
    assert!((std / expected - 1.0).abs() < 0.01, "{std} vs {expected}");
    assert!(mean.abs() < 0.01 * sigma * 10.0);
    for norm in ["layers.0.attention.norm", "layers.0.feed_forward.norm", "final_norm"] {
        assert!(model.param(norm).unwrap().tensor.data().iter().all(|&g| g == 1.0));
    }
}

#[test]
fn parameter_count_and_tags() {
    let cfg = ModelConfig { vocab_size: 64, ..ModelConfig::default() };
    let model = Model::init(&cfg, 0.15, 0).unwrap();
    let (d, v, h, e, l, t) = (64, 64, cfg.ff_hidden(), 8, 4, 32);
    let per_layer = d + 4 * d * d + d + d * e + e * 3 * d * h;
    assert_eq!(model.num_params(), v * d + t * d + l * per_layer + d + d * v);
    assert!((900_000..1_300_000).contains(&model.num_params()));
    assert_eq!(model.tag_census(), ModelKind::Moe.components());
    let experts: usize = model.params().iter().filter(|p| p.tag == ComponentTag::Experts).map(|p| p.tensor.len()).sum();
    assert_eq!(experts, l * (d + e * 3 * d * h));
}

#[test]
fn rejects_bad_tokens() {
    let model = Model::init(&tiny(0), 0.15, 0).unwrap();
    assert!(model.forward(&TokenBatch::new(1, 2, vec![0, 13]).unwrap()).is_err());
    assert!(model.forward(&TokenBatch::new(1, 8, vec![0; 8]).unwrap()).is_err());
}
