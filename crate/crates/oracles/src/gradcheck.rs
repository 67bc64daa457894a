//! Finite-difference checks of tape gradients: single primitives on
//! random inputs and the full training objective of a small MoE model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlrs_core::autodiff::{Tape, Tensor, Var};
use rlrs_core::data::{Batch, TokenBatch};
use rlrs_core::losses::{self, LossConfig};
use rlrs_core::model::{Model, ModelConfig};
use rlrs_core::trainer::loss_and_grads;
use rlrs_core::ModelKind;

/// Builds a function of the leaf variables on a fresh tape.
pub type Build<'f> = dyn Fn(&mut Tape<'_>, &[Var]) -> rlrs_core::Result<Var> + 'f;

/// Fixed, uneven projection weights so non-scalar outputs reduce to a
/// scalar whose gradient exercises every output entry differently.
pub fn projection(len: usize) -> Tensor {
    Tensor::from_vec((0..len).map(|i| 0.3 + (1.7 * i as f64).cos()).collect())
}

fn project(tape: &mut Tape<'_>, out: Var) -> rlrs_core::Result<Var> {
    if tape.value(out).rank() == 0 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let w = projection(tape.value(out).len()).reshape(&shape)?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.reduce_sum(prod))
}

fn value_of(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("build");
    let s = project(&mut tape, out).expect("projection");
    tape.value(s).data()[0]
}

/// Largest per-input relative error between tape gradients and central
/// differences with step `h`.
pub fn max_gradient_error(inputs: &[Tensor], build: &Build<'_>, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("build");
    let s = project(&mut tape, out).expect("projection");
    let grads = tape.backward(s).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map_or_else(|| vec![0.0; inputs[i].len()], |g| g.data().to_vec());
        let numeric = crate::central_difference(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = Tensor::new(inputs[i].shape(), x.to_vec()).expect("shape");
                value_of(&probe, build)
            },
            inputs[i].data(),
            h,
        );
        worst = worst.max(crate::max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Random inputs plus the function to differentiate.
pub type Case = (Vec<Tensor>, Box<Build<'static>>);

/// A named generator of random instances of one primitive (or a small
/// composition of primitives).
pub struct Primitive {
    pub name: &'static str,
    pub instance: fn(&mut ChaCha8Rng) -> Case,
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// Every tape primitive, each exercised by a random-shape instance.
pub const PRIMITIVES: &[Primitive] = &[
    Primitive {
        name: "matmul",
        instance: |rng| {
            let (n, k, m) = dims(rng);
            (vec![rand_tensor(rng, &[n, k]), rand_tensor(rng, &[k, m])], Box::new(|t, v| t.matmul(v[0], v[1])))
        },
    },
    Primitive {
        name: "batched matmul + transpose",
        instance: |rng| {
            let (n, k, m) = dims(rng);
            let b = rng.random_range(1..4);
            (
                vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[b, m, k])],
                Box::new(|t, v| {
                    let bt = t.transpose(v[1])?;
                    t.matmul(v[0], bt)
                }),
            )
        },
    },
    Primitive {
        name: "add/mul/scale",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            let c = rng.random_range(-2.0..2.0);
            (
                vec![rand_tensor(rng, &[n, m]), rand_tensor(rng, &[n, m])],
                Box::new(move |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let p = t.mul(s, v[0])?;
                    Ok(t.scale(p, c))
                }),
            )
        },
    },
    Primitive {
        name: "mul_rows",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (vec![rand_tensor(rng, &[n, m]), rand_tensor(rng, &[n])], Box::new(|t, v| t.mul_rows(v[0], v[1])))
        },
    },
    Primitive {
        name: "gather/embedding_lookup/scatter_rows",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            let len = n * m;
            let index: Vec<usize> = (0..6).map(|_| rng.random_range(0..len)).collect();
            let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
            let out_rows = n + 2;
            let rows: Vec<usize> = (0..ids.len()).map(|_| rng.random_range(0..out_rows)).collect();
            (
                vec![rand_tensor(rng, &[n, m])],
                Box::new(move |t, v| {
                    let g = t.gather(v[0], index.clone(), &[2, 3])?;
                    let l = t.embedding_lookup(v[0], &ids)?;
                    let s = t.scatter_rows(l, &rows, out_rows)?;
                    let gs = t.reduce_sum(g);
                    let ss = t.sum_rows(s)?;
                    let ssum = t.reduce_sum(ss);
                    let both = t.mul(gs, ssum)?;
                    let sq = t.mul(s, s)?;
                    let sqs = t.reduce_sum(sq);
                    t.add(both, sqs)
                }),
            )
        },
    },
    Primitive {
        name: "concat_rows/slice_rows",
        instance: |rng| {
            let (n, m, k) = dims(rng);
            let start = rng.random_range(0..n + k);
            let len = rng.random_range(1..=n + k - start);
            (
                vec![rand_tensor(rng, &[n, m]), rand_tensor(rng, &[k, m])],
                Box::new(move |t, v| {
                    let c = t.concat_rows(&[v[0], v[1], v[0]])?;
                    let s = t.slice_rows(c, start, len)?;
                    t.mul(s, s)
                }),
            )
        },
    },
    Primitive {
        name: "softmax",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (vec![rand_tensor(rng, &[n, m + 1])], Box::new(|t, v| Ok(t.softmax(v[0]))))
        },
    },
    Primitive {
        name: "causal_softmax",
        instance: |rng| {
            let (b, tt, _) = dims(rng);
            (vec![rand_tensor(rng, &[b, tt, tt])], Box::new(|t, v| t.causal_softmax(v[0])))
        },
    },
    Primitive {
        name: "logsumexp",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (vec![rand_tensor(rng, &[n, m])], Box::new(|t, v| t.logsumexp(v[0])))
        },
    },
    Primitive {
        name: "rms_norm",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (vec![rand_tensor(rng, &[n, m + 1]), rand_tensor(rng, &[m + 1])], Box::new(|t, v| t.rms_norm(v[0], v[1])))
        },
    },
    Primitive {
        name: "silu",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (vec![rand_tensor(rng, &[n, m])], Box::new(|t, v| Ok(t.silu(v[0]))))
        },
    },
    Primitive {
        name: "swiglu",
        instance: |rng| {
            let (n, d, h) = dims(rng);
            let o = rng.random_range(1..4);
            (
                vec![rand_tensor(rng, &[n, d]), rand_tensor(rng, &[d, h]), rand_tensor(rng, &[d, h]), rand_tensor(rng, &[h, o])],
                Box::new(|t, v| t.swiglu(v[0], v[1], v[2], v[3])),
            )
        },
    },
    Primitive {
        name: "reduce_sum/sum_rows",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            (
                vec![rand_tensor(rng, &[n, m])],
                Box::new(|t, v| {
                    let s = t.sum_rows(v[0])?;
                    let sq = t.mul(s, s)?;
                    Ok(t.reduce_sum(sq))
                }),
            )
        },
    },
    Primitive {
        name: "cross_entropy",
        instance: |rng| {
            let (n, m, _) = dims(rng);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..m + 1)).collect();
            (vec![rand_tensor(rng, &[n, m + 1])], Box::new(move |t, v| t.cross_entropy(v[0], &targets)))
        },
    },
];

/// Worst relative error of `p` over `instances` seeded instances.
pub fn primitive_error(p: &Primitive, instances: u64, h: f64) -> f64 {
    (0..instances)
        .map(|seed| {
            let (inputs, build) = (p.instance)(&mut ChaCha8Rng::seed_from_u64(seed));
            max_gradient_error(&inputs, &*build, h)
        })
        .fold(0.0, f64::max)
}

/// Objective (CE + z + load balance) through the value functions, with the
/// routing it used.
fn objective(model: &Model, batch: &Batch, cfg: &LossConfig) -> (f64, Vec<Vec<usize>>) {
    let out = model.forward(&batch.inputs).unwrap();
    let ce = losses::cross_entropy(&out.logits, &batch.targets).unwrap();
    let layers = out.routers.len() as f64;
    let z: f64 = out.routers.iter().map(|r| losses::z_loss(&r.logits).unwrap()).sum::<f64>() / layers;
    let lb: f64 =
        out.routers.iter().map(|r| losses::load_balance_loss(r, r.n_experts()).unwrap()).sum::<f64>() / layers;
    let routing = out.routers.into_iter().map(|r| r.chosen).collect();
    (losses::total_loss(ce, z, lb, cfg, ModelKind::Moe), routing)
}

/// Total objective of `model` on `batch` computed without the tape.
pub fn objective_value(model: &Model, batch: &Batch, cfg: &LossConfig) -> f64 {
    objective(model, batch, cfg).0
}

/// Worst relative error between the trainer's gradients of the full
/// objective and central differences over every parameter entry. `Err` if
/// a perturbation flips a routing decision, which makes the objective jump.
pub fn objective_gradient_error(model: &mut Model, batch: &Batch, cfg: &LossConfig, h: f64) -> Result<f64, String> {
    let base_routing = objective(model, batch, cfg).1;
    let (_, _, grads) = loss_and_grads(model, batch, cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let theta = model.params()[pi].tensor.data().to_vec();
        let mut numeric = Vec::with_capacity(theta.len());
        for j in 0..theta.len() {
            let mut at = |x: f64| {
                model.params_mut()[pi].tensor.data_mut()[j] = x;
                let (value, routing) = objective(model, batch, cfg);
                (value, routing == base_routing)
            };
            let (up, ok_up) = at(theta[j] + h);
            let (down, ok_down) = at(theta[j] - h);
            at(theta[j]);
            if !(ok_up && ok_down) {
                return Err(format!("routing flipped perturbing {}[{j}]", model.params()[pi].name));
            }
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(crate::max_relative_error(g.data(), &numeric));
    }
    Ok(worst)
}

/// Random 2-layer MoE instance for [`objective_gradient_error`].
pub fn moe_instance(seed: u64) -> (Model, Batch) {
    let cfg = ModelConfig { d_model: 8, n_layers: 2, n_heads: 2, ff_multiplier: 2.0, n_experts: 4, vocab_size: 11, seq_len: 6 };
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let model = Model::init(&cfg, 1.0, seed).unwrap();
    let (b, t) = (2, 5);
    let ids: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    (model, Batch { inputs: TokenBatch::new(b, t, ids).unwrap(), targets })
}
