use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, dot, mm, mm_nt, mm_tn};
use super::tensor::Tensor;
use crate::error::{domain_err, numeric_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const RMS_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRows { a: Var, gate: Var, width: usize },
    Gather { a: Var, index: Vec<usize> },
    GatherRows { table: Var, rows: Vec<usize>, width: usize },
    ScatterRows { a: Var, rows: Vec<usize>, width: usize },
    ConcatRows { parts: Vec<Var>, width: usize },
    SliceRows { a: Var, start: usize, width: usize },
    Softmax { a: Var, width: usize },
    LogSumExp { a: Var, width: usize },
    RmsNorm { x: Var, gain: Var, width: usize, inv_rms: Vec<f64> },
    Silu(Var),
    SwiGlu { x: Var, w_gate: Var, w_up: Var, w_down: Var, dims: [usize; 4], pre_gate: Vec<f64>, pre_up: Vec<f64> },
    ReduceSum(Var),
    SumRows { a: Var, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, width: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of a forward computation.
///
/// Leaves may borrow their tensors for the lifetime `'a`, so parameters are
/// not copied onto the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> crate::Error {
    domain_err!("{op}: incompatible shapes {a:?} and {b:?}")
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing `tensor`.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(tensor), true)
    }

    pub fn param_owned(&mut self, tensor: Tensor) -> Var {
        self.leaf(Cow::Owned(tensor), true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(Cow::Owned(tensor), false)
    }

    /// Matrix product. Accepts `[n,k]·[k,m]` or batched `[B,n,k]·[B,k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (batch, n, k, m, out_shape) = match (sa, sb) {
            (&[n, k], &[k2, m]) if k == k2 => (1, n, k, m, vec![n, m]),
            (&[b1, n, k], &[b2, k2, m]) if b1 == b2 && k == k2 => (b1, n, k, m, vec![b1, n, m]),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; batch * n * m];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                mm(
                    &ad[bi * n * k..(bi + 1) * n * k],
                    &bd[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, n, k, m }, &[a, b]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let (batch, rows, cols, out_shape) = match sa.as_slice() {
            &[r, c] => (1, r, c, vec![c, r]),
            &[b, r, c] => (b, r, c, vec![b, c, r]),
            _ => return Err(domain_err!("transpose: expected rank 2 or 3, got shape {sa:?}")),
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        transpose_into(src, &mut out, batch, rows, cols);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Transpose { a, batch, rows, cols }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Scales row `i` of `a: [n, w]` by `gate[i]`.
    pub fn mul_rows(&mut self, a: Var, gate: Var) -> Result<Var> {
        let (ta, tg) = (self.value(a), self.value(gate));
        let (n, width) = match ta.shape() {
            &[n, w] if tg.shape() == [n] => (n, w),
            _ => return Err(shape_err("mul_rows", ta.shape(), tg.shape())),
        };
        let mut data = ta.data().to_vec();
        for i in 0..n {
            let g = tg.data()[i];
            data[i * width..(i + 1) * width].iter_mut().for_each(|x| *x *= g);
        }
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::MulRows { a, gate, width }, &[a, gate]))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(domain_err!("gather: index {bad} out of range for {} values", src.len()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { a, index }, &[a]))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, width) = match tt.shape() {
            &[r, w] => (r, w),
            s => return Err(domain_err!("embedding_lookup: table must be rank 2, got {s:?}")),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(domain_err!("embedding_lookup: id {bad} out of range for {rows} rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(&[ids.len(), width], data)?;
        Ok(self.push(value, Op::GatherRows { table, rows: ids.to_vec(), width }, &[table]))
    }

    /// Scatter-add: `out[rows[i], :] += a[i, :]` into an `[n_out, w]` zero tensor.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n_out: usize) -> Result<Var> {
        let ta = self.value(a);
        let width = match ta.shape() {
            &[n, w] if n == rows.len() => w,
            s => return Err(domain_err!("scatter_rows: {} rows for shape {s:?}", rows.len())),
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_out) {
            return Err(domain_err!("scatter_rows: row {bad} out of range for {n_out} rows"));
        }
        let mut data = vec![0.0; n_out * width];
        for (i, &r) in rows.iter().enumerate() {
            let src = &ta.data()[i * width..(i + 1) * width];
            data[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let value = Tensor::new(&[n_out, width], data)?;
        Ok(self.push(value, Op::ScatterRows { a, rows: rows.to_vec(), width }, &[a]))
    }

    /// Stacks rank-2 tensors of equal width along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| domain_err!("concat_rows: no inputs"))?;
        let width = match self.value(*first).shape() {
            &[_, w] => w,
            s => return Err(domain_err!("concat_rows: expected rank 2, got {s:?}")),
        };
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            match tp.shape() {
                &[_, w] if w == width => data.extend_from_slice(tp.data()),
                s => return Err(shape_err("concat_rows", &[0, width], s)),
            }
        }
        let rows = data.len() / width;
        let value = Tensor::new(&[rows, width], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec(), width }, parts))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, width) = match ta.shape() {
            &[n, w] => (n, w),
            s => return Err(domain_err!("slice_rows: expected rank 2, got {s:?}")),
        };
        if len == 0 || start + len > n {
            return Err(domain_err!("slice_rows: rows {start}..{} out of 0..{n}", start + len));
        }
        let data = ta.data()[start * width..(start + len) * width].to_vec();
        let value = Tensor::new(&[len, width], data)?;
        Ok(self.push(value, Op::SliceRows { a, start, width }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let width = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(width) {
            kernels::softmax_prefix(row, width);
        }
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Softmax { a, width }, &[a])
    }

    /// Softmax over the last axis of `[.., t, t]` scores where row `i` only
    /// sees columns `0..=i`; masked entries get probability zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        let t = ta.last_dim();
        if shape.len() < 2 || shape[shape.len() - 2] != t {
            return Err(domain_err!("causal_softmax: expected square trailing axes, got {shape:?}"));
        }
        let mut data = ta.data().to_vec();
        for (r, row) in data.chunks_mut(t).enumerate() {
            kernels::softmax_prefix(row, r % t + 1);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { a, width: t }, &[a]))
    }

    /// Row-wise `ln Σ exp` of `[n, w]`, giving `[n]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, width) = match ta.shape() {
            &[n, w] => (n, w),
            s => return Err(domain_err!("logsumexp: expected rank 2, got {s:?}")),
        };
        let data = ta.data().chunks(width).map(kernels::logsumexp).collect();
        let value = Tensor::new(&[n], data)?;
        Ok(self.push(value, Op::LogSumExp { a, width }, &[a]))
    }

    /// RMS normalisation over the last axis with a learned gain and no bias.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let width = tx.last_dim();
        if tg.shape() != [width] {
            return Err(shape_err("rms_norm", tx.shape(), tg.shape()));
        }
        let mut data = tx.data().to_vec();
        let mut inv_rms = Vec::with_capacity(data.len() / width);
        for row in data.chunks_mut(width) {
            let ms = dot(row, row) / width as f64;
            let r = 1.0 / libm::sqrt(ms + RMS_EPS);
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v = *v * r * g;
            }
            inv_rms.push(r);
        }
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, width, inv_rms }, &[x, gain]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kernels::silu(x)).collect();
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Silu(a), &[a])
    }

    /// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down` for `x: [n, d]`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let (tx, tg, tu, td) = (self.value(x), self.value(w_gate), self.value(w_up), self.value(w_down));
        let (n, d) = match tx.shape() {
            &[n, d] => (n, d),
            s => return Err(domain_err!("swiglu: input must be rank 2, got {s:?}")),
        };
        let h = match tg.shape() {
            &[d2, h] if d2 == d => h,
            s => return Err(shape_err("swiglu (gate)", tx.shape(), s)),
        };
        if tu.shape() != [d, h] {
            return Err(shape_err("swiglu (up)", tg.shape(), tu.shape()));
        }
        let d_out = match td.shape() {
            &[h2, o] if h2 == h => o,
            s => return Err(shape_err("swiglu (down)", tg.shape(), s)),
        };
        let mut pre_gate = vec![0.0; n * h];
        let mut pre_up = vec![0.0; n * h];
        mm(tx.data(), tg.data(), &mut pre_gate, n, d, h);
        mm(tx.data(), tu.data(), &mut pre_up, n, d, h);
        let hidden: Vec<f64> = pre_gate.iter().zip(&pre_up).map(|(&a, &b)| kernels::silu(a) * b).collect();
        let mut out = vec![0.0; n * d_out];
        mm(&hidden, td.data(), &mut out, n, h, d_out);
        let value = Tensor::new(&[n, d_out], out)?;
        let op = Op::SwiGlu { x, w_gate, w_up, w_down, dims: [n, d, h, d_out], pre_gate, pre_up };
        Ok(self.push(value, op, &[x, w_gate, w_up, w_down]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), &[a])
    }

    /// Column sums of `[n, w]`, giving `[w]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let width = match ta.shape() {
            &[_, w] => w,
            s => return Err(domain_err!("sum_rows: expected rank 2, got {s:?}")),
        };
        let mut out = vec![0.0; width];
        for row in ta.data().chunks(width) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        Ok(self.push(Tensor::from_vec(out), Op::SumRows { a, width }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [n, v]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, width) = match tl.shape() {
            &[n, w] if n == targets.len() => (n, w),
            s => return Err(domain_err!("cross_entropy: {} targets for logits {s:?}", targets.len())),
        };
        if !tl.all_finite() {
            return Err(numeric_err!("cross_entropy: non-finite logits"));
        }
        let mut total = 0.0;
        for (row, &t) in tl.data().chunks(width).zip(targets) {
            if t >= width {
                return Err(domain_err!("cross_entropy: target {t} out of range for {width} classes"));
            }
            total += kernels::logsumexp(row) - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), width }, &[logits]))
    }

    /// Reverse pass from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(domain_err!("backward needs a scalar output, got shape {:?}", out.value.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient matches value shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, n, k, m } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for bi in 0..batch {
                        mm_nt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &bd[bi * k * m..(bi + 1) * k * m],
                            &mut da[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for bi in 0..batch {
                        mm_tn(
                            &ad[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut db[bi * k * m..(bi + 1) * k * m],
                            n,
                            k,
                            m,
                        );
                    }
                });
            }
            &Op::Transpose { a, batch, rows, cols } => acc(a, &mut |da| {
                let mut t = vec![0.0; da.len()];
                transpose_into(g, &mut t, batch, cols, rows);
                da.iter_mut().zip(&t).for_each(|(d, x)| *d += x);
            }),
            &Op::Add(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bd) {
                        *d += x * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(ad) {
                        *d += x * y;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            &Op::MulRows { a, gate, width } => {
                let (ad, gd) = (val(a), val(gate));
                acc(a, &mut |da| {
                    for (i, (drow, grow)) in da.chunks_mut(width).zip(g.chunks(width)).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(d, x)| *d += x * gd[i]);
                    }
                });
                acc(gate, &mut |dg| {
                    for (i, (arow, grow)) in ad.chunks(width).zip(g.chunks(width)).enumerate() {
                        dg[i] += dot(arow, grow);
                    }
                });
            }
            Op::Gather { a, index } => acc(*a, &mut |da| {
                for (x, &i) in g.iter().zip(index) {
                    da[i] += x;
                }
            }),
            Op::GatherRows { table, rows, width } => acc(*table, &mut |dt| {
                for (grow, &r) in g.chunks(*width).zip(rows) {
                    dt[r * width..(r + 1) * width].iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                }
            }),
            Op::ScatterRows { a, rows, width } => acc(*a, &mut |da| {
                for (drow, &r) in da.chunks_mut(*width).zip(rows) {
                    drow.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(d, x)| *d += x);
                }
            }),
            Op::ConcatRows { parts, width } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |dp| dp.iter_mut().zip(slice).for_each(|(d, x)| *d += x));
                    offset += len;
                    debug_assert_eq!(len % width, 0);
                }
            }
            &Op::SliceRows { a, start, width } => acc(a, &mut |da| {
                let dst = &mut da[start * width..start * width + g.len()];
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }),
            &Op::Softmax { a, width } => {
                let p = node.value.data();
                acc(a, &mut |da| {
                    for ((drow, prow), grow) in da.chunks_mut(width).zip(p.chunks(width)).zip(g.chunks(width)) {
                        let s = dot(prow, grow);
                        for ((d, &pj), &gj) in drow.iter_mut().zip(prow).zip(grow) {
                            *d += pj * (gj - s);
                        }
                    }
                });
            }
            &Op::LogSumExp { a, width } => {
                let (ad, out) = (val(a), node.value.data());
                acc(a, &mut |da| {
                    for (i, (drow, arow)) in da.chunks_mut(width).zip(ad.chunks(width)).enumerate() {
                        for (d, &x) in drow.iter_mut().zip(arow) {
                            *d += g[i] * libm::exp(x - out[i]);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, width, inv_rms } => {
                let (xd, gd) = (val(*x), val(*gain));
                let w = *width;
                acc(*gain, &mut |dg| {
                    for ((xrow, grow), r) in xd.chunks(w).zip(g.chunks(w)).zip(inv_rms) {
                        for j in 0..w {
                            dg[j] += grow[j] * xrow[j] * r;
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; w];
                    for (((drow, xrow), grow), &r) in dx.chunks_mut(w).zip(xd.chunks(w)).zip(g.chunks(w)).zip(inv_rms) {
                        for j in 0..w {
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let proj = dot(&dxhat, xrow) * r / w as f64;
                        for j in 0..w {
                            drow[j] += r * (dxhat[j] - xrow[j] * r * proj);
                        }
                    }
                });
            }
            &Op::Silu(a) => {
                let ad = val(a);
                acc(a, &mut |da| {
                    for ((d, &x), &gx) in da.iter_mut().zip(ad).zip(g) {
                        *d += gx * kernels::silu_grad(x);
                    }
                });
            }
            Op::SwiGlu { x, w_gate, w_up, w_down, dims, pre_gate, pre_up } => {
                let [n, d, h, d_out] = *dims;
                let (xd, gd, ud, dd) = (val(*x), val(*w_gate), val(*w_up), val(*w_down));
                let hidden: Vec<f64> =
                    pre_gate.iter().zip(pre_up).map(|(&a, &b)| kernels::silu(a) * b).collect();
                let mut dh = vec![0.0; n * h];
                mm_nt(g, dd, &mut dh, n, d_out, h);
                acc(*w_down, &mut |dwd| mm_tn(&hidden, g, dwd, n, h, d_out));
                let mut d_gate = vec![0.0; n * h];
                let mut d_up = vec![0.0; n * h];
                for i in 0..n * h {
                    d_up[i] = dh[i] * kernels::silu(pre_gate[i]);
                    d_gate[i] = dh[i] * pre_up[i] * kernels::silu_grad(pre_gate[i]);
                }
                acc(*w_gate, &mut |dw| mm_tn(xd, &d_gate, dw, n, d, h));
                acc(*w_up, &mut |dw| mm_tn(xd, &d_up, dw, n, d, h));
                acc(*x, &mut |dx| {
                    mm_nt(&d_gate, gd, dx, n, h, d);
                    mm_nt(&d_up, ud, dx, n, h, d);
                });
            }
            &Op::ReduceSum(a) => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::SumRows { a, width } => acc(a, &mut |da| {
                for drow in da.chunks_mut(width) {
                    drow.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }),
            Op::CrossEntropy { logits, targets, width } => {
                let ld = val(*logits);
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |dl| {
                    for ((drow, lrow), &t) in dl.chunks_mut(*width).zip(ld.chunks(*width)).zip(targets) {
                        let lse = kernels::logsumexp(lrow);
                        for (d, &x) in drow.iter_mut().zip(lrow) {
                            *d += scale * libm::exp(x - lse);
                        }
                        drow[t] -= scale;
                    }
                });
            }
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, rows: usize, cols: usize) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = Tensor::identity(3);
        let mut tape = Tape::new();
        let (vi, va) = (tape.constant(id), tape.constant(a.clone()));
        let out = tape.matmul(vi, va).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 5], 0.7));
        let p = tape.softmax(a);
        assert!(tape.value(p).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 3]));
        let p = tape.causal_softmax(a).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (x, e) in tape.value(p).data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_sum_gradient_is_ones() {
        let x = t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.reduce_sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_and_constant_gradients() {
        let x = Tensor::from_vec(alloc::vec![3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let y = tape.reduce_sum(sq);
        assert_eq!(tape.backward(y).unwrap().get(v).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let v = tape.param(&x);
        let c = tape.constant(Tensor::scalar(4.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(v).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(tape.backward(v), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn lookup_and_scatter_check_indices() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding_lookup(table, &[0, 4]).is_err());
        assert!(tape.scatter_rows(table, &[0, 1, 2, 9], 5).is_err());
        assert!(tape.gather(table, alloc::vec![8], &[1]).is_err());
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.cross_entropy(l, &[0]), Err(crate::Error::Numeric(_))));
    }
}
