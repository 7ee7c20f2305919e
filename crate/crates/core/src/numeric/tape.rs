//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so inputs always precede outputs and a
//! single reverse sweep visits each node once. Handles ([`Var`]) are plain
//! indices into the tape.

use std::sync::Arc;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rope::RotaryTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Sum {
        a: Var,
    },
    Silu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Rotary {
        a: Var,
        table: Arc<RotaryTable<F>>,
        transposed: bool,
    },
    CausalMerge {
        preceding: Var,
        succeeding: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
        denom: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`. `None` for
    /// untracked values or ones the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"))
    }

    // ----- primitives -------------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    /// Per-group product: `[G, M, K] x [G, K, N]`, or `[G, M, K] x [G, N, K]^T`
    /// when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![F::zero(); g * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for gi in 0..g {
                F::gemm(
                    m,
                    k,
                    n,
                    &da[gi * m * k..(gi + 1) * m * k],
                    false,
                    &db[gi * k * n..(gi + 1) * k * n],
                    trans_b,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    false,
                );
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[C]` bias to every row of `[.., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let c = sb[0];
        let b = self.value(bias).data();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::AddBias { x, bias },
            &[x, bias],
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Scale { a, factor },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x / (F::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Silu { a },
            &[a],
        )
    }

    /// Softmax over the last axis after adding an optional constant mask of
    /// zeros and [`Real::MASK_SENTINEL`] entries.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(shape_err("softmax_rows", &shape, m.shape()));
            }
        }
        let cols = *shape.last().unwrap();
        let data = self.value(x).data();
        let mut out = vec![F::zero(); data.len()];
        for (r, row_out) in out.chunks_mut(cols).enumerate() {
            let row = &data[r * cols..(r + 1) * cols];
            let mrow = mask.map(|m| &m.data()[r * cols..(r + 1) * cols]);
            if let Some(mr) = mrow {
                if mr.iter().all(|&v| v == F::MASK_SENTINEL) {
                    return Err(Error::FullyMaskedRow);
                }
            }
            let shifted = |j: usize| match mrow {
                Some(mr) => row[j] + mr[j],
                None => row[j],
            };
            let mut max = F::neg_infinity();
            for j in 0..cols {
                max = max.max(shifted(j));
            }
            let mut total = F::zero();
            for (j, o) in row_out.iter_mut().enumerate() {
                *o = (shifted(j) - max).exp();
                total = total + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / total;
            }
        }
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { a: x }, &[x]))
    }

    /// Root-mean-square normalization of each row of `[.., C]` times `gain[C]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gain).to_vec());
        if sg.len() != 1 || sx.last() != Some(&sg[0]) {
            return Err(shape_err("rms_norm", &sx, &sg));
        }
        let c = sg[0];
        let eps = F::from_f64_lossy(eps);
        let cf = F::from_usize(c).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let rows = xd.len() / c;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / cf;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[r * c + j] = row[j] * inv * g[j];
            }
        }
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            &[x, gain],
        ))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[ids.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: v,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[B*T, H*Dh] -> [B*H, T, Dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] % batch != 0 || s[1] % heads != 0 {
            return Err(shape_err("split_heads", &s, &[batch, heads]));
        }
        let seq = s[0] / batch;
        let dh = s[1] / heads;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * s[1] + h * dh;
                    let to = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[batch * heads, seq, dh], out)?,
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            },
            &[a],
        ))
    }

    /// `[B*H, T, Dh] -> [B*T, H*Dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] % batch != 0 {
            return Err(shape_err("merge_heads", &s, &[batch]));
        }
        let (heads, seq, dh) = (s[0] / batch, s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * heads * dh + h * dh;
                    let from = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[batch * seq, heads * dh], out)?,
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            },
            &[a],
        ))
    }

    /// Rotates every `[Dh]` vector of `[G, T, Dh]` by its sequence position `t`.
    pub fn rotary(&mut self, a: Var, table: &Arc<RotaryTable<F>>, transposed: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[2] != table.head_dim() {
            return Err(shape_err("rotary", &s, &[table.head_dim()]));
        }
        if s[1] > table.max_positions() {
            return Err(Error::PositionOutOfRange {
                pos: s[1] - 1,
                max: table.max_positions(),
            });
        }
        let (seq, dh) = (s[1], s[2]);
        let mut out = self.value(a).data().to_vec();
        for (i, v) in out.chunks_mut(dh).enumerate() {
            table.rotate_in_place(v, i % seq, transposed);
        }
        Ok(self.push(
            Tensor::from_vec(&s, out)?,
            Op::Rotary {
                a,
                table: Arc::clone(table),
                transposed,
            },
            &[a],
        ))
    }

    /// For `[G, T, T]` score matrices: entries with key index `n <= m` come from
    /// `preceding`, entries with `n > m` from `succeeding`.
    pub fn causal_merge(&mut self, preceding: Var, succeeding: Var) -> Result<Var> {
        let (sp, ss) = (self.shape(preceding).to_vec(), self.shape(succeeding));
        if sp.len() != 3 || sp[1] != sp[2] || sp.as_slice() != ss {
            return Err(shape_err("causal_merge", &sp, ss));
        }
        let t = sp[1];
        let mut out = self.value(preceding).data().to_vec();
        let suc = self.value(succeeding).data();
        for (i, o) in out.iter_mut().enumerate() {
            let (m, n) = ((i / t) % t, i % t);
            if n > m {
                *o = suc[i];
            }
        }
        Ok(self.push(
            Tensor::from_vec(&sp, out)?,
            Op::CausalMerge {
                preceding,
                succeeding,
            },
            &[preceding, succeeding],
        ))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `[T, V]` logits, normalized by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(shape_err("cross_entropy", &s, &[targets.len(), weights.len()]));
        }
        let (t, v) = (s[0], s[1]);
        let total_weight = weights.iter().copied().sum::<F>();
        if total_weight <= F::zero() {
            return Err(Error::NoSupervisedPositions);
        }
        let denom = total_weight.max(F::one());
        let data = self.value(logits).data();
        let mut probs = vec![F::zero(); t * v];
        let mut loss = F::zero();
        for r in 0..t {
            if weights[r] == F::zero() {
                continue;
            }
            let target = targets[r];
            if target >= v {
                return Err(Error::TokenOutOfRange {
                    id: target as u32,
                    vocab: v,
                });
            }
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut total = F::zero();
            for (j, p) in probs[r * v..(r + 1) * v].iter_mut().enumerate() {
                *p = (row[j] - max).exp();
                total = total + *p;
            }
            let log_z = max + total.ln();
            loss = loss - weights[r] * (row[target] - log_z);
            for p in probs[r * v..(r + 1) * v].iter_mut() {
                *p = *p / total;
            }
        }
        let value = loss / denom;
        if !value.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                denom,
            },
            &[logits],
        ))
    }

    // ----- reverse sweep ----------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarBackward(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
            propagate(before, node, &grad);
        }
        Ok(())
    }
}

/// Accumulates the gradient of `node` into its inputs (all stored in `before`).
fn propagate<F: Real>(before: &mut [Node<F>], node: &Node<F>, g: &[F]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let k = before[a.0].value.shape()[1];
            if before[a.0].requires_grad {
                let bv = before[b.0].value.data().to_vec();
                let na = &mut before[a.0];
                let len = na.value.len();
                // dA = dC * B^T
                F::gemm(m, n, k, g, false, &bv, true, accumulate(&mut na.grad, len), true);
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let nb = &mut before[b.0];
                let len = nb.value.len();
                // dB = A^T * dC
                F::gemm(k, m, n, &av, true, g, false, accumulate(&mut nb.grad, len), true);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (gs, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            let k = before[a.0].value.shape()[2];
            if before[a.0].requires_grad {
                let bv = before[b.0].value.data().to_vec();
                let na = &mut before[a.0];
                let len = na.value.len();
                let ga = accumulate(&mut na.grad, len);
                for gi in 0..gs {
                    let gc = &g[gi * m * n..(gi + 1) * m * n];
                    let bb = &bv[gi * k * n..(gi + 1) * k * n];
                    let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                    // dA = dC * op(B)^T
                    F::gemm(m, n, k, gc, false, bb, !*trans_b, dst, true);
                }
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let nb = &mut before[b.0];
                let len = nb.value.len();
                let gb = accumulate(&mut nb.grad, len);
                for gi in 0..gs {
                    let gc = &g[gi * m * n..(gi + 1) * m * n];
                    let aa = &av[gi * m * k..(gi + 1) * m * k];
                    let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // B is [N, K]: dB = dC^T * A
                        F::gemm(n, m, k, gc, true, aa, false, dst, true);
                    } else {
                        F::gemm(k, m, n, aa, true, gc, false, dst, true);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                let nv = &mut before[v.0];
                if nv.requires_grad {
                    let len = nv.value.len();
                    for (d, &x) in accumulate(&mut nv.grad, len).iter_mut().zip(g) {
                        *d = *d + x;
                    }
                }
            }
        }
        Op::AddBias { x, bias } => {
            let nx = &mut before[x.0];
            if nx.requires_grad {
                let len = nx.value.len();
                for (d, &v) in accumulate(&mut nx.grad, len).iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            let nb = &mut before[bias.0];
            if nb.requires_grad {
                let c = nb.value.len();
                let gb = accumulate(&mut nb.grad, c);
                for (i, &v) in g.iter().enumerate() {
                    gb[i % c] = gb[i % c] + v;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            if before[a.0].requires_grad {
                let na = &mut before[a.0];
                let len = na.value.len();
                for ((d, &x), &y) in accumulate(&mut na.grad, len).iter_mut().zip(g).zip(&bv) {
                    *d = *d + x * y;
                }
            }
            if before[b.0].requires_grad {
                let nb = &mut before[b.0];
                let len = nb.value.len();
                for ((d, &x), &y) in accumulate(&mut nb.grad, len).iter_mut().zip(g).zip(&av) {
                    *d = *d + x * y;
                }
            }
        }
        Op::Scale { a, factor } => {
            let na = &mut before[a.0];
            let len = na.value.len();
            for (d, &x) in accumulate(&mut na.grad, len).iter_mut().zip(g) {
                *d = *d + x * *factor;
            }
        }
        Op::Sum { a } => {
            let na = &mut before[a.0];
            let len = na.value.len();
            for d in accumulate(&mut na.grad, len).iter_mut() {
                *d = *d + g[0];
            }
        }
        Op::Silu { a } => {
            let na = &mut before[a.0];
            let xs = na.value.data().to_vec();
            let len = xs.len();
            for ((d, &x), &gy) in accumulate(&mut na.grad, len).iter_mut().zip(&xs).zip(g) {
                let s = F::one() / (F::one() + (-x).exp());
                *d = *d + gy * s * (F::one() + x * (F::one() - s));
            }
        }
        Op::Softmax { a } => {
            let cols = *out.shape().last().unwrap();
            let y = out.data();
            let na = &mut before[a.0];
            let len = na.value.len();
            let ga = accumulate(&mut na.grad, len);
            for r in 0..len / cols {
                let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                for j in 0..cols {
                    ga[r * cols + j] = ga[r * cols + j] + yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let c = before[gain.0].value.len();
            let cf = F::from_usize(c).unwrap();
            let xs = before[x.0].value.data().to_vec();
            let gv = before[gain.0].value.data().to_vec();
            if before[gain.0].requires_grad {
                let ng = &mut before[gain.0];
                let gg = accumulate(&mut ng.grad, c);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    for j in 0..c {
                        gg[j] = gg[j] + g[r * c + j] * xs[r * c + j] * inv;
                    }
                }
            }
            if before[x.0].requires_grad {
                let nx = &mut before[x.0];
                let len = nx.value.len();
                let gx = accumulate(&mut nx.grad, len);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let (xr, gr) = (&xs[row.clone()], &g[row]);
                    // dxhat = dy * gain; dx = inv * (dxhat - xhat * mean(dxhat * xhat))
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + gr[j] * gv[j] * xr[j] * inv;
                    }
                    let mean = dot / cf;
                    for j in 0..c {
                        let xhat = xr[j] * inv;
                        gx[r * c + j] = gx[r * c + j] + inv * (gr[j] * gv[j] - xhat * mean);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let nt = &mut before[table.0];
            let d = nt.value.shape()[1];
            let len = nt.value.len();
            let gt = accumulate(&mut nt.grad, len);
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                }
            }
        }
        Op::SplitHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let na = &mut before[a.0];
            let width = na.value.shape()[1];
            let dh = width / heads;
            let len = na.value.len();
            let ga = accumulate(&mut na.grad, len);
            for b in 0..*batch {
                for t in 0..*seq {
                    for h in 0..*heads {
                        let dst = (b * seq + t) * width + h * dh;
                        let src = ((b * heads + h) * seq + t) * dh;
                        for j in 0..dh {
                            ga[dst + j] = ga[dst + j] + g[src + j];
                        }
                    }
                }
            }
        }
        Op::MergeHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let na = &mut before[a.0];
            let dh = na.value.shape()[2];
            let len = na.value.len();
            let ga = accumulate(&mut na.grad, len);
            for b in 0..*batch {
                for t in 0..*seq {
                    for h in 0..*heads {
                        let src = (b * seq + t) * heads * dh + h * dh;
                        let dst = ((b * heads + h) * seq + t) * dh;
                        for j in 0..dh {
                            ga[dst + j] = ga[dst + j] + g[src + j];
                        }
                    }
                }
            }
        }
        Op::Rotary {
            a,
            table,
            transposed,
        } => {
            // Rotations are orthogonal: the adjoint is the opposite rotation.
            let seq = out.shape()[1];
            let dh = out.shape()[2];
            let mut back = g.to_vec();
            for (i, v) in back.chunks_mut(dh).enumerate() {
                table.rotate_in_place(v, i % seq, !*transposed);
            }
            let na = &mut before[a.0];
            let len = na.value.len();
            for (d, &x) in accumulate(&mut na.grad, len).iter_mut().zip(&back) {
                *d = *d + x;
            }
        }
        Op::CausalMerge {
            preceding,
            succeeding,
        } => {
            let t = out.shape()[1];
            for (v, upper) in [(preceding, false), (succeeding, true)] {
                let nv = &mut before[v.0];
                if !nv.requires_grad {
                    continue;
                }
                let len = nv.value.len();
                let gv = accumulate(&mut nv.grad, len);
                for (i, &x) in g.iter().enumerate() {
                    let (m, n) = ((i / t) % t, i % t);
                    if (n > m) == upper {
                        gv[i] = gv[i] + x;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            denom,
        } => {
            let nl = &mut before[logits.0];
            let v = nl.value.shape()[1];
            let len = nl.value.len();
            let gl = accumulate(&mut nl.grad, len);
            for (r, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                if w == F::zero() {
                    continue;
                }
                let scale = g[0] * w / *denom;
                for j in 0..v {
                    let onehot = if j == target { F::one() } else { F::zero() };
                    gl[r * v + j] = gl[r * v + j] + scale * (probs[r * v + j] - onehot);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let y = tape.softmax_rows(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[1, 2], &[2f64.ln(), 0.]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(t(&[1, 3], &[5., 5., 0.]));
        let mask = t(&[1, 3], &[0., 0., f64::MASK_SENTINEL]);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let s = f32::MASK_SENTINEL as f64;
        let mask = Tensor::from_f64(&[2, 2], &[0., s, s, s]).unwrap();
        let err = tape.softmax_rows(x, Some(&mask)).unwrap_err();
        assert_eq!(err.to_string(), "fully masked attention row");
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[3, 16]));
        let loss = tape.cross_entropy(logits, &[1, 5, 15], &[1.0; 3]).unwrap();
        assert!((tape.value(loss).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut tape = Tape::new();
            let mut v = vec![0.0; 4];
            v[2] = margin;
            let logits = tape.constant(t(&[1, 4], &v));
            let loss = tape.cross_entropy(logits, &[2], &[1.0]).unwrap();
            let l = tape.value(loss).item();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn cross_entropy_requires_supervision() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
        let err = tape.cross_entropy(logits, &[0, 1], &[0.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "no supervised positions");
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[3., 4.]));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn backward_twice_and_non_scalar_fail() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarBackward(_))));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let x = tape.constant(t(&[6, 4], &data));
        let s = tape.split_heads(x, 2, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // batch 0, head 1, t=2 comes from row 2, cols 2..4
        let v = tape.value(s);
        assert_eq!(v.get(&[1, 2, 0]), 10.0);
        assert_eq!(v.get(&[1, 2, 1]), 11.0);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }

    #[test]
    fn causal_merge_picks_triangles() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 2, 2], 1.0f64));
        let s = tape.constant(Tensor::full(&[1, 2, 2], 2.0f64));
        let m = tape.causal_merge(p, s).unwrap();
        assert_eq!(tape.value(m).data(), &[1., 2., 1., 1.]);
    }
}
