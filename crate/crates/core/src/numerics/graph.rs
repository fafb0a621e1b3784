//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose value is computed eagerly. Node
//! creation order is a valid topological order, so [`Graph::backward`] walks
//! the tape from the loss back to the first node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MtnError, Result};

use super::params::{Gradients, ParamId, ParamStore};
use super::real::{gemm, Real};
use super::tensor::{softmax_row, Tensor};

/// Additive fill for masked attention scores.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean `query_len × key_len` matrix, `true` = attendable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(MtnError::Shape {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        let mask = AttentionMask { rows, cols, allowed };
        if let Some(r) = (0..rows).find(|&r| !mask.row(r).iter().any(|&a| a)) {
            return Err(MtnError::contract(format!(
                "attention mask row {r} has no attendable key"
            )));
        }
        Ok(mask)
    }

    /// Lower-triangular mask: `(i, j)` attendable iff `j <= i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|x| x % len <= x / len).collect();
        AttentionMask {
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Masking rule for a batched attention call.
#[derive(Clone, Debug)]
pub enum MaskSpec {
    /// Key `j` of batch item `b` is attendable iff `j < key_lens[b]`, and
    /// additionally `j <= i` when `causal`.
    KeyLens { key_lens: Vec<usize>, causal: bool },
    /// One explicit mask shared by every batch item.
    Explicit(AttentionMask),
}

impl MaskSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        match self {
            MaskSpec::KeyLens { key_lens, causal } => j < key_lens[b] && (!causal || j <= i),
            MaskSpec::Explicit(m) => m.get(i, j),
        }
    }
}

/// Shape and masking parameters of a batched multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub mask: Option<MaskSpec>,
    /// Dropout on attention weights, active only in training graphs.
    pub dropout: f64,
}

struct AttnSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttnSpec,
    /// Softmax weights `[batch, heads, q_len, k_len]` before dropout.
    probs: Vec<T>,
    /// Scaled keep-mask, same layout as `probs`; empty without dropout.
    drop: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Log(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout { x: Var, mask: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Attention(Box<AttnSaved<T>>),
    ConcatSeq { parts: Vec<(Var, usize)>, batch: usize },
    SmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        pad: usize,
        probs: Vec<T>,
        count: usize,
        support: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Real> Graph<T> {
    /// `training` enables dropout; `seed` fixes the dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Graph::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a registered parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Saved softmax weights of an attention node, `[batch, heads, q, k]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        let bshape = bv.shape();
        let ok = bshape.len() == 2 && if trans_b { bshape[1] == k } else { bshape[0] == k };
        if !ok {
            return Err(MtnError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let n = if trans_b { bshape[0] } else { bshape[1] };
        let m = av.rows();
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(MtnError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(MtnError::Shape {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= T::zero()) {
            return Err(MtnError::NonFinite("log of a non-positive value".into()));
        }
        let value = xv.map(T::ln);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Log(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = super::tensor::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != c || bv.numel() != c {
            return Err(MtnError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let eps = T::lit(eps);
        let n = T::from_usize(c).unwrap();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: identity in eval graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() >= p { keep } else { T::zero() })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Row lookup into a `[V, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(MtnError::contract(format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(MtnError::contract("gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates per-example sequences: every part is `[batch * len_i, d]`
    /// and the result holds, for each batch item, its rows of every part in
    /// order.
    pub fn concat_seq(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let d = self.value(parts[0].0).cols();
        for &(p, len) in parts {
            let pv = self.value(p);
            if pv.cols() != d || pv.rows() != batch * len {
                return Err(MtnError::Shape {
                    op: "concat_seq",
                    lhs: vec![batch * len, d],
                    rhs: pv.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for &(p, len) in parts {
                let data = self.value(p).data();
                out.extend_from_slice(&data[b * len * d..(b + 1) * len * d]);
            }
        }
        let rg = parts.iter().any(|&(p, _)| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![batch * total, d], out),
            Op::ConcatSeq {
                parts: parts.to_vec(),
                batch,
            },
            rg,
        ))
    }

    /// Batched multi-head scaled dot-product attention over already
    /// projected inputs. `q` is `[batch * q_len, d]`, `k` and `v` are
    /// `[batch * k_len, d]`; head `i` uses columns `i*d/h .. (i+1)*d/h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let d = self.value(q).cols();
        let AttnSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(MtnError::contract(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        for (var, rows) in [(q, batch * q_len), (k, batch * k_len), (v, batch * k_len)] {
            let s = self.value(var).shape();
            if s.len() != 2 || s[0] != rows || s[1] != d {
                return Err(MtnError::Shape {
                    op: "attention",
                    lhs: vec![rows, d],
                    rhs: s.to_vec(),
                });
            }
        }
        if let Some(MaskSpec::Explicit(m)) = &spec.mask {
            if m.rows() != q_len || m.cols() != k_len {
                return Err(MtnError::Shape {
                    op: "attention_mask",
                    lhs: vec![q_len, k_len],
                    rhs: vec![m.rows(), m.cols()],
                });
            }
        }
        if let Some(MaskSpec::KeyLens { key_lens, .. }) = &spec.mask {
            if key_lens.len() != batch || key_lens.iter().any(|&l| l == 0 || l > k_len) {
                return Err(MtnError::contract(format!(
                    "key lengths {key_lens:?} invalid for batch {batch} and key length {k_len}"
                )));
            }
        }

        let dk = d / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let fill = T::lit(MASK_FILL);
        let use_drop = self.training && spec.dropout > 0.0;
        let keep = T::lit(1.0 / (1.0 - spec.dropout.min(0.999_999)));
        let block = q_len * k_len;
        let mut probs = vec![T::zero(); batch * heads * block];
        let mut drop = if use_drop {
            vec![T::zero(); probs.len()]
        } else {
            Vec::new()
        };
        let mut out = vec![T::zero(); batch * q_len * d];
        let mut scores = vec![T::zero(); k_len];
        let rng = &mut self.rng;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dk;
                let base = (b * heads + h) * block;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dk];
                    let mut any = false;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(b * k_len + j) * d + off..][..dk];
                        let dot: T = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                        let allowed = spec.mask.as_ref().is_none_or(|m| m.allowed(b, i, j));
                        any |= allowed;
                        *s = if allowed { dot * scale } else { dot * scale + fill };
                    }
                    if !any {
                        return Err(MtnError::contract(format!(
                            "attention row {i} of batch item {b} has no attendable key"
                        )));
                    }
                    let prow = &mut probs[base + i * k_len..base + (i + 1) * k_len];
                    softmax_row(&scores, prow);
                    let orow = &mut out[(b * q_len + i) * d + off..][..dk];
                    for j in 0..k_len {
                        let mut w = prow[j];
                        if use_drop {
                            let m = if rng.gen::<f64>() >= spec.dropout {
                                keep
                            } else {
                                T::zero()
                            };
                            drop[base + i * k_len + j] = m;
                            w *= m;
                        }
                        if w != T::zero() {
                            let vrow = &vd[(b * k_len + j) * d + off..][..dk];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let value = Tensor::from_parts(vec![batch * q_len, d], out);
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                spec,
                probs,
                drop,
            })),
            rg,
        ))
    }

    /// Label-smoothed cross-entropy averaged over non-pad rows.
    ///
    /// The softmax excludes the `pad` column, so the smoothing support has
    /// `V - 1` entries; the gold token receives `1 - eps + eps / (V - 1)`.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[usize], eps: f64, pad: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(MtnError::Shape {
                op: "smoothed_nll",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(MtnError::contract(format!("label smoothing {eps} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(MtnError::contract(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let support = if pad < v { v - 1 } else { v };
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(MtnError::contract("loss over zero non-pad positions"));
        }
        let epsr = T::lit(eps);
        let smooth = epsr / T::from_usize(support).unwrap();
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = lv.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != pad)
                .map(|(_, &x)| x)
                .fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != pad)
                .map(|(_, &x)| (x - max).exp())
                .sum::<T>()
                .ln()
                + max;
            let mut sum_logp = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if j == pad {
                    continue;
                }
                let lp = x - lse;
                probs[r * v + j] = lp.exp();
                sum_logp += lp;
            }
            let gold = row[t] - lse;
            let mut loss = -(T::one() - epsr) * gold;
            if eps > 0.0 {
                loss -= smooth * sum_logp;
            }
            total += loss;
        }
        let value = Tensor::scalar(total / T::from_usize(count).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                eps: epsr,
                pad,
                probs,
                count,
                support,
            },
            rg,
        ))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MtnError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        let Graph { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let k = av.cols();
                let m = av.rows();
                let n = if trans_b { bv.shape()[0] } else { bv.shape()[1] };
                if let Some(ga) = acc(nodes, grads, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !trans_b, ga, true);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    if trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, gb, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                        *x += gy * o;
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                        *x += gy * o;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * f);
                }
            }
            Op::Relu(x) => {
                let out = nodes[idx].value.data();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, &b), &o) in gx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *a += b;
                        }
                    }
                }
            }
            Op::Log(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *a += b / v;
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g0);
                }
            }
            Op::Softmax(x) => {
                let y = &nodes[idx].value;
                let c = y.cols();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let c = gv.len();
                let n = T::from_usize(c).unwrap();
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let mut dh = vec![T::zero(); c];
                    for (r, ((gxr, gr), hr)) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, &b), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = acc(nodes, grads, *table) {
                    let d = g.len() / ids.len();
                    for (row, &id) in g.chunks(d).zip(ids) {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::ConcatSeq { parts, batch } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let d = g.len() / (batch * total);
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(gp) = acc(nodes, grads, p) {
                        for b in 0..*batch {
                            let src = &g[(b * total + offset) * d..(b * total + offset + len) * d];
                            gp[b * len * d..(b + 1) * len * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &s)| *a += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Attention(saved) => backprop_attention(nodes, grads, saved, g),
            Op::SmoothedNll {
                logits,
                targets,
                eps,
                pad,
                probs,
                count,
                support,
            } => {
                let v = probs.len() / targets.len();
                let inv = g[0] / T::from_usize(*count).unwrap();
                let smooth = *eps / T::from_usize(*support).unwrap();
                let (pad, eps) = (*pad, *eps);
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == pad {
                            continue;
                        }
                        for j in 0..v {
                            if j == pad {
                                continue;
                            }
                            let mut q = smooth;
                            if j == t {
                                q += T::one() - eps;
                            }
                            gl[r * v + j] += (probs[r * v + j] - q) * inv;
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter loaded onto this tape into
    /// `grads`. Parameters that were never reached contribute nothing.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients<T>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.grad(var) {
                grads
                    .get_mut(id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn acc<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_attention<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], s: &AttnSaved<T>, g: &[T]) {
    let AttnSpec {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = s.spec;
    let qv = nodes[s.q.0].value.data();
    let kv = nodes[s.k.0].value.data();
    let vv = nodes[s.v.0].value.data();
    let d = qv.len() / (batch * q_len);
    let dk = d / heads;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let block = q_len * k_len;
    let mut dq = vec![T::zero(); qv.len()];
    let mut dkk = vec![T::zero(); kv.len()];
    let mut dv = vec![T::zero(); vv.len()];
    let mut dp = vec![T::zero(); k_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dk;
            let base = (b * heads + h) * block;
            for i in 0..q_len {
                let go = &g[(b * q_len + i) * d + off..][..dk];
                let prow = &s.probs[base + i * k_len..base + (i + 1) * k_len];
                for j in 0..k_len {
                    let vrow = &vv[(b * k_len + j) * d + off..][..dk];
                    let mut w = prow[j];
                    let mut dpj: T = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                    if !s.drop.is_empty() {
                        let m = s.drop[base + i * k_len + j];
                        w *= m;
                        dpj *= m;
                    }
                    dp[j] = dpj;
                    if w != T::zero() {
                        let dvrow = &mut dv[(b * k_len + j) * d + off..][..dk];
                        for (a, &x) in dvrow.iter_mut().zip(go) {
                            *a += w * x;
                        }
                    }
                }
                let dot: T = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                let qrow = &qv[(b * q_len + i) * d + off..][..dk];
                for j in 0..k_len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kv[(b * k_len + j) * d + off..][..dk];
                    let dqrow = &mut dq[(b * q_len + i) * d + off..][..dk];
                    for (a, &x) in dqrow.iter_mut().zip(krow) {
                        *a += ds * x;
                    }
                    let dkrow = &mut dkk[(b * k_len + j) * d + off..][..dk];
                    for (a, &x) in dkrow.iter_mut().zip(qrow) {
                        *a += ds * x;
                    }
                }
            }
        }
    }
    for (var, buf) in [(s.q, dq), (s.k, dkk), (s.v, dv)] {
        if let Some(gv) = acc(nodes, grads, var) {
            gv.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::eval();
        let x = g.variable(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::<f64>::eval();
        let data = [0.3, -1.7, 2.5];
        let x = g.variable(t(&[3], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &data);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::eval();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(MtnError::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::<f64>::eval();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let unused = g.variable(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::<f64>::eval();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(MtnError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn causal_mask_rows() {
        let m = AttentionMask::causal(3);
        let rows: Vec<Vec<bool>> = (0..3).map(|i| m.row(i).to_vec()).collect();
        assert_eq!(
            rows,
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        assert!(AttentionMask::new(1, 2, vec![false, false]).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f64>::eval();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5), x);
    }

    #[test]
    fn dropout_is_seeded() {
        let run = |seed| {
            let mut g = Graph::<f64>::new(true, seed);
            let x = g.constant(Tensor::ones(&[64]));
            let y = g.dropout(x, 0.5);
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let kept = run(3).data().iter().filter(|&&v| v != 0.0).count();
        assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(kept > 10 && kept < 54);
    }
}
