//! Transformer primitives: scaled dot-product and multi-head attention,
//! sinusoidal positions, the position-wise feed-forward block and the
//! post-norm residual wrapper.

use rand::Rng;

use crate::error::{MtnError, Result};
use crate::numerics::{
    AttentionMask, AttnSpec, Graph, LayerNorm, Linear, MaskSpec, ParamStore, Real, Tensor, Var,
};

/// A batch of padded sequences laid out as `[batch * len, d]`.
#[derive(Clone, Debug)]
pub struct Seq {
    pub x: Var,
    /// Padded length shared by every batch item.
    pub len: usize,
    /// True length of each batch item.
    pub lens: Vec<usize>,
}

impl Seq {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn with(&self, x: Var) -> Seq {
        Seq {
            x,
            len: self.len,
            lens: self.lens.clone(),
        }
    }
}

pub fn causal_mask(len: usize) -> AttentionMask {
    AttentionMask::causal(len)
}

/// `softmax(q·kᵀ/√d_k + fill)·v` for a single head. Returns the output and
/// the `L_q × L_k` weight matrix.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (lq, lk) = (q.rows(), k.rows());
    if q.shape().len() != 2 || k.shape().len() != 2 || q.cols() != k.cols() {
        return Err(MtnError::Shape {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if v.rows() != lk || v.cols() != q.cols() {
        return Err(MtnError::Shape {
            op: "scaled_dot_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut g = Graph::eval();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(
        qv,
        kv,
        vv,
        AttnSpec {
            batch: 1,
            q_len: lq,
            k_len: lk,
            heads: 1,
            mask: mask.cloned().map(MaskSpec::Explicit),
            dropout: 0.0,
        },
    )?;
    let weights = Tensor::new(vec![lq, lk], g.attention_weights(out).unwrap().to_vec())?;
    Ok((g.value(out).clone(), weights))
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding<T: Real>(max_len: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(MtnError::contract(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    if max_len == 0 {
        return Err(MtnError::contract("positional table needs at least one row"));
    }
    Ok(Tensor::from_fn(&[max_len, d], |idx| {
        let (pos, dim) = (idx / d, idx % d);
        let pair = (dim / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d as f64);
        T::lit(if dim % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Multi-head attention with per-head projections packed column-wise into
/// `d × d` matrices (head `i` owns columns `i·d/h .. (i+1)·d/h`).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(MtnError::config(
                "model.heads",
                format!("{heads} heads do not divide model width {dim}"),
            ));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, false)?,
            key: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, false)?,
            value: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, false)?,
            output: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, false)?,
            heads,
            dim,
        })
    }

    /// Attends from `query_in` over `kv_in`; keys beyond each item's true
    /// length are masked, and `causal` additionally hides keys `j > i`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query_in: &Seq,
        kv_in: &Seq,
        causal: bool,
        attn_dropout: f64,
    ) -> Result<Var> {
        if query_in.batch() != kv_in.batch() {
            return Err(MtnError::Shape {
                op: "multi_head",
                lhs: vec![query_in.batch()],
                rhs: vec![kv_in.batch()],
            });
        }
        let q = self.query.forward(g, store, query_in.x)?;
        let k = self.key.forward(g, store, kv_in.x)?;
        let v = self.value.forward(g, store, kv_in.x)?;
        let heads = g.attention(
            q,
            k,
            v,
            AttnSpec {
                batch: query_in.batch(),
                q_len: query_in.len,
                k_len: kv_in.len,
                heads: self.heads,
                mask: Some(MaskSpec::KeyLens {
                    key_lens: kv_in.lens.clone(),
                    causal,
                }),
                dropout: attn_dropout,
            },
        )?;
        self.output.forward(g, store, heads)
    }
}

/// `W2·relu(W1·x + b1) + b2`, applied to every position independently.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.w1"), dim, hidden, true)?,
            outer: Linear::new(store, rng, &format!("{name}.w2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Post-norm residual wrapper: `layer_norm(x + dropout(inner(x)))`.
pub fn sublayer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norm: &LayerNorm,
    x: Var,
    dropout: f64,
    inner: impl FnOnce(&mut Graph<T>) -> Result<Var>,
) -> Result<Var> {
    let y = inner(g)?;
    if g.value(y).shape() != g.value(x).shape() {
        return Err(MtnError::Shape {
            op: "sublayer",
            lhs: g.value(x).shape().to_vec(),
            rhs: g.value(y).shape().to_vec(),
        });
    }
    let y = g.dropout(y, dropout);
    let sum = g.add(x, y)?;
    norm.forward(g, store, sum)
}

/// One attention sub-layer of the decoder or auto-encoder: multi-head
/// attention followed by a feed-forward block, each wrapped post-norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(AttentionBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_dim)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &Seq,
        source: &Seq,
        causal: bool,
        dropout: f64,
    ) -> Result<Seq> {
        let attended = sublayer(g, store, &self.attn_norm, x.x, dropout, |g| {
            self.attn.forward(g, store, x, source, causal, dropout)
        })?;
        let out = sublayer(g, store, &self.ff_norm, attended, dropout, |g| {
            self.ff.forward(g, store, attended)
        })?;
        Ok(x.with(out))
    }
}
