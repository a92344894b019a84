use crate::blocks::Linear;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Binding, Graph, Init, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::Invalid(format!(
                "model_dim {model_dim} not divisible into {num_heads} heads"
            )));
        }
        Ok(Self {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Keys and values already projected and split into heads: `k` is
/// `(B, H, head_dim, Tk)`, `v` is `(B, H, Tk, head_dim)`.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    k: Var,
    v: Var,
    batch: usize,
}

/// Scaled dot-product attention with separate query, key, value and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: AttentionConfig) -> Result<Self> {
        let mut s = init.sub(name);
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            q: Linear::new(&mut s, "q", d, d, true)?,
            // a key bias shifts every score of a query equally and cancels in the softmax
            k: Linear::new(&mut s, "k", d, d, false)?,
            v: Linear::new(&mut s, "v", d, d, true)?,
            out: Linear::new(&mut s, "out", d, d, true)?,
        })
    }

    fn check(&self, g: &Graph<impl Real>, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.model_dim {
            return shape_err(
                "attention",
                format!("{what} {s:?}, expected (B, T, {})", self.cfg.model_dim),
            );
        }
        Ok((s[0], s[1]))
    }

    /// Projects a key/value sequence once so several queries can reuse it.
    pub fn project_kv<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, kv: Var) -> Result<KeyValue> {
        let (b, t) = self.check(g, kv, "key_value")?;
        let (h, hd) = (self.cfg.num_heads, self.cfg.head_dim());
        let k = self.k.forward(g, p, kv)?;
        let k = g.reshape(k, &[b, t, h, hd])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(g, p, kv)?;
        let v = g.reshape(v, &[b, t, h, hd])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        Ok(KeyValue { k, v, batch: b })
    }

    /// `mask`, when given, is added to the `(Tq, Tk)` scores before the softmax.
    pub fn attend<E: Real>(
        &self,
        g: &mut Graph<E>,
        p: &Binding<E>,
        query: Var,
        kv: &KeyValue,
        mask: Option<Var>,
    ) -> Result<Var> {
        let (b, tq) = self.check(g, query, "query")?;
        if b != kv.batch {
            return shape_err("attention", format!("query batch {b} vs key batch {}", kv.batch));
        }
        let (h, hd) = (self.cfg.num_heads, self.cfg.head_dim());
        let q = self.q.forward(g, p, query)?;
        let q = g.reshape(q, &[b, tq, h, hd])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kv.k)?;
        let mut scores = g.scale(scores, E::one() / E::lit(hd as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores);
        let ctx = g.matmul(weights, kv.v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.cfg.model_dim])?;
        self.out.forward(g, p, ctx)
    }

    /// Attention of `query (B, Tq, D)` over `key_value (B, Tk, D)`.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        p: &Binding<E>,
        query: Var,
        key_value: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let kv = self.project_kv(g, p, key_value)?;
        self.attend(g, p, query, &kv, mask)
    }
}
