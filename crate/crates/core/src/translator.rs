//! Step-wise alignment of a `(B, T, D)` sequence.
//!
//! The sequence is split into `T` vectors and run through `M` encoder layers
//! and `N` decoder layers. Every layer walks the steps in order and carries a
//! hidden state from one step to the next. A step is a context-attention
//! block (CAB: a 1-channel convolution over the feature axis, attending to the
//! previous hidden state), then a global-attention block (GAB: attention over
//! the whole unsplit input), then an FFN. Decoder steps additionally attend
//! to the final encoder output of the same step before the FFN.
//!
//! Encoder hidden states start at zero. Every decoder layer starts from the
//! last encoder hidden state. The output is the last decoder layer's steps
//! concatenated over time, and its hidden state after the last step
//! summarizes the whole sequence.

use crate::blocks::{AttentionConfig, Conv1d, Ffn, KeyValue, LayerNorm, MultiHeadAttention};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Binding, Graph, Init, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorConfig {
    /// Encoder layers.
    pub m: usize,
    /// Decoder layers.
    pub n: usize,
    pub cab_kernel: usize,
    pub dim: usize,
    pub time: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
}

impl TranslatorConfig {
    pub fn desk(dim: usize, time: usize) -> Self {
        Self {
            m: 3,
            n: 2,
            cab_kernel: 9,
            dim,
            time,
            num_heads: 4,
            ffn_mult: 4,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            cab_kernel: 45,
            num_heads: 8,
            ..Self::desk(768, 32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::Invalid(format!("translator needs M, N >= 1, got {}, {}", self.m, self.n)));
        }
        if self.cab_kernel % 2 == 0 || self.cab_kernel > self.dim {
            return Err(Error::Invalid(format!(
                "cab_kernel {} must be odd and at most D = {}",
                self.cab_kernel, self.dim
            )));
        }
        if self.time < 1 {
            return Err(Error::Invalid("translator needs T >= 1".into()));
        }
        AttentionConfig::new(self.dim, self.num_heads)?;
        Ok(())
    }
}

/// Hidden states of one forward pass; entries are graph variables.
#[derive(Clone, Debug)]
pub struct TranslatorState {
    /// `per_step_hidden[layer][t]`, encoder layers first, each `(B, D)`.
    pub per_step_hidden: Vec<Vec<Var>>,
    /// Last decoder layer's hidden state at step `T - 1`.
    pub last_hidden: Var,
}

#[derive(Clone, Debug)]
pub struct TranslatorOutput {
    /// `(B, T, D)`.
    pub y: Var,
    pub state: TranslatorState,
}

/// `X (B, T, D)` to `T` vectors `(B, D)`.
pub fn split_time<E: Real>(g: &mut Graph<E>, x: Var) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return shape_err("split_time", format!("expected (B, T, D) with T >= 1, got {s:?}"));
    }
    (0..s[1]).map(|t| g.select(x, 1, t)).collect()
}

/// Inverse of [`split_time`].
pub fn concat_time<E: Real>(g: &mut Graph<E>, steps: &[Var]) -> Result<Var> {
    g.stack(steps, 1)
}

fn as_seq<E: Real>(g: &mut Graph<E>, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 2 {
        return shape_err("translator", format!("step vector must be (B, D), got {s:?}"));
    }
    g.reshape(v, &[s[0], 1, s[1]])
}

fn as_vec<E: Real>(g: &mut Graph<E>, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    g.reshape(v, &[s[0], s[2]])
}

fn same_shape<E: Real>(g: &Graph<E>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return shape_err(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Context attention block.
#[derive(Clone, Debug)]
pub struct Cab {
    pub conv: Conv1d,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl Cab {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: &TranslatorConfig) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            // a bias would shift all D features equally, which the layer norm removes
            conv: Conv1d::without_bias(&mut s, "conv", 1, 1, cfg.cab_kernel)?,
            attn: MultiHeadAttention::new(&mut s, "attn", AttentionConfig::new(cfg.dim, cfg.num_heads)?)?,
            norm: LayerNorm::new(&mut s, "norm", cfg.dim)?,
        })
    }

    /// `layer_norm(c + attn(c, h_prev))` with `c = conv(x_t)`; all `(B, D)`.
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x_t: Var, h_prev: Var) -> Result<Var> {
        same_shape(g, x_t, h_prev, "cab")?;
        let c = as_seq(g, x_t)?; // (B, 1, D) doubles as (batch, channel, length)
        let c = self.conv.forward(g, p, c)?;
        let h = as_seq(g, h_prev)?;
        let a = self.attn.forward(g, p, c, h, None)?;
        let sum = g.add(c, a)?;
        let out = self.norm.forward(g, p, sum)?;
        as_vec(g, out)
    }
}

/// Global attention block.
#[derive(Clone, Debug)]
pub struct Gab {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl Gab {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: &TranslatorConfig) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut s, "attn", AttentionConfig::new(cfg.dim, cfg.num_heads)?)?,
            norm: LayerNorm::new(&mut s, "norm", cfg.dim)?,
        })
    }

    /// Projects the full input once per layer.
    pub fn keys<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x_full: Var) -> Result<KeyValue> {
        self.attn.project_kv(g, p, x_full)
    }

    /// `layer_norm(y_t + attn(y_t, X_full))`, which is also the new hidden state.
    pub fn step<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, y_t: Var, keys: &KeyValue) -> Result<Var> {
        let y = as_seq(g, y_t)?;
        let a = self.attn.attend(g, p, y, keys, None)?;
        let sum = g.add(y, a)?;
        let out = self.norm.forward(g, p, sum)?;
        as_vec(g, out)
    }

    /// Returns `(out, h_t)`; the two are the same value.
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, y_t: Var, x_full: Var) -> Result<(Var, Var)> {
        let s = g.shape(x_full).to_vec();
        if s.len() != 3 || [s[0], s[2]] != g.shape(y_t) {
            return shape_err("gab", format!("step {:?} against input {s:?}", g.shape(y_t)));
        }
        let keys = self.keys(g, p, x_full)?;
        let out = self.step(g, p, y_t, &keys)?;
        Ok((out, out))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub cab: Cab,
    pub gab: Gab,
    pub ffn: Ffn,
}

/// Per-step outputs and per-step hidden states of one layer.
pub type LayerOutput = (Vec<Var>, Vec<Var>);

impl EncoderLayer {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: &TranslatorConfig) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            cab: Cab::new(&mut s, "cab", cfg)?,
            gab: Gab::new(&mut s, "gab", cfg)?,
            ffn: Ffn::new(&mut s, "ffn", cfg.dim, cfg.ffn_mult)?,
        })
    }

    /// Returns `(y_steps, hidden_steps)`; the hidden chain starts at zero.
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x_steps: &[Var], x_full: Var) -> Result<LayerOutput> {
        let first = *x_steps.first().ok_or_else(|| Error::Invalid("no time steps".into()))?;
        let mut h = g.constant(crate::numerics::Tensor::zeros(g.shape(first)));
        let keys = self.gab.keys(g, p, x_full)?;
        let mut ys = Vec::with_capacity(x_steps.len());
        let mut hs = Vec::with_capacity(x_steps.len());
        for &x in x_steps {
            let c = self.cab.forward(g, p, x, h)?;
            h = self.gab.step(g, p, c, &keys)?;
            ys.push(self.ffn.forward(g, p, h)?);
            hs.push(h);
        }
        Ok((ys, hs))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cab: Cab,
    pub gab: Gab,
    pub cross: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: Ffn,
}

impl DecoderLayer {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: &TranslatorConfig) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            cab: Cab::new(&mut s, "cab", cfg)?,
            gab: Gab::new(&mut s, "gab", cfg)?,
            cross: MultiHeadAttention::new(&mut s, "cross", AttentionConfig::new(cfg.dim, cfg.num_heads)?)?,
            cross_norm: LayerNorm::new(&mut s, "cross_norm", cfg.dim)?,
            ffn: Ffn::new(&mut s, "ffn", cfg.dim, cfg.ffn_mult)?,
        })
    }

    /// Like the encoder, plus same-step attention to `enc_steps`; the chain
    /// starts from `enc_h_last`.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        p: &Binding<E>,
        x_steps: &[Var],
        x_full: Var,
        enc_steps: &[Var],
        enc_h_last: Var,
    ) -> Result<LayerOutput> {
        if enc_steps.len() != x_steps.len() {
            return shape_err(
                "decoder",
                format!("{} encoder steps for {} decoder steps", enc_steps.len(), x_steps.len()),
            );
        }
        let keys = self.gab.keys(g, p, x_full)?;
        let mut h = enc_h_last;
        let mut ys = Vec::with_capacity(x_steps.len());
        let mut hs = Vec::with_capacity(x_steps.len());
        for (&x, &enc) in x_steps.iter().zip(enc_steps) {
            let c = self.cab.forward(g, p, x, h)?;
            let gout = self.gab.step(g, p, c, &keys)?;
            let q = as_seq(g, gout)?;
            let kv = as_seq(g, enc)?;
            let a = self.cross.forward(g, p, q, kv, None)?;
            let sum = g.add(q, a)?;
            let e = self.cross_norm.forward(g, p, sum)?;
            h = as_vec(g, e)?;
            ys.push(self.ffn.forward(g, p, h)?);
            hs.push(h);
        }
        Ok((ys, hs))
    }
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub cfg: TranslatorConfig,
    pub encoders: Vec<EncoderLayer>,
    pub decoders: Vec<DecoderLayer>,
}

impl Translator {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: TranslatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = init.sub(name);
        let encoders = (0..cfg.m)
            .map(|i| EncoderLayer::new(&mut s, &format!("enc{i}"), &cfg))
            .collect::<Result<_>>()?;
        let decoders = (0..cfg.n)
            .map(|i| DecoderLayer::new(&mut s, &format!("dec{i}"), &cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, encoders, decoders })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<TranslatorOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.cfg.time || s[2] != self.cfg.dim {
            return shape_err(
                "translator",
                format!("input {s:?}, configured for (B, {}, {})", self.cfg.time, self.cfg.dim),
            );
        }
        if !g.value(x).all_finite() {
            return Err(Error::Numeric("translator input is not finite".into()));
        }
        let x_steps = split_time(g, x)?;
        let mut hidden = Vec::with_capacity(self.encoders.len() + self.decoders.len());
        let mut steps = x_steps;
        for enc in &self.encoders {
            let (ys, hs) = enc.forward(g, p, &steps, x)?;
            steps = ys;
            hidden.push(hs);
        }
        let enc_steps = steps.clone();
        let enc_h_last = *hidden.last().and_then(|h| h.last()).expect("M >= 1 and T >= 1");
        for dec in &self.decoders {
            let (ys, hs) = dec.forward(g, p, &steps, x, &enc_steps, enc_h_last)?;
            steps = ys;
            hidden.push(hs);
        }
        let last_hidden = *hidden.last().and_then(|h| h.last()).expect("N >= 1 and T >= 1");
        let y = concat_time(g, &steps)?;
        Ok(TranslatorOutput {
            y,
            state: TranslatorState {
                per_step_hidden: hidden,
                last_hidden,
            },
        })
    }
}
