use crate::blocks::{AttentionConfig, Ffn, LayerNorm, Linear, MultiHeadAttention};
use crate::captioner::{CaptionBatch, NextTokenScorer};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Binding, Graph, Init, ParamId, ParameterSet, Real, Tensor, Var};

/// Added to attention scores of future positions.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionDecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Longest token sequence, start token included.
    pub max_len: usize,
    /// Longest memory sequence; each memory step gets a learned position.
    pub max_memory: usize,
    pub ffn_mult: usize,
}

impl CaptionDecoderConfig {
    pub fn desk(vocab_size: usize, dim: usize, max_len: usize, max_memory: usize) -> Self {
        Self {
            vocab_size,
            dim,
            num_layers: 2,
            num_heads: 4,
            max_len,
            max_memory,
            ffn_mult: 4,
        }
    }
}

/// Post-norm block: causal self-attention, cross-attention to memory, FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub norm3: LayerNorm,
}

/// Small autoregressive transformer decoder over a memory sequence.
#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub cfg: CaptionDecoderConfig,
    pub embed: ParamId,
    pub positions: ParamId,
    pub memory_positions: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub head: Linear,
}

impl CaptionDecoder {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: CaptionDecoderConfig) -> Result<Self> {
        if cfg.vocab_size < 3 || cfg.max_len < 2 || cfg.max_memory < 1 || cfg.num_layers < 1 {
            return Err(Error::Invalid(format!("invalid caption decoder config {cfg:?}")));
        }
        let attn = AttentionConfig::new(cfg.dim, cfg.num_heads)?;
        let mut s = init.sub(name);
        let embed = s.uniform("embed", &[cfg.vocab_size, cfg.dim], 1)?;
        let positions = s.uniform("positions", &[cfg.max_len, cfg.dim], 1)?;
        let memory_positions = s.uniform("memory_positions", &[cfg.max_memory, cfg.dim], 1)?;
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                let mut s = s.sub(&format!("block{i}"));
                Ok(DecoderBlock {
                    self_attn: MultiHeadAttention::new(&mut s, "self_attn", attn)?,
                    norm1: LayerNorm::new(&mut s, "norm1", cfg.dim)?,
                    cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", attn)?,
                    norm2: LayerNorm::new(&mut s, "norm2", cfg.dim)?,
                    ffn: Ffn::new(&mut s, "ffn", cfg.dim, cfg.ffn_mult)?,
                    norm3: LayerNorm::new(&mut s, "norm3", cfg.dim)?,
                })
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut s, "head", cfg.dim, cfg.vocab_size, true)?;
        Ok(Self {
            cfg,
            embed,
            positions,
            memory_positions,
            blocks,
            head,
        })
    }

    /// Logits `(B, S, V)` for row-major token ids `(B, S)`; position `s`
    /// sees tokens `0..=s` only.
    pub fn forward_ids<E: Real>(
        &self,
        g: &mut Graph<E>,
        p: &Binding<E>,
        memory: Var,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let ms = g.shape(memory).to_vec();
        if ms.len() != 3 || ms[0] != batch || ms[1] > self.cfg.max_memory || ms[2] != self.cfg.dim {
            return shape_err(
                "caption_decoder",
                format!(
                    "memory {ms:?} for batch {batch}, at most {} steps of D = {}",
                    self.cfg.max_memory, self.cfg.dim
                ),
            );
        }
        if len == 0 || len > self.cfg.max_len || ids.len() != batch * len {
            return shape_err(
                "caption_decoder",
                format!("{} ids as ({batch}, {len}), max length {}", ids.len(), self.cfg.max_len),
            );
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} >= vocabulary size {}", self.cfg.vocab_size)));
        }
        let tok = g.gather(p.var(self.embed), ids, &[batch, len])?;
        let pos = g.narrow(p.var(self.positions), 0, 0, len)?;
        let mut x = g.add(tok, pos)?;
        let mut mask = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in i + 1..len {
                mask.data_mut()[i * len + j] = E::lit(MASKED);
            }
        }
        let mask = g.constant(mask);
        let mpos = g.narrow(p.var(self.memory_positions), 0, 0, ms[1])?;
        let memory = g.add(memory, mpos)?;
        let mem_kv: Vec<_> = self
            .blocks
            .iter()
            .map(|b| b.cross_attn.project_kv(g, p, memory))
            .collect::<Result<_>>()?;
        for (b, kv) in self.blocks.iter().zip(&mem_kv) {
            let a = b.self_attn.forward(g, p, x, x, Some(mask))?;
            let s = g.add(x, a)?;
            x = b.norm1.forward(g, p, s)?;
            let c = b.cross_attn.attend(g, p, x, kv, None)?;
            let s = g.add(x, c)?;
            x = b.norm2.forward(g, p, s)?;
            let f = b.ffn.forward(g, p, x)?;
            let s = g.add(x, f)?;
            x = b.norm3.forward(g, p, s)?;
        }
        self.head.forward(g, p, x)
    }

    /// Teacher-forced logits for a caption batch.
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, memory: Var, tokens: &CaptionBatch) -> Result<Var> {
        self.forward_ids(g, p, memory, &tokens.flat_ids(), tokens.batch_size(), tokens.seq_len())
    }
}

/// Label-smoothed cross-entropy averaged over non-padding targets.
///
/// The target distribution puts `1 - smoothing + smoothing / V` on the target
/// and `smoothing / V` on every other token.
pub fn ce_loss<E: Real>(g: &mut Graph<E>, logits: Var, targets: &CaptionBatch, smoothing: f64) -> Result<Var> {
    if !(0.0..=0.3).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing {smoothing} outside [0, 0.3]")));
    }
    let s = g.shape(logits).to_vec();
    let (b, len) = (targets.batch_size(), targets.seq_len());
    if s.len() != 3 || s[0] != b || s[1] != len {
        return shape_err("ce_loss", format!("logits {s:?} for targets ({b}, {len})"));
    }
    let v = s[2];
    let off = smoothing / v as f64;
    let mut q = vec![0.0; b * len * v];
    let mut count = 0usize;
    for (bi, row) in targets.targets().iter().enumerate() {
        for (si, t) in row.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Invalid(format!("target id {t} >= vocabulary size {v}")));
            }
            let base = (bi * len + si) * v;
            q[base..base + v].iter_mut().for_each(|x| *x = off);
            q[base + t] += 1.0 - smoothing;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("caption batch has no non-padding targets".into()));
    }
    let q = g.constant(Tensor::from_f64(&s, &q)?);
    let lp = g.log_softmax(logits);
    let weighted = g.mul(lp, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, E::lit(-1.0 / count as f64)))
}

/// Scores next tokens of a trained decoder for one memory sequence.
pub struct DecoderScorer<'a, E> {
    pub decoder: &'a CaptionDecoder,
    pub params: &'a ParameterSet<E>,
    /// `(1, T, D)`.
    pub memory: &'a Tensor<E>,
}

impl<E: Real> NextTokenScorer for DecoderScorer<'_, E> {
    fn vocab_size(&self) -> usize {
        self.decoder.cfg.vocab_size
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if k == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Invalid("prefixes must be non-empty and of equal length".into()));
        }
        let ms = self.memory.shape();
        if ms.len() != 3 || ms[0] != 1 {
            return shape_err("beam_search", format!("memory must be (1, T, D), got {ms:?}"));
        }
        let mut g = Graph::new();
        let p = Binding::frozen(&mut g, self.params);
        let mut rep = Vec::with_capacity(k * self.memory.len());
        for _ in 0..k {
            rep.extend_from_slice(self.memory.data());
        }
        let mem = g.constant(Tensor::new(&[k, ms[1], ms[2]], rep)?);
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let logits = self.decoder.forward_ids(&mut g, &p, mem, &ids, k, len)?;
        let last = g.narrow(logits, 1, len - 1, 1)?;
        let lp = g.log_softmax(last);
        let v = self.vocab_size();
        Ok(g.value(lp).to_f64_vec().chunks(v).map(<[f64]>::to_vec).collect())
    }
}
