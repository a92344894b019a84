//! Fusion of three encoder views into one feature sequence.
//!
//! The network is an input layer followed by `L` fusion layers:
//!
//! * input layer: each view takes a turn as the baseline of an encoder-fusion
//!   block (EFB) that adds cross-attention over the other two views; the three
//!   results pass through the layer's shared FFN, and a channel-fusion block
//!   (CFB) folds them into one fused sequence, also sent through the FFN.
//! * fusion layer: every stream is refined by its own private-feature block
//!   (PFEB, a small convolution stack) plus a shared-feature block (SFEB,
//!   self-attention along time and along a bottlenecked feature axis whose
//!   weights all three streams share). The sum goes through the layer's shared
//!   FFN and a CFB fuses the streams again.
//!
//! The fused output of the last layer is the result. Fused outputs of earlier
//! layers are computed but do not feed the streams.

use crate::blocks::{AttentionConfig, BatchNorm, Conv1d, Conv2d, Ffn, Linear, MultiHeadAttention};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Binding, Graph, Init, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FuserConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub time: usize,
    pub sfeb_bottleneck: usize,
    pub cfb_kernel: usize,
    pub pfeb_layers: usize,
    pub pfeb_kernel: usize,
    pub num_heads: usize,
    /// Heads of the attention over the feature axis, whose vectors have length `time`.
    pub feature_heads: usize,
    pub ffn_mult: usize,
}

impl FuserConfig {
    /// `(B, 8, 64)` views, bottleneck `D / 3`.
    pub fn desk(dim: usize, time: usize) -> Self {
        Self {
            num_layers: 3,
            dim,
            time,
            sfeb_bottleneck: ((dim as f64) / 3.0).round().max(1.0) as usize,
            cfb_kernel: 7,
            pfeb_layers: 3,
            pfeb_kernel: 3,
            num_heads: 4,
            feature_heads: 1,
            ffn_mult: 4,
        }
    }

    /// `(B, 32, 768)` views with a 256-wide bottleneck.
    pub fn full_scale() -> Self {
        Self {
            sfeb_bottleneck: 256,
            num_heads: 8,
            ..Self::desk(768, 32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Invalid("fuser needs at least one fusion layer".into()));
        }
        if self.cfb_kernel % 2 == 0 || self.pfeb_kernel % 2 == 0 {
            return Err(Error::Invalid("fuser kernels must be odd".into()));
        }
        if self.pfeb_layers < 1 || self.sfeb_bottleneck < 1 {
            return Err(Error::Invalid("pfeb_layers and sfeb_bottleneck must be positive".into()));
        }
        AttentionConfig::new(self.dim, self.num_heads)?;
        AttentionConfig::new(self.time, self.feature_heads)?;
        Ok(())
    }
}

/// Encoder fusion block: `base + attn(base, other1) + attn(base, other2)`,
/// one attention module used for both terms.
#[derive(Clone, Debug)]
pub struct Efb {
    pub attn: MultiHeadAttention,
}

impl Efb {
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, base: Var, other1: Var, other2: Var) -> Result<Var> {
        let a1 = self.attn.forward(g, p, base, other1, None)?;
        let a2 = self.attn.forward(g, p, base, other2, None)?;
        g.add_all(&[base, a1, a2])
    }
}

/// Channel fusion block: streams stacked as channels of a `(B, 3, T, D)`
/// image, reduced to one channel by a same-padded 2-D convolution.
#[derive(Clone, Debug)]
pub struct Cfb {
    pub conv: Conv2d,
}

impl Cfb {
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, streams: &[Var; 3]) -> Result<Var> {
        let s = same_shape(g, streams)?;
        let x = g.stack(streams, 1)?;
        let y = self.conv.forward(g, p, x)?;
        g.reshape(y, &s)
    }
}

/// Private feature extraction: convolutions along time with batch norm and
/// GELU between them, plus a residual connection.
#[derive(Clone, Debug)]
pub struct Pfeb {
    pub convs: Vec<Conv1d>,
    pub norms: Vec<BatchNorm>,
}

impl Pfeb {
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &mut Binding<E>, stream: Var) -> Result<Var> {
        let mut x = g.permute(stream, &[0, 2, 1])?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            if let Some(bn) = self.norms.get(i) {
                x = bn.forward(g, p, x)?;
                x = g.gelu(x);
            }
        }
        let x = g.permute(x, &[0, 2, 1])?;
        g.add(stream, x)
    }
}

/// Shared feature extraction: self-attention over time steps plus
/// self-attention over bottlenecked feature channels, added to the input.
#[derive(Clone, Debug)]
pub struct Sfeb {
    pub time_attn: MultiHeadAttention,
    pub down: Linear,
    pub feature_attn: MultiHeadAttention,
    pub up: Linear,
}

impl Sfeb {
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, stream: Var) -> Result<Var> {
        let a = self.time_attn.forward(g, p, stream, stream, None)?;
        let u = self.down.forward(g, p, stream)?;
        let ut = g.transpose(u)?;
        let f = self.feature_attn.forward(g, p, ut, ut, None)?;
        let f = g.transpose(f)?;
        let b = self.up.forward(g, p, f)?;
        g.add_all(&[stream, a, b])
    }
}

#[derive(Clone, Debug)]
pub struct InputLayer {
    pub efbs: [Efb; 3],
    pub cfb: Cfb,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub pfebs: [Pfeb; 3],
    pub sfeb: Sfeb,
    pub cfb: Cfb,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Fuser {
    pub cfg: FuserConfig,
    pub input: InputLayer,
    pub layers: Vec<FusionLayer>,
}

fn same_shape<E: Real>(g: &Graph<E>, xs: &[Var]) -> Result<Vec<usize>> {
    let s = g.shape(xs[0]).to_vec();
    if s.len() != 3 {
        return shape_err("fuser", format!("expected (B, T, D), got {s:?}"));
    }
    if let Some(bad) = xs.iter().find(|&&x| g.shape(x) != s.as_slice()) {
        return shape_err("fuser", format!("views {s:?} and {:?} differ", g.shape(*bad)));
    }
    Ok(s)
}

fn three<T>(mut f: impl FnMut(usize) -> Result<T>) -> Result<[T; 3]> {
    Ok([f(0)?, f(1)?, f(2)?])
}

impl Fuser {
    pub fn new<E: Real>(init: &mut Init<'_, E>, cfg: FuserConfig) -> Result<Self> {
        cfg.validate()?;
        let attn = AttentionConfig::new(cfg.dim, cfg.num_heads)?;
        let feat = AttentionConfig::new(cfg.time, cfg.feature_heads)?;
        let mut s = init.sub("fuser");
        let input = {
            let mut s = s.sub("input");
            InputLayer {
                efbs: three(|i| {
                    Ok(Efb {
                        attn: MultiHeadAttention::new(&mut s, &format!("efb{i}"), attn)?,
                    })
                })?,
                cfb: Cfb {
                    conv: Conv2d::new(&mut s, "cfb", 3, 1, cfg.cfb_kernel)?,
                },
                ffn: Ffn::new(&mut s, "ffn", cfg.dim, cfg.ffn_mult)?,
            }
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut s = s.sub(&format!("layer{l}"));
            let pfebs = three(|i| {
                let mut s = s.sub(&format!("pfeb{i}"));
                let convs = (0..cfg.pfeb_layers)
                    .map(|j| {
                        let name = format!("conv{j}");
                        if j + 1 < cfg.pfeb_layers {
                            Conv1d::without_bias(&mut s, &name, cfg.dim, cfg.dim, cfg.pfeb_kernel)
                        } else {
                            Conv1d::new(&mut s, &name, cfg.dim, cfg.dim, cfg.pfeb_kernel)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let norms = (0..cfg.pfeb_layers - 1)
                    .map(|j| BatchNorm::new(&mut s, &format!("bn{j}"), cfg.dim))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Pfeb { convs, norms })
            })?;
            let sfeb = {
                let mut s = s.sub("sfeb");
                Sfeb {
                    time_attn: MultiHeadAttention::new(&mut s, "time_attn", attn)?,
                    down: Linear::new(&mut s, "down", cfg.dim, cfg.sfeb_bottleneck, true)?,
                    feature_attn: MultiHeadAttention::new(&mut s, "feature_attn", feat)?,
                    up: Linear::new(&mut s, "up", cfg.sfeb_bottleneck, cfg.dim, true)?,
                }
            };
            layers.push(FusionLayer {
                pfebs,
                sfeb,
                cfb: Cfb {
                    conv: Conv2d::new(&mut s, "cfb", 3, 1, cfg.cfb_kernel)?,
                },
                ffn: Ffn::new(&mut s, "ffn", cfg.dim, cfg.ffn_mult)?,
            });
        }
        Ok(Self { cfg, input, layers })
    }

    /// Fuses three `(B, T, D)` views into one `(B, T, D)` sequence.
    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &mut Binding<E>, views: &[Var; 3]) -> Result<Var> {
        let s = same_shape(g, views)?;
        if s[1] != self.cfg.time || s[2] != self.cfg.dim {
            return shape_err(
                "fuser",
                format!("views {s:?}, configured for (B, {}, {})", self.cfg.time, self.cfg.dim),
            );
        }
        let inp = &self.input;
        let mut streams = three(|i| {
            let e = inp.efbs[i].forward(g, p, views[i], views[(i + 1) % 3], views[(i + 2) % 3])?;
            inp.ffn.forward(g, p, e)
        })?;
        let fused = inp.cfb.forward(g, p, &streams)?;
        let mut fused = inp.ffn.forward(g, p, fused)?;
        for layer in &self.layers {
            streams = three(|i| {
                let private = layer.pfebs[i].forward(g, p, streams[i])?;
                let shared = layer.sfeb.forward(g, p, streams[i])?;
                let sum = g.add(private, shared)?;
                layer.ffn.forward(g, p, sum)
            })?;
            let f = layer.cfb.forward(g, p, &streams)?;
            fused = layer.ffn.forward(g, p, f)?;
        }
        Ok(fused)
    }
}
