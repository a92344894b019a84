//! Gradient checks of every block, the composed networks and both losses,
//! in `f64` at the default tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{AttentionConfig, BatchNorm, Conv1d, Conv2d, Ffn, LayerNorm, Linear, MultiHeadAttention};
use crate::captioner::{ce_loss, CaptionBatch, CaptionDecoder, CaptionDecoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::fuser::{Fuser, FuserConfig};
use crate::numerics::{grad_check, GradCheckConfig, GradReport, Graph, Init, ParamId, ParameterSet, Tensor, Var};
use crate::translator::{Translator, TranslatorConfig};
use crate::twin::contrastive_loss;

pub const MODULES: [&str; 11] = [
    "linear",
    "attention",
    "ffn",
    "layer_norm",
    "batch_norm",
    "conv1d",
    "conv2d",
    "fuser",
    "translator",
    "contrastive",
    "caption_ce",
];

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> Result<T>) -> Result<(ParameterSet<f64>, T)> {
    let mut ps = ParameterSet::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let t = f(&mut Init::new(&mut ps, &mut r))?;
    Ok((ps, t))
}

/// `sum(R * out)` with a fixed random `R`.
fn readout(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.shape(out), seed));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn uniform(ps: &mut ParameterSet<f64>, id: ParamId, lo: f64, hi: f64, seed: u64) -> Result<()> {
    let shape = ps.get(id).shape().to_vec();
    ps.set(id, Tensor::uniform(&shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Scales query and key weights so attention is far from uniform; near
/// uniform attention leaves their true gradients at roundoff level.
fn sharpen_attention(ps: &mut ParameterSet<f64>, factor: f64) {
    let ids: Vec<ParamId> = ps
        .entries()
        .iter()
        .filter(|e| e.name.ends_with(".q.weight") || e.name.ends_with(".k.weight"))
        .filter_map(|e| ps.id(&e.name))
        .collect();
    for id in ids {
        ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= factor);
    }
}

fn run_one(name: &str, cfg: &GradCheckConfig) -> Result<GradReport> {
    match name {
        "linear" => {
            let (mut ps, lin) = build(1, |i| Linear::new(i, "lin", 5, 3, true))?;
            let x = ps.insert("x", randn(&[2, 4, 5], 2), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = lin.forward(g, b, b.var(x))?;
                readout(g, y, 3)
            })
        }
        "attention" => {
            let ac = AttentionConfig::new(8, 2)?;
            let (mut ps, mha) = build(21, |i| MultiHeadAttention::new(i, "mha", ac))?;
            let q = ps.insert("q_in", randn(&[2, 3, 8], 22), true)?;
            let kv = ps.insert("kv_in", randn(&[2, 4, 8], 23), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = mha.forward(g, b, b.var(q), b.var(kv), None)?;
                readout(g, y, 24)
            })
        }
        "ffn" => {
            let (mut ps, ffn) = build(61, |i| Ffn::new(i, "ffn", 4, 2))?;
            let x = ps.insert("x", randn(&[2, 3, 4], 62), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = ffn.forward(g, b, b.var(x))?;
                readout(g, y, 63)
            })
        }
        "layer_norm" => {
            let (mut ps, ln) = build(41, |i| LayerNorm::new(i, "ln", 6))?;
            uniform(&mut ps, ln.gamma, 0.5, 1.5, 42)?;
            uniform(&mut ps, ln.beta, -0.5, 0.5, 43)?;
            let x = ps.insert("x", randn(&[3, 6], 44), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = ln.forward(g, b, b.var(x))?;
                readout(g, y, 45)
            })
        }
        "batch_norm" => {
            let (mut ps, bn) = build(51, |i| BatchNorm::new(i, "bn", 3))?;
            uniform(&mut ps, bn.gamma, 0.5, 1.5, 52)?;
            uniform(&mut ps, bn.beta, -0.5, 0.5, 53)?;
            let x = ps.insert("x", randn(&[3, 3, 4], 54), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let xv = b.var(x);
                let y = bn.forward(g, b, xv)?;
                readout(g, y, 55)
            })
        }
        "conv1d" => {
            let (mut ps, conv) = build(31, |i| Conv1d::new(i, "c", 3, 4, 3))?;
            let x = ps.insert("x", randn(&[2, 3, 6], 32), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = conv.forward(g, b, b.var(x))?;
                readout(g, y, 33)
            })
        }
        "conv2d" => {
            let (mut ps, conv) = build(34, |i| Conv2d::new(i, "c", 3, 2, 3))?;
            let x = ps.insert("x", randn(&[2, 3, 4, 5], 35), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let y = conv.forward(g, b, b.var(x))?;
                readout(g, y, 36)
            })
        }
        "fuser" => {
            let fc = FuserConfig {
                num_layers: 2,
                num_heads: 2,
                ..FuserConfig::desk(8, 4)
            };
            let (mut ps, f) = build(8, |i| Fuser::new(i, fc))?;
            sharpen_attention(&mut ps, 3.0);
            let mut v = Vec::with_capacity(3);
            for k in 0..3u64 {
                v.push(ps.insert(&format!("view{k}"), randn(&[2, 4, 8], 9 + k), true)?);
            }
            grad_check(name, &mut ps, cfg, |g, b| {
                let vs = [b.var(v[0]), b.var(v[1]), b.var(v[2])];
                let out = f.forward(g, b, &vs)?;
                readout(g, out, 10)
            })
        }
        "translator" => {
            let tc = TranslatorConfig {
                m: 2,
                n: 1,
                cab_kernel: 9,
                dim: 16,
                time: 4,
                num_heads: 4,
                ffn_mult: 4,
            };
            let (mut ps, tr) = build(37, |i| Translator::new(i, "tr", tc))?;
            let x = ps.insert("x", randn(&[1, 4, 16], 38), true)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let out = tr.forward(g, b, b.var(x))?;
                let y = readout(g, out.y, 39)?;
                let h = readout(g, out.state.last_hidden, 40)?;
                g.add(y, h)
            })
        }
        "contrastive" => {
            let mut ps = ParameterSet::new();
            let a = ps.insert("h_a", randn(&[4, 6], 1), true)?;
            let c = ps.insert("h_c", randn(&[4, 6], 2), true)?;
            grad_check(name, &mut ps, cfg, |g, b| contrastive_loss(g, b.var(a), b.var(c), 0.5))
        }
        "caption_ce" => {
            let v = Vocab::synthetic(8)?;
            let dc = CaptionDecoderConfig {
                num_heads: 2,
                ..CaptionDecoderConfig::desk(8, 8, 6, 8)
            };
            let (mut ps, dec) = build(6, |i| CaptionDecoder::new(i, "cap", dc))?;
            let mem = ps.insert("memory", randn(&[2, 3, 8], 7), true)?;
            let batch = CaptionBatch::new(&[vec![1, 3, 4, 2], vec![1, 5, 2]], &v)?;
            grad_check(name, &mut ps, cfg, |g, b| {
                let l = dec.forward(g, b, b.var(mem), &batch)?;
                ce_loss(g, l, &batch, 0.1)
            })
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck module {other:?}; expected one of {}",
            MODULES.join(", ")
        ))),
    }
}

/// Runs the named check, or all of them.
pub fn run_gradchecks(module: Option<&str>) -> Result<Vec<GradReport>> {
    let cfg = GradCheckConfig::default();
    match module {
        Some(m) => Ok(vec![run_one(m, &cfg)?]),
        None => MODULES.iter().map(|m| run_one(m, &cfg)).collect(),
    }
}
