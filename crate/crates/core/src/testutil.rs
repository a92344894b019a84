//! Helpers shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{grad_check, Binding, GradCheckConfig, GradReport, Graph, ParamId, ParameterSet, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

/// `sum(R * out)` with a fixed random `R`, a generic scalar readout.
pub fn readout(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.shape(out), seed));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

pub fn zero_param(ps: &mut ParameterSet<f64>, id: ParamId) {
    ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
}

pub fn eval_once<F>(ps: &ParameterSet<f64>, train: bool, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binding::new(&mut g, ps, train);
    let out = f(&mut g, &mut b).unwrap();
    g.value(out).clone()
}

pub fn check<F>(name: &str, ps: &mut ParameterSet<f64>, f: F) -> GradReport
where
    F: FnMut(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    let rep = grad_check(name, ps, &GradCheckConfig::default(), f).unwrap();
    assert!(rep.passed, "{rep}\n{:?}", rep.per_parameter);
    rep
}

/// Plain-loop reference implementations for composition oracles.
pub mod oracle {
    /// Rows of `x (n, i)` times `w (i, o)` plus `b`.
    pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, i: usize, o: usize) -> Vec<f64> {
        x.chunks(i)
            .flat_map(|row| {
                (0..o).map(move |j| b.map_or(0.0, |b| b[j]) + (0..i).map(|k| row[k] * w[k * o + j]).sum::<f64>())
            })
            .collect()
    }

    pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|row| {
                let m = row.iter().sum::<f64>() / d as f64;
                let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
                let s = (v + 1e-5).sqrt();
                (0..d).map(move |j| (row[j] - m) / s * gamma[j] + beta[j])
            })
            .collect()
    }

    pub fn gelu(v: f64) -> f64 {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
        x.iter().map(|v| (v - mx).exp() / z).collect()
    }

    /// Single-channel same-padded cross-correlation of each row of `x (n, d)`.
    pub fn conv_rows(x: &[f64], d: usize, w: &[f64], b: f64) -> Vec<f64> {
        let half = (w.len() / 2) as isize;
        x.chunks(d)
            .flat_map(|row| {
                (0..d as isize).map(move |l| {
                    b + w
                        .iter()
                        .enumerate()
                        .filter_map(|(k, wk)| {
                            let pos = l + k as isize - half;
                            (0..d as isize).contains(&pos).then(|| wk * row[pos as usize])
                        })
                        .sum::<f64>()
                })
            })
            .collect()
    }
}

pub fn values(ps: &ParameterSet<f64>, id: ParamId) -> Vec<f64> {
    ps.get(id).data().to_vec()
}

/// Loop oracle of a [`MultiHeadAttention`] for one batch element:
/// `q (tq, D)` over `kv (tk, D)`, optional additive `mask (tq, tk)`.
pub fn mha_oracle(
    ps: &ParameterSet<f64>,
    m: &crate::blocks::MultiHeadAttention,
    q: &[f64],
    kv: &[f64],
    mask: Option<&[f64]>,
) -> Vec<f64> {
    use crate::blocks::Linear;
    let d = m.cfg.model_dim;
    let (h, hd) = (m.cfg.num_heads, m.cfg.head_dim());
    let proj = |l: &Linear, x: &[f64]| {
        let b = l.bias.map(|b| values(ps, b));
        oracle::linear(x, &values(ps, l.weight), b.as_deref(), d, d)
    };
    let (qp, kp, vp) = (proj(&m.q, q), proj(&m.k, kv), proj(&m.v, kv));
    let (tq, tk) = (q.len() / d, kv.len() / d);
    let mut ctx = vec![0.0; tq * d];
    for head in 0..h {
        for i in 0..tq {
            let scores: Vec<f64> = (0..tk)
                .map(|j| {
                    let dot: f64 = (0..hd).map(|c| qp[i * d + head * hd + c] * kp[j * d + head * hd + c]).sum();
                    dot / (hd as f64).sqrt() + mask.map_or(0.0, |m| m[i * tk + j])
                })
                .collect();
            let w = oracle::softmax(&scores);
            for c in 0..hd {
                ctx[i * d + head * hd + c] = (0..tk).map(|j| w[j] * vp[j * d + head * hd + c]).sum();
            }
        }
    }
    proj(&m.out, &ctx)
}
