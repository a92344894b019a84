use crate::error::{shape_err, Error, Result};
use crate::numerics::{Binding, Graph, Init, ParamId, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Last-axis normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    dim: usize,
}

impl LayerNorm {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            gamma: s.constant("gamma", &[dim], 1.0)?,
            beta: s.constant("beta", &[dim], 0.0)?,
            dim,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.dim) {
            return shape_err("layer_norm", format!("{:?}, expected last dim {}", g.shape(x), self.dim));
        }
        let n = g.layer_norm(x, E::lit(NORM_EPS))?;
        let n = g.mul(n, p.var(self.gamma))?;
        g.add(n, p.var(self.beta))
    }
}

/// Per-channel normalization of `(B, C, ...)`.
///
/// Training mode normalizes with the batch's population statistics and moves
/// the running estimates by `momentum` toward them; evaluation mode uses the
/// running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    channels: usize,
}

/// `(C)` vector repeated to `tail = (C, ...)`, so it broadcasts as a trailing suffix.
fn per_channel<E: Real>(g: &mut Graph<E>, v: Var, tail: &[usize]) -> Result<Var> {
    let inner: usize = tail[1..].iter().product();
    let col = g.reshape(v, &[tail[0], 1])?;
    let ones = g.constant(Tensor::ones(&[1, inner]));
    let m = g.matmul(col, ones)?;
    g.reshape(m, tail)
}

impl BatchNorm {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            gamma: s.constant("gamma", &[channels], 1.0)?,
            beta: s.constant("beta", &[channels], 0.0)?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            channels,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &mut Binding<E>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() < 2 || s[1] != self.channels {
            return shape_err("batch_norm", format!("{s:?}, expected (B, {}, ...)", self.channels));
        }
        let inner: usize = s[2..].iter().product();
        let normalized = if p.train() {
            if s[0] < 2 {
                return Err(Error::Invalid("batch norm in training mode needs batch >= 2".into()));
            }
            let (y, mean, var) = g.batch_norm(x, E::lit(NORM_EPS))?;
            let m = E::lit(self.momentum);
            let keep = E::one() - m;
            let rm = g.value(p.var(self.running_mean)).data();
            let rv = g.value(p.var(self.running_var)).data();
            let new_mean = rm.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
            let new_var = rv.iter().zip(&var).map(|(&r, &b)| keep * r + m * b).collect();
            p.record(self.running_mean, Tensor::new(&[self.channels], new_mean)?);
            p.record(self.running_var, Tensor::new(&[self.channels], new_var)?);
            y
        } else {
            let eps = E::lit(NORM_EPS);
            let rm = g.value(p.var(self.running_mean)).data().to_vec();
            let rv = g.value(p.var(self.running_var)).data().to_vec();
            let scale: Vec<E> = rv.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            let shift: Vec<E> = rm.iter().zip(&scale).map(|(&m, &k)| -m * k).collect();
            let expand = |v: Vec<E>| -> Tensor<E> {
                let data = v.iter().flat_map(|&c| std::iter::repeat_n(c, inner)).collect();
                Tensor::new(&s[1..], data).expect("channel expansion")
            };
            let scale = g.constant(expand(scale));
            let shift = g.constant(expand(shift));
            let y = g.mul(x, scale)?;
            g.add(y, shift)?
        };
        let gamma = per_channel(g, p.var(self.gamma), &s[1..])?;
        let beta = per_channel(g, p.var(self.beta), &s[1..])?;
        let y = g.mul(normalized, gamma)?;
        g.add(y, beta)
    }
}
