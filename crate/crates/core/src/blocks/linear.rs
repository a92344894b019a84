use crate::error::{shape_err, Result};
use crate::numerics::{Binding, Graph, Init, ParamId, Real, Var};

/// `y = x W + b` on the last axis; `W` is stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.uniform("weight", &[in_dim, out_dim], in_dim)?;
        let bias = if bias {
            Some(s.constant("bias", &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.last() != Some(&self.in_dim) {
            return shape_err("linear", format!("input {s:?}, expected last dim {}", self.in_dim));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_dim])?;
        let mut y = g.matmul(flat, p.var(self.weight))?;
        if let Some(b) = self.bias {
            y = g.add(y, p.var(b))?;
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}
