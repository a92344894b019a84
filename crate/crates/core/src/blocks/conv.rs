use crate::error::{Error, Result};
use crate::numerics::{Binding, Graph, Init, ParamId, Real, Var};

/// 1-D cross-correlation over the last axis of `(B, C_in, L)` with same
/// padding; kernel sizes must be odd.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel_size: usize,
}

impl Conv1d {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, c_in: usize, c_out: usize, kernel_size: usize) -> Result<Self> {
        Self::build(init, name, c_in, c_out, kernel_size, true)
    }

    /// For a convolution followed by batch norm, which removes any per-channel shift.
    pub fn without_bias<E: Real>(init: &mut Init<'_, E>, name: &str, c_in: usize, c_out: usize, kernel_size: usize) -> Result<Self> {
        Self::build(init, name, c_in, c_out, kernel_size, false)
    }

    fn build<E: Real>(init: &mut Init<'_, E>, name: &str, c_in: usize, c_out: usize, kernel_size: usize, bias: bool) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Invalid(format!("conv1d kernel size {kernel_size} must be odd")));
        }
        let mut s = init.sub(name);
        Ok(Self {
            weight: s.uniform("weight", &[c_out, c_in, kernel_size], c_in * kernel_size)?,
            bias: if bias { Some(s.constant("bias", &[c_out], 0.0)?) } else { None },
            kernel_size,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// 2-D cross-correlation of `(B, C_in, H, W)` with a square odd kernel, same padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl Conv2d {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, c_in: usize, c_out: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d kernel size {kernel_size} must be odd")));
        }
        let mut s = init.sub(name);
        Ok(Self {
            weight: s.uniform(
                "weight",
                &[c_out, c_in, kernel_size, kernel_size],
                c_in * kernel_size * kernel_size,
            )?,
            bias: s.constant("bias", &[c_out], 0.0)?,
            kernel_size,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}
