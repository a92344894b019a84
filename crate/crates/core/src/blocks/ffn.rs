use crate::blocks::Linear;
use crate::error::Result;
use crate::numerics::{Binding, Graph, Init, Real, Var};

/// Position-wise `linear -> GELU -> linear`, `D -> hidden_mult * D -> D`.
///
/// Calling one `Ffn` on several inputs shares its weights between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, hidden_mult: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let hidden = dim * hidden_mult.max(1);
        Ok(Self {
            up: Linear::new(&mut s, "up", dim, hidden, true)?,
            down: Linear::new(&mut s, "down", hidden, dim, true)?,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, p: &Binding<E>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}
