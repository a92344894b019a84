//! Twin translators for the audio and text branches.
//!
//! Both parameter sets take their own gradient step, then the audio set is
//! pulled toward the text set by momentum and copied back, so the two are
//! identical at the start of every step. A symmetric contrastive loss over
//! the translators' last hidden states ties the branches together.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParameterSet, Real, Tensor, Var};

pub const DEFAULT_BETA: f64 = 0.95;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq)]
pub struct TwinPair<E> {
    /// `W`, trained on the audio branch.
    pub audio: ParameterSet<E>,
    /// `W_sim`, trained on the text branch.
    pub text: ParameterSet<E>,
    pub beta: f64,
}

impl<E: Real> TwinPair<E> {
    pub fn new(audio: ParameterSet<E>, text: ParameterSet<E>, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Invalid(format!("beta {beta} outside [0, 1]")));
        }
        audio.check_congruent(&text)?;
        Ok(Self { audio, text, beta })
    }

    /// Both branches start from the same weights.
    pub fn from_audio(audio: ParameterSet<E>, beta: f64) -> Result<Self> {
        let text = audio.clone();
        Self::new(audio, text, beta)
    }

    /// `W <- beta * W + (1 - beta) * W_sim`.
    pub fn momentum_update(&mut self) -> Result<()> {
        self.audio.blend_from(&self.text, E::lit(self.beta))
    }

    /// `W_sim <- W`.
    pub fn copy_back(&mut self) -> Result<()> {
        self.text.copy_from(&self.audio)
    }

    pub fn sync(&mut self) -> Result<()> {
        self.momentum_update()?;
        self.copy_back()
    }

    pub fn in_sync(&self) -> bool {
        self.audio == self.text
    }
}

/// Symmetric cross-entropy over a square logit matrix whose diagonal holds
/// the matching pairs: the mean of the row-wise and column-wise losses.
pub fn contrastive_from_logits<E: Real>(g: &mut Graph<E>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return shape_err("contrastive_loss", format!("logits must be square, got {shape:?}"));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Invalid("contrastive loss needs at least 2 pairs".into()));
    }
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = E::one();
    }
    let eye = g.constant(eye);
    let rows = g.log_softmax(s);
    let st = g.transpose(s)?;
    let cols = g.log_softmax(st);
    let both = g.add(rows, cols)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag);
    Ok(g.scale(total, E::lit(-0.5 / n as f64)))
}

/// CLIP-style loss between `h_a (N, D)` and `h_c (N, D)`; rows are
/// L2-normalized, logits are `h_a h_c^T / temperature`.
pub fn contrastive_loss<E: Real>(g: &mut Graph<E>, h_a: Var, h_c: Var, temperature: f64) -> Result<Var> {
    let (sa, sc) = (g.shape(h_a).to_vec(), g.shape(h_c).to_vec());
    if sa.len() != 2 || sa != sc {
        return shape_err("contrastive_loss", format!("{sa:?} vs {sc:?}, expected equal (N, D)"));
    }
    if sa[0] < 2 {
        return Err(Error::Invalid(format!("contrastive loss needs N >= 2, got {}", sa[0])));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
    }
    let a = g.normalize_rows(h_a)?;
    let c = g.normalize_rows(h_c)?;
    let ct = g.transpose(c)?;
    let s = g.matmul(a, ct)?;
    let s = g.scale(s, E::lit(1.0 / temperature));
    contrastive_from_logits(g, s)
}

/// `ce + cl`; a non-finite term aborts the step.
pub fn total_loss<E: Real>(g: &mut Graph<E>, ce: Var, cl: Var) -> Result<Var> {
    for (name, v) in [("caption", ce), ("contrastive", cl)] {
        if !g.value(v).all_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite: {:?}", g.value(v).to_f64_vec())));
        }
    }
    g.add(ce, cl)
}
