use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::captioner::{ce_loss, CaptionBatch, CaptionDecoder, CaptionDecoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::fuser::Fuser;
use crate::numerics::{Binding, Graph, Init, ParameterSet, Tensor, Var};
use crate::synthdata::LatentSpec;
use crate::translator::Translator;
use crate::twin::{contrastive_loss, total_loss, TwinPair};

/// Offset of the RNG streams used to initialize modules.
const INIT_STREAM: u64 = 1 << 40;

/// Names of the four parameter groups, in storage order.
pub const GROUPS: [&str; 4] = ["fuser", "audio_translator", "text_translator", "decoder"];

/// Modules and weights of one ablation mode. Groups a mode does not use
/// are empty.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub fuser: Option<Fuser>,
    pub translator: Option<Translator>,
    pub decoder: CaptionDecoder,
    pub fuser_params: ParameterSet<f32>,
    /// Audio (`audio`) and text (`text`) translator weights.
    pub twin: TwinPair<f32>,
    pub decoder_params: ParameterSet<f32>,
}

/// One graph's view of every parameter group.
pub struct Bindings {
    pub fuser: Binding<f32>,
    pub audio: Binding<f32>,
    pub text: Binding<f32>,
    pub decoder: Binding<f32>,
}

/// Graph variables of one forward pass over a batch.
pub struct Forward {
    /// `(B, T, D)` sequence the caption decoder attends to.
    pub memory: Var,
    pub logits: Var,
    pub ce: Var,
    pub cl: Option<Var>,
    pub total: Var,
    /// Audio and text translator last hidden states `(B, D)`.
    pub h_audio: Option<Var>,
    pub h_text: Option<Var>,
}

fn init_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(INIT_STREAM + k);
    r
}

impl Model {
    /// Fresh weights from `cfg.seed`; each module draws from its own stream,
    /// so modules shared by two modes start identical.
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.ablation_mode;
        let mut fuser_params = ParameterSet::new();
        let fuser = if mode.uses_fuser() {
            let mut r = init_rng(cfg.seed, 0);
            Some(Fuser::new(&mut Init::new(&mut fuser_params, &mut r), cfg.fuser_config())?)
        } else {
            None
        };
        let mut audio = ParameterSet::new();
        let translator = if mode.uses_translator() {
            let mut r = init_rng(cfg.seed, 1);
            Some(Translator::new(&mut Init::new(&mut audio, &mut r), "translator", cfg.translator_config())?)
        } else {
            None
        };
        let dec_cfg = CaptionDecoderConfig {
            num_layers: cfg.decoder_layers,
            num_heads: cfg.num_heads,
            ..CaptionDecoderConfig::desk(vocab_size, cfg.dim, cfg.time + 2, cfg.time)
        };
        let mut decoder_params = ParameterSet::new();
        let mut r = init_rng(cfg.seed, 2);
        let decoder = CaptionDecoder::new(&mut Init::new(&mut decoder_params, &mut r), "decoder", dec_cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab: Vocab::synthetic(vocab_size)?,
            fuser,
            translator,
            decoder,
            fuser_params,
            twin: TwinPair::from_audio(audio, cfg.beta)?,
            decoder_params,
        })
    }

    /// Errors unless the dataset matches the configured `T`, `D` and vocabulary.
    pub fn check_data(&self, spec: &LatentSpec) -> Result<()> {
        if spec.time != self.cfg.time || spec.dim != self.cfg.dim || spec.vocab_size != self.vocab.size() {
            return Err(Error::Config(format!(
                "dataset is (T, D, V) = ({}, {}, {}), model expects ({}, {}, {})",
                spec.time,
                spec.dim,
                spec.vocab_size,
                self.cfg.time,
                self.cfg.dim,
                self.vocab.size()
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> [&ParameterSet<f32>; 4] {
        [&self.fuser_params, &self.twin.audio, &self.twin.text, &self.decoder_params]
    }

    pub fn groups_mut(&mut self) -> [&mut ParameterSet<f32>; 4] {
        [
            &mut self.fuser_params,
            &mut self.twin.audio,
            &mut self.twin.text,
            &mut self.decoder_params,
        ]
    }

    pub fn bind(&self, g: &mut Graph<f32>, train: bool) -> Bindings {
        Bindings {
            fuser: Binding::new(g, &self.fuser_params, train),
            audio: Binding::new(g, &self.twin.audio, train),
            text: Binding::new(g, &self.twin.text, train),
            decoder: Binding::new(g, &self.decoder_params, train),
        }
    }

    /// Audio branch: decoder memory and, with a translator, its last hidden state.
    pub fn audio_branch(&self, g: &mut Graph<f32>, b: &mut Bindings, views: &[Tensor<f32>; 3]) -> Result<(Var, Option<Var>)> {
        let vs = [0, 1, 2].map(|k| g.constant(views[k].clone()));
        let Some(fuser) = &self.fuser else {
            return Ok((vs[0], None));
        };
        let fused = fuser.forward(g, &mut b.fuser, &vs)?;
        match &self.translator {
            Some(tr) => {
                let out = tr.forward(g, &b.audio, fused)?;
                Ok((out.y, Some(out.state.last_hidden)))
            }
            None => Ok((fused, None)),
        }
    }

    /// Text branch last hidden state; only the twin mode has one.
    pub fn text_branch(&self, g: &mut Graph<f32>, b: &Bindings, text_feat: &Tensor<f32>) -> Result<Option<Var>> {
        match (&self.translator, self.cfg.ablation_mode.uses_twin()) {
            (Some(tr), true) => {
                let x = g.constant(text_feat.clone());
                Ok(Some(tr.forward(g, &b.text, x)?.state.last_hidden))
            }
            _ => Ok(None),
        }
    }

    /// Both branches, caption loss and, in twin mode, the contrastive loss.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        b: &mut Bindings,
        views: &[Tensor<f32>; 3],
        text_feat: &Tensor<f32>,
        captions: &CaptionBatch,
        label_smoothing: f64,
    ) -> Result<Forward> {
        let (memory, h_audio) = self.audio_branch(g, b, views)?;
        let h_text = self.text_branch(g, b, text_feat)?;
        let logits = self.decoder.forward(g, &b.decoder, memory, captions)?;
        let ce = ce_loss(g, logits, captions, label_smoothing)?;
        let (cl, total) = match (h_audio, h_text) {
            (Some(ha), Some(hc)) => {
                let cl = contrastive_loss(g, ha, hc, self.cfg.temperature)?;
                (Some(cl), total_loss(g, ce, cl)?)
            }
            _ => {
                if !g.value(ce).all_finite() {
                    return Err(Error::Numeric("caption loss is not finite".into()));
                }
                (None, ce)
            }
        };
        Ok(Forward {
            memory,
            logits,
            ce,
            cl,
            total,
            h_audio,
            h_text,
        })
    }
}
