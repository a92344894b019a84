use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fuser::FuserConfig;
use crate::synthdata::SpecAugment;
use crate::translator::TranslatorConfig;

/// Which modules sit between the views and the caption decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    /// First view straight into the decoder.
    Baseline,
    /// Fused views into the decoder.
    Fuser,
    /// Fused views aligned by the audio translator.
    FuserTranslator,
    /// As above, plus the text-branch twin and contrastive loss.
    FullTwin,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Baseline, Self::Fuser, Self::FuserTranslator, Self::FullTwin];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fuser => "fuser",
            Self::FuserTranslator => "fuser_translator",
            Self::FullTwin => "full_twin",
        }
    }

    pub fn uses_fuser(self) -> bool {
        self != Self::Baseline
    }

    pub fn uses_translator(self) -> bool {
        matches!(self, Self::FuserTranslator | Self::FullTwin)
    }

    pub fn uses_twin(self) -> bool {
        self == Self::FullTwin
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training, model and data settings. Serialized as flat `key = value`
/// lines; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub cycle_epochs: usize,
    pub halve_every: usize,
    pub early_stop_patience: usize,
    pub evals_per_epoch: usize,
    pub num_beams: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    /// Fusion layers `L`.
    pub fuser_layers: usize,
    /// Translator encoder layers `M`.
    pub translator_m: usize,
    /// Translator decoder layers `N`.
    pub translator_n: usize,
    pub dim: usize,
    pub time: usize,
    pub num_heads: usize,
    pub cab_kernel: usize,
    pub cfb_kernel: usize,
    pub pfeb_kernel: usize,
    pub decoder_layers: usize,
    pub spec_augment: bool,
    /// Validation samples decoded with beam search per evaluation; 0 means all.
    pub eval_caption_limit: usize,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            beta: 0.95,
            temperature: 0.07,
            label_smoothing: 0.1,
            cycle_epochs: 4,
            halve_every: 4,
            early_stop_patience: 4,
            evals_per_epoch: 3,
            num_beams: 4,
            max_epochs: 20,
            max_steps: 0,
            seed: 0,
            ablation_mode: AblationMode::FullTwin,
            fuser_layers: 3,
            translator_m: 3,
            translator_n: 2,
            dim: 64,
            time: 8,
            num_heads: 4,
            cab_kernel: 9,
            cfb_kernel: 7,
            pfeb_kernel: 3,
            decoder_layers: 2,
            spec_augment: true,
            eval_caption_limit: 0,
            train_data: PathBuf::from("data/train.bin"),
            val_data: PathBuf::from("data/val.bin"),
            run_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Full-scale setting: 768-wide, 32-step features, batch 32.
    pub fn full_scale() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 32,
            dim: 768,
            time: 32,
            num_heads: 8,
            cab_kernel: 45,
            ..Self::desk()
        }
    }

    pub fn fuser_config(&self) -> FuserConfig {
        FuserConfig {
            num_layers: self.fuser_layers,
            cfb_kernel: self.cfb_kernel,
            pfeb_kernel: self.pfeb_kernel,
            num_heads: self.num_heads,
            ..FuserConfig::desk(self.dim, self.time)
        }
    }

    pub fn translator_config(&self) -> TranslatorConfig {
        TranslatorConfig {
            m: self.translator_m,
            n: self.translator_n,
            cab_kernel: self.cab_kernel,
            num_heads: self.num_heads,
            ..TranslatorConfig::desk(self.dim, self.time)
        }
    }

    pub fn augment(&self) -> SpecAugment {
        if self.spec_augment {
            SpecAugment::desk(self.time, self.dim)
        } else {
            SpecAugment::disabled()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("cycle_epochs", self.cycle_epochs),
            ("halve_every", self.halve_every),
            ("early_stop_patience", self.early_stop_patience),
            ("evals_per_epoch", self.evals_per_epoch),
            ("num_beams", self.num_beams),
            ("max_epochs", self.max_epochs),
            ("fuser_layers", self.fuser_layers),
            ("translator_m", self.translator_m),
            ("translator_n", self.translator_n),
            ("dim", self.dim),
            ("time", self.time),
            ("num_heads", self.num_heads),
            ("decoder_layers", self.decoder_layers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.batch_size < 2 && self.ablation_mode.uses_twin() {
            return Err(Error::Config("full_twin needs batch_size >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=0.3).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 0.3]", self.label_smoothing)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.ablation_mode.uses_fuser() {
            self.fuser_config().validate().map_err(wrap)?;
        }
        if self.ablation_mode.uses_translator() {
            self.translator_config().validate().map_err(wrap)?;
        }
        Ok(())
    }

    /// Canonical text form; every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Path| p.display().to_string();
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta", self.beta.to_string()),
            ("temperature", self.temperature.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("cycle_epochs", self.cycle_epochs.to_string()),
            ("halve_every", self.halve_every.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("evals_per_epoch", self.evals_per_epoch.to_string()),
            ("num_beams", self.num_beams.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation_mode", self.ablation_mode.to_string()),
            ("fuser_layers", self.fuser_layers.to_string()),
            ("translator_m", self.translator_m.to_string()),
            ("translator_n", self.translator_n.to_string()),
            ("dim", self.dim.to_string()),
            ("time", self.time.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("cab_kernel", self.cab_kernel.to_string()),
            ("cfb_kernel", self.cfb_kernel.to_string()),
            ("pfeb_kernel", self.pfeb_kernel.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("spec_augment", self.spec_augment.to_string()),
            ("eval_caption_limit", self.eval_caption_limit.to_string()),
            ("train_data", path(&self.train_data)),
            ("val_data", path(&self.val_data)),
            ("run_dir", path(&self.run_dir)),
        ]
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "cycle_epochs" => self.cycle_epochs = num(key, value)?,
            "halve_every" => self.halve_every = num(key, value)?,
            "early_stop_patience" => self.early_stop_patience = num(key, value)?,
            "evals_per_epoch" => self.evals_per_epoch = num(key, value)?,
            "num_beams" => self.num_beams = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation_mode" => self.ablation_mode = value.parse()?,
            "fuser_layers" => self.fuser_layers = num(key, value)?,
            "translator_m" => self.translator_m = num(key, value)?,
            "translator_n" => self.translator_n = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "time" => self.time = num(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "cab_kernel" => self.cab_kernel = num(key, value)?,
            "cfb_kernel" => self.cfb_kernel = num(key, value)?,
            "pfeb_kernel" => self.pfeb_kernel = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "spec_augment" => self.spec_augment = num(key, value)?,
            "eval_caption_limit" => self.eval_caption_limit = num(key, value)?,
            "train_data" => self.train_data = PathBuf::from(value),
            "val_data" => self.val_data = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Desk defaults overridden by the keys present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the canonical text, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
