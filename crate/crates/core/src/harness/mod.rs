//! Training and evaluation: configuration, optimizer and schedule,
//! checkpoints, metrics, the training loop and the ablation matrix.

mod checkpoint;
mod config;
mod gradcheck;
mod metrics;
mod model;
mod optim;
mod trainer;

use std::fmt::Write as _;
use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::{AblationMode, TrainConfig};
pub use gradcheck::{run_gradchecks, MODULES as GRADCHECK_MODULES};
pub use metrics::{bleu_n, corpus_bleu, lcs_len, recall_at_k, rouge_l, ROUGE_BETA};
pub use model::{Bindings, Forward, Model, GROUPS};
pub use optim::{adamw_step, lr_at, lr_at_epoch, AdamState, AdamWConfig};
pub use trainer::{early_stop, eval_points, evaluate, train, EvalReport, RunDir, RunSummary, StepLog, Trainer};

use crate::error::Result;
use crate::synthdata::Dataset;

/// Trains every ablation mode with otherwise identical settings, each in
/// its own subdirectory of `out_dir`, and writes `ablation.txt`.
pub fn ablate(cfg: &TrainConfig, train_data: &Dataset, val: &Dataset, out_dir: &Path) -> Result<Vec<RunSummary>> {
    let mut rows = Vec::with_capacity(4);
    for mode in AblationMode::ALL {
        let c = TrainConfig {
            ablation_mode: mode,
            run_dir: out_dir.join(mode.as_str()),
            ..cfg.clone()
        };
        rows.push(train(&c, train_data.clone(), val, &c.run_dir)?);
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("ablation.txt"), ablation_table(&rows))?;
    Ok(rows)
}

/// Plain-text comparison of run summaries.
pub fn ablation_table(rows: &[RunSummary]) -> String {
    let mut s = format!(
        "{:<18} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
        "mode", "steps", "BLEU-1", "BLEU-4", "best B4", "ROUGE-L", "exact", "R@1"
    );
    for r in rows {
        let e = r.final_eval.as_ref();
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>8} {:>8} {:>8.4} {:>8} {:>8} {:>7}",
            r.mode,
            r.steps,
            f(e.map(|e| e.bleu[0])),
            f(e.map(|e| e.bleu[3])),
            r.best_bleu4,
            f(e.map(|e| e.rouge_l)),
            f(e.map(|e| e.exact_match)),
            f(e.and_then(|e| e.r_at_1)),
        );
    }
    s
}
