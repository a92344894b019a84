use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{corpus_bleu, recall_at_k, rouge_l};
use super::model::Model;
use super::optim::{adamw_step, lr_at, AdamState, AdamWConfig};
use crate::captioner::{beam_search, DecoderScorer};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::synthdata::{epoch_plan, Batch, Dataset};

/// Offset of the per-step augmentation RNG streams.
const STEP_STREAM: u64 = 1 << 41;

/// Losses and learning rate of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_cl: Option<f64>,
    pub loss_total: f64,
}

/// Validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_decoded: usize,
    /// BLEU-1 to BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// Fraction of decoded captions equal to their reference.
    pub exact_match: f64,
    /// Caption cross-entropy without label smoothing.
    pub ce: f64,
    /// Audio-to-text recall over the whole split; twin mode only.
    pub r_at_1: Option<f64>,
    pub r_at_5: Option<f64>,
    /// Recall at 1 within consecutive batches of the training batch size.
    pub r_at_1_in_batch: Option<f64>,
}

impl EvalReport {
    pub fn bleu4(&self) -> f64 {
        self.bleu[3]
    }
}

/// Model, optimizer states and position in the schedule.
pub struct Trainer {
    pub ckpt: Checkpoint,
    pub train: Dataset,
    pub steps_per_epoch: usize,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(STEP_STREAM + step);
    r
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, train: Dataset) -> Result<Self> {
        let model = Model::new(cfg, train.spec.vocab_size)?;
        let optim = model.groups().map(AdamState::new);
        Self::resume(
            Checkpoint {
                model,
                optim,
                step: 0,
                best_metric: -1.0,
                epochs_without_improvement: 0,
            },
            train,
        )
    }

    pub fn resume(ckpt: Checkpoint, train: Dataset) -> Result<Self> {
        ckpt.model.check_data(&train.spec)?;
        if train.len() < 2 {
            return Err(Error::Config("training split needs at least 2 samples".into()));
        }
        let steps_per_epoch = epoch_plan(train.len(), ckpt.model.cfg.batch_size, false, 0, 0)?.len();
        Ok(Self {
            ckpt,
            train,
            steps_per_epoch,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.ckpt.model.cfg
    }

    pub fn model(&self) -> &Model {
        &self.ckpt.model
    }

    /// Sample indices of the next step's batch.
    pub fn next_batch(&self) -> Result<Vec<usize>> {
        let epoch = self.ckpt.step / self.steps_per_epoch as u64;
        let i = (self.ckpt.step % self.steps_per_epoch as u64) as usize;
        let mut plan = epoch_plan(self.train.len(), self.cfg().batch_size, true, self.cfg().seed, epoch)?;
        Ok(plan.swap_remove(i))
    }

    /// Forward, backward and parameter update on the next batch. Nothing is
    /// changed when the loss is not finite.
    pub fn step(&mut self) -> Result<StepLog> {
        let idx = self.next_batch()?;
        let batch = Batch::gather(&self.train, &idx)?;
        let cfg = self.cfg().clone();
        let step = self.ckpt.step;
        let mut rng = step_rng(cfg.seed, step);
        let aug = cfg.augment();
        let views = [
            aug.apply(&batch.views[0], true, &mut rng)?,
            aug.apply(&batch.views[1], true, &mut rng)?,
            aug.apply(&batch.views[2], true, &mut rng)?,
        ];
        let model = &self.ckpt.model;
        let mut g = Graph::new();
        let mut b = model.bind(&mut g, true);
        let fw = model.forward(&mut g, &mut b, &views, &batch.text_feat, &batch.captions, cfg.label_smoothing)?;
        let (ce, cl, total) = (
            f64::from(g.value(fw.ce).item()),
            fw.cl.map(|v| f64::from(g.value(v).item())),
            f64::from(g.value(fw.total).item()),
        );
        if !total.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite at step {step}")));
        }
        let mut grads = g.backward(fw.total)?;
        let all = [
            b.fuser.grads(&mut grads),
            b.audio.grads(&mut grads),
            b.text.grads(&mut grads),
            b.decoder.grads(&mut grads),
        ];
        if all.iter().flatten().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!("gradient is not finite at step {step}")));
        }
        let lr = lr_at(step, self.steps_per_epoch, &cfg);
        let opt = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let ckpt = &mut self.ckpt;
        b.fuser.commit(&mut ckpt.model.fuser_params)?;
        for ((ps, gr), st) in ckpt.model.groups_mut().into_iter().zip(&all).zip(&mut ckpt.optim) {
            if !ps.is_empty() {
                adamw_step(ps, gr, st, lr, &opt)?;
            }
        }
        if cfg.ablation_mode.uses_twin() {
            ckpt.model.twin.sync()?;
        }
        ckpt.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch as u64,
            lr,
            loss_ce: ce,
            loss_cl: cl,
            loss_total: total,
        })
    }
}

/// Validation metrics of `model` on `data`: beam-search captions (no
/// augmentation), unsmoothed caption CE and, in twin mode, retrieval from
/// the translators' last hidden states.
pub fn evaluate(model: &Model, data: &Dataset, num_beams: usize, caption_limit: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    model.check_data(&data.spec)?;
    let plan = epoch_plan(data.len(), model.cfg.batch_size, false, 0, 0)?;
    let (t, d) = (model.cfg.time, model.cfg.dim);
    let mut memories: Vec<Tensor<f32>> = Vec::with_capacity(data.len());
    let (mut ha, mut hc) = (Vec::new(), Vec::new());
    let mut in_batch = Vec::new();
    let (mut ce_sum, mut ce_tokens) = (0.0, 0usize);
    for idx in &plan {
        let batch = Batch::gather(data, idx)?;
        let mut g = Graph::new();
        let mut b = model.bind(&mut g, false);
        let fw = model.forward(&mut g, &mut b, &batch.views, &batch.text_feat, &batch.captions, 0.0)?;
        let tokens: usize = batch.captions.targets().iter().flatten().flatten().count();
        ce_sum += f64::from(g.value(fw.ce).item()) * tokens as f64;
        ce_tokens += tokens;
        let mem = g.value(fw.memory);
        for row in mem.data().chunks(t * d) {
            memories.push(Tensor::new(&[1, t, d], row.to_vec())?);
        }
        if let (Some(a), Some(c)) = (fw.h_audio, fw.h_text) {
            let rows = |v: &Tensor<f32>| -> Vec<Vec<f64>> { v.data().chunks(d).map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect() };
            let (ra, rc) = (rows(g.value(a)), rows(g.value(c)));
            in_batch.push((recall_at_k(&ra, &rc, 1)?, ra.len()));
            ha.extend(ra);
            hc.extend(rc);
        }
    }
    let limit = if caption_limit == 0 { data.len() } else { caption_limit.min(data.len()) };
    let vocab = &model.vocab;
    let mut cands: Vec<Vec<usize>> = Vec::with_capacity(limit);
    let mut refs: Vec<Vec<Vec<usize>>> = Vec::with_capacity(limit);
    for (mem, s) in memories.iter().zip(&data.samples).take(limit) {
        let scorer = DecoderScorer {
            decoder: &model.decoder,
            params: &model.decoder_params,
            memory: mem,
        };
        let h = beam_search(&scorer, vocab.bos, vocab.eos, num_beams, s.caption.len() - 1)?;
        cands.push(h.tokens.into_iter().take_while(|&x| x != vocab.eos).collect());
        refs.push(vec![s.caption[1..s.caption.len() - 1].to_vec()]);
    }
    let pairs: Vec<(&[usize], &[Vec<usize>])> = cands.iter().zip(&refs).map(|(c, r)| (c.as_slice(), r.as_slice())).collect();
    let mut bleu = [0.0; 4];
    for (n, slot) in bleu.iter_mut().enumerate() {
        *slot = corpus_bleu(&pairs, n + 1)?;
    }
    let rouge = cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| rouge_l(c, &r[0]))
        .sum::<Result<f64>>()?
        / limit as f64;
    let exact = cands.iter().zip(&refs).filter(|(c, r)| **c == r[0]).count() as f64 / limit as f64;
    let retrieval = !ha.is_empty();
    let weighted: f64 = in_batch.iter().map(|(r, n)| r * *n as f64).sum();
    Ok(EvalReport {
        num_samples: data.len(),
        num_decoded: limit,
        bleu,
        rouge_l: rouge,
        exact_match: exact,
        ce: ce_sum / ce_tokens.max(1) as f64,
        r_at_1: retrieval.then(|| recall_at_k(&ha, &hc, 1)).transpose()?,
        r_at_5: retrieval.then(|| recall_at_k(&ha, &hc, 5)).transpose()?,
        r_at_1_in_batch: retrieval.then(|| weighted / data.len() as f64),
    })
}

/// Steps after which an epoch of `s` steps is evaluated: `ceil(k s / e)`
/// for `k = 1..=e`, without repeats.
pub fn eval_points(s: usize, e: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=e).map(|k| (k * s).div_ceil(e)).collect();
    v.dedup();
    v
}

/// Epoch-end bookkeeping of early stopping: returns the updated count of
/// epochs without improvement and whether training stops.
pub fn early_stop(epochs_without_improvement: usize, improved: bool, patience: usize) -> (usize, bool) {
    let n = if improved { 0 } else { epochs_without_improvement + 1 };
    (n, n >= patience)
}

/// Run directory: `config.txt`, `metrics.jsonl`, `checkpoints/step-*.ckpt`,
/// `report.json`.
pub struct RunDir {
    pub path: PathBuf,
    metrics: File,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Train(&'a StepLog),
    Eval { step: u64, epoch: u64, report: &'a EvalReport, improved: bool },
    Stop { step: u64, reason: &'a str },
}

impl RunDir {
    pub fn create(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(path.join("checkpoints"))?;
        std::fs::write(path.join("config.txt"), cfg.to_text())?;
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path.join("metrics.jsonl"))?;
        Ok(Self {
            path: path.to_path_buf(),
            metrics,
        })
    }

    fn log(&mut self, line: &LogLine<'_>) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, line)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    /// Logs a stop line for `e` and hands it back; a failure to log is
    /// ignored so the original error wins.
    fn abort(&mut self, step: u64, e: Error) -> Error {
        let _ = self.log(&LogLine::Stop {
            step,
            reason: &e.to_string(),
        });
        e
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join("checkpoints").join(format!("step-{step:08}.ckpt"))
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub steps: u64,
    pub epochs: u64,
    pub best_bleu4: f64,
    pub best_step: Option<u64>,
    pub best_checkpoint: Option<PathBuf>,
    pub stop_reason: String,
    pub final_eval: Option<EvalReport>,
    pub tracked_metric: String,
}

/// Full training loop: evaluates `evals_per_epoch` times per epoch, keeps a
/// checkpoint whenever validation BLEU-4 improves, stops after
/// `early_stop_patience` epochs without improvement, `max_epochs` or
/// `max_steps`. A non-finite loss ends the run with an error; checkpoints
/// already written are kept.
pub fn train(cfg: &TrainConfig, train_data: Dataset, val: &Dataset, run_dir: &Path) -> Result<RunSummary> {
    let mut tr = Trainer::new(cfg, train_data)?;
    tr.ckpt.model.check_data(&val.spec)?;
    let mut run = RunDir::create(run_dir, cfg)?;
    log::info!("tracked metric: validation BLEU-4 ({} mode)", cfg.ablation_mode);
    let s = tr.steps_per_epoch;
    let points = eval_points(s, cfg.evals_per_epoch);
    let mut best_step = None;
    let mut best_path = None;
    let mut last_eval = None;
    let mut stop_reason = "max_epochs".to_string();
    'epochs: for epoch in 0..cfg.max_epochs as u64 {
        let mut improved = false;
        for i in 0..s {
            if cfg.max_steps > 0 && tr.ckpt.step >= cfg.max_steps as u64 {
                stop_reason = "max_steps".into();
                break 'epochs;
            }
            let log_line = match tr.step() {
                Ok(l) => l,
                Err(e) => return Err(run.abort(tr.ckpt.step, e)),
            };
            run.log(&LogLine::Train(&log_line))?;
            if points.contains(&(i + 1)) {
                let rep = match evaluate(tr.model(), val, cfg.num_beams, cfg.eval_caption_limit) {
                    Ok(r) => r,
                    Err(e) => return Err(run.abort(tr.ckpt.step, e)),
                };
                let better = rep.bleu4() > tr.ckpt.best_metric;
                if better {
                    tr.ckpt.best_metric = rep.bleu4();
                    improved = true;
                    let p = run.checkpoint_path(tr.ckpt.step);
                    tr.ckpt.save(&p)?;
                    best_step = Some(tr.ckpt.step);
                    best_path = Some(p);
                }
                run.log(&LogLine::Eval {
                    step: tr.ckpt.step,
                    epoch,
                    report: &rep,
                    improved: better,
                })?;
                last_eval = Some(rep);
            }
        }
        let (n, stop) = early_stop(tr.ckpt.epochs_without_improvement, improved, cfg.early_stop_patience);
        tr.ckpt.epochs_without_improvement = n;
        if stop {
            stop_reason = "early_stop".into();
            break;
        }
    }
    run.log(&LogLine::Stop {
        step: tr.ckpt.step,
        reason: &stop_reason,
    })?;
    let summary = RunSummary {
        mode: cfg.ablation_mode.to_string(),
        steps: tr.ckpt.step,
        epochs: tr.ckpt.step.div_ceil(s as u64),
        best_bleu4: tr.ckpt.best_metric,
        best_step,
        best_checkpoint: best_path,
        stop_reason,
        final_eval: last_eval,
        tracked_metric: "validation BLEU-4".into(),
    };
    std::fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
