//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Numeric arguments select
//! criteria, e.g. `cargo test --test acceptance -- 6 7`; other arguments are
//! ignored.

use std::f64::consts::E;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edtc::fuser::{Fuser, FuserConfig};
use edtc::harness::{self, bleu_n, corpus_bleu, lr_at, rouge_l, AblationMode, Checkpoint, TrainConfig, Trainer};
use edtc::numerics::{Binding, Graph, Init, ParameterSet, Tensor};
use edtc::synthdata::{generate_dataset, Dataset, LatentSpec};
use edtc::translator::{concat_time, split_time, Translator, TranslatorConfig};
use edtc::twin::{contrastive_loss, TwinPair};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Desk dataset: 256 training and 64 validation pairs from one generator.
fn desk_split(seed: u64) -> (Dataset, Dataset) {
    let spec = LatentSpec::desk(seed);
    (
        generate_dataset(&spec, 256, 0).unwrap(),
        generate_dataset(&spec, 64, 1 << 20).unwrap(),
    )
}

fn c1_gradients() -> Outcome {
    let reports = harness::run_gradchecks(None).unwrap();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    outcome(
        failed.is_empty() && worst <= 1e-4,
        format!("{} checks, worst relative error {worst:.2e}, failed {failed:?}", reports.len()),
    )
}

fn c2_momentum() -> Outcome {
    let set = |t: Tensor<f64>| {
        let mut ps = ParameterSet::new();
        ps.insert("w", t, true).unwrap();
        ps
    };
    let (w, ws) = (randn(&[3, 5], 1), randn(&[3, 5], 2));
    let mut zero = TwinPair::new(set(w.clone()), set(ws.clone()), 0.0).unwrap();
    zero.momentum_update().unwrap();
    let mut one = TwinPair::new(set(w.clone()), set(ws.clone()), 1.0).unwrap();
    one.momentum_update().unwrap();
    let endpoints = zero.audio.entries()[0].value == ws && one.audio.entries()[0].value == w;

    let scalar = |v: f64| set(Tensor::from_f64(&[1], &[v]).unwrap());
    let mut p = TwinPair::new(scalar(1.0), scalar(0.0), 0.95).unwrap();
    p.momentum_update().unwrap();
    let blended = p.audio.entries()[0].value.item();

    let mut q = TwinPair::new(set(w), set(ws), 0.95).unwrap();
    q.sync().unwrap();
    let diff = q.audio.max_abs_diff(&q.text).unwrap();
    outcome(
        endpoints && blended == 0.95 && diff == 0.0,
        format!("beta endpoints exact: {endpoints}; scalar blend {blended}; difference after copy-back {diff}"),
    )
}

fn c3_contrastive() -> Outcome {
    let mut g = Graph::<f64>::new();
    let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let (a, c) = (g.constant(eye.clone()), g.constant(eye));
    let l = contrastive_loss(&mut g, a, c, 1.0).unwrap();
    let got = g.value(l).item();
    // direct 2x2 softmax over rows and columns of the logits [[1, 0], [0, 1]]
    let logits = [[1.0f64, 0.0], [0.0, 1.0]];
    let nll = |v: [f64; 2], i: usize| -(v[i].exp() / (v[0].exp() + v[1].exp())).ln();
    let rows: f64 = (0..2).map(|i| nll(logits[i], i)).sum();
    let cols: f64 = (0..2).map(|j| nll([logits[0][j], logits[1][j]], j)).sum();
    let want = (rows + cols) / 4.0;
    let closed_form = -(E / (E + 1.0)).ln();
    let closed = (got - want).abs();

    let (ha, hc) = (randn(&[6, 4], 3), randn(&[6, 4], 4));
    let mut g = Graph::<f64>::new();
    let (a, c) = (g.constant(ha), g.constant(hc));
    let ac = contrastive_loss(&mut g, a, c, 0.07).unwrap();
    let ca = contrastive_loss(&mut g, c, a, 0.07).unwrap();
    let asym = (g.value(ac).item() - g.value(ca).item()).abs();
    outcome(
        closed <= 1e-6 && (want - closed_form).abs() <= 1e-12 && asym <= 1e-12,
        format!("identity rows {got:.9} vs {want:.9}; swap difference {asym:.1e}"),
    )
}

fn c4_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for case in 0..20u64 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let dim = heads * rng.random_range(2..=6);
        let time = rng.random_range(1..=6);
        let b = rng.random_range(2..=4);
        let mut ps = ParameterSet::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(100 + case);
        let mut init = Init::new(&mut ps, &mut r);
        let fc = FuserConfig {
            num_layers: rng.random_range(1..=2),
            num_heads: heads,
            ..FuserConfig::desk(dim, time)
        };
        let tc = TranslatorConfig {
            m: rng.random_range(1..=2),
            n: rng.random_range(1..=2),
            num_heads: heads,
            cab_kernel: [1, 3, 5, 9].into_iter().filter(|&k| k <= dim).nth(rng.random_range(0..2)).unwrap_or(1),
            ..TranslatorConfig::desk(dim, time)
        };
        let fuser = Fuser::new(&mut init, fc).unwrap();
        let tr = Translator::new(&mut init, "tr", tc).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&mut g, &ps, true);
        let views = [0, 1, 2].map(|k| g.constant(randn(&[b, time, dim], 1000 * case + k)));
        let fused = fuser.forward(&mut g, &mut bind, &views).unwrap();
        let out = tr.forward(&mut g, &bind, fused).unwrap();
        let x = randn(&[b, time, dim], 77 + case);
        let xv = g.constant(x.clone());
        let steps = split_time(&mut g, xv).unwrap();
        let back = concat_time(&mut g, &steps).unwrap();
        let want = [b, time, dim];
        if g.shape(fused) != want || g.shape(out.y) != want || g.value(back) != &x {
            bad.push(format!("{want:?}"));
        }
    }
    outcome(bad.is_empty(), format!("20 random configurations, mismatches {bad:?}"))
}

fn c5_last_hidden() -> Outcome {
    let mut weakest = f64::INFINITY;
    for seed in 0..3u64 {
        let mut ps = ParameterSet::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(50 + seed);
        let tr = Translator::new(&mut Init::new(&mut ps, &mut r), "tr", TranslatorConfig::desk(64, 8)).unwrap();
        let x = ps.insert("x", randn(&[2, 8, 64], 60 + seed), true).unwrap();
        let mut g = Graph::new();
        let b = Binding::new(&mut g, &ps, true);
        let out = tr.forward(&mut g, &b, b.var(x)).unwrap();
        let w = g.constant(randn(&[2, 64], 70 + seed));
        let prod = g.mul(out.state.last_hidden, w).unwrap();
        let l = g.sum(prod);
        let mut grads = g.backward(l).unwrap();
        let gx = b.grads(&mut grads)[x.index()].clone().unwrap();
        for t in 0..8 {
            let n: f64 = (0..2)
                .flat_map(|bi| gx.data()[(bi * 8 + t) * 64..(bi * 8 + t + 1) * 64].iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            weakest = weakest.min(n);
        }
    }
    outcome(weakest > 1e-8, format!("smallest per-step gradient norm {weakest:.3e} over 3 inputs"))
}

fn c9_schedule() -> Outcome {
    let cfg = TrainConfig::desk();
    let s = 16;
    let base = cfg.lr;
    let start = lr_at(0, s, &cfg);
    let mid = lr_at((cfg.cycle_epochs * s / 2) as u64, s, &cfg);
    let end = lr_at((cfg.cycle_epochs * s) as u64 - 1, s, &cfg);
    let halved = lr_at((4 * s) as u64, s, &cfg);
    let errs = [
        (start - base).abs(),
        (mid - base / 10.0).abs(),
        (halved - base / 2.0).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && end > mid && end < base,
        format!("start {start:e}, mid-cycle {mid:e}, epoch 4 {halved:e}, worst error {worst:.1e}"),
    )
}

fn c10_determinism() -> Outcome {
    let (train, val) = desk_split(10);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = TrainConfig {
            max_steps: 16,
            evals_per_epoch: 1,
            eval_caption_limit: 4,
            ..TrainConfig::desk()
        };
        harness::train(&cfg, train.clone(), &val, d.path()).unwrap();
    }
    let logs: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join("metrics.jsonl")).unwrap()).collect();
    let same_logs = logs[0] == logs[1] && !logs[0].is_empty();

    let mut a = Trainer::new(&TrainConfig::desk(), train.clone()).unwrap();
    for _ in 0..4 {
        a.step().unwrap();
    }
    let path = dirs[0].path().join("resume.ckpt");
    a.ckpt.save(&path).unwrap();
    let mut b = Trainer::resume(Checkpoint::load(&path).unwrap(), train).unwrap();
    let (la, lb) = (a.step().unwrap(), b.step().unwrap());
    let gap = (la.loss_total - lb.loss_total).abs();
    outcome(
        same_logs && gap <= 1e-6,
        format!("identical logs: {same_logs}; resumed next-step loss gap {gap:.1e}"),
    )
}

/// Settings shared by the learning experiments: a single fuser layer, a
/// 2+1 translator and a flat step-decay (halving effectively disabled).
fn learning_cfg(mode: AblationMode, seed: u64) -> TrainConfig {
    TrainConfig {
        ablation_mode: mode,
        fuser_layers: 1,
        translator_m: 2,
        translator_n: 1,
        halve_every: 1_000_000,
        batch_size: 16,
        seed,
        ..TrainConfig::desk()
    }
}

fn c6_alignment() -> Outcome {
    let (train, val) = desk_split(7);
    let cfg = TrainConfig {
        max_steps: 2000,
        ..learning_cfg(AblationMode::FullTwin, 7)
    };
    let mut tr = Trainer::new(&cfg, train).unwrap();
    let (mut best, mut best_step) = (0.0, 0);
    while tr.ckpt.step < 2000 {
        for _ in 0..tr.steps_per_epoch {
            tr.step().unwrap();
        }
        let r = harness::evaluate(tr.model(), &val, 1, 1).unwrap().r_at_1_in_batch.unwrap();
        if r > best {
            (best, best_step) = (r, tr.ckpt.step);
        }
        if best >= 0.8 {
            break;
        }
    }
    outcome(
        best >= 0.8,
        format!("validation in-batch R@1 {best:.3} at step {best_step} (chance {:.4})", 1.0 / 16.0),
    )
}

fn c7_overfit() -> Outcome {
    let train = generate_dataset(&LatentSpec::desk(7), 32, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        label_smoothing: 0.0,
        ..learning_cfg(AblationMode::FullTwin, 7)
    };
    let mut tr = Trainer::new(&cfg, train.clone()).unwrap();
    let (mut ce, mut exact, mut epoch, mut ce_epoch) = (f64::INFINITY, 0.0, 0, None);
    while epoch < 500 {
        for _ in 0..tr.steps_per_epoch {
            tr.step().unwrap();
        }
        epoch += 1;
        ce = harness::evaluate(tr.model(), &train, 1, 1).unwrap().ce;
        if ce < 0.1 {
            ce_epoch.get_or_insert(epoch);
            if (epoch - ce_epoch.unwrap()) % 10 == 0 {
                exact = harness::evaluate(tr.model(), &train, 4, 0).unwrap().exact_match;
                if exact >= 0.9 {
                    break;
                }
            }
        }
    }
    outcome(
        ce_epoch.is_some() && exact >= 0.9,
        format!("training CE below 0.1 at epoch {ce_epoch:?}; stopped at epoch {epoch} with CE {ce:.4}, beam-4 exact match {exact:.3}"),
    )
}

fn c8_ablation() -> Outcome {
    let (train, val) = desk_split(7);
    let seeds = [1, 2, 3];
    let mut means = [0.0; 4];
    let out = tempfile::tempdir().unwrap();
    for seed in seeds {
        let cfg = TrainConfig {
            max_steps: ABLATION_STEPS,
            evals_per_epoch: 1,
            eval_caption_limit: 0,
            early_stop_patience: 1000,
            ..learning_cfg(AblationMode::FullTwin, seed)
        };
        let rows = harness::ablate(&cfg, &train, &val, &out.path().join(seed.to_string())).unwrap();
        for (m, r) in means.iter_mut().zip(&rows) {
            *m += r.best_bleu4 / seeds.len() as f64;
        }
    }
    let gaps = [means[3] - means[2], means[2] - means[1], means[1] - means[0]];
    let names = AblationMode::ALL.map(|m| m.as_str());
    let table: Vec<String> = names.iter().zip(&means).map(|(n, m)| format!("{n} {m:.4}")).collect();
    outcome(
        gaps.iter().all(|&g| g >= -0.01),
        format!("mean best BLEU-4 {}; gaps {gaps:.4?}", table.join(", ")),
    )
}

/// Training budget per ablation run.
const ABLATION_STEPS: usize = 320;

/// One hand-checked BLEU/ROUGE-L case; `bleu[k]` is BLEU-(k+1), `None`
/// where the order is not checked.
struct Fixture {
    name: &'static str,
    pairs: Vec<(&'static str, Vec<&'static str>)>,
    bleu: [Option<f64>; 4],
    rouge: Option<f64>,
}

fn f_measure(lcs: f64, c: f64, r: f64) -> f64 {
    let (p, rec, b2) = (lcs / c, lcs / r, 1.44);
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "identical",
            pairs: vec![("a b c d", vec!["a b c d"])],
            bleu: [Some(1.0); 4],
            rouge: Some(1.0),
        },
        Fixture {
            name: "clipping",
            pairs: vec![("a a a", vec!["a"])],
            bleu: [Some(1.0 / 3.0), None, None, None],
            rouge: Some(f_measure(1.0, 3.0, 1.0)),
        },
        Fixture {
            name: "brevity",
            pairs: vec![("a b", vec!["a b c d"])],
            bleu: [Some((-1.0f64).exp()), Some((-1.0f64).exp()), None, None],
            rouge: Some(f_measure(2.0, 2.0, 4.0)),
        },
        Fixture {
            name: "skip and smoothing",
            pairs: vec![("a b c d", vec!["a c d"])],
            // p = 3/4, 1/3, then add-one 1/3 and 1/2
            bleu: [
                Some(0.75),
                Some(0.5),
                Some((1.0f64 / 12.0).powf(1.0 / 3.0)),
                Some((1.0f64 / 24.0).powf(0.25)),
            ],
            rouge: Some(f_measure(3.0, 4.0, 3.0)),
        },
        Fixture {
            name: "disjoint",
            pairs: vec![("x y", vec!["a b"])],
            bleu: [Some(0.0); 4],
            rouge: Some(0.0),
        },
        Fixture {
            name: "closest reference",
            pairs: vec![("the cat sat", vec!["the cat sat on mat", "a cat"])],
            bleu: [Some(1.0), Some(1.0), Some(1.0), None],
            rouge: None,
        },
        Fixture {
            name: "length tie",
            pairs: vec![("a b c", vec!["a b c d", "a b"])],
            bleu: [Some(1.0), None, None, None],
            rouge: None,
        },
        Fixture {
            name: "multi-reference clipping",
            pairs: vec![("a a b b", vec!["a b", "a a"])],
            bleu: [Some(0.75), Some(0.5f64.sqrt()), None, None],
            rouge: None,
        },
        Fixture {
            name: "corpus",
            pairs: vec![("a b", vec!["a b"]), ("c", vec!["d e"])],
            bleu: [
                Some(2.0 / 3.0 * (-1.0f64 / 3.0).exp()),
                Some((2.0f64 / 3.0).sqrt() * (-1.0f64 / 3.0).exp()),
                None,
                None,
            ],
            rouge: None,
        },
        Fixture {
            name: "interleaved",
            pairs: vec![("a x b y c", vec!["a b c z"])],
            bleu: [Some(0.6), Some((3.0f64 / 25.0).sqrt()), None, None],
            rouge: Some(f_measure(3.0, 5.0, 4.0)),
        },
    ]
}

fn c11_metrics() -> Outcome {
    let words = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<String>>();
    let mut worst: f64 = 0.0;
    let mut wrong = Vec::new();
    let all = fixtures();
    for f in &all {
        let cands: Vec<Vec<String>> = f.pairs.iter().map(|(c, _)| words(c)).collect();
        let refs: Vec<Vec<Vec<String>>> = f.pairs.iter().map(|(_, r)| r.iter().map(|s| words(s)).collect()).collect();
        let pairs: Vec<(&[String], &[Vec<String>])> = cands.iter().zip(&refs).map(|(c, r)| (c.as_slice(), r.as_slice())).collect();
        for (k, want) in f.bleu.iter().enumerate() {
            if let Some(w) = want {
                let got = if pairs.len() == 1 {
                    bleu_n(&cands[0], &refs[0], k + 1).unwrap()
                } else {
                    corpus_bleu(&pairs, k + 1).unwrap()
                };
                let e = (got - w).abs();
                worst = worst.max(e);
                if e > 1e-9 {
                    wrong.push(format!("{} BLEU-{}", f.name, k + 1));
                }
            }
        }
        if let Some(w) = f.rouge {
            let got = rouge_l(&cands[0], &refs[0][0]).unwrap();
            let e = (got - w).abs();
            worst = worst.max(e);
            if e > 1e-9 {
                wrong.push(format!("{} ROUGE-L", f.name));
            }
        }
    }
    outcome(
        wrong.is_empty(),
        format!("{} fixtures, worst error {worst:.1e}, mismatches {wrong:?}", all.len()),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient integrity", c1_gradients),
        (2, "momentum update and copy-back", c2_momentum),
        (3, "contrastive loss closed form", c3_contrastive),
        (4, "shape contracts", c4_shapes),
        (5, "last hidden state sees every step", c5_last_hidden),
        (6, "twin alignment learning", c6_alignment),
        (7, "caption overfit", c7_overfit),
        (8, "ablation ordering", c8_ablation),
        (9, "learning-rate schedule", c9_schedule),
        (10, "determinism and checkpointing", c10_determinism),
        (11, "metric oracles", c11_metrics),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {n:>2} {name}: {} [{:.1} s]", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
