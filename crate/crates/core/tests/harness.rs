mod common;

use common::{metrics, tiny_cfg, tiny_data};
use edtc::harness::{self, early_stop, recall_at_k, AblationMode, Checkpoint, TrainConfig, Trainer};
use edtc::Error;

fn params_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.model
        .groups()
        .iter()
        .zip(b.model.groups())
        .all(|(x, y)| x.entries().iter().zip(y.entries()).all(|(e, f)| e.name == f.name && e.value == f.value))
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(&tiny_cfg(AblationMode::FullTwin, dir.path()), tiny_data(1, 12, 0)).unwrap();
    for _ in 0..3 {
        tr.step().unwrap();
    }
    let bytes = tr.ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(params_equal(&back, &tr.ckpt));
    assert_eq!(back.step, 3);
    assert_eq!(back.config_hash(), tr.ckpt.config_hash());
    for (a, b) in back.optim.iter().zip(&tr.ckpt.optim) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(&tiny_cfg(AblationMode::Fuser, dir.path()), tiny_data(1, 8, 0)).unwrap();
    let bytes = tr.ckpt.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&0f32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));

    let truncated = &bytes[..bytes.len() - 4];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Format(_))));
}

#[test]
fn resume_reproduces_next_step_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(AblationMode::FullTwin, dir.path());
    let data = tiny_data(2, 12, 0);
    let mut a = Trainer::new(&cfg, data.clone()).unwrap();
    for _ in 0..5 {
        a.step().unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    a.ckpt.save(&path).unwrap();
    let mut b = Trainer::resume(Checkpoint::load(&path).unwrap(), data).unwrap();
    for _ in 0..3 {
        let (la, lb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(la.step, lb.step);
        assert!((la.loss_total - lb.loss_total).abs() <= 1e-6, "{la:?} vs {lb:?}");
    }
    assert!(params_equal(&a.ckpt, &b.ckpt));
}

#[test]
fn identical_runs_log_identical_metrics() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (train, val) = (tiny_data(3, 8, 0), tiny_data(3, 4, 1000));
    for d in [&d1, &d2] {
        let cfg = tiny_cfg(AblationMode::FullTwin, d.path());
        harness::train(&cfg, train.clone(), &val, d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.jsonl")).unwrap();
    assert_eq!(read(&d1), read(&d2));
}

#[test]
fn early_stop_counts_epochs_without_improvement() {
    let trace = [true, false, true, false, false, false, true];
    let mut n = 0;
    let mut stopped_at = None;
    for (epoch, &improved) in trace.iter().enumerate() {
        let (next, stop) = early_stop(n, improved, 3);
        n = next;
        if stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(5));
    assert_eq!(early_stop(2, true, 3), (0, false));
    assert_eq!(early_stop(0, false, 1), (1, true));
}

#[test]
fn training_stops_at_the_patience_boundary() {
    // a vanishing learning rate freezes the weights, so only the first epoch improves
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e-30,
        max_epochs: 10,
        early_stop_patience: 2,
        evals_per_epoch: 1,
        ..tiny_cfg(AblationMode::Baseline, dir.path())
    };
    let s = harness::train(&cfg, tiny_data(4, 8, 0), &tiny_data(4, 4, 1000), dir.path()).unwrap();
    assert_eq!(s.stop_reason, "early_stop");
    assert_eq!(s.epochs, 3);
    assert_eq!(s.best_step, Some(2));
    let evals: Vec<bool> = metrics(dir.path())
        .iter()
        .filter(|l| l["kind"] == "eval")
        .map(|l| l["improved"].as_bool().unwrap())
        .collect();
    assert_eq!(evals, vec![true, false, false]);
}

#[test]
fn every_ablation_mode_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_cfg(AblationMode::FullTwin, dir.path())
    };
    let rows = harness::ablate(&cfg, &tiny_data(5, 8, 0), &tiny_data(5, 4, 1000), dir.path()).unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["baseline", "fuser", "fuser_translator", "full_twin"]);
    for r in &rows {
        assert_eq!(r.steps, 2);
        let e = r.final_eval.as_ref().unwrap();
        assert_eq!(e.r_at_1.is_some(), r.mode == "full_twin");
        assert!(e.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
    }
    let table = std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn twin_logs_both_losses_and_their_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(AblationMode::FullTwin, dir.path());
    harness::train(&cfg, tiny_data(6, 8, 0), &tiny_data(6, 4, 1000), dir.path()).unwrap();
    let lines = metrics(dir.path());
    let train: Vec<_> = lines.iter().filter(|l| l["kind"] == "train").collect();
    assert_eq!(train.len(), 4);
    for l in train {
        let ce = l["loss_ce"].as_f64().unwrap() as f32;
        let cl = l["loss_cl"].as_f64().unwrap() as f32;
        assert_eq!(ce + cl, l["loss_total"].as_f64().unwrap() as f32);
    }
}

#[test]
fn other_modes_log_no_contrastive_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_cfg(AblationMode::FuserTranslator, dir.path())
    };
    harness::train(&cfg, tiny_data(6, 8, 0), &tiny_data(6, 4, 1000), dir.path()).unwrap();
    for l in metrics(dir.path()).iter().filter(|l| l["kind"] == "train") {
        assert!(l["loss_cl"].is_null());
        assert_eq!(l["loss_ce"], l["loss_total"]);
    }
}

#[test]
fn non_finite_loss_leaves_the_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(&tiny_cfg(AblationMode::FullTwin, dir.path()), tiny_data(7, 8, 0)).unwrap();
    tr.step().unwrap();
    let saved = dir.path().join("good.ckpt");
    tr.ckpt.save(&saved).unwrap();
    let ps = &mut tr.ckpt.model.decoder_params;
    let id = ps.id(&ps.entries()[0].name).unwrap();
    ps.get_mut(id).data_mut().fill(f32::NAN);
    let before = tr.ckpt.to_bytes().unwrap();
    assert!(matches!(tr.step(), Err(Error::Numeric(_))));
    assert_eq!(tr.ckpt.step, 1);
    assert_eq!(tr.ckpt.to_bytes().unwrap(), before);
    let good = Checkpoint::load(&saved).unwrap();
    assert!(good.model.decoder_params.entries().iter().all(|e| e.value.all_finite()));
}

#[test]
fn diverging_run_aborts_with_a_stop_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e38,
        ..tiny_cfg(AblationMode::FullTwin, dir.path())
    };
    let err = harness::train(&cfg, tiny_data(8, 8, 0), &tiny_data(8, 4, 1000), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let lines = metrics(dir.path());
    let last = lines.last().unwrap();
    assert_eq!(last["kind"], "stop");
    assert!(last["reason"].as_str().unwrap().contains("not finite"));
}

#[test]
fn recall_of_identity_rows_is_one() {
    let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    assert_eq!(recall_at_k(&rows, &rows, 1).unwrap(), 1.0);
    assert_eq!(recall_at_k(&rows, &rows, 5).unwrap(), 1.0);
}

#[test]
fn evaluation_of_a_fresh_model_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(&tiny_cfg(AblationMode::FullTwin, dir.path()), tiny_data(9, 8, 0)).unwrap();
    let val = tiny_data(9, 6, 1000);
    let rep = harness::evaluate(tr.model(), &val, 2, 0).unwrap();
    assert_eq!(rep.num_samples, 6);
    assert_eq!(rep.num_decoded, 6);
    assert!(rep.ce.is_finite() && rep.ce > 0.0);
    let limited = harness::evaluate(tr.model(), &val, 2, 3).unwrap();
    assert_eq!(limited.num_decoded, 3);
    assert_eq!(limited.ce, rep.ce);
}

#[test]
fn mismatched_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        dim: 32,
        ..tiny_cfg(AblationMode::Baseline, dir.path())
    };
    assert!(matches!(Trainer::new(&cfg, tiny_data(1, 8, 0)), Err(Error::Config(_))));
}
