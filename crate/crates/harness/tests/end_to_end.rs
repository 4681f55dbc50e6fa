use std::fs;
use std::path::Path;
use std::process::Command;

use fairmoe_core::data::{self, generate, split, SynthConfig};
use fairmoe_core::metrics::{FairnessReport, Prediction, PredictionLog};
use fairmoe_core::moe::RouteMode;
use fairmoe_harness::checkpoint::Checkpoint;
use fairmoe_harness::config::ExperimentConfig;
use fairmoe_harness::evaluate::evaluate;
use fairmoe_harness::train::train;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synth = SynthConfig { samples: 240, seed: 5, ..SynthConfig::default() };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg
}

fn fairmoe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fairmoe")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fairmoe(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("c.json");
    fs::write(&config, small_config().to_json()).unwrap();
    let data = root.join("data");
    ok(&["synth-data", "--config", p(&config), "--out", p(&data)]);
    for f in ["train.fmds", "train.manifest.csv", "test.fmds", "test.manifest.csv"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    assert_eq!(data::load(&data.join("train.fmds")).unwrap().len(), 192);

    let (a, b) = (root.join("a"), root.join("b"));
    for run in [&a, &b] {
        ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(run)]);
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "checkpoint.fmck"), read(&b, "checkpoint.fmck"));
    assert_eq!(read(&a, "train_log.csv"), read(&b, "train_log.csv"));
    let log = String::from_utf8(read(&a, "train_log.csv")).unwrap();
    assert!(log.starts_with("step,ce,mi_layer0,mi_layer1,mi_layer2,mi_layer3,total,acc\n"));
    assert_eq!(log.lines().count(), 3);

    let ck = a.join("checkpoint.fmck");
    let eval_dir = root.join("eval");
    let args = ["eval", "--checkpoint", p(&ck), "--data", p(&data), "--baseline", p(&ck)];
    let printed = ok(&args);
    let report: FairnessReport = serde_json::from_str(&printed).unwrap();
    assert_eq!(report.samples, 48);
    for f in [report.fate.eopp0, report.fate.eopp1, report.fate.eodd].into_iter().flatten() {
        assert_eq!(f, 0.0);
    }
    let mut with_out = args.to_vec();
    with_out.extend(["--mode", "argmax", "--out", p(&eval_dir)]);
    assert_eq!(ok(&with_out), "");
    let saved: FairnessReport = serde_json::from_slice(&read(&eval_dir, "report.json")).unwrap();
    assert_eq!(saved, report);
    let routing = String::from_utf8(read(&eval_dir, "routing.csv")).unwrap();
    assert_eq!(routing.lines().count(), 1 + 4 * 48);
    assert!(routing.lines().nth(1).unwrap().contains(",argmax,"));

    let rr = root.join("route.csv");
    ok(&["route-report", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&rr)]);
    let text = fs::read_to_string(&rr).unwrap();
    assert_eq!(text.lines().next().unwrap(), "layer_index,group,expert,samples,mean_score");
    assert_eq!(text.lines().count(), 9);

    let mut quick = small_config();
    quick.train.epochs = 1;
    let quick_cfg = root.join("q.json");
    fs::write(&quick_cfg, quick.to_json()).unwrap();
    let ab = root.join("ablate");
    ok(&["ablate", "--config", p(&quick_cfg), "--data", p(&data), "--out", p(&ab), "--seeds", "1"]);
    let table = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.lines().nth(1).unwrap().starts_with("0,1,"));
}

#[test]
fn cli_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("c.json");
    fs::write(&config, r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = fairmoe(&["synth-data", "--config", p(&config), "--out", p(&root.join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = fairmoe(&["train", "--data", p(&root.join("nowhere")), "--out", p(&root.join("o"))]);
    assert!(!missing.status.success());
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config();
    let (ds, _) = generate(&cfg.data.synth).unwrap();
    let (tr, _) = split(&ds, 0.8, 0).unwrap();
    let ck = root.join("ck.fmck");
    train(&cfg, &tr).unwrap().checkpoint.save(&ck).unwrap();

    let mut other = cfg.data.synth.clone();
    other.classes = 3;
    other.class_priors = vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]];
    let (ds3, _) = generate(&other).unwrap();
    let data = root.join("d3");
    fs::create_dir_all(&data).unwrap();
    data::save(&ds3, &data.join("test.fmds")).unwrap();
    let out = fairmoe(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--baseline", p(&ck)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn reloaded_checkpoint_reproduces_evaluation_exactly() {
    let cfg = small_config();
    let (ds, _) = generate(&cfg.data.synth).unwrap();
    let (tr, te) = split(&ds, 0.8, 0).unwrap();
    let outcome = train(&cfg, &tr).unwrap();
    let original = evaluate(&outcome.model, &outcome.stats, &te, RouteMode::Argmax, 0, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.fmck");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, outcome.checkpoint);
    let again = evaluate(&loaded.model().unwrap(), &loaded.stats, &te, RouteMode::Argmax, 0, None).unwrap();
    assert_eq!(again.report, original.report);
    assert_eq!(again.log, original.log);
    assert_eq!(again.routing, original.routing);
}

#[test]
fn single_group_without_mi_loss_decreases_for_five_epochs() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.w_mi = 0.0;
    cfg.train.epochs = 5;
    cfg.model.experts = 1;
    let (mut ds, _) = generate(&cfg.data.synth).unwrap();
    ds.samples.retain(|s| s.group == 0);
    ds.groups = 1;
    let outcome = train(&cfg, &ds).unwrap();
    let totals: Vec<f64> = outcome.log.iter().map(|r| r.total).collect();
    assert_eq!(totals.len(), 5);
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {totals:?}");
    }
    assert!(outcome.log.iter().all(|r| r.total == r.ce));
}

#[test]
fn perfect_classifier_has_zero_gaps() {
    let (ds, _) = generate(&SynthConfig { samples: 500, ..SynthConfig::default() }).unwrap();
    let log = PredictionLog::new(
        ds.samples
            .iter()
            .map(|s| Prediction { sample_id: s.id, truth: s.label, predicted: s.label, group: s.group })
            .collect(),
    )
    .unwrap();
    let report = FairnessReport::assemble(&log, ds.classes, ds.groups, None).unwrap();
    assert_eq!((report.gaps.eopp0, report.gaps.eopp1, report.gaps.eodd), (0.0, 0.0, 0.0));
    assert_eq!(report.accuracy, 1.0);
}
