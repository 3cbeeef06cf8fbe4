use std::fs;
use std::path::Path;
use std::process::Command;

use mtl_cli::*;
use mtl_core::data::Split;
use mtl_core::metrics::{accuracy, PredictionRecord};
use mtl_core::model::argmax;
use mtl_core::synth::{SynthConfig, TASK_A, TASK_B};
use mtl_core::{checkpoint, data};

fn synth_config(dir: &Path, seed: u64) -> RunConfig {
    let cfg = SynthConfig {
        seed,
        n_train: 64,
        n_dev: 24,
        n_test: 16,
        n_unlabelled: 16,
        ..Default::default()
    };
    let path = cmd_synth(&cfg, dir).unwrap();
    let mut run = RunConfig::load(&path).unwrap();
    run.train.d_hidden = 8;
    run.train.d_emb = 8;
    run.train.d_label = 8;
    run.train.ltn_hidden = 8;
    run.train.batch_size = 16;
    run.train.learning_rate = 0.01;
    run.train.pretrain_epochs = 2;
    run.train.ltn_epochs = 2;
    run.train.semi_epochs = 1;
    run.train.max_epochs = 2;
    run
}

fn with_ltn(mut run: RunConfig) -> RunConfig {
    run.train.use_ltn = true;
    run.train.use_semi = true;
    run.train.pool_source = mtl_core::training::PoolSource::Both;
    run
}

#[test]
fn train_writes_three_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = with_ltn(synth_config(dir.path(), 1));
    let (_, a) = cmd_train(&run, &dir.path().join("a")).unwrap();
    let (_, b) = cmd_train(&run, &dir.path().join("b")).unwrap();
    for p in [&a.checkpoint, &a.history, &a.report] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert_eq!(fs::read(&a.history).unwrap(), fs::read(&b.history).unwrap());
    assert_eq!(
        fs::read(&a.checkpoint).unwrap(),
        fs::read(&b.checkpoint).unwrap()
    );
}

#[test]
fn eval_matches_an_independent_accuracy_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth_config(dir.path(), 2);
    let (_, art) = cmd_train(&run, &dir.path().join("out")).unwrap();
    let data_path = &run.tasks[0].data;
    let report = cmd_eval(&art.checkpoint, data_path, None, Some(Split::Test), false).unwrap();
    assert_eq!(
        report,
        cmd_eval(&art.checkpoint, data_path, None, Some(Split::Test), false).unwrap()
    );

    let model = checkpoint::load(&art.checkpoint).unwrap();
    let spec = model.layout.tasks.main().clone();
    let test = data::split_of(&data::load_dataset(data_path, &spec).unwrap(), Split::Test);
    let enc = data::encode_examples(&test, &spec, &model.vocab, 60).unwrap();
    let probs = model
        .layout
        .predict(&model.store, &enc, 0, Default::default(), 5)
        .unwrap();
    let records: Vec<PredictionRecord> = enc
        .iter()
        .zip(&probs)
        .map(|(e, p)| PredictionRecord::new(e.label.unwrap(), argmax(p)))
        .collect();
    let correct = records.iter().filter(|r| r.gold == r.predicted).count();
    assert_eq!(report.value, correct as f64 / records.len() as f64);
    assert_eq!(report.value, accuracy(&records).unwrap());
    assert_eq!(report.n_instances, 16);
}

#[test]
fn ltn_only_commands_reject_plain_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth_config(dir.path(), 3);
    let (_, art) = cmd_train(&run, &dir.path().join("out")).unwrap();
    let err = cmd_eval(&art.checkpoint, &run.tasks[0].data, None, None, true).unwrap_err();
    assert!(err.to_string().contains("--use-ltn"), "{err}");
    assert!(cmd_relabel(&art.checkpoint, &run.tasks[1].data, Some(TASK_B)).is_err());
}

#[test]
fn relabel_emits_one_distribution_per_pool_example() {
    let dir = tempfile::tempdir().unwrap();
    let run = with_ltn(synth_config(dir.path(), 4));
    let (_, art) = cmd_train(&run, &dir.path().join("out")).unwrap();
    let labels = cmd_relabel(&art.checkpoint, &run.tasks[1].data, Some(TASK_B)).unwrap();
    assert_eq!(labels.len(), 64 + 24 + 16 + 16);
    for pl in &labels {
        assert_eq!(pl.z.len(), 3);
        assert!(pl.z.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((pl.z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(
        labels,
        cmd_relabel(&art.checkpoint, &run.tasks[1].data, Some(TASK_B)).unwrap()
    );
    let path = dir.path().join("pl.jsonl");
    write_pseudo_labels(&path, &labels).unwrap();
    assert_eq!(
        fs::read_to_string(&path).unwrap().lines().count(),
        labels.len()
    );
}

#[test]
fn export_labels_covers_every_label_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = synth_config(dir.path(), 5);
    let (_, art) = cmd_train(&run, &dir.path().join("lel")).unwrap();
    let rows = cmd_export_labels(&art.checkpoint).unwrap();
    let names: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| (r.task.as_str(), r.label.as_str()))
        .collect();
    assert_eq!(
        names,
        [
            (TASK_A, "pos"),
            (TASK_A, "neg"),
            (TASK_A, "neu"),
            (TASK_B, "favor"),
            (TASK_B, "against"),
            (TASK_B, "neither")
        ]
    );
    let path = dir.path().join("labels.csv");
    write_label_rows(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("task,label,e0,"));
    assert!(text.lines().next().unwrap().ends_with(",pc1,pc2"));

    run.train.use_lel = false;
    let (_, art) = cmd_train(&run, &dir.path().join("heads")).unwrap();
    assert!(cmd_export_labels(&art.checkpoint).is_err());
}

#[test]
fn ablation_writes_a_summary_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = synth_config(dir.path(), 6);
    run.train.max_epochs = 1;
    run.train.pretrain_epochs = 1;
    run.train.ltn_epochs = 1;
    let variants: Vec<Variant> = ablation_grid().into_iter().step_by(7).collect();
    let rows = cmd_ablate(&run, &variants, &dir.path().join("ab")).unwrap();
    assert_eq!(rows.len(), variants.len());
    let summary = fs::read_to_string(dir.path().join("ab").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 1 + variants.len());
    assert!(format_ablation(&rows).lines().count() == 1 + variants.len());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 9,
        n_train: 20,
        n_dev: 5,
        n_test: 5,
        ..Default::default()
    };
    cmd_synth(&cfg, &dir.path().join("x")).unwrap();
    cmd_synth(&cfg, &dir.path().join("y")).unwrap();
    for f in [
        format!("{TASK_A}.jsonl"),
        format!("{TASK_B}.jsonl"),
        CONFIG_FILE.to_string(),
    ] {
        assert_eq!(
            fs::read(dir.path().join("x").join(&f)).unwrap(),
            fs::read(dir.path().join("y").join(&f)).unwrap()
        );
    }
}

fn mtl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtl"))
}

#[test]
fn binary_reports_missing_data_files_by_path() {
    let dir = tempfile::tempdir().unwrap();
    mtl()
        .args([
            "synth",
            "--n-train",
            "20",
            "--n-dev",
            "5",
            "--n-test",
            "5",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    let path = dir.path().join(CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("stance.jsonl", "absent.jsonl");
    fs::write(&path, text).unwrap();
    let out = mtl()
        .arg("train")
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("absent.jsonl"), "{stderr}");
}

#[test]
fn binary_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth_config(dir.path(), 7);
    let mut text = toml::to_string(&run).unwrap();
    text = text.replace(&format!("{}/", dir.path().display()), "");
    let path = dir.path().join("small.toml");
    fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("cli_out");
    let status = mtl()
        .args(["train", "--seed", "3", "--use-ltn", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let history = fs::read_to_string(out_dir.join(HISTORY_FILE)).unwrap();
    assert!(history.lines().any(|l| l.contains(",ltn,")));
    let eval = mtl()
        .args(["eval", "--use-ltn", "--split", "dev", "--checkpoint"])
        .arg(out_dir.join(CHECKPOINT_FILE))
        .arg("--data")
        .arg(dir.path().join(format!("{TASK_A}.jsonl")))
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["n_instances"], 24);
}
