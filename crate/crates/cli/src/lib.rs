//! Command implementations behind the `mtl` binary.
//!
//! Every command is a plain function so the integration tests can drive it
//! without spawning processes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mtl_core::checkpoint;
use mtl_core::data::{
    encode_examples, load_dataset, split_of, strip_labels, Example, Split, TaskDef, TaskSet,
};
use mtl_core::metrics::{MetricKind, MetricReport};
use mtl_core::model::{ModelParams, Predictor};
use mtl_core::parallel::map_collect;
use mtl_core::pca::pca;
use mtl_core::synth::{self, SynthConfig};
use mtl_core::training::{evaluate, train, TrainConfig, TrainOutcome};
use mtl_core::transfer::PseudoLabel;

pub const CHECKPOINT_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const PSEUDO_FILE: &str = "pseudo_labels.jsonl";
pub const LABELS_FILE: &str = "label_embeddings.csv";
pub const SUMMARY_FILE: &str = "ablation.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// A task entry of a run config: the task definition plus its data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub labels: Vec<String>,
    pub metric: MetricKind,
    #[serde(default = "one")]
    pub loss_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample_to: Option<usize>,
    /// JSON-lines file; relative paths are resolved against the config file.
    pub data: PathBuf,
}

fn one() -> f64 {
    1.0
}

impl TaskEntry {
    pub fn def(&self) -> TaskDef {
        TaskDef {
            name: self.name.clone(),
            labels: self.labels.clone(),
            metric: self.metric,
            loss_weight: self.loss_weight,
            downsample_to: self.downsample_to,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub tasks: Vec<TaskEntry>,
    pub train: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`load`](Self::load) without validation, for callers that apply
    /// overrides first.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for t in &mut cfg.tasks {
            if t.data.is_relative() {
                t.data = base.join(&t.data);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn task_set(&self) -> Result<TaskSet> {
        Ok(TaskSet::new(
            self.tasks.iter().map(TaskEntry::def).collect(),
            &self.train.main_task,
        )?)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let tasks = self.task_set()?;
        self.train.validate(tasks.len())?;
        Ok(())
    }

    /// Loads every task's examples in registration order.
    pub fn load_data(&self) -> Result<(TaskSet, Vec<Vec<Example>>)> {
        let tasks = self.task_set()?;
        let data = tasks
            .iter()
            .zip(&self.tasks)
            .map(|(spec, entry)| load_dataset(&entry.data, spec).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok((tasks, data))
    }
}

/// Paths written by [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Trains and writes the checkpoint, history CSV and dev report to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(TrainOutcome, TrainArtifacts)> {
    cfg.validate()?;
    let (tasks, data) = cfg.load_data()?;
    let outcome = train(&cfg.train, tasks, &data)?;
    create_dir(out)?;
    let artifacts = TrainArtifacts {
        checkpoint: out.join(CHECKPOINT_FILE),
        history: out.join(HISTORY_FILE),
        report: out.join(REPORT_FILE),
    };
    checkpoint::save(&outcome.model, &artifacts.checkpoint)?;
    let file = File::create(&artifacts.history)
        .with_context(|| format!("cannot write {}", artifacts.history.display()))?;
    outcome.history.write_csv(BufWriter::new(file))?;
    write_json(&artifacts.report, &outcome.dev_report)?;
    Ok((outcome, artifacts))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Resolves an optional task name against the checkpoint, defaulting to the
/// main task.
fn task_index(model: &ModelParams, task: Option<&str>) -> Result<usize> {
    match task {
        Some(name) => Ok(model.layout.tasks.index_of(name)?),
        None => Ok(model.layout.tasks.main_index()),
    }
}

/// Evaluates a checkpoint on the labelled examples of `dataset`, optionally
/// restricted to one split.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    task: Option<&str>,
    split: Option<Split>,
    use_ltn: bool,
) -> Result<MetricReport> {
    let model = load_checkpoint(checkpoint)?;
    if use_ltn && !model.has_ltn() {
        bail!("--use-ltn needs a checkpoint trained with the label transfer network");
    }
    let index = task_index(&model, task)?;
    let spec = model.layout.tasks.get(index);
    let mut examples = load_dataset(dataset, spec)?;
    if let Some(split) = split {
        examples = split_of(&examples, split);
    }
    let predictor = if use_ltn {
        Predictor::Ltn
    } else {
        Predictor::Main
    };
    Ok(evaluate(&model, &examples, &spec.name, predictor, 128)?)
}

/// Transfer-network soft labels for every example in `pool`. The pool is
/// read as data of `task` (default: the main task); its labels are ignored.
pub fn cmd_relabel(checkpoint: &Path, pool: &Path, task: Option<&str>) -> Result<Vec<PseudoLabel>> {
    let model = load_checkpoint(checkpoint)?;
    if !model.has_ltn() {
        bail!("relabelling needs a checkpoint trained with the label transfer network");
    }
    let index = task_index(&model, task)?;
    let spec = model.layout.tasks.get(index);
    let examples = strip_labels(&load_dataset(pool, spec)?);
    let encoded = encode_examples(&examples, spec, &model.vocab, model.layout.config.max_len)?;
    Ok(model
        .layout
        .generate_pseudo_labels(&model.store, &encoded, 128, 0)?)
}

pub fn write_pseudo_labels(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for pl in labels {
        serde_json::to_writer(&mut w, pl)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the label-embedding export.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub task: String,
    pub label: String,
    pub embedding: Vec<f64>,
    pub pc: [f64; 2],
}

/// Joint label embeddings of a checkpoint with their top-2 principal
/// component coordinates, in label-row order.
pub fn cmd_export_labels(checkpoint: &Path) -> Result<Vec<LabelRow>> {
    let model = load_checkpoint(checkpoint)?;
    let Some(lel) = model.layout.label_matrix() else {
        bail!("checkpoint has no label embedding layer");
    };
    let param = model.store.get(lel.matrix);
    let rows: Vec<Vec<f64>> = param
        .values
        .chunks(param.shape.cols)
        .map(<[f64]>::to_vec)
        .collect();
    let projected = pca(&rows, 2)?;
    let mut out = Vec::with_capacity(rows.len());
    for spec in model.layout.tasks.iter() {
        for (label, r) in spec.labels.iter().zip(spec.label_rows.clone()) {
            out.push(LabelRow {
                task: spec.name.clone(),
                label: label.clone(),
                embedding: rows[r].clone(),
                pc: [projected.coords[r][0], projected.coords[r][1]],
            });
        }
    }
    Ok(out)
}

pub fn write_label_rows(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.embedding.len());
    let mut text = String::from("task,label");
    for j in 0..width {
        text.push_str(&format!(",e{j}"));
    }
    text.push_str(",pc1,pc2\n");
    for r in rows {
        text.push_str(&format!("{},{}", r.task, r.label));
        for v in &r.embedding {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{},{}\n", r.pc[0], r.pc[1]));
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Cosine similarity of two equal-length vectors (0 if either is zero).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Writes both synthetic tasks and a ready-to-run config into `out`.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let (a, b) = synth::generate(cfg)?;
    create_dir(out)?;
    let file_a = format!("{}.jsonl", synth::TASK_A);
    let file_b = format!("{}.jsonl", synth::TASK_B);
    synth::write_jsonl(out.join(&file_a), &a)?;
    synth::write_jsonl(out.join(&file_b), &b)?;
    let entry = |name: &str, labels: &[&str], data: String| TaskEntry {
        name: name.into(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
        metric: MetricKind::Acc,
        loss_weight: 1.0,
        downsample_to: None,
        data: PathBuf::from(data),
    };
    let run = RunConfig {
        output_dir: default_output(),
        tasks: vec![
            entry(synth::TASK_A, &synth::LABELS_A, file_a),
            entry(synth::TASK_B, &synth::LABELS_B, file_b),
        ],
        train: TrainConfig {
            main_task: synth::TASK_A.into(),
            seed: cfg.seed,
            ..Default::default()
        },
    };
    let path = out.join(CONFIG_FILE);
    fs::write(&path, toml::to_string(&run)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_lel: bool,
    pub use_ltn: bool,
    pub use_semi: bool,
    pub diversity: bool,
    pub main_preds: bool,
    pub predictor: Predictor,
}

impl Variant {
    pub fn name(&self) -> String {
        let mut s = String::from("mtl");
        if self.use_lel {
            s.push_str("+lel");
        }
        if self.use_ltn {
            s.push_str("+ltn");
        }
        if self.main_preds {
            s.push_str("+main_preds");
        }
        if self.diversity {
            s.push_str("+diversity");
        }
        if self.use_semi {
            s.push_str("+semi");
        }
        if self.use_ltn {
            s.push_str(match self.predictor {
                Predictor::Main => ",main",
                Predictor::Ltn => ",ltn",
            });
        }
        s
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_lel: self.use_lel,
            use_ltn: self.use_ltn,
            use_semi: self.use_semi,
            use_diversity_feats: self.diversity,
            use_main_pred_feats: self.main_preds,
            predictor: self.predictor,
            ..base.clone()
        }
    }
}

/// Every valid combination of the ablation switches. Transfer-network
/// options only vary when the network is on.
pub fn ablation_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for use_lel in [false, true] {
        out.push(Variant {
            use_lel,
            use_ltn: false,
            use_semi: false,
            diversity: false,
            main_preds: false,
            predictor: Predictor::Main,
        });
        for main_preds in [false, true] {
            for diversity in [false, true] {
                for use_semi in [false, true] {
                    for predictor in [Predictor::Main, Predictor::Ltn] {
                        out.push(Variant {
                            use_lel,
                            use_ltn: true,
                            use_semi,
                            diversity,
                            main_preds,
                            predictor,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub dev_metric: f64,
    pub metric_name: String,
}

/// Trains every variant (in parallel) and writes one history per variant
/// plus a summary table.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (tasks, data) = cfg.load_data()?;
    for v in variants {
        v.apply(&cfg.train).validate(tasks.len())?;
    }
    create_dir(out)?;
    let runs = map_collect(variants, |v| -> Result<AblationRow> {
        let outcome = train(&v.apply(&cfg.train), tasks.clone(), &data)?;
        let dir = out.join(v.name());
        create_dir(&dir)?;
        let path = dir.join(HISTORY_FILE);
        let file =
            File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        outcome.history.write_csv(BufWriter::new(file))?;
        Ok(AblationRow {
            variant: v.clone(),
            best_epoch: outcome.history.best_epoch.unwrap_or(0),
            dev_metric: outcome.dev_report.value,
            metric_name: outcome.dev_report.metric_name,
        })
    });
    let rows = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut text =
        String::from("variant,lel,ltn,semi,diversity,main_preds,predictor,best_epoch,metric,dev\n");
    for r in &rows {
        let v = &r.variant;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            v.name(),
            v.use_lel,
            v.use_ltn,
            v.use_semi,
            v.diversity,
            v.main_preds,
            match v.predictor {
                Predictor::Main => "main",
                Predictor::Ltn => "ltn",
            },
            r.best_epoch,
            r.metric_name,
            r.dev_metric
        ));
    }
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(rows)
}

/// Fixed-width table of ablation results for the terminal.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.name().len())
        .max()
        .unwrap_or(7)
        .max(7);
    let mut s = format!("{:<width$}  {:>5}  {:>10}\n", "variant", "best", "dev");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>5}  {:>10.4}\n",
            r.variant.name(),
            r.best_epoch,
            r.dev_metric
        ));
    }
    s
}
