//! Phased training: multi-task pretraining, transfer-network training and
//! semi-supervised continuation with pseudo-labels.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, OptimizerState, ParamStore, Tensor};
use crate::data::{
    build_vocab, downsample, encode_examples, split_of, strip_labels, Batch, BatchCursor,
    EncodedExample, Example, Split, TaskAlternator, TaskSet, DEFAULT_MAX_LEN,
};
use crate::encoder::InitScheme;
use crate::error::{Error, Result};
use crate::heads::{mtl_loss, LabelMode};
use crate::metrics::{report, MetricKind, MetricReport, PredictionRecord};
use crate::model::{argmax, ModelConfig, ModelLayout, ModelParams, Predictor};
use crate::rng::{derive_seed, streams};
use crate::transfer::{ltn_supervised_loss, pseudo_label_loss, LtnFeatures};

/// Where the pseudo-labelling pool comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// Training inputs of the auxiliary tasks, labels removed.
    #[default]
    Auxiliary,
    /// Training-split examples that carry no label, from any task.
    Unlabelled,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub main_task: String,
    pub use_lel: bool,
    pub label_mode: LabelMode,
    pub use_ltn: bool,
    pub use_semi: bool,
    pub use_diversity_feats: bool,
    pub use_main_pred_feats: bool,
    pub ltn_backprop_to_encoder: bool,
    /// Stop training auxiliary tasks once the transfer network is attached.
    pub freeze_aux_after_pretrain: bool,
    /// Predictions used for model selection and reports.
    pub predictor: Predictor,
    pub d_hidden: usize,
    pub d_emb: usize,
    pub d_label: usize,
    pub ltn_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub ltn_epochs: usize,
    pub semi_epochs: usize,
    pub max_epochs: usize,
    pub pseudo_weight: f64,
    pub pool_source: PoolSource,
    /// Cap on the unlabelled pool used for pseudo-labels.
    pub pool_size: Option<usize>,
    pub max_len: usize,
    pub min_freq: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            main_task: String::new(),
            use_lel: true,
            label_mode: LabelMode::Project,
            use_ltn: false,
            use_semi: false,
            use_diversity_feats: false,
            use_main_pred_feats: false,
            ltn_backprop_to_encoder: false,
            freeze_aux_after_pretrain: false,
            predictor: Predictor::Main,
            d_hidden: 100,
            d_emb: 100,
            d_label: 100,
            ltn_hidden: 100,
            learning_rate: 0.001,
            batch_size: 128,
            patience: 3,
            pretrain_epochs: 10,
            ltn_epochs: 15,
            semi_epochs: 10,
            max_epochs: 30,
            pseudo_weight: 1.0,
            pool_source: PoolSource::Auxiliary,
            pool_size: None,
            max_len: DEFAULT_MAX_LEN,
            min_freq: 1,
            init_scale: 0.1,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks setting combinations that do not depend on data.
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.use_semi && !self.use_ltn {
            return fail("use_semi requires use_ltn");
        }
        if self.use_ltn && num_tasks < 2 {
            return fail("use_ltn requires at least two tasks");
        }
        if (self.use_diversity_feats
            || self.use_main_pred_feats
            || self.predictor == Predictor::Ltn)
            && !self.use_ltn
        {
            return fail("transfer-network features and predictor require use_ltn");
        }
        if self.batch_size == 0
            || self.d_hidden == 0
            || self.d_emb == 0
            || self.d_label == 0
            || self.ltn_hidden == 0
        {
            return fail("widths and batch size must be positive");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if self.patience == 0 {
            return fail("patience must be positive");
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.pseudo_weight.is_nan()
            || self.pseudo_weight < 0.0
            || self.init_scale.is_nan()
            || self.init_scale < 0.0
        {
            return fail(
                "learning_rate must be positive; pseudo_weight and init_scale non-negative",
            );
        }
        let first_phase = if self.use_ltn {
            self.pretrain_epochs
        } else {
            self.max_epochs
        };
        if first_phase == 0
            || (self.use_ltn && self.ltn_epochs == 0)
            || (self.use_semi && self.semi_epochs == 0)
        {
            return fail("every enabled phase needs at least one epoch");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            d_label: self.d_label,
            ltn_hidden: self.ltn_hidden,
            max_len: self.max_len,
            use_lel: self.use_lel,
            label_mode: self.label_mode,
            ltn_features: LtnFeatures {
                diversity: self.use_diversity_feats,
                main_predictions: self.use_main_pred_feats,
            },
            ltn_backprop_to_encoder: self.ltn_backprop_to_encoder,
            init: InitScheme {
                scale: self.init_scale,
                forget_bias: self.forget_bias,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mtl,
    Ltn,
    Semi,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Mtl => "mtl",
            Phase::Ltn => "ltn",
            Phase::Semi => "semi",
        })
    }
}

/// Loss components of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub task: usize,
    /// Weighted cross-entropy of the step's task.
    pub task_loss: f64,
    pub ltn_loss: Option<f64>,
    /// Pseudo-label loss after weighting.
    pub pseudo_loss: Option<f64>,
    /// The scalar that was differentiated.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean weighted cross-entropy per task over the epoch's steps
    /// (`None` for tasks not trained this epoch).
    pub task_losses: Vec<Option<f64>>,
    pub ltn_loss: Option<f64>,
    pub pseudo_loss: Option<f64>,
    pub dev_metric: f64,
    pub ltn_dev_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub task_names: Vec<String>,
    pub metric: Option<MetricKind>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLog>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn dev_metrics(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.dev_metric).collect()
    }

    pub fn phase_epochs(&self, phase: Phase) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|e| e.phase == phase).collect()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch
            .and_then(|b| self.epochs.iter().find(|e| e.epoch == b))
    }

    /// Per-epoch CSV. Wall-clock time is left out so that reruns produce
    /// identical files.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "phase".to_string()];
        header.extend(self.task_names.iter().map(|t| format!("loss_{t}")));
        header
            .extend(["ltn_loss", "pseudo_loss", "dev_metric", "ltn_dev_metric"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.phase.to_string()];
            row.extend(e.task_losses.iter().map(|v| opt(*v)));
            row.push(opt(e.ltn_loss));
            row.push(opt(e.pseudo_loss));
            row.push(e.dev_metric.to_string());
            row.push(opt(e.ltn_dev_metric));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("history csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Early-stopping verdict after the last recorded epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// 1-based position of the best value; ties go to the earliest.
    pub best: usize,
}

pub fn early_stop(metrics: &[f64], kind: MetricKind, patience: usize) -> EarlyStop {
    let mut best = 0;
    for (i, &m) in metrics.iter().enumerate().skip(1) {
        if kind.improves(m, metrics[best]) {
            best = i;
        }
    }
    let since = metrics.len().saturating_sub(best + 1);
    EarlyStop {
        stop: !metrics.is_empty() && since >= patience,
        best: best + 1,
    }
}

/// Loss terms of one step, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub task: Tensor,
    pub ltn: Option<Tensor>,
    pub pseudo: Option<Tensor>,
    pub total: Tensor,
}

/// Pool batch and its flattened pseudo-label targets.
pub struct PseudoTarget<'a> {
    pub batch: &'a Batch,
    pub z: &'a [f64],
    pub weight: f64,
}

/// Builds the differentiated loss of one step:
/// `lambda * CE` on the step's task, plus the transfer loss on main-task
/// steps when `with_ltn`, plus the weighted pseudo-label loss when a pool
/// batch is given.
pub fn step_loss(
    g: &mut Graph,
    layout: &ModelLayout,
    store: &ParamStore,
    batch: &Batch,
    task: usize,
    with_ltn: bool,
    pseudo: Option<PseudoTarget<'_>>,
) -> Result<StepLoss> {
    let gold = batch
        .label_ids
        .as_ref()
        .ok_or_else(|| Error::Data("training batch has unlabelled examples".into()))?;
    let spec = layout.tasks.get(task);
    let h = layout.encode(g, store, batch)?;
    let p = layout.task_probs(g, store, h, task)?;
    let ce = g.cross_entropy(p, gold)?;
    let task_loss = mtl_loss(g, &[ce], &[spec.loss_weight])?;
    let mut total = task_loss;
    let mut ltn = None;
    if with_ltn && spec.is_main {
        let z = layout.ltn_probs(g, store, h, batch, Some(p))?;
        let l = ltn_supervised_loss(g, z, gold)?;
        total = g.add(total, l)?;
        ltn = Some(l);
    }
    let mut pseudo_loss = None;
    if let Some(target) = pseudo {
        let hp = layout.encode(g, store, target.batch)?;
        let pp = layout.task_probs(g, store, hp, layout.tasks.main_index())?;
        let l = pseudo_label_loss(g, pp, target.z)?;
        let l = g.scale(l, target.weight);
        total = g.add(total, l)?;
        pseudo_loss = Some(l);
    }
    Ok(StepLoss {
        task: task_loss,
        ltn,
        pseudo: pseudo_loss,
        total,
    })
}

/// Metric of `predictor` on labelled encoded examples of `task`.
pub fn evaluate_encoded(
    layout: &ModelLayout,
    store: &ParamStore,
    encoded: &[EncodedExample],
    task: usize,
    predictor: Predictor,
    batch_size: usize,
) -> Result<MetricReport> {
    if encoded.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let spec = layout.tasks.get(task);
    let probs = layout.predict(store, encoded, task, predictor, batch_size)?;
    let records = encoded
        .iter()
        .zip(&probs)
        .map(|(ex, p)| {
            let gold = ex
                .label
                .ok_or_else(|| Error::Data(format!("example {} has no gold label", ex.id)))?;
            Ok(PredictionRecord {
                gold,
                predicted: argmax(p),
                group: ex.group.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report(&spec.name, spec.metric, &records, &spec.labels)
}

/// Checks that `z` is a probability distribution (finite, non-negative,
/// summing to 1 within 1e-9).
pub fn check_distribution(z: &[f64]) -> std::result::Result<(), String> {
    if z.is_empty() || z.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("not a distribution: {z:?}"));
    }
    let sum: f64 = z.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Metric of `predictor` on raw examples of the named task.
pub fn evaluate(
    model: &ModelParams,
    examples: &[Example],
    task: &str,
    predictor: Predictor,
    batch_size: usize,
) -> Result<MetricReport> {
    let index = model.layout.tasks.index_of(task)?;
    let spec = model.layout.tasks.get(index);
    let encoded = encode_examples(examples, spec, &model.vocab, model.layout.config.max_len)?;
    evaluate_encoded(
        &model.layout,
        &model.store,
        &encoded,
        index,
        predictor,
        batch_size.max(1),
    )
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub history: TrainHistory,
    /// Main-task dev report of the returned model.
    pub dev_report: MetricReport,
}

/// Trains on `examples[i]` (all splits of task `i`, registration order).
pub fn train(
    config: &TrainConfig,
    tasks: TaskSet,
    examples: &[Vec<Example>],
) -> Result<TrainOutcome> {
    config.validate(tasks.len())?;
    if tasks.main().name != config.main_task {
        return Err(Error::Config(format!(
            "main_task {:?} does not match the task set's main task {:?}",
            config.main_task,
            tasks.main().name
        )));
    }
    if examples.len() != tasks.len() {
        return Err(Error::Data(format!(
            "{} datasets for {} tasks",
            examples.len(),
            tasks.len()
        )));
    }
    let main = tasks.main_index();
    let seed = config.seed;

    let mut train_sets = Vec::with_capacity(tasks.len());
    let mut unlabelled = Vec::with_capacity(tasks.len());
    for (i, spec) in tasks.iter().enumerate() {
        let (mut tr, rest): (Vec<Example>, Vec<Example>) = split_of(&examples[i], Split::Train)
            .into_iter()
            .partition(|e| e.label.is_some());
        unlabelled.push(rest);
        if let Some(n) = spec.downsample_to {
            tr = downsample(
                &tr,
                n,
                derive_seed(seed, streams::DOWNSAMPLE + 16 * i as u64),
            );
        }
        if tr.is_empty() {
            return Err(Error::Data(format!(
                "task {:?} has no training examples",
                spec.name
            )));
        }
        train_sets.push(tr);
    }
    let dev = split_of(&examples[main], Split::Dev);
    if dev.is_empty() {
        return Err(Error::Data(format!(
            "main task {:?} has no dev examples",
            tasks.main().name
        )));
    }

    let vocab = build_vocab(
        train_sets.iter().chain(&unlabelled).map(Vec::as_slice),
        config.min_freq,
    );
    let mut model =
        ModelParams::init(config.model_config(vocab.len()), tasks.clone(), vocab, seed)?;
    let max_len = config.max_len;
    let dev_enc = encode_examples(&dev, tasks.main(), &model.vocab, max_len)?;
    let mut cursors = Vec::with_capacity(tasks.len());
    for (i, spec) in tasks.iter().enumerate() {
        let enc = encode_examples(&train_sets[i], spec, &model.vocab, max_len)?;
        cursors.push(BatchCursor::new(
            &spec.name,
            enc,
            config.batch_size,
            derive_seed(seed, streams::SHUFFLE + 16 * i as u64),
        ));
    }
    let main_batches = cursors[main].batches_per_pass();

    let mut pool_cursor = if config.use_semi {
        let mut pool = Vec::new();
        for (i, spec) in tasks.iter().enumerate() {
            let mut sources = Vec::new();
            if config.pool_source != PoolSource::Unlabelled && !spec.is_main {
                sources.extend(strip_labels(&train_sets[i]));
            }
            if config.pool_source != PoolSource::Auxiliary {
                sources.extend(unlabelled[i].iter().cloned());
            }
            let mut enc = encode_examples(&sources, spec, &model.vocab, max_len)?;
            for ex in &mut enc {
                ex.id = format!("{}/{}", spec.name, ex.id);
            }
            pool.extend(enc);
        }
        if pool.is_empty() {
            return Err(Error::Data("the pseudo-labelling pool is empty".into()));
        }
        if let Some(n) = config.pool_size {
            if n < pool.len() {
                let keep = rand::seq::index::sample(
                    &mut crate::rng::seeded(seed, streams::POOL),
                    pool.len(),
                    n,
                );
                let mut keep = keep.into_vec();
                keep.sort_unstable();
                pool = keep.into_iter().map(|k| pool[k].clone()).collect();
            }
        }
        Some(BatchCursor::new(
            &tasks.main().name,
            pool,
            config.batch_size,
            derive_seed(seed, streams::POOL),
        ))
    } else {
        None
    };

    let mut phases = vec![(
        Phase::Mtl,
        if config.use_ltn {
            config.pretrain_epochs
        } else {
            config.max_epochs
        },
    )];
    if config.use_ltn {
        phases.push((Phase::Ltn, config.ltn_epochs));
    }
    if config.use_semi {
        phases.push((Phase::Semi, config.semi_epochs));
    }

    let metric = tasks.main().metric;
    let mut history = TrainHistory {
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        metric: Some(metric),
        ..Default::default()
    };
    let mut optimizer = OptimizerState::rmsprop(config.learning_rate);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut epoch = 0;

    for (phase, budget) in phases {
        if phase == Phase::Ltn {
            model.attach_ltn(seed)?;
        }
        let with_ltn = phase >= Phase::Ltn;
        let trained: Vec<usize> = if with_ltn && config.freeze_aux_after_pretrain {
            vec![main]
        } else {
            (0..tasks.len()).collect()
        };
        let mut alternator = TaskAlternator::new(trained, seed);
        let mut phase_metrics = Vec::new();
        for _ in 0..budget {
            epoch += 1;
            let started = Instant::now();
            let targets = match (&pool_cursor, phase) {
                (Some(pc), Phase::Semi) => {
                    let labels = model.layout.generate_pseudo_labels(
                        &model.store,
                        pc.encoded(),
                        config.batch_size,
                        epoch,
                    )?;
                    for pl in &labels {
                        check_distribution(&pl.z).map_err(|detail| Error::Numeric {
                            op: "pseudo-label",
                            detail: format!("{}: {detail}", pl.id),
                        })?;
                    }
                    Some(labels.into_iter().map(|pl| pl.z).collect::<Vec<_>>())
                }
                _ => None,
            };
            let mut sums = vec![(0.0, 0usize); tasks.len()];
            let (mut ltn_sum, mut pseudo_sum, mut main_steps) = (0.0, 0.0, 0usize);
            let mut step = 0;
            while main_steps < main_batches {
                let task = alternator.next().expect("alternator is endless");
                let batch = cursors[task].next_batch().expect("non-empty task").clone();
                let pool_batch = match (&targets, pool_cursor.as_mut()) {
                    (Some(_), Some(pc)) if task == main => pc.next_batch().cloned(),
                    _ => None,
                };
                let flat: Vec<f64> = match (&targets, &pool_batch) {
                    (Some(t), Some(pb)) => pb
                        .example_indices
                        .iter()
                        .flat_map(|&i| t[i].iter().copied())
                        .collect(),
                    _ => Vec::new(),
                };
                let pseudo = pool_batch.as_ref().map(|pb| PseudoTarget {
                    batch: pb,
                    z: &flat,
                    weight: config.pseudo_weight,
                });
                let mut g = Graph::new();
                let loss = step_loss(
                    &mut g,
                    &model.layout,
                    &model.store,
                    &batch,
                    task,
                    with_ltn,
                    pseudo,
                )?;
                g.backward(loss.total)?;
                let mut grads = Gradients::zeros(&model.store);
                g.accumulate_param_grads(&mut grads);
                if !grads.all_finite() {
                    return Err(Error::Numeric {
                        op: "train",
                        detail: format!("non-finite gradient at epoch {epoch}, step {step}"),
                    });
                }
                optimizer.step(&mut model.store, &grads)?;

                step += 1;
                let log = StepLog {
                    epoch,
                    step,
                    task,
                    task_loss: g.scalar(loss.task),
                    ltn_loss: loss.ltn.map(|t| g.scalar(t)),
                    pseudo_loss: loss.pseudo.map(|t| g.scalar(t)),
                    total: g.scalar(loss.total),
                };
                sums[task].0 += log.task_loss;
                sums[task].1 += 1;
                ltn_sum += log.ltn_loss.unwrap_or(0.0);
                pseudo_sum += log.pseudo_loss.unwrap_or(0.0);
                if task == main {
                    main_steps += 1;
                }
                history.steps.push(log);
            }

            // before the transfer network exists only the main model can predict
            let predictor = if model.has_ltn() {
                config.predictor
            } else {
                Predictor::Main
            };
            let dev_metric = evaluate_encoded(
                &model.layout,
                &model.store,
                &dev_enc,
                main,
                predictor,
                config.batch_size,
            )?
            .value;
            let ltn_dev_metric = if model.has_ltn() {
                Some(
                    evaluate_encoded(
                        &model.layout,
                        &model.store,
                        &dev_enc,
                        main,
                        Predictor::Ltn,
                        config.batch_size,
                    )?
                    .value,
                )
            } else {
                None
            };
            let mean = |s: f64| s / main_steps as f64;
            history.epochs.push(EpochRecord {
                epoch,
                phase,
                task_losses: sums
                    .iter()
                    .map(|&(s, n)| (n > 0).then(|| s / n as f64))
                    .collect(),
                ltn_loss: with_ltn.then(|| mean(ltn_sum)),
                pseudo_loss: targets.as_ref().map(|_| mean(pseudo_sum)),
                dev_metric,
                ltn_dev_metric,
                seconds: started.elapsed().as_secs_f64(),
            });

            let eligible = !config.use_ltn || model.has_ltn();
            if eligible
                && best
                    .as_ref()
                    .is_none_or(|(_, m, _)| metric.improves(dev_metric, *m))
            {
                best = Some((epoch, dev_metric, model.clone()));
            }
            phase_metrics.push(dev_metric);
            if early_stop(&phase_metrics, metric, config.patience).stop {
                break;
            }
        }
    }

    let (best_epoch, _, model) = best.expect("at least one eligible epoch");
    history.best_epoch = Some(best_epoch);
    let dev_report = evaluate_encoded(
        &model.layout,
        &model.store,
        &dev_enc,
        main,
        config.predictor,
        config.batch_size,
    )?;
    Ok(TrainOutcome {
        model,
        history,
        dev_report,
    })
}
