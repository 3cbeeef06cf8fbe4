//! Task evaluation metrics and the main-vs-transfer complementarity analysis.
//!
//! Conventions: precision, recall and F1 are 0 whenever their denominator is
//! 0; topic-averaged metrics only average over the classes that occur in a
//! topic's gold labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Macro-averaged recall, averaged across topics.
    RhoPn,
    /// Macro-averaged mean absolute error over ordinal labels, averaged across topics.
    MaeM,
    /// Macro-averaged F1 over all classes.
    F1M,
    /// Mean F1 of the favor and against classes.
    F1Fa,
    Acc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::RhoPn => "rho_pn",
            MetricKind::MaeM => "mae_m",
            MetricKind::F1M => "f1_m",
            MetricKind::F1Fa => "f1_fa",
            MetricKind::Acc => "acc",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::MaeM)
    }

    /// True when `candidate` is strictly better than `incumbent`.
    pub fn improves(self, candidate: f64, incumbent: f64) -> bool {
        if self.higher_is_better() {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub gold: usize,
    pub predicted: usize,
    pub group: Option<String>,
}

impl PredictionRecord {
    pub fn new(gold: usize, predicted: usize) -> Self {
        Self {
            gold,
            predicted,
            group: None,
        }
    }

    pub fn grouped(gold: usize, predicted: usize, group: impl Into<String>) -> Self {
        Self {
            gold,
            predicted,
            group: Some(group.into()),
        }
    }
}

fn non_empty(records: &[PredictionRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Metric(format!("{what} of an empty prediction set")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records, "accuracy")?;
    let correct = records.iter().filter(|r| r.gold == r.predicted).count();
    Ok(ratio(correct, records.len()))
}

/// F1 of one class from its confusion counts.
fn class_f1(records: &[PredictionRecord], class: usize) -> f64 {
    let tp = records
        .iter()
        .filter(|r| r.gold == class && r.predicted == class)
        .count();
    let gold = records.iter().filter(|r| r.gold == class).count();
    let pred = records.iter().filter(|r| r.predicted == class).count();
    let (p, r) = (ratio(tp, pred), ratio(tp, gold));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-class F1 over `0..num_classes`.
pub fn macro_f1(records: &[PredictionRecord], num_classes: usize) -> Result<f64> {
    non_empty(records, "macro F1")?;
    if num_classes == 0 {
        return Err(Error::Metric("macro F1 needs at least one class".into()));
    }
    Ok((0..num_classes).map(|c| class_f1(records, c)).sum::<f64>() / num_classes as f64)
}

/// Indices of the favor and against classes of a stance label set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FavorAgainst {
    pub favor: usize,
    pub against: usize,
}

impl FavorAgainst {
    pub fn from_labels(labels: &[String]) -> Result<Self> {
        let find = |names: &[&str]| {
            labels
                .iter()
                .position(|l| names.contains(&l.to_lowercase().as_str()))
        };
        match (find(&["favor", "favour"]), find(&["against"])) {
            (Some(favor), Some(against)) => Ok(Self { favor, against }),
            _ => Err(Error::Config(format!(
                "f1_fa needs labels named favor and against, got {labels:?}"
            ))),
        }
    }
}

pub fn f1_favor_against(records: &[PredictionRecord], classes: FavorAgainst) -> Result<f64> {
    non_empty(records, "F1 favor/against")?;
    Ok((class_f1(records, classes.favor) + class_f1(records, classes.against)) / 2.0)
}

fn by_group(records: &[PredictionRecord]) -> Result<BTreeMap<&str, Vec<&PredictionRecord>>> {
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        let g = r.group.as_deref().ok_or_else(|| {
            Error::Metric("topic-averaged metric needs a group on every record".into())
        })?;
        groups.entry(g).or_default().push(r);
    }
    Ok(groups)
}

fn gold_classes(records: &[&PredictionRecord]) -> Vec<usize> {
    let mut classes: Vec<usize> = records.iter().map(|r| r.gold).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn topic_recall(records: &[&PredictionRecord]) -> f64 {
    let classes = gold_classes(records);
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let gold = records.iter().filter(|r| r.gold == c).count();
            let hit = records
                .iter()
                .filter(|r| r.gold == c && r.predicted == c)
                .count();
            ratio(hit, gold)
        })
        .sum();
    total / classes.len() as f64
}

fn topic_mae(records: &[&PredictionRecord], ordinal: &[f64]) -> Result<f64> {
    let value = |i: usize| {
        ordinal
            .get(i)
            .copied()
            .ok_or_else(|| Error::Metric(format!("label index {i} has no ordinal value")))
    };
    let classes = gold_classes(records);
    let mut total = 0.0;
    for &c in &classes {
        let members: Vec<&&PredictionRecord> = records.iter().filter(|r| r.gold == c).collect();
        let mut err = 0.0;
        for r in &members {
            err += (value(r.gold)? - value(r.predicted)?).abs();
        }
        total += err / members.len() as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Per-topic breakdown of macro-averaged recall.
pub fn macro_recall_per_topic(records: &[PredictionRecord]) -> Result<BTreeMap<String, f64>> {
    non_empty(records, "macro recall")?;
    Ok(by_group(records)?
        .into_iter()
        .map(|(g, rs)| (g.to_string(), topic_recall(&rs)))
        .collect())
}

pub fn macro_recall_over_topics(records: &[PredictionRecord]) -> Result<f64> {
    let per = macro_recall_per_topic(records)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Per-topic breakdown of macro-averaged MAE; `ordinal[i]` is the value of label `i`.
pub fn macro_mae_per_topic(
    records: &[PredictionRecord],
    ordinal: &[f64],
) -> Result<BTreeMap<String, f64>> {
    non_empty(records, "macro MAE")?;
    by_group(records)?
        .into_iter()
        .map(|(g, rs)| Ok((g.to_string(), topic_mae(&rs, ordinal)?)))
        .collect()
}

/// Lower is better.
pub fn macro_mae_over_topics(records: &[PredictionRecord], ordinal: &[f64]) -> Result<f64> {
    let per = macro_mae_per_topic(records, ordinal)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Ordinal value of each label: the parsed label when every label is
/// numeric (e.g. "-2".."2"), otherwise its position centred on zero.
pub fn ordinal_values(labels: &[String]) -> Vec<f64> {
    let parsed: Option<Vec<f64>> = labels
        .iter()
        .map(|l| l.trim().parse::<f64>().ok())
        .collect();
    parsed.unwrap_or_else(|| {
        let mid = (labels.len() as f64 - 1.0) / 2.0;
        (0..labels.len()).map(|i| i as f64 - mid).collect()
    })
}

/// Percentages of all correct predictions made only by the transfer
/// network and only by the main model: `(only_ltn, only_main)`.
pub fn complementarity(
    main_preds: &[usize],
    ltn_preds: &[usize],
    golds: &[usize],
) -> Result<(f64, f64)> {
    if main_preds.len() != golds.len() || ltn_preds.len() != golds.len() {
        return Err(Error::Metric(
            "complementarity needs aligned prediction lists".into(),
        ));
    }
    let (mut either, mut only_ltn, mut only_main) = (0usize, 0usize, 0usize);
    for ((&m, &l), &g) in main_preds.iter().zip(ltn_preds).zip(golds) {
        match (m == g, l == g) {
            (true, true) => either += 1,
            (true, false) => {
                either += 1;
                only_main += 1;
            }
            (false, true) => {
                either += 1;
                only_ltn += 1;
            }
            (false, false) => {}
        }
    }
    if either == 0 {
        return Err(Error::Metric(
            "complementarity undefined: no predictor is ever correct".into(),
        ));
    }
    Ok((
        100.0 * only_ltn as f64 / either as f64,
        100.0 * only_main as f64 / either as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric_name: String,
    pub value: f64,
    pub n_instances: usize,
    pub per_group: BTreeMap<String, f64>,
}

/// Dispatches to the metric configured for a task.
pub fn compute(
    kind: MetricKind,
    records: &[PredictionRecord],
    labels: &[String],
) -> Result<(f64, BTreeMap<String, f64>)> {
    match kind {
        MetricKind::Acc => Ok((accuracy(records)?, BTreeMap::new())),
        MetricKind::F1M => Ok((macro_f1(records, labels.len())?, BTreeMap::new())),
        MetricKind::F1Fa => Ok((
            f1_favor_against(records, FavorAgainst::from_labels(labels)?)?,
            BTreeMap::new(),
        )),
        MetricKind::RhoPn => {
            let per = macro_recall_per_topic(records)?;
            Ok((per.values().sum::<f64>() / per.len() as f64, per))
        }
        MetricKind::MaeM => {
            let per = macro_mae_per_topic(records, &ordinal_values(labels))?;
            Ok((per.values().sum::<f64>() / per.len() as f64, per))
        }
    }
}

pub fn report(
    task: &str,
    kind: MetricKind,
    records: &[PredictionRecord],
    labels: &[String],
) -> Result<MetricReport> {
    let (value, per_group) = compute(kind, records, labels)?;
    Ok(MetricReport {
        task: task.to_string(),
        metric_name: kind.name().to_string(),
        value,
        n_instances: records.len(),
        per_group,
    })
}
