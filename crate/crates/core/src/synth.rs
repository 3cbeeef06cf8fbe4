//! Synthetic pair of correlated pairwise classification tasks.
//!
//! Every instance is a short text conditioned on a topic token. The text
//! contains some "up" words, some "down" words and fillers; each topic has a
//! fixed orientation. The latent polarity of an instance is the sign of
//! `orientation * (#up - #down)`.
//!
//! Task A is labelled with the latent polarity. Task B uses its own label
//! names; an instance keeps the latent polarity (under the bijection
//! pos/favor, neg/against, neu/neither) with probability `correlation`, and
//! otherwise receives a uniformly random label. Task B may also carry
//! `n_unlabelled` extra training inputs without labels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, streams};

pub const TASK_A: &str = "sentiment";
pub const TASK_B: &str = "stance";
pub const LABELS_A: [&str; 3] = ["pos", "neg", "neu"];
pub const LABELS_B: [&str; 3] = ["favor", "against", "neither"];

const UP: &str = "up";
const DOWN: &str = "dn";
const FILLER: &str = "fl";
const TOPIC: &str = "topic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Unlabelled training inputs appended to task B.
    pub n_unlabelled: usize,
    pub correlation: f64,
    pub num_topics: usize,
    /// Distinct words per word class.
    pub words_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            n_unlabelled: 0,
            correlation: 0.9,
            num_topics: 6,
            words_per_class: 12,
            min_len: 5,
            max_len: 10,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!(
                "correlation {} is outside [0, 1]",
                self.correlation
            )));
        }
        if self.num_topics == 0 || self.words_per_class == 0 {
            return Err(Error::Config(
                "need at least one topic and one word per class".into(),
            ));
        }
        // the longest polarity pattern uses four content words
        if self.min_len < 4 || self.max_len < self.min_len {
            return Err(Error::Config("need 4 <= min_len <= max_len".into()));
        }
        Ok(())
    }
}

/// Orientation of topic `t`: +1 for even, -1 for odd indices.
pub fn topic_orientation(topic: usize) -> i64 {
    if topic.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

fn word_class<'a>(token: &'a str, prefix: &str) -> Option<&'a str> {
    token
        .strip_prefix(prefix)
        .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// Latent polarity of a text under a topic condition: 0 = positive,
/// 1 = negative, 2 = neutral. `None` if the condition has no topic token.
pub fn latent_label<S: AsRef<str>>(text: &[S], condition: &[S]) -> Option<usize> {
    let topic = condition
        .iter()
        .find_map(|t| word_class(t.as_ref(), TOPIC))
        .and_then(|d| d.parse::<usize>().ok())?;
    let up = text
        .iter()
        .filter(|t| word_class(t.as_ref(), UP).is_some())
        .count() as i64;
    let down = text
        .iter()
        .filter(|t| word_class(t.as_ref(), DOWN).is_some())
        .count() as i64;
    Some(match (topic_orientation(topic) * (up - down)).signum() {
        1 => 0,
        -1 => 1,
        _ => 2,
    })
}

struct Instance {
    text: Vec<String>,
    topic: usize,
    latent: usize,
}

fn instance<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Instance {
    let topic = rng.random_range(0..cfg.num_topics);
    let latent = rng.random_range(0..3usize);
    let base = rng.random_range(0..=1usize);
    let (up, down) = match latent {
        2 => (base, base),
        _ => {
            let lead = base + rng.random_range(1..=2usize);
            let up_leads = (latent == 0) == (topic_orientation(topic) > 0);
            if up_leads {
                (lead, base)
            } else {
                (base, lead)
            }
        }
    };
    let len = rng.random_range(cfg.min_len..=cfg.max_len).max(up + down);
    let mut word = |prefix: &str| format!("{prefix}{}", rng.random_range(0..cfg.words_per_class));
    let mut text: Vec<String> = Vec::with_capacity(len);
    text.extend((0..up).map(|_| word(UP)));
    text.extend((0..down).map(|_| word(DOWN)));
    while text.len() < len {
        text.push(word(FILLER));
    }
    text.shuffle(rng);
    Instance {
        text,
        topic,
        latent,
    }
}

fn split_for(i: usize, cfg: &SynthConfig) -> Split {
    if i < cfg.n_train || i >= cfg.n_train + cfg.n_dev + cfg.n_test {
        Split::Train
    } else if i < cfg.n_train + cfg.n_dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Both tasks' examples, task A first.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_dev + cfg.n_test;
    let make = |task: &str, stream: u64, relabel: bool| {
        let mut rng = seeded(derive_seed(cfg.seed, stream), streams::SYNTH);
        let extra = if relabel { cfg.n_unlabelled } else { 0 };
        (0..total + extra)
            .map(|i| {
                let inst = instance(cfg, &mut rng);
                let label = if i >= total {
                    None
                } else if relabel {
                    let keep = rng.random_bool(cfg.correlation);
                    let random = rng.random_range(0..3usize);
                    Some(LABELS_B[if keep { inst.latent } else { random }])
                } else {
                    Some(LABELS_A[inst.latent])
                };
                Example {
                    id: format!("{task}-{i}"),
                    task: task.to_string(),
                    text: inst.text,
                    condition: vec![format!("{TOPIC}{}", inst.topic)],
                    label: label.map(str::to_string),
                    group: Some(format!("{TOPIC}{}", inst.topic)),
                    split: split_for(i, cfg),
                }
            })
            .collect::<Vec<_>>()
    };
    Ok((make(TASK_A, 1, false), make(TASK_B, 2, true)))
}

#[derive(Serialize)]
struct Line<'a> {
    id: &'a str,
    text: String,
    condition: String,
    label: Option<&'a str>,
    group: Option<&'a str>,
    split: Split,
}

/// Writes examples in the JSON-lines dataset format.
pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = Line {
            id: &ex.id,
            text: ex.text.join(" "),
            condition: ex.condition.join(" "),
            label: ex.label.as_deref(),
            group: ex.group.as_deref(),
            split: ex.split,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
