use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::TaskSpec;
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One pairwise instance: a text read conditioned on a second sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub text: Vec<String>,
    pub condition: Vec<String>,
    pub label: Option<String>,
    pub group: Option<String>,
    pub split: Split,
}

#[derive(Deserialize)]
struct Line {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
    condition: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    group: Option<String>,
    split: Split,
}

/// Lowercases and splits on Unicode whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a JSON-lines dataset and binds every line to `task`.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn load_dataset(path: impl AsRef<Path>, task: &TaskSpec) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            detail: e.to_string(),
        })?;
        if let Some(label) = &parsed.label {
            if task.label_index(label).is_none() {
                return Err(Error::UnknownLabel {
                    path: path.to_path_buf(),
                    line: lineno,
                    label: label.clone(),
                    task: task.name.clone(),
                });
            }
        }
        let text = tokenize(&parsed.text);
        if text.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                detail: "text is empty after tokenization".into(),
            });
        }
        let id = match parsed.id {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => lineno.to_string(),
        };
        out.push(Example {
            id,
            task: task.name.clone(),
            text,
            condition: tokenize(&parsed.condition),
            label: parsed.label,
            group: parsed.group,
            split: parsed.split,
        });
    }
    Ok(out)
}

pub fn split_of(examples: &[Example], split: Split) -> Vec<Example> {
    examples
        .iter()
        .filter(|e| e.split == split)
        .cloned()
        .collect()
}

/// Seeded uniform sample of `min(n, len)` examples without replacement,
/// kept in their original order.
pub fn downsample(examples: &[Example], n: usize, seed: u64) -> Vec<Example> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut rng = seeded(seed, streams::DOWNSAMPLE);
    let mut picked = index::sample(&mut rng, examples.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| examples[i].clone()).collect()
}

/// Copies with labels removed, used as the pseudo-labelling pool.
pub fn strip_labels(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example {
            label: None,
            ..e.clone()
        })
        .collect()
}
