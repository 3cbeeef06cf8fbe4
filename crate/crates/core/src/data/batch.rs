use rand::seq::SliceRandom;

use super::{Example, TaskSpec, Vocab, PAD};
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};
use crate::transfer::diversity_features;

pub const DEFAULT_MAX_LEN: usize = 60;

/// An example with tokens mapped to ids and its label mapped to an index.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub text_ids: Vec<usize>,
    pub condition_ids: Vec<usize>,
    pub label: Option<usize>,
    pub group: Option<String>,
    /// Diversity features of the (untruncated) text.
    pub diversity: [f64; 5],
}

/// Padded, index-encoded examples of a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: String,
    pub text_ids: Vec<usize>,
    pub text_width: usize,
    pub text_lens: Vec<usize>,
    pub condition_ids: Vec<usize>,
    pub condition_width: usize,
    pub condition_lens: Vec<usize>,
    /// Present only when every example in the batch is labelled.
    pub label_ids: Option<Vec<usize>>,
    pub diversity: Vec<[f64; 5]>,
    /// Positions of the examples in the encoded source list.
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.text_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_lens.is_empty()
    }

    pub fn text_row(&self, r: usize) -> &[usize] {
        &self.text_ids[r * self.text_width..(r + 1) * self.text_width]
    }

    pub fn condition_row(&self, r: usize) -> &[usize] {
        &self.condition_ids[r * self.condition_width..(r + 1) * self.condition_width]
    }
}

pub fn encode_examples(
    examples: &[Example],
    task: &TaskSpec,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| {
            if ex.task != task.name {
                return Err(Error::Data(format!(
                    "example {} belongs to task {:?}, not {:?}",
                    ex.id, ex.task, task.name
                )));
            }
            let label = match &ex.label {
                Some(l) => Some(task.label_index(l).ok_or_else(|| {
                    Error::Data(format!("example {}: unknown label {l:?}", ex.id))
                })?),
                None => None,
            };
            let ids =
                |toks: &[String]| toks.iter().take(max_len).map(|t| vocab.encode(t)).collect();
            Ok(EncodedExample {
                id: ex.id.clone(),
                text_ids: ids(&ex.text),
                condition_ids: ids(&ex.condition),
                label,
                group: ex.group.clone(),
                diversity: diversity_features(&ex.text)?.to_array(),
            })
        })
        .collect()
}

/// Pads the selected examples to the longest sequence among them.
pub fn collate(task: &str, encoded: &[EncodedExample], indices: &[usize]) -> Batch {
    let rows: Vec<&EncodedExample> = indices.iter().map(|&i| &encoded[i]).collect();
    let text_width = rows.iter().map(|e| e.text_ids.len()).max().unwrap_or(0);
    let condition_width = rows
        .iter()
        .map(|e| e.condition_ids.len())
        .max()
        .unwrap_or(0);
    let pad = |seq: &[usize], width: usize| {
        let mut row = seq.to_vec();
        row.resize(width, PAD);
        row
    };
    let label_ids = rows.iter().map(|e| e.label).collect::<Option<Vec<_>>>();
    Batch {
        task: task.to_string(),
        text_ids: rows
            .iter()
            .flat_map(|e| pad(&e.text_ids, text_width))
            .collect(),
        text_width,
        text_lens: rows.iter().map(|e| e.text_ids.len()).collect(),
        condition_ids: rows
            .iter()
            .flat_map(|e| pad(&e.condition_ids, condition_width))
            .collect(),
        condition_width,
        condition_lens: rows.iter().map(|e| e.condition_ids.len()).collect(),
        label_ids,
        diversity: rows.iter().map(|e| e.diversity).collect(),
        example_indices: indices.to_vec(),
    }
}

/// Seeded shuffle into fixed-size batches (the last may be smaller).
pub fn batch_encoded(
    task: &str,
    encoded: &[EncodedExample],
    batch_size: usize,
    seed: u64,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut seeded(seed, streams::SHUFFLE));
    batch_in_order(task, encoded, &order, batch_size)
}

/// Batches in the given order without shuffling.
pub fn batch_in_order(
    task: &str,
    encoded: &[EncodedExample],
    order: &[usize],
    batch_size: usize,
) -> Vec<Batch> {
    order
        .chunks(batch_size.max(1))
        .map(|chunk| collate(task, encoded, chunk))
        .collect()
}

/// Encodes, shuffles and pads one task's examples.
pub fn make_batches(
    examples: &[Example],
    task: &TaskSpec,
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let encoded = encode_examples(examples, task, vocab, DEFAULT_MAX_LEN)?;
    Ok(batch_encoded(&task.name, &encoded, batch_size, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Split, TaskDef, TaskSet};
    use crate::metrics::MetricKind;

    fn task() -> TaskSpec {
        TaskSet::new(
            vec![TaskDef {
                name: "t".into(),
                labels: vec!["a".into(), "b".into()],
                metric: MetricKind::Acc,
                loss_weight: 1.0,
                downsample_to: None,
            }],
            "t",
        )
        .unwrap()
        .get(0)
        .clone()
    }

    fn ex(i: usize, len: usize) -> Example {
        Example {
            id: i.to_string(),
            task: "t".into(),
            text: (0..len).map(|k| format!("w{k}")).collect(),
            condition: vec!["c".into()],
            label: Some(if i.is_multiple_of(2) { "a" } else { "b" }.into()),
            group: None,
            split: Split::Train,
        }
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let examples: Vec<Example> = (0..5).map(|i| ex(i, 2)).collect();
        let vocab = build_vocab([examples.as_slice()], 1);
        let b = make_batches(&examples, &task(), &vocab, 2, 9).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let again = make_batches(&examples, &task(), &vocab, 2, 9).unwrap();
        assert_eq!(b, again);
        assert!(make_batches(&[], &task(), &vocab, 2, 9).unwrap().is_empty());
    }

    #[test]
    fn padding_to_longest() {
        let examples = vec![ex(0, 3), ex(1, 7)];
        let vocab = build_vocab([examples.as_slice()], 1);
        let enc = encode_examples(&examples, &task(), &vocab, 60).unwrap();
        let b = collate("t", &enc, &[0, 1]);
        assert_eq!(b.text_width, 7);
        assert_eq!(b.text_lens, vec![3, 7]);
        assert!(b.text_row(0)[3..].iter().all(|&id| id == PAD));
        assert!(b.text_row(1).iter().all(|&id| id != PAD));
        assert!(b.text_ids.iter().all(|&id| id < vocab.len()));
        assert_eq!(b.label_ids, Some(vec![0, 1]));
    }

    #[test]
    fn truncates_to_max_len() {
        let examples = vec![ex(0, 80)];
        let vocab = build_vocab([examples.as_slice()], 1);
        let enc = encode_examples(&examples, &task(), &vocab, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(enc[0].text_ids.len(), DEFAULT_MAX_LEN);
    }

    #[test]
    fn mixing_tasks_is_rejected() {
        let mut e = ex(0, 2);
        e.task = "other".into();
        let vocab = build_vocab([std::slice::from_ref(&e)], 1);
        assert!(make_batches(&[e], &task(), &vocab, 2, 1).is_err());
    }

    #[test]
    fn unlabelled_batches_have_no_labels() {
        let mut e = ex(0, 2);
        e.label = None;
        let examples = vec![e, ex(1, 2)];
        let vocab = build_vocab([examples.as_slice()], 1);
        let enc = encode_examples(&examples, &task(), &vocab, 60).unwrap();
        assert_eq!(collate("t", &enc, &[0, 1]).label_ids, None);
    }
}
