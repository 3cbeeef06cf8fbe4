use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;

/// User-facing task description, before label rows are assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    pub labels: Vec<String>,
    pub metric: MetricKind,
    #[serde(default = "one")]
    pub loss_weight: f64,
    #[serde(default)]
    pub downsample_to: Option<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub metric: MetricKind,
    pub loss_weight: f64,
    /// Rows of the joint label embedding matrix owned by this task.
    pub label_rows: Range<usize>,
    pub is_main: bool,
    pub downsample_to: Option<usize>,
}

impl TaskSpec {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// All tasks of a run in registration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
    main: usize,
}

impl TaskSet {
    pub fn new(defs: Vec<TaskDef>, main_task: &str) -> Result<Self> {
        if defs.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        let mut names = BTreeSet::new();
        let mut tasks = Vec::with_capacity(defs.len());
        let mut offset = 0;
        for def in defs {
            if !names.insert(def.name.clone()) {
                return Err(Error::Config(format!("duplicate task name {:?}", def.name)));
            }
            if def.labels.is_empty() {
                return Err(Error::Config(format!("task {:?} has no labels", def.name)));
            }
            let unique: BTreeSet<&String> = def.labels.iter().collect();
            if unique.len() != def.labels.len() {
                return Err(Error::Config(format!(
                    "task {:?} repeats a label",
                    def.name
                )));
            }
            if !(def.loss_weight.is_finite() && def.loss_weight >= 0.0) {
                return Err(Error::Config(format!(
                    "task {:?} has invalid loss weight {}",
                    def.name, def.loss_weight
                )));
            }
            let n = def.labels.len();
            tasks.push(TaskSpec {
                is_main: def.name == main_task,
                name: def.name,
                labels: def.labels,
                metric: def.metric,
                loss_weight: def.loss_weight,
                label_rows: offset..offset + n,
                downsample_to: def.downsample_to,
            });
            offset += n;
        }
        let main = tasks
            .iter()
            .position(|t| t.is_main)
            .ok_or_else(|| Error::Config(format!("main task {main_task:?} is not configured")))?;
        Ok(Self { tasks, main })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, index: usize) -> &TaskSpec {
        &self.tasks[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn main_index(&self) -> usize {
        self.main
    }

    pub fn main(&self) -> &TaskSpec {
        &self.tasks[self.main]
    }

    /// Auxiliary tasks in registration order.
    pub fn aux_indices(&self) -> Vec<usize> {
        (0..self.tasks.len()).filter(|&i| i != self.main).collect()
    }

    /// Total label count across tasks (rows of the joint label matrix).
    pub fn total_labels(&self) -> usize {
        self.tasks.last().map_or(0, |t| t.label_rows.end)
    }

    /// Mask over joint label rows selecting one task.
    pub fn mask(&self, index: usize) -> Vec<bool> {
        let rows = &self.tasks[index].label_rows;
        (0..self.total_labels())
            .map(|r| rows.contains(&r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(name: &str, labels: &[&str]) -> TaskDef {
        TaskDef {
            name: name.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            metric: MetricKind::Acc,
            loss_weight: 1.0,
            downsample_to: None,
        }
    }

    #[test]
    fn label_rows_tile_the_joint_matrix() {
        let set = TaskSet::new(
            vec![
                def("a", &["x", "y"]),
                def("b", &["p", "q", "r"]),
                def("c", &["u"]),
            ],
            "b",
        )
        .unwrap();
        assert_eq!(set.get(0).label_rows, 0..2);
        assert_eq!(set.get(1).label_rows, 2..5);
        assert_eq!(set.get(2).label_rows, 5..6);
        assert_eq!(set.total_labels(), 6);
        assert_eq!(set.main_index(), 1);
        assert_eq!(set.aux_indices(), vec![0, 2]);
        assert_eq!(set.mask(1), vec![false, false, true, true, true, false]);
    }

    #[test]
    fn invalid_definitions_are_rejected() {
        assert!(TaskSet::new(vec![def("a", &[])], "a").is_err());
        assert!(TaskSet::new(vec![def("a", &["x", "x"])], "a").is_err());
        assert!(TaskSet::new(vec![def("a", &["x"]), def("a", &["y"])], "a").is_err());
        assert!(TaskSet::new(vec![def("a", &["x"])], "b").is_err());
        let mut bad = def("a", &["x"]);
        bad.loss_weight = -1.0;
        assert!(TaskSet::new(vec![bad], "a").is_err());
    }
}
