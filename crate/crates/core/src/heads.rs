//! Output layers: per-task softmax heads and the joint label embedding layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Shape, Tensor};
use crate::data::TaskSet;
use crate::error::{Error, Result};

/// Per-task output layers `p = softmax(W h + b)` with `W` stored `[L_i x h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadParams {
    pub heads: Vec<(ParamId, ParamId)>,
    pub hidden: usize,
}

impl TaskHeadParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        tasks: &TaskSet,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = tasks
            .iter()
            .map(|t| {
                let n = t.num_labels();
                Ok((
                    store.add_uniform(
                        format!("head.{}.w", t.name),
                        Shape::new(n, hidden),
                        scale,
                        rng,
                    )?,
                    store.add_zeros(format!("head.{}.b", t.name), Shape::new(1, n))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads, hidden })
    }

    /// Task distribution `[B x L_i]`.
    pub fn softmax_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Tensor,
        task: usize,
    ) -> Result<Tensor> {
        let &(w, b) = self
            .heads
            .get(task)
            .ok_or_else(|| Error::UnknownTask(format!("#{task}")))?;
        let (w, b) = (g.param(store, w), g.param(store, b));
        let logits = g.matmul_t(h, w)?;
        let logits = g.add_row(logits, b)?;
        g.softmax(logits)
    }
}

/// How the hidden representation is brought to the label width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Learned linear map from the hidden width down to the label width
    /// (no map when the widths agree).
    #[default]
    Project,
    /// Label rows are zero-padded to the hidden width, which is the same as
    /// scoring against the first `l` hidden units.
    Pad,
}

/// Joint label embedding matrix `L [sum_i L_i x l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbeddingMatrix {
    pub matrix: ParamId,
    pub projection: Option<ParamId>,
    pub width: usize,
    pub hidden: usize,
    pub mode: LabelMode,
}

impl LabelEmbeddingMatrix {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        tasks: &TaskSet,
        hidden: usize,
        width: usize,
        mode: LabelMode,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config(
                "label embedding width must be positive".into(),
            ));
        }
        if mode == LabelMode::Pad && width > hidden {
            return Err(Error::Config(format!(
                "pad mode needs label width {width} <= hidden width {hidden}"
            )));
        }
        let matrix = store.add_uniform(
            format!("{name}.labels"),
            Shape::new(tasks.total_labels(), width),
            scale,
            rng,
        )?;
        let projection = if mode == LabelMode::Project && width != hidden {
            Some(store.add_uniform(
                format!("{name}.projection"),
                Shape::new(hidden, width),
                scale,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            matrix,
            projection,
            width,
            hidden,
            mode,
        })
    }

    /// Embedding rows belonging to one task, `[L_i x l]`.
    pub fn task_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tasks: &TaskSet,
        task: usize,
    ) -> Result<Tensor> {
        if task >= tasks.len() {
            return Err(Error::UnknownTask(format!("#{task}")));
        }
        let rows = tasks.get(task).label_rows.clone();
        let l = g.param(store, self.matrix);
        g.slice_rows(l, rows.start, rows.end)
    }

    /// The hidden representation at label width, `[B x l]`.
    pub fn compare_space(&self, g: &mut Graph, store: &ParamStore, h: Tensor) -> Result<Tensor> {
        match (self.mode, self.projection) {
            (LabelMode::Project, Some(p)) => {
                let p = g.param(store, p);
                g.matmul(h, p)
            }
            (LabelMode::Pad, _) if self.width < self.hidden => g.slice_cols(h, 0, self.width),
            _ => Ok(h),
        }
    }

    /// `masked_softmax(L h, mask(task))` over all joint rows, `[B x sum_i L_i]`.
    pub fn lel_predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tasks: &TaskSet,
        h: Tensor,
        task: usize,
    ) -> Result<Tensor> {
        if task >= tasks.len() {
            return Err(Error::UnknownTask(format!("#{task}")));
        }
        let z = self.compare_space(g, store, h)?;
        let l = g.param(store, self.matrix);
        let scores = g.matmul_t(z, l)?;
        g.masked_softmax(scores, &tasks.mask(task))
    }

    /// The task's own distribution `[B x L_i]`, i.e. [`lel_predict`] restricted
    /// to the task's rows.
    ///
    /// [`lel_predict`]: Self::lel_predict
    pub fn task_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tasks: &TaskSet,
        h: Tensor,
        task: usize,
    ) -> Result<Tensor> {
        let p = self.lel_predict(g, store, tasks, h, task)?;
        let rows = tasks.get(task).label_rows.clone();
        g.slice_cols(p, rows.start, rows.end)
    }
}

/// Compatibility `c(l, h) = l . h`.
pub fn label_compatibility(l: &[f64], h: &[f64]) -> Result<f64> {
    if l.len() != h.len() {
        return Err(Error::Dimension {
            op: "label_compatibility",
            left: (1, l.len()),
            right: (1, h.len()),
        });
    }
    Ok(l.iter().zip(h).map(|(a, b)| a * b).sum())
}

/// Weighted sum of scalar task losses.
pub fn mtl_loss(g: &mut Graph, losses: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::Dimension {
            op: "mtl_loss",
            left: (1, losses.len()),
            right: (1, weights.len()),
        });
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w < 0.0) {
        return Err(Error::Config(format!("negative loss weight {w}")));
    }
    let mut total = g.scale(losses[0], weights[0]);
    for (&loss, &w) in losses.iter().zip(weights).skip(1) {
        let term = g.scale(loss, w);
        total = g.add(total, term)?;
    }
    Ok(total)
}
