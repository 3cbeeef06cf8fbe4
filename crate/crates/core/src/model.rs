//! Model assembly: shared encoder, task layers, output layer and the optional
//! label transfer network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Shape, Tensor};
use crate::data::{batch_in_order, Batch, EncodedExample, TaskSet, Vocab};
use crate::encoder::{EncoderParams, InitScheme, TaskLayerParams};
use crate::error::{Error, Result};
use crate::heads::{LabelEmbeddingMatrix, LabelMode, TaskHeadParams};
use crate::parallel::map_collect;
use crate::rng::{seeded, streams};
use crate::transfer::{
    output_label_embedding, LtnFeatures, LtnParams, PseudoLabel, NUM_DIVERSITY_FEATURES,
};

/// Architecture settings fixed at construction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_label: usize,
    pub ltn_hidden: usize,
    /// Token cap applied to text and condition when encoding.
    pub max_len: usize,
    pub use_lel: bool,
    pub label_mode: LabelMode,
    pub ltn_features: LtnFeatures,
    /// When false, the transfer loss reaches only the transfer network and
    /// the label embedding rows.
    pub ltn_backprop_to_encoder: bool,
    pub init: InitScheme,
}

/// Output layer variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputLayer {
    Heads(TaskHeadParams),
    Lel(LabelEmbeddingMatrix),
}

/// Parameter handles and shapes; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub config: ModelConfig,
    pub tasks: TaskSet,
    pub encoder: EncoderParams,
    pub task_layers: TaskLayerParams,
    pub output: OutputLayer,
    /// Label matrix used only by the transfer network when the output layer
    /// has no joint label embeddings.
    pub transfer_labels: Option<LabelEmbeddingMatrix>,
    pub ltn: Option<LtnParams>,
}

/// Which part of the model produces main-task predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    #[default]
    Main,
    Ltn,
}

/// All trainable state plus the vocabulary it was built for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub layout: ModelLayout,
    pub store: ParamStore,
    pub vocab: Vocab,
}

impl ModelParams {
    pub fn init(config: ModelConfig, tasks: TaskSet, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let layout_store = ModelLayout::init(config, tasks, seed)?;
        Ok(Self {
            layout: layout_store.0,
            store: layout_store.1,
            vocab,
        })
    }

    pub fn has_ltn(&self) -> bool {
        self.layout.ltn.is_some()
    }

    /// Adds the transfer network (and its label matrix when needed).
    pub fn attach_ltn(&mut self, seed: u64) -> Result<()> {
        self.layout.attach_ltn(&mut self.store, seed)
    }
}

impl ModelLayout {
    pub fn init(config: ModelConfig, tasks: TaskSet, seed: u64) -> Result<(Self, ParamStore)> {
        if config.d_hidden == 0 || config.d_emb == 0 {
            return Err(Error::Config(
                "hidden and embedding widths must be positive".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded(seed, streams::INIT);
        let init = config.init;
        let encoder = EncoderParams::init(
            &mut store,
            config.vocab_size,
            config.d_emb,
            config.d_hidden,
            init,
            &mut rng,
        )?;
        let width = encoder.output_width();
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        let task_layers = TaskLayerParams::init(&mut store, &names, width, init, &mut rng)?;
        let output = if config.use_lel {
            OutputLayer::Lel(LabelEmbeddingMatrix::init(
                &mut store,
                "lel",
                &tasks,
                width,
                config.d_label,
                config.label_mode,
                init.scale,
                &mut rng,
            )?)
        } else {
            OutputLayer::Heads(TaskHeadParams::init(
                &mut store, &tasks, width, init.scale, &mut rng,
            )?)
        };
        Ok((
            Self {
                config,
                tasks,
                encoder,
                task_layers,
                output,
                transfer_labels: None,
                ltn: None,
            },
            store,
        ))
    }

    pub fn attach_ltn(&mut self, store: &mut ParamStore, seed: u64) -> Result<()> {
        if self.ltn.is_some() {
            return Err(Error::Usage("transfer network already attached".into()));
        }
        if self.tasks.len() < 2 {
            return Err(Error::Config(
                "the transfer network needs at least two tasks".into(),
            ));
        }
        let mut rng = seeded(seed, streams::LTN_INIT);
        let scale = self.config.init.scale;
        if matches!(self.output, OutputLayer::Heads(_)) {
            // only the label rows are used here, so no projection is created
            self.transfer_labels = Some(LabelEmbeddingMatrix::init(
                store,
                "transfer",
                &self.tasks,
                self.config.d_label,
                self.config.d_label,
                LabelMode::Project,
                scale,
                &mut rng,
            )?);
        }
        let main = self.tasks.main();
        self.ltn = Some(LtnParams::init(
            store,
            self.tasks.len() - 1,
            self.label_matrix().expect("label matrix").width,
            self.config.ltn_hidden,
            main.num_labels(),
            self.config.ltn_features,
            scale,
            &mut rng,
        )?);
        Ok(())
    }

    /// The label matrix feeding the transfer network.
    pub fn label_matrix(&self) -> Option<&LabelEmbeddingMatrix> {
        match &self.output {
            OutputLayer::Lel(l) => Some(l),
            OutputLayer::Heads(_) => self.transfer_labels.as_ref(),
        }
    }

    /// Shared encoding of a batch.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Tensor> {
        self.encoder.conditional_encode(g, store, batch)
    }

    /// Task distribution `[B x L_task]` from a shared encoding.
    pub fn task_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Tensor,
        task: usize,
    ) -> Result<Tensor> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownTask(format!("#{task}")));
        }
        let ht = self.task_layers.task_transform(g, store, h, task)?;
        match &self.output {
            OutputLayer::Heads(heads) => heads.softmax_head(g, store, ht, task),
            OutputLayer::Lel(lel) => lel.task_probs(g, store, &self.tasks, ht, task),
        }
    }

    /// Transfer distribution `[B x L_main]`.
    ///
    /// `main_probs` is the main-task distribution already computed from `h`,
    /// reused for the main-prediction feature when that feature is enabled.
    pub fn ltn_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Tensor,
        batch: &Batch,
        main_probs: Option<Tensor>,
    ) -> Result<Tensor> {
        let ltn = self
            .ltn
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no transfer network".into()))?;
        let labels = self
            .label_matrix()
            .expect("transfer network implies a label matrix");
        let cut = !self.config.ltn_backprop_to_encoder;
        let mut outputs = Vec::with_capacity(ltn.num_aux);
        for aux in self.tasks.aux_indices() {
            let mut p = self.task_probs(g, store, h, aux)?;
            if cut {
                p = g.detach(p);
            }
            let rows = labels.task_rows(g, store, &self.tasks, aux)?;
            outputs.push(output_label_embedding(g, p, rows)?);
        }
        let mut extras = Vec::new();
        if ltn.features.main_predictions {
            let main = self.tasks.main_index();
            let mut p = match main_probs {
                Some(p) => p,
                None => self.task_probs(g, store, h, main)?,
            };
            if cut {
                p = g.detach(p);
            }
            let rows = labels.task_rows(g, store, &self.tasks, main)?;
            extras.push(output_label_embedding(g, p, rows)?);
        }
        if ltn.features.diversity {
            let values: Vec<f64> = batch.diversity.iter().flatten().copied().collect();
            extras.push(g.constant(Shape::new(batch.len(), NUM_DIVERSITY_FEATURES), values)?);
        }
        let extras = match extras.len() {
            0 => None,
            1 => Some(extras[0]),
            _ => Some(g.concat(&extras)?),
        };
        ltn.forward(g, store, &outputs, extras)
    }

    /// Row-major distributions for every example of a batch.
    pub fn predict_batch(
        &self,
        store: &ParamStore,
        batch: &Batch,
        task: usize,
        predictor: Predictor,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let h = self.encode(&mut g, store, batch)?;
        let p = match predictor {
            Predictor::Main => self.task_probs(&mut g, store, h, task)?,
            Predictor::Ltn => {
                if task != self.tasks.main_index() {
                    return Err(Error::Usage(
                        "the transfer network predicts only the main task".into(),
                    ));
                }
                self.ltn_probs(&mut g, store, h, batch, None)?
            }
        };
        let cols = g.shape(p).cols;
        Ok(g.value(p).chunks(cols).map(<[f64]>::to_vec).collect())
    }

    /// Distributions for every encoded example, in input order. Batches are
    /// evaluated in parallel.
    pub fn predict(
        &self,
        store: &ParamStore,
        encoded: &[EncodedExample],
        task: usize,
        predictor: Predictor,
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let order: Vec<usize> = (0..encoded.len()).collect();
        let name = &self
            .tasks
            .get(task.min(self.tasks.len().saturating_sub(1)))
            .name;
        let batches = batch_in_order(name, encoded, &order, batch_size);
        let chunks = map_collect(&batches, |b| self.predict_batch(store, b, task, predictor));
        let mut out = Vec::with_capacity(encoded.len());
        for chunk in chunks {
            out.extend(chunk?);
        }
        Ok(out)
    }

    /// Transfer-network soft labels for a pool of (possibly unlabelled)
    /// examples. An empty pool gives an empty list.
    pub fn generate_pseudo_labels(
        &self,
        store: &ParamStore,
        pool: &[EncodedExample],
        batch_size: usize,
        epoch: usize,
    ) -> Result<Vec<PseudoLabel>> {
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.predict(
            store,
            pool,
            self.tasks.main_index(),
            Predictor::Ltn,
            batch_size,
        )?;
        Ok(pool
            .iter()
            .zip(z)
            .map(|(ex, z)| PseudoLabel {
                id: ex.id.clone(),
                z,
                epoch,
            })
            .collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
