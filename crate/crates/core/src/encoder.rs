//! Conditional BiLSTM encoder and task-specific residual layers.
//!
//! The condition sequence is read by its own BiLSTM; the final cell state of
//! each direction seeds the same direction of the text BiLSTM (hidden states
//! start at zero). The shared representation is the concatenation of the
//! text BiLSTM's final forward and backward hidden states.
//!
//! Sequences are right-padded. At step `t` a row only updates its state
//! while `t < len`; afterwards the state is carried over unchanged, so pad
//! content never reaches the final states.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Shape, Tensor};
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};

/// Weight initialisation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    /// Half-width of the uniform initialisation interval.
    pub scale: f64,
    pub forget_bias: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            scale: 0.1,
            forget_bias: 1.0,
        }
    }
}

/// One LSTM direction. Weights are `[(input + hidden) x 4*hidden]` with gate
/// blocks ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub weights: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = store.add_uniform(
            format!("{name}.w"),
            Shape::new(input + hidden, 4 * hidden),
            init.scale,
            rng,
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(init.forget_bias);
        let bias = store.add(format!("{name}.b"), Shape::new(1, 4 * hidden), bias)?;
        Ok(Self {
            weights,
            bias,
            input,
            hidden,
        })
    }

    /// One step of the gated recurrence:
    /// `c' = f*c + i*g`, `h' = o*tanh(c')`.
    pub fn cell(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Tensor,
        h_prev: Tensor,
        c_prev: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        let xh = g.concat(&[x, h_prev])?;
        let z = g.matmul(xh, w)?;
        let z = g.add_row(z, b)?;
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n)?;
        let f = g.slice_cols(z, n, 2 * n)?;
        let o = g.slice_cols(z, 2 * n, 3 * n)?;
        let cand = g.slice_cols(z, 3 * n, 4 * n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs over `steps` (each `[B x input]`), updating row `b` at step `t`
    /// only where `active[t][b]`. Returns the final `(h, c)`.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[(Tensor, Vec<bool>)],
        h0: Tensor,
        c0: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (mut h, mut c) = (h0, c0);
        for (x, active) in steps {
            let (h_new, c_new) = self.cell(g, store, *x, h, c)?;
            h = g.blend(h_new, h, active)?;
            c = g.blend(c_new, c, active)?;
        }
        Ok((h, c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstm {
    fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmParams::init(store, &format!("{name}.fwd"), input, hidden, init, rng)?,
            backward: LstmParams::init(store, &format!("{name}.bwd"), input, hidden, init, rng)?,
        })
    }
}

/// Per-step embedded inputs and activity masks for both reading directions.
struct Reads {
    forward: Vec<(Tensor, Vec<bool>)>,
    backward: Vec<(Tensor, Vec<bool>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embeddings: ParamId,
    pub condition: BiLstm,
    pub text: BiLstm,
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        d_emb: usize,
        d_hidden: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let embeddings =
            store.add_uniform("embeddings", Shape::new(vocab_size, d_emb), init.scale, rng)?;
        Ok(Self {
            embeddings,
            condition: BiLstm::init(store, "condition", d_emb, d_hidden, init, rng)?,
            text: BiLstm::init(store, "text", d_emb, d_hidden, init, rng)?,
            vocab_size,
            d_emb,
            d_hidden,
        })
    }

    /// Width of the shared representation.
    pub fn output_width(&self) -> usize {
        2 * self.d_hidden
    }

    fn reads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        width: usize,
        lens: &[usize],
    ) -> Result<Reads> {
        let table = g.param(store, self.embeddings);
        let rows = lens.len();
        let mut forward = Vec::with_capacity(width);
        let mut backward = Vec::with_capacity(width);
        for t in 0..width {
            let active: Vec<bool> = lens.iter().map(|&l| t < l).collect();
            let fwd_ids: Vec<usize> = (0..rows).map(|r| ids[r * width + t]).collect();
            let bwd_ids: Vec<usize> = (0..rows)
                .map(|r| {
                    if t < lens[r] {
                        ids[r * width + lens[r] - 1 - t]
                    } else {
                        PAD
                    }
                })
                .collect();
            let xf = g.gather(table, &fwd_ids)?;
            let xb = g.gather(table, &bwd_ids)?;
            forward.push((xf, active.clone()));
            backward.push((xb, active));
        }
        Ok(Reads { forward, backward })
    }

    /// Shared representation `h` of every row of the batch, `[B x 2*d_hidden]`.
    pub fn conditional_encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Tensor> {
        let rows = batch.len();
        if rows == 0 {
            return Err(Error::Data("cannot encode an empty batch".into()));
        }
        if batch.text_lens.contains(&0) {
            return Err(Error::Data("cannot encode an empty text".into()));
        }
        let zeros = g.constant(
            Shape::new(rows, self.d_hidden),
            vec![0.0; rows * self.d_hidden],
        )?;

        let cond = self.reads(
            g,
            store,
            &batch.condition_ids,
            batch.condition_width,
            &batch.condition_lens,
        )?;
        let (_, c_fwd) = self
            .condition
            .forward
            .run(g, store, &cond.forward, zeros, zeros)?;
        let (_, c_bwd) = self
            .condition
            .backward
            .run(g, store, &cond.backward, zeros, zeros)?;

        let text = self.reads(
            g,
            store,
            &batch.text_ids,
            batch.text_width,
            &batch.text_lens,
        )?;
        let (h_fwd, _) = self
            .text
            .forward
            .run(g, store, &text.forward, zeros, c_fwd)?;
        let (h_bwd, _) = self
            .text
            .backward
            .run(g, store, &text.backward, zeros, c_bwd)?;
        g.concat(&[h_fwd, h_bwd])
    }
}

/// Per-task residual layer `h' = relu(h W + b) + h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLayerParams {
    pub layers: Vec<(ParamId, ParamId)>,
    pub width: usize,
}

impl TaskLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        task_names: &[&str],
        width: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = task_names
            .iter()
            .map(|name| {
                Ok((
                    store.add_uniform(
                        format!("task.{name}.w"),
                        Shape::new(width, width),
                        init.scale,
                        rng,
                    )?,
                    store.add_zeros(format!("task.{name}.b"), Shape::new(1, width))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, width })
    }

    pub fn task_transform(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Tensor,
        task: usize,
    ) -> Result<Tensor> {
        let &(w, b) = self
            .layers
            .get(task)
            .ok_or_else(|| Error::UnknownTask(format!("#{task}")))?;
        let (w, b) = (g.param(store, w), g.param(store, b));
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        let z = g.relu(z);
        g.add(z, h)
    }
}
