//! The label transfer network: output label embeddings, diversity features,
//! the transfer MLP and its two losses.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

pub const NUM_DIVERSITY_FEATURES: usize = 5;

/// Lexical diversity statistics of one token sequence.
///
/// Entropies are in nats. Rényi entropy has order 2, which makes it equal to
/// `-ln(simpson_index)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityFeatures {
    pub num_types: f64,
    pub type_token_ratio: f64,
    pub shannon_entropy: f64,
    pub simpson_index: f64,
    pub renyi_entropy: f64,
}

impl DiversityFeatures {
    pub fn to_array(self) -> [f64; NUM_DIVERSITY_FEATURES] {
        [
            self.num_types,
            self.type_token_ratio,
            self.shannon_entropy,
            self.simpson_index,
            self.renyi_entropy,
        ]
    }
}

pub fn diversity_features<S: AsRef<str>>(tokens: &[S]) -> Result<DiversityFeatures> {
    if tokens.is_empty() {
        return Err(Error::Data(
            "diversity features of an empty token list".into(),
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    // sorted so the floating-point sums do not depend on hash order
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    let n = tokens.len() as f64;
    let probs: Vec<f64> = freqs.iter().map(|&c| c as f64 / n).collect();
    let shannon = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
    let simpson: f64 = probs.iter().map(|p| p * p).sum();
    Ok(DiversityFeatures {
        num_types: freqs.len() as f64,
        type_token_ratio: freqs.len() as f64 / n,
        shannon_entropy: shannon.max(0.0),
        simpson_index: simpson,
        renyi_entropy: -simpson.ln(),
    })
}

/// Probability-weighted sum of a task's label embeddings:
/// `p [B x L_i] * rows [L_i x l]`.
pub fn output_label_embedding(g: &mut Graph, p: Tensor, rows: Tensor) -> Result<Tensor> {
    g.matmul(p, rows)
}

/// Optional inputs appended to the concatenated auxiliary embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtnFeatures {
    pub diversity: bool,
    pub main_predictions: bool,
}

/// One-hidden-layer MLP over `[o_1, ..., o_{T-1}, extras]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtnParams {
    pub hidden_weights: ParamId,
    pub hidden_bias: ParamId,
    pub out_weights: ParamId,
    pub out_bias: ParamId,
    pub num_aux: usize,
    pub label_width: usize,
    pub features: LtnFeatures,
}

impl LtnParams {
    pub fn input_width_for(num_aux: usize, label_width: usize, features: LtnFeatures) -> usize {
        num_aux * label_width
            + if features.diversity {
                NUM_DIVERSITY_FEATURES
            } else {
                0
            }
            + if features.main_predictions {
                label_width
            } else {
                0
            }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        num_aux: usize,
        label_width: usize,
        hidden: usize,
        num_outputs: usize,
        features: LtnFeatures,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Self::input_width_for(num_aux, label_width, features);
        Ok(Self {
            hidden_weights: store.add_uniform(
                "ltn.hidden.w",
                Shape::new(input, hidden),
                scale,
                rng,
            )?,
            hidden_bias: store.add_zeros("ltn.hidden.b", Shape::new(1, hidden))?,
            out_weights: store.add_uniform(
                "ltn.out.w",
                Shape::new(hidden, num_outputs),
                scale,
                rng,
            )?,
            out_bias: store.add_zeros("ltn.out.b", Shape::new(1, num_outputs))?,
            num_aux,
            label_width,
            features,
        })
    }

    pub fn input_width(&self) -> usize {
        Self::input_width_for(self.num_aux, self.label_width, self.features)
    }

    fn extras_width(&self) -> usize {
        self.input_width() - self.num_aux * self.label_width
    }

    /// Transfer distribution `z` over the main task's labels.
    ///
    /// `aux_outputs` must be in task registration order; `extras` holds the
    /// enabled extra features (main-prediction embedding first, then the
    /// diversity features).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aux_outputs: &[Tensor],
        extras: Option<Tensor>,
    ) -> Result<Tensor> {
        if aux_outputs.len() != self.num_aux {
            return Err(Error::Usage(format!(
                "transfer network expects {} auxiliary embeddings, got {}",
                self.num_aux,
                aux_outputs.len()
            )));
        }
        let mut parts = aux_outputs.to_vec();
        let extra_cols = extras.map_or(0, |e| g.shape(e).cols);
        if extra_cols != self.extras_width() {
            return Err(Error::Dimension {
                op: "ltn_forward extras",
                left: (1, self.extras_width()),
                right: (1, extra_cols),
            });
        }
        parts.extend(extras);
        let x = g.concat(&parts)?;
        if g.shape(x).cols != self.input_width() {
            return Err(Error::Dimension {
                op: "ltn_forward",
                left: (1, self.input_width()),
                right: g.shape(x).pair(),
            });
        }
        let (hw, hb) = (
            g.param(store, self.hidden_weights),
            g.param(store, self.hidden_bias),
        );
        let (ow, ob) = (
            g.param(store, self.out_weights),
            g.param(store, self.out_bias),
        );
        let hidden = g.matmul(x, hw)?;
        let hidden = g.add_row(hidden, hb)?;
        let hidden = g.relu(hidden);
        let logits = g.matmul(hidden, ow)?;
        let logits = g.add_row(logits, ob)?;
        g.softmax(logits)
    }
}

/// Negative log-likelihood of gold main-task labels under `z`.
pub fn ltn_supervised_loss(g: &mut Graph, z: Tensor, gold: &[usize]) -> Result<Tensor> {
    g.cross_entropy(z, gold)
}

/// Squared error between main-model predictions and pseudo-labels,
/// averaged over the batch.
pub fn pseudo_label_loss(g: &mut Graph, p_main: Tensor, z: &[f64]) -> Result<Tensor> {
    g.mse(p_main, z)
}

/// A transfer-network soft label attached to an unlabelled example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub z: Vec<f64>,
    pub epoch: usize,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn diversity_degenerate_single_token() {
        let f = diversity_features(&["a"]).unwrap();
        assert_eq!(f.to_array(), [1.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn diversity_hand_computed() {
        let f = diversity_features(&["a", "a", "b"]).unwrap();
        assert_eq!(f.num_types, 2.0);
        assert!((f.type_token_ratio - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.shannon_entropy - 0.636_514_168_294_813_4).abs() < 1e-12);
        assert!((f.simpson_index - 5.0 / 9.0).abs() < 1e-15);
        assert!((f.renyi_entropy - (9.0f64 / 5.0).ln()).abs() < 1e-15);
        assert!((f.renyi_entropy - 0.587_786_664_902_119).abs() < 1e-12);
    }

    #[test]
    fn diversity_of_nothing_is_an_error() {
        assert!(diversity_features::<&str>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn diversity_is_order_invariant(mut toks in prop::collection::vec("[a-d]", 1..25), seed in any::<u64>()) {
            let a = diversity_features(&toks).unwrap();
            use rand::seq::SliceRandom;
            toks.shuffle(&mut seeded(seed, 0));
            let b = diversity_features(&toks).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.renyi_entropy, -a.simpson_index.ln());
        }
    }

    fn rows(g: &mut Graph, v: &[f64], r: usize, c: usize) -> Tensor {
        g.constant(Shape::new(r, c), v.to_vec()).unwrap()
    }

    #[test]
    fn output_embedding_examples() {
        let mut g = Graph::new();
        let l = rows(&mut g, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0], 2, 3);
        let p = rows(&mut g, &[0.0, 1.0], 1, 2);
        let o = output_label_embedding(&mut g, p, l).unwrap();
        assert_eq!(g.value(o), &[-1.0, 0.5, 4.0]);

        let e = rows(&mut g, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3);
        let p = rows(&mut g, &[0.5, 0.5], 1, 2);
        let o = output_label_embedding(&mut g, p, e).unwrap();
        assert_eq!(g.value(o), &[0.5, 0.5, 0.0]);

        let e = rows(&mut g, &[1.0, 0.0, 0.0, 1.0], 2, 2);
        let p = rows(&mut g, &[0.25, 0.75], 1, 2);
        let o = output_label_embedding(&mut g, p, e).unwrap();
        assert_eq!(g.value(o), &[0.25, 0.75]);

        let p3 = rows(&mut g, &[0.2, 0.3, 0.5], 1, 3);
        assert!(output_label_embedding(&mut g, p3, e).is_err());
    }

    fn ltn(features: LtnFeatures, seed: u64) -> (ParamStore, LtnParams) {
        let mut store = ParamStore::new();
        let p =
            LtnParams::init(&mut store, 2, 3, 6, 3, features, 0.5, &mut seeded(seed, 0)).unwrap();
        (store, p)
    }

    #[test]
    fn zero_weights_give_uniform_z() {
        let (mut store, p) = ltn(LtnFeatures::default(), 1);
        for id in store.ids().collect::<Vec<_>>() {
            store.values_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let a = rows(&mut g, &[0.3, -0.2, 1.0], 1, 3);
        let b = rows(&mut g, &[0.7, 0.1, -1.0], 1, 3);
        let z = p.forward(&mut g, &store, &[a, b], None).unwrap();
        for v in g.value(z) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concatenation_order_matters() {
        let (store, p) = ltn(LtnFeatures::default(), 3);
        let mut g = Graph::new();
        let a = rows(&mut g, &[0.3, -0.2, 1.0], 1, 3);
        let b = rows(&mut g, &[0.7, 0.1, -1.0], 1, 3);
        let z1 = p.forward(&mut g, &store, &[a, b], None).unwrap();
        let z2 = p.forward(&mut g, &store, &[b, a], None).unwrap();
        assert_ne!(g.value(z1), g.value(z2));
        assert!((g.value(z1).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extras_width_is_checked() {
        let feats = LtnFeatures {
            diversity: true,
            main_predictions: false,
        };
        let (store, p) = ltn(feats, 4);
        assert_eq!(p.input_width(), 2 * 3 + 5);
        let mut g = Graph::new();
        let a = rows(&mut g, &[0.3, -0.2, 1.0], 1, 3);
        assert!(p.forward(&mut g, &store, &[a, a], None).is_err());
        let d = rows(&mut g, &[1.0, 1.0, 0.0, 1.0, 0.0], 1, 5);
        assert!(p.forward(&mut g, &store, &[a, a], Some(d)).is_ok());
        assert!(p.forward(&mut g, &store, &[a], Some(d)).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let z = rows(&mut g, &[0.0, 1.0, 0.0], 1, 3);
        let l = ltn_supervised_loss(&mut g, z, &[1]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let z = rows(&mut g, &[1.0 / 3.0; 3], 1, 3);
        let l = ltn_supervised_loss(&mut g, z, &[2]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let z = rows(&mut g, &[0.5, 0.5], 1, 2);
        let l = ltn_supervised_loss(&mut g, z, &[0]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);

        let p = rows(&mut g, &[0.6, 0.4], 1, 2);
        let l = pseudo_label_loss(&mut g, p, &[0.6, 0.4]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let p = rows(&mut g, &[1.0, 0.0], 1, 2);
        let l = pseudo_label_loss(&mut g, p, &[0.0, 1.0]).unwrap();
        assert_eq!(g.scalar(l), 2.0);
        let p = rows(&mut g, &[0.6, 0.4], 1, 2);
        let l = pseudo_label_loss(&mut g, p, &[0.8, 0.2]).unwrap();
        assert!((g.scalar(l) - 0.08).abs() < 1e-15);
        assert!(pseudo_label_loss(&mut g, p, &[1.0]).is_err());
    }
}
