use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::nn::{init_normal, init_scaled_uniform, TransformerLayerParams};
use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const LABEL_EMBEDDING_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub token_embedding: ParamId,
    pub word_layers: Vec<TransformerLayerParams>,
    pub sentence_layer: Option<TransformerLayerParams>,
    pub label_embeddings: Option<ParamId>,
    /// One row per output: head `l` computes `w_l . v_l + b_l`.
    pub head_weights: ParamId,
    pub head_bias: ParamId,
}

/// All learnable tensors of one model together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ParamIds,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weight matrices, zero biases, unit norm gains,
    /// `N(0, 1/d)` token embeddings (unit variance after the `sqrt(d)` scale)
    /// and `N(0, 0.02)` label embeddings. Deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut store = ParamStore::new();
        let token_embedding = store.push(
            "token_embedding",
            init_normal(config.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let word_layers = (0..config.word_layers)
            .map(|i| {
                TransformerLayerParams::register(&mut store, &format!("word.{i}"), d, &mut rng)
            })
            .collect();
        let sentence_layer = config
            .variant
            .uses_sentence_layer()
            .then(|| TransformerLayerParams::register(&mut store, "sentence.0", d, &mut rng));
        let outputs = config.n_outputs();
        let label_embeddings = config.variant.uses_label_attention().then(|| {
            store.push(
                "label_embeddings",
                init_normal(outputs, d, LABEL_EMBEDDING_STD, &mut rng),
            )
        });
        let mut heads = Vec::with_capacity(outputs * d);
        for _ in 0..outputs {
            heads.extend(init_scaled_uniform::<T, _>(d, 1, &mut rng).into_data());
        }
        let head_weights = store.push("heads.weight", Tensor::matrix(outputs, d, heads)?);
        let head_bias = store.push("heads.bias", Tensor::zeros(&[outputs]));
        Ok(Self {
            config: config.clone(),
            store,
            ids: ParamIds {
                token_embedding,
                word_layers,
                sentence_layer,
                label_embeddings,
                head_weights,
                head_bias,
            },
        })
    }

    /// Adopts externally loaded tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut layout = Self::init(config, 0)?;
        if layout.store.len() != store.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors for this configuration, found {}",
                layout.store.len(),
                store.len()
            )));
        }
        for ((en, et), (gn, gt)) in layout.store.iter().zip(store.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::config(format!(
                    "parameter {gn} {:?} does not match expected {en} {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        layout.store = store;
        Ok(layout)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn label_embeddings(&self) -> Option<&Tensor<T>> {
        self.ids.label_embeddings.map(|id| self.store.get(id))
    }
}
