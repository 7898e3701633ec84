//! Frozen backend interfaces and their deterministic toy implementations.
//!
//! The pipeline only talks to [`SpeechEncoder`], [`Tokenizer`] and
//! [`LanguageModel`] / [`DifferentiableLm`]; the toy types in this module are
//! small enough to run and differentiate on a laptop CPU.

mod corpus;
mod tokenizer;
mod toy_encoder;
mod toy_lm;

pub use corpus::{generate_synthetic_corpus, CorpusRequest, SyntheticCorpus};
pub use tokenizer::{WordTokenizer, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN};
pub use toy_encoder::{toy_encoder, ToyEncoder, ToyTaskSpec};
pub use toy_lm::{toy_lm, ToyLm, ToyLmCache, ToyLmConfig};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, FrameMatrix};
use crate::error::Result;
use crate::training::{Dropout, LoraAdapters};

pub type TokenId = u32;

pub trait SpeechEncoder: Send + Sync {
    /// Stable identifier recorded in projector checkpoints.
    fn id(&self) -> String;
    fn d_enc(&self) -> usize;
    fn encode(&self, frames: &FrameMatrix) -> Result<FrameMatrix>;
    /// Digest of the frozen weights.
    fn checksum(&self) -> String;
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    /// Inverse of `encode` up to the tokenizer's normalization; special
    /// tokens are dropped.
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionShape {
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAttentionShape {
    pub query: ProjectionShape,
    pub value: ProjectionShape,
}

/// Per-layer shapes of the attention query and value projections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGeometry {
    pub layers: Vec<LayerAttentionShape>,
}

impl AttentionGeometry {
    pub fn uniform(n_layers: usize, query: ProjectionShape, value: ProjectionShape) -> Self {
        Self {
            layers: vec![LayerAttentionShape { query, value }; n_layers],
        }
    }
}

/// Inference surface of a frozen causal LM.
pub trait LanguageModel: Send + Sync {
    fn id(&self) -> String;
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> TokenId;
    fn pad_id(&self) -> TokenId;
    fn max_positions(&self) -> usize;
    fn attention_geometry(&self) -> Option<AttentionGeometry>;
    fn embed(&self, ids: &[TokenId]) -> EmbeddingMatrix;
    /// Next-token logits for every position of one unpadded sequence.
    fn logits(&self, embeddings: ArrayView2<f64>) -> Array2<f64>;
    fn checksum(&self) -> String;
}

/// A frozen LM that can backpropagate to its input embeddings and to
/// optional low-rank adapters on its query/value projections.
pub trait DifferentiableLm: LanguageModel {
    type Cache: Send;

    fn forward_with(
        &self,
        embeddings: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        dropout: Option<&mut Dropout>,
    ) -> (Array2<f64>, Self::Cache);

    /// Returns the gradient w.r.t. the input embeddings and accumulates
    /// adapter gradients into `adapter_grads` when given.
    fn backward(
        &self,
        cache: &Self::Cache,
        dlogits: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        adapter_grads: Option<&mut LoraAdapters>,
    ) -> Array2<f64>;
}

/// The frozen components one pipeline run uses.
pub struct Backends<'a, L: ?Sized> {
    pub encoder: &'a dyn SpeechEncoder,
    pub tokenizer: &'a dyn Tokenizer,
    pub lm: &'a L,
}

impl<L: ?Sized> Clone for Backends<'_, L> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<L: ?Sized> Copy for Backends<'_, L> {}
