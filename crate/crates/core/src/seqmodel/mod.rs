//! Decoder-only transformer over vision, language and latent query tokens.
//!
//! The same weights serve two layouts: the prior layout puts the query tokens
//! before the instruction, so causal masking keeps them language-blind, and
//! the posterior layout puts them after it.

mod checkpoint;
mod layout;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use layout::{build_layout, layouts_built, Branch, Role, Segment, SequenceLayout};
pub use model::{HiddenStates, LanguageLogProbs, PrefixCache, SeqModel};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Base vocabulary V; the language head predicts over these ids only.
    pub base_vocab: usize,
    /// Number of latent query tokens K, with ids `V..V+K`.
    pub num_queries: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            base_vocab: 59,
            num_queries: 8,
            max_seq_len: 160,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model", "must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1");
        }
        if self.num_queries == 0 {
            return bad("num_queries", "must be at least 1");
        }
        if self.base_vocab == 0 {
            return bad("base_vocab", "must be positive");
        }
        if self.max_seq_len < self.num_queries + 2 {
            return bad("max_seq_len", "cannot hold vision, language and queries");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.num_queries
    }

    pub fn query_ids(&self) -> std::ops::Range<usize> {
        self.base_vocab..self.base_vocab + self.num_queries
    }

    pub fn layout(&self, branch: Branch, vision: &[usize], language: &[usize]) -> Result<SequenceLayout> {
        build_layout(branch, vision, language, self.base_vocab, self.num_queries, self.max_seq_len)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
