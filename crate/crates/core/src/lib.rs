//! Hierarchical multi-interest mining and partitioned two-tower retrieval.
//!
//! The pipeline has two stages. Stage one organizes the item catalog into a
//! hierarchical k-means tree whose node paths act as semantic category ids,
//! then trains a small transformer encoder-decoder to generate the category
//! paths a user is interested in from their behavior sequence (decoding is
//! beam search constrained by the tree, with an end token for early stopping
//! at internal nodes). Stage two splits each user's behavior per generated
//! category (a user -> category -> items layout), trains a two-tower scoring
//! model with in-category negatives, and retrieves candidates per category
//! from the matching sub-library, merging results under beam-probability
//! quotas.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: interaction parsing, behavior sequences, user splits, and
//!   synthetic corpora with planted hierarchies for testing.
//! - [`embed`]: co-occurrence based item embeddings feeding the clustering.
//! - [`taxonomy`]: hierarchical k-means tree, category ids, prefix trie.
//! - [`nn`]: the reverse-mode autodiff engine and optimizer shared by both
//!   trainable models.
//! - [`miner`]: the seq2seq interest miner and constrained beam search.
//! - [`retrieval`]: behavior splitting, two-tower training, exact top-k
//!   search, and quota merging.
//! - [`eval`]: Recall@M / HitRate@M evaluation over test users.

pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod measure;
pub mod miner;
pub mod nn;
pub mod retrieval;
pub mod taxonomy;

pub use error::{Error, Result};

/// Opaque user identifier.
pub type UserId = u64;
/// Opaque item identifier.
pub type ItemId = u64;

/// Derives a stage- or component-specific seed from a master seed and a
/// label, so independent pipeline stages never share an RNG stream.
///
/// Uses FNV-1a over the label followed by splitmix64 finalization; stable
/// across platforms and releases.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
