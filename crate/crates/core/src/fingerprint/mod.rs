//! Shard latents, their fingerprints, and Merkle anchoring.

mod latent;
pub mod merkle;

use thiserror::Error;

pub(crate) use latent::block_means;
pub use latent::{
    cosine, encode_shard, hash_latent, BlockEncoder, Fingerprint, LatentKind, LatentVector,
    ShardEncoder,
};
pub use merkle::{build_merkle, prove_leaf, verify_proof, MerkleProof, MerkleTree, Side};

#[derive(Debug, Error, PartialEq)]
pub enum FingerprintError {
    #[error("invalid latent dimension: {0}")]
    InvalidDim(String),
    #[error("latent dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed latent bytes: {0}")]
    Malformed(String),
}
