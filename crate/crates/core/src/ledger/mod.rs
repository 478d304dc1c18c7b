//! Append-only, per-scope hash chains of fingerprint anchors.
//!
//! There is one ledger per grid cell plus a `GLOBAL` ledger for image roots
//! and model fingerprints. Latents live beside the chain in a
//! [`LatentStore`] keyed by fingerprint; blocks carry only the 32-byte
//! anchors.

mod archive;
mod chain;
pub mod codec;
mod store;
mod tx;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hash::Digest;

pub use archive::Archive;
pub use chain::{tx_root, Block, CertificateCheck, ChainReport, Ledger, Location, StructuralCheck};
pub use codec::{decode_ledger, encode_ledger};
pub use store::{
    retrieve_latent, storage_metrics, Fallback, LatentStore, Provenance, Retrieval, RetrievalMode,
    StorageMetrics,
};
pub use tx::{create_transaction, Metadata, Transaction, TxKind, MAX_METADATA_BYTES};

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("{kind:?} transaction is missing metadata key `{key}`")]
    MissingMetadataKey { kind: TxKind, key: String },
    #[error("metadata is {0} bytes, limit is 4096")]
    MetadataTooLarge(usize),
    #[error("invalid metadata entry {0}")]
    InvalidMetadata(String),
    #[error("transaction {0} has no acceptable quorum certificate")]
    UnverifiedTransaction(Digest),
    #[error("ledger {0} failed verification; refusing to append")]
    ChainCorrupt(String),
    #[error("block height {got_height} does not extend the chain (expected {expected_height})")]
    BadLink {
        expected_height: u64,
        got_height: u64,
    },
    #[error("merkle root of block {0} does not match its transactions")]
    BadMerkleRoot(u64),
    #[error("timestamp of block {0} precedes its parent")]
    NonMonotoneTimestamp(u64),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed ledger at height {height}: {msg}")]
    Malformed { height: u64, msg: String },
}

/// Ledger scope: one grid cell, or the global chain.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Global,
    Cell { row: usize, col: usize },
}

impl Scope {
    pub fn id(&self) -> String {
        match self {
            Scope::Global => "GLOBAL".into(),
            Scope::Cell { row, col } => format!("cell-{row}-{col}"),
        }
    }

    pub fn parse(text: &str) -> Option<Scope> {
        if text == "GLOBAL" {
            return Some(Scope::Global);
        }
        let rest = text.strip_prefix("cell-")?;
        let (r, c) = rest.split_once('-')?;
        let parse = |s: &str| {
            (!s.is_empty()
                && s.bytes().all(|b| b.is_ascii_digit())
                && (s == "0" || !s.starts_with('0')))
            .then(|| s.parse().ok())
            .flatten()
        };
        Some(Scope::Cell {
            row: parse(r)?,
            col: parse(c)?,
        })
    }

    /// Placement key of the scope itself.
    pub fn key(&self) -> Digest {
        Digest::of(self.id().as_bytes())
    }
}

/// The ledger a transaction belongs on: shard anchors go to their grid
/// cell, everything else to `GLOBAL`.
pub fn scope_of(tx: &Transaction) -> Scope {
    let meta = tx.meta();
    let cell = || {
        Some(Scope::Cell {
            row: meta.get("row")?.parse().ok()?,
            col: meta.get("col")?.parse().ok()?,
        })
    };
    match tx.kind() {
        TxKind::ShardFingerprint => cell().unwrap_or(Scope::Global),
        _ => Scope::Global,
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Scope::parse(&text).ok_or_else(|| serde::de::Error::custom(format!("bad scope `{text}`")))
    }
}
