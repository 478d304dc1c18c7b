//! Content-addressed latent side store, latent retrieval and storage accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{codec, Ledger, LedgerError, Location, Scope, TxKind};
use crate::fingerprint::{cosine, hash_latent, Fingerprint, LatentVector};
use crate::hash::Digest;

/// Fingerprint → canonical latent bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LatentStore {
    entries: BTreeMap<Fingerprint, Vec<u8>>,
}

impl LatentStore {
    pub fn new() -> LatentStore {
        LatentStore::default()
    }

    pub fn put(&mut self, z: &LatentVector) -> Fingerprint {
        let bytes = z.canonical_bytes();
        let fp = Digest::of(&bytes);
        self.entries.insert(fp, bytes);
        fp
    }

    /// Inserts raw bytes under a claimed fingerprint (used when loading).
    pub fn insert_raw(&mut self, fp: Fingerprint, bytes: Vec<u8>) {
        self.entries.insert(fp, bytes);
    }

    /// The stored latent, only if its bytes still hash to `fp`.
    pub fn get(&self, fp: &Fingerprint) -> Option<LatentVector> {
        let bytes = self.entries.get(fp)?;
        if Digest::of(bytes) != *fp {
            return None;
        }
        LatentVector::from_canonical_bytes(bytes).ok()
    }

    pub fn raw(&self, fp: &Fingerprint) -> Option<&[u8]> {
        self.entries.get(fp).map(Vec::as_slice)
    }

    pub fn raw_mut(&mut self, fp: &Fingerprint) -> Option<&mut Vec<u8>> {
        self.entries.get_mut(fp)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Fingerprint, &[u8])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    ExactOnly,
    #[default]
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Exact,
    Nearest,
}

/// Where an anchored latent was found.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scope: Scope,
    pub location: Location,
    pub tx_id: Digest,
    pub payload_hash: Digest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub latent: LatentVector,
    pub provenance: Provenance,
    pub mode: RetrievalMode,
    /// Cosine between the query and the returned latent.
    pub cosine: f64,
}

/// Looks up the anchored latent for `query`.
///
/// An exact hit on `hash_latent(query)` wins. Otherwise, with
/// [`Fallback::Nearest`], every shard anchor of this ledger is scanned and
/// the one with the highest cosine to `query` is returned; ties keep the
/// earliest anchor.
pub fn retrieve_latent(
    ledger: &Ledger,
    store: &LatentStore,
    query: &LatentVector,
    fallback: Fallback,
) -> Result<Retrieval, LedgerError> {
    let make = |loc: Location, latent: LatentVector, mode, cos| {
        let tx = ledger.tx_at(loc).expect("location from this ledger");
        Retrieval {
            latent,
            provenance: Provenance {
                scope: ledger.scope().clone(),
                location: loc,
                tx_id: tx.tx_id(),
                payload_hash: tx.payload_hash(),
            },
            mode,
            cosine: cos,
        }
    };
    let fp = hash_latent(query);
    for &loc in ledger.lookup(&fp) {
        if ledger.tx_at(loc).map(|t| t.kind()) == Some(TxKind::ShardFingerprint) {
            if let Some(latent) = store.get(&fp) {
                let cos = cosine(query, &latent).unwrap_or(0.0);
                return Ok(make(loc, latent, RetrievalMode::Exact, cos));
            }
        }
    }
    if fallback == Fallback::ExactOnly {
        return Err(LedgerError::NotFound(format!(
            "{} in {}",
            fp,
            ledger.scope().id()
        )));
    }
    let mut best: Option<(f64, Location, LatentVector)> = None;
    for (loc, tx) in ledger.transactions_of(TxKind::ShardFingerprint) {
        let Some(latent) = store.get(&tx.payload_hash()) else {
            continue;
        };
        let Ok(cos) = cosine(query, &latent) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _, _)| cos > *b) {
            best = Some((cos, loc, latent));
        }
    }
    best.map(|(cos, loc, latent)| make(loc, latent, RetrievalMode::Nearest, cos))
        .ok_or_else(|| {
            LedgerError::NotFound(format!("no anchored latents in {}", ledger.scope().id()))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StorageMetrics {
    pub bytes_per_node: Vec<u64>,
    pub mean_bytes_per_node: f64,
    /// Transaction copies across all nodes divided by distinct transactions.
    pub replication_factor: f64,
    pub block_counts: Vec<usize>,
}

/// Aggregates encoded ledger sizes over node-local ledger sets.
pub fn storage_metrics(nodes: &[Vec<Ledger>]) -> StorageMetrics {
    let mut bytes_per_node = Vec::with_capacity(nodes.len());
    let mut block_counts = Vec::with_capacity(nodes.len());
    let mut copies = 0usize;
    let mut distinct = BTreeSet::new();
    for ledgers in nodes {
        let mut bytes = 0u64;
        let mut blocks = 0usize;
        for ledger in ledgers {
            bytes += codec::encode_ledger(ledger).len() as u64;
            blocks += ledger.blocks().len();
            for (_, tx) in ledger.transactions() {
                copies += 1;
                distinct.insert(tx.tx_id());
            }
        }
        bytes_per_node.push(bytes);
        block_counts.push(blocks);
    }
    let mean = if nodes.is_empty() {
        0.0
    } else {
        bytes_per_node.iter().sum::<u64>() as f64 / nodes.len() as f64
    };
    StorageMetrics {
        bytes_per_node,
        mean_bytes_per_node: mean,
        replication_factor: if distinct.is_empty() {
            0.0
        } else {
            copies as f64 / distinct.len() as f64
        },
        block_counts,
    }
}
