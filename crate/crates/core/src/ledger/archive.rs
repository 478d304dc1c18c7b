//! All scope ledgers of one replica plus its latent store.

use std::collections::BTreeMap;

use super::{
    scope_of, Block, CertificateCheck, LatentStore, Ledger, LedgerError, Location, Scope,
    Transaction, TxKind,
};
use crate::fingerprint::{build_merkle, prove_leaf, verify_proof};
use crate::hash::Digest;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    ledgers: BTreeMap<Scope, Ledger>,
    store: LatentStore,
}

impl Archive {
    pub fn new() -> Archive {
        Archive::default()
    }

    pub fn from_parts(ledgers: BTreeMap<Scope, Ledger>, store: LatentStore) -> Archive {
        Archive { ledgers, store }
    }

    pub fn ledgers(&self) -> &BTreeMap<Scope, Ledger> {
        &self.ledgers
    }

    pub fn ledger(&self, scope: &Scope) -> Option<&Ledger> {
        self.ledgers.get(scope)
    }

    pub fn ledger_mut(&mut self, scope: &Scope) -> Option<&mut Ledger> {
        self.ledgers.get_mut(scope)
    }

    pub fn store(&self) -> &LatentStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut LatentStore {
        &mut self.store
    }

    /// Appends a committed block to the ledger of its scope.
    pub fn apply(&mut self, block: Block, check: &dyn CertificateCheck) -> Result<(), LedgerError> {
        let scope = block.txs.first().map(scope_of).unwrap_or(Scope::Global);
        let ledger = self
            .ledgers
            .entry(scope.clone())
            .or_insert_with(|| Ledger::new(scope));
        ledger.append(block, check).map(|_| ())
    }

    /// Newest `kind` transaction whose `image_id` metadata matches, in `scope`.
    pub fn find(
        &self,
        scope: &Scope,
        kind: TxKind,
        image_hex: &str,
        cell: Option<(usize, usize)>,
    ) -> Option<(Location, &Transaction)> {
        let ledger = self.ledgers.get(scope)?;
        let mut hit = None;
        for (loc, tx) in ledger.transactions_of(kind) {
            let meta = tx.meta();
            if meta.get("image_id") != Some(image_hex) {
                continue;
            }
            if let Some((r, c)) = cell {
                if meta.get("row") != Some(r.to_string().as_str())
                    || meta.get("col") != Some(c.to_string().as_str())
                {
                    continue;
                }
            }
            hit = Some((loc, tx));
        }
        hit
    }

    /// The anchored Merkle root of an image and its grid shape.
    pub fn root_anchor(&self, image_hex: &str) -> Option<(Digest, usize, usize)> {
        let (_, tx) = self.find(&Scope::Global, TxKind::RootAnchor, image_hex, None)?;
        let meta = tx.meta();
        Some((
            tx.payload_hash(),
            meta.get("rows")?.parse().ok()?,
            meta.get("cols")?.parse().ok()?,
        ))
    }

    /// Scopes whose chain fails verification.
    pub fn broken_scopes(&self) -> Vec<Scope> {
        self.ledgers
            .iter()
            .filter(|(_, l)| !l.verify_chain().ok)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Re-verifies that `fingerprint` is the anchored leaf for cell
    /// `(row, col)` of the image, by Merkle path against the root anchored
    /// in `GLOBAL`. Chain integrity is checked separately.
    pub fn verify_shard(
        &self,
        image_hex: &str,
        row: usize,
        col: usize,
        fingerprint: &Digest,
    ) -> bool {
        let Some((root, rows, cols)) = self.root_anchor(image_hex) else {
            return false;
        };
        if row >= rows || col >= cols {
            return false;
        }
        let mut leaves = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                match self.find(
                    &Scope::Cell { row: r, col: c },
                    TxKind::ShardFingerprint,
                    image_hex,
                    Some((r, c)),
                ) {
                    Some((_, tx)) => leaves.push(tx.payload_hash()),
                    None => return false,
                }
            }
        }
        let index = row * cols + col;
        if leaves[index] != *fingerprint {
            return false;
        }
        let Ok(tree) = build_merkle(&leaves) else {
            return false;
        };
        prove_leaf(&tree, index).is_ok_and(|proof| verify_proof(&root, fingerprint, &proof))
    }
}
