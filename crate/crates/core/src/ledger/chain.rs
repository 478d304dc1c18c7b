use std::collections::BTreeMap;

use super::{LedgerError, Scope, Transaction, TxKind};
use crate::fingerprint::build_merkle;
use crate::hash::Digest;

/// Decides whether a transaction's certificate is acceptable for append.
pub trait CertificateCheck {
    fn check(&self, tx: &Transaction) -> bool;
}

/// Accepts any transaction whose certificate is present and names it.
/// Used when replaying already-committed blocks.
pub struct StructuralCheck;

impl CertificateCheck for StructuralCheck {
    fn check(&self, tx: &Transaction) -> bool {
        tx.certificate
            .as_ref()
            .is_some_and(|c| c.tx_id == tx.tx_id())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub merkle_root: Digest,
    pub timestamp: u64,
    pub txs: Vec<Transaction>,
}

pub const HEADER_LEN: usize = 8 + 32 + 32 + 8 + 4;

impl Block {
    /// `height u64 ‖ prev_hash ‖ merkle_root ‖ timestamp u64 ‖ tx_count u32`, all LE.
    pub fn header_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.height.to_le_bytes());
        out[8..40].copy_from_slice(self.prev_hash.as_bytes());
        out[40..72].copy_from_slice(self.merkle_root.as_bytes());
        out[72..80].copy_from_slice(&self.timestamp.to_le_bytes());
        out[80..84].copy_from_slice(&(self.txs.len() as u32).to_le_bytes());
        out
    }

    pub fn hash(&self) -> Digest {
        Digest::of(&self.header_bytes())
    }
}

/// Merkle root over transaction ids; all-zero for an empty block.
pub fn tx_root(txs: &[Transaction]) -> Digest {
    let ids: Vec<Digest> = txs.iter().map(Transaction::tx_id).collect();
    build_merkle(&ids).map(|t| t.root()).unwrap_or(Digest::ZERO)
}

/// Where a transaction sits in a ledger.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct Location {
    pub height: u64,
    pub tx_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainReport {
    pub ok: bool,
    pub first_bad_height: Option<u64>,
    pub reason: Option<String>,
}

impl ChainReport {
    fn good() -> ChainReport {
        ChainReport {
            ok: true,
            first_bad_height: None,
            reason: None,
        }
    }

    pub(crate) fn bad(height: u64, reason: impl Into<String>) -> ChainReport {
        ChainReport {
            ok: false,
            first_bad_height: Some(height),
            reason: Some(reason.into()),
        }
    }
}

/// Append-only chain of blocks for one scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ledger {
    scope: Scope,
    blocks: Vec<Block>,
    index: BTreeMap<Digest, Vec<Location>>,
    intact: bool,
}

impl Ledger {
    pub fn new(scope: Scope) -> Ledger {
        Ledger {
            scope,
            blocks: Vec::new(),
            index: BTreeMap::new(),
            intact: true,
        }
    }

    /// Rebuilds a ledger from decoded blocks without validating them; call
    /// [`Ledger::verify_chain`] before trusting the result.
    pub(crate) fn from_blocks(scope: Scope, blocks: Vec<Block>) -> Ledger {
        let mut ledger = Ledger {
            scope,
            blocks,
            index: BTreeMap::new(),
            intact: true,
        };
        for block in &ledger.blocks {
            index_block(&mut ledger.index, block);
        }
        ledger.intact = ledger.verify_chain().ok;
        ledger
    }

    pub fn scope(&self) -> &Scope {
        &self.scope
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.height)
    }

    pub fn tip_hash(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, Block::hash)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// The block that would extend this ledger with `txs`.
    pub fn assemble(&self, txs: Vec<Transaction>, timestamp: u64) -> Block {
        Block {
            height: self.height() + 1,
            prev_hash: self.tip_hash(),
            merkle_root: tx_root(&txs),
            timestamp,
            txs,
        }
    }

    /// Checks that `block` would be accepted by [`Ledger::append`].
    pub fn check_extends(
        &self,
        block: &Block,
        check: &dyn CertificateCheck,
    ) -> Result<(), LedgerError> {
        if !self.intact {
            return Err(LedgerError::ChainCorrupt(self.scope.id()));
        }
        if let Some(tx) = block.txs.iter().find(|tx| !check.check(tx)) {
            return Err(LedgerError::UnverifiedTransaction(tx.tx_id()));
        }
        if block.height != self.height() + 1 || block.prev_hash != self.tip_hash() {
            return Err(LedgerError::BadLink {
                expected_height: self.height() + 1,
                got_height: block.height,
            });
        }
        if block.merkle_root != tx_root(&block.txs) {
            return Err(LedgerError::BadMerkleRoot(block.height));
        }
        if block.timestamp < self.blocks.last().map_or(0, |b| b.timestamp) {
            return Err(LedgerError::NonMonotoneTimestamp(block.height));
        }
        Ok(())
    }

    /// Appends a block after checking linkage, merkle root and every
    /// transaction's certificate.
    pub fn append(
        &mut self,
        block: Block,
        check: &dyn CertificateCheck,
    ) -> Result<&Block, LedgerError> {
        self.check_extends(&block, check)?;
        index_block(&mut self.index, &block);
        self.blocks.push(block);
        Ok(self.blocks.last().unwrap())
    }

    /// Assembles and appends in one step.
    pub fn append_block(
        &mut self,
        txs: Vec<Transaction>,
        timestamp: u64,
        check: &dyn CertificateCheck,
    ) -> Result<&Block, LedgerError> {
        let block = self.assemble(txs, timestamp);
        self.append(block, check)
    }

    /// Recomputes every header link, merkle root and certificate binding.
    pub fn verify_chain(&self) -> ChainReport {
        let mut prev = Digest::ZERO;
        let mut prev_time = 0u64;
        for (i, block) in self.blocks.iter().enumerate() {
            let expected = i as u64 + 1;
            if block.height != expected {
                return ChainReport::bad(
                    expected,
                    format!("height {} where {} expected", block.height, expected),
                );
            }
            if block.prev_hash != prev {
                return ChainReport::bad(expected, "previous-hash link broken");
            }
            if block.merkle_root != tx_root(&block.txs) {
                return ChainReport::bad(expected, "merkle root does not match transactions");
            }
            if block.timestamp < prev_time {
                return ChainReport::bad(expected, "timestamp went backwards");
            }
            if let Some(tx) = block.txs.iter().find(|tx| !StructuralCheck.check(tx)) {
                return ChainReport::bad(
                    expected,
                    format!("transaction {} lacks a matching certificate", tx.tx_id()),
                );
            }
            prev = block.hash();
            prev_time = block.timestamp;
        }
        ChainReport::good()
    }

    /// Every location whose transaction anchors `payload`, oldest first.
    pub fn lookup(&self, payload: &Digest) -> &[Location] {
        self.index.get(payload).map_or(&[], Vec::as_slice)
    }

    pub fn tx_at(&self, loc: Location) -> Option<&Transaction> {
        let block = self.blocks.get((loc.height as usize).checked_sub(1)?)?;
        block.txs.get(loc.tx_index)
    }

    /// All transactions with their locations, in chain order.
    pub fn transactions(&self) -> impl Iterator<Item = (Location, &Transaction)> {
        self.blocks.iter().flat_map(|b| {
            b.txs.iter().enumerate().map(move |(i, tx)| {
                (
                    Location {
                        height: b.height,
                        tx_index: i,
                    },
                    tx,
                )
            })
        })
    }

    pub fn transactions_of(&self, kind: TxKind) -> impl Iterator<Item = (Location, &Transaction)> {
        self.transactions().filter(move |(_, tx)| tx.kind() == kind)
    }
}

fn index_block(index: &mut BTreeMap<Digest, Vec<Location>>, block: &Block) {
    for (i, tx) in block.txs.iter().enumerate() {
        index.entry(tx.payload_hash()).or_default().push(Location {
            height: block.height,
            tx_index: i,
        });
    }
}
