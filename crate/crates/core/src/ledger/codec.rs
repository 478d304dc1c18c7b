//! On-disk ledger format.
//!
//! ```text
//! "PSLG" | version u8 = 1 | scope_len u16 LE | scope UTF-8
//! block*: height u64 | prev_hash [32] | merkle_root [32] | timestamp u64 | tx_count u32
//!         tx*: kind u8 | payload_hash [32] | meta_len u16 | metadata | cert_len u32 | certificate
//! ```
//! All integers little-endian.

use super::chain::HEADER_LEN;
use super::{Block, Ledger, LedgerError, Scope, Transaction, TxKind};
use crate::consensus::QuorumCertificate;
use crate::hash::Digest;

pub const MAGIC: &[u8; 4] = b"PSLG";
pub const VERSION: u8 = 1;

pub fn encode_ledger(ledger: &Ledger) -> Vec<u8> {
    let scope = ledger.scope().id();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(scope.len() as u16).to_le_bytes());
    out.extend_from_slice(scope.as_bytes());
    for block in ledger.blocks() {
        encode_block(block, &mut out);
    }
    out
}

pub fn encode_block(block: &Block, out: &mut Vec<u8>) {
    out.extend_from_slice(&block.header_bytes());
    for tx in &block.txs {
        encode_tx(tx, out);
    }
}

/// Serialized size of one transaction record.
pub fn encoded_tx_len(tx: &Transaction) -> usize {
    let cert_len = tx.certificate.as_ref().map_or(0, |c| c.to_bytes().len());
    1 + 32 + 2 + tx.metadata().len() + 4 + cert_len
}

fn encode_tx(tx: &Transaction, out: &mut Vec<u8>) {
    out.extend_from_slice(&tx.body_bytes());
    let cert = tx
        .certificate
        .as_ref()
        .map(QuorumCertificate::to_bytes)
        .unwrap_or_default();
    out.extend_from_slice(&(cert.len() as u32).to_le_bytes());
    out.extend_from_slice(&cert);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    height: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| LedgerError::Malformed {
                height: self.height,
                msg: format!("truncated at byte {}", self.pos),
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, LedgerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, LedgerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<Digest, LedgerError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }

    fn malformed(&self, msg: impl Into<String>) -> LedgerError {
        LedgerError::Malformed {
            height: self.height,
            msg: msg.into(),
        }
    }
}

/// Parses a ledger file. Structural problems are reported with the height
/// of the block being read (0 for the file header).
pub fn decode_ledger(bytes: &[u8]) -> Result<Ledger, LedgerError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        height: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(r.malformed("bad magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let scope_len = r.u16()? as usize;
    let scope_text =
        std::str::from_utf8(r.take(scope_len)?).map_err(|_| r.malformed("scope is not UTF-8"))?;
    let scope = Scope::parse(scope_text)
        .ok_or_else(|| r.malformed(format!("unknown scope `{scope_text}`")))?;
    let mut blocks = Vec::new();
    while r.pos < bytes.len() {
        r.height = blocks.len() as u64 + 1;
        if bytes.len() - r.pos < HEADER_LEN {
            return Err(r.malformed("truncated block header"));
        }
        let height = r.u64()?;
        let prev_hash = r.digest()?;
        let merkle_root = r.digest()?;
        let timestamp = r.u64()?;
        let tx_count = r.u32()? as usize;
        let mut txs = Vec::with_capacity(tx_count.min(4096));
        for _ in 0..tx_count {
            let tag = r.u8()?;
            let kind = TxKind::from_tag(tag)
                .ok_or_else(|| r.malformed(format!("unknown tx kind {tag}")))?;
            let payload = r.digest()?;
            let meta_len = r.u16()? as usize;
            let meta = std::str::from_utf8(r.take(meta_len)?)
                .map_err(|_| r.malformed("metadata is not UTF-8"))?
                .to_string();
            let cert_len = r.u32()? as usize;
            let cert_bytes = r.take(cert_len)?;
            let certificate = if cert_len == 0 {
                None
            } else {
                Some(QuorumCertificate::from_bytes(cert_bytes).map_err(|e| r.malformed(e))?)
            };
            txs.push(Transaction::from_parts(kind, payload, meta, certificate));
        }
        blocks.push(Block {
            height,
            prev_hash,
            merkle_root,
            timestamp,
            txs,
        });
    }
    Ok(Ledger::from_blocks(scope, blocks))
}
