use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LedgerError;
use crate::consensus::QuorumCertificate;
use crate::hash::Digest;

pub const MAX_METADATA_BYTES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    ShardFingerprint,
    RootAnchor,
    ModelFingerprint,
    ReconstructionEvent,
}

impl TxKind {
    pub fn tag(self) -> u8 {
        match self {
            TxKind::ShardFingerprint => 0,
            TxKind::RootAnchor => 1,
            TxKind::ModelFingerprint => 2,
            TxKind::ReconstructionEvent => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<TxKind> {
        Some(match tag {
            0 => TxKind::ShardFingerprint,
            1 => TxKind::RootAnchor,
            2 => TxKind::ModelFingerprint,
            3 => TxKind::ReconstructionEvent,
            _ => return None,
        })
    }

    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            TxKind::ShardFingerprint => &["image_id", "row", "col"],
            TxKind::RootAnchor => &["image_id"],
            TxKind::ModelFingerprint => &["node_id"],
            TxKind::ReconstructionEvent => &["image_id"],
        }
    }
}

/// Ordered `key=value` pairs, encoded as `k1=v1;k2=v2` with keys sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata(BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Metadata {
        Metadata::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Metadata {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn encode(&self) -> Result<String, LedgerError> {
        for (k, v) in &self.0 {
            if k.is_empty() || k.contains(['=', ';']) || v.contains(';') {
                return Err(LedgerError::InvalidMetadata(format!("`{k}={v}`")));
            }
        }
        let text = self
            .0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        if text.len() > MAX_METADATA_BYTES {
            return Err(LedgerError::MetadataTooLarge(text.len()));
        }
        Ok(text)
    }

    pub fn parse(text: &str) -> Metadata {
        Metadata(
            text.split(';')
                .filter_map(|pair| pair.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

/// A ledger record anchoring one 32-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    kind: TxKind,
    payload_hash: Digest,
    metadata: String,
    tx_id: Digest,
    pub certificate: Option<QuorumCertificate>,
}

/// Validates metadata for `kind` and hashes the canonical body.
pub fn create_transaction(
    kind: TxKind,
    payload_hash: Digest,
    metadata: &Metadata,
) -> Result<Transaction, LedgerError> {
    for key in kind.required_keys() {
        if metadata.get(key).is_none() {
            return Err(LedgerError::MissingMetadataKey {
                kind,
                key: (*key).to_string(),
            });
        }
    }
    let text = metadata.encode()?;
    Ok(Transaction::from_parts(kind, payload_hash, text, None))
}

impl Transaction {
    pub(crate) fn from_parts(
        kind: TxKind,
        payload_hash: Digest,
        metadata: String,
        certificate: Option<QuorumCertificate>,
    ) -> Transaction {
        let tx_id = Digest::of(&body_bytes(kind, &payload_hash, &metadata));
        Transaction {
            kind,
            payload_hash,
            metadata,
            tx_id,
            certificate,
        }
    }

    pub fn kind(&self) -> TxKind {
        self.kind
    }

    pub fn payload_hash(&self) -> Digest {
        self.payload_hash
    }

    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn meta(&self) -> Metadata {
        Metadata::parse(&self.metadata)
    }

    pub fn tx_id(&self) -> Digest {
        self.tx_id
    }

    pub fn with_certificate(mut self, cert: QuorumCertificate) -> Transaction {
        self.certificate = Some(cert);
        self
    }

    /// `kind u8 ‖ payload_hash ‖ meta_len u16 LE ‖ metadata`.
    pub fn body_bytes(&self) -> Vec<u8> {
        body_bytes(self.kind, &self.payload_hash, &self.metadata)
    }
}

fn body_bytes(kind: TxKind, payload: &Digest, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(35 + metadata.len());
    out.push(kind.tag());
    out.extend_from_slice(payload.as_bytes());
    out.extend_from_slice(&(metadata.len() as u16).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard_meta() -> Metadata {
        Metadata::new()
            .with("image_id", "ab")
            .with("row", 0)
            .with("col", 3)
    }

    #[test]
    fn shard_transaction_happy_path() {
        let tx =
            create_transaction(TxKind::ShardFingerprint, Digest::of(b"h"), &shard_meta()).unwrap();
        assert_eq!(tx.metadata(), "col=3;image_id=ab;row=0");
        assert_eq!(tx.meta().get("row"), Some("0"));
        assert_eq!(tx.tx_id(), Digest::of(&tx.body_bytes()));
    }

    #[test]
    fn missing_key_rejected() {
        let meta = Metadata::new().with("image_id", "ab").with("col", 3);
        assert_eq!(
            create_transaction(TxKind::ShardFingerprint, Digest::ZERO, &meta),
            Err(LedgerError::MissingMetadataKey {
                kind: TxKind::ShardFingerprint,
                key: "row".into()
            })
        );
    }

    #[test]
    fn oversized_metadata_rejected() {
        let meta = Metadata::new().with("node_id", "x".repeat(5000));
        assert!(matches!(
            create_transaction(TxKind::ModelFingerprint, Digest::ZERO, &meta),
            Err(LedgerError::MetadataTooLarge(_))
        ));
    }

    #[test]
    fn identical_bodies_share_id() {
        let a = create_transaction(
            TxKind::RootAnchor,
            Digest::of(b"r"),
            &Metadata::new().with("image_id", "x"),
        )
        .unwrap();
        let b = create_transaction(
            TxKind::RootAnchor,
            Digest::of(b"r"),
            &Metadata::new().with("image_id", "x"),
        )
        .unwrap();
        assert_eq!(a.tx_id(), b.tx_id());
        let c = create_transaction(
            TxKind::ReconstructionEvent,
            Digest::of(b"r"),
            &Metadata::new().with("image_id", "x"),
        )
        .unwrap();
        assert_ne!(a.tx_id(), c.tx_id());
    }

    #[test]
    fn separator_characters_rejected() {
        let meta = Metadata::new().with("image_id", "a;b");
        assert!(matches!(
            create_transaction(TxKind::RootAnchor, Digest::ZERO, &meta),
            Err(LedgerError::InvalidMetadata(_))
        ));
    }
}
