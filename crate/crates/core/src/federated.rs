//! Per-node denoiser fitting, model fingerprinting and aggregation.
//!
//! The model is an affine map `y = a·x + b` fitted in closed form. Only its
//! canonical bytes are fingerprinted, so any opaque weight blob could take
//! its place.

use serde::Serialize;
use thiserror::Error;

use crate::consensus::{Network, QuorumCheck};
use crate::hash::Digest;
use crate::imaging::{Image, ImagingError};
use crate::ledger::{
    create_transaction, Archive, LedgerError, Location, Metadata, Scope, Transaction, TxKind,
};

#[derive(Debug, Error, PartialEq)]
pub enum FederatedError {
    #[error("no training pairs")]
    NoData,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("consensus round aborted; model of node {0} not anchored")]
    Abort(String),
    #[error("records failed re-verification: {0:?}")]
    TamperedRecord(Vec<String>),
    #[error("nothing to aggregate")]
    NoRecords,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelParams {
    pub a: f64,
    pub b: f64,
}

impl ModelParams {
    /// `a` then `b`, each as an f64 LE.
    pub fn canonical_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.a.to_le_bytes());
        out[8..].copy_from_slice(&self.b.to_le_bytes());
        out
    }

    pub fn fingerprint(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    pub fn apply(&self, image: &Image) -> Image {
        let pixels = image.pixels().iter().map(|x| self.a * x + self.b).collect();
        Image::from_clamped(image.width(), image.height(), pixels).expect("same dimensions")
    }
}

/// Least-squares `(a, b)` over every pixel of every `(corrupted, original)`
/// pair. If all corrupted pixels are equal the fit is `a = 0, b = mean(y)`.
pub fn fit_local_model(pairs: &[(Image, Image)]) -> Result<ModelParams, FederatedError> {
    if pairs.is_empty() {
        return Err(FederatedError::NoData);
    }
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        x.same_dims(y)?;
        n += x.pixels().len() as f64;
        sx += x.pixels().iter().sum::<f64>();
        sy += y.pixels().iter().sum::<f64>();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in pairs {
        for (xi, yi) in x.pixels().iter().zip(y.pixels()) {
            sxx += (xi - mx) * (xi - mx);
            sxy += (xi - mx) * (yi - my);
        }
    }
    if sxx == 0.0 {
        return Ok(ModelParams { a: 0.0, b: my });
    }
    let a = sxy / sxx;
    Ok(ModelParams { a, b: my - a * mx })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelRecord {
    pub node_id: String,
    pub params: ModelParams,
    pub fingerprint: Digest,
    pub location: Location,
    pub tx_id: Digest,
}

impl ModelRecord {
    /// `{node_id, a, b, fingerprint_hex, height, tx_id_hex}`.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "node_id": self.node_id,
            "a": self.params.a,
            "b": self.params.b,
            "fingerprint_hex": self.fingerprint.to_hex(),
            "height": self.location.height,
            "tx_id_hex": self.tx_id.to_hex(),
        })
        .to_string()
    }
}

/// Certifies a ModelFingerprint transaction in its own consensus round and
/// appends it to `GLOBAL`. On abort nothing is written.
pub fn anchor_model(
    node_id: &str,
    params: ModelParams,
    archive: &mut Archive,
    net: &mut Network,
) -> Result<ModelRecord, FederatedError> {
    let fingerprint = params.fingerprint();
    let meta = Metadata::new()
        .with("node_id", node_id)
        .with("round", net.rounds());
    let tx = create_transaction(TxKind::ModelFingerprint, fingerprint, &meta)?;
    let outcome = net.run_round(std::slice::from_ref(&tx), None);
    let Some(block) = outcome.committed.into_iter().next() else {
        return Err(FederatedError::Abort(node_id.to_string()));
    };
    let check = QuorumCheck {
        rule: net.rule(),
        keyring: net.keyring(),
    };
    archive.apply(block, &check)?;
    let ledger = archive.ledger(&Scope::Global).expect("block just applied");
    let location = *ledger
        .lookup(&fingerprint)
        .iter()
        .rev()
        .find(|loc| ledger.tx_at(**loc).map(Transaction::tx_id) == Some(tx.tx_id()))
        .expect("committed tx is indexed");
    Ok(ModelRecord {
        node_id: node_id.to_string(),
        params,
        fingerprint,
        location,
        tx_id: tx.tx_id(),
    })
}

/// True if the record's params hash to its fingerprint and the ledger
/// location holds a ModelFingerprint tx anchoring that fingerprint for the
/// same node.
pub fn verify_record(record: &ModelRecord, archive: &Archive) -> bool {
    if record.params.fingerprint() != record.fingerprint {
        return false;
    }
    let Some(ledger) = archive.ledger(&Scope::Global) else {
        return false;
    };
    ledger.tx_at(record.location).is_some_and(|tx| {
        tx.kind() == TxKind::ModelFingerprint
            && tx.payload_hash() == record.fingerprint
            && tx.tx_id() == record.tx_id
            && tx.meta().get("node_id") == Some(record.node_id.as_str())
    })
}

/// Unweighted mean of verified records; any failing record aborts the
/// aggregation and is named in the error.
pub fn aggregate_models(
    records: &[ModelRecord],
    archive: &Archive,
) -> Result<ModelParams, FederatedError> {
    if records.is_empty() {
        return Err(FederatedError::NoRecords);
    }
    let bad: Vec<String> = records
        .iter()
        .filter(|r| !verify_record(r, archive))
        .map(|r| r.node_id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(FederatedError::TamperedRecord(bad));
    }
    let n = records.len() as f64;
    Ok(ModelParams {
        a: records.iter().map(|r| r.params.a).sum::<f64>() / n,
        b: records.iter().map(|r| r.params.b).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FederatedRound {
    pub records: Vec<ModelRecord>,
    pub aggregate: ModelRecord,
}

/// One full round: every node fits and anchors its model, the verified
/// records are averaged and the average is anchored under `aggregator_id`.
pub fn federated_round(
    nodes: &[(String, Vec<(Image, Image)>)],
    aggregator_id: &str,
    archive: &mut Archive,
    net: &mut Network,
) -> Result<FederatedRound, FederatedError> {
    let mut records = Vec::with_capacity(nodes.len());
    for (node_id, pairs) in nodes {
        let params = fit_local_model(pairs)?;
        records.push(anchor_model(node_id, params, archive, net)?);
    }
    let params = aggregate_models(&records, archive)?;
    let aggregate = anchor_model(aggregator_id, params, archive, net)?;
    Ok(FederatedRound { records, aggregate })
}
