//! Fragment, fingerprint and anchor images through consensus.

use thiserror::Error;

use crate::consensus::{Network, QuorumCheck, RoundTrace};
use crate::fingerprint::{build_merkle, BlockEncoder, FingerprintError, ShardEncoder};
use crate::hash::Digest;
use crate::imaging::{fragment, Image, ImagingError, ShardGrid};
use crate::ledger::{
    create_transaction, Archive, LatentStore, LedgerError, Metadata, Scope, Transaction, TxKind,
};
use crate::topology::PlacementMap;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("consensus committed {committed} of {submitted} transactions")]
    Incomplete { committed: usize, submitted: usize },
}

/// Everything anchored for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnchor {
    pub image_id: Digest,
    pub root: Digest,
    /// Row-major shard fingerprints.
    pub fingerprints: Vec<Digest>,
    pub transactions: Vec<Transaction>,
}

/// Fragments and encodes `image`, puts its latents in `store` and returns
/// one shard transaction per cell followed by the `GLOBAL` root anchor.
pub fn image_transactions(
    image: &Image,
    grid: ShardGrid,
    encoder: &BlockEncoder,
    store: &mut LatentStore,
) -> Result<ImageAnchor, PipelineError> {
    let shards = fragment(image, grid)?;
    let image_hex = image.id().to_hex();
    let mut fingerprints = Vec::with_capacity(shards.len());
    let mut transactions = Vec::with_capacity(shards.len() + 1);
    for shard in &shards {
        let fp = store.put(&encoder.encode(shard)?);
        let meta = Metadata::new()
            .with("image_id", &image_hex)
            .with("row", shard.row)
            .with("col", shard.col);
        transactions.push(create_transaction(TxKind::ShardFingerprint, fp, &meta)?);
        fingerprints.push(fp);
    }
    let root = build_merkle(&fingerprints)?.root();
    let meta = Metadata::new()
        .with("image_id", &image_hex)
        .with("rows", grid.rows)
        .with("cols", grid.cols)
        .with("width", image.width())
        .with("height", image.height());
    transactions.push(create_transaction(TxKind::RootAnchor, root, &meta)?);
    Ok(ImageAnchor {
        image_id: image.id(),
        root,
        fingerprints,
        transactions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorOutcome {
    pub anchors: Vec<ImageAnchor>,
    pub trace: RoundTrace,
    pub stalled: Vec<Scope>,
}

/// Anchors a batch of images in one consensus round and applies the
/// committed blocks to `archive`. Fails with [`PipelineError::Incomplete`]
/// if any transaction was left out; blocks that did commit stay applied.
pub fn anchor_batch(
    net: &mut Network,
    placement: Option<&PlacementMap>,
    archive: &mut Archive,
    images: &[Image],
    grid: ShardGrid,
    encoder: &BlockEncoder,
) -> Result<AnchorOutcome, PipelineError> {
    let mut anchors = Vec::with_capacity(images.len());
    for image in images {
        anchors.push(image_transactions(
            image,
            grid,
            encoder,
            archive.store_mut(),
        )?);
    }
    let txs: Vec<Transaction> = anchors
        .iter()
        .flat_map(|a| a.transactions.iter().cloned())
        .collect();
    let outcome = net.run_round(&txs, placement);
    let check = QuorumCheck {
        rule: net.rule(),
        keyring: net.keyring(),
    };
    for block in outcome.committed {
        archive.apply(block, &check)?;
    }
    if outcome.trace.committed_txs < txs.len() {
        return Err(PipelineError::Incomplete {
            committed: outcome.trace.committed_txs,
            submitted: txs.len(),
        });
    }
    Ok(AnchorOutcome {
        anchors,
        trace: outcome.trace,
        stalled: outcome.stalled,
    })
}
