//! On-disk run directories and their verification.
//!
//! ```text
//! config.json                 resolved experiment config
//! images/<image_id>.pgm|pimg  anchored originals, stored losslessly
//! latents/<fingerprint>.lat   canonical latent bytes, named by their hash
//! nodes/<n>/<scope>.pslg      scope ledger replicas held by overlay node n
//! ```
//!
//! Every scope ledger is kept on at least two nodes. Comparing replicas is
//! what catches edits to the newest block header, which no later block
//! covers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::consensus::{ConsensusError, Network, RoundTrace};
use crate::fingerprint::{build_merkle, LatentVector, ShardEncoder};
use crate::hash::Digest;
use crate::imaging::format::{decode_any, decode_pgm, decode_pimg, encode_pgm, encode_pimg};
use crate::imaging::{fragment, Image};
use crate::ledger::{
    codec, decode_ledger, encode_ledger, Archive, LatentStore, Ledger, Scope, TxKind,
};
use crate::pipeline::{anchor_batch, PipelineError};
use crate::topology::{
    assign_roles, degree_order, generate_scale_free, place_shards, OverlayGraph, PlacementPolicy,
    Roles, TopologyError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Image(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads every `.pgm`/`.pimg` file in `dir`, sorted by name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>, RunError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "pimg")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(io_err(p))?;
            decode_any(&bytes).map_err(|e| RunError::Image(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// A lossless file encoding of `image`: PGM when every pixel is an 8-bit
/// level, PIMG when every pixel is an f32, otherwise none.
pub fn lossless_encoding(image: &Image) -> Option<(&'static str, Vec<u8>)> {
    let pgm = encode_pgm(image);
    if decode_pgm(&pgm).is_ok_and(|d| d == *image) {
        return Some(("pgm", pgm));
    }
    let pimg = encode_pimg(image);
    if decode_pimg(&pimg).is_ok_and(|d| d == *image) {
        return Some(("pimg", pimg));
    }
    None
}

/// Nodes holding each scope ledger: placement holders plus every leader,
/// topped up by degree to at least two.
pub fn scope_replicas(
    graph: &OverlayGraph,
    roles: &Roles,
    scopes: &[Scope],
    policy: PlacementPolicy,
    seed: u64,
) -> Result<BTreeMap<Scope, Vec<usize>>, TopologyError> {
    let keys: Vec<Digest> = scopes.iter().map(Scope::key).collect();
    let map = place_shards(graph, roles, &keys, policy, seed)?;
    let by_degree = degree_order(graph);
    let mut out = BTreeMap::new();
    for scope in scopes {
        let mut nodes: BTreeSet<usize> = map
            .holders(&scope.key())
            .unwrap_or_default()
            .iter()
            .copied()
            .collect();
        nodes.extend(roles.leaders.iter().copied());
        for n in &by_degree {
            if nodes.len() >= 2.min(graph.node_count()) {
                break;
            }
            nodes.insert(*n);
        }
        out.insert(scope.clone(), nodes.into_iter().collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorSummary {
    pub images: usize,
    pub submitted_txs: usize,
    pub committed_txs: usize,
    pub traces: Vec<RoundTrace>,
    /// Set when some round failed to commit everything.
    pub incomplete: Option<String>,
    pub fingerprint_on: bool,
}

/// The overlay and roles a config describes.
pub fn overlay(cfg: &ExperimentConfig) -> Result<(OverlayGraph, Roles), TopologyError> {
    let graph = generate_scale_free(cfg.nodes, cfg.m0, cfg.m, cfg.seed)?;
    let roles = assign_roles(&graph, cfg.leader_fraction);
    Ok((graph, roles))
}

/// Anchors `images` into the run directory `dir`, extending any ledgers
/// already there. With fingerprints switched off only the images and the
/// config are written.
pub fn anchor_run(
    cfg: &ExperimentConfig,
    images: &[Image],
    dir: &Path,
) -> Result<AnchorSummary, RunError> {
    cfg.validate()?;
    let (graph, roles) = overlay(cfg)?;
    let mut archive = if dir.join("nodes").is_dir() {
        load_archive(dir)?
    } else {
        Archive::new()
    };
    let mut summary = AnchorSummary {
        images: images.len(),
        submitted_txs: 0,
        committed_txs: 0,
        traces: Vec::new(),
        incomplete: None,
        fingerprint_on: cfg.ablation.fingerprint_on,
    };
    let mut encoded = Vec::with_capacity(images.len());
    for image in images {
        let (ext, bytes) = lossless_encoding(image).ok_or_else(|| {
            RunError::Image(format!(
                "image {} has no lossless file encoding",
                image.id()
            ))
        })?;
        encoded.push((format!("{}.{ext}", image.id().to_hex()), bytes));
    }
    if cfg.ablation.fingerprint_on {
        let mut net = Network::new(cfg.sim_config(), &graph)?;
        net.adopt_ledgers(archive.ledgers());
        for batch in images.chunks(cfg.anchor_batch) {
            let submitted = batch.len() * (cfg.grid.cells() + 1);
            summary.submitted_txs += submitted;
            match anchor_batch(&mut net, None, &mut archive, batch, cfg.grid, &cfg.encoder) {
                Ok(out) => {
                    summary.committed_txs += out.trace.committed_txs;
                    summary.traces.push(out.trace);
                }
                Err(PipelineError::Incomplete {
                    committed,
                    submitted,
                }) => {
                    summary.committed_txs += committed;
                    summary.incomplete =
                        Some(format!("committed {committed} of {submitted} transactions"));
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    for (name, bytes) in &encoded {
        write_file(&dir.join("images").join(name), bytes)?;
    }
    if cfg.ablation.fingerprint_on {
        for (fp, bytes) in archive.store().iter() {
            write_file(
                &dir.join("latents").join(format!("{}.lat", fp.to_hex())),
                bytes,
            )?;
        }
        let scopes: Vec<Scope> = archive.ledgers().keys().cloned().collect();
        let replicas =
            scope_replicas(&graph, &roles, &scopes, cfg.effective_placement(), cfg.seed)?;
        for (scope, nodes) in replicas {
            let bytes = encode_ledger(&archive.ledgers()[&scope]);
            for n in nodes {
                write_file(
                    &dir.join("nodes")
                        .join(n.to_string())
                        .join(format!("{}.pslg", scope.id())),
                    &bytes,
                )?;
            }
        }
    }
    Ok(summary)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Every file of a run directory, keyed by relative path with `/` separators.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Snapshot {
    pub fn read(dir: &Path) -> Result<Snapshot, RunError> {
        let mut files = BTreeMap::new();
        collect(dir, dir, &mut files)?;
        Ok(Snapshot { files })
    }

    pub fn config(&self) -> Result<Option<ExperimentConfig>, ConfigError> {
        self.files
            .get("config.json")
            .map(|b| ExperimentConfig::from_json(&String::from_utf8_lossy(b), "config.json"))
            .transpose()
    }

    fn under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a [u8])> + 'a {
        self.files
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    fn ledger_files(&self) -> impl Iterator<Item = (&str, &[u8])> + '_ {
        self.under("nodes/").filter(|(k, _)| k.ends_with(".pslg"))
    }
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), RunError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked from root");
            let key = rel
                .iter()
                .map(|c| c.to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(key, fs::read(&path).map_err(io_err(&path))?);
        }
    }
    Ok(())
}

/// The first intact replica of every scope plus all latents whose bytes
/// match their names.
pub fn load_archive(dir: &Path) -> Result<Archive, RunError> {
    Ok(archive_from_snapshot(&Snapshot::read(dir)?))
}

pub fn archive_from_snapshot(snap: &Snapshot) -> Archive {
    let mut ledgers: BTreeMap<Scope, Ledger> = BTreeMap::new();
    for (path, bytes) in snap.ledger_files() {
        let Some(scope) = scope_from_path(path) else {
            continue;
        };
        if ledgers.contains_key(&scope) {
            continue;
        }
        if let Ok(ledger) = decode_ledger(bytes) {
            if ledger.scope() == &scope && ledger.verify_chain().ok {
                ledgers.insert(scope, ledger);
            }
        }
    }
    let mut store = LatentStore::new();
    for (path, bytes) in snap.under("latents/") {
        if let Some(fp) = latent_name(path) {
            if Digest::of(bytes) == fp {
                store.insert_raw(fp, bytes.to_vec());
            }
        }
    }
    Archive::from_parts(ledgers, store)
}

fn scope_from_path(path: &str) -> Option<Scope> {
    Scope::parse(path.rsplit('/').next()?.strip_suffix(".pslg")?)
}

fn latent_name(path: &str) -> Option<Digest> {
    Digest::from_hex(path.strip_prefix("latents/")?.strip_suffix(".lat")?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScopeStatus {
    pub scope: String,
    pub replicas: usize,
    pub ok: bool,
    /// First offending `(height, reason)`; height 0 means the file header.
    pub problem: Option<(u64, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemStatus {
    pub path: String,
    pub ok: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scopes: Vec<ScopeStatus>,
    /// One entry per replica file, image and latent.
    pub items: Vec<ItemStatus>,
    pub passed: usize,
    pub total: usize,
}

impl VerifyReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }

    pub fn all_ok(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum VerifyOutcome {
    NoLedgers,
    /// Fingerprint anchoring was switched off for this run.
    Unavailable,
    Report(VerifyReport),
}

pub fn verify_dir(dir: &Path) -> Result<VerifyOutcome, RunError> {
    verify_snapshot(&Snapshot::read(dir)?)
}

/// Checks every scope replica, image and latent of a run.
pub fn verify_snapshot(snap: &Snapshot) -> Result<VerifyOutcome, RunError> {
    let cfg = snap.config()?.unwrap_or_default();
    if !cfg.ablation.fingerprint_on {
        return Ok(VerifyOutcome::Unavailable);
    }
    if snap.ledger_files().next().is_none() {
        return Ok(VerifyOutcome::NoLedgers);
    }
    let mut items = Vec::new();
    fn push(items: &mut Vec<ItemStatus>, path: &str, reason: Option<String>) {
        items.push(ItemStatus {
            path: path.to_string(),
            ok: reason.is_none(),
            reason,
        })
    }

    // Scope replicas: each must decode, name its own scope and verify; all
    // replicas of a scope must be identical.
    let mut by_scope: BTreeMap<String, Vec<(&str, &[u8])>> = BTreeMap::new();
    for (path, bytes) in snap.ledger_files() {
        let name = path.rsplit('/').next().unwrap_or(path);
        by_scope
            .entry(name.trim_end_matches(".pslg").to_string())
            .or_default()
            .push((path, bytes));
    }
    let mut scopes = Vec::new();
    let mut good: BTreeMap<Scope, Ledger> = BTreeMap::new();
    for (name, replicas) in &by_scope {
        let mut problem: Option<(u64, String)> = None;
        let mut decoded = Vec::new();
        for (path, bytes) in replicas {
            let checked = match (Scope::parse(name), decode_ledger(bytes)) {
                (None, _) => Err((0, format!("`{name}` is not a scope name"))),
                (_, Err(e)) => Err((malformed_height(&e), e.to_string())),
                (Some(scope), Ok(l)) if l.scope() != &scope => {
                    Err((0, format!("file holds ledger {}", l.scope())))
                }
                (Some(_), Ok(l)) => {
                    let report = l.verify_chain();
                    if report.ok {
                        Ok(l)
                    } else {
                        Err((
                            report.first_bad_height.unwrap_or(0),
                            report.reason.unwrap_or_default(),
                        ))
                    }
                }
            };
            match checked {
                Ok(l) => {
                    decoded.push((path, l));
                    push(&mut items, path, None);
                }
                Err((h, why)) => {
                    problem.get_or_insert((h, why.clone()));
                    push(&mut items, path, Some(format!("height {h}: {why}")));
                }
            }
        }
        if problem.is_none() {
            let reference = replicas[0].1;
            if let Some((path, _)) = replicas.iter().find(|(_, b)| *b != reference) {
                let h = first_divergence(
                    &decoded[0].1,
                    &decoded.iter().find(|(p, _)| *p == path).unwrap().1,
                );
                let why = "replicas disagree".to_string();
                problem = Some((h, why.clone()));
                for (p, _) in replicas {
                    mark_failed(&mut items, p, &format!("height {h}: {why}"));
                }
            }
        }
        if problem.is_none() {
            let (_, ledger) = decoded.swap_remove(0);
            good.insert(ledger.scope().clone(), ledger);
        }
        scopes.push(ScopeStatus {
            scope: name.clone(),
            replicas: replicas.len(),
            ok: problem.is_none(),
            problem,
        });
    }
    let archive = Archive::from_parts(good, LatentStore::new());

    // Images: raster hash, anchored root, per-shard fingerprints, Merkle root.
    for (path, bytes) in snap.under("images/") {
        let reason = check_image(path, bytes, &cfg, &archive).err();
        items.push(ItemStatus {
            path: path.to_string(),
            ok: reason.is_none(),
            reason,
        });
    }

    // Latents: content hash equals name, parses, and is anchored somewhere.
    let anchored: BTreeSet<Digest> = archive
        .ledgers()
        .values()
        .flat_map(|l| {
            l.transactions_of(TxKind::ShardFingerprint)
                .map(|(_, tx)| tx.payload_hash())
        })
        .collect();
    for (path, bytes) in snap.under("latents/") {
        let reason = match latent_name(path) {
            None => Some("unexpected file name".to_string()),
            Some(fp) if Digest::of(bytes) != fp => Some("content does not hash to its name".into()),
            Some(_) if LatentVector::from_canonical_bytes(bytes).is_err() => {
                Some("not a canonical latent".into())
            }
            Some(fp) if !anchored.contains(&fp) => {
                Some("fingerprint not anchored on any intact ledger".into())
            }
            Some(_) => None,
        };
        items.push(ItemStatus {
            path: path.to_string(),
            ok: reason.is_none(),
            reason,
        });
    }

    let passed = items.iter().filter(|i| i.ok).count();
    let total = items.len();
    Ok(VerifyOutcome::Report(VerifyReport {
        scopes,
        items,
        passed,
        total,
    }))
}

fn mark_failed(items: &mut [ItemStatus], path: &str, reason: &str) {
    if let Some(item) = items.iter_mut().find(|i| i.path == path) {
        item.ok = false;
        item.reason.get_or_insert_with(|| reason.to_string());
    }
}

fn malformed_height(e: &crate::ledger::LedgerError) -> u64 {
    match e {
        crate::ledger::LedgerError::Malformed { height, .. } => *height,
        _ => 0,
    }
}

/// First height at which two ledgers' encoded blocks differ.
fn first_divergence(a: &Ledger, b: &Ledger) -> u64 {
    let blocks = a.blocks().len().max(b.blocks().len());
    for i in 0..blocks {
        let enc = |l: &Ledger| {
            l.blocks().get(i).map(|blk| {
                let mut v = Vec::new();
                codec::encode_block(blk, &mut v);
                v
            })
        };
        if enc(a) != enc(b) {
            return i as u64 + 1;
        }
    }
    0
}

fn check_image(
    path: &str,
    bytes: &[u8],
    cfg: &ExperimentConfig,
    archive: &Archive,
) -> Result<(), String> {
    let name = path.strip_prefix("images/").unwrap_or(path);
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let image = decode_any(bytes).map_err(|e| format!("unreadable: {e}"))?;
    let id = image.id().to_hex();
    if id != stem {
        return Err("raster does not hash to its name".into());
    }
    let (root, rows, cols) = archive
        .root_anchor(&id)
        .ok_or("no root anchor on an intact GLOBAL ledger")?;
    if (rows, cols) != (cfg.grid.rows, cfg.grid.cols) {
        return Err(format!("anchored with a {rows}x{cols} grid"));
    }
    let shards = fragment(&image, cfg.grid).map_err(|e| e.to_string())?;
    let mut leaves = Vec::with_capacity(shards.len());
    for shard in &shards {
        let fp =
            crate::fingerprint::hash_latent(&cfg.encoder.encode(shard).map_err(|e| e.to_string())?);
        let scope = Scope::Cell {
            row: shard.row,
            col: shard.col,
        };
        let anchored = archive
            .find(
                &scope,
                TxKind::ShardFingerprint,
                &id,
                Some((shard.row, shard.col)),
            )
            .map(|(_, tx)| tx.payload_hash());
        if anchored != Some(fp) {
            return Err(format!(
                "shard ({},{}) fingerprint not anchored in {scope}",
                shard.row, shard.col
            ));
        }
        leaves.push(fp);
    }
    let rebuilt = build_merkle(&leaves).map_err(|e| e.to_string())?.root();
    if rebuilt != root {
        return Err("Merkle root differs from the anchored root".into());
    }
    Ok(())
}
