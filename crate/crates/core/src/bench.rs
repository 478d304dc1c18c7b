//! Experiment runners behind `bench table4|scale|robustness`.
//!
//! Every runner is a pure function of the config; CSV output starts with a
//! `# config_sha256=` line so rows can be traced back to their inputs.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::consensus::{
    fit_scaling, simulate_batch, ConsensusError, Network, ScalingFit, SimConfig,
};
use crate::fingerprint::FingerprintError;
use crate::hash::Digest;
use crate::imaging::{corrupt_gaussian, fragment, metrics, Image, ImagingError};
use crate::ledger::{codec, Archive, LatentStore, Transaction};
use crate::pipeline::{anchor_batch, image_transactions, PipelineError};
use crate::reconstruction::{image_cosine, reconstruct_image, ReconstructionError};
use crate::rundir::{load_image_dir, overlay, RunError};
use crate::topology::{
    degree_order, place_shards, replication_factor, storage_per_node, OverlayGraph, PlacementMap,
    PlacementPolicy, TopologyError,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0}")]
    Input(String),
}

/// `count` images of side `size`: the configured directory when set,
/// otherwise seeded phantoms.
pub fn source_images(
    cfg: &ExperimentConfig,
    count: usize,
    size: usize,
) -> Result<Vec<Image>, BenchError> {
    match &cfg.image_dir {
        Some(dir) => {
            let mut images = load_image_dir(dir)?;
            if images.len() < count {
                return Err(BenchError::Input(format!(
                    "{} holds {} images, {count} needed",
                    dir.display(),
                    images.len()
                )));
            }
            images.truncate(count);
            Ok(images)
        }
        None => Ok(crate::corpus::phantom_corpus(count, size, size, cfg.seed)),
    }
}

fn header(config_hash: &Digest) -> String {
    format!("# config_sha256={}\n", config_hash.to_hex())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shard transactions, their shard keys and the size of one stored copy
/// (encoded transaction plus canonical latent), index-aligned.
type Workload = (Vec<Transaction>, Vec<Digest>, Vec<u64>);

fn shard_workload(cfg: &ExperimentConfig, shards: usize) -> Result<Workload, BenchError> {
    let images = source_images(cfg, shards.div_ceil(cfg.grid.cells()), cfg.scale.image_size)?;
    let mut store = LatentStore::new();
    let mut txs = Vec::with_capacity(shards);
    let mut keys = Vec::with_capacity(shards);
    'outer: for image in &images {
        let anchor = image_transactions(image, cfg.grid, &cfg.encoder, &mut store)?;
        for (shard, tx) in fragment(image, cfg.grid)?.iter().zip(anchor.transactions) {
            if txs.len() == shards {
                break 'outer;
            }
            keys.push(shard.key());
            txs.push(tx);
        }
    }
    let sizes = txs
        .iter()
        .map(|tx| {
            let latent = store.raw(&tx.payload_hash()).map_or(0, <[u8]>::len);
            (codec::encoded_tx_len(tx) + latent) as u64
        })
        .collect();
    Ok((txs, keys, sizes))
}

/// Ledger-side commit latency of one round plus replication: copies fan
/// out from the highest-degree rank, and the busiest node persists its
/// copies one after another.
fn replication_ms(
    graph: &OverlayGraph,
    map: &PlacementMap,
    sim: &SimConfig,
    t_write_ms: f64,
) -> f64 {
    let source = degree_order(graph)[0];
    let hops = graph.bfs(source);
    let mut writes = vec![0usize; map.node_count];
    let mut max_hops = 0;
    for nodes in map.assignments.values() {
        for &n in nodes {
            writes[n] += 1;
            max_hops = max_hops.max(hops[n]);
        }
    }
    max_hops as f64 * sim.base_delay_ms + *writes.iter().max().unwrap_or(&0) as f64 * t_write_ms
}

fn round_latencies(
    cfg: &ExperimentConfig,
    graph: &OverlayGraph,
    map: &PlacementMap,
    txs: &[Transaction],
) -> Result<Vec<f64>, BenchError> {
    let sim = cfg.sim_config();
    let mut net = Network::new(sim.clone(), graph)?;
    let repl = replication_ms(graph, map, &sim, cfg.table4.t_write_ms);
    Ok((0..cfg.table4.rounds)
        .map(|_| net.run_round(txs, Some(map)).trace.total_ms + repl)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table4Row {
    pub policy: String,
    pub replication_factor: f64,
    pub storage_mean_mb: f64,
    pub storage_max_mb: f64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table4Report {
    pub config_hash: Digest,
    pub shards: usize,
    pub nodes: usize,
    pub rows: Vec<Table4Row>,
}

impl Table4Report {
    pub fn row(&self, label: &str) -> Option<&Table4Row> {
        self.rows.iter().find(|r| r.policy == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = header(&self.config_hash);
        out.push_str("policy,replication_factor,storage_mean_mb,storage_max_mb,latency_mean_ms,latency_std_ms,rounds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.4},{:.6},{:.6},{:.4},{:.4},{}",
                r.policy,
                r.replication_factor,
                r.storage_mean_mb,
                r.storage_max_mb,
                r.latency_mean_ms,
                r.latency_std_ms,
                r.rounds
            );
        }
        out
    }
}

/// Storage, replication and commit latency under each placement policy.
/// A stored copy is the encoded transaction plus its canonical latent.
pub fn run_table4(cfg: &ExperimentConfig) -> Result<Table4Report, BenchError> {
    cfg.validate()?;
    let (graph, roles) = overlay(cfg)?;
    let (txs, keys, sizes) = shard_workload(cfg, cfg.table4.shards)?;
    let copy_bytes: std::collections::BTreeMap<Digest, u64> =
        keys.iter().copied().zip(sizes).collect();
    let policies = [
        PlacementPolicy::FullLedger,
        PlacementPolicy::RandomDup {
            copies: cfg.table4.dup_copies,
        },
        PlacementPolicy::GftLocality,
    ];
    let mut rows = Vec::new();
    for policy in policies {
        let map = place_shards(&graph, &roles, &keys, policy, cfg.seed)?;
        let storage = storage_per_node(&map, |k| copy_bytes[k]);
        let mb: Vec<f64> = storage.iter().map(|b| *b as f64 / 1e6).collect();
        let (latency_mean_ms, latency_std_ms) =
            mean_std(&round_latencies(cfg, &graph, &map, &txs)?);
        rows.push(Table4Row {
            policy: policy.label(),
            replication_factor: replication_factor(&map),
            storage_mean_mb: mb.iter().sum::<f64>() / mb.len() as f64,
            storage_max_mb: mb.iter().copied().fold(0.0, f64::max),
            latency_mean_ms,
            latency_std_ms,
            rounds: cfg.table4.rounds,
        });
    }
    Ok(Table4Report {
        config_hash: cfg.hash(),
        shards: txs.len(),
        nodes: cfg.nodes,
        rows,
    })
}

/// Mean and std of commit latency under the config's effective placement.
pub fn measure_commit_latency(cfg: &ExperimentConfig) -> Result<(f64, f64), BenchError> {
    cfg.validate()?;
    let (graph, roles) = overlay(cfg)?;
    let (txs, keys, _) = shard_workload(cfg, cfg.table4.shards)?;
    let map = place_shards(&graph, &roles, &keys, cfg.effective_placement(), cfg.seed)?;
    Ok(mean_std(&round_latencies(cfg, &graph, &map, &txs)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleRow {
    pub batch_images: usize,
    pub txs: usize,
    pub makespan_ms: f64,
    pub throughput_img_s: f64,
    pub latency_ms_per_img: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ranks: usize,
    pub txs: usize,
    pub phase1_ms: f64,
    pub gather_ms: f64,
    pub modeled_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleReport {
    pub config_hash: Digest,
    pub rows: Vec<ScaleRow>,
    /// Consecutive batch pairs where throughput did not drop.
    pub throughput_pairs_ok: usize,
    /// Consecutive batch pairs where per-image latency did not rise.
    pub latency_pairs_ok: usize,
    pub pairs: usize,
    pub sweep: Vec<SweepRow>,
    pub fit: Option<ScalingFit>,
    /// Phase-1 time at the smallest swept P over the largest.
    pub phase1_speedup: f64,
}

impl ScaleReport {
    pub fn throughput_trend(&self) -> bool {
        self.throughput_pairs_ok == self.pairs
    }

    pub fn latency_trend(&self) -> bool {
        self.latency_pairs_ok == self.pairs
    }

    pub fn to_csv(&self) -> String {
        let mut out = header(&self.config_hash);
        out.push_str("batch_images,txs,makespan_ms,throughput_img_s,latency_ms_per_img\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.6},{:.4}",
                r.batch_images, r.txs, r.makespan_ms, r.throughput_img_s, r.latency_ms_per_img
            );
        }
        let _ = writeln!(
            out,
            "# throughput_non_decreasing={} ({}/{}) latency_non_increasing={} ({}/{})",
            self.throughput_trend(),
            self.throughput_pairs_ok,
            self.pairs,
            self.latency_trend(),
            self.latency_pairs_ok,
            self.pairs
        );
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = header(&self.config_hash);
        out.push_str("ranks,txs,phase1_ms,gather_ms,modeled_ms\n");
        for r in &self.sweep {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4}",
                r.ranks, r.txs, r.phase1_ms, r.gather_ms, r.modeled_ms
            );
        }
        if let Some(fit) = self.fit {
            let _ = writeln!(
                out,
                "# fit a={:.6} b={:.6} r_squared={:.6} phase1_speedup={:.4}",
                fit.a, fit.b, fit.r_squared, self.phase1_speedup
            );
        }
        out
    }
}

/// Throughput and latency per batch size, each batch on a fresh network,
/// plus the parallel sweep over `scale.sweep_ranks`.
pub fn run_scalability(cfg: &ExperimentConfig) -> Result<ScaleReport, BenchError> {
    cfg.validate()?;
    let (graph, _) = overlay(cfg)?;
    let largest = cfg.scale.batches.iter().copied().max().unwrap_or(0);
    // enough images to cover both the largest batch and the sweep workload
    let for_sweep = cfg.scale.sweep_txs.div_ceil(cfg.grid.cells() + 1);
    let images = source_images(cfg, largest.max(for_sweep), cfg.scale.image_size)?;
    let mut store = LatentStore::new();
    let per_image: Vec<Vec<Transaction>> = images
        .iter()
        .map(|img| {
            image_transactions(img, cfg.grid, &cfg.encoder, &mut store).map(|a| a.transactions)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for &b in &cfg.scale.batches {
        let mut net = Network::new(cfg.sim_config(), &graph)?;
        let m = simulate_batch(&mut net, None, &per_image[..b]);
        rows.push(ScaleRow {
            batch_images: b,
            txs: per_image[..b].iter().map(Vec::len).sum(),
            makespan_ms: m.makespan_ms,
            throughput_img_s: m.throughput_img_s,
            latency_ms_per_img: m.latency_ms_per_img,
        });
    }
    let pairs = rows.len().saturating_sub(1);
    let throughput_pairs_ok = rows
        .windows(2)
        .filter(|w| w[1].throughput_img_s >= w[0].throughput_img_s)
        .count();
    let latency_pairs_ok = rows
        .windows(2)
        .filter(|w| w[1].latency_ms_per_img <= w[0].latency_ms_per_img)
        .count();

    // The sweep uses a fixed transaction count drawn from the same corpus.
    let sweep_txs: Vec<Transaction> = per_image
        .iter()
        .flatten()
        .take(cfg.scale.sweep_txs)
        .cloned()
        .collect();
    let mut sweep = Vec::new();
    for &p in &cfg.scale.sweep_ranks {
        let sim = SimConfig {
            ranks: p,
            faults: (p - 1) / 3,
            injected: Default::default(),
            ..cfg.sim_config()
        };
        let mut net = Network::new(sim, &graph)?;
        let t = net.run_round(&sweep_txs, None).trace;
        sweep.push(SweepRow {
            ranks: p,
            txs: sweep_txs.len(),
            phase1_ms: t.phase1_ms,
            gather_ms: t.gather_ms,
            modeled_ms: t.phase1_ms + t.gather_ms,
        });
    }
    let fit = fit_scaling(
        &sweep
            .iter()
            .map(|r| (r.txs, r.ranks, r.modeled_ms))
            .collect::<Vec<_>>(),
    );
    let lo = sweep.iter().min_by_key(|r| r.ranks);
    let hi = sweep.iter().max_by_key(|r| r.ranks);
    let phase1_speedup = match (lo, hi) {
        (Some(lo), Some(hi)) if hi.phase1_ms > 0.0 => lo.phase1_ms / hi.phase1_ms,
        _ => 1.0,
    };
    Ok(ScaleReport {
        config_hash: cfg.hash(),
        rows,
        throughput_pairs_ok,
        latency_pairs_ok,
        pairs,
        sweep,
        fit,
        phase1_speedup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub images: usize,
    pub cosine_corrupted: f64,
    pub cosine_reconstructed: f64,
    /// Fraction of images whose reconstruction is strictly closer in cosine.
    pub win_rate: f64,
    pub psnr_corrupted: f64,
    pub psnr_reconstructed: f64,
    pub ssim_corrupted: f64,
    pub ssim_reconstructed: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub config_hash: Digest,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn row(&self, sigma: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.sigma == sigma)
    }

    /// Reconstructed cosine never rises as sigma grows.
    pub fn reconstructed_monotone(&self) -> bool {
        let mut rows: Vec<&RobustnessRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        rows.windows(2)
            .all(|w| w[1].cosine_reconstructed <= w[0].cosine_reconstructed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = header(&self.config_hash);
        out.push_str(
            "sigma,images,cosine_corrupted,cosine_reconstructed,win_rate,psnr_corrupted,psnr_reconstructed,\
             ssim_corrupted,ssim_reconstructed,loss_total,alpha,lambda1,lambda2\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{},{},{}",
                r.sigma,
                r.images,
                r.cosine_corrupted,
                r.cosine_reconstructed,
                r.win_rate,
                r.psnr_corrupted,
                r.psnr_reconstructed,
                r.ssim_corrupted,
                r.ssim_reconstructed,
                r.loss_total,
                self.alpha,
                self.lambda1,
                self.lambda2
            );
        }
        out
    }
}

/// Seed for the noise added to image `index` at sigma position `k`.
fn noise_seed(seed: u64, index: usize, k: usize) -> u64 {
    Digest::of_parts(&[
        b"noise",
        &seed.to_le_bytes(),
        &(index as u64).to_le_bytes(),
        &(k as u64).to_le_bytes(),
    ])
    .prefix_u64()
}

/// Anchors the robustness corpus, then corrupts and reconstructs every
/// image at each sigma.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<RobustnessReport, BenchError> {
    cfg.validate()?;
    let (graph, _) = overlay(cfg)?;
    let images = source_images(cfg, cfg.robustness_images, cfg.image_size)?;
    let mut net = Network::new(cfg.sim_config(), &graph)?;
    let mut archive = Archive::new();
    for batch in images.chunks(cfg.anchor_batch) {
        anchor_batch(&mut net, None, &mut archive, batch, cfg.grid, &cfg.encoder)?;
    }
    let rc = cfg.reconstruction();
    let mut rows = Vec::new();
    for (k, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut acc = [0.0f64; 7];
        let mut wins = 0;
        for (i, original) in images.iter().enumerate() {
            let corrupted = corrupt_gaussian(original, sigma, noise_seed(cfg.seed, i, k));
            let result = reconstruct_image(&corrupted, &archive, &rc, Some(original))?;
            let rec = result.metrics.expect("original supplied");
            let cos_c = image_cosine(&corrupted, original, cfg.grid, &cfg.encoder)?;
            if rec.cosine > cos_c {
                wins += 1;
            }
            let psnr_c = metrics::psnr(&corrupted, original)?;
            let ssim_c = metrics::ssim(&corrupted, original)?;
            for (a, v) in acc.iter_mut().zip([
                cos_c,
                rec.cosine,
                psnr_c,
                rec.psnr,
                ssim_c,
                rec.ssim,
                rec.losses.total,
            ]) {
                *a += v;
            }
        }
        let n = images.len() as f64;
        let m = acc.map(|v| v / n);
        rows.push(RobustnessRow {
            sigma,
            images: images.len(),
            cosine_corrupted: m[0],
            cosine_reconstructed: m[1],
            win_rate: wins as f64 / n,
            psnr_corrupted: m[2],
            psnr_reconstructed: m[3],
            ssim_corrupted: m[4],
            ssim_reconstructed: m[5],
            loss_total: m[6],
        });
    }
    Ok(RobustnessReport {
        config_hash: cfg.hash(),
        alpha: rc.alpha,
        lambda1: rc.weights.lambda1,
        lambda2: rc.weights.lambda2,
        rows,
    })
}
