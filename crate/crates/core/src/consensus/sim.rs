//! Logical-time simulation of the three-phase round.
//!
//! Ranks map one-to-one onto overlay nodes (rank `r` is node `r`), so a
//! rank's voting weight is that node's degree. Time is simulated: compute
//! steps cost declared constants and every message round costs one link
//! delay (`base + seeded jitter`). Nothing here reads a wall clock.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Keyring, QuorumRule, Signature};
use crate::hash::Digest;
use crate::ledger::{scope_of, Block, CertificateCheck, Ledger, Scope, Transaction};
use crate::topology::{OverlayGraph, PlacementMap, PlacementPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("invalid consensus configuration: {0}")]
    ConfigInvalid(String),
    #[error("rank {rank} out of range for {ranks} ranks")]
    RankOutOfRange { rank: usize, ranks: usize },
}

/// How a faulty rank misbehaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Sends nothing, votes for nothing.
    Crash,
    /// Random signature bytes; as leader, proposes blocks that fail validation.
    GarbageSig,
    /// Valid signatures to even ranks and garbage to odd ones; as leader,
    /// proposes two different valid blocks to two halves of the network.
    Equivocate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Process count `P`.
    pub ranks: usize,
    /// Tolerated Byzantine count `f`.
    pub faults: usize,
    pub base_delay_ms: f64,
    pub jitter_ms: f64,
    pub t_verify_ms: f64,
    pub t_sign_ms: f64,
    pub t_aggregate_ms: f64,
    pub t_assemble_ms: f64,
    /// How long ranks wait for a leader before moving to the next one.
    pub timeout_ms: f64,
    /// Fixed per-batch cost (ingest, scheduling) in [`simulate_batch`].
    pub batch_overhead_ms: f64,
    /// Fragmentation plus encoding cost per image, spread over ranks.
    pub t_prepare_ms: f64,
    /// Transactions per round, used by batch drivers.
    pub batch_size: usize,
    /// Overrides the default degree-weight threshold.
    pub weight_threshold: Option<u64>,
    pub injected: BTreeMap<usize, FaultMode>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ranks: 4,
            faults: 1,
            base_delay_ms: 0.5,
            jitter_ms: 0.25,
            t_verify_ms: 2.0,
            t_sign_ms: 0.005,
            t_aggregate_ms: 0.05,
            t_assemble_ms: 5.0,
            timeout_ms: 20.0,
            batch_overhead_ms: 400.0,
            t_prepare_ms: 1.0,
            batch_size: 64,
            weight_threshold: None,
            injected: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn new(ranks: usize, faults: usize, seed: u64) -> SimConfig {
        SimConfig {
            ranks,
            faults,
            seed,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |m: String| Err(ConsensusError::ConfigInvalid(m));
        if self.ranks < 3 * self.faults + 1 {
            return bad(format!(
                "P = {} < 3f + 1 = {}",
                self.ranks,
                3 * self.faults + 1
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        let times = [
            self.base_delay_ms,
            self.jitter_ms,
            self.t_verify_ms,
            self.t_sign_ms,
            self.t_aggregate_ms,
            self.t_assemble_ms,
            self.timeout_ms,
            self.batch_overhead_ms,
            self.t_prepare_ms,
        ];
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return bad("timing constants must be finite and non-negative".into());
        }
        if let Some(r) = self.injected.keys().find(|r| **r >= self.ranks) {
            return bad(format!("fault injected at rank {r} but P = {}", self.ranks));
        }
        Ok(())
    }

    pub fn behavior(&self, rank: usize) -> Option<FaultMode> {
        self.injected.get(&rank).copied()
    }

    pub fn is_honest(&self, rank: usize) -> bool {
        !self.injected.contains_key(&rank)
    }

    /// Votes needed to commit a block: any two such sets share an honest rank.
    pub fn commit_quorum(&self) -> usize {
        (2 * self.faults + 1).max((self.ranks + self.faults) / 2 + 1)
    }
}

/// Replaces `rank`'s behavior for all later rounds.
pub fn inject_fault(
    config: &SimConfig,
    rank: usize,
    mode: FaultMode,
) -> Result<SimConfig, ConsensusError> {
    if rank >= config.ranks {
        return Err(ConsensusError::RankOutOfRange {
            rank,
            ranks: config.ranks,
        });
    }
    let mut next = config.clone();
    next.injected.insert(rank, mode);
    Ok(next)
}

/// Honest ranks MAC the tx id; Byzantine ones emit random bytes.
pub fn sign_transaction(
    keyring: &Keyring,
    rank: usize,
    tx: &Transaction,
    honest: bool,
    rng: &mut impl RngCore,
) -> Signature {
    if honest {
        keyring.sign(rank, &tx.tx_id())
    } else {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Signature {
            signer: rank,
            bytes,
        }
    }
}

/// Simulated durations and outcome of one round. `total_ms` is the sum of
/// the four phases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: u64,
    pub phase1_ms: f64,
    pub gather_ms: f64,
    pub aggregate_ms: f64,
    pub assemble_ms: f64,
    pub total_ms: f64,
    pub committed_txs: usize,
    pub msgs: u64,
    /// `(scope, height, block hash)` of every committed block.
    pub blocks: Vec<(Scope, u64, Digest)>,
    pub leader_attempts: usize,
}

pub const TRACE_CSV_HEADER: &str =
    "round,phase1_ms,gather_ms,aggregate_ms,assemble_ms,total_ms,committed_txs,msgs";

impl RoundTrace {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
            self.round,
            self.phase1_ms,
            self.gather_ms,
            self.aggregate_ms,
            self.assemble_ms,
            self.total_ms,
            self.committed_txs,
            self.msgs
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    /// Blocks committed this round, one per scope that had certified txs.
    pub committed: Vec<Block>,
    /// Scopes whose certified txs could not be committed by any leader.
    pub stalled: Vec<Scope>,
    /// Transactions that did not gather a quorum certificate.
    pub uncertified: Vec<Digest>,
    pub trace: RoundTrace,
}

impl RoundOutcome {
    /// Nothing was committed.
    pub fn is_abort(&self) -> bool {
        self.committed.is_empty()
    }
}

/// Two honest ranks hold different blocks at the same height of a scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conflict {
    pub scope: Scope,
    pub height: u64,
    pub ranks: (usize, usize),
}

/// Certificate check performed by honest ranks on proposed blocks.
pub struct QuorumCheck<'a> {
    pub rule: &'a QuorumRule,
    pub keyring: &'a Keyring,
}

impl CertificateCheck for QuorumCheck<'_> {
    fn check(&self, tx: &Transaction) -> bool {
        tx.certificate
            .as_ref()
            .is_some_and(|c| c.tx_id == tx.tx_id() && self.rule.accepts(self.keyring, c))
    }
}

/// A simulated process network with per-rank ledger replicas.
#[derive(Clone, Debug)]
pub struct Network {
    config: SimConfig,
    keyring: Keyring,
    rule: QuorumRule,
    degrees: Vec<u64>,
    /// Ranks by degree, highest first, ties to the lower rank.
    by_degree: Vec<usize>,
    ledgers: Vec<BTreeMap<Scope, Ledger>>,
    round: u64,
    clock_ms: f64,
}

impl Network {
    pub fn new(config: SimConfig, graph: &OverlayGraph) -> Result<Network, ConsensusError> {
        config.validate()?;
        if config.ranks > graph.node_count() {
            return Err(ConsensusError::ConfigInvalid(format!(
                "P = {} exceeds the {} overlay nodes ranks map onto",
                config.ranks,
                graph.node_count()
            )));
        }
        let degrees: Vec<u64> = (0..config.ranks).map(|r| graph.degree(r) as u64).collect();
        let mut rule =
            QuorumRule::with_default_threshold(config.faults, degrees.clone(), graph.mean_degree());
        if let Some(t) = config.weight_threshold {
            rule.weight_threshold = t;
        }
        let mut by_degree: Vec<usize> = (0..config.ranks).collect();
        by_degree.sort_by_key(|r| (std::cmp::Reverse(degrees[*r]), *r));
        Ok(Network {
            keyring: Keyring::new(config.ranks, config.seed),
            ledgers: vec![BTreeMap::new(); config.ranks],
            rule,
            degrees,
            by_degree,
            config,
            round: 0,
            clock_ms: 0.0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn keyring(&self) -> &Keyring {
        &self.keyring
    }

    pub fn rule(&self) -> &QuorumRule {
        &self.rule
    }

    pub fn degrees(&self) -> &[u64] {
        &self.degrees
    }

    /// Simulated time elapsed over all rounds so far.
    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    /// Changes a rank's behavior for later rounds.
    pub fn inject_fault(&mut self, rank: usize, mode: FaultMode) -> Result<(), ConsensusError> {
        self.config = inject_fault(&self.config, rank, mode)?;
        Ok(())
    }

    /// Installs `ledgers` as every rank's replica, e.g. when resuming from disk.
    pub fn adopt_ledgers(&mut self, ledgers: &BTreeMap<Scope, Ledger>) {
        for replica in &mut self.ledgers {
            replica.clone_from(ledgers);
        }
    }

    /// A rank's replica of a scope ledger.
    pub fn ledger(&self, rank: usize, scope: &Scope) -> Option<&Ledger> {
        self.ledgers.get(rank)?.get(scope)
    }

    /// The ledgers of the lowest honest rank, the reference replica.
    pub fn reference_ledgers(&self) -> Option<&BTreeMap<Scope, Ledger>> {
        (0..self.config.ranks)
            .find(|r| self.config.is_honest(*r))
            .map(|r| &self.ledgers[r])
    }

    /// Compares every pair of honest replicas at every (scope, height).
    pub fn check_safety(&self) -> Result<(), Conflict> {
        let honest: Vec<usize> = (0..self.config.ranks)
            .filter(|r| self.config.is_honest(*r))
            .collect();
        let mut seen: BTreeMap<(Scope, u64), (usize, Digest)> = BTreeMap::new();
        for &r in &honest {
            for (scope, ledger) in &self.ledgers[r] {
                for block in ledger.blocks() {
                    let key = (scope.clone(), block.height);
                    match seen.get(&key) {
                        Some((other, hash)) if *hash != block.hash() => {
                            return Err(Conflict {
                                scope: scope.clone(),
                                height: block.height,
                                ranks: (*other, r),
                            })
                        }
                        Some(_) => {}
                        None => {
                            seen.insert(key, (r, block.hash()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn rng(&self, purpose: &[u8]) -> ChaCha8Rng {
        let seed = Digest::of_parts(&[
            b"prosima-sim",
            &self.config.seed.to_le_bytes(),
            &self.round.to_le_bytes(),
            purpose,
        ]);
        ChaCha8Rng::from_seed(seed.0)
    }

    fn link_round(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.config.base_delay_ms + self.config.jitter_ms * rng.random::<f64>()
    }

    /// Verification load per rank under the placement's locality mapping.
    fn verify_loads(&self, n: usize, policy: PlacementPolicy, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let p = self.config.ranks;
        let mut loads = vec![0usize; p];
        match policy {
            // balanced contiguous partition
            PlacementPolicy::GftLocality => {
                for (r, load) in loads.iter_mut().enumerate() {
                    *load = (n * (r + 1)) / p - (n * r) / p;
                }
            }
            // every holder re-verifies the copy it stores
            PlacementPolicy::RandomDup { copies } => {
                let d = copies.clamp(1, p);
                for _ in 0..n {
                    let mut chosen = BTreeSet::new();
                    while chosen.len() < d {
                        chosen.insert(rng.random_range(0..p));
                    }
                    for r in chosen {
                        loads[r] += 1;
                    }
                }
            }
            PlacementPolicy::FullLedger => loads.iter_mut().for_each(|l| *l = n),
        }
        loads
    }

    /// What `receiver` gets from `signer` for one tx.
    fn signature_seen(
        &self,
        signer: usize,
        receiver: usize,
        tx: &Transaction,
        rng: &mut ChaCha8Rng,
    ) -> Option<Signature> {
        match self.config.behavior(signer) {
            None => Some(sign_transaction(&self.keyring, signer, tx, true, rng)),
            Some(FaultMode::Crash) => None,
            Some(FaultMode::GarbageSig) => {
                Some(sign_transaction(&self.keyring, signer, tx, false, rng))
            }
            Some(FaultMode::Equivocate) => Some(sign_transaction(
                &self.keyring,
                signer,
                tx,
                receiver.is_multiple_of(2),
                rng,
            )),
        }
    }

    /// Leader candidates for a scope: ranks holding it under the placement,
    /// then everyone else, each group by degree.
    fn leader_order(&self, scope: &Scope, placement: Option<&PlacementMap>) -> Vec<usize> {
        let holders: BTreeSet<usize> = placement
            .and_then(|m| m.holders(&scope.key()))
            .map(|h| {
                h.iter()
                    .copied()
                    .filter(|n| *n < self.config.ranks)
                    .collect()
            })
            .unwrap_or_default();
        let mut order: Vec<usize> = self
            .by_degree
            .iter()
            .copied()
            .filter(|r| holders.contains(r))
            .collect();
        order.extend(
            self.by_degree
                .iter()
                .copied()
                .filter(|r| !holders.contains(r)),
        );
        order
    }

    /// Runs one round over `txs`. Transactions already carrying a
    /// certificate are re-certified from scratch.
    pub fn run_round(
        &mut self,
        txs: &[Transaction],
        placement: Option<&PlacementMap>,
    ) -> RoundOutcome {
        let cfg = self.config.clone();
        let p = cfg.ranks;
        let n = txs.len();
        let policy = placement.map_or(PlacementPolicy::GftLocality, |m| m.policy);
        let mut net_rng = self.rng(b"links");
        let mut sig_rng = self.rng(b"signatures");
        let mut msgs = 0u64;
        let log_p = ceil_log2(p);

        // Phase 1: partitioned pre-verification, then every live rank signs every tx.
        let loads = self.verify_loads(n, policy, &mut self.rng(b"mapping"));
        let max_load = loads.iter().copied().max().unwrap_or(0);
        let phase1_ms = max_load as f64 * cfg.t_verify_ms + n as f64 * cfg.t_sign_ms;

        // Allgather by recursive doubling: one message per live rank per step.
        let live = (0..p)
            .filter(|r| cfg.behavior(*r) != Some(FaultMode::Crash))
            .count() as u64;
        let gather_ms: f64 = (0..log_p).map(|_| self.link_round(&mut net_rng)).sum();
        msgs += live * log_p as u64;

        // Phase 2: aggregation of each rank's share of certificates.
        let aggregate_ms = n.div_ceil(p) as f64 * cfg.t_aggregate_ms;

        // Each leader certifies from its own view of the signatures.
        let mut by_scope: BTreeMap<Scope, Vec<&Transaction>> = BTreeMap::new();
        for tx in txs {
            by_scope.entry(scope_of(tx)).or_default().push(tx);
        }
        let timestamp = self.clock_ms as u64;
        let mut committed = Vec::new();
        let mut stalled = Vec::new();
        let mut certified_ids = BTreeSet::new();
        let mut assemble_ms = 0.0f64;
        let mut attempts_total = 0;
        for (scope, scope_txs) in &by_scope {
            let mut elapsed = cfg.t_assemble_ms;
            let mut done = false;
            for leader in self
                .leader_order(scope, placement)
                .into_iter()
                .take(cfg.faults + 1)
            {
                attempts_total += 1;
                let certified: Vec<Transaction> = scope_txs
                    .iter()
                    .filter_map(|tx| {
                        let sigs: Vec<Signature> = (0..p)
                            .filter_map(|s| self.signature_seen(s, leader, tx, &mut sig_rng))
                            .collect();
                        let cert = self.rule.certify(&self.keyring, &tx.tx_id(), &sigs)?;
                        Some((*tx).clone().with_certificate(cert))
                    })
                    .collect();
                let result =
                    self.leader_phase(scope, leader, certified, timestamp, &mut net_rng, &mut msgs);
                match result {
                    LeaderResult::Committed(block, rounds) => {
                        elapsed += rounds as f64 * self.link_round(&mut net_rng);
                        certified_ids.extend(block.txs.iter().map(Transaction::tx_id));
                        committed.push(block);
                        done = true;
                        break;
                    }
                    LeaderResult::NothingCertified => {
                        done = true;
                        break;
                    }
                    LeaderResult::Failed => elapsed += cfg.timeout_ms,
                }
            }
            if !done {
                stalled.push(scope.clone());
            }
            assemble_ms = assemble_ms.max(elapsed);
        }

        let uncertified = txs
            .iter()
            .map(Transaction::tx_id)
            .filter(|id| !certified_ids.contains(id))
            .collect();
        let total_ms = phase1_ms + gather_ms + aggregate_ms + assemble_ms;
        self.clock_ms += total_ms;
        let trace = RoundTrace {
            round: self.round,
            phase1_ms,
            gather_ms,
            aggregate_ms,
            assemble_ms,
            total_ms,
            committed_txs: committed.iter().map(|b: &Block| b.txs.len()).sum(),
            msgs,
            blocks: committed
                .iter()
                .map(|b| (scope_of(&b.txs[0]), b.height, b.hash()))
                .collect(),
            leader_attempts: attempts_total,
        };
        self.round += 1;
        RoundOutcome {
            committed,
            stalled,
            uncertified,
            trace,
        }
    }

    /// Proposal, vote and barrier for one leader. Honest ranks adopt the
    /// block that gathers a commit quorum.
    fn leader_phase(
        &mut self,
        scope: &Scope,
        leader: usize,
        certified: Vec<Transaction>,
        timestamp: u64,
        rng: &mut ChaCha8Rng,
        msgs: &mut u64,
    ) -> LeaderResult {
        let cfg = &self.config;
        let p = cfg.ranks;
        let mode = cfg.behavior(leader);
        if mode == Some(FaultMode::Crash) {
            return LeaderResult::Failed;
        }
        if certified.is_empty() {
            // an honest leader with nothing certified has nothing to propose
            return if mode.is_none() {
                LeaderResult::NothingCertified
            } else {
                LeaderResult::Failed
            };
        }
        // a Byzantine leader builds on the honest tip so its blocks look valid
        let view = if mode.is_none() {
            Some(leader)
        } else {
            (0..p).find(|r| cfg.is_honest(*r))
        };
        let empty = Ledger::new(scope.clone());
        let base = view
            .and_then(|r| self.ledgers[r].get(scope))
            .unwrap_or(&empty);
        let block_a = base.assemble(
            certified,
            timestamp.max(base.blocks().last().map_or(0, |b| b.timestamp)),
        );

        // proposals[r] is what rank r receives
        let proposals: Vec<Option<Block>> = match mode {
            None => (0..p).map(|_| Some(block_a.clone())).collect(),
            Some(FaultMode::GarbageSig) => {
                let mut bad = block_a.clone();
                rng.fill_bytes(&mut bad.merkle_root.0);
                (0..p).map(|_| Some(bad.clone())).collect()
            }
            Some(FaultMode::Equivocate) => {
                let mut block_b = block_a.clone();
                block_b.timestamp += 1;
                (0..p)
                    .map(|_| {
                        Some(if rng.random::<bool>() {
                            block_a.clone()
                        } else {
                            block_b.clone()
                        })
                    })
                    .collect()
            }
            Some(FaultMode::Crash) => unreachable!(),
        };
        *msgs += (p - 1) as u64;

        let check = QuorumCheck {
            rule: &self.rule,
            keyring: &self.keyring,
        };
        let mut votes: BTreeMap<Digest, BTreeSet<usize>> = BTreeMap::new();
        let mut candidates: BTreeMap<Digest, Block> = BTreeMap::new();
        for r in 0..p {
            if !cfg.is_honest(r) {
                continue;
            }
            let Some(block) = &proposals[r] else { continue };
            let fresh;
            let replica = match self.ledgers[r].get(scope) {
                Some(l) => l,
                None => {
                    fresh = Ledger::new(scope.clone());
                    &fresh
                }
            };
            if replica.check_extends(block, &check).is_ok() {
                votes.entry(block.hash()).or_default().insert(r);
                candidates.insert(block.hash(), block.clone());
            }
        }
        // Byzantine voters back every candidate they can see.
        for r in 0..p {
            if matches!(
                cfg.behavior(r),
                Some(FaultMode::GarbageSig | FaultMode::Equivocate)
            ) {
                for voters in votes.values_mut() {
                    voters.insert(r);
                }
            }
        }
        *msgs += (p * (p - 1)) as u64;

        let quorum = cfg.commit_quorum();
        let winners: Vec<Digest> = votes
            .iter()
            .filter(|(_, v)| v.len() >= quorum)
            .map(|(h, _)| *h)
            .collect();
        if winners.is_empty() {
            return LeaderResult::Failed;
        }
        // Barrier: an honest rank keeps the committed block it voted for,
        // otherwise adopts the first committed block it hears of.
        *msgs += (p * ceil_log2(p)) as u64;
        for r in 0..p {
            if !cfg.is_honest(r) {
                continue;
            }
            let own = winners
                .iter()
                .find(|h| votes[*h].contains(&r))
                .unwrap_or(&winners[0]);
            let ledger = self.ledgers[r]
                .entry(scope.clone())
                .or_insert_with(|| Ledger::new(scope.clone()));
            ledger
                .append(candidates[own].clone(), &check)
                .expect("honest replicas share a tip");
        }
        let rounds = 3 * ceil_log2(p);
        LeaderResult::Committed(candidates[&winners[0]].clone(), rounds)
    }
}

enum LeaderResult {
    Committed(Block, usize),
    NothingCertified,
    Failed,
}

pub fn ceil_log2(p: usize) -> usize {
    if p <= 1 {
        0
    } else {
        (usize::BITS - (p - 1).leading_zeros()) as usize
    }
}

/// One round on a fresh network.
pub fn run_consensus_round(
    config: &SimConfig,
    graph: &OverlayGraph,
    placement: &PlacementMap,
    txs: &[Transaction],
) -> Result<RoundOutcome, ConsensusError> {
    let mut net = Network::new(config.clone(), graph)?;
    Ok(net.run_round(txs, Some(placement)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchMetrics {
    pub images: usize,
    pub makespan_ms: f64,
    pub throughput_img_s: f64,
    pub latency_ms_per_img: f64,
    pub prepare_ms: f64,
    pub trace: RoundTrace,
}

/// Pushes one batch of images through preparation and a single consensus
/// round. `image_txs[i]` holds every transaction produced for image `i`.
pub fn simulate_batch(
    net: &mut Network,
    placement: Option<&PlacementMap>,
    image_txs: &[Vec<Transaction>],
) -> BatchMetrics {
    let images = image_txs.len();
    let txs: Vec<Transaction> = image_txs.iter().flatten().cloned().collect();
    let prepare_ms = images.div_ceil(net.config.ranks) as f64 * net.config.t_prepare_ms;
    let outcome = net.run_round(&txs, placement);
    let makespan_ms = net.config.batch_overhead_ms + prepare_ms + outcome.trace.total_ms;
    BatchMetrics {
        images,
        makespan_ms,
        throughput_img_s: images as f64 * 1000.0 / makespan_ms,
        latency_ms_per_img: makespan_ms / images.max(1) as f64,
        prepare_ms,
        trace: outcome.trace,
    }
}

/// Least-squares fit of `t ≈ a·x + b·y` without intercept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

/// Fits `a·n/P + b·log2 P` to `(n, P, t)` samples.
pub fn fit_scaling(samples: &[(usize, usize, f64)]) -> Option<ScalingFit> {
    let rows: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|&(n, p, t)| (n as f64 / p as f64, (p as f64).log2(), t))
        .collect();
    let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, t) in &rows {
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxt += x * t;
        syt += y * t;
    }
    let det = sxx * syy - sxy * sxy;
    if rows.len() < 2 || det.abs() < 1e-12 * (sxx * syy).max(1.0) {
        return None;
    }
    let a = (sxt * syy - syt * sxy) / det;
    let b = (syt * sxx - sxt * sxy) / det;
    let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let ss_tot: f64 = rows.iter().map(|r| (r.2 - mean).powi(2)).sum();
    let ss_res: f64 = rows.iter().map(|r| (r.2 - a * r.0 - b * r.1).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(ScalingFit { a, b, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{create_transaction, Metadata, TxKind};
    use crate::topology::{assign_roles, generate_scale_free, place_shards};

    fn graph() -> OverlayGraph {
        generate_scale_free(20, 3, 2, 5).unwrap()
    }

    fn shard_txs(n: usize, salt: u64) -> Vec<Transaction> {
        (0..n)
            .map(|i| {
                let meta = Metadata::new()
                    .with("image_id", format!("{salt}-{}", i / 16))
                    .with("row", (i % 16) / 4)
                    .with("col", i % 4);
                let payload = Digest::of_parts(&[&salt.to_le_bytes(), &(i as u64).to_le_bytes()]);
                create_transaction(TxKind::ShardFingerprint, payload, &meta).unwrap()
            })
            .collect()
    }

    fn root_tx(salt: u64) -> Vec<Transaction> {
        let meta = Metadata::new().with("image_id", salt);
        vec![
            create_transaction(TxKind::RootAnchor, Digest::of(&salt.to_le_bytes()), &meta).unwrap(),
        ]
    }

    #[test]
    fn signing_is_deterministic_and_garbage_fails() {
        let keys = Keyring::new(4, 9);
        let tx = &root_tx(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sign_transaction(&keys, 2, tx, true, &mut rng);
        assert_eq!(a, sign_transaction(&keys, 2, tx, true, &mut rng));
        assert!(keys.verify(&tx.tx_id(), &a));
        for _ in 0..100 {
            let junk = sign_transaction(&keys, 2, tx, false, &mut rng);
            assert!(!keys.verify(&tx.tx_id(), &junk));
        }
    }

    #[test]
    fn all_honest_single_tx_full_certificate() {
        let g = graph();
        let mut net = Network::new(SimConfig::new(4, 1, 1), &g).unwrap();
        let out = net.run_round(&root_tx(1), None);
        assert_eq!(out.committed.len(), 1);
        let cert = out.committed[0].txs[0].certificate.as_ref().unwrap();
        assert_eq!(cert.signers().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let all: u64 = (0..4).map(|r| g.degree(r) as u64).sum();
        assert_eq!(cert.weight_sum, all);
        assert!(net.check_safety().is_ok());
    }

    #[test]
    fn two_garbage_signers_of_four_abort() {
        let g = graph();
        let cfg = inject_fault(&SimConfig::new(4, 1, 2), 1, FaultMode::GarbageSig).unwrap();
        let cfg = inject_fault(&cfg, 3, FaultMode::GarbageSig).unwrap();
        let mut net = Network::new(cfg, &g).unwrap();
        let out = net.run_round(&root_tx(2), None);
        assert!(out.is_abort());
        assert_eq!(out.uncertified.len(), 1);
        assert!(net.reference_ledgers().unwrap().is_empty());
    }

    #[test]
    fn one_crash_still_commits_with_three_signers() {
        let g = graph();
        let cfg = inject_fault(&SimConfig::new(4, 1, 3), 2, FaultMode::Crash).unwrap();
        let mut net = Network::new(cfg, &g).unwrap();
        let out = net.run_round(&root_tx(3), None);
        let cert = out.committed[0].txs[0].certificate.as_ref().unwrap();
        assert_eq!(cert.signatures.len(), 3);
        assert!(!cert.signers().any(|r| r == 2));
    }

    #[test]
    fn two_crashes_lose_liveness_not_safety() {
        let g = graph();
        let mut net = Network::new(SimConfig::new(4, 1, 4), &g).unwrap();
        net.inject_fault(0, FaultMode::Crash).unwrap();
        net.inject_fault(1, FaultMode::Crash).unwrap();
        for salt in 0..5 {
            assert!(net.run_round(&shard_txs(8, salt), None).is_abort());
        }
        assert!(net.check_safety().is_ok());
    }

    #[test]
    fn crashed_leader_is_replaced() {
        let g = graph();
        let mut net = Network::new(SimConfig::new(4, 1, 5), &g).unwrap();
        let top = net.by_degree[0];
        net.inject_fault(top, FaultMode::Crash).unwrap();
        let out = net.run_round(&root_tx(5), None);
        assert_eq!(out.committed.len(), 1);
        assert_eq!(out.trace.leader_attempts, 2);
        assert!(out.trace.assemble_ms >= net.config().timeout_ms);
    }

    #[test]
    fn equivocating_ranks_never_split_honest_ledgers() {
        let g = graph();
        for seed in 0..200u64 {
            let mut cfg = SimConfig::new(7, 2, seed);
            // even seeds corrupt the two likeliest leaders, odd seeds two followers-or-leaders at random
            let targets = if seed % 2 == 0 {
                let net = Network::new(cfg.clone(), &g).unwrap();
                [net.by_degree[0], net.by_degree[1]]
            } else {
                [(seed % 7) as usize, ((seed + 3) % 7) as usize]
            };
            for r in targets {
                cfg = inject_fault(&cfg, r, FaultMode::Equivocate).unwrap();
            }
            let mut net = Network::new(cfg, &g).unwrap();
            for round in 0..3 {
                let out = net.run_round(&shard_txs(6, seed * 10 + round), None);
                assert_eq!(out.trace.committed_txs, 6, "seed {seed} round {round}");
            }
            assert_eq!(net.check_safety(), Ok(()), "seed {seed}");
        }
    }

    #[test]
    fn safety_checker_flags_diverging_replicas() {
        let g = graph();
        let mut net = Network::new(SimConfig::new(4, 1, 6), &g).unwrap();
        net.run_round(&root_tx(6), None);
        let mut forged = net.ledgers[1][&Scope::Global].blocks()[0].clone();
        forged.timestamp += 7;
        let mut alt = Ledger::new(Scope::Global);
        alt.append(forged, &crate::ledger::StructuralCheck).unwrap();
        net.ledgers[1].insert(Scope::Global, alt);
        let conflict = net.check_safety().unwrap_err();
        assert_eq!((conflict.scope, conflict.height), (Scope::Global, 1));
    }

    #[test]
    fn identical_inputs_identical_traces() {
        let g = graph();
        let run = || {
            let cfg = inject_fault(&SimConfig::new(7, 2, 42), 4, FaultMode::Equivocate).unwrap();
            let mut net = Network::new(cfg, &g).unwrap();
            (0..4)
                .map(|i| net.run_round(&shard_txs(20, i), None).trace)
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let rows: Vec<String> = a.iter().map(RoundTrace::csv_row).collect();
        assert_eq!(rows, b.iter().map(RoundTrace::csv_row).collect::<Vec<_>>());
    }

    #[test]
    fn trace_fields_follow_cost_model() {
        let g = graph();
        for p in [1usize, 2, 3, 4, 5, 8, 13] {
            let f = (p - 1) / 3;
            let cfg = SimConfig::new(p, f, 7);
            let mut net = Network::new(cfg.clone(), &g).unwrap();
            let n = 100;
            let t = net.run_round(&shard_txs(n, 7), None).trace;
            let l = ceil_log2(p) as f64;
            let expected_p1 = n.div_ceil(p) as f64 * cfg.t_verify_ms + n as f64 * cfg.t_sign_ms;
            assert!((t.phase1_ms - expected_p1).abs() < 1e-9, "P={p}");
            assert!(t.gather_ms >= l * cfg.base_delay_ms - 1e-12);
            assert!(t.gather_ms <= l * (cfg.base_delay_ms + cfg.jitter_ms) + 1e-12);
            assert!(
                (t.total_ms - (t.phase1_ms + t.gather_ms + t.aggregate_ms + t.assemble_ms)).abs()
                    < 1e-9
            );
            assert!(t.phase1_ms >= 0.0 && t.assemble_ms >= 0.0 && t.aggregate_ms >= 0.0);
        }
    }

    #[test]
    fn single_rank_has_no_log_term() {
        let g = graph();
        let cfg = SimConfig::new(1, 0, 8);
        let mut net = Network::new(cfg.clone(), &g).unwrap();
        let t = net.run_round(&root_tx(8), None).trace;
        assert_eq!(t.gather_ms, 0.0);
        assert_eq!(t.assemble_ms, cfg.t_assemble_ms);
        assert_eq!(
            t.total_ms,
            cfg.t_verify_ms + cfg.t_sign_ms + cfg.t_aggregate_ms + cfg.t_assemble_ms
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let g = graph();
        assert!(matches!(
            Network::new(SimConfig::new(3, 1, 0), &g),
            Err(ConsensusError::ConfigInvalid(_))
        ));
        assert!(matches!(
            Network::new(SimConfig::new(25, 1, 0), &g),
            Err(ConsensusError::ConfigInvalid(_))
        ));
        assert_eq!(
            inject_fault(&SimConfig::new(4, 1, 0), 4, FaultMode::Crash),
            Err(ConsensusError::RankOutOfRange { rank: 4, ranks: 4 })
        );
    }

    #[test]
    fn commit_quorums_intersect_in_an_honest_rank() {
        for f in 0..6 {
            for p in 3 * f + 1..3 * f + 8 {
                let q = SimConfig::new(p, f, 0).commit_quorum();
                assert!(2 * q > p + f, "P={p} f={f}");
                assert!(q <= p - f, "honest ranks alone must reach q: P={p} f={f}");
            }
        }
    }

    #[test]
    fn exact_fit_recovered() {
        // t = n/P − 0.1·log2 P
        let samples: Vec<(usize, usize, f64)> = [1usize, 2, 4, 8]
            .iter()
            .map(|&p| (1024, p, 1024.0 / p as f64 - 0.1 * (p as f64).log2()))
            .collect();
        let fit = fit_scaling(&samples).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-9);
        assert!((fit.b + 0.1).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_sweep_fits_model() {
        let g = graph();
        let txs = shard_txs(1024, 11);
        let mut samples = Vec::new();
        for p in [1usize, 2, 4, 8] {
            let mut net = Network::new(SimConfig::new(p, (p - 1) / 3, 11), &g).unwrap();
            let t = net.run_round(&txs, None).trace;
            samples.push((1024, p, t.phase1_ms + t.gather_ms));
        }
        let fit = fit_scaling(&samples).unwrap();
        assert!(fit.r_squared >= 0.95, "{fit:?}");
        assert!(samples[0].2 / samples[3].2 >= 4.0);
    }

    #[test]
    fn larger_batches_amortize_overhead() {
        let g = graph();
        let mut net = Network::new(SimConfig::new(8, 2, 12), &g).unwrap();
        let mut last: Option<BatchMetrics> = None;
        for b in [20usize, 40, 60, 80, 100] {
            let images: Vec<Vec<Transaction>> = (0..b as u64)
                .map(|i| shard_txs(16, i * 1000 + b as u64))
                .collect();
            let m = simulate_batch(&mut net, None, &images);
            if let Some(prev) = &last {
                assert!(m.throughput_img_s >= prev.throughput_img_s);
                assert!(m.latency_ms_per_img <= prev.latency_ms_per_img);
            }
            last = Some(m);
        }
    }

    #[test]
    fn random_duplication_costs_more_verification_than_locality() {
        let g = graph();
        let roles = assign_roles(&g, 0.1);
        let txs = shard_txs(400, 13);
        let keys: Vec<Digest> = (0..4)
            .flat_map(|r| (0..4).map(move |c| Scope::Cell { row: r, col: c }.key()))
            .collect();
        let phase1 = |policy| {
            let map = place_shards(&g, &roles, &keys, policy, 13).unwrap();
            let out = run_consensus_round(&SimConfig::new(8, 2, 13), &g, &map, &txs).unwrap();
            assert_eq!(out.trace.committed_txs, 400);
            out.trace.phase1_ms
        };
        let gft = phase1(PlacementPolicy::GftLocality);
        let dup = phase1(PlacementPolicy::RandomDup { copies: 3 });
        let full = phase1(PlacementPolicy::FullLedger);
        assert!(gft < dup && dup < full, "{gft} {dup} {full}");
    }
}
