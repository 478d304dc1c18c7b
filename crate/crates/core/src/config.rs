//! Experiment configuration shared by the CLI and the bench runners.
//!
//! The file format is JSON. Every field is optional; missing ones take the
//! defaults below and unknown ones are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::SimConfig;
use crate::fingerprint::BlockEncoder;
use crate::hash::Digest;
use crate::imaging::ShardGrid;
use crate::ledger::Fallback;
use crate::reconstruction::{LossWeights, ReconstructionConfig};
use crate::topology::PlacementPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Off sets the semantic loss weight to zero.
    pub semantic_loss_on: bool,
    /// Off skips fingerprint anchoring, so nothing can be verified.
    pub fingerprint_on: bool,
    /// Off replaces locality placement with random duplication.
    pub gft_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            semantic_loss_on: true,
            fingerprint_on: true,
            gft_on: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table4Config {
    pub shards: usize,
    pub rounds: usize,
    /// Cost of persisting one transaction copy on a node.
    pub t_write_ms: f64,
    pub dup_copies: usize,
}

impl Default for Table4Config {
    fn default() -> Self {
        Table4Config {
            shards: 1000,
            rounds: 20,
            t_write_ms: 0.05,
            dup_copies: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    /// Images per batch.
    pub batches: Vec<usize>,
    pub sweep_ranks: Vec<usize>,
    pub sweep_txs: usize,
    pub image_size: usize,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            batches: vec![200, 400, 600, 800, 1000],
            sweep_ranks: vec![1, 2, 4, 8],
            sweep_txs: 1024,
            image_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// PGM/PIMG directory; synthetic phantoms are used when absent.
    pub image_dir: Option<PathBuf>,
    /// Phantom count when no directory is given.
    pub images: usize,
    pub image_size: usize,
    pub grid: ShardGrid,
    pub encoder: BlockEncoder,
    pub nodes: usize,
    pub m0: usize,
    pub m: usize,
    pub leader_fraction: f64,
    pub placement: PlacementPolicy,
    pub consensus: SimConfig,
    /// Images per anchoring round.
    pub anchor_batch: usize,
    pub sigmas: Vec<f64>,
    pub robustness_images: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub fallback: Fallback,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub ablation: Ablation,
    pub table4: Table4Config,
    pub scale: ScaleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_dir: None,
            images: 50,
            image_size: 256,
            grid: ShardGrid::default(),
            encoder: BlockEncoder::default(),
            nodes: 20,
            m0: 3,
            m: 2,
            leader_fraction: 0.1,
            placement: PlacementPolicy::GftLocality,
            consensus: SimConfig {
                ranks: 8,
                faults: 2,
                ..SimConfig::default()
            },
            anchor_batch: 10,
            sigmas: vec![0.02, 0.05, 0.10],
            robustness_images: 100,
            alpha: 0.6,
            weights: LossWeights::default(),
            fallback: Fallback::Nearest,
            seed: 7,
            output_dir: PathBuf::from("out"),
            ablation: Ablation::default(),
            table4: Table4Config::default(),
            scale: ScaleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, stamped on every CSV. The output
    /// directory is blanked first since it cannot change any result.
    pub fn hash(&self) -> Digest {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Digest::of(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    /// Placement after the `gft_on` switch.
    pub fn effective_placement(&self) -> PlacementPolicy {
        if self.ablation.gft_on {
            self.placement
        } else {
            PlacementPolicy::RandomDup {
                copies: self.table4.dup_copies,
            }
        }
    }

    /// Consensus parameters carrying the experiment seed.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.consensus.clone()
        }
    }

    pub fn reconstruction(&self) -> ReconstructionConfig {
        let mut weights = self.weights;
        if !self.ablation.semantic_loss_on {
            weights.lambda2 = 0.0;
        }
        ReconstructionConfig {
            grid: self.grid,
            encoder: self.encoder,
            alpha: self.alpha,
            fallback: self.fallback,
            weights,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let (sw, sh) = self
            .grid
            .shard_dims(self.image_size, self.image_size)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let side = self
            .encoder
            .side()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if sw % side != 0 || sh % side != 0 {
            return bad(format!(
                "encoder block grid {side}x{side} does not divide {sw}x{sh} shards"
            ));
        }
        if self.m == 0 || self.m > self.m0 || self.m0 > self.nodes {
            return bad(format!(
                "need 1 <= m <= m0 <= N, got m={} m0={} N={}",
                self.m, self.m0, self.nodes
            ));
        }
        if !(self.leader_fraction > 0.0 && self.leader_fraction <= 1.0) {
            return bad(format!(
                "leader_fraction {} outside (0, 1]",
                self.leader_fraction
            ));
        }
        self.consensus
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.consensus.ranks > self.nodes {
            return bad(format!(
                "P = {} exceeds N = {}",
                self.consensus.ranks, self.nodes
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("sigmas must be finite and non-negative".into());
        }
        if self.anchor_batch == 0 || self.images == 0 {
            return bad("images and anchor_batch must be at least 1".into());
        }
        if self.scale.batches.is_empty() || self.scale.batches.contains(&0) {
            return bad("scale.batches must be a nonempty list of positive sizes".into());
        }
        if !self.scale.image_size.is_multiple_of(self.grid.rows)
            || !self.scale.image_size.is_multiple_of(self.grid.cols)
        {
            return bad(format!(
                "scale.image_size {} not divisible by the grid",
                self.scale.image_size
            ));
        }
        if self.table4.rounds == 0 || self.table4.shards == 0 || self.table4.dup_copies == 0 {
            return bad("table4 shards, rounds and dup_copies must be positive".into());
        }
        if let PlacementPolicy::RandomDup { copies } = self.placement {
            if copies == 0 || copies > self.nodes {
                return bad(format!(
                    "random_dup copies {copies} outside 1..={}",
                    self.nodes
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_losslessly() {
        let mut cfg = ExperimentConfig::default();
        cfg.placement = PlacementPolicy::RandomDup { copies: 4 };
        cfg.sigmas = vec![0.0, 0.125];
        cfg.consensus
            .injected
            .insert(3, crate::consensus::FaultMode::Equivocate);
        let back = ExperimentConfig::from_json(&cfg.to_json(), "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 8, ..a }.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg =
            ExperimentConfig::from_json(r#"{"seed": 3, "ablation": {"gft_on": false}}"#, "mem")
                .unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.ablation.fingerprint_on);
        assert_eq!(
            cfg.effective_placement(),
            PlacementPolicy::RandomDup { copies: 3 }
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\n  \"seed\": 1,\n  \"nodes\": \"twenty\"\n}";
        match ExperimentConfig::from_json(text, "cfg.json") {
            Err(ConfigError::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "cfg.json");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::from_json("{\"sede\": 1}", "x"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn downstream_constraints_checked() {
        let mut cfg = ExperimentConfig::default();
        cfg.image_size = 250;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.consensus.ranks = 5;
        cfg.consensus.faults = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn semantic_switch_zeroes_lambda2() {
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.semantic_loss_on = false;
        assert_eq!(cfg.reconstruction().weights.lambda2, 0.0);
        assert_eq!(cfg.reconstruction().weights.lambda1, 0.1);
    }
}
