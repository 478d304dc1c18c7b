//! Rank signatures, quorum certificates and the round simulator.

mod cert;
mod sim;

pub use cert::{Keyring, QuorumCertificate, QuorumRule, Signature};
pub use sim::{
    ceil_log2, fit_scaling, inject_fault, run_consensus_round, sign_transaction, simulate_batch,
    BatchMetrics, Conflict, ConsensusError, FaultMode, Network, QuorumCheck, RoundOutcome,
    RoundTrace, ScalingFit, SimConfig, TRACE_CSV_HEADER,
};
