pub mod bench;
pub mod config;
pub mod consensus;
pub mod corpus;
pub mod federated;
pub mod fingerprint;
pub mod hash;
pub mod imaging;
pub mod ledger;
pub mod pipeline;
pub mod reconstruction;
pub mod rundir;
pub mod topology;
