//! Accountable federated learning over a simulated two-tier ledger.

pub mod attack;
pub mod bench;
pub mod codec;
pub mod contract;
pub mod data;
pub mod deploy;
pub mod detect;
pub mod experiment;
pub mod fl;
pub mod ledger;
pub mod logstore;
pub mod nn;
pub mod params;
