//! Community-based federated anomaly detection.
//!
//! Clients first fit one-class SVMs and exchange them to find peers whose
//! data looks alike ([`association`]), the resulting graph is split into
//! communities ([`community`]), and each community trains a shared
//! autoencoder with federated averaging ([`fedavg`]). [`eval`] compares the
//! community models against purely local and ideally grouped ones, and
//! [`pipeline`] runs the whole experiment as resumable stages.

pub mod association;
pub mod autoencoder;
pub mod community;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fedavg;
pub mod ocsvm;
pub mod pipeline;
pub mod seed;

pub use association::{AssociationConfig, AssociationGraph};
pub use autoencoder::AeParams;
pub use community::{CommunityConfig, CommunityPartition, Provenance};
pub use config::ExperimentConfig;
pub use data::{ClientDataset, ClientId, LabeledDataset, TestSet};
pub use error::{Error, ErrorKind, Result};
pub use eval::Scheme;
pub use fedavg::FedConfig;
pub use ocsvm::{OcsvmModel, OcsvmParams};
pub use pipeline::{Experiment, Stage};
