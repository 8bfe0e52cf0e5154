//! Multi-modal vehicle positioning: CSI fingerprints fused with
//! camera-derived positions through matching-based hard EM with
//! meta-learned sample weights.

pub mod channel;
pub mod geometry;
pub mod rng;
pub mod scenario;
pub mod posnet;
pub mod assignment;
pub mod eval;
pub mod metatrain;
pub mod config;
pub mod persist;

use thiserror::Error;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Posnet(#[from] posnet::PosnetError),
    #[error(transparent)]
    Assignment(#[from] assignment::AssignmentError),
    #[error(transparent)]
    Train(#[from] metatrain::TrainError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Persist(#[from] persist::PersistError),
    #[error(transparent)]
    Method(#[from] eval::UnknownMethod),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
