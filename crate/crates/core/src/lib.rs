//! Policy regularization with a dataset constraint for offline reinforcement
//! learning, with the lineworld toy environment used to study it.

mod binio;
pub mod agents;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod lineworld;
pub mod neighbors;
pub mod nn;
pub mod run;

pub use agents::{Agent, Algorithm, PrdcConfig, Regularizer, Td3Config};
pub use config::RunConfig;
pub use dataset::{MiniBatch, Normalizer, OfflineDataset, Transition};
pub use error::{Error, Result};
pub use neighbors::{NeighborIndex, NeighborResult};
pub use nn::{Adam, Gradient, Head, Mlp};
