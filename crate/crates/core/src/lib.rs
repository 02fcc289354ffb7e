//! Image classification through patch-cluster graphs.
//!
//! An image is cut into a grid of patches, each patch is embedded by an
//! autoencoder and assigned to one of `C` k-means clusters, and the image
//! becomes a `C`-node graph whose directed edge weights are row-normalized
//! counts of how often patches of one cluster border patches of another.
//! An edge-aware graph neural network then classifies the graphs.

pub mod dataio;
pub mod clustering;
pub mod encoder;
pub mod error;
pub mod gnn;
pub mod graphbuild;
pub mod harness;
pub mod numerics;
pub mod patching;
mod persist;
pub mod seed;

pub use error::{Error, Result};
pub use clustering::ClusterModel;
pub use dataio::{Dataset, Split};
pub use encoder::{AutoencoderModel, Embedding, PatchEncoder};
pub use gnn::{GnnModel, LayerType, Metrics};
pub use graphbuild::ImageGraph;
pub use harness::RunConfig;
pub use numerics::Matrix;
pub use patching::{Connectivity, PatchGrid};
