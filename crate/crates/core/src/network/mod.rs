//! The convolutional candidate generator: frames in, pitch-bin logits out.

pub mod arch;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod weights;

use std::path::Path;

pub use arch::{ArchitectureConfig, BlockConfig, Normalization, PoolConfig};
pub use kernels::{conv1d_valid, layer_norm, max_pool1d, relu};
pub use model::{ForwardCache, Network};
pub use tensor::{NetworkParams, ParamTensor, Params, Scalar, Tensor3};
pub use weights::{load_params, save_params, Sidecar};

use crate::bins::BinGrid;
use crate::error::{Error, Result};

/// Named architecture with the grid it is trained on: `tiny` (32 coarse
/// bins), `desk` and `reference` (both on the fine grid).
pub fn preset(name: &str) -> Result<(ArchitectureConfig, BinGrid)> {
    match name {
        "tiny" => Ok((ArchitectureConfig::tiny(), BinGrid::new(32, 31.0, 225.0)?)),
        "desk" => Ok((ArchitectureConfig::desk(), BinGrid::fine())),
        "reference" => Ok((ArchitectureConfig::reference(), BinGrid::fine())),
        other => Err(Error::invalid(format!("unknown architecture '{other}' (tiny, desk, reference)"))),
    }
}

/// A network, its weights, and the bin grid its outputs index.
#[derive(Debug, Clone)]
pub struct PitchModel {
    pub network: Network,
    pub grid: BinGrid,
    pub params: NetworkParams,
}

impl PitchModel {
    /// Freshly initialized weights.
    pub fn new(config: ArchitectureConfig, grid: BinGrid, seed: u64) -> Result<Self> {
        if config.num_bins != grid.num_bins() {
            return Err(Error::invalid(format!(
                "network emits {} logits but the grid has {} bins",
                config.num_bins,
                grid.num_bins()
            )));
        }
        let network = Network::new(config)?;
        let params = network.init_params(seed);
        Ok(Self { network, grid, params })
    }

    pub fn from_parts(config: ArchitectureConfig, grid: BinGrid, params: NetworkParams) -> Result<Self> {
        if config.num_bins != grid.num_bins() {
            return Err(Error::Model(format!(
                "network emits {} logits but the grid has {} bins",
                config.num_bins,
                grid.num_bins()
            )));
        }
        let network = Network::new(config).map_err(|e| Error::Model(e.to_string()))?;
        network.check_params(&params)?;
        Ok(Self { network, grid, params })
    }

    /// Write the weights file and its sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(path, &self.params)?;
        weights::save_sidecar(
            path,
            &Sidecar {
                architecture: self.network.config().clone(),
                grid: self.grid,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = load_params(path)?;
        let sidecar = weights::load_sidecar(path)?;
        Self::from_parts(sidecar.architecture, sidecar.grid, params)
    }
}
