pub mod audio;
pub mod bins;
pub mod data;
pub mod decode;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod network;
pub mod pipeline;
pub mod training;

pub use audio::{Alignment, AudioBuffer, FrameSpec, Frames};
pub use bins::{cents_between, BinGrid};
pub use decode::{Decoder, PeriodicityMethod, PitchTrack, Posteriorgram};
pub use error::{Error, Result};
pub use network::{ArchitectureConfig, Network, NetworkParams, PitchModel};
