use serde::{Deserialize, Serialize};

use super::kernels::conv_output_len;
use crate::audio::WINDOW_SIZE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pool: Option<PoolConfig>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per item, over channels and length.
    Layer,
    /// Per channel, over batch and length; running statistics at inference.
    Batch,
}

/// Layer sizes of the convolutional candidate generator.
///
/// Each block is conv -> ReLU -> normalization -> optional max-pool ->
/// dropout (training only, when `dropout_prob > 0`). A final convolution
/// whose kernel spans the remaining length maps to `num_bins` logits.
/// There is no input normalization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_len: usize,
    pub blocks: Vec<BlockConfig>,
    pub head_kernel: usize,
    pub num_bins: usize,
    pub normalization: Normalization,
    #[serde(default)]
    pub dropout_prob: f64,
}

impl ArchitectureConfig {
    /// Six blocks with 256/32/32/128/256/512 channels, kernel 32, pooling
    /// after the first three, and a 7-wide head onto 1440 bins.
    pub fn reference() -> Self {
        let channels = [256, 32, 32, 128, 256, 512];
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(BlockConfig {
                in_channels: c_in,
                out_channels: c,
                kernel_size: 32,
                stride: 1,
                pool: (i < 3).then_some(PoolConfig { size: 2, stride: 2 }),
            });
            c_in = c;
        }
        Self {
            input_len: WINDOW_SIZE,
            blocks,
            head_kernel: 7,
            num_bins: 1440,
            normalization: Normalization::Layer,
            dropout_prob: 0.0,
        }
    }

    /// Desk-scale network over the same 1024-sample window and 1440 bins,
    /// small enough to train on one CPU core.
    pub fn desk() -> Self {
        let pool = Some(PoolConfig { size: 2, stride: 2 });
        let block = |in_channels, out_channels, kernel_size, stride| BlockConfig {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            pool,
        };
        Self {
            input_len: WINDOW_SIZE,
            blocks: vec![
                block(1, 32, 64, 4),
                block(32, 32, 8, 1),
                block(32, 64, 8, 1),
                block(64, 64, 8, 1),
            ],
            head_kernel: 8,
            num_bins: 1440,
            normalization: Normalization::Layer,
            dropout_prob: 0.0,
        }
    }

    /// Two 8-channel blocks over the 1024-sample window onto 32 bins.
    pub fn tiny() -> Self {
        let pool = Some(PoolConfig { size: 4, stride: 4 });
        Self {
            input_len: WINDOW_SIZE,
            blocks: vec![
                BlockConfig { in_channels: 1, out_channels: 8, kernel_size: 64, stride: 4, pool },
                BlockConfig { in_channels: 8, out_channels: 8, kernel_size: 8, stride: 1, pool },
            ],
            head_kernel: 13,
            num_bins: 32,
            normalization: Normalization::Layer,
            dropout_prob: 0.0,
        }
    }

    /// Lengths after every conv and pool stage, starting with the input
    /// length and ending with the head output length (always 1).
    ///
    /// Fails unless the channels chain from 1 to `num_bins` and the lengths
    /// compose to exactly one output position.
    pub fn shape_chain(&self) -> Result<Vec<usize>> {
        if self.input_len == 0 || self.num_bins < 2 {
            return Err(Error::shape("input length and bin count must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        let mut chain = vec![self.input_len];
        let mut len = self.input_len;
        let mut channels = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != channels || b.out_channels == 0 {
                return Err(Error::shape(format!(
                    "block {i} takes {} channels but receives {channels}",
                    b.in_channels
                )));
            }
            len = conv_output_len(len, b.kernel_size, b.stride).ok_or_else(|| {
                Error::shape(format!("block {i}: kernel {} does not fit length {len}", b.kernel_size))
            })?;
            chain.push(len);
            if let Some(p) = b.pool {
                len = conv_output_len(len, p.size, p.stride).ok_or_else(|| {
                    Error::shape(format!("block {i}: pool {} does not fit length {len}", p.size))
                })?;
                chain.push(len);
            }
            channels = b.out_channels;
        }
        let out = conv_output_len(len, self.head_kernel, 1)
            .ok_or_else(|| Error::shape(format!("head kernel {} does not fit length {len}", self.head_kernel)))?;
        if out != 1 {
            return Err(Error::shape(format!(
                "head maps length {len} to {out} positions; exactly 1 is required"
            )));
        }
        chain.push(out);
        Ok(chain)
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.out_channels)
    }

    /// Approximate multiply-accumulates for one frame's forward pass.
    pub fn macs_per_frame(&self) -> Result<u64> {
        let chain = self.shape_chain()?;
        let mut macs = 0u64;
        let mut idx = 1;
        for b in &self.blocks {
            macs += (chain[idx] * b.kernel_size * b.in_channels * b.out_channels) as u64;
            idx += if b.pool.is_some() { 2 } else { 1 };
        }
        macs += (self.head_kernel * self.last_channels() * self.num_bins) as u64;
        Ok(macs)
    }
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::reference()
    }
}
