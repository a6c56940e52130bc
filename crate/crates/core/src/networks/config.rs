use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of the two warp networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Square input/output resolution; a power of two.
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub driving_vector_dim: usize,
}

impl NetConfig {
    pub fn full_scale() -> Self {
        Self {
            resolution: 256,
            base_channels: 64,
            max_channels: 512,
            driving_vector_dim: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            resolution: 64,
            base_channels: 16,
            max_channels: 128,
            driving_vector_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 2, got {}",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.max_channels == 0 || self.driving_vector_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of stride-2 encoder stages; the bottleneck is 1x1.
    pub fn n_down(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    /// Output channels of encoder stage `depth`.
    pub fn channels(&self, depth: usize) -> usize {
        let wide = self.base_channels.saturating_mul(1usize << depth.min(40));
        wide.min(self.max_channels)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}
