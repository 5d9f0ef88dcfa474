use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of down/up-sampling levels.
    pub depth: usize,
    pub kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 3,
            kernel: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_width < 2 {
            return Err(Error::Config("base_width must be >= 2".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {m} (2^depth)"
            )));
        }
        Ok(())
    }

    pub(crate) fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Which batch-norm statistics a forward pass uses: `lambda` times the
/// tracked statistics plus `1 - lambda` times the input's own.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatMode {
    lambda: f32,
}

impl StatMode {
    /// Conventional inference with tracked statistics.
    pub const TRACKED: StatMode = StatMode { lambda: 1.0 };
    /// Statistics of the current input only.
    pub const INSTANT: StatMode = StatMode { lambda: 0.0 };

    pub fn new(lambda: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }
}
