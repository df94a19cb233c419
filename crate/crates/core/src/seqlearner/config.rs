use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the selective scan is executed outside of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    /// Blelloch scan for gradient-free forward passes. Passes that record
    /// gradients always use the sequential recurrence.
    Parallel,
}

/// Shape and initialization settings for one SSM learner stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    /// Model width: the number of clients seen by this learner.
    pub width: usize,
    /// Inner width `E = expand · width`.
    pub expand: usize,
    /// State dimension `M`.
    pub state_dim: usize,
    /// Causal convolution kernel size `k`.
    pub conv_kernel: usize,
    pub num_blocks: usize,
    /// When false, the convolution and the in/out/B/C projections carry biases.
    pub zero_bias: bool,
    pub norm_eps: f64,
    /// Initial value of the output normalization gain.
    pub out_gain_init: f64,
    /// Multiplier on the standard deviation of each block's initial output
    /// projection; 0 starts every block as the identity through its residual.
    pub out_proj_scale: f64,
    pub scan_mode: ScanMode,
}

impl SsmConfig {
    pub fn inner(&self) -> usize {
        self.expand * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learner.width", self.width),
            ("learner.expand", self.expand),
            ("learner.state_dim", self.state_dim),
            ("learner.conv_kernel", self.conv_kernel),
            ("learner.num_blocks", self.num_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("learner.norm_eps", "must be > 0"));
        }
        if !(self.out_proj_scale >= 0.0 && self.out_proj_scale.is_finite()) {
            return Err(Error::config("learner.out_proj_scale", "must be finite and >= 0"));
        }
        if !self.out_gain_init.is_finite() {
            return Err(Error::config("learner.out_gain_init", "must be finite"));
        }
        Ok(())
    }

    /// Closed-form parameter count; independent of the adapter size.
    pub fn param_count(&self) -> usize {
        let (n, e, m, k) = (self.width, self.inner(), self.state_dim, self.conv_kernel);
        let mut per_block = n // norm gain
            + n * 2 * e // in_proj
            + e * k // conv
            + 3 * e * m // A_log, B_proj, C_proj
            + 3 * e // dt_w, dt_b, D_skip
            + e * n; // out_proj
        if !self.zero_bias {
            per_block += e + 2 * e + n + 2 * m;
        }
        self.num_blocks * per_block + n
    }
}
