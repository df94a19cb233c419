//! Feed-forward learner over a fixed-length window flattened to `N·L` features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub width: usize,
    /// Fixed window length; shorter windows are zero-padded on the left.
    pub window: usize,
    pub hidden: Vec<usize>,
    /// Standard deviation of the output layer's initial weights, relative
    /// to the usual `1/sqrt(fan_in)`.
    pub out_init_scale: f64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("learner.width", "must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::config("max_seq_len", "must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("learner.mlp_hidden", "layer sizes must be >= 1"));
        }
        if !self.out_init_scale.is_finite() {
            return Err(Error::config("learner.out_gain_init", "must be finite"));
        }
        Ok(())
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.width * self.window];
        sizes.extend(&self.hidden);
        sizes.push(self.width);
        sizes
    }

    /// `Σ_layers (fan_in + 1)·fan_out` over `N·L → hidden… → N`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Weights are stored `[fan_in, fan_out]`, followed by the bias, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLearner {
    pub config: MlpConfig,
    params: Vec<Tensor>,
}

impl MlpLearner {
    pub fn init(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes();
        let layers = sizes.len() - 1;
        let mut params = Vec::with_capacity(2 * layers);
        for (i, w) in sizes.windows(2).enumerate() {
            let mut std = 1.0 / (w[0] as f64).sqrt();
            if i + 1 == layers {
                std *= config.out_init_scale;
            }
            params.push(Tensor::randn(&[w[0], w[1]], std, rng));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self { config, params })
    }

    pub fn param_names(config: &MlpConfig) -> Vec<String> {
        (0..config.layer_sizes().len() - 1)
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }

    pub fn from_params(config: MlpConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes();
        let ok = params.len() == 2 * (sizes.len() - 1)
            && sizes.windows(2).enumerate().all(|(i, w)| {
                params[2 * i].shape() == [w[0], w[1]] && params[2 * i + 1].shape() == [w[1]]
            });
        if !ok {
            return Err(Error::Dimension("MLP parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Left-pads `[D, L', N]` with zero steps up to the configured length.
    pub fn pad_window(&self, window: &Tensor) -> Result<Tensor> {
        let [d, l, n] = window.shape()[..] else {
            return Err(Error::Dimension("learner window must be [D, L, N]".into()));
        };
        let want = self.config.window;
        if l == 0 || l > want {
            return Err(Error::Sequence(format!("window length {l} outside 1..={want}")));
        }
        if n != self.config.width {
            return Err(Error::Dimension(format!("window has {n} channels, MLP expects {}", self.config.width)));
        }
        let mut data = vec![0.0; d * want * n];
        for di in 0..d {
            let src = &window.data()[di * l * n..(di + 1) * l * n];
            data[(di * want + want - l) * n..(di + 1) * want * n].copy_from_slice(src);
        }
        Tensor::new(vec![d, want, n], data)
    }

    /// ξ `[D, N]` from a window that already has the configured length.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], window: Var) -> Result<Var> {
        let shape = tape.shape(window).to_vec();
        let [d, l, n] = shape[..] else {
            return Err(Error::Dimension("learner window must be [D, L, N]".into()));
        };
        if l != self.config.window || n != self.config.width {
            return Err(Error::Dimension(format!(
                "MLP expects [D, {}, {}], got {shape:?}",
                self.config.window, self.config.width
            )));
        }
        let mut x = tape.reshape(window, &[d, l * n])?;
        let layers = vars.len() / 2;
        for i in 0..layers {
            x = tape.matmul(x, vars[2 * i])?;
            x = tape.add(x, vars[2 * i + 1])?;
            if i + 1 < layers {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }
}
