//! Deterministic parameter initialization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::tensor::{ConvWeights1x1, DeconvWeights, Matrix};

/// Half-width of the seeded uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every weight and bias uniform in `[-0.1, 0.1]`.
    SeededUniform,
    /// Rectangular identities, zero biases.
    Identity,
    Zeros,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::SeededUniform => "seeded-uniform",
            InitMode::Identity => "identity",
            InitMode::Zeros => "zeros",
        })
    }
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seeded-uniform" => Ok(InitMode::SeededUniform),
            "identity" => Ok(InitMode::Identity),
            "zeros" => Ok(InitMode::Zeros),
            other => Err(format!(
                "unknown init mode `{other}` (expected seeded-uniform, identity or zeros)"
            )),
        }
    }
}

/// Hands out weight tensors in a fixed order, so a given mode and seed always
/// yields the same parameters.
#[derive(Debug, Clone)]
pub struct Initializer {
    mode: InitMode,
    rng: SplitMix64,
}

impl Initializer {
    pub fn new(mode: InitMode, seed: u64) -> Self {
        Initializer {
            mode,
            rng: SplitMix64::new(seed),
        }
    }

    pub fn mode(&self) -> InitMode {
        self.mode
    }

    pub fn conv(&mut self, c_in: usize, c_out: usize, with_bias: bool) -> ConvWeights1x1 {
        match self.mode {
            InitMode::Identity => {
                let mut w = ConvWeights1x1::identity(c_in, c_out);
                w.bias = with_bias.then(|| vec![0.0; c_out]);
                w
            }
            InitMode::Zeros => ConvWeights1x1::zeros(c_in, c_out, with_bias),
            InitMode::SeededUniform => {
                let mut w = Matrix::zeros(c_in, c_out);
                self.rng.fill_uniform(w.data_mut(), -INIT_SCALE, INIT_SCALE);
                let bias = with_bias.then(|| {
                    let mut b = vec![0.0; c_out];
                    self.rng.fill_uniform(&mut b, -INIT_SCALE, INIT_SCALE);
                    b
                });
                ConvWeights1x1 { w, bias }
            }
        }
    }

    pub fn deconv(&mut self, c_in: usize, c_out: usize) -> DeconvWeights {
        match self.mode {
            InitMode::Identity => DeconvWeights::identity(c_in, c_out),
            InitMode::Zeros => DeconvWeights::zeros(c_in, c_out),
            InitMode::SeededUniform => {
                let mut d = DeconvWeights::zeros(c_in, c_out);
                self.rng
                    .fill_uniform(d.kernel_mut(), -INIT_SCALE, INIT_SCALE);
                d
            }
        }
    }
}
