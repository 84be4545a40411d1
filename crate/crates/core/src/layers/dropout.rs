use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// Zero whole `(n, c)` feature maps.
    Spatial,
    /// Zero individual elements.
    Regular,
}

/// Inverted dropout: kept entries are scaled by `1/(1-p)` so the expectation is unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub mode: DropoutMode,
    pub rate: f64,
}

impl Dropout {
    pub fn new(mode: DropoutMode, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { mode, rate })
    }

    /// Sample the multiplicative mask for an `[N, C, H, W]` (or `[N, F]`) tensor.
    pub fn sample_mask<T: Real>(&self, dims: &[usize], rng: &mut crate::rng::Rng) -> Vec<T> {
        let numel: usize = dims.iter().product();
        let keep_scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mut draw = || {
            if rng.random::<f64>() >= self.rate {
                keep_scale
            } else {
                T::zero()
            }
        };
        match self.mode {
            DropoutMode::Regular => (0..numel).map(|_| draw()).collect(),
            DropoutMode::Spatial => {
                let maps = dims[0] * dims.get(1).copied().unwrap_or(1);
                let plane = numel / maps.max(1);
                let mut mask = Vec::with_capacity(numel);
                for _ in 0..maps {
                    let m = draw();
                    mask.extend(std::iter::repeat_n(m, plane));
                }
                mask
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let mask = self.sample_mask(g.dims(x), ctx.rng);
        g.mask(x, mask)
    }
}
