use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Act, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Real;

/// Squeeze-and-excitation channel gate: `x * sigmoid(W2 act(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub act: Act,
    pub fc2: Linear,
}

impl SeBlock {
    pub const MIN_HIDDEN: usize = 4;

    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(Self::MIN_HIDDEN)
    }

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        inner: Activation,
        rng: &mut Rng,
    ) -> Self {
        let hidden = Self::hidden_width(channels, reduction);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng);
        let act = Act::new(store, &format!("{name}.act"), inner);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng);
        Self {
            channels,
            hidden,
            fc1,
            act,
            fc2,
        }
    }

    /// Per-sample, per-channel gate values `s[N, C]`.
    pub fn gate<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (n, c, _, _) = g.value(x).nchw()?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "SE block expects {} channels, input has {c}",
                self.channels
            )));
        }
        let squeezed = g.global_avg_pool(x)?;
        let flat = g.reshape(squeezed, &[n, c])?;
        let h = self.fc1.forward(g, flat)?;
        let h = self.act.forward(g, h)?;
        let h = self.fc2.forward(g, h)?;
        g.sigmoid(h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = self.gate(g, x)?;
        g.broadcast_mul_channels(x, s)
    }
}
