//! Parameterized layers built from graph ops.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so the same
//! layer description can run in `f32` for training and `f64` for gradient checks.

mod blocks;
mod dropout;
mod se;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, BnState, Graph, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub use blocks::{Block, DropoutPosition, Ilrb, IlrbConfig, PlainResidual};
pub use dropout::{Dropout, DropoutMode};
pub use se::SeBlock;

/// Per-forward state: train/eval switch and the dropout random stream.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    pub rng: &'r mut Rng,
}

impl<'r> ForwardCtx<'r> {
    pub fn new(mode: Mode, rng: &'r mut Rng) -> Self {
        Self { mode, rng }
    }
}

fn kaiming_fan_out<T: Real>(dims: &[usize], rng: &mut Rng) -> Tensor<T> {
    let fan_out = dims[0] * dims[2] * dims[3];
    let std = (2.0 / fan_out as f64).sqrt();
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

fn uniform<T: Real>(dims: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let dims = [cout, cin / groups, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            kaiming_fan_out(&dims, rng),
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::BnGamma,
            Tensor::full(&[channels], T::one()),
        );
        let beta = store.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(&[channels]));
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], T::one()),
        );
        Self {
            gamma,
            beta,
            state: BnState {
                running_mean,
                running_var,
            },
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batchnorm2d(x, gamma, beta, self.state, mode)
    }
}

/// An activation site. PReLU sites own a learnable scalar slope.
#[derive(Debug, Clone)]
pub struct Act {
    pub kind: Activation,
    pub slope: Option<ParamId>,
}

impl Act {
    pub const PRELU_INIT: f64 = 0.25;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, kind: Activation) -> Self {
        let slope = (kind == Activation::Prelu).then(|| {
            store.add(
                format!("{name}.slope"),
                ParamKind::PreluSlope,
                Tensor::scalar(T::from_f64(Self::PRELU_INIT)),
            )
        });
        Self { kind, slope }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let slope = self.slope.map(|s| g.param(s));
        g.activation(x, self.kind, slope)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::LinearWeight,
            uniform(&[fan_out, fan_in], bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            uniform(&[fan_out], bound, rng),
        );
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Conv → BN → optional activation, the unit every block is assembled from.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Act>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Option<Activation>,
        rng: &mut Rng,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            stride,
            groups,
            false,
            rng,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        let act = act.map(|k| Act::new(store, &format!("{name}.act"), k));
        Self { conv, bn, act }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y, mode)?;
        match &self.act {
            Some(a) => a.forward(g, y),
            None => Ok(y),
        }
    }
}
