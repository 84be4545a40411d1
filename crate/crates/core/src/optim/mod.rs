//! Adam-family optimizers (AdamP, AdamW, Adam) and SGD with momentum.

pub mod adamp;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub use adamp::ProjectionView;
pub use schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamP,
    AdamW,
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamp" => Ok(Self::AdamP),
            "adamw" => Ok(Self::AdamW),
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.05
}
fn d_delta() -> f64 {
    0.1
}
fn d_wd_ratio() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// AdamP cosine threshold; 0 disables projection.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Weight-decay multiplier for projected parameters.
    #[serde(default = "d_wd_ratio")]
    pub wd_ratio: f64,
    #[serde(default)]
    pub nesterov: bool,
    /// SGD momentum.
    #[serde(default = "d_momentum")]
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn new(name: OptimizerKind) -> Self {
        Self {
            name,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            delta: d_delta(),
            wd_ratio: d_wd_ratio(),
            nesterov: false,
            momentum: d_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.delta >= 0.0
            && self.wd_ratio >= 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters: {self:?}")))
        }
    }
}

/// Optimizer with per-parameter moment buffers, indexed like the [`ParamStore`].
///
/// `first` holds Adam's first moment or the SGD momentum buffer; `second` is
/// unused by SGD.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    last_projections: Vec<Option<ProjectionView>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            last_projections: Vec::new(),
        }
    }

    /// Which view (if any) projected each parameter on the most recent step.
    pub fn last_projections(&self) -> &[Option<ProjectionView>] {
        &self.last_projections
    }

    fn ensure_state(&mut self, params: &ParamStore<T>) {
        if self.first.len() != params.len() {
            self.first = params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect();
            self.second = self.first.clone();
        }
    }

    /// Restore moment buffers, e.g. from a checkpoint.
    pub fn set_state(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }

    pub fn state_initialized(&self) -> bool {
        !self.first.is_empty()
    }

    /// Apply one update with learning rate `lr` using the gradients held in `params`.
    /// Rejects the whole step, leaving parameters and state untouched, if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in params.iter() {
            if p.kind.trainable() && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        self.ensure_state(params);
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr_t = T::from_f64(lr);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        self.last_projections = vec![None; params.len()];
        for (i, p) in params.iter_mut().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            let wd = if p.kind.decays() { c.weight_decay } else { 0.0 };
            let wd_t = T::from_f64(wd);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let w = p.value.data_mut();
            let g = p.grad.data();
            match c.name {
                OptimizerKind::Sgd => {
                    let mu = T::from_f64(c.momentum);
                    for k in 0..w.len() {
                        let gk = g[k] + wd_t * w[k];
                        m[k] = mu * m[k] + gk;
                        let d = if c.nesterov { gk + mu * m[k] } else { m[k] };
                        w[k] -= lr_t * d;
                    }
                }
                OptimizerKind::Adam => {
                    let (s1, s2) = (T::from_f64(bc1), T::from_f64(bc2).sqrt());
                    for k in 0..w.len() {
                        let gk = g[k] + wd_t * w[k];
                        m[k] = b1 * m[k] + (one - b1) * gk;
                        v[k] = b2 * v[k] + (one - b2) * gk * gk;
                        w[k] -= lr_t * (m[k] / s1) / (v[k].sqrt() / s2 + eps);
                    }
                }
                OptimizerKind::AdamW | OptimizerKind::AdamP => {
                    let (s1, s2) = (T::from_f64(bc1), T::from_f64(bc2).sqrt());
                    let mut perturb = Vec::with_capacity(w.len());
                    for k in 0..w.len() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        let num = if c.nesterov && c.name == OptimizerKind::AdamP {
                            b1 * m[k] + (one - b1) * g[k]
                        } else {
                            m[k]
                        };
                        perturb.push((num / s1) / (v[k].sqrt() / s2 + eps));
                    }
                    let mut decay = wd_t;
                    if c.name == OptimizerKind::AdamP {
                        let dims = p.value.dims().to_vec();
                        let w_now = p.value.data();
                        let view = adamp::project(w_now, g, &mut perturb, &dims, c.delta, c.eps);
                        if view.is_some() {
                            decay = T::from_f64(wd * c.wd_ratio);
                        }
                        self.last_projections[i] = view;
                    }
                    let w = p.value.data_mut();
                    for k in 0..w.len() {
                        w[k] = w[k] - lr_t * perturb[k] - lr_t * decay * w[k];
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as tensors shaped like their parameters, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        if !self.state_initialized() {
            return Vec::new();
        }
        params
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(id, p)| {
                let dims = p.value.dims();
                (
                    p.name.clone(),
                    Tensor::new(dims, self.first[id.index()].clone()).expect("state dims"),
                    Tensor::new(dims, self.second[id.index()].clone()).expect("state dims"),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store(w: &[f64], dims: &[usize], kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", kind, Tensor::new(dims, w.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        for kind in [
            OptimizerKind::AdamP,
            OptimizerKind::AdamW,
            OptimizerKind::Adam,
            OptimizerKind::Sgd,
        ] {
            let mut cfg = OptimizerConfig::new(kind);
            cfg.weight_decay = 0.0;
            let mut opt = Optimizer::new(cfg);
            let mut s = store(&[0.3, -1.2, 2.0, 0.1], &[2, 2], ParamKind::ConvWeight);
            for _ in 0..3 {
                opt.step(&mut s, 0.01).unwrap();
            }
            assert_eq!(s.value(crate::params::ParamId(0)).data(), &[0.3, -1.2, 2.0, 0.1]);
        }
    }

    #[test]
    fn adam_first_step_moves_against_gradient() {
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam));
        let mut s = store(&[1.0], &[1], ParamKind::Bias);
        s.get_mut(crate::params::ParamId(0)).grad = Tensor::scalar(-0.3);
        opt.step(&mut s, 0.01).unwrap();
        let w = s.value(crate::params::ParamId(0)).data()[0];
        assert!(w > 1.0);
        assert!((w - 1.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::AdamP));
        let mut s = store(&[1.0, 2.0], &[1, 2], ParamKind::ConvWeight);
        s.get_mut(crate::params::ParamId(0)).grad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(opt.step, 0);
        assert!(!opt.state_initialized());
        assert_eq!(s.value(crate::params::ParamId(0)).data(), &[1.0, 2.0]);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd));
        let mut s = store(&[1.0], &[1], ParamKind::Buffer);
        s.get_mut(crate::params::ParamId(0)).grad = Tensor::scalar(5.0);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(crate::params::ParamId(0)).data(), &[1.0]);
    }
}
