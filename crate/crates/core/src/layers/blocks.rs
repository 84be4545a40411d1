use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvBnAct, Dropout, ForwardCtx, SeBlock};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Real;

/// Where the in-block dropout sits.
///
/// 1: after the expansion activation, 2: after the SE gate,
/// 3: after the projection conv, before the residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DropoutPosition {
    AfterExpand = 1,
    AfterSe = 2,
    AfterProject = 3,
}

impl TryFrom<u8> for DropoutPosition {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::AfterExpand),
            2 => Ok(Self::AfterSe),
            3 => Ok(Self::AfterProject),
            other => Err(Error::Config(format!(
                "dropout position must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

impl From<DropoutPosition> for u8 {
    fn from(p: DropoutPosition) -> u8 {
        p as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlrbConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
    pub se: bool,
    pub se_reduction: usize,
    pub activation: Activation,
    pub dropout: Option<(DropoutPosition, Dropout)>,
}

impl IlrbConfig {
    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// Inverted linear residual block: narrow → wide → narrow with no activation
/// after the projection conv.
#[derive(Debug, Clone)]
pub struct Ilrb {
    pub config: IlrbConfig,
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub se: Option<SeBlock>,
    pub project: ConvBnAct,
}

impl Ilrb {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        config: IlrbConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.expansion == 0 || !(1..=2).contains(&config.stride) {
            return Err(Error::Config(format!(
                "{name}: expansion must be ≥ 1 and stride 1 or 2"
            )));
        }
        let hidden = config.hidden_channels();
        let act = Some(config.activation);
        let expand = (config.expansion != 1).then(|| {
            ConvBnAct::new(
                store,
                &format!("{name}.expand"),
                config.in_channels,
                hidden,
                1,
                1,
                1,
                act,
                rng,
            )
        });
        let depthwise = ConvBnAct::new(
            store,
            &format!("{name}.depthwise"),
            hidden,
            hidden,
            3,
            config.stride,
            hidden,
            act,
            rng,
        );
        let se = config.se.then(|| {
            SeBlock::new(
                store,
                &format!("{name}.se"),
                hidden,
                config.se_reduction,
                Activation::Relu6,
                rng,
            )
        });
        let project = ConvBnAct::new(
            store,
            &format!("{name}.project"),
            hidden,
            config.out_channels,
            1,
            1,
            1,
            None,
            rng,
        );
        Ok(Self {
            config,
            expand,
            depthwise,
            se,
            project,
        })
    }

    fn maybe_drop<T: Real>(
        &self,
        at: DropoutPosition,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        match self.config.dropout {
            Some((pos, d)) if pos == at => d.forward(g, x, ctx),
            _ => Ok(x),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let c = g.dims(x).get(1).copied().unwrap_or(0);
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "ILRB expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut y = match &self.expand {
            Some(e) => e.forward(g, x, ctx.mode)?,
            None => x,
        };
        y = self.maybe_drop(DropoutPosition::AfterExpand, g, y, ctx)?;
        y = self.depthwise.forward(g, y, ctx.mode)?;
        if let Some(se) = &self.se {
            y = se.forward(g, y)?;
        }
        y = self.maybe_drop(DropoutPosition::AfterSe, g, y, ctx)?;
        y = self.project.forward(g, y, ctx.mode)?;
        y = self.maybe_drop(DropoutPosition::AfterProject, g, y, ctx)?;
        if self.config.has_skip() {
            y = g.add(y, x)?;
        }
        Ok(y)
    }
}

/// Post-activation basic residual block used as the ablation baseline:
/// `act(bn(conv3x3(act(bn(conv3x3(x))))) + shortcut(x))`.
///
/// A configured dropout always sits before the residual add.
#[derive(Debug, Clone)]
pub struct PlainResidual {
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
    pub shortcut: Option<ConvBnAct>,
    pub out_act: crate::layers::Act,
    pub dropout: Option<Dropout>,
}

impl PlainResidual {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        activation: Activation,
        dropout: Option<Dropout>,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = ConvBnAct::new(
            store,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            Some(activation),
            rng,
        );
        let conv2 = ConvBnAct::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, None, rng);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            ConvBnAct::new(
                store,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                1,
                None,
                rng,
            )
        });
        let out_act = crate::layers::Act::new(store, &format!("{name}.out_act"), activation);
        Self {
            conv1,
            conv2,
            shortcut,
            out_act,
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.conv1.forward(g, x, ctx.mode)?;
        let mut y = self.conv2.forward(g, y, ctx.mode)?;
        if let Some(d) = &self.dropout {
            y = d.forward(g, y, ctx)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x, ctx.mode)?,
            None => x,
        };
        let y = g.add(y, skip)?;
        self.out_act.forward(g, y)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Ilrb(Ilrb),
    Plain(PlainResidual),
}

impl Block {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        match self {
            Block::Ilrb(b) => b.forward(g, x, ctx),
            Block::Plain(b) => b.forward(g, x, ctx),
        }
    }
}
