//! Network assembly from a declarative block table.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::layers::{
    Block, ConvBnAct, Dropout, DropoutMode, DropoutPosition, ForwardCtx, Ilrb, IlrbConfig, Linear,
    PlainResidual,
};
use crate::params::ParamStore;
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Real, Tensor};

/// Reference trainable-parameter count of the full-size published model, in millions.
pub const REFERENCE_PARAMS_M: f64 = 34.0;

fn default_repeats() -> usize {
    1
}
fn default_stride() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_block_dropout() -> f64 {
    0.2
}
fn default_dropout_mode() -> DropoutMode {
    DropoutMode::Spatial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_stride")]
    pub first_stride: usize,
    #[serde(default = "default_true")]
    pub se: bool,
    #[serde(default)]
    pub dropout_position: Option<DropoutPosition>,
    #[serde(default = "default_block_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_dropout_mode")]
    pub dropout_mode: DropoutMode,
}

impl BlockSpec {
    pub fn new(expansion: usize, out_channels: usize, repeats: usize, first_stride: usize) -> Self {
        Self {
            expansion,
            out_channels,
            repeats,
            first_stride,
            se: true,
            dropout_position: Some(DropoutPosition::AfterProject),
            dropout_rate: default_block_dropout(),
            dropout_mode: DropoutMode::Spatial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Ilrb,
    PlainResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub width_multiplier: f64,
    pub blocks: Vec<BlockSpec>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub block_kind: BlockKind,
    pub se_reduction: usize,
    pub head_dropout: f64,
}

impl ModelConfig {
    fn with_table(
        stem: usize,
        blocks: Vec<BlockSpec>,
        head: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            stem_channels: stem,
            width_multiplier: 1.0,
            blocks,
            head_channels: head,
            num_classes,
            activation: Activation::Relu6,
            block_kind: BlockKind::Ilrb,
            se_reduction: 12,
            head_dropout: 0.2,
        }
    }

    /// The MobileNetV2 `(t, c, n, s)` table.
    pub fn mbv2(num_classes: usize) -> Self {
        let table = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let blocks = table
            .iter()
            .map(|&(t, c, n, s)| BlockSpec::new(t, c, n, s))
            .collect();
        Self::with_table(32, blocks, 1280, num_classes)
    }

    /// Sixteen single blocks whose widths follow a linear ramp from 16 to 180,
    /// grouped into stages of 1/2/2/3/3/5 with stage strides 1/2/2/2/1/2.
    pub fn rexnet_lin(num_classes: usize) -> Self {
        let stages = [(1usize, 1usize), (2, 2), (2, 2), (3, 2), (3, 1), (5, 2)];
        let total: usize = stages.iter().map(|s| s.0).sum();
        let mut blocks = Vec::with_capacity(total);
        let mut i = 0;
        for (count, stride) in stages {
            for r in 0..count {
                let c = 16.0 + (180.0 - 16.0) * i as f64 / (total - 1) as f64;
                let expansion = if i == 0 { 1 } else { 6 };
                let s = if r == 0 { stride } else { 1 };
                blocks.push(BlockSpec::new(expansion, c.round() as usize, 1, s));
                i += 1;
            }
        }
        Self::with_table(32, blocks, 1280, num_classes)
    }

    /// A small two-stage network for desk-scale runs on tiny images.
    pub fn tiny(num_classes: usize) -> Self {
        let blocks = vec![BlockSpec::new(1, 8, 1, 1), BlockSpec::new(6, 16, 2, 2)];
        Self::with_table(8, blocks, 32, num_classes)
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "mbv2" => Ok(Self::mbv2(num_classes)),
            "rexnet-lin" => Ok(Self::rexnet_lin(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected mbv2, rexnet-lin or tiny)"
            ))),
        }
    }

    /// Channel count after width scaling. Unscaled configs keep their exact widths;
    /// scaled ones round to the nearest multiple of 8 with a floor of 8.
    pub fn scale_channels(&self, c: usize) -> usize {
        if self.width_multiplier == 1.0 {
            return c;
        }
        let v = c as f64 * self.width_multiplier;
        (((v / 8.0).round() as usize) * 8).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("block table is empty".into()));
        }
        if self.stem_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("stem and head channels must be ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be ≥ 1".into()));
        }
        Dropout::new(DropoutMode::Regular, self.head_dropout)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.repeats == 0 || b.expansion == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!(
                    "block {i}: repeats, expansion and out_channels must be ≥ 1"
                )));
            }
            if !(1..=2).contains(&b.first_stride) {
                return Err(Error::Config(format!("block {i}: first_stride must be 1 or 2")));
            }
            Dropout::new(b.dropout_mode, b.dropout_rate)?;
        }
        Ok(())
    }

    /// Stable digest of the architecture, used to guard checkpoint resumes.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Number of stride-2 stages including the stem.
    pub fn downsamplings(&self) -> usize {
        1 + self.blocks.iter().filter(|b| b.first_stride == 2).count()
    }
}

/// Layer structure of a built model. Parameter values live in the paired [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub stem: ConvBnAct,
    pub blocks: Vec<Block>,
    pub head: ConvBnAct,
    pub head_dropout: Dropout,
    pub classifier: Linear,
    pub num_classes: usize,
}

impl Network {
    /// Feature map just before global pooling.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let c = g.dims(x).get(1).copied();
        if c != Some(3) || g.dims(x).len() != 4 {
            return Err(Error::Dimension(format!(
                "model input must be [N,3,H,W], got {:?}",
                g.dims(x)
            )));
        }
        let mut y = self.stem.forward(g, x, ctx.mode)?;
        for b in &self.blocks {
            y = b.forward(g, y, ctx)?;
        }
        self.head.forward(g, y, ctx.mode)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let f = self.features(g, x, ctx)?;
        let pooled = g.global_avg_pool(f)?;
        let (n, c) = (g.dims(pooled)[0], g.dims(pooled)[1]);
        let flat = g.reshape(pooled, &[n, c])?;
        let flat = self.head_dropout.forward(g, flat, ctx)?;
        self.classifier.forward(g, flat)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Build with deterministic initialization from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        Self::build_with_rng(config, &mut rng)
    }

    pub fn build_with_rng(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let act = config.activation;
        let stem_c = config.scale_channels(config.stem_channels);
        let stem = ConvBnAct::new(&mut store, "stem", 3, stem_c, 3, 2, 1, Some(act), rng);
        let mut blocks = Vec::new();
        let mut cin = stem_c;
        for spec in &config.blocks {
            let cout = config.scale_channels(spec.out_channels);
            for r in 0..spec.repeats {
                let name = format!("blocks.{}", blocks.len());
                let stride = if r == 0 { spec.first_stride } else { 1 };
                let dropout = match spec.dropout_position {
                    Some(pos) => Some((pos, Dropout::new(spec.dropout_mode, spec.dropout_rate)?)),
                    None => None,
                };
                let block = match config.block_kind {
                    BlockKind::Ilrb => Block::Ilrb(Ilrb::new(
                        &mut store,
                        &name,
                        IlrbConfig {
                            in_channels: cin,
                            out_channels: cout,
                            stride,
                            expansion: spec.expansion,
                            se: spec.se,
                            se_reduction: config.se_reduction,
                            activation: act,
                            dropout,
                        },
                        rng,
                    )?),
                    BlockKind::PlainResidual => Block::Plain(PlainResidual::new(
                        &mut store,
                        &name,
                        cin,
                        cout,
                        stride,
                        act,
                        dropout.map(|(_, d)| d),
                        rng,
                    )),
                };
                blocks.push(block);
                cin = cout;
            }
        }
        let head_c = config.scale_channels(config.head_channels);
        let head = ConvBnAct::new(&mut store, "head", cin, head_c, 1, 1, 1, Some(act), rng);
        let classifier = Linear::new(&mut store, "classifier", head_c, config.num_classes, rng);
        Ok(Self {
            config: config.clone(),
            network: Network {
                stem,
                blocks,
                head,
                head_dropout: Dropout::new(DropoutMode::Regular, config.head_dropout)?,
                classifier,
                num_classes: config.num_classes,
            },
            params: store,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    /// Borrow the layer structure and the parameter store separately, so a
    /// graph can hold the store while layers run against it.
    pub fn split_mut(&mut self) -> (&Network, &mut ParamStore<T>) {
        (&self.network, &mut self.params)
    }

    /// Forward a batch without keeping the graph.
    pub fn logits(&mut self, input: Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let (net, store) = self.split_mut();
        let mut g = Graph::with_params(store);
        let x = g.constant(input);
        let mut ctx = ForwardCtx::new(mode, rng);
        let y = net.forward(&mut g, x, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            network: self.network.clone(),
            params: self.params.cast(),
        }
    }
}
