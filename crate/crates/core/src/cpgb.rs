//! Color prior guidance: a per-pixel color MLP followed by a
//! ResBlock-in-ResBlock refinement, producing the prior injected into every
//! unfolding stage.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, expect_channels, Activation, Conv2d};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorActivation {
    /// `sin(x)`.
    Periodic,
    /// `tanh(x)`.
    SmoothMonotone,
}

impl ColorActivation {
    fn activation(self) -> Activation {
        match self {
            ColorActivation::Periodic => Activation::Sine { frequency: 1.0 },
            ColorActivation::SmoothMonotone => Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorMlpConfig {
    /// Layer widths including input and output, e.g. `[3, 64, 64, 3]`.
    pub widths: Vec<usize>,
    pub activation: ColorActivation,
}

impl Default for ColorMlpConfig {
    fn default() -> Self {
        Self {
            widths: vec![3, 64, 64, 3],
            activation: ColorActivation::Periodic,
        }
    }
}

impl ColorMlpConfig {
    pub fn validate(&self) -> Result<()> {
        let field = "model.cpgb.mlp.widths";
        if self.widths.len() < 2 {
            return Err(Error::config(field, "need at least input and output widths"));
        }
        if self.widths[0] != 3 || self.widths[self.widths.len() - 1] != 3 {
            return Err(Error::config(field, "first and last width must be 3"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config(field, "widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RirConfig {
    pub groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            blocks_per_group: 2,
            channels: 32,
            kernel: 3,
        }
    }
}

impl RirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::config("model.cpgb.rir.groups", "must be >= 1"));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::config("model.cpgb.rir.blocks_per_group", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("model.cpgb.rir.channels", "must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("model.cpgb.rir.kernel", "must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CpgbConfig {
    pub mlp: ColorMlpConfig,
    pub rir: RirConfig,
}

impl CpgbConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.rir.validate()
    }
}

/// Per-pixel color transform realised as a stack of 1x1 convolutions.
#[derive(Debug, Clone)]
pub struct ColorMlp {
    pub layers: Vec<Conv2d>,
    pub activation: Activation,
}

impl ColorMlp {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ColorMlpConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, &format!("{name}.{i}"), w[0], w[1], 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation: cfg.activation.activation(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "color mlp input")?;
        ensure_finite(x, "color mlp input")?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i != last {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }

    pub fn zero(&self) -> Result<()> {
        self.layers.iter().try_for_each(Conv2d::zero)
    }
}

/// `x + conv(gelu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, kernel)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, kernel)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = crate::fused::gelu(&self.conv1.forward(x)?)?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualGroup {
    pub blocks: Vec<ResBlock>,
    pub tail: Conv2d,
}

/// Nested residual groups with a long skip around the whole stack.
#[derive(Debug, Clone)]
pub struct Rir {
    pub groups: Vec<ResidualGroup>,
    pub tail: Conv2d,
    pub channels: usize,
}

impl Rir {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &RirConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let groups = (0..cfg.groups)
            .map(|g| {
                let blocks = (0..cfg.blocks_per_group)
                    .map(|b| ResBlock::new(store, &format!("{name}.group{g}.block{b}"), c, cfg.kernel))
                    .collect::<Result<Vec<_>>>()?;
                let tail = Conv2d::new(store, &format!("{name}.group{g}.tail"), c, c, cfg.kernel)?;
                Ok(ResidualGroup { blocks, tail })
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = Conv2d::new(store, &format!("{name}.tail"), c, c, cfg.kernel)?;
        Ok(Self {
            groups,
            tail,
            channels: c,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        expect_channels(f, self.channels, "rir input")?;
        let mut h = f.clone();
        for group in &self.groups {
            let mut g = h.clone();
            for block in &group.blocks {
                g = block.forward(&g)?;
            }
            h = (&h + group.tail.forward(&g)?)?;
        }
        Ok((f + self.tail.forward(&h)?)?)
    }

    /// Zeroes every residual-branch terminal conv, making the block the identity.
    pub fn zero_residuals(&self) -> Result<()> {
        for group in &self.groups {
            for block in &group.blocks {
                block.conv2.zero()?;
            }
            group.tail.zero()?;
        }
        self.tail.zero()
    }
}

/// `Conv(RIR(Conv(mlp(x) + x)))`.
#[derive(Debug, Clone)]
pub struct Cpgb {
    pub mlp: ColorMlp,
    pub head: Conv2d,
    pub rir: Rir,
    pub tail: Conv2d,
}

impl Cpgb {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CpgbConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.rir.channels;
        Ok(Self {
            mlp: ColorMlp::new(store, &format!("{name}.mlp"), &cfg.mlp)?,
            head: Conv2d::new(store, &format!("{name}.head"), 3, c, 3)?,
            rir: Rir::new(store, &format!("{name}.rir"), &cfg.rir)?,
            tail: Conv2d::new(store, &format!("{name}.tail"), c, 3, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mapped = (self.mlp.forward(x)? + x)?;
        let f = self.head.forward(&mapped)?;
        self.tail.forward(&self.rir.forward(&f)?)
    }

    /// Zero color mapping, identity boundary convs, identity RIR: `forward(x) == x`.
    pub fn set_identity(&self) -> Result<()> {
        self.mlp.zero()?;
        self.head.set_identity()?;
        self.rir.zero_residuals()?;
        self.tail.set_identity()
    }
}
