//! U-shaped encoder/decoder used as the learned proximal map, with
//! cross-stage fusion and the image/feature merge.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::cpgb::ResBlock;
use crate::error::{Error, Result};
use crate::nn::{expect_channels, expect_same_spatial, Conv2d, ConvTranspose2d};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Number of resolutions, including the bottleneck.
    pub scales: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            scales: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("model.unet.base_width", "must be >= 1"));
        }
        if self.scales < 2 {
            return Err(Error::config("model.unet.scales", "must be >= 2"));
        }
        Ok(())
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }
}

/// Encoder and decoder features handed from one stage to the next.
#[derive(Debug, Clone)]
pub struct CrossStageFeatures {
    /// One per encoder scale, finest first.
    pub encoder: Vec<Tensor>,
    pub decoder: Tensor,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Finest first; `scales - 1` entries.
    pub features: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Per encoder scale, projects the previous stage's encoder feature.
    pub encoder: Vec<Conv2d>,
    /// Projects the previous stage's decoder feature into the finest scale.
    pub decoder: Conv2d,
}

impl Fusion {
    pub fn zero(&self) -> Result<()> {
        self.encoder.iter().try_for_each(Conv2d::zero)?;
        self.decoder.zero()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<ResBlock>,
    pub downs: Vec<Conv2d>,
    pub bottleneck: ResBlock,
    pub fusion: Option<Fusion>,
    pub cfg: UNetConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig, with_fusion: bool) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.scales - 1;
        let mut blocks = Vec::with_capacity(levels);
        let mut downs = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = cfg.width(l);
            blocks.push(ResBlock::new(store, &format!("{name}.block{l}"), c, 3)?);
            downs.push(Conv2d::with_stride(store, &format!("{name}.down{l}"), c, cfg.width(l + 1), 3, 2)?);
        }
        let bottleneck = ResBlock::new(store, &format!("{name}.bottleneck"), cfg.width(levels), 3)?;
        let fusion = if with_fusion {
            let encoder = (0..levels)
                .map(|l| Conv2d::new(store, &format!("{name}.fuse_enc{l}"), cfg.width(l), cfg.width(l), 1))
                .collect::<Result<Vec<_>>>()?;
            let decoder = Conv2d::new(store, &format!("{name}.fuse_dec"), cfg.base_width, cfg.base_width, 1)?;
            Some(Fusion { encoder, decoder })
        } else {
            None
        };
        Ok(Self {
            blocks,
            downs,
            bottleneck,
            fusion,
            cfg: cfg.clone(),
        })
    }

    pub fn encode(&self, f_in: &Tensor, prev: Option<&CrossStageFeatures>) -> Result<Encoded> {
        let (_, _, h, w) = expect_channels(f_in, self.cfg.base_width, "encoder input")?;
        let d = self.cfg.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "encoder input {h}x{w} is not divisible by {d}"
            )));
        }
        let fusion = match (prev, &self.fusion) {
            (Some(p), Some(f)) => {
                if p.encoder.len() != self.blocks.len() {
                    return Err(Error::shape(format!(
                        "expected {} previous encoder features, got {}",
                        self.blocks.len(),
                        p.encoder.len()
                    )));
                }
                Some((p, f))
            }
            (Some(_), None) => {
                return Err(Error::shape("this encoder has no cross-stage fusion"));
            }
            _ => None,
        };
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut h = f_in.clone();
        for (l, (block, down)) in self.blocks.iter().zip(&self.downs).enumerate() {
            h = block.forward(&h)?;
            if let Some((prev, fusion)) = fusion {
                expect_same_spatial(&h, &prev.encoder[l], "cross-stage encoder fusion")?;
                h = (h + fusion.encoder[l].forward(&prev.encoder[l])?)?;
                if l == 0 {
                    expect_same_spatial(&h, &prev.decoder, "cross-stage decoder fusion")?;
                    h = (h + fusion.decoder.forward(&prev.decoder)?)?;
                }
            }
            features.push(h.clone());
            h = down.forward(&h)?;
        }
        Ok(Encoded {
            features,
            bottleneck: self.bottleneck.forward(&h)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Indexed by the scale they upsample into.
    pub ups: Vec<ConvTranspose2d>,
    pub fuses: Vec<Conv2d>,
    pub blocks: Vec<ResBlock>,
    pub cfg: UNetConfig,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.scales - 1;
        let mut ups = Vec::with_capacity(levels);
        let mut fuses = Vec::with_capacity(levels);
        let mut blocks = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = cfg.width(l);
            ups.push(ConvTranspose2d::new(store, &format!("{name}.up{l}"), cfg.width(l + 1), c)?);
            fuses.push(Conv2d::new(store, &format!("{name}.fuse{l}"), 2 * c, c, 1)?);
            blocks.push(ResBlock::new(store, &format!("{name}.block{l}"), c, 3)?);
        }
        Ok(Self {
            ups,
            fuses,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn decode(&self, bottleneck: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        let levels = self.cfg.scales - 1;
        expect_channels(bottleneck, self.cfg.width(levels), "decoder bottleneck")?;
        if skips.len() != levels {
            return Err(Error::shape(format!(
                "decoder expects {levels} skip features, got {}",
                skips.len()
            )));
        }
        let mut h = bottleneck.clone();
        for l in (0..levels).rev() {
            let up = self.ups[l].forward(&h)?;
            expect_channels(&skips[l], self.cfg.width(l), "decoder skip")?;
            expect_same_spatial(&up, &skips[l], "decoder skip")?;
            let joined = Tensor::cat(&[&up, &skips[l]], 1)?;
            h = self.blocks[l].forward(&self.fuses[l].forward(&joined)?)?;
        }
        Ok(h)
    }
}

/// Channel-concatenates the stage image with cross-stage features and
/// projects to the encoder width with a 1x1 conv.
#[derive(Debug, Clone)]
pub struct Merge {
    pub conv: Conv2d,
    pub feature_channels: usize,
}

impl Merge {
    pub fn new(store: &mut ParamStore, name: &str, feature_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 3 + feature_channels, out_channels, 1)?,
            feature_channels,
        })
    }

    pub fn forward(&self, x_stage: &Tensor, cross_feat: &Tensor) -> Result<Tensor> {
        expect_channels(x_stage, 3, "merge image")?;
        expect_channels(cross_feat, self.feature_channels, "merge features")?;
        expect_same_spatial(x_stage, cross_feat, "merge")?;
        self.conv.forward(&Tensor::cat(&[x_stage, cross_feat], 1)?)
    }
}

/// One stage's U-Net. Stage 1 lifts the image with `embed`; later stages
/// take merged features and fuse the previous stage's features.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub embed: Option<Conv2d>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig, first_stage: bool) -> Result<Self> {
        let embed = if first_stage {
            Some(Conv2d::new(store, &format!("{name}.embed"), 3, cfg.base_width, 3)?)
        } else {
            None
        };
        Ok(Self {
            embed,
            encoder: Encoder::new(store, &format!("{name}.enc"), cfg, !first_stage)?,
            decoder: Decoder::new(store, &format!("{name}.dec"), cfg)?,
        })
    }

    /// Returns the encoder features and the decoder output.
    pub fn forward(&self, input: &Tensor, prev: Option<&CrossStageFeatures>) -> Result<(Encoded, Tensor)> {
        let f = match &self.embed {
            Some(e) => e.forward(input)?,
            None => input.clone(),
        };
        let enc = self.encoder.encode(&f, prev)?;
        let dec = self.decoder.decode(&enc.bottleneck, &enc.features)?;
        Ok((enc, dec))
    }
}
