//! The full unrolled network: color prior, then `S` stages of gradient step,
//! U-Net proximal map and inter-stage transformer, finished by a merge, a
//! conv and a global residual.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::cpgb::{ColorMlpConfig, Cpgb, CpgbConfig, RirConfig};
use crate::error::{Error, Result};
use crate::feature_net::{CrossStageFeatures, FeatureNet, Merge, UNetConfig};
use crate::isf_former::{IsfFormer, PsatConfig};
use crate::nagdm::{GradientStep, NarbConfig};
use crate::nn::{expect_channels, Conv2d};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_cpgb: bool,
    pub use_nagdm: bool,
    pub use_isf_former: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_cpgb: true,
            use_nagdm: true,
            use_isf_former: true,
        }
    }
}

impl AblationFlags {
    pub fn is_full(&self) -> bool {
        self.use_cpgb && self.use_nagdm && self.use_isf_former
    }

    /// The seven module combinations of the ablation table, full model last.
    pub fn table_rows() -> [AblationFlags; 7] {
        let f = |use_cpgb, use_nagdm, use_isf_former| AblationFlags {
            use_cpgb,
            use_nagdm,
            use_isf_former,
        };
        [
            f(false, true, true),
            f(true, false, true),
            f(true, true, false),
            f(false, true, false),
            f(false, false, true),
            f(true, false, false),
            f(true, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub cpgb: CpgbConfig,
    pub narb: NarbConfig,
    pub psat: PsatConfig,
    pub unet: UNetConfig,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            cpgb: CpgbConfig::default(),
            narb: NarbConfig::default(),
            psat: PsatConfig::default(),
            unet: UNetConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 8-wide U-Net with two scales, 8-wide transformer and RIR.
    pub fn toy() -> Self {
        Self {
            stages: 3,
            cpgb: CpgbConfig {
                mlp: ColorMlpConfig {
                    widths: vec![3, 16, 16, 3],
                    ..ColorMlpConfig::default()
                },
                rir: RirConfig {
                    channels: 8,
                    ..RirConfig::default()
                },
            },
            narb: NarbConfig::default(),
            psat: PsatConfig {
                channels: 8,
                ..PsatConfig::default()
            },
            unet: UNetConfig {
                base_width: 8,
                scales: 2,
            },
            ablation: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("model.stages", "must be >= 1"));
        }
        self.cpgb.validate()?;
        self.narb.validate()?;
        self.psat.validate()?;
        self.unet.validate()?;
        if self.psat.channels != self.unet.base_width {
            return Err(Error::config(
                "model.psat.channels",
                format!(
                    "must equal model.unet.base_width ({}) since the transformer refines decoder features",
                    self.unet.base_width
                ),
            ));
        }
        Ok(())
    }

    /// Training inputs must have both spatial dims divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        self.unet.divisor()
    }

    /// Inference inputs are reflection-padded up to a multiple of this.
    pub fn inference_multiple(&self) -> usize {
        1 << self.unet.scales
    }
}

/// Stage images ordered `[stage S, ..., stage 1]`.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub stage_images: Vec<Tensor>,
}

impl ForwardResult {
    pub fn final_image(&self) -> &Tensor {
        &self.stage_images[0]
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub seed: u64,
    pub cpgb: Option<Cpgb>,
    /// One per stage; empty when the gradient module is ablated.
    pub steps: Vec<GradientStep>,
    /// Stages `1..S-1`.
    pub feature_nets: Vec<FeatureNet>,
    pub isf_formers: Vec<IsfFormer>,
    /// Merges for stages `2..=S` (a single one when `S == 1`).
    pub merges: Vec<Merge>,
    pub final_conv: Conv2d,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let s = config.stages;
        let flags = config.ablation;
        let cpgb = if flags.use_cpgb {
            Some(Cpgb::new(&mut store, "cpgb", &config.cpgb)?)
        } else {
            None
        };
        let steps = if flags.use_nagdm {
            (0..s)
                .map(|i| GradientStep::new(&mut store, &format!("stage{}.nagdm", i + 1), i + 1, &config.narb))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut feature_nets = Vec::new();
        let mut isf_formers = Vec::new();
        for i in 0..s.saturating_sub(1) {
            let name = format!("stage{}", i + 1);
            feature_nets.push(FeatureNet::new(&mut store, &format!("{name}.featnet"), &config.unet, i == 0)?);
            isf_formers.push(IsfFormer::new(
                &mut store,
                &format!("{name}.isf"),
                &config.psat,
                flags.use_isf_former,
            )?);
        }
        let merges = (1..s.max(2))
            .map(|i| {
                Merge::new(
                    &mut store,
                    &format!("stage{}.merge", i + 1),
                    config.psat.channels,
                    config.unet.base_width,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_conv = Conv2d::new(&mut store, "final_conv", config.unet.base_width, 3, 3)?;
        Ok(Self {
            config: config.clone(),
            store,
            seed,
            cpgb,
            steps,
            feature_nets,
            isf_formers,
            merges,
            final_conv,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Runs every stage on a `(B, 3, H, W)` batch.
    pub fn forward(&self, img: &Tensor) -> Result<ForwardResult> {
        let (b, _, h, w) = expect_channels(img, 3, "model input")?;
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {d}; pad it first"
            )));
        }
        let img = img.to_dtype(self.dtype())?;
        let prior = match &self.cpgb {
            Some(c) => Some(c.forward(&img)?),
            None => None,
        };
        let stages = self.config.stages;
        let mut outputs = Vec::with_capacity(stages);
        let mut prev_image = img.clone();
        let mut cross: Option<(Tensor, CrossStageFeatures)> = None;
        for i in 0..stages {
            let x = match self.steps.get(i) {
                Some(step) => step.forward(&prev_image, &img, prior.as_ref())?,
                None => prev_image.clone(),
            };
            if i + 1 < stages {
                let input = match &cross {
                    None => x.clone(),
                    Some((feat, _)) => self.merges[i - 1].forward(&x, feat)?,
                };
                let prev = cross.as_ref().map(|(_, c)| c);
                let (enc, dec) = self.feature_nets[i].forward(&input, prev)?;
                let out = self.isf_formers[i].forward(&dec, &x)?;
                outputs.push(out.stage_image.clone());
                prev_image = out.stage_image;
                cross = Some((
                    out.cross_stage_feature,
                    CrossStageFeatures {
                        encoder: enc.features,
                        decoder: dec,
                    },
                ));
            } else {
                let feat = match &cross {
                    Some((f, _)) => f.clone(),
                    None => Tensor::zeros((b, self.config.psat.channels, h, w), self.dtype(), img.device())?,
                };
                let merged = self.merges[self.merges.len() - 1].forward(&x, &feat)?;
                outputs.push((self.final_conv.forward(&merged)? + &img)?);
            }
        }
        outputs.reverse();
        Ok(ForwardResult {
            stage_images: outputs,
        })
    }
}
