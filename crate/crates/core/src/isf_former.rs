//! Inter-stage feature transformer.
//!
//! Attention treats channels as tokens and flattened spatial maps as token
//! embeddings, so the attention matrix is `C x C` and logits are scaled by
//! `1 / sqrt(H * W)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_channels, expect_same_spatial, softmax_last_dim, ChannelNorm, Conv2d};
use crate::params::{assign_var, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsatConfig {
    pub channels: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
}

impl Default for PsatConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            ffn_expansion: 2,
            heads: 1,
        }
    }
}

impl PsatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("model.psat.channels", "must be >= 1"));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("model.psat.ffn_expansion", "must be >= 1"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config("model.psat.heads", "must divide the channel width"));
        }
        Ok(())
    }
}

/// `softmax(Q K^T / sqrt(S))` for `(B, heads, C/heads, S)` inputs.
fn attention_weights_flat(q: &Tensor, k: &Tensor, spatial: usize) -> Result<Tensor> {
    let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (spatial as f64).sqrt())?;
    let check = logits.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !check.is_finite() {
        return Err(Error::Numeric("attention logits are not finite".into()));
    }
    softmax_last_dim(&logits)
}

fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    Ok(t.reshape((b, heads, c / heads, h * w))?)
}

/// The `C x C` attention matrix of `Q` against `K` (single head), shape `(B, C, C)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, k)?;
    let (b, c, h, w) = q.dims4()?;
    let a = attention_weights_flat(&split_heads(q, 1)?, &split_heads(k, 1)?, h * w)?;
    Ok(a.reshape((b, c, c))?)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let qd = q.dims4()?;
    if k.dims4()? != qd || v.dims4()? != qd {
        return Err(Error::shape(format!(
            "attention inputs differ in shape: {:?} {:?} {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(H W)) V` with channels as tokens.
pub fn pixel_self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    multi_head_attention(q, k, v, 1)
}

pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let (b, c, h, w) = q.dims4()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide {c} channels")));
    }
    let a = attention_weights_flat(&split_heads(q, heads)?, &split_heads(k, heads)?, h * w)?;
    let out = a.matmul(&split_heads(v, heads)?.contiguous()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Pixel self-attention transformer block with pre-norm residuals and an
/// outer skip: returns `f + F_out`.
#[derive(Debug, Clone)]
pub struct Psat {
    pub norm1: ChannelNorm,
    pub qkv_dw: Conv2d,
    pub qkv_pw: Conv2d,
    pub attn_proj: Conv2d,
    pub norm2: ChannelNorm,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
    pub channels: usize,
    pub heads: usize,
}

impl Psat {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PsatConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c * cfg.ffn_expansion;
        Ok(Self {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), c)?,
            qkv_dw: Conv2d::depthwise(store, &format!("{name}.qkv_dw"), c, 3)?,
            qkv_pw: Conv2d::new(store, &format!("{name}.qkv_pw"), c, 3 * c, 1)?,
            attn_proj: Conv2d::new(store, &format!("{name}.attn_proj"), c, c, 1)?,
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), c)?,
            ffn_in: Conv2d::new(store, &format!("{name}.ffn_in"), c, hidden, 1)?,
            ffn_out: Conv2d::new(store, &format!("{name}.ffn_out"), hidden, c, 1)?,
            channels: c,
            heads: cfg.heads,
        })
    }

    pub fn qkv(&self, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        expect_channels(f, self.channels, "psat qkv input")?;
        let h = self.qkv_pw.forward(&self.qkv_dw.forward(f)?)?;
        let c = self.channels;
        Ok((h.narrow(1, 0, c)?, h.narrow(1, c, c)?, h.narrow(1, 2 * c, c)?))
    }

    pub fn attention_branch(&self, f: &Tensor) -> Result<Tensor> {
        let (q, k, v) = self.qkv(&self.norm1.forward(f)?)?;
        self.attn_proj
            .forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }

    pub fn ffn_branch(&self, f: &Tensor) -> Result<Tensor> {
        let h = crate::fused::gelu(&self.ffn_in.forward(&self.norm2.forward(f)?)?)?;
        self.ffn_out.forward(&h)
    }

    pub fn forward(&self, f_de: &Tensor) -> Result<Tensor> {
        expect_channels(f_de, self.channels, "psat input")?;
        let temp = (self.attention_branch(f_de)? + f_de)?;
        let out = (self.ffn_branch(&temp)? + &temp)?;
        Ok((f_de + out)?)
    }

    /// Depthwise delta kernels and stacked identity pointwise weights: `Q = K = V = f`.
    pub fn set_identity_qkv(&self) -> Result<()> {
        self.qkv_dw.set_identity()?;
        let c = self.channels;
        let mut w = vec![0.0; 3 * c * c];
        for part in 0..3 {
            for i in 0..c {
                w[(part * c + i) * c + i] = 1.0;
            }
        }
        assign_var(&self.qkv_pw.weight, &w)?;
        assign_var(self.qkv_pw.bias.as_ref().expect("qkv bias"), &vec![0.0; 3 * c])
    }

    pub fn zero_branches(&self) -> Result<()> {
        self.attn_proj.zero()?;
        self.ffn_out.zero()
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub cross_stage_feature: Tensor,
    pub stage_image: Tensor,
}

/// PSAT refinement of decoder features plus a residual image head.
#[derive(Debug, Clone)]
pub struct IsfFormer {
    /// `None` when the transformer is ablated; decoder features pass through unchanged.
    pub psat: Option<Psat>,
    pub head: Conv2d,
    pub channels: usize,
}

impl IsfFormer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PsatConfig, enabled: bool) -> Result<Self> {
        cfg.validate()?;
        let psat = if enabled {
            Some(Psat::new(store, &format!("{name}.psat"), cfg)?)
        } else {
            None
        };
        Ok(Self {
            psat,
            head: Conv2d::new(store, &format!("{name}.head"), cfg.channels, 3, 3)?,
            channels: cfg.channels,
        })
    }

    pub fn forward(&self, dec_feat: &Tensor, x_stage: &Tensor) -> Result<StageOutput> {
        expect_channels(dec_feat, self.channels, "isf-former features")?;
        expect_channels(x_stage, 3, "isf-former image")?;
        expect_same_spatial(dec_feat, x_stage, "isf-former")?;
        let feature = match &self.psat {
            Some(p) => p.forward(dec_feat)?,
            None => dec_feat.clone(),
        };
        let image = (x_stage + self.head.forward(&feature)?)?;
        Ok(StageOutput {
            cross_stage_feature: feature,
            stage_image: image,
        })
    }
}
