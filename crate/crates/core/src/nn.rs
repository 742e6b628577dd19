//! Layer primitives on `(batch, channels, height, width)` tensors.

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::conv_kernel::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::params::{zero_var, ParamStore};

/// Checks that `t` is a 4-D tensor with `channels` channels and returns its dims.
pub fn expect_channels(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
    let dims = t
        .dims4()
        .map_err(|_| Error::shape(format!("{what}: expected a 4-D tensor, got {:?}", t.dims())))?;
    if dims.1 != channels {
        return Err(Error::shape(format!(
            "{what}: expected {channels} channels, got {}",
            dims.1
        )));
    }
    Ok(dims)
}

pub fn expect_same_spatial(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (ba, _, ha, wa) = a.dims4()?;
    let (bb, _, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape(format!(
            "{what}: spatial mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("{what}: non-finite values")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Gelu,
    /// `sin(frequency * x)`.
    Sine { frequency: f64 },
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Activation::Gelu => crate::fused::gelu(x)?,
            Activation::Sine { frequency } => x.affine(frequency, 0.0)?.sin()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

/// 2-D convolution with "same"-style padding `k / 2` unless a stride is given.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_stride(store, name, c_in, c_out, kernel, 1)
    }

    pub fn with_stride(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding: kernel / 2,
            depthwise: false,
        })
    }

    /// One `kernel x kernel` filter per channel.
    pub fn depthwise(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[channels, 1, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[channels], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: kernel / 2,
            depthwise: true,
        })
    }

    pub fn in_channels(&self) -> usize {
        if self.depthwise {
            self.weight.dims()[0]
        } else {
            self.weight.dims()[1]
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.in_channels(), "conv2d input")?;
        let spec = ConvSpec {
            kernel: self.weight.dims()[2],
            stride: self.stride,
            pad: self.padding,
            depthwise: self.depthwise,
        };
        let y = conv_kernel::conv2d(x, self.weight.as_tensor(), spec)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn zero(&self) -> Result<()> {
        zero_var(&self.weight)?;
        if let Some(b) = &self.bias {
            zero_var(b)?;
        }
        Ok(())
    }

    /// Sets the conv to copy input channel `i` to output channel `i` for
    /// every `i < min(c_in, c_out)`; the remaining outputs are zero.
    pub fn set_identity(&self) -> Result<()> {
        let dims = self.weight.dims().to_vec();
        let (c_out, c_in_k, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
        let mut values = vec![0.0; c_out * c_in_k * kh * kw];
        for o in 0..c_out {
            let i = if self.depthwise { 0 } else if o < c_in_k { o } else { continue };
            values[((o * c_in_k + i) * kh + kh / 2) * kw + kw / 2] = 1.0;
        }
        crate::params::assign_var(&self.weight, &values)?;
        if let Some(b) = &self.bias {
            zero_var(b)?;
        }
        Ok(())
    }
}

/// Stride-2, kernel-2 transposed convolution: exact 2x upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_out * 4) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_in, c_out, 2, 2], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.weight.dims()[0], "transposed conv input")?;
        let y = x.conv_transpose2d(self.weight.as_tensor(), 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Normalizes across channels independently at every spatial position, with
/// a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.weight.dims()[0], "channel norm input")?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = self.weight.as_tensor().reshape((1, (), 1, 1))?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(normed.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}
