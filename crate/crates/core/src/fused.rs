//! Element-wise ops whose backward would otherwise be a long chain of
//! candle primitives.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

fn gelu_slope(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x)
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused op expects contiguous inputs"),
    }
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(slice(x, l)?.iter().map(|&v| gelu_value(v as f64) as f32).collect()),
            CpuStorage::F64(x) => CpuStorage::F64(slice(x, l)?.iter().map(|&v| gelu_value(v)).collect()),
            _ => candle_core::bail!("gelu supports f32/f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "fused-gelu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                slice(x, l1)?
                    .iter()
                    .zip(slice(g, l2)?)
                    .map(|(&x, &g)| (gelu_slope(x as f64) * g as f64) as f32)
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                slice(x, l1)?.iter().zip(slice(g, l2)?).map(|(&x, &g)| gelu_slope(x) * g).collect(),
            ),
            _ => candle_core::bail!("gelu supports f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Tanh-approximated GELU, matching `Tensor::gelu`.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}
