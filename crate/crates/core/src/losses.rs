//! Training objective: per-stage `MSE + lambda * (1 - SSIM)`, summed over
//! every stage output.
//!
//! Everything here runs in f64 regardless of the model precision so that the
//! logged parts add up to the logged total to well below 1e-7.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// One weight per stage output, ordered like the model outputs. Empty means all 1.
    pub stage_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            stage_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be finite and >= 0"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config("loss.window", "must be odd"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("loss.sigma", "must be > 0"));
        }
        if !(self.c1 > 0.0) {
            return Err(Error::config("loss.c1", "must be > 0"));
        }
        if !(self.c2 > 0.0) {
            return Err(Error::config("loss.c2", "must be > 0"));
        }
        if self.stage_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("loss.stage_weights", "weights must be finite and >= 0"));
        }
        Ok(())
    }

    fn weight(&self, stage: usize, stages: usize) -> Result<f64> {
        if self.stage_weights.is_empty() {
            return Ok(1.0);
        }
        if self.stage_weights.len() != stages {
            return Err(Error::config(
                "loss.stage_weights",
                format!("{} weights for {stages} stage outputs", self.stage_weights.len()),
            ));
        }
        Ok(self.stage_weights[stage])
    }
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over all elements, as an f64 scalar tensor.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mse")?;
    let d = (pred.to_dtype(DType::F64)? - target.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.mean_all()?)
}

/// `(n - k + 1, n)` matrix whose rows are the window placed at each valid offset.
fn band(n: usize, win: &[f64]) -> Result<Tensor> {
    let k = win.len();
    let m = n - k + 1;
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        data[r * n + r..r * n + r + k].copy_from_slice(win);
    }
    Ok(Tensor::from_vec(data, (m, n), &Device::Cpu)?)
}

/// Local SSIM at every valid window position, shape `(B, C, H - k + 1, W - k + 1)`.
pub fn ssim_map(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape(a, b, "ssim")?;
    let (bs, c, h, w) = a.dims4()?;
    let k = cfg.window;
    if h < k || w < k {
        return Err(Error::WindowTooLarge {
            window: k,
            height: h,
            width: w,
        });
    }
    let win = gaussian_window(k, cfg.sigma);
    let rows = band(h, &win)?;
    let cols = band(w, &win)?.t()?;
    let n = bs * c;
    let a = a.to_dtype(DType::F64)?.reshape((n, h, w))?;
    let b = b.to_dtype(DType::F64)?.reshape((n, h, w))?;
    let stacked = Tensor::cat(&[&a, &b, &a.sqr()?, &b.sqr()?, &(&a * &b)?], 0)?;
    let blurred = rows.broadcast_matmul(&stacked.broadcast_matmul(&cols)?)?;
    let part = |i: usize| blurred.narrow(0, i * n, n);
    let (mu_a, mu_b) = (part(0)?, part(1)?);
    let (mu_aa, mu_bb, mu_ab) = (mu_a.sqr()?, mu_b.sqr()?, (&mu_a * &mu_b)?);
    let var_a = (part(2)? - &mu_aa)?;
    let var_b = (part(3)? - &mu_bb)?;
    let cov = (part(4)? - &mu_ab)?;
    let num = (((mu_ab * 2.0)? + cfg.c1)? * ((cov * 2.0)? + cfg.c2)?)?;
    let den = (((mu_aa + mu_bb)? + cfg.c1)? * ((var_a + var_b)? + cfg.c2)?)?;
    let map = (num / den)?;
    let (_, oh, ow) = map.dims3()?;
    Ok(map.reshape((bs, c, oh, ow))?)
}

/// Mean windowed SSIM over batch, channels and window positions.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(ssim_map(a, b, cfg)?.mean_all()?)
}

/// Per-image mean SSIM of a batch.
pub fn ssim_per_image(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Vec<f64>> {
    let map = ssim_map(a, b, cfg)?;
    Ok(map.flatten_from(1)?.mean(1)?.to_vec1::<f64>()?)
}

/// Single-window SSIM from whole-plane statistics, averaged over channels.
/// Kept for comparison with the windowed form; not used in training.
pub fn ssim_global(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape(a, b, "ssim")?;
    let (bs, c, h, w) = a.dims4()?;
    let a = a.to_dtype(DType::F64)?.reshape((bs * c, h * w))?;
    let b = b.to_dtype(DType::F64)?.reshape((bs * c, h * w))?;
    let mu_a = a.mean_keepdim(1)?;
    let mu_b = b.mean_keepdim(1)?;
    let da = a.broadcast_sub(&mu_a)?;
    let db = b.broadcast_sub(&mu_b)?;
    let var_a = da.sqr()?.mean_keepdim(1)?;
    let var_b = db.sqr()?.mean_keepdim(1)?;
    let cov = (&da * &db)?.mean_keepdim(1)?;
    let num = ((((&mu_a * &mu_b)? * 2.0)? + cfg.c1)? * ((cov * 2.0)? + cfg.c2)?)?;
    let den = (((mu_a.sqr()? + mu_b.sqr()?)? + cfg.c1)? * ((var_a + var_b)? + cfg.c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// A loss value together with its logged parts.
///
/// `total == mse + lambda * ssim` up to rounding, where both parts are
/// stage-weighted sums and `ssim` is the sum of `1 - SSIM` terms.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub total_value: f64,
    pub mse: f64,
    pub ssim: f64,
}

pub fn total_loss(outputs: &[Tensor], target: &Tensor, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if outputs.is_empty() {
        return Err(Error::shape("no outputs to score"));
    }
    let target = target.to_dtype(DType::F64)?;
    let mut total: Option<Tensor> = None;
    let (mut mse_sum, mut ssim_sum) = (0.0, 0.0);
    for (s, out) in outputs.iter().enumerate() {
        let w = cfg.weight(s, outputs.len())?;
        let mse = mse_loss(out, &target)?;
        let dissim = (1.0 - ssim(out, &target, cfg)?)?;
        mse_sum += w * mse.to_scalar::<f64>()?;
        ssim_sum += w * dissim.to_scalar::<f64>()?;
        let term = ((mse + (dissim * cfg.lambda)?)? * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.expect("at least one output");
    let total_value = total.to_scalar::<f64>()?;
    Ok(LossBreakdown {
        total,
        total_value,
        mse: mse_sum,
        ssim: ssim_sum,
    })
}
