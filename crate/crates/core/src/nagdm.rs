//! One unrolled proximal-gradient step per stage.
//!
//! The degradation operator and its adjoint are learned gated residual
//! blocks (NARB). A stage computes
//!
//! ```text
//! x_i = x_{i-1} - w_i * N_adj( N_deg(x_{i-1}) - y + prior )
//! ```
//!
//! and the stage's feature network then acts as the proximal map.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_channels, expect_same_spatial, ChannelNorm, Conv2d};
use crate::params::{assign_var, ParamStore};

/// A shape-preserving image operator standing in for `D` or `D^T`.
pub trait Operator {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarbConfig {
    pub channels: usize,
    /// The expand conv produces `2 * expansion * channels` maps; the gate halves them.
    pub expansion: usize,
    pub kernel: usize,
}

impl Default for NarbConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            expansion: 1,
            kernel: 3,
        }
    }
}

impl NarbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::config("model.narb.channels", "NARB operates on 3-channel images"));
        }
        if self.expansion == 0 {
            return Err(Error::config("model.narb.expansion", "must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("model.narb.kernel", "must be odd"));
        }
        Ok(())
    }
}

/// norm -> 1x1 expand -> depthwise -> split gate -> 1x1 project, plus skip.
#[derive(Debug, Clone)]
pub struct Narb {
    pub norm: ChannelNorm,
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub project: Conv2d,
    pub channels: usize,
}

impl Narb {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NarbConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c * cfg.expansion;
        Ok(Self {
            norm: ChannelNorm::new(store, &format!("{name}.norm"), c)?,
            expand: Conv2d::new(store, &format!("{name}.expand"), c, 2 * hidden, 1)?,
            depthwise: Conv2d::depthwise(store, &format!("{name}.dw"), 2 * hidden, cfg.kernel)?,
            project: Conv2d::new(store, &format!("{name}.project"), hidden, c, 1)?,
            channels: c,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        expect_channels(f, self.channels, "narb input")?;
        let h = self.depthwise.forward(&self.expand.forward(&self.norm.forward(f)?)?)?;
        let half = h.dim(1)? / 2;
        let gated = (h.narrow(1, 0, half)? * h.narrow(1, half, half)?)?;
        Ok((f + self.project.forward(&gated)?)?)
    }

    pub fn zero_residual(&self) -> Result<()> {
        self.project.zero()
    }
}

impl Operator for Narb {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// `x_prev - step * adjoint(degrade(x_prev) - y + prior)`.
pub fn proximal_gradient_step(
    x_prev: &Tensor,
    y: &Tensor,
    prior: Option<&Tensor>,
    step: &Tensor,
    degrade: &dyn Operator,
    adjoint: &dyn Operator,
) -> Result<Tensor> {
    expect_channels(x_prev, 3, "gradient step estimate")?;
    expect_channels(y, 3, "gradient step observation")?;
    expect_same_spatial(x_prev, y, "gradient step")?;
    let mut residual = (degrade.apply(x_prev)? - y)?;
    if let Some(p) = prior {
        expect_channels(p, 3, "gradient step prior")?;
        expect_same_spatial(x_prev, p, "gradient step prior")?;
        residual = (residual + p)?;
    }
    let direction = adjoint.apply(&residual)?;
    Ok((x_prev - direction.broadcast_mul(step)?)?)
}

/// One stage's learned operator pair and step size.
#[derive(Debug, Clone)]
pub struct GradientStep {
    pub stage: usize,
    pub degrade: Narb,
    pub adjoint: Narb,
    /// Shape `[1]`.
    pub step_size: Var,
}

pub const INITIAL_STEP_SIZE: f64 = 0.5;

impl GradientStep {
    pub fn new(store: &mut ParamStore, name: &str, stage: usize, cfg: &NarbConfig) -> Result<Self> {
        Ok(Self {
            stage,
            degrade: Narb::new(store, &format!("{name}.degrade"), cfg)?,
            adjoint: Narb::new(store, &format!("{name}.adjoint"), cfg)?,
            step_size: store.constant(&format!("{name}.step_size"), &[1], INITIAL_STEP_SIZE)?,
        })
    }

    pub fn forward(&self, x_prev: &Tensor, y: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        proximal_gradient_step(
            x_prev,
            y,
            prior,
            self.step_size.as_tensor(),
            &self.degrade,
            &self.adjoint,
        )
    }

    pub fn set_step_size(&self, value: f64) -> Result<()> {
        assign_var(&self.step_size, &[value])
    }

    pub fn zero_residuals(&self) -> Result<()> {
        self.degrade.zero_residual()?;
        self.adjoint.zero_residual()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zero_var;
    use candle_core::{DType, Device};

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let n = 3 * h * w;
        let v: Vec<f64> = (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 7919) % 1000) as f64) / 1000.0)
            .collect();
        Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn step(seed: u64) -> GradientStep {
        let mut s = ParamStore::new(DType::F64, seed);
        GradientStep::new(&mut s, "stage0", 1, &NarbConfig::default()).unwrap()
    }

    #[test]
    fn narb_zero_residual_is_identity() {
        let g = step(1);
        g.degrade.zero_residual().unwrap();
        let x = image(32, 32, 2);
        let y = g.degrade.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 32, 32]);
        assert_eq!(values(&y), values(&x));
    }

    #[test]
    fn narb_gate_with_zero_half_leaves_only_project_bias() {
        let g = step(3);
        let narb = &g.degrade;
        // Zero the second half of the expanded maps (expand rows and dw filters).
        let hidden = 3;
        let ew = values(narb.expand.weight.as_tensor());
        let eb = values(narb.expand.bias.as_ref().unwrap().as_tensor());
        let mut ew2 = ew.clone();
        let mut eb2 = eb.clone();
        for o in hidden..2 * hidden {
            eb2[o] = 0.0;
            for i in 0..3 {
                ew2[o * 3 + i] = 0.0;
            }
        }
        assign_var(&narb.expand.weight, &ew2).unwrap();
        assign_var(narb.expand.bias.as_ref().unwrap(), &eb2).unwrap();
        let dw = values(narb.depthwise.weight.as_tensor());
        let db = values(narb.depthwise.bias.as_ref().unwrap().as_tensor());
        let mut dw2 = dw.clone();
        let mut db2 = db.clone();
        for o in hidden..2 * hidden {
            db2[o] = 0.0;
            for k in 0..9 {
                dw2[o * 9 + k] = 0.0;
            }
        }
        assign_var(&narb.depthwise.weight, &dw2).unwrap();
        assign_var(narb.depthwise.bias.as_ref().unwrap(), &db2).unwrap();
        assign_var(narb.project.bias.as_ref().unwrap(), &[0.25, -0.5, 0.125]).unwrap();

        let x = image(2, 2, 11);
        let y = values(&narb.forward(&x).unwrap());
        let xv = values(&x);
        let bias = [0.25, -0.5, 0.125];
        for c in 0..3 {
            for p in 0..4 {
                assert_eq!(y[c * 4 + p], xv[c * 4 + p] + bias[c]);
            }
        }
    }

    #[test]
    fn zero_step_returns_previous_estimate_exactly() {
        let g = step(4);
        g.set_step_size(0.0).unwrap();
        let x = image(8, 8, 1);
        let y = image(8, 8, 2);
        let p = image(8, 8, 3);
        let out = g.forward(&x, &y, Some(&p)).unwrap();
        assert_eq!(values(&out), values(&x));
    }

    #[test]
    fn identity_operators_unit_step_lands_on_observation() {
        let g = step(5);
        g.zero_residuals().unwrap();
        g.set_step_size(1.0).unwrap();
        let x = image(6, 6, 1);
        let y = image(6, 6, 2);
        let out = values(&g.forward(&x, &y, None).unwrap());
        for (a, b) in out.iter().zip(values(&y)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_operators_half_step_subtracts_half_prior() {
        let g = step(6);
        g.zero_residuals().unwrap();
        let x = image(5, 7, 1);
        let p = image(5, 7, 9);
        let out = values(&g.forward(&x, &x, Some(&p)).unwrap());
        for ((o, xv), pv) in out.iter().zip(values(&x)).zip(values(&p)) {
            assert!((o - (xv - 0.5 * pv)).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_inputs_are_shape_errors() {
        let g = step(7);
        let x = image(8, 8, 1);
        let y = image(8, 6, 2);
        assert!(matches!(g.forward(&x, &y, None), Err(Error::Shape(_))));
        let p = image(4, 4, 2);
        assert!(matches!(g.forward(&x, &x, Some(&p)), Err(Error::Shape(_))));
    }

    /// Fixed symmetric blur with zero padding; self-adjoint.
    struct Blur {
        kernel: Tensor,
    }

    impl Blur {
        fn new() -> Self {
            let k = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].map(|v| v / 16.0);
            let mut w = vec![0.0; 3 * 3 * 9];
            for c in 0..3 {
                for i in 0..9 {
                    w[(c * 3 + c) * 9 + i] = k[i];
                }
            }
            Self {
                kernel: Tensor::from_vec(w, (3, 3, 3, 3), &Device::Cpu).unwrap(),
            }
        }
    }

    impl Operator for Blur {
        fn apply(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.conv2d(&self.kernel, 1, 1, 1, 1)?)
        }
    }

    #[test]
    fn blur_is_self_adjoint() {
        let b = Blur::new();
        let u = image(6, 6, 1);
        let v = image(6, 6, 2);
        let lhs = (b.apply(&u).unwrap() * &v).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (&u * b.apply(&v).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn classical_operators_decrease_data_fidelity() {
        let b = Blur::new();
        let clean = image(12, 12, 5);
        let y = b.apply(&clean).unwrap();
        let step = Tensor::new(&[0.8f64], &Device::Cpu).unwrap();
        let fidelity = |x: &Tensor| {
            let r = (&y - b.apply(x).unwrap()).unwrap();
            0.5 * r.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let mut x = Tensor::zeros((1, 3, 12, 12), DType::F64, &Device::Cpu).unwrap();
        let mut prev = fidelity(&x);
        for _ in 0..5 {
            x = proximal_gradient_step(&x, &y, None, &step, &b, &b).unwrap();
            let now = fidelity(&x);
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn stages_do_not_share_weights() {
        let mut s = ParamStore::new(DType::F64, 1);
        let a = GradientStep::new(&mut s, "s1", 1, &NarbConfig::default()).unwrap();
        let b = GradientStep::new(&mut s, "s2", 2, &NarbConfig::default()).unwrap();
        zero_var(&a.step_size).unwrap();
        assert_eq!(values(b.step_size.as_tensor()), vec![INITIAL_STEP_SIZE]);
    }
}
