//! Central-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uie_unfold::cpgb::{ColorActivation, ColorMlp, ColorMlpConfig, Cpgb, CpgbConfig, Rir, RirConfig};
use uie_unfold::feature_net::{FeatureNet, Merge, UNetConfig};
use uie_unfold::isf_former::{IsfFormer, Psat, PsatConfig};
use uie_unfold::losses::{total_loss, LossConfig};
use uie_unfold::model::{AblationFlags, Model, ModelConfig};
use uie_unfold::nagdm::{GradientStep, Narb, NarbConfig};
use uie_unfold::params::{assign_var, var_values, ParamStore};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Moves every parameter away from its (often zero) initialisation so no
/// branch is switched off during the check.
pub fn jitter(store: &ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in store.iter() {
        let v: Vec<f64> = var_values(var)
            .unwrap()
            .into_iter()
            .map(|x| x + rng.random_range(-0.2..0.2))
            .collect();
        assign_var(var, &v).unwrap();
    }
}

/// Compares backprop against central differences on a few entries of every
/// parameter: the two largest analytic gradients plus one random entry.
pub fn check(store: &ParamStore, loss: impl Fn() -> Tensor, seed: u64) -> usize {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for (name, var) in store.iter() {
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut picks: Vec<usize> = order.into_iter().take(2).collect();
        picks.push(rng.random_range(0..analytic.len()));
        picks.dedup();
        let base = var_values(var).unwrap();
        for &i in &picks {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                assign_var(var, &v).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            assign_var(var, &base).unwrap();
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-7 {
                assert!((a - numeric).abs() < 1e-9, "{name}[{i}]: {a} vs {numeric}");
            } else {
                let rel = (a - numeric).abs() / scale;
                assert!(rel < TOL, "{name}[{i}]: analytic {a}, numeric {numeric}, rel {rel:e}");
            }
            checked += 1;
        }
    }
    checked
}

/// `sum(out * w)` for a fixed random `w`, so every output element matters.
pub fn probe(out: &Tensor, seed: u64) -> Tensor {
    let w = random(out.dims(), seed, -1.0, 1.0);
    (out * w).unwrap().sum_all().unwrap()
}

pub fn color_mlp(size: usize) {
    for activation in [ColorActivation::Periodic, ColorActivation::SmoothMonotone] {
        let mut store = ParamStore::new(DType::F64, 1);
        let cfg = ColorMlpConfig {
            widths: vec![3, 6, 5, 3],
            activation,
        };
        let mlp = ColorMlp::new(&mut store, "mlp", &cfg).unwrap();
        jitter(&store, 2);
        let x = random(&[1, 3, size, size], 3, 0.0, 1.0);
        assert!(check(&store, || probe(&mlp.forward(&x).unwrap(), 4), 5) > 0);
    }
}

pub fn rir_and_cpgb(size: usize) {
    let mut store = ParamStore::new(DType::F64, 1);
    let rir_cfg = RirConfig {
        groups: 2,
        blocks_per_group: 2,
        channels: 4,
        kernel: 3,
    };
    let rir = Rir::new(&mut store, "rir", &rir_cfg).unwrap();
    jitter(&store, 6);
    let f = random(&[1, 4, size, size], 7, -1.0, 1.0);
    check(&store, || probe(&rir.forward(&f).unwrap(), 8), 9);

    let mut store = ParamStore::new(DType::F64, 2);
    let cfg = CpgbConfig {
        mlp: ColorMlpConfig {
            widths: vec![3, 8, 3],
            activation: ColorActivation::Periodic,
        },
        rir: rir_cfg,
    };
    let cpgb = Cpgb::new(&mut store, "cpgb", &cfg).unwrap();
    jitter(&store, 10);
    let x = random(&[1, 3, size, size], 11, 0.0, 1.0);
    check(&store, || probe(&cpgb.forward(&x).unwrap(), 12), 13);
}

pub fn narb_and_gradient_step(size: usize) {
    let cfg = NarbConfig::default();
    let mut store = ParamStore::new(DType::F64, 3);
    let narb = Narb::new(&mut store, "narb", &cfg).unwrap();
    jitter(&store, 14);
    let f = random(&[1, 3, size, size], 15, 0.0, 1.0);
    check(&store, || probe(&narb.forward(&f).unwrap(), 16), 17);

    let mut store = ParamStore::new(DType::F64, 4);
    let step = GradientStep::new(&mut store, "step", 1, &cfg).unwrap();
    jitter(&store, 18);
    let x = random(&[1, 3, size, size], 19, 0.0, 1.0);
    let y = random(&[1, 3, size, size], 20, 0.0, 1.0);
    let prior = random(&[1, 3, size, size], 21, -0.5, 0.5);
    check(&store, || probe(&step.forward(&x, &y, Some(&prior)).unwrap(), 22), 23);
    check(&store, || probe(&step.forward(&x, &y, None).unwrap(), 24), 25);
}

pub fn psat_and_isf_former(size: usize) {
    let cfg = PsatConfig {
        channels: 4,
        ffn_expansion: 2,
        heads: 1,
    };
    let mut store = ParamStore::new(DType::F64, 5);
    let psat = Psat::new(&mut store, "psat", &cfg).unwrap();
    jitter(&store, 26);
    let f = random(&[1, 4, size, size], 27, -1.0, 1.0);
    check(&store, || probe(&psat.forward(&f).unwrap(), 28), 29);

    let mut store = ParamStore::new(DType::F64, 6);
    let isf = IsfFormer::new(&mut store, "isf", &cfg, true).unwrap();
    jitter(&store, 30);
    let dec = random(&[1, 4, size, size], 31, -1.0, 1.0);
    let x = random(&[1, 3, size, size], 32, 0.0, 1.0);
    let loss = || {
        let out = isf.forward(&dec, &x).unwrap();
        (probe(&out.cross_stage_feature, 33) + probe(&out.stage_image, 34)).unwrap()
    };
    check(&store, loss, 35);
}

pub fn feature_net_with_fusion_and_merge(size: usize) {
    let cfg = UNetConfig {
        base_width: 4,
        scales: 2,
    };
    let mut store = ParamStore::new(DType::F64, 7);
    let first = FeatureNet::new(&mut store, "s1", &cfg, true).unwrap();
    let second = FeatureNet::new(&mut store, "s2", &cfg, false).unwrap();
    let merge = Merge::new(&mut store, "merge", 4, 4).unwrap();
    jitter(&store, 36);
    let x = random(&[1, 3, size, size], 37, 0.0, 1.0);
    let loss = || {
        let (enc, dec) = first.forward(&x, None).unwrap();
        let cross = uie_unfold::feature_net::CrossStageFeatures {
            encoder: enc.features.clone(),
            decoder: dec.clone(),
        };
        let merged = merge.forward(&x, &dec).unwrap();
        let (enc2, dec2) = second.forward(&merged, Some(&cross)).unwrap();
        (probe(&dec2, 38) + probe(&enc2.bottleneck, 39)).unwrap()
    };
    check(&store, loss, 40);
}

pub fn tiny_model(flags: AblationFlags) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.cpgb.mlp.widths = vec![3, 6, 3];
    cfg.cpgb.rir.channels = 4;
    cfg.cpgb.rir.groups = 1;
    cfg.cpgb.rir.blocks_per_group = 1;
    cfg.unet.base_width = 4;
    cfg.psat.channels = 4;
    cfg.ablation = flags;
    cfg
}

/// The full model differentiated through the training loss.
pub fn full_model_loss(size: usize) {
    let model = Model::build(&tiny_model(AblationFlags::default()), 8, DType::F64).unwrap();
    jitter(&model.store, 41);
    let x = random(&[1, 3, size, size], 42, 0.0, 1.0);
    let target = random(&[1, 3, size, size], 43, 0.0, 1.0);
    let loss_cfg = LossConfig {
        window: 7,
        ..LossConfig::default()
    };
    let loss = || {
        let out = model.forward(&x).unwrap();
        total_loss(&out.stage_images, &target, &loss_cfg).unwrap().total
    };
    let n = check(&model.store, loss, 44);
    assert!(n >= 2 * model.store.len());
}

pub fn every_ablation_variant(size: usize) {
    for (k, flags) in AblationFlags::table_rows().into_iter().enumerate() {
        let model = Model::build(&tiny_model(flags), 9, DType::F64).unwrap();
        jitter(&model.store, 50 + k as u64);
        let x = random(&[1, 3, size, size], 60 + k as u64, 0.0, 1.0);
        check(&model.store, || probe(model.forward(&x).unwrap().final_image(), 70), 80);
    }
}
