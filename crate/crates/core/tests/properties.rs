use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uie_unfold::checkpoint::Checkpoint;
use uie_unfold::config::OptimizerConfig;
use uie_unfold::cpgb::{ColorMlp, ColorMlpConfig};
use uie_unfold::data::{augment, AugmentConfig, ImageTensor, PairedSample};
use uie_unfold::isf_former::{attention_weights, pixel_self_attention};
use uie_unfold::losses::LossConfig;
use uie_unfold::metrics::{ciede2000, delta_e, psnr, srgb_to_lab, ssim};
use uie_unfold::params::ParamStore;
use uie_unfold::train::CosineSchedule;
use uie_unfold::{Model, ModelConfig};

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| ImageTensor::new(3, h, w, d).unwrap())
}

fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn color_mlp_commutes_with_pixel_permutations(
        img in image_strategy(4, 5),
        perm in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new(DType::F64, seed);
        let mlp = ColorMlp::new(&mut store, "mlp", &ColorMlpConfig { widths: vec![3, 7, 3], ..ColorMlpConfig::default() }).unwrap();
        let permute = |t: &ImageTensor| {
            let mut data = Vec::with_capacity(t.data.len());
            for c in 0..3 {
                let plane = t.plane(c);
                data.extend(perm.iter().map(|&i| plane[i]));
            }
            ImageTensor::new(3, 4, 5, data).unwrap()
        };
        let run = |t: &ImageTensor| ImageTensor::from_tensor(&mlp.forward(&t.to_tensor(DType::F64).unwrap()).unwrap()).unwrap();
        prop_assert_eq!(run(&permute(&img)).data, permute(&run(&img)).data);
    }

    #[test]
    fn attention_rows_are_distributions(
        c in 1usize..6,
        s in 1usize..10,
        values in prop::collection::vec(-4.0f64..4.0, 2 * 6 * 10),
    ) {
        let q = tensor(values[..c * s].to_vec(), &[1, c, 1, s]);
        let k = tensor(values[60..60 + c * s].to_vec(), &[1, c, 1, s]);
        let a = attention_weights(&q, &k).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for row in a {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_equivariant_to_spatial_permutations(
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
        values in prop::collection::vec(-2.0f64..2.0, 3 * 3 * 6),
    ) {
        let part = |i: usize| values[i * 18..(i + 1) * 18].to_vec();
        let permute = |v: &[f64]| -> Vec<f64> { (0..3).flat_map(|c| perm.iter().map(move |&p| v[c * 6 + p])).collect() };
        let run = |q: Vec<f64>, k: Vec<f64>, v: Vec<f64>| {
            pixel_self_attention(&tensor(q, &[1, 3, 2, 3]), &tensor(k, &[1, 3, 2, 3]), &tensor(v, &[1, 3, 2, 3]))
                .unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let direct = permute(&run(part(0), part(1), part(2)));
        let permuted = run(permute(&part(0)), permute(&part(1)), permute(&part(2)));
        for (a, b) in direct.iter().zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_symmetric(a in image_strategy(12, 12), b in image_strategy(12, 12)) {
        let cfg = LossConfig::default();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!((delta_e(&a, &b).unwrap() - delta_e(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        prop_assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(delta_e(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ciede2000_is_symmetric_and_non_negative(
        r1 in prop::array::uniform3(0.0f64..=1.0),
        r2 in prop::array::uniform3(0.0f64..=1.0),
    ) {
        let (l1, l2) = (srgb_to_lab(r1), srgb_to_lab(r2));
        let d = ciede2000(l1, l2);
        prop_assert!(d >= 0.0);
        prop_assert!((d - ciede2000(l2, l1)).abs() < 1e-9);
    }

    #[test]
    fn reflection_padding_keeps_the_original_block(h in 1usize..12, w in 1usize..12, m in 1usize..9, seed in any::<u64>()) {
        let data = (0..3 * h * w).map(|i| ((i as u64 * 2654435761 ^ seed) % 1000) as f32 / 1000.0).collect();
        let img = ImageTensor::new(3, h, w, data).unwrap();
        let padded = img.reflect_pad_to_multiple(m);
        prop_assert_eq!(padded.height % m, 0);
        prop_assert_eq!(padded.width % m, 0);
        prop_assert!(padded.height < h + m && padded.width < w + m);
        prop_assert_eq!(padded.crop(0, 0, h, w).unwrap().data, img.data);
    }

    #[test]
    fn augmentation_moves_input_and_target_together(img in image_strategy(8, 8), seed in any::<u64>()) {
        let cfg = AugmentConfig { mixup: 0.0, ..AugmentConfig::default() };
        let s = PairedSample::new("a", img.clone(), img).unwrap();
        let out = augment(&s, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out.input.data, &out.target.data);
        prop_assert_eq!(out.input.dims(), (3, 8, 8));
    }

    #[test]
    fn schedule_stays_between_floor_and_initial(total in 1u64..5000, k in 0u64..10000) {
        let s = CosineSchedule::new(&OptimizerConfig::default(), total);
        let lr = s.lr(k);
        prop_assert!((1e-6..=2e-4).contains(&lr));
        prop_assert!(s.lr(k + 1) <= lr);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoints_round_trip_byte_for_byte(seed in any::<u64>(), f64_params in any::<bool>()) {
        let dtype = if f64_params { DType::F64 } else { DType::F32 };
        let model = Model::build(&ModelConfig::toy(), seed, dtype).unwrap();
        let bytes = Checkpoint::from_model(&model, 17, None).unwrap().to_bytes().unwrap();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
        let again = Checkpoint::from_model(&reloaded, 17, None).unwrap().to_bytes().unwrap();
        prop_assert_eq!(bytes, again);
    }
}
