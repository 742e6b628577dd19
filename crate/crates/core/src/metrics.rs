//! Full-reference image quality metrics and report formatting.

use std::fmt::Write as _;

use candle_core::DType;
use serde::{Serialize, Serializer};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("images differ in size: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels jointly, peak 1.0.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Windowed SSIM, the same computation as the training loss.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, cfg: &LossConfig) -> Result<f64> {
    check_pair(a, b)?;
    let t = losses::ssim(&a.to_tensor(DType::F64)?, &b.to_tensor(DType::F64)?, cfg)?;
    Ok(t.to_scalar::<f64>()?)
}

// sRGB primaries to XYZ under D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const EPSILON: f64 = 216.0 / 24_389.0;
    const KAPPA: f64 = 24_389.0 / 27.0;
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2])
}

/// sRGB in `[0, 1]` to CIELab. The white point is the XYZ of sRGB white, so
/// `(1, 1, 1)` maps to `(100, 0, 0)`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let white = rgb_to_xyz([1.0; 3]);
    let xyz = rgb_to_xyz(rgb.map(srgb_to_linear));
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / white[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIEDE2000 color difference with unit weighting factors.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let pow7 = |x: f64| x.powi(7);
    let c_bar = ((a1 * a1 + b1 * b1).sqrt() + (a2 * a2 + b2 * b2).sqrt()) / 2.0;
    let g = 0.5 * (1.0 - (pow7(c_bar) / (pow7(c_bar) + pow7(25.0))).sqrt());
    let (a1p, a2p) = ((1.0 + g) * a1, (1.0 + g) * a2);
    let (c1p, c2p) = ((a1p * a1p + b1 * b1).sqrt(), (a2p * a2p + b2 * b2).sqrt());
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            b.atan2(a).to_degrees().rem_euclid(360.0)
        }
    };
    let (h1p, h2p) = (hue(b1, a1p), hue(b2, a2p));

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let chroma_zero = c1p * c2p == 0.0;
    let dh = if chroma_zero {
        0.0
    } else {
        let d = h2p - h1p;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * (dh.to_radians() / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar = if chroma_zero {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };
    let cosd = |deg: f64| deg.to_radians().cos();
    let t = 1.0 - 0.17 * cosd(h_bar - 30.0) + 0.24 * cosd(2.0 * h_bar) + 0.32 * cosd(3.0 * h_bar + 6.0)
        - 0.20 * cosd(4.0 * h_bar - 63.0);
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let rc = 2.0 * (pow7(c_bar_p) / (pow7(c_bar_p) + pow7(25.0))).sqrt();
    let lm = (l_bar - 50.0).powi(2);
    let sl = 1.0 + 0.015 * lm / (20.0 + lm).sqrt();
    let sc = 1.0 + 0.045 * c_bar_p;
    let sh = 1.0 + 0.015 * c_bar_p * t;
    let rt = -(2.0 * d_theta).to_radians().sin() * rc;
    let (tl, tc, th) = (dl / sl, dc / sc, dh_big / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// Mean per-pixel CIEDE2000 and the number of channel values clamped into `[0, 1]`.
pub fn delta_e_counted(a: &ImageTensor, b: &ImageTensor) -> Result<(f64, usize)> {
    check_pair(a, b)?;
    if a.channels != 3 {
        return Err(Error::shape(format!("color difference needs 3 channels, got {}", a.channels)));
    }
    let mut clamped = 0;
    let mut pixel = |img: &ImageTensor, y: usize, x: usize| {
        [0, 1, 2].map(|c| {
            let v = img.get(c, y, x) as f64;
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            v.clamp(0.0, 1.0)
        })
    };
    let mut total = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            let la = srgb_to_lab(pixel(a, y, x));
            let lb = srgb_to_lab(pixel(b, y, x));
            total += ciede2000(la, lb);
        }
    }
    Ok((total / (a.height * a.width).max(1) as f64, clamped))
}

/// Mean per-pixel CIEDE2000 between two sRGB images. Out-of-range values
/// are clamped and reported through the log.
pub fn delta_e(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (d, clamped) = delta_e_counted(a, b)?;
    if clamped > 0 {
        log::warn!("delta_e clamped {clamped} out-of-range channel values");
    }
    Ok(d)
}

/// Hook for a learned perceptual distance such as LPIPS.
pub trait PerceptualMetric {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

fn metric_value<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_metric(*v))
    }
}

fn opt_metric_value<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => metric_value(v, s),
        None => s.serialize_none(),
    }
}

/// Serde adapter writing non-finite values as `"inf"`, `"-inf"` or `"nan"`.
pub mod metric_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        super::metric_value(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a metric value: {other}"))),
            },
        }
    }
}

/// Four decimals; infinities print as `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scores {
    #[serde(serialize_with = "metric_value")]
    pub psnr: f64,
    #[serde(serialize_with = "metric_value")]
    pub ssim: f64,
    #[serde(serialize_with = "metric_value")]
    pub delta_e: f64,
    #[serde(serialize_with = "opt_metric_value", skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

impl Scores {
    pub fn of(pred: &ImageTensor, target: &ImageTensor, cfg: &LossConfig, perceptual: Option<&dyn PerceptualMetric>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target, cfg)?,
            delta_e: delta_e(pred, target)?,
            lpips: perceptual.map(|p| p.distance(pred, target)).transpose()?,
        })
    }

    /// Arithmetic mean of each metric.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Option<Scores> {
        let items: Vec<&Scores> = items.into_iter().collect();
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Scores) -> f64| items.iter().map(|s| f(s)).sum::<f64>() / n;
        let lpips = if items.iter().all(|s| s.lpips.is_some()) {
            Some(items.iter().filter_map(|s| s.lpips).sum::<f64>() / n)
        } else {
            None
        };
        Some(Scores {
            psnr: avg(|s| s.psnr),
            ssim: avg(|s| s.ssim),
            delta_e: avg(|s| s.delta_e),
            lpips,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScores {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

pub const PSNR_HEADER: &str = "PSNR ↑";
pub const SSIM_HEADER: &str = "SSIM ↑";
pub const DELTA_E_HEADER: &str = "ΔE ↓";
pub const LPIPS_HEADER: &str = "LPIPS ↓";

fn metric_headers(with_lpips: bool) -> Vec<&'static str> {
    let mut h = vec![PSNR_HEADER, SSIM_HEADER, DELTA_E_HEADER];
    if with_lpips {
        h.push(LPIPS_HEADER);
    }
    h
}

fn metric_cells(s: &Scores, with_lpips: bool) -> Vec<String> {
    let mut cells = vec![format_metric(s.psnr), format_metric(s.ssim), format_metric(s.delta_e)];
    if with_lpips {
        cells.push(s.lpips.map(format_metric).unwrap_or_default());
    }
    cells
}

/// Per-image and mean scores for one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub mean: Scores,
    pub images: Vec<ImageScores>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, images: Vec<ImageScores>) -> Result<Self> {
        let mean = Scores::mean(images.iter().map(|i| &i.scores))
            .ok_or_else(|| Error::Dataset("no images to report".into()))?;
        Ok(Self {
            method: method.into(),
            mean,
            images,
        })
    }

    pub fn has_lpips(&self) -> bool {
        self.mean.lpips.is_some()
    }

    /// `Method,PSNR ↑,SSIM ↑,ΔE ↓[,LPIPS ↓]` with one row of means.
    pub fn summary_csv(&self) -> String {
        summary_csv(std::slice::from_ref(self))
    }

    /// One row per image under an `Image` column.
    pub fn per_image_csv(&self) -> String {
        let lp = self.has_lpips();
        let mut out = format!("Image,{}\n", metric_headers(lp).join(","));
        for img in &self.images {
            let _ = writeln!(out, "{},{}", img.id, metric_cells(&img.scores, lp).join(","));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Several methods side by side, one row each.
pub fn summary_csv(reports: &[MetricReport]) -> String {
    let lp = !reports.is_empty() && reports.iter().all(MetricReport::has_lpips);
    let mut out = format!("Method,{}\n", metric_headers(lp).join(","));
    for r in reports {
        let _ = writeln!(out, "{},{}", r.method, metric_cells(&r.mean, lp).join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // (L1, a1, b1, L2, a2, b2, reference ΔE00) from the standard CIEDE2000 test data.
    const CIEDE2000_PAIRS: [[f64; 7]; 34] = [
        [50.0, 2.6772, -79.7751, 50.0, 0.0, -82.7485, 2.0425],
        [50.0, 3.1571, -77.2803, 50.0, 0.0, -82.7485, 2.8615],
        [50.0, 2.8361, -74.0200, 50.0, 0.0, -82.7485, 3.4412],
        [50.0, -1.3802, -84.2814, 50.0, 0.0, -82.7485, 1.0000],
        [50.0, -1.1848, -84.8006, 50.0, 0.0, -82.7485, 1.0000],
        [50.0, -0.9009, -85.5211, 50.0, 0.0, -82.7485, 1.0000],
        [50.0, 0.0, 0.0, 50.0, -1.0, 2.0, 2.3669],
        [50.0, -1.0, 2.0, 50.0, 0.0, 0.0, 2.3669],
        [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0009, 7.1792],
        [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0010, 7.1792],
        [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0011, 7.2195],
        [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0012, 7.2195],
        [50.0, -0.0010, 2.4900, 50.0, 0.0009, -2.4900, 4.8045],
        [50.0, -0.0010, 2.4900, 50.0, 0.0010, -2.4900, 4.8045],
        [50.0, -0.0010, 2.4900, 50.0, 0.0011, -2.4900, 4.7461],
        [50.0, 2.5, 0.0, 50.0, 0.0, -2.5, 4.3065],
        [50.0, 2.5, 0.0, 73.0, 25.0, -18.0, 27.1492],
        [50.0, 2.5, 0.0, 61.0, -5.0, 29.0, 22.8977],
        [50.0, 2.5, 0.0, 56.0, -27.0, -3.0, 31.9030],
        [50.0, 2.5, 0.0, 58.0, 24.0, 15.0, 19.4535],
        [50.0, 2.5, 0.0, 50.0, 3.1736, 0.5854, 1.0000],
        [50.0, 2.5, 0.0, 50.0, 3.2972, 0.0, 1.0000],
        [50.0, 2.5, 0.0, 50.0, 1.8634, 0.5757, 1.0000],
        [50.0, 2.5, 0.0, 50.0, 3.2592, 0.3350, 1.0000],
        [60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644],
        [63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630],
        [61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731],
        [35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645],
        [22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373],
        [36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146],
        [90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441],
        [90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381],
        [6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377],
        [2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082],
    ];

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor {
        let data = (0..3 * h * w)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1009) as f32) / 1008.0)
            .collect();
        ImageTensor::new(3, h, w, data).unwrap()
    }

    #[test]
    fn ciede2000_reference_pairs() {
        for (i, p) in CIEDE2000_PAIRS.iter().enumerate() {
            let d = ciede2000([p[0], p[1], p[2]], [p[3], p[4], p[5]]);
            assert!((d - p[6]).abs() < 1e-4, "pair {}: {d} vs {}", i + 1, p[6]);
        }
    }

    #[test]
    fn lab_endpoints() {
        let white = srgb_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-12 && white[1].abs() < 1e-12 && white[2].abs() < 1e-12);
        assert_eq!(srgb_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lab_of_primary_red() {
        // Independent reference: sRGB red is about (53.24, 80.09, 67.20).
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.01, "{red:?}");
        assert!((red[1] - 80.09).abs() < 0.02, "{red:?}");
        assert!((red[2] - 67.20).abs() < 0.02, "{red:?}");
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = ImageTensor::filled(4, 4, [0.0; 3]);
        let one = ImageTensor::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        let half = ImageTensor::filled(4, 4, [0.5; 3]);
        let three_q = ImageTensor::filled(4, 4, [0.75; 3]);
        assert!((psnr(&half, &three_q).unwrap() - 12.041_199_826_559_248).abs() < 1e-9);
    }

    #[test]
    fn delta_e_identity_and_black_white() {
        let a = noise(5, 5, 1);
        assert_eq!(delta_e(&a, &a).unwrap(), 0.0);
        let black = ImageTensor::filled(3, 3, [0.0; 3]);
        let white = ImageTensor::filled(3, 3, [1.0; 3]);
        let expected = ciede2000([0.0, 0.0, 0.0], [100.0, 0.0, 0.0]);
        let got = delta_e(&black, &white).unwrap();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 100.0).abs() < 1e-9);
    }

    #[test]
    fn delta_e_counts_clamped_values() {
        let a = ImageTensor::new(3, 1, 2, vec![1.2, 0.5, -0.1, 0.5, 0.5, 0.5]).unwrap();
        let b = ImageTensor::filled(1, 2, [0.5; 3]);
        let (_, clamped) = delta_e_counted(&a, &b).unwrap();
        assert_eq!(clamped, 2);
    }

    #[test]
    fn metrics_reject_size_mismatch() {
        let a = noise(4, 4, 1);
        let b = noise(4, 5, 1);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(delta_e(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn report_headers_and_inf() {
        let t = noise(12, 12, 3);
        let scores = Scores::of(&t, &t, &LossConfig::default(), None).unwrap();
        assert_eq!(scores.psnr, f64::INFINITY);
        assert!((scores.ssim - 1.0).abs() < 1e-9);
        assert_eq!(scores.delta_e, 0.0);
        let report = MetricReport::new("identity", vec![ImageScores { id: "a".into(), scores }]).unwrap();
        let csv = report.summary_csv();
        assert_eq!(csv.lines().next().unwrap(), "Method,PSNR ↑,SSIM ↑,ΔE ↓");
        assert!(csv.lines().nth(1).unwrap().starts_with("identity,inf,1.0000,0.0000"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json["mean"]["psnr"], "inf");
        assert!(json["mean"].get("lpips").is_none());
    }

    struct Constant(f64);

    impl PerceptualMetric for Constant {
        fn distance(&self, _: &ImageTensor, _: &ImageTensor) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn lpips_column_only_with_plugin() {
        let a = noise(12, 12, 1);
        let b = noise(12, 12, 2);
        let scores = Scores::of(&a, &b, &LossConfig::default(), Some(&Constant(0.25))).unwrap();
        let report = MetricReport::new("m", vec![ImageScores { id: "x".into(), scores }]).unwrap();
        assert_eq!(report.summary_csv().lines().next().unwrap(), "Method,PSNR ↑,SSIM ↑,ΔE ↓,LPIPS ↓");
        assert!(report.per_image_csv().starts_with("Image,PSNR ↑,SSIM ↑,ΔE ↓,LPIPS ↓\nx,"));
    }

    #[test]
    fn means_are_arithmetic() {
        let mk = |p| Scores {
            psnr: p,
            ssim: 0.5,
            delta_e: p / 10.0,
            lpips: None,
        };
        let m = Scores::mean(&[mk(10.0), mk(20.0)]).unwrap();
        assert_eq!(m.psnr, 15.0);
        assert_eq!(m.delta_e, 1.5);
        assert!(Scores::mean(&[]).is_none());
    }
}
