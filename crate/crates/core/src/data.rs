//! Images, paired datasets, augmentation and synthetic underwater degradation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A channel-major `C x H x W` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values do not fill a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self {
            channels: 3,
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// `(1, C, H, W)` tensor on the CPU.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => return Err(Error::shape(format!("expected one image, got tensor {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = rgb.into_raw();
        Ok(Self::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c]))
    }

    /// 8-bit quantization `round(255 * clamp(v, 0, 1))`.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!("cannot encode {} channels as RGB", self.channels)));
        }
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Ok(ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear (triangle filter) resampling of every channel.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, self.plane(c).to_vec())
                    .expect("plane size matches dims");
            let out = image::imageops::resize(&plane, width as u32, height as u32, FilterType::Triangle);
            data.extend(out.into_raw());
        }
        Self {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, self.height - 1 - y, x)
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.channels, self.width, self.height, |c, y, x| self.get(c, x, y))
    }

    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.transpose().flip_vertical(),
            2 => self.flip_horizontal().flip_vertical(),
            _ => self.transpose().flip_horizontal(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Reflection-pads bottom and right edges so both dims become multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Self {
        let up = |n: usize| n.div_ceil(multiple) * multiple;
        let (h, w) = (up(self.height), up(self.width));
        Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        })
    }

    /// Pixel-wise `lam * self + (1 - lam) * other`.
    pub fn blend(&self, other: &Self, lam: f32) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::shape("blend of differently sized images"));
        }
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
                .collect(),
            ..*self
        })
    }
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Stacks images of equal size into a `(B, C, H, W)` batch.
pub fn stack(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("empty batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != first.dims() {
            return Err(Error::shape(format!(
                "batch mixes {:?} and {:?} images",
                first.dims(),
                img.dims()
            )));
        }
        data.extend_from_slice(&img.data);
    }
    let (c, h, w) = first.dims();
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub id: String,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, input: ImageTensor, target: ImageTensor) -> Result<Self> {
        if input.dims() != target.dims() {
            return Err(Error::shape(format!(
                "input {:?} and target {:?} differ in size",
                input.dims(),
                target.dims()
            )));
        }
        Ok(Self {
            input,
            target,
            id: id.into(),
        })
    }

    fn apply(&self, f: impl Fn(&ImageTensor) -> ImageTensor) -> Self {
        Self {
            input: f(&self.input),
            target: f(&self.target),
            id: self.id.clone(),
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads `input_dir/<id>.*` and `target_dir/<id>.*` pairs, sorted by id.
///
/// Pairs are matched on file stem. All unmatched files are reported together.
pub fn load_paired_dataset(
    input_dir: &Path,
    target_dir: &Path,
    resize: Option<(usize, usize)>,
) -> Result<Vec<PairedSample>> {
    let inputs = image_files(input_dir)?;
    let targets = image_files(target_dir)?;
    let mut orphans: Vec<String> = inputs
        .iter()
        .filter(|(id, _)| !targets.contains_key(*id))
        .map(|(_, p)| format!("input without target: {}", p.display()))
        .collect();
    orphans.extend(
        targets
            .iter()
            .filter(|(id, _)| !inputs.contains_key(*id))
            .map(|(_, p)| format!("target without input: {}", p.display())),
    );
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "{} unmatched file(s):\n  {}",
            orphans.len(),
            orphans.join("\n  ")
        )));
    }
    let mut samples = Vec::with_capacity(inputs.len());
    for (id, in_path) in &inputs {
        let mut input = ImageTensor::load(in_path)?;
        let mut target = ImageTensor::load(&targets[id])?;
        if let Some((h, w)) = resize {
            input = input.resize(h, w);
            target = target.resize(h, w);
        }
        samples.push(PairedSample::new(id.clone(), input, target)?);
    }
    Ok(samples)
}

/// `<root>/input` and `<root>/target`.
pub fn load_dataset_root(root: &Path, resize: Option<(usize, usize)>) -> Result<Vec<PairedSample>> {
    load_paired_dataset(&root.join("input"), &root.join("target"), resize)
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

/// Keeps the samples listed in `ids`, in manifest order. Unknown ids are an error.
pub fn select(samples: &[PairedSample], ids: &[String]) -> Result<Vec<PairedSample>> {
    let by_id: BTreeMap<&str, &PairedSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let missing: Vec<&str> = ids
        .iter()
        .map(String::as_str)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("manifest lists unknown ids: {}", missing.join(", "))));
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Right-angle rotation; non-square images only take half turns.
    pub rotate: f64,
    /// Square images only.
    pub transpose: f64,
    pub mixup: f64,
    pub mixup_alpha: f64,
    pub crop: f64,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.5,
            transpose: 0.5,
            mixup: 0.2,
            mixup_alpha: 0.2,
            crop: 0.3,
            crop_min_scale: 0.75,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate: 0.0,
            transpose: 0.0,
            mixup: 0.0,
            crop: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("augment.hflip", self.hflip),
            ("augment.vflip", self.vflip),
            ("augment.rotate", self.rotate),
            ("augment.transpose", self.transpose),
            ("augment.mixup", self.mixup),
            ("augment.crop", self.crop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "probability must be in [0, 1]"));
            }
        }
        if self.mixup_alpha <= 0.0 {
            return Err(Error::config("augment.mixup_alpha", "must be > 0"));
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return Err(Error::config("augment.crop_min_scale", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Applies the same random geometric transforms to input and target. Mixup
/// blends with `partner` using one shared coefficient.
pub fn augment(
    sample: &PairedSample,
    partner: Option<&PairedSample>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    let mut s = sample.clone();
    if let Some(p) = partner.filter(|p| p.input.dims() == s.input.dims()) {
        if rng.random_bool(cfg.mixup) {
            let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
                .map_err(|e| Error::config("augment.mixup_alpha", e.to_string()))?;
            s = mixup(&s, p, beta.sample(rng) as f32)?;
        }
    }
    if rng.random_bool(cfg.crop) {
        let (h, w) = (s.input.height, s.input.width);
        let scale = rng.random_range(cfg.crop_min_scale..=1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        s = PairedSample {
            input: s.input.crop(top, left, ch, cw)?.resize(h, w),
            target: s.target.crop(top, left, ch, cw)?.resize(h, w),
            id: s.id,
        };
    }
    if rng.random_bool(cfg.hflip) {
        s = s.apply(ImageTensor::flip_horizontal);
    }
    if rng.random_bool(cfg.vflip) {
        s = s.apply(ImageTensor::flip_vertical);
    }
    let square = s.input.height == s.input.width;
    if rng.random_bool(cfg.rotate) {
        let turns = if square { rng.random_range(1..4) } else { 2 };
        s = s.apply(|img| img.rotate90(turns));
    }
    if square && rng.random_bool(cfg.transpose) {
        s = s.apply(ImageTensor::transpose);
    }
    Ok(s)
}

/// `lam * a + (1 - lam) * b` for both input and target.
pub fn mixup(a: &PairedSample, b: &PairedSample, lam: f32) -> Result<PairedSample> {
    Ok(PairedSample {
        input: a.input.blend(&b.input, lam)?,
        target: a.target.blend(&b.target, lam)?,
        id: a.id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    pub transmission: [f64; 3],
    pub background: [f64; 3],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            transmission: [0.4, 0.7, 0.8],
            background: [0.1, 0.5, 0.6],
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if self.transmission.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("degrade.transmission", "each value must be in [0, 1]"));
        }
        if self.background.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("degrade.background", "each value must be in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("degrade.noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `y_c = t_c x_c + (1 - t_c) A_c + n`, clamped to `[0, 1]`.
pub fn synth_degrade(clean: &ImageTensor, p: &DegradeParams) -> Result<ImageTensor> {
    p.validate()?;
    if clean.channels != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", clean.channels)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::config("degrade.noise_std", e.to_string()))?;
    let plane = clean.height * clean.width;
    let data = clean
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / plane;
            let (t, a) = (p.transmission[c], p.background[c]);
            let n = if p.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ((t * x as f64 + (1.0 - t) * a + n) as f32).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImageTensor { data, ..*clean })
}

/// A smooth, colorful scene with some texture, for synthetic training pairs.
pub fn synthetic_clean(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
            )
        })
        .collect();
    let freq = (rng.random_range(4.0..12.0), rng.random_range(4.0..12.0));
    let amp = rng.random_range(0.02..0.08);
    let img = ImageTensor::from_fn(3, height, width, |c, y, x| {
        let v = y as f32 / height.max(1) as f32;
        let u = x as f32 / width.max(1) as f32;
        let mut val = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5);
        for (cx, cy, r, col) in &blobs {
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            val += col[c] * (-d2 / (2.0 * r * r)).exp();
        }
        val += amp * (std::f32::consts::TAU * (freq.0 * u + 0.3 * c as f32)).sin() * (std::f32::consts::TAU * freq.1 * v).cos();
        val
    });
    img.clamped()
}

/// Clean/degraded pairs built from [`synthetic_clean`] and [`synth_degrade`].
pub fn synthetic_pairs(count: usize, height: usize, width: usize, params: &DegradeParams, seed: u64) -> Result<Vec<PairedSample>> {
    (0..count)
        .map(|i| {
            let clean = synthetic_clean(height, width, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let p = DegradeParams {
                seed: params.seed.wrapping_add(i as u64),
                ..params.clone()
            };
            PairedSample::new(format!("synth_{i:04}"), synth_degrade(&clean, &p)?, clean)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(c, h, w, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0)
    }

    fn sample(h: usize, w: usize) -> PairedSample {
        let input = ramp(3, h, w);
        let target = input.map(|v| 1.0 - v);
        PairedSample::new("s", input, target).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(3, 5, 7).map(|v| (v * 255.0).round() / 255.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back.dims(), (3, 5, 7));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        let img = ImageTensor::new(3, 1, 1, vec![-0.5, 0.5, 1.7]).unwrap();
        let px = img.to_rgb8().unwrap().get_pixel(0, 0).0;
        assert_eq!(px, [0, 128, 255]);
    }

    #[test]
    fn resize_preserves_mean() {
        let img = synthetic_clean(384, 512, 4);
        let small = img.resize(256, 256);
        assert_eq!(small.dims(), (3, 256, 256));
        assert!((small.mean() - img.mean()).abs() < 0.02);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = ImageTensor::filled(30, 20, [0.25, 0.5, 0.75]);
        let r = img.resize(16, 16);
        for c in 0..3 {
            for &v in r.plane(c) {
                assert!((v - [0.25, 0.5, 0.75][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(3, 4, 6);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.transpose().transpose(), img);
        assert_eq!(img.rotate90(1).rotate90(3), img);
        assert_eq!(img.rotate90(4), img);
    }

    #[test]
    fn rotate_quarter_turn_moves_corners() {
        let img = ramp(1, 2, 3);
        let r = img.rotate90(1);
        assert_eq!(r.dims(), (1, 3, 2));
        // Counter-clockwise: top-right corner moves to top-left.
        assert_eq!(r.get(0, 0, 0), img.get(0, 0, 2));
        assert_eq!(r.get(0, 2, 0), img.get(0, 0, 0));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let img = ImageTensor::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = img.reflect_pad_to_multiple(4);
        assert_eq!(p.dims(), (1, 4, 4));
        assert_eq!(&p.data[..4], &[1.0, 2.0, 3.0, 2.0]);
        let big = ramp(3, 250, 250).reflect_pad_to_multiple(8);
        assert_eq!(big.dims(), (3, 256, 256));
        assert_eq!(big.crop(0, 0, 250, 250).unwrap(), ramp(3, 250, 250));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = sample(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(augment(&s, Some(&s), &AugmentConfig::disabled(), &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        // target = 1 - input pixelwise, which every geometric transform preserves.
        let s = sample(8, 8);
        let cfg = AugmentConfig {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.5,
            transpose: 0.5,
            crop: 0.0,
            mixup: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = augment(&s, None, &cfg, &mut rng).unwrap();
            for (x, y) in a.input.data.iter().zip(&a.target.data) {
                assert_eq!(*y, 1.0 - x);
            }
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let s = sample(8, 8);
        let other = PairedSample::new("o", ramp(3, 8, 8).flip_vertical(), ramp(3, 8, 8)).unwrap();
        let cfg = AugmentConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| augment(&s, Some(&other), &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn mixup_edges() {
        let a = sample(4, 4);
        let b = PairedSample::new("b", ramp(3, 4, 4).flip_horizontal(), ramp(3, 4, 4)).unwrap();
        let m = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(m, a);
        let m = mixup(&a, &b, 0.0).unwrap();
        assert_eq!(m.input, b.input);
        assert_eq!(m.target, b.target);
    }

    #[test]
    fn non_square_rotation_keeps_shape() {
        let s = sample(4, 8);
        let cfg = AugmentConfig {
            rotate: 1.0,
            transpose: 1.0,
            ..AugmentConfig::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, None, &cfg, &mut rng).unwrap();
        assert_eq!(a.input.dims(), (3, 4, 8));
        assert_eq!(a.input, s.input.rotate90(2));
    }

    #[test]
    fn crop_keeps_resolution() {
        let s = sample(16, 16);
        let cfg = AugmentConfig {
            crop: 1.0,
            crop_min_scale: 0.5,
            ..AugmentConfig::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = augment(&s, None, &cfg, &mut rng).unwrap();
        assert_eq!(a.input.dims(), (3, 16, 16));
        assert_eq!(a.target.dims(), (3, 16, 16));
    }

    #[test]
    fn degrade_identity_transmission() {
        let clean = ramp(3, 5, 5);
        let p = DegradeParams {
            transmission: [1.0; 3],
            noise_std: 0.0,
            ..DegradeParams::default()
        };
        assert_eq!(synth_degrade(&clean, &p).unwrap(), clean);
    }

    #[test]
    fn degrade_full_attenuation_gives_background() {
        let clean = ramp(3, 5, 5);
        let p = DegradeParams {
            transmission: [0.0; 3],
            noise_std: 0.0,
            ..DegradeParams::default()
        };
        let y = synth_degrade(&clean, &p).unwrap();
        for c in 0..3 {
            for &v in y.plane(c) {
                assert_eq!(v, p.background[c] as f32);
            }
        }
    }

    #[test]
    fn degrade_white_closed_form() {
        let clean = ImageTensor::filled(4, 4, [1.0; 3]);
        let p = DegradeParams {
            noise_std: 0.0,
            ..DegradeParams::default()
        };
        let y = synth_degrade(&clean, &p).unwrap();
        for (c, expected) in [0.46f32, 0.85, 0.92].into_iter().enumerate() {
            for &v in y.plane(c) {
                assert!((v - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degrade_is_seeded_and_in_range() {
        let clean = synthetic_clean(16, 16, 1);
        let p = DegradeParams {
            noise_std: 0.2,
            ..DegradeParams::default()
        };
        let a = synth_degrade(&clean, &p).unwrap();
        assert_eq!(a, synth_degrade(&clean, &p).unwrap());
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let q = DegradeParams { seed: 1, ..p };
        assert_ne!(a, synth_degrade(&clean, &q).unwrap());
    }

    #[test]
    fn degrade_rejects_bad_params() {
        let clean = ramp(3, 2, 2);
        let p = DegradeParams {
            transmission: [1.5, 0.5, 0.5],
            ..DegradeParams::default()
        };
        assert!(matches!(synth_degrade(&clean, &p), Err(Error::Config { .. })));
    }

    #[test]
    fn synthetic_clean_in_range_and_seeded() {
        let a = synthetic_clean(32, 32, 7);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synthetic_clean(32, 32, 7));
        assert_ne!(a, synthetic_clean(32, 32, 8));
    }

    fn write_dataset(root: &Path, inputs: &[&str], targets: &[&str]) {
        std::fs::create_dir_all(root.join("input")).unwrap();
        std::fs::create_dir_all(root.join("target")).unwrap();
        for (i, name) in inputs.iter().enumerate() {
            synthetic_clean(6, 8, i as u64).save_png(&root.join("input").join(name)).unwrap();
        }
        for (i, name) in targets.iter().enumerate() {
            synthetic_clean(6, 8, 10 + i as u64).save_png(&root.join("target").join(name)).unwrap();
        }
    }

    #[test]
    fn dataset_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["c.png", "a.png", "b.png"], &["b.png", "c.png", "a.png"]);
        let s = load_dataset_root(dir.path(), Some((4, 4))).unwrap();
        let ids: Vec<_> = s.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(s[0].input.dims(), (3, 4, 4));
    }

    #[test]
    fn orphans_are_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a.png", "b.png", "x.png"], &["a.png", "b.png", "y.png"]);
        match load_dataset_root(dir.path(), None) {
            Err(Error::Dataset(msg)) => {
                assert!(msg.contains("x.png"), "{msg}");
                assert!(msg.contains("y.png"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a.png"], &["a.png"]);
        std::fs::write(dir.path().join("input").join("a.png"), b"not a png").unwrap();
        match load_dataset_root(dir.path(), None) {
            Err(Error::Image { path, .. }) => assert!(path.ends_with("input/a.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_select() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.txt");
        let ids = vec!["b".to_string(), "a".to_string()];
        write_manifest(&path, &ids).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), ids);
        let samples = vec![
            PairedSample::new("a", ramp(3, 2, 2), ramp(3, 2, 2)).unwrap(),
            PairedSample::new("b", ramp(3, 2, 2), ramp(3, 2, 2)).unwrap(),
        ];
        let picked = select(&samples, &ids).unwrap();
        assert_eq!(picked[0].id, "b");
        assert!(select(&samples, &["zz".to_string()]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(3, 4, 5);
        let t = img.to_tensor(DType::F64).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 5]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), img);
        let b = stack(&[&img, &img], DType::F32).unwrap();
        assert_eq!(b.dims(), &[2, 3, 4, 5]);
    }
}
