//! Inference, evaluation and the ablation switchboard.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{format_metric, ImageScores, MetricReport, PerceptualMetric, Scores, DELTA_E_HEADER, PSNR_HEADER, SSIM_HEADER};
use crate::model::{AblationFlags, Model};
use crate::train::Trainer;

/// Enhances one image of any size: reflection-pad, forward, crop, clamp.
pub fn enhance_image(model: &Model, img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", img.channels)));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input image has non-finite pixels".into()));
    }
    let (h, w) = (img.height, img.width);
    let padded = img.reflect_pad_to_multiple(model.config.inference_multiple());
    let out = model.forward(&padded.to_tensor(model.dtype())?)?;
    let y = out.final_image().narrow(2, 0, h)?.narrow(3, 0, w)?;
    Ok(ImageTensor::from_tensor(&y)?.clamped())
}

#[derive(Debug)]
pub struct EnhanceOutcome {
    pub input: PathBuf,
    pub output: Result<PathBuf>,
}

/// Writes `<out_dir>/<stem>.png` for every input. A failing file does not
/// stop the batch; its error is returned in place of the output path.
pub fn enhance_files(model: &Model, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<EnhanceOutcome>> {
    std::fs::create_dir_all(out_dir)?;
    Ok(inputs
        .iter()
        .map(|input| {
            let output = (|| {
                let stem = input
                    .file_stem()
                    .ok_or_else(|| Error::Dataset(format!("{} has no file name", input.display())))?;
                let out = out_dir.join(stem).with_extension("png");
                enhance_image(model, &ImageTensor::load(input)?)?.save_png(&out)?;
                Ok(out)
            })();
            if let Err(e) = &output {
                log::warn!("skipping {}: {e}", input.display());
            }
            EnhanceOutcome {
                input: input.clone(),
                output,
            }
        })
        .collect())
}

/// Scores the final-stage output against each target.
pub fn evaluate_samples(model: &Model, samples: &[PairedSample], method: &str, loss: &LossConfig) -> Result<MetricReport> {
    evaluate_with(model, samples, method, loss, None)
}

pub fn evaluate_with(
    model: &Model,
    samples: &[PairedSample],
    method: &str,
    loss: &LossConfig,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<MetricReport> {
    let images = samples
        .iter()
        .map(|s| {
            let pred = enhance_image(model, &s.input)?;
            Ok(ImageScores {
                id: s.id.clone(),
                scores: Scores::of(&pred, &s.target, loss, perceptual)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(method, images)
}

/// The degraded inputs scored as they are, under the method name `input`.
pub fn input_baseline(samples: &[PairedSample], loss: &LossConfig) -> Result<MetricReport> {
    let images = samples
        .iter()
        .map(|s| {
            Ok(ImageScores {
                id: s.id.clone(),
                scores: Scores::of(&s.input.clamped(), &s.target, loss, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new("input", images)
}

pub fn evaluate_checkpoint(path: &Path, samples: &[PairedSample], loss: &LossConfig) -> Result<MetricReport> {
    let model = Checkpoint::load(path)?.to_model()?;
    let method = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    evaluate_samples(&model, samples, &method, loss)
}

/// Short name such as `full`, `no-cpgb` or `no-nagdm-isf`.
pub fn ablation_label(flags: &AblationFlags) -> String {
    if flags.is_full() {
        return "full".into();
    }
    let off: Vec<&str> = [
        (flags.use_cpgb, "cpgb"),
        (flags.use_nagdm, "nagdm"),
        (flags.use_isf_former, "isf"),
    ]
    .iter()
    .filter(|(on, _)| !on)
    .map(|(_, n)| *n)
    .collect();
    format!("no-{}", off.join("-"))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderingCheck {
    pub ablated: String,
    pub full_psnr: f64,
    pub psnr: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn full_row(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags.is_full())
    }

    /// Module presence marks followed by mean metrics; the full model is the reference row.
    pub fn to_csv(&self) -> String {
        let mark = |on: bool| if on { "✓" } else { "✗" };
        let mut out = format!("CPGB,NAGDM,ISF-Former,{PSNR_HEADER},{SSIM_HEADER},{DELTA_E_HEADER},Reference\n");
        for r in &self.rows {
            let m = &r.report.mean;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                mark(r.flags.use_cpgb),
                mark(r.flags.use_nagdm),
                mark(r.flags.use_isf_former),
                format_metric(m.psnr),
                format_metric(m.ssim),
                format_metric(m.delta_e),
                if r.flags.is_full() { "yes" } else { "" }
            );
        }
        out
    }

    /// Full model PSNR against every variant missing exactly one module.
    pub fn soft_ordering(&self, margin_db: f64) -> Result<Vec<OrderingCheck>> {
        let full = self
            .full_row()
            .ok_or_else(|| Error::Dataset("ablation report has no full-model row".into()))?
            .report
            .mean
            .psnr;
        Ok(self
            .rows
            .iter()
            .filter(|r| {
                let f = r.flags;
                [f.use_cpgb, f.use_nagdm, f.use_isf_former].iter().filter(|on| !**on).count() == 1
            })
            .map(|r| OrderingCheck {
                ablated: ablation_label(&r.flags),
                full_psnr: full,
                psnr: r.report.mean.psnr,
                passed: full >= r.report.mean.psnr - margin_db,
            })
            .collect())
    }
}

/// Trains and evaluates every module combination with otherwise identical settings.
pub fn ablate(cfg: &TrainConfig, train: &[PairedSample], eval: &[PairedSample]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for flags in AblationFlags::table_rows() {
        let label = ablation_label(&flags);
        let mut row_cfg = cfg.clone();
        row_cfg.model.ablation = flags;
        if let Some(dir) = &cfg.checkpoint.dir {
            row_cfg.checkpoint.dir = Some(dir.join(&label));
            row_cfg.checkpoint.log = None;
        }
        log::info!("ablation row {label}");
        let mut trainer = Trainer::new(row_cfg, train.to_vec(), Vec::new())?;
        trainer.run()?;
        let report = evaluate_samples(&trainer.model, eval, &label, &cfg.loss)?;
        rows.push(AblationRow { flags, report });
    }
    Ok(AblationReport { rows })
}
