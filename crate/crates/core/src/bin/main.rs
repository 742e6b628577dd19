use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uie_unfold::checkpoint::Checkpoint;
use uie_unfold::config::TrainConfig;
use uie_unfold::data::{self, DegradeParams, ImageTensor};
use uie_unfold::metrics::summary_csv;
use uie_unfold::pipeline;
use uie_unfold::train::{self, Trainer};
use uie_unfold::{Error, Result};

#[derive(Parser)]
#[command(name = "uie-unfold", version, about = "Deep-unfolding underwater image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and an NDJSON run log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint directory (overrides `checkpoint.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a paired dataset (`<data>/input`, `<data>/target`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for summary.csv, per_image.csv and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance images and write PNGs.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and score all seven module combinations.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for ablation.csv and per-row checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the synthetic underwater degradation.
    Degrade {
        /// TOML file whose `[degrade]` section sets the parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Generate this many clean/degraded pairs into `<out>/input` and `<out>/target`.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Size of generated pairs, `HxW`.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        images: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the desk-scale preset.
    #[arg(long)]
    toy: bool,
    /// Switch a module off; repeatable.
    #[arg(long, value_enum)]
    disable: Vec<Module>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    Cpgb,
    Nagdm,
    Isf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok((p(h)?, p(w)?))
}

impl RunArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p, self.toy)?,
            None if self.toy => TrainConfig::toy(),
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for m in &self.disable {
            match m {
                Module::Cpgb => cfg.model.ablation.use_cpgb = false,
                Module::Nagdm => cfg.model.ablation.use_nagdm = false,
                Module::Isf => cfg.model.ablation.use_isf_former = false,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, checkpoint, out } => {
            let mut cfg = run.load()?;
            if out.is_some() {
                cfg.checkpoint.dir = out;
            }
            if cfg.checkpoint.dir.is_none() {
                cfg.checkpoint.dir = Some(PathBuf::from("checkpoints"));
            }
            let (train_set, val_set) = train::load_data(&cfg)?;
            let mut trainer = match checkpoint {
                Some(p) => Trainer::resume(cfg, &p, train_set, val_set)?,
                None => Trainer::new(cfg, train_set, val_set)?,
            };
            log::info!(
                "training {} parameters for {} steps",
                trainer.model.num_parameters(),
                trainer.total_steps()
            );
            let outcome = trainer.run()?;
            if let Some(last) = outcome.records.last() {
                println!("step {} loss {:.6}", last.step, last.total);
            }
            if let Some(p) = outcome.final_checkpoint {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let samples = data::load_dataset_root(&data, None)?;
            let loss = uie_unfold::losses::LossConfig::default();
            let model = ckpt.to_model()?;
            let method = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let report = pipeline::evaluate_samples(&model, &samples, &method, &loss)?;
            let baseline = pipeline::input_baseline(&samples, &loss)?;
            let summary = summary_csv(&[baseline, report.clone()]);
            print!("{summary}");
            if let Some(dir) = out {
                write_file(&dir.join("summary.csv"), &summary)?;
                write_file(&dir.join("per_image.csv"), &report.per_image_csv())?;
                write_file(&dir.join("report.json"), &report.to_json()?)?;
            }
        }
        Command::Enhance { checkpoint, out, images } => {
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let outcomes = pipeline::enhance_files(&model, &images, &out)?;
            let total = outcomes.len();
            let mut failed = 0;
            for o in outcomes {
                match o.output {
                    Ok(p) => println!("{}", p.display()),
                    Err(_) => failed += 1,
                }
            }
            if failed > 0 {
                return Err(Error::Dataset(format!("{failed} of {total} inputs could not be enhanced")));
            }
        }
        Command::Ablate { run, out } => {
            let mut cfg = run.load()?;
            if out.is_some() {
                cfg.checkpoint.dir = out.clone();
            }
            let (train_set, val_set) = train::load_data(&cfg)?;
            let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
            let report = pipeline::ablate(&cfg, &train_set, eval_set)?;
            let csv = report.to_csv();
            print!("{csv}");
            for c in report.soft_ordering(0.5)? {
                println!(
                    "full {:.4} vs {} {:.4}: {}",
                    c.full_psnr,
                    c.ablated,
                    c.psnr,
                    if c.passed { "ok" } else { "below margin" }
                );
            }
            if let Some(dir) = out {
                write_file(&dir.join("ablation.csv"), &csv)?;
            }
        }
        Command::Degrade {
            config,
            seed,
            out,
            synthetic,
            size,
            images,
        } => {
            let mut params = match config {
                Some(p) => TrainConfig::load(&p, false)?.degrade,
                None => DegradeParams::default(),
            };
            if let Some(s) = seed {
                params.seed = s;
            }
            params.validate()?;
            if synthetic.is_none() && images.is_empty() {
                return Err(Error::Config {
                    field: "degrade".into(),
                    reason: "give image paths or --synthetic N".into(),
                });
            }
            if let Some(n) = synthetic {
                let pairs = data::synthetic_pairs(n, size.0, size.1, &params, params.seed)?;
                for p in &pairs {
                    p.input.save_png(&out.join("input").join(format!("{}.png", p.id)))?;
                    p.target.save_png(&out.join("target").join(format!("{}.png", p.id)))?;
                }
                println!("{} pairs in {}", pairs.len(), out.display());
            }
            for path in images {
                let clean = ImageTensor::load(&path)?;
                let stem = path.file_stem().unwrap_or_default();
                let dest = out.join(stem).with_extension("png");
                data::synth_degrade(&clean, &params)?.save_png(&dest)?;
                println!("{}", dest.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
