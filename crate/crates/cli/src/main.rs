use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use maniqa::data::{export_dataset, synth_generate, Dataset, Image, SynthConfig};
use maniqa::gradcheck::GradCheck;
use maniqa::harness::ablate::{MODULE_SWEEP, SCALE_SWEEP};
use maniqa::harness::gradsuite::{registered_cases, run_suite};
use maniqa::harness::{
    ablate, evaluate, predict, train, visualize, Checkpoint, ModelPredictor, SweepParam, TrainConfig,
};
use maniqa::{Error, Result};

#[derive(Parser)]
#[command(name = "maniqa", version, about = "No-reference image quality assessment with multi-dimension attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restricts the run to this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per seed on the train side of that seed's split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score the held-out side of every seed's split and report PLCC/SROCC.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// A checkpoint file, or a directory of `checkpoint_seed{S}.json`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score one image as the mean over random crops.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Defaults to the checkpoint config's `test_crops`.
        #[arg(long)]
        crops: Option<usize>,
    },
    /// Write weight, score and weighted per-patch maps of one image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train and evaluate once per value of one configuration parameter.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// scale, enable_tab, enable_sstb, enable_dual_branch, backbone or modules.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults exist for `scale` and `modules`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic distortion dataset as PPM files plus a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = SynthConfig::default().num_refs)]
        refs: usize,
        #[arg(long, default_value_t = SynthConfig::default().distortions_per_ref)]
        per_ref: usize,
        #[arg(long, default_value_t = SynthConfig::default().image_size)]
        size: usize,
    },
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, manifest } => {
            let cfg = common.train_config()?;
            let out = common.out_dir()?;
            let data = Dataset::load(&manifest)?;
            for &seed in &cfg.seeds {
                let (train_side, _) = data.split(cfg.split_ratio, seed)?;
                let outcome = train(&cfg, &train_side, seed)?;
                outcome.checkpoint.save(&checkpoint_path(&out, seed))?;
                write_json(&out.join(format!("losses_seed{seed}.json")), &outcome.epoch_losses)?;
                println!(
                    "seed {seed}: {} items, {} steps, final loss {}",
                    train_side.len(),
                    outcome.checkpoint.step,
                    outcome.epoch_losses.last().map_or("n/a".into(), |l| format!("{l:.6}"))
                );
            }
        }
        Command::Evaluate { common, manifest, checkpoint } => {
            let cfg = common.train_config()?;
            let out = common.out_dir()?;
            let data = Dataset::load(&manifest)?;
            let report = evaluate(&cfg, &data, |seed, _| {
                let path = if checkpoint.is_dir() { checkpoint_path(&checkpoint, seed) } else { checkpoint.clone() };
                ModelPredictor::from_checkpoint(&Checkpoint::load(&path)?)
            })?;
            write_json(&out.join("report.json"), &report)?;
            write(&out.join("report.txt"), &report.to_text())?;
            write_json(&out.join("timing.json"), &serde_json::json!({ "duration_secs": report.duration_secs }))?;
            print!("{}", report.to_text());
        }
        Command::Predict { common, checkpoint, image, crops } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let predictor = ModelPredictor::from_checkpoint(&ck)?;
            let img = Image::load(&image)?;
            let crops = crops.unwrap_or(ck.config.test_crops);
            let p = predict(&predictor, &img, crops, common.seed.unwrap_or(0))?;
            let json = serde_json::json!({
                "image": image,
                "score": p.score,
                "mos": ck.denormalize(p.score),
                "crops": crops,
                "crop_scores": p.crop_scores,
                "first_crop": p.first_crop,
            });
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join("prediction.json"), &json)?;
            }
            println!("score {:.6}  mos {:.6}  ({crops} crops)", p.score, ck.denormalize(p.score));
        }
        Command::Visualize { common, checkpoint, image } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let predictor = ModelPredictor::from_checkpoint(&ck)?;
            let img = Image::load(&image)?;
            let (maps, files) = visualize(&predictor, &img, &common.out_dir()?)?;
            println!("{}x{} patch maps, score {:.6}", maps.h, maps.w, maps.score);
            for f in [&files.weight, &files.score, &files.weighted, &files.sidecar] {
                println!("  {}", f.display());
            }
        }
        Command::Ablate { common, manifest, param, values } => {
            let cfg = common.train_config()?;
            let parameter: SweepParam = param.parse()?;
            let values = if !values.is_empty() {
                values
            } else {
                match parameter {
                    SweepParam::Scale => SCALE_SWEEP.iter().map(|s| s.to_string()).collect(),
                    SweepParam::Modules => MODULE_SWEEP.iter().map(|s| s.to_string()).collect(),
                    _ => return Err(Error::Config(format!("--values is required for {parameter}"))),
                }
            };
            let out = common.out_dir()?;
            let data = Dataset::load(&manifest)?;
            let table = ablate(&cfg, &param, &values, &data)?;
            write_json(&out.join("ablation.json"), &table)?;
            write(&out.join("ablation.txt"), &table.to_text())?;
            print!("{}", table.to_text());
        }
        Command::Gradcheck { common } => {
            let report = run_suite(&registered_cases(), &GradCheck::default())?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            print!("{}", report.to_text());
            println!("{} ops in {:.1}s", report.reports.len(), report.seconds);
            if !report.passed {
                let worst = report.worst().expect("a failed suite has reports").clone();
                return worst.into_result().map(|_| ());
            }
        }
        Command::SynthData { common, refs, per_ref, size } => {
            let synth = SynthConfig {
                num_refs: refs,
                distortions_per_ref: per_ref,
                image_size: size,
                seed: common.seed.unwrap_or(0),
                ..SynthConfig::default()
            };
            let out = common.out_dir()?;
            let data = synth_generate(&synth)?;
            export_dataset(&data, &out)?;
            println!("{} items written to {}", data.len(), out.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
