use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geossl::geom::serialize_xyz;
use geossl::harness::data::{labels_to_csv, read_labels_file, read_xyz_file};
use geossl::harness::{
    generate_synthetic_conformers, run_finetune, run_pretrain, Checkpoint, LabeledSet, MetricsWriter, Objective,
    TrainingConfig,
};
use geossl::{Error, Result};

const SEED_VAR: &str = "GEOSSL_SEED";

#[derive(Parser)]
#[command(
    name = "geossl",
    version,
    about = "Distance-denoising pretraining for molecular encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder on the configured dataset.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune on labeled conformers and report the test MAE.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write perturbed copies of a template and their surrogate labels.
    GenData {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Run the invariant and oracle suite.
    Check,
}

fn load_config(path: &Path) -> Result<TrainingConfig> {
    let mut config = TrainingConfig::from_file(path)?;
    if let Ok(v) = std::env::var(SEED_VAR) {
        config.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("{SEED_VAR} must be an unsigned integer, got {v:?}")))?;
    }
    config.validate()?;
    Ok(config)
}

fn dataset_path(config: &TrainingConfig) -> Result<PathBuf> {
    config
        .dataset
        .as_deref()
        .map(|p| config.resolve(p))
        .ok_or_else(|| Error::InvalidInput("config has no dataset".into()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretrain(config: &Path, out: &Path, metrics: &Path, resume: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let dataset = match config.objective {
        Objective::None => Vec::new(),
        _ => read_xyz_file(&dataset_path(&config)?)?,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    let levels = if config.objective == Objective::Ddm {
        config.levels
    } else {
        0
    };
    let mut writer = MetricsWriter::create(metrics, levels)?;
    let ck = run_pretrain(&config, &dataset, resume.as_ref(), &mut |row| writer.push(row))?;
    writer.finish()?;
    ck.save(out)?;
    println!("pretrained {} steps, checkpoint {}", ck.step, out.display());
    Ok(())
}

fn finetune(config: &Path, init: Option<&Path>, metrics: &Path, out: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let conformers = read_xyz_file(&dataset_path(&config)?)?;
    let labels_path = config
        .labels
        .as_deref()
        .map(|p| config.resolve(p))
        .ok_or_else(|| Error::InvalidInput("config has no labels".into()))?;
    let data = LabeledSet {
        conformers,
        labels: read_labels_file(&labels_path)?,
    };
    let init = init.map(Checkpoint::load).transpose()?;
    let mut writer = MetricsWriter::create(metrics, 0)?;
    let outcome = run_finetune(&config, init.as_ref(), &data, &mut |row| writer.push(row))?;
    writer.finish()?;
    if let Some(out) = out {
        outcome.checkpoint.save(out)?;
    }
    println!("val_mae {}", outcome.val_mae);
    println!("test_mae {}", outcome.test_mae);
    Ok(())
}

fn gen_data(template: &Path, count: usize, sigma: f64, seed: u64, out: &Path, labels: &Path) -> Result<()> {
    let template = read_xyz_file(template)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput("template file has no molecule".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = generate_synthetic_conformers(&template, count, sigma, &mut rng)?;
    write_file(out, &serialize_xyz(&set.conformers))?;
    write_file(labels, &labels_to_csv(&set.labels))?;
    println!("wrote {count} conformers to {}", out.display());
    Ok(())
}

fn check() -> Result<bool> {
    let results = geossl::check::run_checks();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            metrics,
            resume,
        } => pretrain(&config, &out, &metrics, resume.as_deref()).map(|_| true),
        Command::Finetune {
            config,
            init,
            metrics,
            out,
        } => finetune(&config, init.as_deref(), &metrics, out.as_deref()).map(|_| true),
        Command::GenData {
            template,
            count,
            sigma,
            seed,
            out,
            labels,
        } => gen_data(&template, count, sigma, seed, &out, &labels).map(|_| true),
        Command::Check => check(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("geossl: {msg}");
            ExitCode::from(2)
        }
    }
}
