use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use bhmaml::episodes::{load_image_dataset, make_synthetic, write_csv_dataset, Split, SyntheticKind, SyntheticSpec};
use bhmaml::error::Error;
use bhmaml::eval::{
    evaluate, ood_episode_samples, ood_experiment, AdaptOptions, EvalOptions, OodOptions, SampleMatrix,
};
use bhmaml::gradcheck;
use bhmaml::meta::{train, validation_seed, Checkpoint, EpochRecord};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bhmaml", version, about = "Bayesian hypernetwork meta-learning for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Blobs,
    Rings,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default `runs/<timestamp>`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Accuracy over sampled episodes of one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        /// Tune a copy of the hypernetwork on each support set for this many steps.
        #[arg(long)]
        adapt: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        adapt_lr: f64,
        /// Posterior draws per episode (default from the run configuration).
        #[arg(long)]
        p_eval: Option<usize>,
        /// Episode seed (default: the run's validation seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Predictive uncertainty on in-distribution and out-of-distribution queries.
    Uncertainty {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory, e.g. written by `make-data --kind rings`.
        #[arg(long)]
        ood_dataset: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and episode loss.
    Gradcheck,
    /// Write a synthetic dataset as one CSV file per example.
    MakeData {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long)]
        ring_step: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn out_dir(given: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = given.unwrap_or_else(|| {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        PathBuf::from("runs").join(format!("{}-{:03}", now.as_secs(), now.subsec_millis()))
    });
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)?;
    Ok(())
}

fn run_train(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    if !config.is_file() {
        return Err(usage(format!("config not found: {}", config.display())));
    }
    let cfg = bhmaml::meta::RunConfig::load(config)?;
    let data = cfg.data.load()?;
    let dir = out_dir(out)?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let mut log = String::from("epoch,lr,gamma,train_loss,val_accuracy,val_ci95\n");
    let report = train(&cfg, &data, Some(&dir), |r: &EpochRecord| {
        println!(
            "epoch {:>4}  lr {:.2e}  gamma {:.2e}  loss {:.4}  val {:.4} ± {:.4}",
            r.epoch, r.lr, r.gamma, r.train_loss, r.val_accuracy, r.val_ci95
        );
        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.gamma, r.train_loss, r.val_accuracy, r.val_ci95
        ));
    })?;
    write(&dir.join("train_log.csv"), log)?;
    if let Some(last) = report.history.last() {
        println!(
            "final validation accuracy {:.4} ± {:.4} over {} episodes",
            last.val_accuracy, last.val_ci95, cfg.train.val_episodes
        );
    }
    println!("checkpoints written to {}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    ckpt: &Path,
    split: Split,
    episodes: usize,
    adapt: Option<usize>,
    adapt_lr: f64,
    p_eval: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = &ck.config;
    let data = cfg.data.load()?;
    let opts = EvalOptions {
        split,
        n_episodes: episodes,
        p_eval: p_eval.unwrap_or_else(|| cfg.train.p_eval()),
        seed: seed.unwrap_or_else(|| validation_seed(cfg)),
        adapt: adapt.map(|steps| AdaptOptions { steps, lr: adapt_lr }),
    };
    let report = evaluate(cfg, &ck.model, &data, &opts)?;
    let dir = out_dir(out)?;
    write(&dir.join("eval.csv"), report.to_csv())?;
    write(
        &dir.join("eval.json"),
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    println!(
        "{} accuracy {:.4} ± {:.4} over {} episodes",
        split.as_str(),
        report.accuracy_mean,
        report.ci95,
        report.n_episodes
    );
    Ok(())
}

fn run_uncertainty(
    ckpt: &Path,
    ood_path: &Path,
    opts: OodOptions,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    if !ood_path.is_dir() {
        return Err(usage(format!("dataset not found: {}", ood_path.display())));
    }
    let cfg = &ck.config;
    let data = cfg.data.load()?;
    let ood = load_image_dataset(ood_path)?;
    let report = ood_experiment(cfg, &ck.model, &data, &ood, &opts)?;
    let (a, b) = ood_episode_samples(cfg, &ck.model, &data, &ood, &opts, 0)?;
    let dir = out_dir(out)?;
    write(&dir.join("uncertainty.csv"), report.to_csv())?;
    let mut samples = SampleMatrix::csv_header(cfg.train.n_way);
    samples.push_str(&a.csv_rows("id"));
    samples.push_str(&b.csv_rows("ood"));
    write(&dir.join("samples.csv"), samples)?;
    let summary = serde_json::json!({
        "episodes": opts.n_episodes,
        "samples": opts.samples,
        "mean_in_entropy": report.mean_in_entropy(),
        "mean_ood_entropy": report.mean_ood_entropy(),
        "wins": report.wins,
        "trials": report.trials,
        "p_value": report.p_value,
    });
    write(
        &dir.join("uncertainty.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    println!(
        "mean predictive entropy: in-distribution {:.4}, out-of-distribution {:.4}",
        report.mean_in_entropy(),
        report.mean_ood_entropy()
    );
    println!(
        "out-of-distribution higher in {}/{} episodes, sign test p = {:.3e}",
        report.wins, report.trials, report.p_value
    );
    Ok(())
}

fn run_gradcheck() -> Result<(), Failure> {
    let results = gradcheck::suite()?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<40} {:.3e}  {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAILED" });
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (eps {:e}, tolerance {:e})", gradcheck::EPS, gradcheck::TOLERANCE);
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "gradient check failed".into(),
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out_dir } => run_train(&config, out_dir),
        Command::Eval {
            ckpt,
            split,
            episodes,
            adapt,
            adapt_lr,
            p_eval,
            seed,
            out_dir,
        } => run_eval(&ckpt, split.into(), episodes, adapt, adapt_lr, p_eval, seed, out_dir),
        Command::Uncertainty {
            ckpt,
            ood_dataset,
            samples,
            episodes,
            split,
            seed,
            out_dir,
        } => run_uncertainty(
            &ckpt,
            &ood_dataset,
            OodOptions {
                split: split.into(),
                n_episodes: episodes,
                samples,
                seed,
            },
            out_dir,
        ),
        Command::Gradcheck => run_gradcheck(),
        Command::MakeData {
            kind,
            out,
            classes,
            dim,
            per_class,
            spread,
            separation,
            ring_step,
            seed,
        } => {
            let spec = SyntheticSpec {
                kind: match kind {
                    KindArg::Blobs => SyntheticKind::Blobs,
                    KindArg::Rings => SyntheticKind::Rings,
                },
                separation,
                ring_step,
                ..SyntheticSpec::blobs(classes, dim, per_class, spread, seed)
            };
            let data = make_synthetic(&spec)?;
            write_csv_dataset(&data, &out)?;
            write(
                &out.join("spec.json"),
                serde_json::to_string_pretty(&spec).map_err(Error::from)?,
            )?;
            println!("{} classes written to {}", data.n_classes(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
