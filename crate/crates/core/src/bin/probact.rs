use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use probact::experiment::{
    checkpoint_path, evaluate_checkpoint, export_k_histogram, export_sigma_trajectory, load_metrics,
    run_reduced_data_suite, run_training, swap_activation, ActivationConfig, HistSpace, RunConfig, Seeds,
};
use probact::nn::{Activation, EvalMode};
use probact::optim::Checkpoint;
use probact::{Error, Result};

#[derive(Parser)]
#[command(
    name = "probact",
    version,
    about = "Train and evaluate networks with stochastic activations"
)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, telemetry and a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Replace the activation of a checkpoint (ReLU by default).
    Swap(SwapArgs),
    /// Train ReLU and the configured activation on stratified subsets.
    ReducedSuite(SuiteArgs),
    /// Write sigma trajectories or parameter histograms.
    Export(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the CIFAR binary files.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; every seed stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    subset_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// stochastic | mean | mc:<n>
    #[arg(long)]
    eval_mode: Option<EvalMode>,
    /// relu | leaky | prelu | swish | probact:<fixed|single|unbound|bounded>
    #[arg(long)]
    activation: Option<String>,
    /// Noise scale for probact:fixed.
    #[arg(long)]
    sigma: Option<f64>,
    /// Upper bound of the bounded mode [default: 2].
    #[arg(long)]
    alpha: Option<f64>,
    /// Slope of the bounded mode [default: 5].
    #[arg(long)]
    beta: Option<f64>,
    /// Dropout probability before the classifier.
    #[arg(long)]
    dropout: Option<f64>,
    /// vgg16 | vgg-lite | mlp | [token,list]
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stratified fraction of the training split.
    #[arg(long)]
    fraction: Option<f64>,
    /// Base learning rate of the step schedule.
    #[arg(long)]
    lr: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset_dir {
            cfg.dataset.set_dir(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_base(s);
        }
        let seeds = &mut cfg.seeds;
        for (dst, src) in [
            (&mut seeds.weights, self.weight_seed),
            (&mut seeds.noise, self.noise_seed),
            (&mut seeds.subset, self.subset_seed),
            (&mut seeds.shuffle, self.shuffle_seed),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(m) = self.eval_mode {
            cfg.eval_mode = m;
        }
        if let Some(a) = &self.activation {
            cfg.activation.name = a.clone();
        }
        if self.sigma.is_some() {
            cfg.activation.sigma = self.sigma;
        }
        if let Some(a) = self.alpha {
            cfg.activation.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.activation.beta = b;
        }
        if self.dropout.is_some() {
            cfg.dropout = self.dropout.filter(|p| *p > 0.0);
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(f) = self.fraction {
            cfg.fraction = f;
        }
        if let Some(lr) = self.lr {
            cfg.schedule.base = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration for the dataset; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long, default_value = "stochastic")]
    eval_mode: EvalMode,
    /// Noise seed; defaults to the training noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// test | train
    #[arg(long, default_value = "test")]
    split: String,
    /// Number of independent evaluations to report.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path of the new checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "relu")]
    activation: String,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Extra activations trained alongside ReLU and the configured one, e.g. `probact:fixed=1`.
    #[arg(long, value_delimiter = ',')]
    also: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// `sigma` (trajectory from a run directory) or `k-hist` (histograms from a checkpoint).
    what: String,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// k | sigma
    #[arg(long, default_value = "k")]
    space: HistSpace,
    /// Output file (sigma) or directory (k-hist); defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_activation_arg(s: &str, base: &ActivationConfig) -> ActivationConfig {
    let mut a = base.clone();
    match s.split_once('=') {
        Some((name, sigma)) => {
            a.name = name.into();
            a.sigma = sigma.parse().ok();
        }
        None => a.name = s.into(),
    }
    a
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = run_training(&cfg)?;
            if let Some(last) = outcome.metrics.final_epoch() {
                println!(
                    "final epoch {}: train acc {:.2}, test acc {:.2}, gamma {:.2}",
                    last.epoch, last.train_acc, last.test_acc, outcome.metrics.gamma
                );
            }
            if cfg.out_dir.is_none() {
                println!("no --out given; nothing written");
            }
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let mut cfg = match &args.config {
                Some(p) => RunConfig::from_file(p)?,
                None => serde_json::from_value(ckpt.meta.run.clone()).map_err(|e| {
                    Error::Config(format!("checkpoint carries no usable run config ({e}); pass --config"))
                })?,
            };
            if let Some(d) = &args.dataset_dir {
                cfg.dataset.set_dir(d.clone());
            }
            let (train, test) = cfg.load_data()?;
            let data = match args.split.as_str() {
                "test" => test,
                "train" => train,
                s => return Err(Error::Argument(format!("unknown split '{s}'"))),
            };
            let seed = args.seed.unwrap_or(ckpt.meta.noise_seed);
            for r in 0..args.repeats.max(1) {
                let res = evaluate_checkpoint(&ckpt, &data, args.eval_mode, seed, (1 << 20) + r, cfg.eval_batch_size)?;
                println!(
                    "eval {r} ({}): accuracy {:.4} loss {:.6}",
                    args.eval_mode, res.accuracy, res.loss
                );
            }
        }
        Command::Swap(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let act = Activation::parse(&args.activation, None, 2.0, 5.0)?;
            swap_activation(&ckpt, act)?.save(&args.out)?;
            println!("wrote {}", args.out.display());
        }
        Command::ReducedSuite(args) => {
            let cfg = args.run.resolve()?;
            let mut acts = vec![ActivationConfig::named("relu")];
            if cfg.activation.name != "relu" {
                acts.push(cfg.activation.clone());
            }
            acts.extend(args.also.iter().map(|s| parse_activation_arg(s, &cfg.activation)));
            let out = cfg.out_dir.clone();
            let summary = run_reduced_data_suite(&cfg, &args.fractions, args.repeats, &acts, out.as_deref())?;
            println!("fraction,activation,mean_test_acc,mean_gamma");
            for c in &summary.cells {
                println!(
                    "{},{},{:.3},{:.3}",
                    c.fraction, c.activation, c.mean_test_acc, c.mean_gamma
                );
            }
        }
        Command::Export(args) => match args.what.as_str() {
            "sigma" => {
                let metrics = load_metrics(&args.run)?;
                let out = args.out.unwrap_or_else(|| args.run.join("sigma_trajectory.csv"));
                export_sigma_trajectory(&metrics, &out)?;
                println!("wrote {}", out.display());
            }
            "k-hist" | "khist" => {
                let ckpt = Checkpoint::load(&checkpoint_path(&args.run))?;
                let out = args.out.unwrap_or_else(|| args.run.clone());
                for p in export_k_histogram(&ckpt, args.bins, args.space, Path::new(&out))? {
                    println!("wrote {}", p.display());
                }
            }
            s => {
                return Err(Error::Argument(format!(
                    "unknown export '{s}' (expected sigma or k-hist)"
                )))
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
