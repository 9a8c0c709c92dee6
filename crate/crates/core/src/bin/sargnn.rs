//! Command-line front end: dataset synthesis, training, evaluation,
//! pruning, threshold sweeps, cost reports, and gradient checking.
//!
//! Logs go to stderr; machine-readable output (TSV tables, config dumps)
//! goes to stdout or files. Exit codes: 0 success, 2 usage error,
//! 3 data/checkpoint error, 4 divergence, 5 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sargnn::checkpoint;
use sargnn::config::RunConfig;
use sargnn::cost::{count_flops, full_grid_stats, survival_stats};
use sargnn::data::{generate_synthetic, load_dataset, SynthSpec};
use sargnn::graph::ImageSample;
use sargnn::model::{gradient_check, ParameterSet};
use sargnn::pruning::{prune_weights, sweep, SWEEP_HEADER};
use sargnn::train::{evaluate, few_shot_train, train};
use sargnn::Error;

#[derive(Parser)]
#[command(name = "sargnn", version, about = "Sparse-image grid-graph GNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --set epochs=20. Repeatable;
    /// overrides values from --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> sargnn::Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            run.set(k.trim(), v.trim())?;
        }
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset with train/test manifests.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 375)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the best-validation checkpoint plus a
    /// tab-separated epoch history.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a manifest; prints accuracy and the
    /// confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate on (defaults to the checkpoint's
        /// test_manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        iv: Option<f64>,
    },
    /// Apply a weight-magnitude threshold to a checkpoint and save the
    /// sparsified result.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iw: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-product sweep over input and weight thresholds; TSV to stdout.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated input thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1")]
        iv: Vec<f64>,
        /// Comma-separated weight thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01,0.1")]
        iw: Vec<f64>,
    },
    /// Per-layer FLOP and parameter report for a configuration or
    /// checkpoint. With a manifest, counts reflect average live graphs
    /// at the configured input threshold; otherwise the full grid.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences on a random
    /// sample. Exits 5 if the relative error exceeds the tolerance.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Run the 2-way-K-shot protocol on a two-class manifest.
    FewShot {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
    /// Print the active configuration (or the defaults) to stdout.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        print_default: bool,
    },
}


/// stdout writes tolerate a closed pipe (e.g. piping into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! out_raw {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn load_manifest_samples(path: &PathBuf) -> sargnn::Result<Vec<ImageSample>> {
    let (_, samples) = load_dataset(path)?;
    Ok(samples)
}

fn random_sample(run: &RunConfig, seed: u64) -> sargnn::Result<ImageSample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = run.grid_size * run.grid_size * run.channels;
    let values: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.2..1.5) } else { 0.0 })
        .collect();
    ImageSample::new(run.grid_size, run.grid_size, run.channels, values, 0)
}

fn run(command: Command) -> sargnn::Result<ExitCode> {
    match command {
        Command::Synth {
            out_dir,
            classes,
            samples_per_class,
            side,
            channels,
            seed,
        } => {
            let spec = SynthSpec {
                num_classes: classes,
                samples_per_class,
                side,
                channels,
                seed,
                ..SynthSpec::default()
            };
            let (train_m, test_m) = generate_synthetic(&spec, &out_dir)?;
            out!("{}", train_m.display());
            out!("{}", test_m.display());
        }
        Command::Train(args) => {
            let run = args.resolve()?;
            let train_manifest = run
                .train_manifest
                .clone()
                .ok_or_else(|| Error::Config("train requires train_manifest".into()))?;
            let train_set = load_manifest_samples(&train_manifest)?;
            let val_set = match &run.test_manifest {
                Some(p) => load_manifest_samples(p)?,
                None => Vec::new(),
            };
            let config = run.model_config()?;
            let hyper = run.hyper();
            let outcome = train(&config, &hyper, &train_set, &val_set, run.iv, |rec| {
                eprintln!("{}", rec.log_line());
            })?;
            let out_dir = run.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out_dir)?;
            let ckpt_path = run
                .checkpoint
                .clone()
                .unwrap_or_else(|| out_dir.join("model.ckpt"));
            checkpoint::save(&ckpt_path, &run, run.epochs, &outcome.best_params)?;
            let mut history = String::from("epoch\tlr\ttrain_loss\ttrain_acc\tval_acc\n");
            for rec in &outcome.history {
                history.push_str(&rec.tsv_line());
                history.push('\n');
            }
            std::fs::write(out_dir.join("history.tsv"), history)?;
            eprintln!(
                "best_val_acc={} checkpoint={}",
                outcome.best_val_acc,
                ckpt_path.display()
            );
        }
        Command::Eval {
            checkpoint: ckpt_path,
            manifest,
            iv,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let manifest = manifest
                .or_else(|| ckpt.run.test_manifest.clone())
                .ok_or_else(|| Error::Config("eval requires a manifest".into()))?;
            let samples = load_manifest_samples(&manifest)?;
            let config = ckpt.run.model_config()?;
            let iv = iv.unwrap_or(ckpt.run.iv);
            let (acc, confusion) =
                evaluate(&config, &ckpt.params, &samples, iv, ckpt.run.workers)?;
            out!("accuracy\t{acc}");
            for (true_class, row) in confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                out!("confusion[{true_class}]\t{}", cells.join("\t"));
            }
        }
        Command::Prune {
            checkpoint: ckpt_path,
            iw,
            out,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let (pruned, stats) = prune_weights(&ckpt.params, iw);
            checkpoint::save(&out, &ckpt.run, ckpt.epoch, &pruned)?;
            out!("tensor\tpruned_fraction");
            for (name, frac) in &stats.per_matrix {
                out!("{name}\t{frac}");
            }
            out!("total\t{}", stats.pruned_fraction());
        }
        Command::Sweep {
            checkpoint: ckpt_path,
            manifest,
            iv,
            iw,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let manifest = manifest
                .or_else(|| ckpt.run.test_manifest.clone())
                .ok_or_else(|| Error::Config("sweep requires a manifest".into()))?;
            let samples = load_manifest_samples(&manifest)?;
            let config = ckpt.run.model_config()?;
            let rows = sweep(&config, &ckpt.params, &samples, &iv, &iw)?;
            out!("{SWEEP_HEADER}");
            for row in rows {
                out!("{}", row.tsv_line());
            }
        }
        Command::Flops {
            config: args,
            checkpoint: ckpt_path,
            manifest,
        } => {
            let (run, params) = match ckpt_path {
                Some(p) => {
                    let ckpt = checkpoint::load(&p)?;
                    (ckpt.run, ckpt.params)
                }
                None => {
                    let run = args.resolve()?;
                    let config = run.model_config()?;
                    let params = ParameterSet::init(&config, run.seed);
                    (run, params)
                }
            };
            let config = run.model_config()?;
            let stats = match manifest.or_else(|| run.test_manifest.clone()) {
                Some(m) => survival_stats(&config, &load_manifest_samples(&m)?, run.iv)?,
                None => full_grid_stats(&config)?,
            };
            let sparse = params.tensors().iter().any(|(_, m)| m.mask.is_some());
            let report = count_flops(&config, &stats, &params, sparse)?;
            out_raw!("{}", report.text());
        }
        Command::Gradcheck {
            config: args,
            epsilon,
            tolerance,
            coords,
        } => {
            let run = args.resolve()?;
            let config = run.model_config()?;
            let params = ParameterSet::init(&config, run.seed);
            let sample = random_sample(&run, run.seed.wrapping_add(1))?;
            let max_rel = gradient_check(
                &config, &params, &sample, run.iv, epsilon, coords, run.seed,
            )?;
            out!("max_rel_error\t{max_rel}");
            if max_rel > tolerance {
                eprintln!("gradient check failed: {max_rel} > {tolerance}");
                return Ok(ExitCode::from(5));
            }
        }
        Command::FewShot {
            config: args,
            k,
            episodes,
            epochs,
        } => {
            let run = args.resolve()?;
            let manifest = run
                .train_manifest
                .clone()
                .ok_or_else(|| Error::Config("few-shot requires train_manifest".into()))?;
            let pool = load_manifest_samples(&manifest)?;
            let config = run.model_config()?;
            let outcome = few_shot_train(
                &config, k, &pool, episodes, epochs, run.iv, run.seed, run.workers,
            )?;
            out!("k\tmean_acc\tstd_acc");
            out!(
                "{}\t{}\t{}",
                outcome.k, outcome.mean_accuracy, outcome.std_accuracy
            );
        }
        Command::Config {
            config: args,
            print_default,
        } => {
            let run = if print_default {
                RunConfig::default()
            } else {
                args.resolve()?
            };
            out_raw!("{}", run.serialize());
        }
    }
    Ok(ExitCode::SUCCESS)
}
