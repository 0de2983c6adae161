use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lwta_meta::active::QueryStrategy;
use lwta_meta::Error;

mod commands;

#[derive(Parser)]
#[command(name = "lwta", version, about = "Meta-learning with stochastic winner-takes-all networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a network and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written every `checkpoint_every` iterations and at exit.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Continue from the checkpoint; flags override its stored config.
        #[arg(long)]
        resume: bool,
        /// Append per-iteration metrics to this CSV file.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Adapt-then-predict on held-out tasks and report mean ± std.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Active learning on sinusoid tasks; writes step,mean_mse,std_mse.
    ActiveLearn {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "max_variance")]
        strategy: QueryStrategy,
        #[arg(long, default_value_t = 50)]
        tasks: usize,
        #[arg(long, default_value_t = 5)]
        initial_points: usize,
        #[arg(long, default_value_t = 5)]
        query_budget: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["block_size", "task_batch", "samples"])]
        axis: String,
        /// Comma-separated values, e.g. 2,4,8.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// Accepted for clarity; the config is always printed.
        #[arg(long)]
        dump: bool,
    },
}

/// Config file plus per-key overrides. Every override is a run config key
/// with dashes for underscores.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    /// Blocks per hidden layer, e.g. 16,8.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long)]
    bias: Option<String>,
    #[arg(long)]
    inner_lr: Option<String>,
    #[arg(long)]
    outer_step: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    task_batch: Option<String>,
    #[arg(long)]
    inner_steps: Option<String>,
    #[arg(long)]
    eval_inner_steps: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Posterior draws averaged per prediction.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    init_log_var_shift: Option<String>,
    #[arg(long)]
    n_way: Option<String>,
    /// Support examples per class (shots).
    #[arg(long)]
    k_shot: Option<String>,
    #[arg(long)]
    query_per_class: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    class_std: Option<String>,
    #[arg(long)]
    dataset_dir: Option<String>,
    #[arg(long)]
    eval_tasks: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Any config key as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let named = [
            ("task", &self.task),
            ("activation", &self.activation),
            ("weights", &self.weights),
            ("blocks", &self.blocks),
            ("block_size", &self.block_size),
            ("bias", &self.bias),
            ("inner_lr", &self.inner_lr),
            ("outer_step", &self.outer_step),
            ("iters", &self.iters),
            ("task_batch", &self.task_batch),
            ("inner_steps", &self.inner_steps),
            ("eval_inner_steps", &self.eval_inner_steps),
            ("tau", &self.tau),
            ("samples", &self.samples),
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("init_log_var_shift", &self.init_log_var_shift),
            ("n_way", &self.n_way),
            ("k_shot", &self.k_shot),
            ("query_per_class", &self.query_per_class),
            ("dim", &self.dim),
            ("class_std", &self.class_std),
            ("dataset_dir", &self.dataset_dir),
            ("eval_tasks", &self.eval_tasks),
            ("eval_every", &self.eval_every),
            ("checkpoint_every", &self.checkpoint_every),
        ];
        let mut pairs: Vec<(String, String)> = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(
            named
                .into_iter()
                .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
        );
        Ok(pairs)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Diverged { .. } | Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            resume,
            metrics_out,
        } => commands::train(
            config.config.as_deref(),
            &config.overrides()?,
            &checkpoint,
            resume,
            metrics_out.as_deref(),
        ),
        Command::Eval { config, checkpoint } => {
            commands::eval(config.config.as_deref(), &config.overrides()?, &checkpoint)
        }
        Command::ActiveLearn {
            config,
            checkpoint,
            strategy,
            tasks,
            initial_points,
            query_budget,
            out,
        } => commands::active_learn(
            config.config.as_deref(),
            &config.overrides()?,
            &checkpoint,
            strategy,
            tasks,
            initial_points,
            query_budget,
            out.as_deref(),
        ),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => commands::sweep(config.config.as_deref(), &config.overrides()?, &axis, &values, out.as_deref()),
        Command::Config { config, dump: _ } => commands::dump_config(config.config.as_deref(), &config.overrides()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
