use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sketchfeat::{BackboneKind, Task, TaskConfig};

mod commands;

#[derive(Parser)]
#[command(name = "sketchfeat", version, about = "Diffusion plus vision-language sketch features")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// TOML file with `key = value` lines; unset keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<Task>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// 1-based diffusion timestep of the extraction pass.
    #[arg(long, global = true)]
    pub timestep: Option<usize>,
    /// mock, mock-tiny or pretrained.
    #[arg(long, global = true)]
    pub backbone: Option<BackboneKind>,
    #[arg(long, global = true)]
    pub weights_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub d_agg: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr", global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub no_aggregation_net: bool,
    #[arg(long, global = true)]
    pub frozen_equal_weights: bool,
    #[arg(long, global = true)]
    pub no_1d_convs: bool,
    /// Leave the coarsest UNet level without injection.
    #[arg(long, global = true)]
    pub no_inject_level4: bool,
    #[arg(long, global = true)]
    pub no_injection: bool,

    /// Dataset root laid out as `<root>/<split>/<class>/{photos,sketches,masks}`.
    #[arg(long, global = true, conflicts_with = "toy")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, default_value = "train")]
    pub split: String,
    /// Use the built-in synthetic set for the task instead of `--data`.
    #[arg(long, global = true)]
    pub toy: bool,
}

impl RunArgs {
    /// Applies the command-line overrides on top of `base`.
    pub fn apply(&self, mut c: TaskConfig) -> sketchfeat::Result<TaskConfig> {
        if let Some(v) = self.task {
            c.task = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.timestep {
            c.timestep = v;
        }
        if let Some(v) = self.backbone {
            c.backbone = v;
        }
        if let Some(v) = &self.weights_dir {
            c.weights_dir = Some(v.clone());
        }
        if let Some(v) = self.image_size {
            c.image_size = v;
        }
        if let Some(v) = self.d_agg {
            c.d_agg = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        c.no_aggregation_net |= self.no_aggregation_net;
        c.frozen_equal_weights |= self.frozen_equal_weights;
        c.no_1d_convs |= self.no_1d_convs;
        c.no_injection |= self.no_injection;
        if self.no_inject_level4 {
            c.inject_level4 = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract fused feature maps for every sample into a cache directory.
    Extract {
        #[arg(long)]
        cache: PathBuf,
        /// Use trained parameters instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train adapters, aggregator and task head; writes a checkpoint and a loss log.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// PCA images, spectra and LF/HF ratios of plain and injected features.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        /// UNet level 1 to 4, or `fused` for the aggregated map.
        #[arg(long, default_value = "2")]
        level: commands::Level,
        /// Number of sketches and of photos to analyze.
        #[arg(long, default_value_t = 2)]
        limit: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the full model and each ablation toggle.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate on; defaults to the training split.
        #[arg(long)]
        eval_split: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Extract { cache, checkpoint } => commands::extract(&cli.run, cache, checkpoint.as_deref()),
        Command::Train { out } => commands::train(&cli.run, out),
        Command::Eval {
            checkpoint,
            cache,
            report,
        } => commands::eval(&cli.run, checkpoint, cache.as_deref(), report.as_deref()),
        Command::Analyze {
            out,
            level,
            limit,
            checkpoint,
        } => commands::analyze(&cli.run, out, *level, *limit, checkpoint.as_deref()),
        Command::Ablate { out, eval_split } => commands::ablate(&cli.run, out, eval_split.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
