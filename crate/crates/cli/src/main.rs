use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use focusft::bilevel::Mode;
use focusft::config::{parse_values, Preset, SweepAxis};
use focusft::diagnostics::QuerySet;
use focusft_cli::analyze::AnalyzeOptions;
use focusft_cli::{exit_code, load_checkpoint, load_samples, ConfigSource, Result, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "focusft", version, about = "Bilevel fast-weight fine-tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Toy,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// standard_sft, sft_bidir, causal_bilevel or focusft.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn source(&self) -> Result<ConfigSource> {
        Ok(ConfigSource {
            preset: self.preset.map(|p| match p {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Toy => Preset::Toy,
            }),
            config: self.config.clone(),
            seed: self.seed,
            mode: self.mode.as_deref().map(str::parse::<Mode>).transpose()?,
            out: self.out.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy-decode accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory or a run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples as JSONL; defaults to the config's eval split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attention diagnostics under both masks.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Heatmap layer, 0-based; defaults to the middle layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// One run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// layer_fraction, K or eta_in.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Parse and validate a config, then print its canonical form.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.source()?.resolve()?;
            let outcome = focusft_cli::train::run(&cfg)?;
            let s = &outcome.summary;
            println!(
                "{} steps, loss {:.4} -> {:.4}, eval accuracy {}, run dir {}",
                s.steps,
                s.initial_loss,
                s.final_loss,
                s.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.3}")),
                outcome.dir.display()
            );
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = common.source()?.resolve()?;
            let weights = load_checkpoint(&checkpoint)?;
            let samples = load_samples(data.as_deref(), &cfg)?;
            let out = common.out.unwrap_or_else(|| checkpoint.join("eval"));
            let summary = focusft_cli::eval::run(&weights, &samples, cfg.depth_bins, &out)?;
            println!("accuracy {:.4} over {} samples", summary.accuracy, summary.n);
            for b in &summary.depth_bins {
                let acc = b.accuracy.map_or("n/a".into(), |a| format!("{a:.3}"));
                println!("  depth {}: {acc} ({}/{})", b.label, b.correct, b.n);
            }
            println!("report in {}", out.display());
        }
        Command::Analyze { common, checkpoint, data, layer } => {
            let cfg = common.source()?.resolve()?;
            let weights = load_checkpoint(&checkpoint)?;
            let samples = load_samples(data.as_deref(), &cfg)?;
            let out = common.out.unwrap_or_else(|| checkpoint.join("analysis"));
            let opts = AnalyzeOptions {
                queries: if cfg.all_queries { QuerySet::All } else { QuerySet::Response },
                layer,
                ..AnalyzeOptions::default()
            };
            let a = focusft_cli::analyze::run(&weights, &samples, &out, &opts)?;
            println!(
                "sink mass causal {:.4}, focusft {:.4}; context engagement causal {:.4}, focusft {:.4}",
                a.causal.sink_mass_mean, a.focusft.sink_mass_mean, a.causal.context_engagement, a.focusft.context_engagement
            );
            println!("figures in {}", out.display());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.source()?.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let values = parse_values(&values)?;
            let out = cfg.out_dir.join(format!("sweep-{}", axis.name()));
            let rows = focusft_cli::sweep::run(&cfg, axis, &values, &out)?;
            for r in rows {
                let acc = r.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.3}"));
                println!("{}={}: final loss {:.4}, eval accuracy {acc}", axis.name(), r.value, r.final_loss);
            }
        }
        Command::ValidateConfig { common } => {
            let cfg = common.source()?.resolve()?;
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
