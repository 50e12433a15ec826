use acorm::config::{TargetUpdateMode, TrainConfig, Variant};
use acorm::env::Preset;
use acorm::harness;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "acorm",
    version,
    about = "Train, ablate and inspect ACORM agents on RoleArena"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rerun the job described by a run manifest instead of building a config.
        #[arg(long, conflicts_with = "config")]
        from_manifest: Option<PathBuf>,
    },
    /// Run the ablation suite and write a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variant names (default: all five).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Export embeddings, clusters, attention and grid snapshots for one greedy episode.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long, env = "ACORM_OUTPUT_ROOT", default_value = "runs")]
        out: PathBuf,
    },
    /// Train once per cluster count.
    SweepK {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated cluster counts.
        #[arg(long = "k", value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment preset used when no config file is given.
    #[arg(long)]
    preset: Option<Preset>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Output root.
    #[arg(long, env = "ACORM_OUTPUT_ROOT", default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    cluster_k: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    contrastive_learning_rate: Option<f64>,
    #[arg(long)]
    epsilon_decay_steps: Option<u64>,
    #[arg(long)]
    evaluate_interval: Option<u64>,
    #[arg(long)]
    evaluate_episodes: Option<usize>,
    #[arg(long)]
    contrastive_interval: Option<u64>,
    #[arg(long, value_parser = parse_target_mode)]
    target_update: Option<TargetUpdateMode>,
    #[arg(long)]
    use_contrastive: Option<bool>,
    #[arg(long)]
    use_attention: Option<bool>,
    #[arg(long)]
    use_state_encoding: Option<bool>,
    /// Apply a named ablation variant's switches.
    #[arg(long)]
    variant: Option<String>,
    /// Arbitrary `dotted.key=value` overrides, applied last.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

fn parse_target_mode(s: &str) -> Result<TargetUpdateMode, String> {
    match s {
        "soft" => Ok(TargetUpdateMode::Soft),
        "hard" => Ok(TargetUpdateMode::Hard),
        _ => Err(format!("expected soft or hard, got {s:?}")),
    }
}

impl ConfigArgs {
    fn build(&self) -> acorm::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => harness::load_config(path)?,
            None => TrainConfig::with_preset(self.preset.unwrap_or(Preset::Default)),
        };
        if let (Some(p), Some(_)) = (self.preset, &self.config) {
            c.env = p.config();
        }
        if let Some(v) = &self.variant {
            v.parse::<Variant>()?.apply(&mut c);
        }
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { c.$target = v; })*
            };
        }
        set!(
            cluster_k => cluster_k,
            total_steps => total_env_steps,
            batch_size => batch_size,
            learning_rate => learning_rate,
            contrastive_learning_rate => contrastive_learning_rate,
            epsilon_decay_steps => epsilon_decay_steps,
            evaluate_interval => evaluate_interval,
            evaluate_episodes => evaluate_episodes,
            contrastive_interval => contrastive_interval,
            target_update => target_update_mode,
            use_contrastive => use_contrastive,
            use_attention => use_attention,
            use_state_encoding => use_state_encoding,
        );
        for o in &self.overrides {
            c = harness::apply_override(&c, o)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> acorm::Result<()> {
    match cli.command {
        Command::Train { config, from_manifest } => {
            let results = match from_manifest {
                Some(m) => harness::rerun_manifest(&m, &config.out)?,
                None => harness::train_seeds("train", &config.build()?, &config.seeds, &config.out)?,
            };
            for r in results {
                println!(
                    "seed {}: {} env steps, final test win rate {:.3} ({})",
                    r.seed,
                    r.summary.env_steps,
                    r.summary.final_win_rate().unwrap_or(f64::NAN),
                    r.dir.display()
                );
            }
        }
        Command::Ablate { config, variants } => {
            let base = config.build()?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<acorm::Result<_>>()?
            };
            let rows = harness::ablate(&base, &variants, &config.seeds, &config.out)?;
            println!("{}", harness::COMPARISON_HEADER);
            for r in rows {
                println!(
                    "{},{},{:.3},{:.3},{:.3},{:.3}",
                    r.variant, r.seed, r.final_win_rate, r.mean, r.ci_low, r.ci_high
                );
            }
        }
        Command::Diagnose {
            checkpoint,
            preset,
            episode_seed,
            out,
        } => {
            let d = harness::diagnose(&checkpoint, preset, episode_seed, Some(&out))?;
            println!(
                "{} steps, won {}, labels change over time: {} ({})",
                d.metadata.steps,
                d.metadata.won,
                d.labels_change(),
                out.display()
            );
        }
        Command::SweepK { config, ks } => {
            let rows = harness::sweep_k(&config.build()?, &ks, &config.seeds, &config.out)?;
            println!("k,seed,step,test_win_rate");
            for r in rows {
                println!("{},{},{},{:.3}", r.k, r.seed, r.step, r.value);
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let report = harness::evaluate_checkpoint(&checkpoint, episodes, seed)?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
