use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fgmine::config::{resolve, RunConfig};
use fgmine::runner::{
    analysis_params, cmd_ablate, cmd_embed_analysis, cmd_gen_data, cmd_train, prepare, TrainOptions, RUN_ROOT_ENV,
};
use fgmine::world::Split;
use fgmine::{Error, Result};

#[derive(Parser)]
#[command(name = "fgmine", version, about = "Fine-grained negative mining for path-instruction ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and its seen/unseen episode files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Directory written by gen-data. Without it the data is generated
        /// from the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write every BO trial to bo_trials.jsonl.
        #[arg(long)]
        dump_bo: bool,
        /// Write every outer candidate set to negatives.jsonl.
        #[arg(long)]
        dump_negatives: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the selector ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Also sweep the sync period over 1, 4, 16 and inf.
        #[arg(long)]
        sync_sweep: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embedding distance report and 2-D projection for one encoder.
    EmbedAnalysis {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to analyse; the untrained initialization if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "unseen")]
        split: String,
        /// Episodes to analyse (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the resolved configuration as key=value lines.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Configuration layers shared by every command. Typed flags are shorthands
/// for `--set section.key=value` and are applied after it.
#[derive(Args)]
struct ConfigArgs {
    /// Training preset: fgvln or baseline.
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. --set train.lr=0.02 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// World seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training seed.
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    n_houses_seen: Option<String>,
    #[arg(long)]
    n_houses_unseen: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// BO iterations per inner session.
    #[arg(long)]
    iters: Option<String>,
    /// Fine-grained negatives per episode.
    #[arg(long)]
    fgn: Option<String>,
    /// Target sync period in outer steps, or inf.
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    n_rep: Option<String>,
    /// Replacement frame source: in or out.
    #[arg(long)]
    replacement: Option<String>,
    /// Mask selector: tpe or random.
    #[arg(long)]
    selector: Option<String>,
    #[arg(long)]
    reuse_inner_frames: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |key: &str, v: &Option<String>| {
            if let Some(v) = v {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("world.seed", &self.seed.map(|s| s.to_string()));
        push("train.seed", &self.train_seed.map(|s| s.to_string()));
        push("world.n_houses_seen", &self.n_houses_seen);
        push("world.n_houses_unseen", &self.n_houses_unseen);
        push("train.epochs", &self.epochs);
        push("train.lr", &self.lr);
        push("train.batch_size", &self.batch_size);
        push("train.iters", &self.iters);
        push("train.n_fgn", &self.fgn);
        push("train.sync", &self.sync);
        push("train.n_rep", &self.n_rep);
        push(
            "train.replacement",
            &self
                .replacement
                .as_deref()
                .map(|r| r.parse::<fgmine::forge::ReplacementMode>().map(|m| serde_plain(&m)))
                .transpose()?,
        );
        push(
            "train.selector",
            &self
                .selector
                .as_deref()
                .map(|s| s.parse::<fgmine::adversarial::Selector>().map(|m| m.to_string()))
                .transpose()?,
        );
        if self.reuse_inner_frames {
            pairs.push(("train.reuse_inner_frames".into(), "true".into()));
        }
        resolve(self.preset.as_deref(), self.config.as_deref(), &pairs)
    }
}

/// Serialized name of a unit enum variant.
fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "seen" => Ok(Split::Seen),
        "unseen" => Ok(Split::Unseen),
        _ => Err(Error::config("split", format!("expected seen or unseen, got `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = cfg.resolve()?;
            let r = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} seen and {} unseen episodes, fingerprint {}", r.n_seen, r.n_unseen, r.fingerprint);
        }
        Command::Train { out, data, dump_bo, dump_negatives, cfg: args } => {
            let cfg = args.resolve()?;
            let (cfg, prepared) = prepare(&cfg, data.as_deref())?;
            let opts = TrainOptions {
                label: args.preset.clone().unwrap_or_else(|| "run".into()),
                dump_bo,
                dump_negatives,
                data_dir: data,
            };
            let report = cmd_train(&cfg, &prepared, &out, &opts)?;
            for split in [Split::Seen, Split::Unseen] {
                if let Some(m) = report.last(split) {
                    println!(
                        "{split}: ranking_accuracy={:.4} mean_loss={:.4}",
                        m.ranking_accuracy, m.mean_loss
                    );
                }
            }
            println!("run {} in {}", report.run_id, report.run_dir.display());
        }
        Command::Ablate { out, data, seeds, sync_sweep, cfg } => {
            let cfg = cfg.resolve()?;
            let (cfg, prepared) = prepare(&cfg, data.as_deref())?;
            let report = cmd_ablate(&cfg, &prepared, &seeds, sync_sweep, &out)?;
            for r in report.rows.iter().filter(|r| r.seed == "mean") {
                println!(
                    "{:16} {:6} {}",
                    r.config,
                    r.split,
                    r.ranking_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            let c = &report.check;
            println!(
                "directional check (full > baseline on unseen): {}",
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        Command::EmbedAnalysis { out, data, checkpoint, split, limit, cfg } => {
            let cfg = cfg.resolve()?;
            let split = parse_split(&split)?;
            let (cfg, prepared) = prepare(&cfg, data.as_deref())?;
            let params = analysis_params(&cfg, &prepared.world, checkpoint.as_deref().map(Path::new))?;
            let report = cmd_embed_analysis(&cfg, &params, &prepared, split, limit, &out)?;
            for (style, s) in &report.dist {
                println!("{:13} mu={:.4} sigma={:.4} n={}", style.as_str(), s.mu, s.sigma, s.n);
            }
        }
        Command::PrintConfig { cfg } => {
            print!("{}", cfg.resolve()?.to_flat());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Io { .. }) {
                eprintln!("(relative output paths are resolved under ${RUN_ROOT_ENV} when it is set)");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
