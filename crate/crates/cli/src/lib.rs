//! The `cfgx` command line: a config-driven pipeline over a working
//! directory of JSON, JSON Lines and CSV artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod store;

use std::path::PathBuf;

use cfgx::explain::Method;
use cfgx::extract::Extraction;
use clap::{Parser, Subcommand};

pub use commands::Strategy;
pub use config::Config;
pub use error::{CliError, Result};

use commands::Ctx;
use store::{Meta, Store};

/// Worker threads for per-graph parallelism.
pub const WORKERS_ENV: &str = "CFGX_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "cfgx", version, about = "Explainable control-flow-graph classification pipeline")]
pub struct Cli {
    /// JSON config with per-stage sections; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory holding the artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: cfgx::Error| e.to_string())
}

fn parse_extraction(s: &str) -> std::result::Result<Extraction, String> {
    s.parse().map_err(|e: cfgx::Error| e.to_string())
}

fn parse_percent(s: &str) -> std::result::Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if p.is_finite() && p > 0.0 && p <= 100.0 {
        Ok(p)
    } else {
        Err(format!("sparsity must lie in (0, 100], got {s}"))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted-motif graphs (graphs.jsonl, truth.json).
    SynthGen {
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Encode every basic block to a 439-dim instruction vector (encoded.jsonl).
    Encode,
    /// Train the autoencoder and write 64-dim node features (ae.json, features.jsonl).
    TrainAe {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Split the graphs and train the GCN (split.json, gnn.json, metrics.csv).
    TrainGnn {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score every edge of every graph (explanations/<method>.jsonl).
    Explain {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Integrated-gradients path steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Combine explainers (explanations/{rankfusion,mean_agg,rank_vote}.jsonl).
    Fuse {
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Sparsity whose validation accuracies weight RankFusion and set the vote size.
        #[arg(long, default_value = "10", value_parser = parse_percent)]
        sparsity: f64,
        /// Extraction used for the validation accuracies.
        #[arg(long, default_value = "gec", value_parser = parse_extraction)]
        extraction: Extraction,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Extract explanation subgraphs (selections/*.jsonl, optional DOT files).
    Extract {
        #[arg(long, value_parser = parse_extraction)]
        method: Extraction,
        #[arg(long, value_parser = parse_percent)]
        sparsity: f64,
        /// Explanation to extract from.
        #[arg(long, default_value = "ig", value_parser = parse_method)]
        explainer: Method,
        /// Write a Graphviz rendering of this graph's selection.
        #[arg(long)]
        dot: Vec<String>,
    },
    /// Accuracy of extracted subgraphs over the sparsity grid (sweep.csv).
    Sweep,
    /// Fidelity+ and Fidelity- per test graph (fidelity.csv).
    Fidelity {
        #[arg(long, value_parser = parse_method)]
        explainer: Option<Method>,
        #[arg(long, value_parser = parse_extraction)]
        extraction: Option<Extraction>,
        #[arg(long, value_parser = parse_percent)]
        sparsity: Option<f64>,
    },
    /// Fidelity spread over valid perturbations (consistency.csv).
    Consistency {
        #[arg(long, value_parser = parse_method)]
        explainer: Option<Method>,
        #[arg(long, value_parser = parse_extraction)]
        extraction: Option<Extraction>,
        #[arg(long, value_parser = parse_percent)]
        sparsity: Option<f64>,
    },
    /// Plot sweep.csv and fidelity.csv as SVG line charts (report/*.svg).
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::Encode => "encode",
            Command::TrainAe { .. } => "train-ae",
            Command::TrainGnn { .. } => "train-gnn",
            Command::Explain { .. } => "explain",
            Command::Fuse { .. } => "fuse",
            Command::Extract { .. } => "extract",
            Command::Sweep => "sweep",
            Command::Fidelity { .. } => "fidelity",
            Command::Consistency { .. } => "consistency",
            Command::Report => "report",
        }
    }

    /// Fold command flags into the config.
    fn apply(&self, cfg: &mut Config) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        match self {
            Command::SynthGen { n_per_class } => set(&mut cfg.dataset.n_per_class, n_per_class),
            Command::TrainAe {
                epochs,
                lr,
                batch_size,
                max_samples,
            } => {
                set(&mut cfg.ae.epochs, epochs);
                set(&mut cfg.ae.lr, lr);
                set(&mut cfg.ae.batch_size, batch_size);
                if max_samples.is_some() {
                    cfg.ae.max_samples = *max_samples;
                }
            }
            Command::TrainGnn { epochs, lr } => {
                set(&mut cfg.gnn.epochs, epochs);
                set(&mut cfg.gnn.lr, lr);
            }
            Command::Explain { steps, .. } => set(&mut cfg.explain.ig_steps, steps),
            Command::Fuse { threshold, .. } => set(&mut cfg.fuse.threshold, threshold),
            _ => {}
        }
    }
}

/// Resolve the effective config: file (or defaults), then `--seed`, then
/// command flags.
pub fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cli.command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let meta = Meta::new(cli.command.name(), cfg.hash(), cfg.seed);
    let ctx = Ctx {
        cfg,
        store: Store::new(&cli.dir, meta),
    };
    match &cli.command {
        Command::SynthGen { .. } => commands::synth_gen(&ctx),
        Command::Encode => commands::encode(&ctx),
        Command::TrainAe { .. } => commands::train_ae_cmd(&ctx),
        Command::TrainGnn { .. } => commands::train_gnn_cmd(&ctx),
        Command::Explain { method, .. } => commands::explain_cmd(&ctx, *method),
        Command::Fuse {
            strategy,
            sparsity,
            extraction,
            ..
        } => commands::fuse_cmd(&ctx, *strategy, *sparsity, *extraction),
        Command::Extract {
            method,
            sparsity,
            explainer,
            dot,
        } => commands::extract_cmd(&ctx, *explainer, *method, *sparsity, dot),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::Fidelity {
            explainer,
            extraction,
            sparsity,
        } => commands::fidelity_cmd(&ctx, *explainer, *extraction, *sparsity),
        Command::Consistency {
            explainer,
            extraction,
            sparsity,
        } => commands::consistency_cmd(&ctx, *explainer, *extraction, *sparsity),
        Command::Report => commands::report_cmd(&ctx),
    }
}

/// Parse and run `args` (including the program name).
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli)
}

/// Worker count from the environment; `None` leaves the default pool.
pub fn parse_workers(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config {
                path: WORKERS_ENV.into(),
                msg: format!("expected a positive integer, got `{v}`"),
            }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cfgx").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "gnn": {"epochs": 7, "lr": 0.01}}"#).unwrap();
        let p = path.to_str().unwrap();
        let c = effective_config(&cli(&["--config", p, "train-gnn", "--lr", "0.5"])).unwrap();
        assert_eq!((c.gnn.epochs, c.gnn.lr, c.seed), (7, 0.5, 3));
        let c2 = effective_config(&cli(&["--config", p, "--seed", "9", "train-gnn"])).unwrap();
        assert_eq!(c2.seed, 9);
        let mut expect = c2.clone();
        expect.set_seed(9);
        assert_eq!(c2, expect);
    }

    #[test]
    fn usage_errors_exit_one() {
        let err = run_args(["cfgx", "explain", "--method", "nope"]).unwrap_err();
        assert_eq!(err.exit_code(), error::EXIT_USAGE);
        let err = run_args(["cfgx", "extract", "--method", "gec", "--sparsity", "0"]).unwrap_err();
        assert_eq!(err.exit_code(), error::EXIT_USAGE);
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let err = run_args(["cfgx", "--dir", d, "sweep"]).unwrap_err();
        assert!(err.to_string().contains("cfgx train-ae"), "{err}");
        let err = run_args(["cfgx", "--dir", d, "report"]).unwrap_err();
        assert!(err.to_string().contains("cfgx sweep"), "{err}");
        assert_eq!(err.exit_code(), error::EXIT_VALIDATION);
    }

    #[test]
    fn workers_env() {
        assert_eq!(parse_workers(None).unwrap(), None);
        assert_eq!(parse_workers(Some("4")).unwrap(), Some(4));
        assert!(parse_workers(Some("0")).is_err());
        assert!(parse_workers(Some("x")).is_err());
    }
}
