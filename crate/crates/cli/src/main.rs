//! `mechsearch`: scene generation, affinity building and evaluation,
//! single rollouts, and the full benchmark harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mechsearch_cli::commands;
use mechsearch_cli::experiment::{rows_to_csv, rows_to_table, run_bench, ExperimentConfig};
use mechsearch_core::policy::Policy;
use mechsearch_core::provider::ProviderError;

#[derive(Parser)]
#[command(
    name = "mechsearch",
    version,
    about = "Semantic shelf-search workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic corpus of semantically organized scenes.
    GenScenes {
        /// Bundled domain name (pharmacy|kitchen|office) or taxonomy path.
        #[arg(long, default_value = "pharmacy")]
        taxonomy: String,
        /// Objects per scene.
        #[arg(long, short)]
        n: usize,
        /// Accepted scenes to produce.
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale factor override (defaults by domain).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build an affinity matrix from a provider and write it to a file.
    BuildAffinity {
        /// Provider: scripted:<seed> | prompt-scorer:<endpoint> |
        /// embedding:<endpoint>[,temperature] | taxonomy-oracle:<taxonomy>
        /// | file:<path>.
        #[arg(long)]
        provider: String,
        /// Taxonomy naming the object list (bundled name or path).
        #[arg(long, default_value = "pharmacy")]
        taxonomy: String,
        #[arg(long)]
        out: PathBuf,
        /// On-disk memo for remote prompt scoring.
        #[arg(long)]
        memo: Option<PathBuf>,
    },
    /// Score a matrix file against the taxonomy ground truth.
    EvalAffinity {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, default_value = "pharmacy")]
        taxonomy: String,
        /// Append a machine-readable row here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the benchmark cross product from a config file.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Write the metrics CSV here (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the domain.
        #[arg(long)]
        domain: Option<String>,
        /// Override scenes per object count.
        #[arg(long)]
        scenes_per_n: Option<usize>,
        /// Override the object counts (comma separated).
        #[arg(long, value_delimiter = ',')]
        n_objects: Option<Vec<usize>>,
        /// Also print the successes-only action means.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate open-world crop fixtures: per-image IoU and view choice.
    OpenworldEval {
        #[arg(long)]
        fixtures: PathBuf,
        /// Absolute binarization threshold (default: mean + 1 std).
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the per-fixture CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export each heatmap as an ASCII graymap (P2) into this directory.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Run a single rollout on a scene file.
    Rollout {
        #[arg(long)]
        scene: PathBuf,
        /// Affinity source (provider string, e.g. taxonomy-oracle:pharmacy
        /// or file:<path>).
        #[arg(long, default_value = "taxonomy-oracle:pharmacy")]
        matrix: String,
        /// Taxonomy naming the closed object list for scripted or remote
        /// providers (bundled name or path).
        #[arg(long, default_value = "pharmacy")]
        taxonomy: String,
        #[arg(long, value_enum, default_value = "dar")]
        policy: PolicyArg,
        /// Geometry only, no semantic distribution.
        #[arg(long)]
        spatial_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Detection label noise probability.
        #[arg(long, default_value_t = 0.0)]
        noise_p: f64,
        /// Write the step trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Dump per-step distributions into this directory.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum PolicyArg {
    Dar,
    Der,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Dar => Policy::Dar,
            PolicyArg::Der => Policy::Der,
        }
    }
}

/// Exit codes: 0 success, 2 configuration error, 3 provider failure.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ProviderError>().is_some() {
            return 3;
        }
        if let Some(aff) = cause.downcast_ref::<mechsearch_core::affinity::AffinityError>() {
            if matches!(aff, mechsearch_core::affinity::AffinityError::Scorer { .. }) {
                return 3;
            }
        }
    }
    2
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenScenes {
            taxonomy,
            n,
            count,
            seed,
            scale,
            out_dir,
        } => commands::gen_scenes(&taxonomy, n, count, seed, scale, &out_dir),
        Command::BuildAffinity {
            provider,
            taxonomy,
            out,
            memo,
        } => commands::build_affinity(&provider, &taxonomy, &out, memo.as_deref()),
        Command::EvalAffinity {
            candidate,
            taxonomy,
            csv,
        } => commands::eval_affinity(&candidate, &taxonomy, csv.as_deref()),
        Command::Bench {
            config,
            out,
            seed,
            domain,
            scenes_per_n,
            n_objects,
            verbose,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", config.display()))?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| anyhow::anyhow!("bad config {}: {e}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(domain) = domain {
                cfg.domain = domain;
            }
            if let Some(s) = scenes_per_n {
                cfg.scenes_per_n = s;
            }
            if let Some(ns) = n_objects {
                cfg.n_objects = ns;
            }
            let outcome = run_bench(&cfg)?;
            print!("{}", rows_to_table(&outcome.rows, verbose));
            let csv = rows_to_csv(&outcome.rows);
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
                println!("wrote {}", path.display());
            } else {
                print!("{csv}");
            }
            Ok(())
        }
        Command::OpenworldEval {
            fixtures,
            threshold,
            out,
            heatmaps,
        } => {
            let csv = commands::openworld_eval(&fixtures, threshold, heatmaps.as_deref())?;
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Rollout {
            scene,
            matrix,
            taxonomy,
            policy,
            spatial_only,
            seed,
            noise_p,
            trace,
            dump_dir,
        } => commands::run_rollout(
            &scene,
            &matrix,
            &taxonomy,
            policy.into(),
            !spatial_only,
            seed,
            noise_p,
            trace.as_deref(),
            dump_dir.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
