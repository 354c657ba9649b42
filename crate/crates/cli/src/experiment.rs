//! Benchmark configuration, execution, and metric aggregation.
//!
//! A bench run generates one deterministic scene corpus per object count
//! and replays it for every method, so comparisons are paired. Rollouts
//! run scene-parallel; results merge in scene order, which keeps the
//! emitted CSV byte-identical across runs and worker counts.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mechsearch_core::affinity::{ground_truth_matrix, AffinityMatrix};
use mechsearch_core::policy::{rollout, Policy, RolloutConfig, RolloutRecord};
use mechsearch_core::rng::derive_seed;
use mechsearch_core::scenegen::{
    builtin_taxonomy, default_scale_factor, generate_accepted_scenes, SceneGenConfig, TaxonomyNode,
};
use mechsearch_core::{Scene, ShelfSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("scene generation failed: {0}")]
    SceneGen(#[from] mechsearch_core::scenegen::SceneGenError),
    #[error("affinity error: {0}")]
    Affinity(#[from] mechsearch_core::affinity::AffinityError),
    #[error("rollout failed on scene {scene}: {source}")]
    Rollout {
        scene: usize,
        source: mechsearch_core::policy::PolicyError,
    },
}

/// How a bench run obtains its semantic distribution, parsed from the
/// method strings `spatial-only`, `sms-oracle`, `sms-file:<path>`, and
/// `sms-embedding`.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    SpatialOnly,
    SmsOracle,
    SmsFile(PathBuf),
    SmsEmbedding,
}

impl MethodSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        match text {
            "spatial-only" => Ok(MethodSpec::SpatialOnly),
            "sms-oracle" => Ok(MethodSpec::SmsOracle),
            "sms-embedding" => Ok(MethodSpec::SmsEmbedding),
            other => match other.strip_prefix("sms-file:") {
                Some(path) if !path.is_empty() => Ok(MethodSpec::SmsFile(PathBuf::from(path))),
                _ => Err(ExperimentError::Config(format!(
                    "unknown method '{other}' (expected spatial-only, sms-oracle, \
                     sms-file:<path>, or sms-embedding)"
                ))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::SpatialOnly => "spatial-only".into(),
            MethodSpec::SmsOracle => "sms-oracle".into(),
            MethodSpec::SmsFile(p) => format!("sms-file:{}", p.display()),
            MethodSpec::SmsEmbedding => "sms-embedding".into(),
        }
    }

    pub fn uses_semantics(&self) -> bool {
        !matches!(self, MethodSpec::SpatialOnly)
    }
}

fn default_n_objects() -> Vec<usize> {
    vec![12, 15, 18, 21]
}

fn default_scenes_per_n() -> usize {
    200
}

fn default_methods() -> Vec<String> {
    vec!["spatial-only".into(), "sms-oracle".into()]
}

fn default_noise() -> Vec<f64> {
    vec![0.0]
}

fn default_sigma() -> f64 {
    mechsearch_core::occupancy::DEFAULT_SIGMA_BINS
}

fn default_grid_k() -> usize {
    mechsearch_core::policy::DEFAULT_GRID_K
}

fn default_visibility_x() -> f64 {
    0.01
}

/// Bench configuration, read from a JSON file with CLI flag overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub domain: String,
    #[serde(default = "default_n_objects")]
    pub n_objects: Vec<usize>,
    #[serde(default = "default_scenes_per_n")]
    pub scenes_per_n: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_noise")]
    pub noise_p: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma_bins: f64,
    #[serde(default = "default_grid_k")]
    pub grid_k: usize,
    #[serde(default = "default_visibility_x")]
    pub visibility_x: f64,
    /// Override for the taxonomy file; the bundled domain taxonomy is used
    /// when absent.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    /// Override for the domain scale factor.
    #[serde(default)]
    pub scale_factor: Option<f64>,
    /// Remote embedder endpoint for the sms-embedding method; a scripted
    /// deterministic embedder is used when absent.
    #[serde(default)]
    pub embedding_endpoint: Option<String>,
}

fn default_policy() -> Policy {
    Policy::Dar
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.scenes_per_n == 0 {
            return Err(ExperimentError::Config("scenes_per_n must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(ExperimentError::Config("methods must be non-empty".into()));
        }
        for m in &self.methods {
            MethodSpec::parse(m)?;
        }
        for &p in &self.noise_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(ExperimentError::Config(format!("noise_p {p} out of [0,1]")));
            }
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<TaxonomyNode, ExperimentError> {
        match &self.taxonomy {
            Some(path) => Ok(TaxonomyNode::load(path)?),
            None => {
                let text = builtin_taxonomy(&self.domain).ok_or_else(|| {
                    ExperimentError::Config(format!(
                        "no bundled taxonomy for domain '{}'; pass a taxonomy path",
                        self.domain
                    ))
                })?;
                Ok(TaxonomyNode::parse(text)?)
            }
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale_factor
            .unwrap_or_else(|| default_scale_factor(&self.domain))
    }
}

/// Aggregated metrics for one (method, n) cell, including both action-mean
/// conventions: `mean_actions` counts failed rollouts at their terminal
/// step count (2N), `mean_ok` averages successful rollouts only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub domain: String,
    pub n: String,
    pub successes: usize,
    pub total: usize,
    pub mean_actions: f64,
    pub stderr_actions: f64,
    pub delta_pct: Option<f64>,
    pub mean_ok: f64,
    pub stderr_ok: f64,
}

/// Sample mean and standard error (sample std over sqrt(count)).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k as f64 - 1.0);
    (mean, (var / k as f64).sqrt())
}

/// Every rollout of one (method, noise, n) cell, in scene order.
#[derive(Debug)]
pub struct CellResult {
    pub method: String,
    pub n: usize,
    pub noise_p: f64,
    pub records: Vec<RolloutRecord>,
}

impl CellResult {
    pub fn successes(&self) -> usize {
        self.records.iter().filter(|r| r.success).count()
    }

    pub fn actions_all(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.steps as f64).collect()
    }

    pub fn actions_ok(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.success)
            .map(|r| r.steps as f64)
            .collect()
    }
}

/// Outcome of a bench run: raw per-cell records plus the aggregated table.
pub struct BenchOutcome {
    pub cells: Vec<CellResult>,
    pub rows: Vec<MetricsRow>,
}

/// The affinity matrix a method uses over a label set.
pub fn method_matrix(
    method: &MethodSpec,
    tax: &TaxonomyNode,
    embedding_endpoint: Option<&str>,
    seed: u64,
) -> Result<AffinityMatrix, ExperimentError> {
    match method {
        // The rollout needs a label universe even when semantics are off.
        MethodSpec::SpatialOnly | MethodSpec::SmsOracle => {
            Ok(ground_truth_matrix(&tax.category_groups())?)
        }
        MethodSpec::SmsFile(path) => {
            let file = std::fs::File::open(path).map_err(|e| {
                ExperimentError::Config(format!("cannot open matrix {}: {e}", path.display()))
            })?;
            Ok(AffinityMatrix::read(&mut std::io::BufReader::new(file))?)
        }
        MethodSpec::SmsEmbedding => {
            let labels = tax.object_names();
            match embedding_endpoint {
                Some(endpoint) => {
                    let embedder = mechsearch_core::provider::RemoteEmbedder::new(endpoint);
                    Ok(mechsearch_core::affinity::build_matrix_embedding(
                        &labels, &embedder, 1.0,
                    )?)
                }
                None => {
                    let embedder =
                        mechsearch_core::provider::ScriptedEmbedder::new(derive_seed(seed, 17), 64);
                    Ok(mechsearch_core::affinity::build_matrix_embedding(
                        &labels, &embedder, 1.0,
                    )?)
                }
            }
        }
    }
}

/// Generate the shared corpus for one object count.
pub fn corpus_for_n(
    tax: &TaxonomyNode,
    cfg: &ExperimentConfig,
    n: usize,
) -> Result<Vec<Scene>, ExperimentError> {
    let gen_cfg = SceneGenConfig::new(n, derive_seed(cfg.seed, n as u64), cfg.scale());
    let (scenes, _attempts) =
        generate_accepted_scenes(tax, &gen_cfg, &ShelfSpec::default(), cfg.scenes_per_n)?;
    Ok(scenes)
}

/// Run the full cross product (method x noise x n x scene). Scene-level
/// parallelism; deterministic output.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchOutcome, ExperimentError> {
    cfg.validate()?;
    let tax = cfg.taxonomy()?;
    let methods: Vec<MethodSpec> = cfg
        .methods
        .iter()
        .map(|m| MethodSpec::parse(m))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    for (n_idx, &n) in cfg.n_objects.iter().enumerate() {
        let corpus = corpus_for_n(&tax, cfg, n)?;
        for (m_idx, method) in methods.iter().enumerate() {
            let matrix = method_matrix(method, &tax, cfg.embedding_endpoint.as_deref(), cfg.seed)?;
            // Noise perturbs detection labels, which only matters when
            // semantics are on; the baseline runs once at zero noise.
            let noises: Vec<f64> = if method.uses_semantics() {
                cfg.noise_p.clone()
            } else {
                vec![0.0]
            };
            for (p_idx, &noise_p) in noises.iter().enumerate() {
                let records: Result<Vec<RolloutRecord>, ExperimentError> = corpus
                    .par_iter()
                    .enumerate()
                    .map(|(s_idx, scene)| {
                        let rollout_cfg = RolloutConfig {
                            policy: cfg.policy,
                            use_semantic: method.uses_semantics(),
                            sigma_bins: cfg.sigma_bins,
                            noise_p,
                            visibility_x: cfg.visibility_x,
                            grid_k: cfg.grid_k,
                            seed: derive_seed(
                                cfg.seed,
                                ((n_idx as u64) << 48)
                                    ^ ((m_idx as u64) << 40)
                                    ^ ((p_idx as u64) << 32)
                                    ^ s_idx as u64,
                            ),
                            ..Default::default()
                        };
                        rollout(scene, &matrix, &rollout_cfg).map_err(|source| {
                            ExperimentError::Rollout {
                                scene: s_idx,
                                source,
                            }
                        })
                    })
                    .collect();
                let mut tag = method.name();
                if noise_p > 0.0 {
                    let _ = write!(tag, "+noise{noise_p}");
                }
                cells.push(CellResult {
                    method: tag,
                    n,
                    noise_p,
                    records: records?,
                });
            }
        }
    }
    let rows = aggregate(cfg, &cells);
    Ok(BenchOutcome { cells, rows })
}

/// Build per-cell rows plus a pooled per-method row over all n (Table-2
/// style), with the improvement column against the spatial-only baseline.
fn aggregate(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    let method_tags: Vec<String> = {
        let mut seen = Vec::new();
        for c in cells {
            if !seen.contains(&c.method) {
                seen.push(c.method.clone());
            }
        }
        seen
    };
    let baseline_mean = |n: Option<usize>| -> Option<f64> {
        let values: Vec<f64> = cells
            .iter()
            .filter(|c| c.method == "spatial-only" && n.is_none_or(|n| c.n == n))
            .flat_map(|c| c.actions_all())
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(mean_stderr(&values).0)
        }
    };
    let mut push_row = |method: &str, n: Option<usize>| {
        let selected: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.method == method && n.is_none_or(|n| c.n == n))
            .collect();
        if selected.is_empty() {
            return;
        }
        let all: Vec<f64> = selected.iter().flat_map(|c| c.actions_all()).collect();
        let ok: Vec<f64> = selected.iter().flat_map(|c| c.actions_ok()).collect();
        let (mean_all, se_all) = mean_stderr(&all);
        let (mean_ok, se_ok) = if ok.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_stderr(&ok)
        };
        let delta = if method == "spatial-only" {
            None
        } else {
            baseline_mean(n).map(|b| (b - mean_all) / b * 100.0)
        };
        rows.push(MetricsRow {
            method: method.to_string(),
            domain: cfg.domain.clone(),
            n: n.map_or_else(|| "all".to_string(), |n| n.to_string()),
            successes: selected.iter().map(|c| c.successes()).sum(),
            total: selected.iter().map(|c| c.records.len()).sum(),
            mean_actions: mean_all,
            stderr_actions: se_all,
            delta_pct: delta,
            mean_ok,
            stderr_ok: se_ok,
        });
    };
    for method in &method_tags {
        for &n in &cfg.n_objects {
            push_row(method, Some(n));
        }
        if cfg.n_objects.len() > 1 {
            push_row(method, None);
        }
    }
    rows
}

/// Fixed CSV schema: `method,domain,n,successes,total,mean_actions,stderr,delta_pct`.
pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("method,domain,n,successes,total,mean_actions,stderr,delta_pct\n");
    for r in rows {
        let delta = r
            .delta_pct
            .map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.method, r.domain, r.n, r.successes, r.total, r.mean_actions, r.stderr_actions, delta
        );
    }
    out
}

/// Human-readable table; `verbose` adds the successes-only convention.
pub fn rows_to_table(rows: &[MetricsRow], verbose: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>11} {:>18} {:>8}",
        "method", "n", "successes", "actions (mean+-se)", "delta%"
    );
    for r in rows {
        let delta = r
            .delta_pct
            .map_or_else(|| "NA".to_string(), |d| format!("{d:.1}"));
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>11} {:>18} {:>8}",
            r.method,
            r.n,
            format!("{}/{}", r.successes, r.total),
            format!("{:.2} +- {:.2}", r.mean_actions, r.stderr_actions),
            delta
        );
        if verbose {
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>11} {:>18} {:>8}",
                format!("  (successes only)"),
                "",
                "",
                format!("{:.2} +- {:.2}", r.mean_ok, r.stderr_ok),
                ""
            );
        }
    }
    out
}
