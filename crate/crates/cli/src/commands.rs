//! Implementations of the CLI subcommands, separated from argument
//! parsing so the acceptance suite can drive them directly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use mechsearch_core::affinity::{
    build_matrix_embedding, build_matrix_llm, ground_truth_matrix, jsd_score, AffinityMatrix,
};
use mechsearch_core::occupancy::write_distribution;
use mechsearch_core::openworld::{
    aggregate, iou_at_threshold, select_view, write_pgm, CropFixture, ThresholdRule,
};
use mechsearch_core::policy::{rollout, Policy, RolloutConfig};
use mechsearch_core::provider::{
    AffinityProviderSpec, RemoteEmbedder, RemoteScorer, ScriptedEmbedder, ScriptedScorer,
};
use mechsearch_core::scenegen::{
    builtin_taxonomy, default_scale_factor, generate_accepted_scenes, SceneGenConfig, TaxonomyNode,
};
use mechsearch_core::sceneio::{load_scene, save_scene};
use mechsearch_core::ShelfSpec;

use crate::experiment::mean_stderr;

/// Environment variable overriding every remote provider endpoint.
pub const ENDPOINT_ENV: &str = "SMS_PROVIDER_ENDPOINT";

/// Resolve a taxonomy argument: a bundled domain name or a file path.
pub fn resolve_taxonomy(arg: &str) -> Result<TaxonomyNode> {
    if let Some(text) = builtin_taxonomy(arg) {
        return Ok(TaxonomyNode::parse(text)?);
    }
    TaxonomyNode::load(arg).with_context(|| format!("loading taxonomy '{arg}'"))
}

/// `gen-scenes`: write a deterministic corpus of accepted scenes.
pub fn gen_scenes(
    taxonomy: &str,
    n_objects: usize,
    count: usize,
    seed: u64,
    scale: Option<f64>,
    out_dir: &Path,
) -> Result<()> {
    let tax = resolve_taxonomy(taxonomy)?;
    let scale = scale.unwrap_or_else(|| default_scale_factor(taxonomy));
    let cfg = SceneGenConfig::new(n_objects, seed, scale);
    let (scenes, attempts) = generate_accepted_scenes(&tax, &cfg, &ShelfSpec::default(), count)?;
    fs::create_dir_all(out_dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        let path = out_dir.join(format!("scene_{i:04}.json"));
        save_scene(&path, scene)?;
    }
    println!(
        "wrote {} scenes to {} (accepted {}/{} attempts, {:.1}% acceptance)",
        scenes.len(),
        out_dir.display(),
        scenes.len(),
        attempts,
        scenes.len() as f64 / attempts as f64 * 100.0
    );
    Ok(())
}

/// Parse a provider argument of the form `scripted:<seed>`,
/// `prompt-scorer:<endpoint>`, `embedding:<endpoint>[,temperature]`,
/// `taxonomy-oracle:<taxonomy>`, or `file:<path>`.
pub fn parse_provider(arg: &str) -> Result<AffinityProviderSpec> {
    let (kind, rest) = arg.split_once(':').unwrap_or((arg, ""));
    match kind {
        "scripted" => {
            let seed = if rest.is_empty() { 0 } else { rest.parse()? };
            Ok(AffinityProviderSpec::Scripted { seed })
        }
        "prompt-scorer" => Ok(AffinityProviderSpec::PromptScorer {
            endpoint: rest.to_string(),
        }),
        "embedding" => {
            let (endpoint, temperature) = match rest.rsplit_once(',') {
                Some((e, t)) => (e.to_string(), t.parse()?),
                None => (rest.to_string(), 1.0),
            };
            Ok(AffinityProviderSpec::Embedding {
                endpoint,
                temperature,
            })
        }
        "taxonomy-oracle" => Ok(AffinityProviderSpec::TaxonomyOracle {
            taxonomy: rest.to_string(),
        }),
        "file" => Ok(AffinityProviderSpec::File {
            path: PathBuf::from(rest),
        }),
        other => bail!("unknown provider kind '{other}'"),
    }
}

fn apply_endpoint_env(spec: &mut AffinityProviderSpec) {
    if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
        match spec {
            AffinityProviderSpec::PromptScorer { endpoint: e }
            | AffinityProviderSpec::Embedding { endpoint: e, .. } => *e = endpoint,
            _ => {}
        }
    }
}

/// Build a matrix from a provider spec over a taxonomy's object list.
pub fn build_affinity_matrix(
    mut spec: AffinityProviderSpec,
    taxonomy: &str,
    memo: Option<&Path>,
) -> Result<AffinityMatrix> {
    apply_endpoint_env(&mut spec);
    let tax = resolve_taxonomy(taxonomy)?;
    let labels = tax.object_names();
    let matrix = match spec {
        AffinityProviderSpec::Scripted { seed } => {
            build_matrix_llm(&labels, &ScriptedScorer::new(seed))?
        }
        AffinityProviderSpec::PromptScorer { endpoint } => {
            let mut scorer = RemoteScorer::new(endpoint);
            if let Some(path) = memo {
                scorer = scorer.with_memo(path)?;
            }
            build_matrix_llm(&labels, &scorer)?
        }
        AffinityProviderSpec::Embedding {
            endpoint,
            temperature,
        } => {
            if endpoint.is_empty() {
                build_matrix_embedding(&labels, &ScriptedEmbedder::new(0, 64), temperature)?
            } else {
                build_matrix_embedding(&labels, &RemoteEmbedder::new(endpoint), temperature)?
            }
        }
        AffinityProviderSpec::TaxonomyOracle { taxonomy: t } => {
            let oracle_tax = if t.is_empty() {
                tax
            } else {
                resolve_taxonomy(&t)?
            };
            ground_truth_matrix(&oracle_tax.category_groups())?
        }
        AffinityProviderSpec::File { path } => {
            let file = fs::File::open(&path)
                .with_context(|| format!("opening matrix {}", path.display()))?;
            AffinityMatrix::read(&mut std::io::BufReader::new(file))?
        }
    };
    Ok(matrix)
}

/// `build-affinity`: build and write a normalized matrix file.
pub fn build_affinity(
    provider: &str,
    taxonomy: &str,
    out: &Path,
    memo: Option<&Path>,
) -> Result<()> {
    let spec = parse_provider(provider)?;
    let matrix = build_affinity_matrix(spec, taxonomy, memo)?;
    let mut buf = Vec::new();
    matrix.write(&mut buf)?;
    fs::write(out, buf)?;
    println!(
        "wrote {} x {} matrix to {}",
        matrix.len(),
        matrix.len(),
        out.display()
    );
    Ok(())
}

/// `eval-affinity`: mean JSD and improvement against the taxonomy ground
/// truth, printed and optionally appended as a machine-readable CSV row.
pub fn eval_affinity(candidate: &Path, taxonomy: &str, csv_out: Option<&Path>) -> Result<()> {
    let file = fs::File::open(candidate)
        .with_context(|| format!("opening matrix {}", candidate.display()))?;
    let matrix = AffinityMatrix::read(&mut std::io::BufReader::new(file))?;
    let tax = resolve_taxonomy(taxonomy)?;
    let truth = ground_truth_matrix(&tax.category_groups())?;
    let (mean_jsd, improvement) = jsd_score(&matrix, &truth)?;
    println!(
        "mean JSD {:.4}   improvement over uniform {:.1}%",
        mean_jsd,
        improvement * 100.0
    );
    if let Some(path) = csv_out {
        let line = format!(
            "{},{:.9},{:.9}\n",
            candidate.display(),
            mean_jsd,
            improvement
        );
        let mut existing = if path.exists() {
            fs::read_to_string(path)?
        } else {
            "candidate,mean_jsd,improvement\n".to_string()
        };
        existing.push_str(&line);
        fs::write(path, existing)?;
    }
    Ok(())
}

/// `rollout`: run one scene end to end, optionally writing the step trace
/// and per-step distribution dumps.
#[allow(clippy::too_many_arguments)]
pub fn run_rollout(
    scene_path: &Path,
    matrix_arg: &str,
    taxonomy: &str,
    policy: Policy,
    use_semantic: bool,
    seed: u64,
    noise_p: f64,
    trace: Option<&Path>,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let scene = load_scene(scene_path)?;
    let spec = parse_provider(matrix_arg)?;
    let matrix = build_affinity_matrix(spec, taxonomy, None).or_else(|_| {
        // Fall back to treating the argument as a bare matrix file path.
        let file = fs::File::open(matrix_arg)?;
        Ok::<_, anyhow::Error>(AffinityMatrix::read(&mut std::io::BufReader::new(file))?)
    })?;
    let cfg = RolloutConfig {
        policy,
        use_semantic,
        seed,
        noise_p,
        record_distributions: dump_dir.is_some(),
        ..Default::default()
    };
    let record = rollout(&scene, &matrix, &cfg)?;
    println!(
        "{} in {} actions (target visibility {:.3})",
        if record.success { "revealed" } else { "failed" },
        record.steps,
        record.target_visibility
    );
    if let Some(reason) = &record.failure {
        println!("failure reason: {reason:?}");
    }
    if let Some(path) = trace {
        let mut buf = Vec::new();
        record.write_trace(&mut buf)?;
        fs::write(path, buf)?;
    }
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
        for snap in &record.snapshots {
            for (kind, dist) in [
                ("spatial", Some(&snap.spatial)),
                ("semantic", snap.semantic.as_ref()),
                ("combined", Some(&snap.combined)),
            ] {
                if let Some(dist) = dist {
                    let mut buf = Vec::new();
                    write_distribution(&mut buf, dist, kind, snap.step)?;
                    fs::write(dir.join(format!("step{:03}_{kind}.txt", snap.step)), buf)?;
                }
            }
        }
    }
    Ok(())
}

/// `openworld-eval`: aggregate heatmaps for every fixture in a directory,
/// report IoU per fixture and mean +- stderr per method tag, and pick
/// the best view by 90th-percentile heat. Heatmaps export as ASCII
/// graymaps when a dump directory is given.
pub fn openworld_eval(
    fixtures_dir: &Path,
    absolute_threshold: Option<f64>,
    heatmap_dir: Option<&Path>,
) -> Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(fixtures_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .json fixtures in {}", fixtures_dir.display());
    }
    let rule = absolute_threshold.map_or(ThresholdRule::MeanPlusStd, ThresholdRule::Absolute);
    let mut per_method: HashMap<String, Vec<f64>> = HashMap::new();
    let mut csv = String::from("fixture,method,iou\n");
    let mut heatmaps = Vec::new();
    let mut names = Vec::new();
    for path in &entries {
        let file = fs::File::open(path)?;
        let fixture = CropFixture::read(&mut std::io::BufReader::new(file))?;
        let heat = aggregate(&fixture.crops, fixture.width, fixture.height)?;
        let truth = fixture
            .truth_pixels()
            .with_context(|| format!("{}", path.display()))?;
        let iou = iou_at_threshold(&heat, &truth, rule);
        let method = fixture.method.clone().unwrap_or_else(|| "default".into());
        let name = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        let _ = writeln!(csv, "{name},{method},{iou:.6}");
        per_method.entry(method).or_default().push(iou);
        if let Some(dir) = heatmap_dir {
            fs::create_dir_all(dir)?;
            let mut buf = Vec::new();
            write_pgm(&mut buf, &heat)?;
            fs::write(dir.join(format!("{name}.pgm")), buf)?;
        }
        heatmaps.push(heat);
        names.push(name);
    }
    let mut methods: Vec<&String> = per_method.keys().collect();
    methods.sort();
    for m in methods {
        let (mean, se) = mean_stderr(&per_method[m]);
        let _ = writeln!(csv, "mean:{m},{m},{mean:.6}");
        println!(
            "{m}: mean IoU {:.3} +- {:.3} over {} fixtures",
            mean,
            se,
            per_method[m].len()
        );
    }
    let best = select_view(&heatmaps);
    println!("best view by 90th-percentile heat: {}", names[best]);
    Ok(csv)
}
