//! Pluggable affinity-score providers.
//!
//! The matrix builders only need two capabilities: a completion
//! log-probability for a (prompt, completion) pair and a text embedding.
//! Both exist as deterministic scripted versions for tests and offline
//! runs, and as remote clients speaking a small JSON-over-HTTP protocol
//! with retry and an on-disk memo.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from_seed, seed_from_text};

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Transport or server failure after exhausting retries; callers may
    /// retry the whole operation later.
    #[error("provider at {endpoint} failed after {attempts} attempts: {message}")]
    Retriable {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("provider returned a malformed response: {0}")]
    BadResponse(String),
    #[error("no score available for the requested pair")]
    Missing,
    #[error("memo file error: {0}")]
    Memo(String),
}

/// Source of completion log-probabilities for prompt scoring.
pub trait CompletionScorer {
    fn logprob(&self, prompt: &str, completion: &str) -> Result<f64, ProviderError>;
}

/// Source of text embeddings.
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Which provider backs a matrix build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AffinityProviderSpec {
    /// Remote prompt scorer (SMS-LLM style).
    PromptScorer { endpoint: String },
    /// Remote text embedder (SMS-E style).
    Embedding { endpoint: String, temperature: f64 },
    /// Block-diagonal ground truth derived from a taxonomy.
    TaxonomyOracle { taxonomy: String },
    /// Load a previously built matrix file.
    File { path: PathBuf },
    /// Deterministic hash-derived scores, for tests and dry runs.
    Scripted { seed: u64 },
}

/// Deterministic scorer: the log-probability is a hash of (seed, prompt,
/// completion) mapped into [-6, -1]. Stable across runs and platforms.
#[derive(Debug, Clone)]
pub struct ScriptedScorer {
    seed: u64,
}

impl ScriptedScorer {
    pub fn new(seed: u64) -> Self {
        ScriptedScorer { seed }
    }
}

impl CompletionScorer for ScriptedScorer {
    fn logprob(&self, prompt: &str, completion: &str) -> Result<f64, ProviderError> {
        let key = format!("{prompt}\u{1}{completion}");
        let mut rng = rng_from_seed(seed_from_text(self.seed, &key));
        Ok(rng.random_range(-6.0..-1.0))
    }
}

/// Deterministic embedder: unit-norm vector from a hash of (seed, text).
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    seed: u64,
    dim: usize,
}

impl ScriptedEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        ScriptedEmbedder { seed, dim }
    }
}

impl TextEmbedder for ScriptedEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut rng = rng_from_seed(seed_from_text(self.seed, text));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }
}

/// Exact score table keyed by the full prompt, for hand-built fixtures.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    default: Option<f64>,
    table: HashMap<(String, String), f64>,
}

impl TableScorer {
    pub fn constant(v: f64) -> Self {
        TableScorer {
            default: Some(v),
            table: HashMap::new(),
        }
    }

    pub fn empty() -> Self {
        TableScorer::default()
    }

    /// Register the logprob for the prompt pairing (observed, target).
    pub fn put(&mut self, observed: &str, target: &str, logprob: f64) {
        let prompt = crate::affinity::build_prompt(observed, target);
        self.table.insert((prompt, target.to_string()), logprob);
    }
}

impl CompletionScorer for TableScorer {
    fn logprob(&self, prompt: &str, completion: &str) -> Result<f64, ProviderError> {
        self.table
            .get(&(prompt.to_string(), completion.to_string()))
            .copied()
            .or(self.default)
            .ok_or(ProviderError::Missing)
    }
}

/// Fixed embedding table for hand-built fixtures.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(entries: Vec<(&str, Vec<f64>)>) -> Self {
        TableEmbedder {
            table: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl TextEmbedder for TableEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.table.get(text).cloned().ok_or(ProviderError::Missing)
    }
}

/// Append-only JSONL memo keyed by (prompt, completion), so repeated matrix
/// builds never re-query a remote provider for a pair it has seen.
#[derive(Debug)]
pub struct MemoFile {
    path: PathBuf,
    entries: Mutex<HashMap<(String, String), f64>>,
}

#[derive(Serialize, Deserialize)]
struct MemoLine {
    prompt: String,
    completion: String,
    logprob: f64,
}

impl MemoFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| ProviderError::Memo(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| ProviderError::Memo(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: MemoLine = serde_json::from_str(&line)
                    .map_err(|e| ProviderError::Memo(format!("bad memo line: {e}")))?;
                entries.insert((rec.prompt, rec.completion), rec.logprob);
            }
        }
        Ok(MemoFile {
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, prompt: &str, completion: &str) -> Option<f64> {
        self.entries
            .lock()
            .expect("memo lock")
            .get(&(prompt.to_string(), completion.to_string()))
            .copied()
    }

    pub fn put(&self, prompt: &str, completion: &str, logprob: f64) -> Result<(), ProviderError> {
        let mut entries = self.entries.lock().expect("memo lock");
        entries.insert((prompt.to_string(), completion.to_string()), logprob);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ProviderError::Memo(e.to_string()))?;
        let line = serde_json::to_string(&MemoLine {
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            logprob,
        })
        .expect("memo line encodes");
        writeln!(file, "{line}").map_err(|e| ProviderError::Memo(e.to_string()))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const RETRY_ATTEMPTS: u32 = 3;

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    completion: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprob: f64,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

fn post_json<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    endpoint: &str,
    body: &Req,
    backoff_base: Duration,
) -> Result<Resp, ProviderError> {
    let mut last_err = String::new();
    for attempt in 0..RETRY_ATTEMPTS {
        if attempt > 0 {
            std::thread::sleep(backoff_base * 2u32.pow(attempt - 1));
        }
        let result = ureq::post(endpoint)
            .config()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .send_json(body);
        match result {
            Ok(mut resp) => {
                return resp
                    .body_mut()
                    .read_json::<Resp>()
                    .map_err(|e| ProviderError::BadResponse(e.to_string()));
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(ProviderError::Retriable {
        endpoint: endpoint.to_string(),
        attempts: RETRY_ATTEMPTS,
        message: last_err,
    })
}

/// Remote prompt scorer: POST `{"prompt": ..., "completion": ...}`,
/// response `{"logprob": ...}`. Three attempts with exponential backoff;
/// results are memoized on disk when a memo path is configured.
pub struct RemoteScorer {
    endpoint: String,
    memo: Option<MemoFile>,
    backoff_base: Duration,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteScorer {
            endpoint: endpoint.into(),
            memo: None,
            backoff_base: Duration::from_millis(250),
        }
    }

    pub fn with_memo(mut self, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        self.memo = Some(MemoFile::open(path)?);
        Ok(self)
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }
}

impl CompletionScorer for RemoteScorer {
    fn logprob(&self, prompt: &str, completion: &str) -> Result<f64, ProviderError> {
        if let Some(memo) = &self.memo {
            if let Some(v) = memo.get(prompt, completion) {
                return Ok(v);
            }
        }
        let resp: ScoreResponse = post_json(
            &self.endpoint,
            &ScoreRequest { prompt, completion },
            self.backoff_base,
        )?;
        if let Some(memo) = &self.memo {
            memo.put(prompt, completion, resp.logprob)?;
        }
        Ok(resp.logprob)
    }
}

/// Remote embedder: POST `{"text": ...}`, response `{"vector": [...]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    backoff_base: Duration,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.into(),
            backoff_base: Duration::from_millis(250),
        }
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let resp: EmbedResponse =
            post_json(&self.endpoint, &EmbedRequest { text }, self.backoff_base)?;
        Ok(resp.vector)
    }
}
