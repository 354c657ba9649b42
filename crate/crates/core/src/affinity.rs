//! Object-affinity matrices and their evaluation.
//!
//! A matrix row answers "given that I see object i, how likely is each
//! other object to be the one nearest it". Rows can come from prompt
//! completion probabilities, embedding dot products, a taxonomy oracle, or
//! a file, and are scored against the block-diagonal taxonomy ground truth
//! with per-row Jensen-Shannon divergence.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::provider::{CompletionScorer, ProviderError, TextEmbedder};

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("label '{0}' appears in more than one category group")]
    OverlappingGroups(String),
    #[error("matrix labels do not match: '{0}' vs '{1}'")]
    LabelMismatch(String, String),
    #[error("non-finite score for observed='{observed}' target='{target}'")]
    NonFiniteScore { observed: String, target: String },
    #[error("scorer failed for observed='{observed}' target='{target}': {source}")]
    Scorer {
        observed: String,
        target: String,
        source: ProviderError,
    },
    #[error("embedding for '{label}' has length {got}, expected {expected}")]
    EmbeddingLength {
        label: String,
        got: usize,
        expected: usize,
    },
    #[error("matrix values are invalid: {0}")]
    BadValues(String),
    #[error("matrix file is malformed: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-stochastic object-to-object affinity matrix. Entry `(row i, col j)`
/// is the affinity looked up as `lookup(observed = labels[i], target =
/// labels[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
    /// Rows that fell back to a uniform off-diagonal distribution.
    flagged_rows: Vec<usize>,
}

impl AffinityMatrix {
    pub fn from_rows(labels: Vec<String>, values: Vec<f64>) -> Result<Self, AffinityError> {
        if labels.len() < 2 {
            return Err(AffinityError::TooFewLabels(labels.len()));
        }
        let n = labels.len();
        if values.len() != n * n {
            return Err(AffinityError::BadValues(format!(
                "expected {} values, got {}",
                n * n,
                values.len()
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(AffinityError::DuplicateLabel(l.clone()));
            }
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(AffinityError::BadValues(format!("entry {v}")));
            }
        }
        for (i, row) in values.chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AffinityError::BadValues(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AffinityMatrix {
            labels,
            index,
            values,
            flagged_rows: Vec::new(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.labels.len() + col]
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, row: usize, col: usize, v: f64) {
        let n = self.labels.len();
        self.values[row * n + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.labels.len();
        &self.values[row * n..(row + 1) * n]
    }

    /// Affinity of `target` given that `observed` is the nearest object.
    pub fn lookup(&self, observed: &str, target: &str) -> Option<f64> {
        let i = *self.index.get(observed)?;
        let j = *self.index.get(target)?;
        Some(self.get(i, j))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Rows that fell back to uniform during construction.
    pub fn flagged_rows(&self) -> &[usize] {
        &self.flagged_rows
    }

    /// Serialize as `{labels:[...], rows:[[...], ...]}` with 9 significant
    /// digits per value.
    pub fn write(&self, w: &mut impl Write) -> Result<(), AffinityError> {
        let n = self.labels.len();
        writeln!(w, "{{")?;
        let labels_json: Vec<String> = self
            .labels
            .iter()
            .map(|l| serde_json::to_string(l).expect("string encodes"))
            .collect();
        writeln!(w, "  \"labels\": [{}],", labels_json.join(", "))?;
        writeln!(w, "  \"rows\": [")?;
        for i in 0..n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.8e}")).collect();
            let sep = if i + 1 < n { "," } else { "" };
            writeln!(w, "    [{}]{}", row.join(", "), sep)?;
        }
        writeln!(w, "  ]")?;
        writeln!(w, "}}")?;
        Ok(())
    }

    /// Parse a matrix file written by [`AffinityMatrix::write`]. Rows are
    /// renormalized to absorb the 9-digit rounding.
    pub fn read(r: &mut impl BufRead) -> Result<Self, AffinityError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let parsed: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AffinityError::BadFile(e.to_string()))?;
        let labels: Vec<String> = parsed
            .get("labels")
            .and_then(|v| v.as_array())
            .ok_or_else(|| AffinityError::BadFile("missing labels".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| AffinityError::BadFile("label is not a string".into()))
            })
            .collect::<Result<_, _>>()?;
        let rows = parsed
            .get("rows")
            .and_then(|v| v.as_array())
            .ok_or_else(|| AffinityError::BadFile("missing rows".into()))?;
        let mut values = Vec::with_capacity(labels.len() * labels.len());
        for row in rows {
            let row = row
                .as_array()
                .ok_or_else(|| AffinityError::BadFile("row is not an array".into()))?;
            let mut parsed_row: Vec<f64> = row
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| AffinityError::BadFile("value is not a number".into()))
                })
                .collect::<Result<_, _>>()?;
            let sum: f64 = parsed_row.iter().sum();
            if sum > 0.0 {
                for v in &mut parsed_row {
                    *v /= sum;
                }
            }
            values.extend(parsed_row);
        }
        Self::from_rows(labels, values)
    }
}

/// The closed-world scoring prompt. The observed label and the target are
/// embedded verbatim.
pub fn build_prompt(observed_label: &str, target: &str) -> String {
    format!(
        "I see the following in a room: {observed_label}. \
         This is likely to be the closest object to {target}"
    )
}

/// Number of scorer calls kept in flight while building a matrix.
pub const DEFAULT_SCORER_PARALLELISM: usize = 8;

/// Build a matrix from completion log-probabilities: entry (observed i,
/// target j) is `exp(logprob)` for the prompt pairing them, the diagonal is
/// zeroed, and each row is normalized to sum 1.
pub fn build_matrix_llm(
    labels: &[String],
    scorer: &(impl CompletionScorer + Sync),
) -> Result<AffinityMatrix, AffinityError> {
    build_matrix_llm_with(labels, scorer, DEFAULT_SCORER_PARALLELISM)
}

pub fn build_matrix_llm_with(
    labels: &[String],
    scorer: &(impl CompletionScorer + Sync),
    parallelism: usize,
) -> Result<AffinityMatrix, AffinityError> {
    if labels.len() < 2 {
        return Err(AffinityError::TooFewLabels(labels.len()));
    }
    let n = labels.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let scores = score_pairs(labels, scorer, &pairs, parallelism.max(1))?;
    let mut values = vec![0.0; n * n];
    for ((i, j), logprob) in pairs.iter().zip(&scores) {
        if !logprob.is_finite() {
            return Err(AffinityError::NonFiniteScore {
                observed: labels[*i].clone(),
                target: labels[*j].clone(),
            });
        }
        values[i * n + j] = logprob.exp();
    }
    let mut flagged = Vec::new();
    for i in 0..n {
        normalize_row_or_uniform(&mut values[i * n..(i + 1) * n], i, &mut flagged);
    }
    let mut m = AffinityMatrix::from_rows(labels.to_vec(), values)?;
    m.flagged_rows = flagged;
    Ok(m)
}

/// Fan scorer calls out over a bounded worker pool; cells are independent
/// so completion order does not matter.
fn score_pairs(
    labels: &[String],
    scorer: &(impl CompletionScorer + Sync),
    pairs: &[(usize, usize)],
    parallelism: usize,
) -> Result<Vec<f64>, AffinityError> {
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Mutex;

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Vec<Mutex<Option<Result<f64, AffinityError>>>> =
        pairs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(pairs.len()) {
            scope.spawn(|| loop {
                // Stop dispatching once any cell has failed; the first
                // error is what the caller reports.
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= pairs.len() {
                    break;
                }
                let (i, j) = pairs[k];
                let prompt = build_prompt(&labels[i], &labels[j]);
                let r =
                    scorer
                        .logprob(&prompt, &labels[j])
                        .map_err(|source| AffinityError::Scorer {
                            observed: labels[i].clone(),
                            target: labels[j].clone(),
                            source,
                        });
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                *results[k].lock().expect("worker never poisons") = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(pairs.len());
    for m in results {
        match m.into_inner().expect("no poison") {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => return Err(e),
            // Unreached cells after an abort.
            None => return Err(first_error_unfilled()),
        }
    }
    Ok(out)
}

fn first_error_unfilled() -> AffinityError {
    AffinityError::BadValues("scoring aborted after an earlier failure".into())
}

fn normalize_row_or_uniform(row: &mut [f64], diag: usize, flagged: &mut Vec<usize>) {
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        for v in row.iter_mut() {
            *v /= sum;
        }
    } else {
        flagged.push(diag);
        let share = 1.0 / (row.len() - 1) as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == diag { 0.0 } else { share };
        }
    }
}

/// Build a matrix from embedding dot products: raw entry is `dot(e_i,
/// e_j)`, the diagonal is zeroed, then per row the minimum is subtracted,
/// entries are raised to `1 / temperature`, and the row is normalized.
/// Rows that end up all zero fall back to uniform off-diagonal and are
/// flagged.
pub fn build_matrix_embedding(
    labels: &[String],
    embedder: &impl TextEmbedder,
    temperature: f64,
) -> Result<AffinityMatrix, AffinityError> {
    if labels.len() < 2 {
        return Err(AffinityError::TooFewLabels(labels.len()));
    }
    assert!(temperature > 0.0, "temperature must be positive");
    let n = labels.len();
    let mut vectors = Vec::with_capacity(n);
    for label in labels {
        let v = embedder
            .embed(label)
            .map_err(|source| AffinityError::Scorer {
                observed: label.clone(),
                target: label.clone(),
                source,
            })?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(AffinityError::NonFiniteScore {
                observed: label.clone(),
                target: label.clone(),
            });
        }
        if let Some(first) = vectors.first() {
            let expected = Vec::len(first);
            if v.len() != expected {
                return Err(AffinityError::EmbeddingLength {
                    label: label.clone(),
                    got: v.len(),
                    expected,
                });
            }
        }
        vectors.push(v);
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            values[i * n + j] = dot(&vectors[i], &vectors[j]);
        }
    }
    let mut flagged = Vec::new();
    for i in 0..n {
        let row = &mut values[i * n..(i + 1) * n];
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        for v in row.iter_mut() {
            *v -= min;
        }
        for v in row.iter_mut() {
            *v = v.powf(1.0 / temperature);
        }
        normalize_row_or_uniform(row, i, &mut flagged);
    }
    let mut m = AffinityMatrix::from_rows(labels.to_vec(), values)?;
    m.flagged_rows = flagged;
    Ok(m)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Block-diagonal ground truth from category groups: the row of a label in
/// group G puts mass 1/|G| on every member of G including the label
/// itself, and zero elsewhere. Singleton groups give one-hot rows.
pub fn ground_truth_matrix(groups: &[Vec<String>]) -> Result<AffinityMatrix, AffinityError> {
    let labels: Vec<String> = groups.iter().flatten().cloned().collect();
    let n = labels.len();
    if n < 2 {
        return Err(AffinityError::TooFewLabels(n));
    }
    let mut seen = HashMap::new();
    for (g, group) in groups.iter().enumerate() {
        for label in group {
            if seen.insert(label.clone(), g).is_some() {
                return Err(AffinityError::OverlappingGroups(label.clone()));
            }
        }
    }
    let mut values = vec![0.0; n * n];
    let mut offset = 0usize;
    for group in groups {
        let share = 1.0 / group.len() as f64;
        for i in 0..group.len() {
            for j in 0..group.len() {
                values[(offset + i) * n + (offset + j)] = share;
            }
        }
        offset += group.len();
    }
    AffinityMatrix::from_rows(labels, values)
}

/// Base-2 Jensen-Shannon divergence between two distributions. Symmetric
/// and bounded in [0, 1].
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).log2();
        }
    }
    acc
}

/// Score a candidate matrix against a ground truth: mean per-row base-2
/// Jensen-Shannon divergence, plus the improvement over the uniform
/// baseline `(uniform_mean - candidate_mean) / uniform_mean`. The baseline
/// row is uniform over all labels.
pub fn jsd_score(
    candidate: &AffinityMatrix,
    truth: &AffinityMatrix,
) -> Result<(f64, f64), AffinityError> {
    if candidate.labels() != truth.labels() {
        let c = candidate.labels().join(",");
        let t = truth.labels().join(",");
        return Err(AffinityError::LabelMismatch(c, t));
    }
    let n = truth.len();
    let uniform = vec![1.0 / n as f64; n];
    let mut cand_mean = 0.0;
    let mut unif_mean = 0.0;
    for i in 0..n {
        cand_mean += js_divergence(candidate.row(i), truth.row(i));
        unif_mean += js_divergence(&uniform, truth.row(i));
    }
    cand_mean /= n as f64;
    unif_mean /= n as f64;
    let improvement = (unif_mean - cand_mean) / unif_mean;
    Ok((cand_mean, improvement))
}

/// A uniform matrix over the given labels (every row 1/n on all entries),
/// the baseline of the evaluation protocol.
pub fn uniform_matrix(labels: &[String]) -> Result<AffinityMatrix, AffinityError> {
    let n = labels.len();
    if n < 2 {
        return Err(AffinityError::TooFewLabels(n));
    }
    AffinityMatrix::from_rows(labels.to_vec(), vec![1.0 / n as f64; n * n])
}
