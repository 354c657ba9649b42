//! Simulated detection, OCR-style refinement, and the first-seen ledger.
//!
//! The simulator assumes identity tracking is perfect and perturbs only
//! labels: with probability `noise_p` a detection reports a uniformly
//! random label from the closed object list. The OCR path fuses a raw
//! text-similarity vector into a detection belief by min-subtract /
//! temperature / epsilon normalization followed by an elementwise product.

use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;

use crate::model::{Scene, VisibilityReport};
use crate::occupancy::{KnownObject, KnownWorld};
use crate::rng::rng_from_seed;

/// Probability vector over a closed label list, plus its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBelief {
    pub label_probs: Vec<f64>,
}

impl DetectionBelief {
    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut label_probs = vec![0.0; n];
        label_probs[index] = 1.0;
        DetectionBelief { label_probs }
    }

    pub fn argmax_index(&self) -> usize {
        self.label_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty belief")
    }

    pub fn argmax_label<'a>(&self, labels: &'a [String]) -> &'a str {
        &labels[self.argmax_index()]
    }

    pub fn is_normalized(&self) -> bool {
        (self.label_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            && self.label_probs.iter().all(|&p| p >= 0.0)
    }
}

/// Raw per-class similarity scores from detected text (dot products of the
/// concatenated-text embedding against every class label embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct OcrSignal {
    pub scores: Vec<f64>,
}

/// Simulated detection of an object with true label `true_label`: with
/// probability `noise_p` the reported label is uniform over the closed
/// list (possibly the true one), else the truth. The belief is one-hot on
/// the report. Deterministic per seed; derive the seed from the rollout
/// seed and the object identity.
pub fn simulate_detection(
    true_label: &str,
    object_list: &[String],
    noise_p: f64,
    rng_seed: u64,
) -> DetectionBelief {
    assert!((0.0..=1.0).contains(&noise_p), "noise_p in [0,1]");
    let true_index = object_list
        .iter()
        .position(|l| l == true_label)
        .expect("true label in closed list");
    let mut rng = rng_from_seed(rng_seed);
    let perturb = noise_p > 0.0 && rng.random_range(0.0..1.0) < noise_p;
    let reported = if perturb {
        rng.random_range(0..object_list.len())
    } else {
        true_index
    };
    DetectionBelief::one_hot(object_list.len(), reported)
}

/// Refine a detection belief with an OCR signal: shift scores by their
/// minimum, floor with `epsilon`, apply the `1/temperature` power,
/// renormalize, and multiply into the belief. A numerically zero product
/// returns the belief unchanged (flagged by the boolean).
pub fn ocr_refine(
    belief: &DetectionBelief,
    ocr: &OcrSignal,
    temperature: f64,
    epsilon: f64,
) -> (DetectionBelief, bool) {
    assert_eq!(
        belief.label_probs.len(),
        ocr.scores.len(),
        "belief and OCR signal must align"
    );
    assert!(temperature > 0.0, "temperature must be positive");
    let min = ocr.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = ocr
        .scores
        .iter()
        .map(|s| (s - min + epsilon).powf(1.0 / temperature))
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return (belief.clone(), true);
    }
    for w in &mut weights {
        *w /= wsum;
    }
    let mut probs: Vec<f64> = belief
        .label_probs
        .iter()
        .zip(&weights)
        .map(|(p, w)| p * w)
        .collect();
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return (belief.clone(), true);
    }
    for p in &mut probs {
        *p /= total;
    }
    (DetectionBelief { label_probs: probs }, false)
}

/// Default OCR fusion parameters.
pub const DEFAULT_OCR_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_OCR_EPSILON: f64 = 0.01;

/// Append newly detected objects to the first-seen ledger. Entries are
/// write-once: re-observation never updates the stored label or pose, even
/// if the object has since moved.
pub fn record_first_seen(
    world: &mut KnownWorld,
    report: &VisibilityReport,
    scene: &Scene,
    beliefs: &HashMap<usize, String>,
) {
    for index in report.detected_indices() {
        if world.knows(index) {
            continue;
        }
        let obj = &scene.objects[index];
        let label = beliefs
            .get(&index)
            .cloned()
            .unwrap_or_else(|| obj.spec.name.clone());
        world.objects.push(KnownObject {
            object_index: index,
            label,
            first_seen: obj.position,
            current: obj.position,
            dims: obj.spec.dims,
        });
    }
}

/// OCR fixture file: `{object_name: {"scores": [...]}}` aligned to the
/// active object list.
pub fn read_ocr_fixture(r: &mut impl BufRead) -> std::io::Result<HashMap<String, OcrSignal>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let parsed: HashMap<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut out = HashMap::new();
    for (name, entry) in parsed {
        let scores = entry
            .get("scores")
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "missing scores array")
            })?
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, "score is not a number")
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.insert(name, OcrSignal { scores });
    }
    Ok(out)
}
