//! Acceptance suite: one pass/fail line per criterion, run with
//! `cargo test -p mechsearch-cli --test acceptance -- --nocapture`.

use std::collections::HashSet;
use std::time::Instant;

use mechsearch_cli::experiment::{mean_stderr, run_bench, ExperimentConfig};
use mechsearch_core::affinity::{ground_truth_matrix, jsd_score, uniform_matrix};
use mechsearch_core::model::{footprint_at, observe};
use mechsearch_core::occupancy::{
    combine, gaussian_smooth, opening_crossing, project_to_1d_area, semantic_grid, spatial_grid,
    update_explored_and_spatial, Distribution1D, KnownObject, KnownWorld,
};
use mechsearch_core::openworld::{
    aggregate, encode_rle, iou_at_threshold, percentile_90, select_view, CropMask, CropRecord,
    Heatmap, ThresholdRule,
};
use mechsearch_core::perception::{ocr_refine, DetectionBelief, OcrSignal};
use mechsearch_core::policy::{
    candidate_actions, dar_select, der_select, Action, DerContext, Policy,
};
use mechsearch_core::rng::{derive_seed, rng_from_seed};
use mechsearch_core::scenegen::{
    generate_accepted_scenes, SceneGenConfig, TaxonomyNode, PHARMACY_TAXONOMY,
};
use mechsearch_core::{Scene, ShelfSpec};
use rand::Rng;

fn pharmacy() -> TaxonomyNode {
    TaxonomyNode::parse(PHARMACY_TAXONOMY).unwrap()
}

fn pass(criterion: usize, details: &str) {
    println!("[acceptance] criterion {criterion}: PASS - {details}");
}

/// Criterion 1: the uniform matrix scores 0.65 +- 0.01 mean base-2
/// Jensen-Shannon divergence against the pharmacy ground truth, confirmed
/// by an independent entropy-form computation, in under a second.
#[test]
fn criterion_1_uniform_jsd_reproduction() {
    let start = Instant::now();
    let truth = ground_truth_matrix(&pharmacy().category_groups()).unwrap();
    assert_eq!(truth.len(), 27);
    let uniform = uniform_matrix(truth.labels()).unwrap();
    let (mean, improvement) = jsd_score(&uniform, &truth).unwrap();

    // Independent brute-force oracle: JSD = H(m) - (H(p) + H(q)) / 2.
    fn entropy(row: &[f64]) -> f64 {
        -row.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f64>()
    }
    let u = vec![1.0 / 27.0; 27];
    let mut oracle_sum = 0.0;
    for i in 0..27 {
        let q = truth.row(i);
        let m: Vec<f64> = u.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        oracle_sum += entropy(&m) - 0.5 * (entropy(&u) + entropy(q));
    }
    let oracle_mean = oracle_sum / 27.0;

    assert!(
        (mean - oracle_mean).abs() < 1e-9,
        "implementation {mean} vs oracle {oracle_mean}"
    );
    assert!(
        (oracle_mean - 0.653).abs() < 0.001,
        "oracle mean {oracle_mean} drifted from the expected 0.653"
    );
    assert!(
        (mean - 0.65).abs() <= 0.01,
        "mean JSD {mean} outside 0.65 +- 0.01"
    );
    assert!(improvement.abs() < 1e-12);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(
        1,
        &format!("uniform JSD {mean:.4} (oracle {oracle_mean:.4}) in {elapsed:?}"),
    );
}

fn criterion2_config() -> ExperimentConfig {
    ExperimentConfig {
        domain: "pharmacy".into(),
        n_objects: vec![15],
        scenes_per_n: 200,
        methods: vec!["spatial-only".into(), "sms-oracle".into()],
        policy: Policy::Dar,
        noise_p: vec![0.0],
        seed: 7,
        sigma_bins: 50.0,
        grid_k: 16,
        visibility_x: 0.01,
        taxonomy: None,
        scale_factor: None,
        embedding_endpoint: None,
    }
}

/// Criteria 2 and 5 share one 200-scene benchmark run.
///
/// Criterion 2: with the taxonomy-oracle matrix on 200 pharmacy scenes at
/// N = 15, semantic+spatial DAR needs at most 0.85x the spatial-only mean
/// actions and within 2 successes of the baseline, inside 15 minutes.
///
/// Criterion 5: across at least 500 noise-free rollout steps from those
/// runs, the true target's ray bin always carries positive combined mass,
/// every emitted distribution is normalized within 1e-9, and smoothing
/// matches the O(B^2) oracle.
#[test]
fn criteria_2_and_5_semantic_speedup_and_soundness() {
    let start = Instant::now();
    let outcome = run_bench(&criterion2_config()).unwrap();
    let spatial = outcome
        .cells
        .iter()
        .find(|c| c.method == "spatial-only")
        .unwrap();
    let semantic = outcome
        .cells
        .iter()
        .find(|c| c.method == "sms-oracle")
        .unwrap();

    let (spatial_mean, _) = mean_stderr(&spatial.actions_all());
    let (semantic_mean, _) = mean_stderr(&semantic.actions_all());
    let ratio = semantic_mean / spatial_mean;
    assert!(
        ratio <= 0.85,
        "semantic mean {semantic_mean:.3} vs spatial {spatial_mean:.3}: ratio {ratio:.3} > 0.85"
    );
    let (s_ok, sem_ok) = (spatial.successes(), semantic.successes());
    assert!(
        sem_ok + 2 >= s_ok,
        "semantic successes {sem_ok} below spatial {s_ok} - 2"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 900.0,
        "benchmark exceeded 15 minutes: {elapsed:?}"
    );
    pass(
        2,
        &format!(
            "DAR actions {semantic_mean:.2} (semantic) vs {spatial_mean:.2} (spatial), \
             ratio {ratio:.3}, successes {sem_ok}/{} vs {s_ok}/{}, {elapsed:?}",
            semantic.records.len(),
            spatial.records.len()
        ),
    );

    // Criterion 5a: soundness and normalization over the same records.
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut max_norm: f64 = 0.0;
    for record in spatial.records.iter().chain(&semantic.records) {
        checks += record.soundness_checks;
        violations += record.soundness_violations;
        max_norm = max_norm.max(record.max_norm_err);
    }
    assert!(checks >= 500, "only {checks} soundness checks sampled");
    assert_eq!(violations, 0, "{violations} truth-bin mass violations");
    assert!(max_norm <= 1e-9, "worst normalization error {max_norm:.3e}");

    // Criterion 5b: Gaussian smoothing vs the naive O(B^2) convolution
    // oracle on 20 random inputs, and exact mass preservation.
    let mut rng = rng_from_seed(4242);
    for case in 0..20 {
        let b = 512;
        let sigma = rng.random_range(0.5..80.0);
        let mut mass: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        // Mix in sparse spikes to exercise the boundary reflection.
        if case % 3 == 0 {
            mass.iter_mut().for_each(|m| *m = 0.0);
            for _ in 0..4 {
                let at = rng.random_range(0..b);
                mass[at] = rng.random_range(0.1..1.0);
            }
        }
        let total: f64 = mass.iter().sum();
        let dist = Distribution1D {
            mass: mass.iter().map(|m| m / total).collect(),
        };
        let smoothed = gaussian_smooth(&dist, sigma);
        assert!((smoothed.total() - 1.0).abs() <= 1e-9);
        let oracle = naive_reflected_convolution(&dist.mass, sigma);
        for (a, b) in smoothed.mass.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9, "smoothing diverged from oracle");
        }
    }
    pass(
        5,
        &format!(
            "{checks} steps, 0 violations, max norm err {max_norm:.2e}, \
             smoothing matches O(B^2) oracle on 20 inputs"
        ),
    );
}

/// Independent naive convolution with one-level symmetric reflection.
fn naive_reflected_convolution(input: &[f64], sigma: f64) -> Vec<f64> {
    let b = input.len() as isize;
    let reflect = |mut i: isize| -> usize {
        if i < 0 {
            i = -i - 1;
        }
        if i >= b {
            i = 2 * b - 1 - i;
        }
        i as usize
    };
    let mut out = vec![0.0; input.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for d in -(b - 1)..=(b - 1) {
            let w = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
            wsum += w;
            acc += w * input[reflect(i as isize + d)];
        }
        *o = acc / wsum;
    }
    let total: f64 = out.iter().sum();
    out.iter().map(|v| v / total).collect()
}

/// Criterion 3: over 100 pharmacy scenes at N = 15, mean actions for
/// noise_p in {0, 0.1, 0.5, 0.9} are non-decreasing within one pooled
/// standard error per adjacent pair, and the 0.9 mean stays within one
/// standard error above the spatial-only mean.
#[test]
fn criterion_3_noise_monotonicity() {
    let mut cfg = criterion2_config();
    cfg.scenes_per_n = 100;
    cfg.noise_p = vec![0.0, 0.1, 0.5, 0.9];
    let outcome = run_bench(&cfg).unwrap();

    let stats = |method: &str| -> (f64, f64) {
        let cell = outcome
            .cells
            .iter()
            .find(|c| c.method == method)
            .unwrap_or_else(|| panic!("missing cell {method}"));
        mean_stderr(&cell.actions_all())
    };
    let ladder = [
        stats("sms-oracle"),
        stats("sms-oracle+noise0.1"),
        stats("sms-oracle+noise0.5"),
        stats("sms-oracle+noise0.9"),
    ];
    for k in 0..ladder.len() - 1 {
        let (m0, s0) = ladder[k];
        let (m1, s1) = ladder[k + 1];
        let pooled = (s0 * s0 + s1 * s1).sqrt();
        assert!(
            m1 >= m0 - pooled,
            "noise ladder step {k}: {m1:.3} < {m0:.3} - pooled SE {pooled:.3}"
        );
    }
    let (spatial_mean, spatial_se) = stats("spatial-only");
    let (noisy_mean, _) = ladder[3];
    assert!(
        noisy_mean <= spatial_mean + spatial_se,
        "noise 0.9 mean {noisy_mean:.3} above spatial {spatial_mean:.3} + {spatial_se:.3}"
    );
    pass(
        3,
        &format!(
            "means {:.2} / {:.2} / {:.2} / {:.2} vs spatial {spatial_mean:.2} +- {spatial_se:.2}",
            ladder[0].0, ladder[1].0, ladder[2].0, ladder[3].0
        ),
    );
}

/// Independent re-implementation of candidate enumeration and greedy
/// scoring for small scenes, used as the criterion-4 oracle.
mod oracle {
    use super::*;

    fn feasible(scene: &Scene, action: &Action) -> bool {
        let obj = &scene.objects[action.object()];
        let dims = obj.spec.dims;
        let from = obj.position;
        let to = action.destination(from);
        let fp = footprint_at(to, dims);
        let w = scene.shelf.width;
        let d = scene.shelf.depth;
        if fp.x0 < 0.0 || fp.x1 > w || fp.y0 < 0.0 || fp.y1 > d {
            return false;
        }
        let others: Vec<_> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != action.object())
            .map(|(_, o)| o.footprint())
            .collect();
        match action {
            Action::Push { to_x, .. } => {
                let sweep = footprint_at(
                    [((from[0] + to_x) / 2.0), from[1]],
                    [dims[0] + (to_x - from[0]).abs(), dims[1], dims[2]],
                );
                others.iter().all(|f| !sweep.overlaps_open(f))
            }
            Action::Suction { to, .. } => {
                if others.iter().any(|f| fp.overlaps_open(f)) {
                    return false;
                }
                others
                    .iter()
                    .all(|f| !(f.x0 < fp.x1 && fp.x0 < f.x1 && f.y0 < to[1] - dims[1] / 2.0))
            }
        }
    }

    pub fn candidates(scene: &Scene, detected: &[usize], grid_k: usize) -> Vec<Action> {
        let mut out = Vec::new();
        for &object in detected {
            let from = scene.objects[object].position;
            for k in 0..grid_k {
                let to_x = scene.shelf.width * (k as f64 + 0.5) / grid_k as f64;
                if (to_x - from[0]).abs() < 0.005 {
                    continue;
                }
                let a = Action::Push { object, to_x };
                if feasible(scene, &a) {
                    out.push(a);
                }
            }
            let rows = (grid_k / 2).max(1);
            for ix in 0..grid_k {
                for iy in 0..rows {
                    let to = [
                        scene.shelf.width * (ix as f64 + 0.5) / grid_k as f64,
                        scene.shelf.depth * (iy as f64 + 0.5) / rows as f64,
                    ];
                    if (to[0] - from[0]).hypot(to[1] - from[1]) < 0.005 {
                        continue;
                    }
                    let a = Action::Suction { object, to };
                    if feasible(scene, &a) {
                        out.push(a);
                    }
                }
            }
        }
        out
    }

    fn silhouette_covered(
        dist: &Distribution1D,
        shelf: &ShelfSpec,
        geometry: &[([f64; 2], [f64; 3])],
    ) -> f64 {
        let bins = dist.bins();
        let mut covered = vec![false; bins];
        for (pos, dims) in geometry {
            let fp = footprint_at(*pos, *dims);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (x, y) in [
                (fp.x0, fp.y0),
                (fp.x1, fp.y0),
                (fp.x0, fp.y1),
                (fp.x1, fp.y1),
            ] {
                let u = opening_crossing(shelf, x, y);
                lo = lo.min(u);
                hi = hi.max(u);
            }
            for (b, c) in covered.iter_mut().enumerate() {
                let center = (b as f64 + 0.5) / bins as f64;
                if center >= lo && center <= hi {
                    *c = true;
                }
            }
        }
        dist.mass
            .iter()
            .zip(&covered)
            .filter(|(_, &c)| c)
            .map(|(m, _)| m)
            .sum()
    }

    fn moved(world: &KnownWorld, action: &Action) -> Vec<([f64; 2], [f64; 3])> {
        world
            .objects
            .iter()
            .map(|o| {
                if o.object_index == action.object() {
                    (action.destination(o.current), o.dims)
                } else {
                    (o.current, o.dims)
                }
            })
            .collect()
    }

    fn tie(world: &KnownWorld, a: &Action) -> (f64, usize, f64, f64) {
        let from = world.by_object_index(a.object()).unwrap().current;
        let to = a.destination(from);
        let disp = (to[0] - from[0]).hypot(to[1] - from[1]);
        (disp, a.object(), to[0], to[1])
    }

    fn argmin(world: &KnownWorld, scored: Vec<(Action, f64)>) -> (Action, f64) {
        scored
            .into_iter()
            .min_by(|(a, sa), (b, sb)| {
                sa.total_cmp(sb).then_with(|| {
                    let (da, oa, xa, ya) = tie(world, a);
                    let (db, ob, xb, yb) = tie(world, b);
                    da.total_cmp(&db)
                        .then(oa.cmp(&ob))
                        .then(xa.total_cmp(&xb))
                        .then(ya.total_cmp(&yb))
                })
            })
            .unwrap()
    }

    pub fn dar(
        candidates: &[Action],
        dist: &Distribution1D,
        world: &KnownWorld,
        shelf: &ShelfSpec,
    ) -> (Action, f64) {
        let scored = candidates
            .iter()
            .map(|a| (*a, silhouette_covered(dist, shelf, &moved(world, a))))
            .collect();
        argmin(world, scored)
    }

    pub fn der(candidates: &[Action], ctx: &DerContext, world: &KnownWorld) -> (Action, f64) {
        let scored = candidates
            .iter()
            .map(|a| {
                let (grid, _) = spatial_grid(
                    &moved(world, a),
                    ctx.target_dims,
                    ctx.shelf,
                    ctx.visibility_threshold,
                    ctx.feasibility_samples,
                    &world.explored,
                );
                let spatial1 = project_to_1d_area(&grid, ctx.shelf, ctx.bins);
                let dist = match ctx.semantic {
                    Some(sem) => combine(sem, &spatial1).0,
                    None => spatial1,
                };
                // Independent entropy.
                let h = -dist
                    .mass
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.log2())
                    .sum::<f64>();
                (*a, h)
            })
            .collect();
        argmin(world, scored)
    }
}

/// Criterion 4: on 50 random scenes with at most 3 objects and grid_k = 4,
/// DAR and DER selections match the exhaustive oracle on every scene.
#[test]
fn criterion_4_greedy_policy_oracle_equivalence() {
    let tax = pharmacy();
    let shelf = ShelfSpec::default();
    let matrix = ground_truth_matrix(&tax.category_groups()).unwrap();
    let mut scenes: Vec<Scene> = Vec::new();
    for (n, count, seed) in [(2usize, 25usize, 31u64), (3, 25, 32)] {
        let cfg = SceneGenConfig::new(n, seed, 0.7);
        let (batch, _) = generate_accepted_scenes(&tax, &cfg, &shelf, count).unwrap();
        scenes.extend(batch);
    }
    assert_eq!(scenes.len(), 50);

    let grid_k = 4;
    let mut dar_checked = 0;
    let mut der_checked = 0;
    for scene in &scenes {
        let report = observe(scene, 0.05);
        let detected = report.detected_indices();
        if detected.is_empty() {
            continue;
        }
        let mut world = KnownWorld::new(160, 70);
        for &i in &detected {
            let o = &scene.objects[i];
            world.objects.push(KnownObject {
                object_index: i,
                label: o.spec.name.clone(),
                first_seen: o.position,
                current: o.position,
                dims: o.spec.dims,
            });
        }
        let target = scene.target();
        let (spatial2, _) =
            update_explored_and_spatial(&mut world, target.spec.dims, &shelf, 0.5, 8);
        let spatial1 = project_to_1d_area(&spatial2, &shelf, 512);
        let (sem2, _) = semantic_grid(&world, &target.spec.name, &matrix, 160, 70, &shelf);
        let sem1 = gaussian_smooth(&project_to_1d_area(&sem2, &shelf, 512), 50.0);
        let (dist, _) = combine(&sem1, &spatial1);

        let candidates = match candidate_actions(scene, &detected, grid_k) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let oracle_candidates = oracle::candidates(scene, &detected, grid_k);
        assert_eq!(candidates, oracle_candidates, "candidate sets diverge");

        let (chosen, score) = dar_select(&candidates, &dist, &world, &shelf);
        let (oracle_choice, oracle_score) = oracle::dar(&candidates, &dist, &world, &shelf);
        assert_eq!(chosen, oracle_choice, "DAR selection diverges");
        assert!((score - oracle_score).abs() < 1e-12);
        dar_checked += 1;

        let ctx = DerContext {
            semantic: Some(&sem1),
            target_dims: target.spec.dims,
            shelf: &shelf,
            visibility_threshold: 0.5,
            feasibility_samples: 8,
            bins: 512,
        };
        let (chosen_der, entropy) = der_select(&candidates, &ctx, &world);
        let (oracle_der, oracle_entropy) = oracle::der(&candidates, &ctx, &world);
        assert_eq!(chosen_der, oracle_der, "DER selection diverges");
        assert!((entropy - oracle_entropy).abs() < 1e-12);
        der_checked += 1;
    }
    assert!(dar_checked >= 45, "only {dar_checked} scenes exercised");
    pass(
        4,
        &format!("DAR and DER match the exhaustive oracle on {dar_checked}/{der_checked} scenes"),
    );
}

/// Criterion 6: 100 generated pharmacy scenes at N = 12 are collision-free
/// and in bounds, regenerate byte-identically, and cluster categories.
#[test]
fn criterion_6_scene_generation_semantic_coherence() {
    let tax = pharmacy();
    let shelf = ShelfSpec::default();
    let cfg = SceneGenConfig::new(12, 2026, 0.7);
    let (scenes, _) = generate_accepted_scenes(&tax, &cfg, &shelf, 100).unwrap();
    assert_eq!(scenes.len(), 100);

    let checksum = |scenes: &[Scene]| -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for scene in scenes {
            let mut buf = Vec::new();
            mechsearch_core::sceneio::write_scene(&mut buf, scene).unwrap();
            for b in buf {
                acc ^= b as u64;
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    };
    let first = checksum(&scenes);
    let (again, _) = generate_accepted_scenes(&tax, &cfg, &shelf, 100).unwrap();
    assert_eq!(first, checksum(&again), "corpus checksum changed on re-run");

    let mut intra = (0.0f64, 0usize);
    let mut inter = (0.0f64, 0usize);
    for scene in &scenes {
        scene.validate().unwrap();
        for i in 0..scene.objects.len() {
            for j in i + 1..scene.objects.len() {
                let a = &scene.objects[i];
                let b = &scene.objects[j];
                assert!(!mechsearch_core::footprints_collide(a, b));
                let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
                if a.spec.category() == b.spec.category() {
                    intra.0 += d;
                    intra.1 += 1;
                } else {
                    inter.0 += d;
                    inter.1 += 1;
                }
            }
        }
    }
    let mean_intra = intra.0 / intra.1 as f64;
    let mean_inter = inter.0 / inter.1 as f64;
    assert!(
        mean_intra < mean_inter,
        "intra {mean_intra:.4} not below inter {mean_inter:.4}"
    );
    pass(
        6,
        &format!(
            "100 valid scenes, checksum {first:016x} stable, intra {mean_intra:.3} < inter {mean_inter:.3}"
        ),
    );
}

/// Criterion 7: fusing a 0.40-accurate detector with a 0.80-accurate OCR
/// signal over 10k synthetic trials reaches at least 0.60 top-1 accuracy,
/// and a uniform OCR signal leaves beliefs unchanged to 1e-12.
#[test]
fn criterion_7_ocr_refinement_lift() {
    let k = 10usize;
    let trials = 10_000u64;
    let mut detector_hits = 0usize;
    let mut refined_hits = 0usize;
    for t in 0..trials {
        let mut rng = rng_from_seed(derive_seed(20_260_808, t));
        let truth = rng.random_range(0..k);
        let pick_wrong = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut other = rng.random_range(0..k - 1);
            if other >= truth {
                other += 1;
            }
            other
        };
        let det_argmax = if rng.random_range(0.0..1.0) < 0.40 {
            truth
        } else {
            pick_wrong(&mut rng)
        };
        let mut probs = vec![0.5 / (k - 1) as f64; k];
        probs[det_argmax] = 0.5;
        let belief = DetectionBelief { label_probs: probs };
        let ocr_argmax = if rng.random_range(0.0..1.0) < 0.80 {
            truth
        } else {
            pick_wrong(&mut rng)
        };
        let mut scores = vec![0.0; k];
        scores[ocr_argmax] = 1.0;
        let (refined, _) = ocr_refine(&belief, &OcrSignal { scores }, 1.0, 0.01);
        assert!(refined.is_normalized());
        if det_argmax == truth {
            detector_hits += 1;
        }
        if refined.argmax_index() == truth {
            refined_hits += 1;
        }
    }
    let base = detector_hits as f64 / trials as f64;
    let refined = refined_hits as f64 / trials as f64;
    assert!((base - 0.40).abs() < 0.02, "detector accuracy {base}");
    assert!(refined >= 0.60, "refined accuracy {refined} below 0.60");
    assert!(refined > base);

    // Uniform OCR scores must be a no-op.
    let belief = DetectionBelief {
        label_probs: vec![0.5, 0.3, 0.2],
    };
    let (unchanged, _) = ocr_refine(
        &belief,
        &OcrSignal {
            scores: vec![3.3, 3.3, 3.3],
        },
        1.0,
        0.01,
    );
    for (a, b) in unchanged.label_probs.iter().zip(&belief.label_probs) {
        assert!((a - b).abs() <= 1e-12);
    }
    pass(
        7,
        &format!("detector {base:.3} -> refined {refined:.3} over {trials} trials"),
    );
}

/// Criterion 8: per-pixel aggregation matches the brute-force reference
/// exactly on 20 random fixtures; IoU and 90-percentile view selection
/// match set/sorting oracles; select_view is invariant to relevance scale.
#[test]
fn criterion_8_openworld_aggregation_exactness() {
    let mut rng = rng_from_seed(808);
    for case in 0..20 {
        let width = rng.random_range(8..32usize);
        let height = rng.random_range(8..24usize);
        let n_crops = rng.random_range(1..8usize);
        let mut crops = Vec::new();
        for c in 0..n_crops {
            let mask = if c % 2 == 0 {
                let x0 = rng.random_range(0..width as u32 - 1);
                let y0 = rng.random_range(0..height as u32 - 1);
                let x1 = rng.random_range(x0 + 1..=width as u32);
                let y1 = rng.random_range(y0 + 1..=height as u32);
                CropMask::Rect {
                    rect: [x0, y0, x1, y1],
                }
            } else {
                let count = rng.random_range(1..width * height / 2);
                let pixels: Vec<usize> = (0..count)
                    .map(|_| rng.random_range(0..width * height))
                    .collect();
                CropMask::Rle {
                    mask_rle: encode_rle(&pixels),
                }
            };
            crops.push(CropRecord {
                mask,
                label: format!("crop{c}"),
                relevance: rng.random_range(0.0..2.0),
                affinity: rng.random_range(0.0..1.0),
            });
        }
        let heat = aggregate(&crops, width, height).unwrap();

        // Per-pixel brute-force reference, bit-exact.
        let pixels_of = |mask: &CropMask| -> Vec<usize> {
            match mask {
                CropMask::Rect { rect } => {
                    let [x0, y0, x1, y1] = rect.map(|v| v as usize);
                    (y0..y1)
                        .flat_map(|y| (x0..x1).map(move |x| y * width + x))
                        .collect()
                }
                CropMask::Rle { mask_rle } => {
                    mechsearch_core::openworld::parse_rle(mask_rle, width * height).unwrap()
                }
            }
        };
        for p in 0..width * height {
            let mut sum = 0.0f64;
            let mut count = 0u32;
            for crop in &crops {
                if pixels_of(&crop.mask).contains(&p) {
                    sum += crop.affinity * crop.relevance;
                    count += 1;
                }
            }
            let expect = if count > 0 { sum / count as f64 } else { 0.0 };
            assert_eq!(heat.values[p], expect, "case {case}, pixel {p}");
            assert_eq!(heat.covered[p], count > 0);
        }

        // IoU against a random truth mask: exact set-arithmetic oracle.
        let truth: HashSet<usize> = (0..rng.random_range(1..width * height))
            .map(|_| rng.random_range(0..width * height))
            .collect();
        let threshold = rng.random_range(0.0..1.0);
        let produced = iou_at_threshold(&heat, &truth, ThresholdRule::Absolute(threshold));
        let pred: HashSet<usize> = (0..width * height)
            .filter(|&p| heat.covered[p] && heat.values[p] >= threshold)
            .collect();
        let inter = pred.intersection(&truth).count();
        let uni = pred.union(&truth).count();
        let expect = if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        };
        assert_eq!(produced, expect, "IoU mismatch in case {case}");

        // Percentile via independent sorting oracle.
        let mut vals: Vec<f64> = heat.covered_values().collect();
        vals.sort_by(f64::total_cmp);
        if !vals.is_empty() {
            let rank = ((0.9 * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
            assert_eq!(percentile_90(&heat), vals[rank - 1]);
        }
    }

    // Relevance-scale invariance of view selection for c in {0.1, 10}.
    let mut views_base: Vec<Vec<CropRecord>> = Vec::new();
    for v in 0..4 {
        let mut rng = rng_from_seed(900 + v);
        let crops: Vec<CropRecord> = (0..3)
            .map(|c| CropRecord {
                mask: CropMask::Rect {
                    rect: [c as u32 * 3, 0, c as u32 * 3 + 6, 8],
                },
                label: format!("v{v}c{c}"),
                relevance: rng.random_range(0.1..2.0),
                affinity: rng.random_range(0.1..1.0),
            })
            .collect();
        views_base.push(crops);
    }
    let heats = |scale: f64| -> Vec<Heatmap> {
        views_base
            .iter()
            .map(|crops| {
                let scaled: Vec<CropRecord> = crops
                    .iter()
                    .cloned()
                    .map(|mut c| {
                        c.relevance *= scale;
                        c
                    })
                    .collect();
                aggregate(&scaled, 16, 8).unwrap()
            })
            .collect()
    };
    let baseline = select_view(&heats(1.0));
    for scale in [0.1, 10.0] {
        assert_eq!(
            select_view(&heats(scale)),
            baseline,
            "view choice changed at relevance scale {scale}"
        );
    }
    pass(
        8,
        "aggregation bit-exact on 20 fixtures; IoU, percentile, and scale invariance hold",
    );
}
