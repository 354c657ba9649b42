//! Candidate action generation, greedy DAR/DER selection, state
//! transitions, and the rollout loop.
//!
//! The policy sees only what its observations have recorded (the known
//! world); the engine enumerates candidates and validates transitions
//! against the true scene. DAR picks the action minimizing the occupancy
//! mass still covered by object silhouettes; DER picks the action whose
//! resulting combined distribution has minimum entropy.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::AffinityMatrix;
use crate::model::{
    footprint_at, observe_at, visibility_fraction, ModelError, Rect, Scene, ShelfSpec,
};
use crate::occupancy::{
    combine, gaussian_smooth, opening_crossing, project_to_1d_area, ray_bin_of, semantic_grid,
    spatial_grid, update_explored_and_spatial, Distribution1D, GridStatus, KnownWorld,
};
use crate::perception::{record_first_seen, simulate_detection};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no feasible candidate action")]
    DeadEnd,
    #[error("target is already visible at rollout start")]
    TargetInitiallyVisible,
    #[error("action infeasible: {0}")]
    Infeasible(String),
    #[error("scene object '{0}' is not in the affinity matrix's label list")]
    UnknownLabel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A primitive manipulation: a lateral push at constant depth, or a
/// suction pick-and-place to a free, front-accessible cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Push { object: usize, to_x: f64 },
    Suction { object: usize, to: [f64; 2] },
}

impl Action {
    pub fn object(&self) -> usize {
        match self {
            Action::Push { object, .. } | Action::Suction { object, .. } => *object,
        }
    }

    /// Destination of the moved object given its current position.
    pub fn destination(&self, from: [f64; 2]) -> [f64; 2] {
        match self {
            Action::Push { to_x, .. } => [*to_x, from[1]],
            Action::Suction { to, .. } => *to,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Action::Push { .. } => "push",
            Action::Suction { .. } => "suction",
        }
    }
}

/// Actions displacing the object less than this are no-ops and dropped.
pub const MIN_DISPLACEMENT: f64 = 0.005;

/// Default pose-exclusion visibility threshold (see
/// [`RolloutConfig::exclusion_visibility`]).
pub const DEFAULT_EXCLUSION_VISIBILITY: f64 = 0.5;

/// Default candidate discretization.
pub const DEFAULT_GRID_K: usize = 16;

fn push_sweep_rect(fp: &Rect, from_x: f64, to_x: f64) -> Rect {
    let half_w = fp.width() / 2.0;
    Rect {
        x0: (from_x - half_w).min(to_x - half_w),
        x1: (from_x + half_w).max(to_x + half_w),
        y0: fp.y0,
        y1: fp.y1,
    }
}

/// Feasibility of a single action against the true scene geometry.
fn action_feasible(scene: &Scene, action: &Action) -> bool {
    let obj = &scene.objects[action.object()];
    let dims = obj.spec.dims;
    let from = obj.position;
    let to = action.destination(from);
    let dest_fp = footprint_at(to, dims);
    let plan = scene.plan_rect();
    if !plan.contains_rect(&dest_fp) {
        return false;
    }
    let others = || {
        scene
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != action.object())
            .map(|(_, o)| o.footprint())
    };
    match action {
        Action::Push { to_x, .. } => {
            let sweep = push_sweep_rect(&obj.footprint(), from[0], *to_x);
            others().all(|f| !sweep.overlaps_open(&f))
        }
        Action::Suction { to, .. } => {
            if others().any(|f| dest_fp.overlaps_open(&f)) {
                return false;
            }
            // Front access: nothing may stand between the destination and
            // the shelf opening across its x-extent.
            let front_y = to[1] - dims[1] / 2.0;
            others().all(|f| {
                let x_overlap = f.x0 < dest_fp.x1 && dest_fp.x0 < f.x1;
                !(x_overlap && f.y0 < front_y)
            })
        }
    }
}

/// Enumerate feasible actions for the currently detected objects: pushes
/// to `grid_k` evenly spaced lateral stops and suction placements on a
/// `grid_k x grid_k/2` plan grid, all validated against the true geometry,
/// with sub-5 mm no-ops dropped.
pub fn candidate_actions(
    scene: &Scene,
    detected: &[usize],
    grid_k: usize,
) -> Result<Vec<Action>, PolicyError> {
    assert!(grid_k >= 2, "grid_k must be at least 2");
    let shelf = &scene.shelf;
    let suction_rows = (grid_k / 2).max(1);
    let mut out = Vec::new();
    for &object in detected {
        let obj = &scene.objects[object];
        let from = obj.position;
        for k in 0..grid_k {
            let to_x = shelf.width * (k as f64 + 0.5) / grid_k as f64;
            if (to_x - from[0]).abs() < MIN_DISPLACEMENT {
                continue;
            }
            let action = Action::Push { object, to_x };
            if action_feasible(scene, &action) {
                out.push(action);
            }
        }
        for ix in 0..grid_k {
            for iy in 0..suction_rows {
                let to = [
                    shelf.width * (ix as f64 + 0.5) / grid_k as f64,
                    shelf.depth * (iy as f64 + 0.5) / suction_rows as f64,
                ];
                let disp = (to[0] - from[0]).hypot(to[1] - from[1]);
                if disp < MIN_DISPLACEMENT {
                    continue;
                }
                let action = Action::Suction { object, to };
                if action_feasible(scene, &action) {
                    out.push(action);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(PolicyError::DeadEnd);
    }
    Ok(out)
}

/// Bins whose camera ray passes through the footprint: the extreme opening
/// crossings over the four corners bound the covered bin range.
pub fn silhouette_bins(shelf: &ShelfSpec, bins: usize, fp: &Rect) -> (usize, usize) {
    let corners = [
        (fp.x0, fp.y0),
        (fp.x1, fp.y0),
        (fp.x0, fp.y1),
        (fp.x1, fp.y1),
    ];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in corners {
        let u = opening_crossing(shelf, x, y);
        lo = lo.min(u);
        hi = hi.max(u);
    }
    let lo_bin = ((lo * bins as f64 - 0.5).ceil().max(0.0)) as usize;
    let hi_bin = ((hi * bins as f64 - 0.5).floor()).min(bins as f64 - 1.0) as usize;
    (lo_bin.min(bins - 1), hi_bin)
}

/// Hypothetical known geometry after an action.
fn moved_geometry(world: &KnownWorld, action: &Action) -> Vec<([f64; 2], [f64; 3])> {
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

/// Mass of `dist` lying under any of the given footprints' silhouettes.
fn covered_mass(
    dist: &Distribution1D,
    shelf: &ShelfSpec,
    geometry: &[([f64; 2], [f64; 3])],
) -> f64 {
    let bins = dist.bins();
    let mut covered = vec![false; bins];
    for (pos, dims) in geometry {
        let fp = footprint_at(*pos, *dims);
        let (lo, hi) = silhouette_bins(shelf, bins, &fp);
        for c in covered.iter_mut().take(hi + 1).skip(lo) {
            *c = true;
        }
    }
    dist.mass
        .iter()
        .zip(&covered)
        .filter(|(_, &c)| c)
        .map(|(m, _)| m)
        .sum()
}

/// Deterministic tie-breaking: smaller displacement, then lower object
/// index, then smaller destination x, then smaller destination y.
fn tie_key(action: &Action, world: &KnownWorld) -> (f64, usize, f64, f64) {
    let from = world
        .by_object_index(action.object())
        .map(|o| o.current)
        .unwrap_or([0.0, 0.0]);
    let to = action.destination(from);
    let disp = (to[0] - from[0]).hypot(to[1] - from[1]);
    (disp, action.object(), to[0], to[1])
}

fn argmin_by_score(scored: Vec<(Action, f64)>, world: &KnownWorld) -> (Action, f64) {
    scored
        .into_iter()
        .min_by(|(a, sa), (b, sb)| {
            sa.total_cmp(sb).then_with(|| {
                let (da, oa, xa, ya) = tie_key(a, world);
                let (db, ob, xb, yb) = tie_key(b, world);
                da.total_cmp(&db)
                    .then(oa.cmp(&ob))
                    .then(xa.total_cmp(&xb))
                    .then(ya.total_cmp(&yb))
            })
        })
        .expect("non-empty candidate list")
}

/// Distribution Area Reduction: hypothetically apply each candidate to the
/// known geometry, re-cover the distribution with every known object's
/// ray silhouette, and return the action minimizing the covered mass.
pub fn dar_select(
    candidates: &[Action],
    dist: &Distribution1D,
    world: &KnownWorld,
    shelf: &ShelfSpec,
) -> (Action, f64) {
    let scored = candidates
        .iter()
        .map(|action| {
            let geometry = moved_geometry(world, action);
            (*action, covered_mass(dist, shelf, &geometry))
        })
        .collect();
    argmin_by_score(scored, world)
}

/// Two-stage DAR variant: first the known object whose current silhouette
/// covers the most mass, then the best destination for it. Falls back to
/// the joint argmin when that object has no feasible candidate.
pub fn dar_select_two_stage(
    candidates: &[Action],
    dist: &Distribution1D,
    world: &KnownWorld,
    shelf: &ShelfSpec,
) -> (Action, f64) {
    let best_object = world
        .objects
        .iter()
        .map(|o| {
            let mass = covered_mass(dist, shelf, &[(o.current, o.dims)]);
            (o.object_index, mass)
        })
        .max_by(|(ia, ma), (ib, mb)| ma.total_cmp(mb).then(ib.cmp(ia)))
        .map(|(i, _)| i);
    let filtered: Vec<Action> = candidates
        .iter()
        .copied()
        .filter(|a| Some(a.object()) == best_object)
        .collect();
    if filtered.is_empty() {
        dar_select(candidates, dist, world, shelf)
    } else {
        dar_select(&filtered, dist, world, shelf)
    }
}

/// Parameters DER needs to rebuild the combined distribution per candidate.
pub struct DerContext<'a> {
    /// Smoothed 1D semantic distribution, fixed by the first-seen ledger
    /// for the whole step. `None` runs geometry-only DER.
    pub semantic: Option<&'a Distribution1D>,
    pub target_dims: [f64; 3],
    pub shelf: &'a ShelfSpec,
    pub visibility_threshold: f64,
    pub feasibility_samples: usize,
    pub bins: usize,
}

/// Distribution Entropy Reduction: rebuild the post-action combined
/// distribution for each candidate (spatial from hypothetically moved
/// geometry, semantic unchanged) and return the action minimizing its
/// entropy.
pub fn der_select(candidates: &[Action], ctx: &DerContext, world: &KnownWorld) -> (Action, f64) {
    let scored = candidates
        .iter()
        .map(|action| {
            let geometry = moved_geometry(world, action);
            let (grid, _) = spatial_grid(
                &geometry,
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
            (*action, dist.entropy_bits())
        })
        .collect();
    argmin_by_score(scored, world)
}

/// Apply an action to the true scene, validating feasibility. Infeasible
/// actions are engine errors: candidates are pre-validated, so reaching
/// this is a policy bug.
pub fn apply_action(scene: &Scene, action: &Action) -> Result<Scene, PolicyError> {
    if action.object() >= scene.objects.len() {
        return Err(PolicyError::Infeasible(format!(
            "object {} out of range",
            action.object()
        )));
    }
    if !action_feasible(scene, action) {
        return Err(PolicyError::Infeasible(format!("{action:?}")));
    }
    let mut next = scene.clone();
    let from = next.objects[action.object()].position;
    next.objects[action.object()].position = action.destination(from);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Policy {
    Dar,
    Der,
}

/// Everything a rollout needs besides the scene and the affinity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Target visibility fraction that counts as revealed.
    pub visibility_x: f64,
    /// Detection threshold of the observation function.
    pub v_detect: f64,
    /// Visibility threshold for ruling out hidden poses: a pose is
    /// excluded only when a target there would sit mostly in plain view
    /// against the discovered geometry. Undiscovered neighbors can shade a
    /// hypothetical pose by a large fraction of its face, so thresholds
    /// near the detection cutoff wrongly rule out true target poses.
    pub exclusion_visibility: f64,
    pub policy: Policy,
    pub use_semantic: bool,
    pub sigma_bins: f64,
    pub noise_p: f64,
    pub seed: u64,
    pub grid_k: usize,
    pub bins: usize,
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Face sample resolution for per-cell feasibility checks.
    pub feasibility_samples: usize,
    /// Face sample resolution for observations.
    pub visibility_samples: usize,
    /// Use the two-stage DAR variant (object first, then destination).
    pub dar_two_stage: bool,
    /// Keep per-step distribution snapshots in the record.
    pub record_distributions: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            visibility_x: 0.01,
            v_detect: crate::model::DEFAULT_DETECT_FRACTION,
            exclusion_visibility: DEFAULT_EXCLUSION_VISIBILITY,
            policy: Policy::Dar,
            use_semantic: true,
            sigma_bins: crate::occupancy::DEFAULT_SIGMA_BINS,
            noise_p: 0.0,
            seed: 0,
            grid_k: DEFAULT_GRID_K,
            bins: crate::occupancy::DEFAULT_BINS,
            grid_nx: crate::occupancy::DEFAULT_GRID_NX,
            grid_ny: crate::occupancy::DEFAULT_GRID_NY,
            feasibility_samples: crate::occupancy::DEFAULT_FEASIBILITY_SAMPLES,
            visibility_samples: crate::model::DEFAULT_VISIBILITY_SAMPLES,
            dar_two_stage: false,
            record_distributions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: Action,
    /// Overlap mass (DAR) or entropy in bits (DER) of the chosen action.
    pub score: f64,
    /// Target visibility after the action.
    pub target_visibility: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDistributions {
    pub step: usize,
    pub semantic: Option<Distribution1D>,
    pub spatial: Distribution1D,
    pub combined: Distribution1D,
}

/// Why a rollout ended without revealing the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureReason {
    /// Action budget of 2N exhausted.
    OutOfActions,
    /// No feasible candidate action remained.
    DeadEnd,
    /// The belief update ruled out every pose.
    SearchExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub success: bool,
    pub steps: usize,
    pub per_step: Vec<StepRecord>,
    pub failure: Option<FailureReason>,
    /// Final target visibility.
    pub target_visibility: f64,
    /// Soundness accounting over noise-free pre-terminal steps: how many
    /// times the true target's ray bin was checked, and how many times it
    /// carried no combined mass.
    pub soundness_checks: usize,
    pub soundness_violations: usize,
    /// Largest |sum - 1| over every distribution the rollout emitted.
    pub max_norm_err: f64,
    pub snapshots: Vec<StepDistributions>,
}

impl RolloutRecord {
    /// Step line format: `step,action_kind,object,dx,dy,score,target_visibility`.
    pub fn write_trace(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,action_kind,object,dx,dy,score,target_visibility")?;
        for (i, s) in self.per_step.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                i,
                s.action.kind(),
                s.action.object(),
                s.dx,
                s.dy,
                s.score,
                s.target_visibility
            )?;
        }
        Ok(())
    }
}

fn track_norm(dist: &Distribution1D, max_err: &mut f64) {
    let err = (dist.total() - 1.0).abs();
    if err > *max_err {
        *max_err = err;
    }
}

/// Run one search rollout to termination: observe, update the ledger and
/// explored poses, rebuild distributions, pick an action greedily, apply,
/// repeat. Succeeds when the target's visibility reaches `visibility_x`;
/// fails at 2N actions, on a dead end, or when the belief exhausts.
/// Deterministic in (scene, matrix, cfg).
pub fn rollout(
    scene0: &Scene,
    matrix: &AffinityMatrix,
    cfg: &RolloutConfig,
) -> Result<RolloutRecord, PolicyError> {
    for obj in &scene0.objects {
        if matrix.label_index(&obj.spec.name).is_none() {
            return Err(PolicyError::UnknownLabel(obj.spec.name.clone()));
        }
    }
    let n = scene0.objects.len();
    let max_actions = 2 * n;
    let target_index = scene0.target_index;
    let target_label = scene0.target().spec.name.clone();
    let target_dims = scene0.target().spec.dims;

    let mut scene = scene0.clone();
    let mut world = KnownWorld::new(cfg.grid_nx, cfg.grid_ny);
    let mut record = RolloutRecord {
        success: false,
        steps: 0,
        per_step: Vec::new(),
        failure: None,
        target_visibility: 0.0,
        soundness_checks: 0,
        soundness_violations: 0,
        max_norm_err: 0.0,
        snapshots: Vec::new(),
    };

    let mut report = observe_at(&scene, cfg.v_detect, cfg.visibility_samples);
    record.target_visibility = report.fractions[target_index];
    if record.target_visibility >= cfg.visibility_x {
        return Err(PolicyError::TargetInitiallyVisible);
    }

    loop {
        // First-seen ledger update, with label noise at first detection.
        let mut beliefs = HashMap::new();
        for i in report.detected_indices() {
            if !world.knows(i) {
                let belief = simulate_detection(
                    &scene.objects[i].spec.name,
                    matrix.labels(),
                    cfg.noise_p,
                    derive_seed(cfg.seed, i as u64),
                );
                beliefs.insert(i, belief.argmax_label(matrix.labels()).to_string());
            }
        }
        record_first_seen(&mut world, &report, &scene, &beliefs);

        // Belief update and spatial distribution.
        let (spatial2, spatial_status) = update_explored_and_spatial(
            &mut world,
            target_dims,
            &scene.shelf,
            cfg.exclusion_visibility,
            cfg.feasibility_samples,
        );
        if spatial_status == GridStatus::Exhausted {
            record.failure = Some(FailureReason::SearchExhausted);
            return Ok(record);
        }
        let spatial1 = project_to_1d_area(&spatial2, &scene.shelf, cfg.bins);
        track_norm(&spatial1, &mut record.max_norm_err);

        let semantic1 = if cfg.use_semantic {
            let (sem2, _) = semantic_grid(
                &world,
                &target_label,
                matrix,
                cfg.grid_nx,
                cfg.grid_ny,
                &scene.shelf,
            );
            let sem1 = gaussian_smooth(
                &project_to_1d_area(&sem2, &scene.shelf, cfg.bins),
                cfg.sigma_bins,
            );
            track_norm(&sem1, &mut record.max_norm_err);
            Some(sem1)
        } else {
            None
        };
        let dist = match &semantic1 {
            Some(sem) => combine(sem, &spatial1).0,
            None => spatial1.clone(),
        };
        track_norm(&dist, &mut record.max_norm_err);

        // Soundness: the true target's ray bin must carry combined mass
        // while detection is noise-free.
        if cfg.noise_p == 0.0 {
            let [tx, ty] = scene.objects[target_index].position;
            let tb = ray_bin_of(&scene.shelf, cfg.bins, tx, ty);
            record.soundness_checks += 1;
            if dist.mass[tb] <= 0.0 {
                record.soundness_violations += 1;
                if std::env::var_os("MECHSEARCH_DEBUG_SOUNDNESS").is_some() {
                    let grid2 = &spatial2;
                    let (cix, ciy) = grid2.cell_of(tx, ty);
                    let cell_mass = grid2.mass[ciy * grid2.nx + cix];
                    let explored = world.explored.cells[ciy * grid2.nx + cix];
                    let center = grid2.cell_center(cix, ciy);
                    let (inb, col, vis) = crate::occupancy::diagnose_pose(
                        center,
                        target_dims,
                        &scene.shelf,
                        &world.current_geometry(),
                        cfg.feasibility_samples,
                        crate::occupancy::grid_half_cell(grid2),
                    );
                    eprintln!(
                        "soundness: step {} tb {tb} cell ({cix},{ciy}) mass {cell_mass:.3e} explored {explored} now(in_bounds {inb} collide {col} vis {vis:.4}) tpos ({tx:.4},{ty:.4})",
                        record.steps,
                    );
                }
                debug_assert!(
                    false,
                    "target ray bin lost all mass at step {}",
                    record.steps
                );
            }
        }

        if cfg.record_distributions {
            record.snapshots.push(StepDistributions {
                step: record.steps,
                semantic: semantic1.clone(),
                spatial: spatial1.clone(),
                combined: dist.clone(),
            });
        }

        // Greedy action selection.
        let detected = report.detected_indices();
        let candidates = match candidate_actions(&scene, &detected, cfg.grid_k) {
            Ok(c) => c,
            Err(PolicyError::DeadEnd) => {
                record.failure = Some(FailureReason::DeadEnd);
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        let (action, score) = match cfg.policy {
            Policy::Dar => {
                if cfg.dar_two_stage {
                    dar_select_two_stage(&candidates, &dist, &world, &scene.shelf)
                } else {
                    dar_select(&candidates, &dist, &world, &scene.shelf)
                }
            }
            Policy::Der => {
                let ctx = DerContext {
                    semantic: semantic1.as_ref(),
                    target_dims,
                    shelf: &scene.shelf,
                    visibility_threshold: cfg.exclusion_visibility,
                    feasibility_samples: cfg.feasibility_samples,
                    bins: cfg.bins,
                };
                der_select(&candidates, &ctx, &world)
            }
        };

        let from = scene.objects[action.object()].position;
        scene = apply_action(&scene, &action)?;
        let to = scene.objects[action.object()].position;
        world.set_current(action.object(), to);
        record.steps += 1;

        let tvis = visibility_fraction(&scene, target_index, cfg.visibility_samples)?;
        record.per_step.push(StepRecord {
            action,
            score,
            target_visibility: tvis,
            dx: to[0] - from[0],
            dy: to[1] - from[1],
        });
        record.target_visibility = tvis;

        if tvis >= cfg.visibility_x {
            record.success = true;
            return Ok(record);
        }
        if record.steps >= max_actions {
            record.failure = Some(FailureReason::OutOfActions);
            return Ok(record);
        }
        report = observe_at(&scene, cfg.v_detect, cfg.visibility_samples);
    }
}
