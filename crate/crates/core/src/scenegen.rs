//! Taxonomy-driven generation of semantically organized shelf scenes.
//!
//! A domain taxonomy is a tree whose internal nodes are categories and
//! whose leaves carry object dimensions. Scenes are laid out by recursively
//! halving the shelf plan along the taxonomy structure, so objects sharing
//! a category land near each other, then jittered with per-branch noise and
//! de-collided by iterative separation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    visibility_fraction, ObjectSpec, PlacedObject, Rect, Scene, ShelfSpec, SIZE_MAX, SIZE_MIN,
};
use crate::rng::{derive_seed, rng_from_seed};

/// Bundled domain taxonomies carrying the closed object lists.
pub const PHARMACY_TAXONOMY: &str = include_str!("../fixtures/pharmacy.json");
pub const KITCHEN_TAXONOMY: &str = include_str!("../fixtures/kitchen.json");
pub const OFFICE_TAXONOMY: &str = include_str!("../fixtures/office.json");

/// Bundled taxonomy for a domain name, if it ships with the crate.
pub fn builtin_taxonomy(domain: &str) -> Option<&'static str> {
    match domain {
        "pharmacy" => Some(PHARMACY_TAXONOMY),
        "kitchen" => Some(KITCHEN_TAXONOMY),
        "office" => Some(OFFICE_TAXONOMY),
        _ => None,
    }
}

/// Domain scale factor applied to raw object dimensions, mirroring the
/// down-scaling that fits each domain's objects into the shared shelf.
pub fn default_scale_factor(domain: &str) -> f64 {
    match domain {
        "office" => 0.4,
        _ => 0.7,
    }
}

#[derive(Debug, Error)]
pub enum SceneGenError {
    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("taxonomy has {leaves} leaves but {requested} objects were requested")]
    NotEnoughLeaves { leaves: usize, requested: usize },
    #[error("object '{name}' scaled dimension {dim} m outside [{SIZE_MIN}, {SIZE_MAX}] m")]
    BadScaledDims { name: String, dim: f64 },
    #[error("scene rejected: collision resolution exceeded {0} iterations")]
    CollisionBudget(usize),
    #[error("scene rejected: no object is hidden from the camera")]
    NoHiddenObject,
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A taxonomy tree node; a node is a leaf iff it carries object dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TaxonomyNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<TaxonomyObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyObject {
    pub dims: [f64; 3],
}

/// One taxonomy leaf with the category path from the root (root excluded).
#[derive(Debug, Clone)]
pub struct TaxonomyLeaf {
    pub name: String,
    pub dims: [f64; 3],
    pub category_path: Vec<String>,
}

impl TaxonomyNode {
    pub fn parse(text: &str) -> Result<Self, SceneGenError> {
        let node: TaxonomyNode =
            serde_json::from_str(text).map_err(|e| SceneGenError::Parse(e.to_string()))?;
        node.validate()?;
        Ok(node)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SceneGenError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn is_leaf(&self) -> bool {
        self.object.is_some()
    }

    fn validate(&self) -> Result<(), SceneGenError> {
        let mut names = std::collections::HashSet::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            match (&node.object, node.children.is_empty()) {
                (Some(_), false) => {
                    return Err(SceneGenError::Parse(format!(
                        "node '{}' has both an object and children",
                        node.name
                    )))
                }
                (None, true) => {
                    return Err(SceneGenError::Parse(format!(
                        "node '{}' has neither object nor children",
                        node.name
                    )))
                }
                _ => {}
            }
            if node.is_leaf() && !names.insert(node.name.as_str()) {
                return Err(SceneGenError::Parse(format!(
                    "duplicate object name '{}'",
                    node.name
                )));
            }
            stack.extend(node.children.iter());
        }
        Ok(())
    }

    /// All leaves in tree order with their category paths.
    pub fn leaves(&self) -> Vec<TaxonomyLeaf> {
        let mut out = Vec::new();
        collect_leaves(self, &mut Vec::new(), &mut out, true);
        out
    }

    fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(|c| c.leaf_count()).sum()
        }
    }

    /// Category groups in tree order: each top-level child of the root is a
    /// group (leaves directly under the root are singleton groups). This is
    /// the structure the ground-truth affinity matrix is built from.
    pub fn category_groups(&self) -> Vec<Vec<String>> {
        self.children
            .iter()
            .map(|child| {
                if child.is_leaf() {
                    vec![child.name.clone()]
                } else {
                    child.leaves().into_iter().map(|l| l.name).collect()
                }
            })
            .collect()
    }

    /// Flat object list in tree order.
    pub fn object_names(&self) -> Vec<String> {
        self.leaves().into_iter().map(|l| l.name).collect()
    }
}

fn collect_leaves(
    node: &TaxonomyNode,
    path: &mut Vec<String>,
    out: &mut Vec<TaxonomyLeaf>,
    is_root: bool,
) {
    if let Some(obj) = &node.object {
        out.push(TaxonomyLeaf {
            name: node.name.clone(),
            dims: obj.dims,
            category_path: path.clone(),
        });
        return;
    }
    if !is_root {
        path.push(node.name.clone());
    }
    for child in &node.children {
        collect_leaves(child, path, out, false);
    }
    if !is_root {
        path.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub n_objects: usize,
    pub seed: u64,
    /// Half-width of the per-branch uniform placement jitter, meters.
    pub noise_range: f64,
    /// A branch with more sampled descendants than this always splits
    /// across the shelf width.
    pub horizontal_force_threshold: usize,
    /// Multiplier applied to raw taxonomy dims before placement.
    pub scale_factor: f64,
    /// Iteration cap for pairwise collision separation.
    pub collision_budget: usize,
}

impl SceneGenConfig {
    pub fn new(n_objects: usize, seed: u64, scale_factor: f64) -> Self {
        SceneGenConfig {
            n_objects,
            seed,
            noise_range: 0.02,
            horizontal_force_threshold: 8,
            scale_factor,
            collision_budget: 1000,
        }
    }
}

/// Layout plan for the sampled objects of one region.
enum PlanNode {
    /// Region split in half; each side carries a sub-plan.
    Split {
        horizontal: bool,
        left: Box<PlanNode>,
        right: Box<PlanNode>,
    },
    /// Single internal taxonomy node: descend without splitting.
    Descend(Box<PlanNode>),
    /// Place these sampled leaves at random positions in the region.
    Scatter(Vec<usize>),
}

/// How each split chose its orientation (exposed for tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SplitChoice {
    Forced,
    Drawn(bool),
}

/// One taxonomy subtree, the global index of its first leaf, and the
/// sampled leaf ids under it.
struct Group<'t> {
    node: &'t TaxonomyNode,
    start: usize,
    sampled: Vec<usize>,
}

fn child_groups<'t>(node: &'t TaxonomyNode, start: usize, sampled: &[usize]) -> Vec<Group<'t>> {
    let mut groups = Vec::new();
    let mut offset = start;
    for child in &node.children {
        let span = child.leaf_count();
        let in_span: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|&i| (offset..offset + span).contains(&i))
            .collect();
        if !in_span.is_empty() {
            groups.push(Group {
                node: child,
                start: offset,
                sampled: in_span,
            });
        }
        offset += span;
    }
    groups
}

fn build_plan(
    groups: &[Group],
    cfg: &SceneGenConfig,
    rng: &mut ChaCha8Rng,
    choices: &mut Vec<SplitChoice>,
) -> PlanNode {
    if groups.len() == 1 {
        let g = &groups[0];
        if g.node.is_leaf() || g.node.children.iter().all(|c| c.is_leaf()) {
            // A leaf, or the last non-leaf node: scatter within the region.
            return PlanNode::Scatter(g.sampled.clone());
        }
        let inner = child_groups(g.node, g.start, &g.sampled);
        return PlanNode::Descend(Box::new(build_plan(&inner, cfg, rng, choices)));
    }
    let total: usize = groups.iter().map(|g| g.sampled.len()).sum();
    let horizontal = if total > cfg.horizontal_force_threshold {
        choices.push(SplitChoice::Forced);
        true
    } else {
        let h = rng.random_bool(0.5);
        choices.push(SplitChoice::Drawn(h));
        h
    };
    let (left, right) = partition_balanced(groups);
    PlanNode::Split {
        horizontal,
        left: Box::new(build_plan(&left, cfg, rng, choices)),
        right: Box::new(build_plan(&right, cfg, rng, choices)),
    }
}

/// Cut the ordered group list into two halves balanced by sampled-leaf
/// count; neither side is left empty.
fn partition_balanced<'a, 't>(groups: &'a [Group<'t>]) -> (Vec<Group<'t>>, Vec<Group<'t>>) {
    let total: usize = groups.iter().map(|g| g.sampled.len()).sum();
    let half = total.div_ceil(2);
    let mut cut = 1usize;
    let mut acc = groups[0].sampled.len();
    while cut < groups.len() - 1 && acc + groups[cut].sampled.len() <= half {
        acc += groups[cut].sampled.len();
        cut += 1;
    }
    let rebuild = |gs: &[Group<'t>]| {
        gs.iter()
            .map(|g| Group {
                node: g.node,
                start: g.start,
                sampled: g.sampled.clone(),
            })
            .collect::<Vec<_>>()
    };
    (rebuild(&groups[..cut]), rebuild(&groups[cut..]))
}

fn draw_noise(
    plan: &PlanNode,
    acc: [f64; 2],
    range: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f64; 2]>,
) {
    // Draw even at range 0 so noisy and noise-free runs of the same seed
    // share the rest of the stream.
    let (dx, dy) = (
        rng.random_range(-range..=range),
        rng.random_range(-range..=range),
    );
    let acc = [acc[0] + dx, acc[1] + dy];
    match plan {
        PlanNode::Split { left, right, .. } => {
            draw_noise(left, acc, range, rng, out);
            draw_noise(right, acc, range, rng, out);
        }
        PlanNode::Descend(inner) => draw_noise(inner, acc, range, rng, out),
        PlanNode::Scatter(ids) => {
            for _ in ids {
                out.push(acc);
            }
        }
    }
}

fn place_leaves(
    plan: &PlanNode,
    region: Rect,
    scaled: &[[f64; 3]],
    shelf_rect: &Rect,
    rng: &mut ChaCha8Rng,
    noise: &mut std::vec::IntoIter<[f64; 2]>,
    out: &mut Vec<(usize, [f64; 2])>,
) {
    match plan {
        PlanNode::Split {
            horizontal,
            left,
            right,
        } => {
            let (a, b) = split_half(&region, *horizontal);
            place_leaves(left, a, scaled, shelf_rect, rng, noise, out);
            place_leaves(right, b, scaled, shelf_rect, rng, noise, out);
        }
        PlanNode::Descend(inner) => {
            place_leaves(inner, region, scaled, shelf_rect, rng, noise, out)
        }
        PlanNode::Scatter(ids) => {
            for &leaf in ids {
                let offset = noise.next().expect("noise drawn for every leaf");
                let dims = scaled[leaf];
                let x = sample_coord(rng, region.x0, region.x1, dims[0] / 2.0);
                let y = sample_coord(rng, region.y0, region.y1, dims[1] / 2.0);
                let pos = clamp_into([x + offset[0], y + offset[1]], dims, shelf_rect);
                out.push((leaf, pos));
            }
        }
    }
}

/// "Horizontal" splits divide across the shelf width so crowded branches
/// spread along the wide axis; "vertical" divides the depth.
fn split_half(region: &Rect, horizontal: bool) -> (Rect, Rect) {
    if horizontal {
        let mid = (region.x0 + region.x1) / 2.0;
        (Rect { x1: mid, ..*region }, Rect { x0: mid, ..*region })
    } else {
        let mid = (region.y0 + region.y1) / 2.0;
        (Rect { y1: mid, ..*region }, Rect { y0: mid, ..*region })
    }
}

fn sample_coord(rng: &mut ChaCha8Rng, lo: f64, hi: f64, half: f64) -> f64 {
    let (a, b) = (lo + half, hi - half);
    if a < b {
        rng.random_range(a..b)
    } else {
        // Region narrower than the footprint: center it and let the
        // bounds clamp recover.
        (lo + hi) / 2.0
    }
}

fn clamp_into(pos: [f64; 2], dims: [f64; 3], shelf_rect: &Rect) -> [f64; 2] {
    [
        pos[0].clamp(shelf_rect.x0 + dims[0] / 2.0, shelf_rect.x1 - dims[0] / 2.0),
        pos[1].clamp(shelf_rect.y0 + dims[1] / 2.0, shelf_rect.y1 - dims[1] / 2.0),
    ]
}

/// Build the layout plan and record split choices; shared by generation
/// and the orientation-balance test.
fn plan_scene(
    tax: &TaxonomyNode,
    cfg: &SceneGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PlanNode, Vec<usize>, Vec<SplitChoice>), SceneGenError> {
    let leaves = tax.leaves();
    if cfg.n_objects > leaves.len() {
        return Err(SceneGenError::NotEnoughLeaves {
            leaves: leaves.len(),
            requested: cfg.n_objects,
        });
    }
    // Phase 1: sample leaves without replacement (partial Fisher-Yates).
    let mut indices: Vec<usize> = (0..leaves.len()).collect();
    for i in 0..cfg.n_objects {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut sampled: Vec<usize> = indices[..cfg.n_objects].to_vec();
    sampled.sort_unstable();

    // Phase 2: split orientations.
    let root_groups = child_groups(tax, 0, &sampled);
    let mut choices = Vec::new();
    let plan = build_plan(&root_groups, cfg, rng, &mut choices);
    Ok((plan, sampled, choices))
}

#[cfg(test)]
pub(crate) fn split_choices_for_seed(tax: &TaxonomyNode, cfg: &SceneGenConfig) -> Vec<SplitChoice> {
    let mut rng = rng_from_seed(cfg.seed);
    plan_scene(tax, cfg, &mut rng).expect("plan").2
}

/// Generate a semantically organized scene. Deterministic given the
/// config: the RNG stream is consumed in the documented order -- object
/// sample, then split orientations, then per-branch noise, then leaf
/// placements. The returned scene has a provisional `target_index` of 0;
/// use [`pick_target`] to select a hidden target.
pub fn generate_scene(
    tax: &TaxonomyNode,
    cfg: &SceneGenConfig,
    shelf: &ShelfSpec,
) -> Result<Scene, SceneGenError> {
    if cfg.n_objects == 0 {
        return Err(SceneGenError::BadConfig(
            "n_objects must be positive".into(),
        ));
    }
    if cfg.noise_range < 0.0 {
        return Err(SceneGenError::BadConfig("noise_range must be >= 0".into()));
    }
    let leaves = tax.leaves();
    let scaled: Vec<[f64; 3]> = leaves
        .iter()
        .map(|l| {
            let d = [
                l.dims[0] * cfg.scale_factor,
                l.dims[1] * cfg.scale_factor,
                l.dims[2] * cfg.scale_factor,
            ];
            for &v in &d {
                if !(SIZE_MIN - 1e-9..=SIZE_MAX + 1e-9).contains(&v) {
                    return Err(SceneGenError::BadScaledDims {
                        name: l.name.clone(),
                        dim: v,
                    });
                }
            }
            Ok(d)
        })
        .collect::<Result<_, _>>()?;

    let mut rng = rng_from_seed(cfg.seed);
    let (plan, _sampled, _choices) = plan_scene(tax, cfg, &mut rng)?;

    // Phase 3: per-branch noise, one 2D draw per plan node, accumulated
    // down the tree.
    let mut noise = Vec::new();
    draw_noise(&plan, [0.0, 0.0], cfg.noise_range, &mut rng, &mut noise);

    // Phase 4: leaf placements.
    let plan_rect = Rect {
        x0: 0.0,
        x1: shelf.width,
        y0: 0.0,
        y1: shelf.depth,
    };
    let mut placements: Vec<(usize, [f64; 2])> = Vec::with_capacity(cfg.n_objects);
    let mut noise_iter = noise.into_iter();
    place_leaves(
        &plan,
        plan_rect,
        &scaled,
        &plan_rect,
        &mut rng,
        &mut noise_iter,
        &mut placements,
    );
    debug_assert_eq!(placements.len(), cfg.n_objects);

    let mut objects: Vec<PlacedObject> = placements
        .into_iter()
        .map(|(leaf, pos)| PlacedObject {
            spec: ObjectSpec {
                name: leaves[leaf].name.clone(),
                dims: scaled[leaf],
                category_path: leaves[leaf].category_path.clone(),
            },
            position: pos,
        })
        .collect();

    resolve_collisions(&mut objects, &plan_rect, cfg.collision_budget)?;

    let scene = Scene {
        shelf: shelf.clone(),
        objects,
        target_index: 0,
    };
    debug_assert!(scene.validate().is_ok(), "generator produced invalid scene");
    Ok(scene)
}

/// Iteratively separate every colliding pair along the vector between
/// their centers, 10% of the separating distance per iteration, until
/// collision-free or the budget is spent.
fn resolve_collisions(
    objects: &mut [PlacedObject],
    shelf_rect: &Rect,
    budget: usize,
) -> Result<(), SceneGenError> {
    for _ in 0..budget {
        let mut any = false;
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                let (fi, fj) = (objects[i].footprint(), objects[j].footprint());
                if !fi.overlaps_open(&fj) {
                    continue;
                }
                any = true;
                let [cxi, cyi] = fi.center();
                let [cxj, cyj] = fj.center();
                let mut dx = cxj - cxi;
                let mut dy = cyj - cyi;
                let norm = (dx * dx + dy * dy).sqrt();
                if norm < 1e-12 {
                    dx = 1.0;
                    dy = 0.0;
                } else {
                    dx /= norm;
                    dy /= norm;
                }
                // Distance along (dx, dy) after which either axis separates.
                let need_x = (fi.width() + fj.width()) / 2.0 - (cxj - cxi).abs();
                let need_y = (fi.depth() + fj.depth()) / 2.0 - (cyj - cyi).abs();
                let sep_x = if dx.abs() > 1e-12 {
                    need_x / dx.abs()
                } else {
                    f64::INFINITY
                };
                let sep_y = if dy.abs() > 1e-12 {
                    need_y / dy.abs()
                } else {
                    f64::INFINITY
                };
                let step = (0.1 * sep_x.min(sep_y)).max(1e-4);
                let di = objects[i].spec.dims;
                let dj = objects[j].spec.dims;
                objects[i].position = clamp_into(
                    [
                        objects[i].position[0] - dx * step / 2.0,
                        objects[i].position[1] - dy * step / 2.0,
                    ],
                    di,
                    shelf_rect,
                );
                objects[j].position = clamp_into(
                    [
                        objects[j].position[0] + dx * step / 2.0,
                        objects[j].position[1] + dy * step / 2.0,
                    ],
                    dj,
                    shelf_rect,
                );
            }
        }
        if !any {
            return Ok(());
        }
    }
    Err(SceneGenError::CollisionBudget(budget))
}

/// Uniformly pick the target among objects invisible from the camera
/// (visibility fraction below 1%). Errors when nothing is hidden, which
/// rejects the scene.
pub fn pick_target(scene: &Scene, rng_seed: u64) -> Result<usize, SceneGenError> {
    let hidden: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| {
            visibility_fraction(scene, i, crate::model::DEFAULT_VISIBILITY_SAMPLES)
                .expect("valid index")
                < 0.01
        })
        .collect();
    if hidden.is_empty() {
        return Err(SceneGenError::NoHiddenObject);
    }
    let mut rng = rng_from_seed(rng_seed);
    Ok(hidden[rng.random_range(0..hidden.len())])
}

/// Generate scenes until `count` are accepted: each attempt draws a fresh
/// sub-seed, and a scene is accepted when collision resolution converges
/// and a hidden target exists. Returns the accepted scenes (targets set)
/// plus the total attempt count.
pub fn generate_accepted_scenes(
    tax: &TaxonomyNode,
    base_cfg: &SceneGenConfig,
    shelf: &ShelfSpec,
    count: usize,
) -> Result<(Vec<Scene>, usize), SceneGenError> {
    let mut scenes = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = count.max(1) * 1000;
    while scenes.len() < count {
        if attempts >= max_attempts {
            return Err(SceneGenError::BadConfig(format!(
                "gave up after {attempts} attempts ({} accepted)",
                scenes.len()
            )));
        }
        let mut cfg = base_cfg.clone();
        cfg.seed = derive_seed(base_cfg.seed, attempts as u64);
        attempts += 1;
        let mut scene = match generate_scene(tax, &cfg, shelf) {
            Ok(s) => s,
            Err(SceneGenError::CollisionBudget(_)) => continue,
            Err(e) => return Err(e),
        };
        match pick_target(&scene, derive_seed(cfg.seed, u64::MAX)) {
            Ok(idx) => {
                scene.target_index = idx;
                scenes.push(scene);
            }
            Err(SceneGenError::NoHiddenObject) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((scenes, attempts))
}
