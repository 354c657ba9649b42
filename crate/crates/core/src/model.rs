//! World state and observation function of the first-order shelf simulator.
//!
//! The world is a single-level shelf holding axis-aligned cuboid objects
//! resting on the shelf floor. A pinhole camera sits in front of the shelf
//! opening at mid-height. Visibility is evaluated by casting line segments
//! from a grid of points on an object's front face to the pinhole and
//! testing them against every other cuboid; there is no pixel rendering
//! and no physics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible object dimension after domain scaling, in meters.
pub const SIZE_MIN: f64 = 0.05;
/// Largest admissible object dimension after domain scaling, in meters.
pub const SIZE_MAX: f64 = 0.25;

/// Default fraction of an object's face that must be visible for the
/// observation function to report it as detected.
pub const DEFAULT_DETECT_FRACTION: f64 = 0.05;

/// Default resolution of the face sample grid used by [`visibility_fraction`].
pub const DEFAULT_VISIBILITY_SAMPLES: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("object index {index} out of range (scene has {len} objects)")]
    BadObjectIndex { index: usize, len: usize },
    #[error("visibility sample grid must be at least 2x2, got {0}")]
    BadSampleCount(usize),
    #[error("shelf dimensions must be positive: {0}")]
    BadShelf(String),
    #[error("object '{name}' dimension {dim} m outside [{SIZE_MIN}, {SIZE_MAX}] m")]
    BadObjectDims { name: String, dim: f64 },
    #[error("object '{0}' is not fully inside the shelf")]
    OutOfBounds(String),
    #[error("objects '{0}' and '{1}' overlap")]
    Overlap(String, String),
    #[error("duplicate object name '{0}'")]
    DuplicateName(String),
    #[error("target index {0} out of range")]
    BadTargetIndex(usize),
}

/// Shelf geometry plus the camera standoff distance.
///
/// Coordinates: `x` runs across the shelf width, `y` is depth with `y = 0`
/// at the front opening increasing toward the back, `z` is height off the
/// shelf floor. The camera pinhole sits at
/// `(width / 2, -camera_offset, height / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShelfSpec {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub camera_offset: f64,
}

impl Default for ShelfSpec {
    fn default() -> Self {
        ShelfSpec {
            width: 0.8,
            depth: 0.35,
            height: 0.57,
            camera_offset: 0.5,
        }
    }
}

impl ShelfSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width <= 0.0 || self.depth <= 0.0 || self.height <= 0.0 || self.camera_offset <= 0.0
        {
            return Err(ModelError::BadShelf(format!("{self:?}")));
        }
        Ok(())
    }

    /// World position of the camera pinhole.
    pub fn camera(&self) -> [f64; 3] {
        [self.width / 2.0, -self.camera_offset, self.height / 2.0]
    }

    /// Camera position projected onto the shelf plan (x, y).
    pub fn camera_plan(&self) -> [f64; 2] {
        [self.width / 2.0, -self.camera_offset]
    }
}

/// A named cuboid with footprint dimensions `(w, d, h)` in meters and the
/// taxonomy path it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub dims: [f64; 3],
    #[serde(default)]
    pub category_path: Vec<String>,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        for &d in &self.dims {
            // Tolerance absorbs scale-factor rounding at the domain boundary.
            if !(SIZE_MIN - 1e-9..=SIZE_MAX + 1e-9).contains(&d) {
                return Err(ModelError::BadObjectDims {
                    name: self.name.clone(),
                    dim: d,
                });
            }
        }
        Ok(())
    }

    /// Top-level category this object belongs to; objects placed directly
    /// under the taxonomy root are their own category.
    pub fn category(&self) -> &str {
        self.category_path.first().map_or(&self.name, |s| s)
    }
}

/// Closed axis-aligned rectangle over the shelf plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn depth(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    /// Open-interval overlap: rectangles that merely touch do not overlap.
    pub fn overlaps_open(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains_rect(&self, inner: &Rect) -> bool {
        self.x0 <= inner.x0 && inner.x1 <= self.x1 && self.y0 <= inner.y0 && inner.y1 <= self.y1
    }

    /// Shrink by `m` on every side. May invert for large `m`; callers that
    /// shrink check emptiness via `width()`/`depth()`.
    pub fn shrunk(&self, m: f64) -> Rect {
        Rect {
            x0: self.x0 + m,
            x1: self.x1 - m,
            y0: self.y0 + m,
            y1: self.y1 - m,
        }
    }
}

/// Axis-aligned cuboid in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// An object resting on the shelf floor. `position` is the plan (x, y) of
/// the footprint center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub spec: ObjectSpec,
    pub position: [f64; 2],
}

impl PlacedObject {
    pub fn footprint(&self) -> Rect {
        footprint_at(self.position, self.spec.dims)
    }

    pub fn cuboid(&self) -> Cuboid {
        let [w, d, h] = self.spec.dims;
        let [x, y] = self.position;
        Cuboid {
            min: [x - w / 2.0, y - d / 2.0, 0.0],
            max: [x + w / 2.0, y + d / 2.0, h],
        }
    }
}

/// Footprint rectangle of dims `(w, d, _)` centered at `pos`.
pub fn footprint_at(pos: [f64; 2], dims: [f64; 3]) -> Rect {
    Rect {
        x0: pos[0] - dims[0] / 2.0,
        x1: pos[0] + dims[0] / 2.0,
        y0: pos[1] - dims[1] / 2.0,
        y1: pos[1] + dims[1] / 2.0,
    }
}

/// True iff the open footprint rectangles intersect. Touching edges do not
/// collide, which lets the scene generator pack objects tightly.
pub fn footprints_collide(a: &PlacedObject, b: &PlacedObject) -> bool {
    a.footprint().overlaps_open(&b.footprint())
}

/// Complete simulator state: shelf, objects, and which object is sought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shelf: ShelfSpec,
    pub objects: Vec<PlacedObject>,
    pub target_index: usize,
}

impl Scene {
    pub fn target(&self) -> &PlacedObject {
        &self.objects[self.target_index]
    }

    pub fn plan_rect(&self) -> Rect {
        Rect {
            x0: 0.0,
            x1: self.shelf.width,
            y0: 0.0,
            y1: self.shelf.depth,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        // Tolerance at the resolution of the 6-decimal scene file format:
        // wall-flush or touching placements must survive a round trip.
        const EPS: f64 = 1e-6;
        self.shelf.validate()?;
        if self.target_index >= self.objects.len() {
            return Err(ModelError::BadTargetIndex(self.target_index));
        }
        let plan = self.plan_rect().shrunk(-EPS);
        let mut names = std::collections::HashSet::new();
        for obj in &self.objects {
            obj.spec.validate()?;
            if !names.insert(obj.spec.name.as_str()) {
                return Err(ModelError::DuplicateName(obj.spec.name.clone()));
            }
            if !plan.contains_rect(&obj.footprint()) {
                return Err(ModelError::OutOfBounds(obj.spec.name.clone()));
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let (a, b) = (
                    self.objects[i].footprint().shrunk(EPS / 2.0),
                    self.objects[j].footprint(),
                );
                if a.overlaps_open(&b) {
                    return Err(ModelError::Overlap(
                        self.objects[i].spec.name.clone(),
                        self.objects[j].spec.name.clone(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// True iff the open segment from `p` to `q` passes through the cuboid.
/// Endpoint contact (t = 0 or t = 1 exactly) does not count.
pub fn segment_hits_cuboid(p: [f64; 3], q: [f64; 3], c: &Cuboid) -> bool {
    let mut t_enter = 0.0f64;
    let mut t_exit = 1.0f64;
    for axis in 0..3 {
        let dir = q[axis] - p[axis];
        if dir.abs() < 1e-15 {
            if p[axis] < c.min[axis] || p[axis] > c.max[axis] {
                return false;
            }
            continue;
        }
        let mut t0 = (c.min[axis] - p[axis]) / dir;
        let mut t1 = (c.max[axis] - p[axis]) / dir;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return false;
        }
    }
    // The slab interval must reach into the open (0, 1) range.
    t_enter < 1.0 && t_exit > 0.0
}

/// Fraction of a `samples`x`samples` grid of points on the object's front
/// (camera-facing) face with an unobstructed open segment to the pinhole.
///
/// Deterministic for fixed inputs; grid points sit at cell centers of the
/// face. An object alone on the shelf always has fraction 1.0.
pub fn visibility_fraction(
    scene: &Scene,
    object_index: usize,
    samples: usize,
) -> Result<f64, ModelError> {
    if object_index >= scene.objects.len() {
        return Err(ModelError::BadObjectIndex {
            index: object_index,
            len: scene.objects.len(),
        });
    }
    if samples < 2 {
        return Err(ModelError::BadSampleCount(samples));
    }
    let occluders: Vec<Cuboid> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != object_index)
        .map(|(_, o)| o.cuboid())
        .collect();
    Ok(face_visible_fraction(
        &scene.shelf,
        &scene.objects[object_index],
        &occluders,
        samples,
        None,
    ))
}

/// Visibility of an arbitrary placed cuboid against an explicit occluder
/// set. `stop_at` short-circuits as soon as the visible-sample count
/// reaches the given value, returning an overestimate that is still `>=`
/// any threshold below `stop_at / samples^2`.
pub(crate) fn face_visible_fraction(
    shelf: &ShelfSpec,
    object: &PlacedObject,
    occluders: &[Cuboid],
    samples: usize,
    stop_at: Option<usize>,
) -> f64 {
    let cam = shelf.camera();
    let [w, _, h] = object.spec.dims;
    let face_y = object.position[1] - object.spec.dims[1] / 2.0;
    let x0 = object.position[0] - w / 2.0;
    let total = samples * samples;
    let mut visible = 0usize;
    // Temporal-coherence cache: neighboring rays are usually blocked by the
    // same occluder, so retrying it first short-circuits the scan.
    let mut last_blocker: Option<usize> = None;
    for i in 0..samples {
        let px = x0 + (i as f64 + 0.5) / samples as f64 * w;
        for j in 0..samples {
            let pz = (j as f64 + 0.5) / samples as f64 * h;
            let p = [px, face_y, pz];
            let mut blocked = false;
            if let Some(k) = last_blocker {
                blocked = segment_hits_cuboid(p, cam, &occluders[k]);
            }
            if !blocked {
                for (k, c) in occluders.iter().enumerate() {
                    if Some(k) == last_blocker {
                        continue;
                    }
                    if segment_hits_cuboid(p, cam, c) {
                        blocked = true;
                        last_blocker = Some(k);
                        break;
                    }
                }
            }
            if !blocked {
                visible += 1;
                if let Some(limit) = stop_at {
                    if visible >= limit {
                        return visible as f64 / total as f64;
                    }
                }
            }
        }
    }
    visible as f64 / total as f64
}

/// Per-object visibility fractions and the detected set at a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityReport {
    /// Visibility fraction per scene object index.
    pub fractions: Vec<f64>,
    /// Threshold used to populate `detected`.
    pub v_detect: f64,
}

impl VisibilityReport {
    pub fn is_detected(&self, index: usize) -> bool {
        self.fractions[index] >= self.v_detect
    }

    /// Indices of detected objects in ascending order.
    pub fn detected_indices(&self) -> Vec<usize> {
        (0..self.fractions.len())
            .filter(|&i| self.is_detected(i))
            .collect()
    }

    pub fn fraction_of(&self, scene: &Scene, label: &str) -> Option<f64> {
        scene
            .objects
            .iter()
            .position(|o| o.spec.name == label)
            .map(|i| self.fractions[i])
    }
}

/// Observation function: visibility fraction for every object plus the set
/// detected at `v_detect`. Pure in the scene; repeated calls agree.
pub fn observe(scene: &Scene, v_detect: f64) -> VisibilityReport {
    observe_at(scene, v_detect, DEFAULT_VISIBILITY_SAMPLES)
}

pub fn observe_at(scene: &Scene, v_detect: f64, samples: usize) -> VisibilityReport {
    assert!(
        v_detect > 0.0 && v_detect <= 1.0,
        "v_detect must be in (0, 1]"
    );
    let fractions = (0..scene.objects.len())
        .map(|i| visibility_fraction(scene, i, samples).expect("index in range"))
        .collect();
    VisibilityReport {
        fractions,
        v_detect,
    }
}

/// Bare placement helper for tests across the crate.
#[cfg(test)]
pub(crate) fn test_object(name: &str, dims: [f64; 3], pos: [f64; 2]) -> PlacedObject {
    PlacedObject {
        spec: ObjectSpec {
            name: name.into(),
            dims,
            category_path: vec![],
        },
        position: pos,
    }
}
