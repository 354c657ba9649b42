//! Occupancy distributions over hidden target poses.
//!
//! Three constructions: a semantic grid that spreads object-affinity mass
//! over the Voronoi regions of discovered objects, an analytic spatial grid
//! that enumerates every collision-free, occluded target pose against the
//! known geometry, and their per-bin product after projecting both to 1D
//! along camera rays. Explored-pose bookkeeping accumulates everything the
//! observations have ruled out.

use std::io::{self, BufRead, Write};

use crate::affinity::AffinityMatrix;
use crate::model::{footprint_at, segment_hits_cuboid, Cuboid, Rect, ShelfSpec};

/// Default grid resolution: 5 mm cells over the default 0.8 m x 0.35 m shelf.
pub const DEFAULT_GRID_NX: usize = 160;
pub const DEFAULT_GRID_NY: usize = 70;

/// Default 1D resolution.
pub const DEFAULT_BINS: usize = 512;

/// Default Gaussian smoothing width, in bins at B = 512.
pub const DEFAULT_SIGMA_BINS: f64 = 50.0;

/// Default face sample resolution for per-cell hypothetical visibility.
pub const DEFAULT_FEASIBILITY_SAMPLES: usize = 8;

/// Nonnegative mass over the shelf plan rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub depth: f64,
    /// Row-major, `mass[iy * nx + ix]`.
    pub mass: Vec<f64>,
}

impl OccupancyGrid {
    pub fn zeros(nx: usize, ny: usize, shelf: &ShelfSpec) -> Self {
        OccupancyGrid {
            nx,
            ny,
            width: shelf.width,
            depth: shelf.depth,
            mass: vec![0.0; nx * ny],
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            (ix as f64 + 0.5) * self.width / self.nx as f64,
            (iy as f64 + 0.5) * self.depth / self.ny as f64,
        ]
    }

    /// Cell containing a plan point, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let ix = ((x / self.width * self.nx as f64) as isize).clamp(0, self.nx as isize - 1);
        let iy = ((y / self.depth * self.ny as f64) as isize).clamp(0, self.ny as isize - 1);
        (ix as usize, iy as usize)
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn normalize(&mut self) {
        let t = self.total();
        if t > 0.0 {
            for m in &mut self.mass {
                *m /= t;
            }
        }
    }
}

/// Normalized nonnegative mass over shelf-width ray bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution1D {
    pub mass: Vec<f64>,
}

impl Distribution1D {
    pub fn uniform(bins: usize) -> Self {
        Distribution1D {
            mass: vec![1.0 / bins as f64; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn normalize(&mut self) {
        let t = self.total();
        if t > 0.0 {
            for m in &mut self.mass {
                *m /= t;
            }
        }
    }

    /// Shannon entropy in bits, with 0 * log 0 = 0.
    pub fn entropy_bits(&self) -> f64 {
        -self
            .mass
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        self.mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite mass"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// One discovered object: true scene identity for bookkeeping, the label the
/// detector believed (write-once, possibly noise-perturbed), the pose at
/// first discovery (drives semantics even after the object moves), and the
/// up-to-date pose (drives geometry; objects move only when the policy
/// moves them).
#[derive(Debug, Clone, PartialEq)]
pub struct KnownObject {
    pub object_index: usize,
    pub label: String,
    pub first_seen: [f64; 2],
    pub current: [f64; 2],
    pub dims: [f64; 3],
}

/// Everything a rollout has learned: the first-seen ledger and the grid of
/// poses already ruled out for the target.
#[derive(Debug, Clone)]
pub struct KnownWorld {
    pub objects: Vec<KnownObject>,
    pub explored: ExploredGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploredGrid {
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<bool>,
}

impl ExploredGrid {
    pub fn new(nx: usize, ny: usize) -> Self {
        ExploredGrid {
            nx,
            ny,
            cells: vec![false; nx * ny],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

impl KnownWorld {
    pub fn new(nx: usize, ny: usize) -> Self {
        KnownWorld {
            objects: Vec::new(),
            explored: ExploredGrid::new(nx, ny),
        }
    }

    pub fn knows(&self, object_index: usize) -> bool {
        self.objects.iter().any(|o| o.object_index == object_index)
    }

    pub fn by_object_index(&self, object_index: usize) -> Option<&KnownObject> {
        self.objects.iter().find(|o| o.object_index == object_index)
    }

    pub fn set_current(&mut self, object_index: usize, pos: [f64; 2]) {
        if let Some(o) = self
            .objects
            .iter_mut()
            .find(|o| o.object_index == object_index)
        {
            o.current = pos;
        }
    }

    /// Current known geometry as (position, dims) pairs.
    pub fn current_geometry(&self) -> Vec<([f64; 2], [f64; 3])> {
        self.objects.iter().map(|o| (o.current, o.dims)).collect()
    }
}

/// Why a constructed grid fell back to a degenerate shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStatus {
    Ok,
    /// No discovered objects: semantic grid is uniform.
    NoKnownObjects,
    /// Every discovered object has zero affinity to the target: uniform.
    AllZeroAffinity,
    /// No pose can hide the target: spatial grid is all zero.
    Exhausted,
}

/// Semantic occupancy over the shelf plan: each cell carries the affinity
/// between the target and the discovered object nearest to the cell center
/// (first-seen poses, footprint-center distance, ties to the lower ledger
/// index), normalized over the grid.
pub fn semantic_grid(
    world: &KnownWorld,
    target: &str,
    matrix: &AffinityMatrix,
    nx: usize,
    ny: usize,
    shelf: &ShelfSpec,
) -> (OccupancyGrid, GridStatus) {
    let mut grid = OccupancyGrid::zeros(nx, ny, shelf);
    if world.objects.is_empty() {
        grid.mass.fill(1.0 / (nx * ny) as f64);
        return (grid, GridStatus::NoKnownObjects);
    }
    let affinities: Vec<f64> = world
        .objects
        .iter()
        .map(|o| matrix.lookup(&o.label, target).unwrap_or(0.0))
        .collect();
    for iy in 0..ny {
        for ix in 0..nx {
            let [cx, cy] = grid.cell_center(ix, iy);
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (k, o) in world.objects.iter().enumerate() {
                let dx = cx - o.first_seen[0];
                let dy = cy - o.first_seen[1];
                let d2 = dx * dx + dy * dy;
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = k;
                }
            }
            grid.mass[iy * nx + ix] = affinities[best];
        }
    }
    if grid.total() <= 0.0 {
        grid.mass.fill(1.0 / (nx * ny) as f64);
        return (grid, GridStatus::AllZeroAffinity);
    }
    grid.normalize();
    (grid, GridStatus::Ok)
}

/// Where the camera ray through plan point (x, y) crosses the shelf opening
/// (y = 0), as a fraction of the shelf width.
pub fn opening_crossing(shelf: &ShelfSpec, x: f64, y: f64) -> f64 {
    let cx = shelf.width / 2.0;
    let d = shelf.camera_offset;
    (cx + (x - cx) * d / (d + y)) / shelf.width
}

/// Ray bin of a plan point: bins index rays through the opening points
/// `width * (b + 0.5) / B`, and a point belongs to the bin whose ray is
/// angularly nearest.
pub fn ray_bin_of(shelf: &ShelfSpec, bins: usize, x: f64, y: f64) -> usize {
    let u = opening_crossing(shelf, x, y);
    ((u * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
}

/// Reduce a plan grid to 1D by assigning each cell's mass to the bin of the
/// camera ray through its center. Total mass is preserved exactly before
/// the final renormalization.
pub fn project_to_1d(grid: &OccupancyGrid, shelf: &ShelfSpec, bins: usize) -> Distribution1D {
    let mut out = vec![0.0; bins];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let m = grid.mass[iy * grid.nx + ix];
            if m == 0.0 {
                continue;
            }
            let [x, y] = grid.cell_center(ix, iy);
            out[ray_bin_of(shelf, bins, x, y)] += m;
        }
    }
    let mut dist = Distribution1D { mass: out };
    dist.normalize();
    dist
}

/// Like [`project_to_1d`], but each cell's mass spreads over the whole bin
/// span its angular extent covers, proportional to overlap. This is the
/// area-true reduction along camera rays: every bin whose ray passes
/// through a massive cell receives mass, so a feasible cell can never fall
/// between bins. The rollout builds its 1D distributions this way.
pub fn project_to_1d_area(grid: &OccupancyGrid, shelf: &ShelfSpec, bins: usize) -> Distribution1D {
    let mut out = vec![0.0; bins];
    let hx = grid.width / grid.nx as f64 / 2.0;
    let hy = grid.depth / grid.ny as f64 / 2.0;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let m = grid.mass[iy * grid.nx + ix];
            if m == 0.0 {
                continue;
            }
            let [x, y] = grid.cell_center(ix, iy);
            let mut u_lo = f64::INFINITY;
            let mut u_hi = f64::NEG_INFINITY;
            for (cx, cy) in [
                (x - hx, y - hy),
                (x + hx, y - hy),
                (x - hx, y + hy),
                (x + hx, y + hy),
            ] {
                let u = opening_crossing(shelf, cx, cy);
                u_lo = u_lo.min(u);
                u_hi = u_hi.max(u);
            }
            let b_lo = (u_lo * bins as f64).clamp(0.0, bins as f64);
            let b_hi = (u_hi * bins as f64).clamp(0.0, bins as f64);
            let span = b_hi - b_lo;
            if span <= 1e-12 {
                let b = (b_lo as usize).min(bins - 1);
                out[b] += m;
                continue;
            }
            let first = b_lo.floor() as usize;
            let last = (b_hi.ceil() as usize).min(bins);
            for (b, o) in out.iter_mut().enumerate().take(last).skip(first) {
                let overlap = (b_hi.min((b + 1) as f64) - b_lo.max(b as f64)).max(0.0);
                *o += m * overlap / span;
            }
        }
    }
    let mut dist = Distribution1D { mass: out };
    dist.normalize();
    dist
}

/// Discrete Gaussian smoothing with a symmetric-reflection boundary,
/// renormalized. `sigma_bins == 0` is the identity. The kernel spans the
/// full signal width, so mass in any bin bleeds a strictly positive amount
/// into every other bin.
pub fn gaussian_smooth(dist: &Distribution1D, sigma_bins: f64) -> Distribution1D {
    assert!(sigma_bins >= 0.0, "sigma must be nonnegative");
    let b = dist.bins();
    if sigma_bins == 0.0 || b < 2 {
        return dist.clone();
    }
    let radius = b - 1;
    let mut kernel = vec![0.0; 2 * radius + 1];
    let inv = 1.0 / (2.0 * sigma_bins * sigma_bins);
    for (k, w) in kernel.iter_mut().enumerate() {
        let d = k as f64 - radius as f64;
        *w = (-d * d * inv).exp();
    }
    let ksum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= ksum;
    }
    // Mirror once on each side; the kernel radius never exceeds b, so a
    // single reflection level covers every tap.
    let mut ext: Vec<f64> = Vec::with_capacity(3 * b);
    ext.extend(dist.mass.iter().rev().copied());
    ext.extend(dist.mass.iter().copied());
    ext.extend(dist.mass.iter().rev().copied());
    let mut out = vec![0.0; b];
    for (i, o) in out.iter_mut().enumerate() {
        let base = b + i - radius;
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            acc += w * ext[base + k];
        }
        *o = acc;
    }
    let mut dist = Distribution1D { mass: out };
    dist.normalize();
    dist
}

/// Per-cell test of whether a target cuboid centered at the cell could
/// currently be hiding there: in bounds, collision-free against the known
/// footprints, and below the visibility threshold against the known
/// cuboids. Excludes the explored mask separately.
///
/// The cell stands for every pose inside it, so the bounds and collision
/// tests run on the footprint shrunk by the half-cell margins: a cell is
/// ruled out only when every pose it contains would fail. Without the
/// margin, a hidden target parked against the shelf wall or touching a
/// known object loses its own cell to center-pose quantization.
#[allow(clippy::too_many_arguments)]
fn pose_can_hide(
    center: [f64; 2],
    target_dims: [f64; 3],
    shelf: &ShelfSpec,
    known: &[([f64; 2], [f64; 3])],
    known_cuboids: &[Cuboid],
    visibility_threshold: f64,
    samples: usize,
    margin: [f64; 2],
) -> bool {
    let fp = footprint_at(center, target_dims);
    let plan = Rect {
        x0: 0.0,
        x1: shelf.width,
        y0: 0.0,
        y1: shelf.depth,
    };
    let core_fp = Rect {
        x0: fp.x0 + margin[0],
        x1: fp.x1 - margin[0],
        y0: fp.y0 + margin[1],
        y1: fp.y1 - margin[1],
    };
    if !plan.contains_rect(&core_fp) {
        return false;
    }
    for (pos, dims) in known {
        if core_fp.overlaps_open(&footprint_at(*pos, *dims)) {
            return false;
        }
    }
    // Visible-sample budget: fraction < threshold iff count < threshold * S^2.
    let total = (samples * samples) as f64;
    let budget = (visibility_threshold * total).ceil().max(1.0) as usize;
    let cam = shelf.camera();
    let face_y = fp.y0;
    let mut visible = 0usize;
    let mut last_blocker: Option<usize> = None;
    for i in 0..samples {
        let px = fp.x0 + (i as f64 + 0.5) / samples as f64 * target_dims[0];
        for j in 0..samples {
            let pz = (j as f64 + 0.5) / samples as f64 * target_dims[2];
            let p = [px, face_y, pz];
            let mut blocked = false;
            if let Some(k) = last_blocker {
                blocked = segment_hits_cuboid(p, cam, &known_cuboids[k]);
            }
            if !blocked {
                for (k, c) in known_cuboids.iter().enumerate() {
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
                if (visible as f64) >= visibility_threshold * total || visible >= budget {
                    return false;
                }
            }
        }
    }
    (visible as f64 / total) < visibility_threshold
}

/// Debugging view of the per-cell feasibility test: bounds, collision
/// (with the half-cell margin), and the center pose's visibility against
/// the known geometry.
pub fn diagnose_pose(
    center: [f64; 2],
    target_dims: [f64; 3],
    shelf: &ShelfSpec,
    known: &[([f64; 2], [f64; 3])],
    samples: usize,
    margin: [f64; 2],
) -> (bool, bool, f64) {
    let fp = footprint_at(center, target_dims);
    let plan = Rect {
        x0: 0.0,
        x1: shelf.width,
        y0: 0.0,
        y1: shelf.depth,
    };
    let core_fp = Rect {
        x0: fp.x0 + margin[0],
        x1: fp.x1 - margin[0],
        y0: fp.y0 + margin[1],
        y1: fp.y1 - margin[1],
    };
    let in_bounds = plan.contains_rect(&core_fp);
    let collides = known
        .iter()
        .any(|(pos, dims)| core_fp.overlaps_open(&footprint_at(*pos, *dims)));
    let cuboids: Vec<Cuboid> = known.iter().map(|(p, d)| cuboid_at(*p, *d)).collect();
    let cam = shelf.camera();
    let mut visible = 0usize;
    for i in 0..samples {
        let px = fp.x0 + (i as f64 + 0.5) / samples as f64 * target_dims[0];
        for j in 0..samples {
            let pz = (j as f64 + 0.5) / samples as f64 * target_dims[2];
            if !cuboids
                .iter()
                .any(|c| segment_hits_cuboid([px, fp.y0, pz], cam, c))
            {
                visible += 1;
            }
        }
    }
    (
        in_bounds,
        collides,
        visible as f64 / (samples * samples) as f64,
    )
}

/// Half-cell margins of a grid, as used by the feasibility collision test.
pub fn grid_half_cell(grid: &OccupancyGrid) -> [f64; 2] {
    half_cell_margin(grid)
}

fn half_cell_margin(grid: &OccupancyGrid) -> [f64; 2] {
    [
        grid.width / grid.nx as f64 / 2.0,
        grid.depth / grid.ny as f64 / 2.0,
    ]
}

fn cuboid_at(pos: [f64; 2], dims: [f64; 3]) -> Cuboid {
    Cuboid {
        min: [pos[0] - dims[0] / 2.0, pos[1] - dims[1] / 2.0, 0.0],
        max: [pos[0] + dims[0] / 2.0, pos[1] + dims[1] / 2.0, dims[2]],
    }
}

/// Geometric feasibility distribution: uniform over every cell where a
/// target cuboid could currently be hiding and that has not been ruled out.
///
/// Pure in its inputs; pass hypothetical geometry to score candidate
/// actions without touching the world.
pub fn spatial_grid(
    known: &[([f64; 2], [f64; 3])],
    target_dims: [f64; 3],
    shelf: &ShelfSpec,
    visibility_threshold: f64,
    samples: usize,
    explored: &ExploredGrid,
) -> (OccupancyGrid, GridStatus) {
    let mut grid = OccupancyGrid::zeros(explored.nx, explored.ny, shelf);
    let margin = half_cell_margin(&grid);
    let known_cuboids: Vec<Cuboid> = known.iter().map(|(p, d)| cuboid_at(*p, *d)).collect();
    let mut feasible = 0usize;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let idx = iy * grid.nx + ix;
            if explored.cells[idx] {
                continue;
            }
            let center = grid.cell_center(ix, iy);
            if pose_can_hide(
                center,
                target_dims,
                shelf,
                known,
                &known_cuboids,
                visibility_threshold,
                samples,
                margin,
            ) {
                grid.mass[idx] = 1.0;
                feasible += 1;
            }
        }
    }
    if feasible == 0 {
        return (grid, GridStatus::Exhausted);
    }
    grid.normalize();
    (grid, GridStatus::Ok)
}

/// Observation-time belief update: rule out every pose that could not be
/// hiding the target right now. A pose once ruled out stays ruled out --
/// the hidden target never moves, so exclusions are permanent.
///
/// Returns the spatial grid over the surviving poses, saving a second pass.
pub fn update_explored_and_spatial(
    world: &mut KnownWorld,
    target_dims: [f64; 3],
    shelf: &ShelfSpec,
    visibility_threshold: f64,
    samples: usize,
) -> (OccupancyGrid, GridStatus) {
    let known = world.current_geometry();
    let known_cuboids: Vec<Cuboid> = known.iter().map(|(p, d)| cuboid_at(*p, *d)).collect();
    let mut grid = OccupancyGrid::zeros(world.explored.nx, world.explored.ny, shelf);
    let margin = half_cell_margin(&grid);
    let mut feasible = 0usize;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let idx = iy * grid.nx + ix;
            let center = grid.cell_center(ix, iy);
            let can_hide = pose_can_hide(
                center,
                target_dims,
                shelf,
                &known,
                &known_cuboids,
                visibility_threshold,
                samples,
                margin,
            );
            if !can_hide {
                world.explored.cells[idx] = true;
            }
            if !world.explored.cells[idx] {
                grid.mass[idx] = 1.0;
                feasible += 1;
            }
        }
    }
    if feasible == 0 {
        return (grid, GridStatus::Exhausted);
    }
    grid.normalize();
    (grid, GridStatus::Ok)
}

/// Elementwise product of semantic and spatial 1D distributions,
/// renormalized. When the product carries (numerically) no mass the spatial
/// distribution wins: semantics must never veto geometric possibility.
pub fn combine(semantic: &Distribution1D, spatial: &Distribution1D) -> (Distribution1D, bool) {
    assert_eq!(semantic.bins(), spatial.bins(), "bin count mismatch");
    let mass: Vec<f64> = semantic
        .mass
        .iter()
        .zip(&spatial.mass)
        .map(|(a, b)| a * b)
        .collect();
    let total: f64 = mass.iter().sum();
    if total < 1e-12 {
        return (spatial.clone(), true);
    }
    let mut dist = Distribution1D { mass };
    dist.normalize();
    (dist, false)
}

/// Write a distribution in the dump format: a header line
/// `# B=<n> kind=<semantic|spatial|combined> step=<t>` then one value per
/// line.
pub fn write_distribution(
    w: &mut impl Write,
    dist: &Distribution1D,
    kind: &str,
    step: usize,
) -> io::Result<()> {
    writeln!(w, "# B={} kind={} step={}", dist.bins(), kind, step)?;
    for v in &dist.mass {
        writeln!(w, "{v:.17e}")?;
    }
    Ok(())
}

/// Parse a dump produced by [`write_distribution`]. Returns the
/// distribution plus the kind and step from the header.
pub fn read_distribution(r: &mut impl BufRead) -> io::Result<(Distribution1D, String, usize)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut bins = 0usize;
    let mut kind = String::new();
    let mut step = 0usize;
    for tok in header.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("B", v)) => bins = v.parse().map_err(|_| bad("bad B"))?,
            Some(("kind", v)) => kind = v.to_string(),
            Some(("step", v)) => step = v.parse().map_err(|_| bad("bad step"))?,
            _ => return Err(bad("bad header token")),
        }
    }
    let mut mass = Vec::with_capacity(bins);
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        mass.push(line.trim().parse::<f64>().map_err(|_| bad("bad value"))?);
    }
    if mass.len() != bins {
        return Err(bad("value count does not match header"));
    }
    Ok((Distribution1D { mass }, kind, step))
}
