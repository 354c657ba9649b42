//! First-order shelf-search workbench: a cuboid shelf simulator, semantic
//! and geometric occupancy distributions, object-affinity scoring against a
//! taxonomy ground truth, and the greedy distribution-reduction policies
//! that consume them.

pub mod affinity;
pub mod model;
pub mod occupancy;
pub mod openworld;
pub mod perception;
pub mod policy;
pub mod provider;
pub mod rng;
pub mod scenegen;
pub mod sceneio;

pub use affinity::AffinityMatrix;
pub use model::{
    footprints_collide, observe, visibility_fraction, ObjectSpec, PlacedObject, Scene, ShelfSpec,
    VisibilityReport,
};
pub use occupancy::{Distribution1D, KnownWorld, OccupancyGrid};
pub use policy::{rollout, Action, Policy, RolloutConfig, RolloutRecord};
pub use scenegen::{SceneGenConfig, TaxonomyNode};
