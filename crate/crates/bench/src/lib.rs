//! Shared fixtures for the criterion benchmarks.

use mechsearch_core::affinity::{ground_truth_matrix, AffinityMatrix};
use mechsearch_core::scenegen::{
    generate_accepted_scenes, SceneGenConfig, TaxonomyNode, PHARMACY_TAXONOMY,
};
use mechsearch_core::{Scene, ShelfSpec};

/// A representative 15-object pharmacy scene with a hidden target.
pub fn bench_scene() -> Scene {
    let tax = TaxonomyNode::parse(PHARMACY_TAXONOMY).expect("bundled taxonomy parses");
    let cfg = SceneGenConfig::new(15, 2468, 0.7);
    let (mut scenes, _) =
        generate_accepted_scenes(&tax, &cfg, &ShelfSpec::default(), 1).expect("scene generates");
    scenes.remove(0)
}

/// The pharmacy taxonomy-oracle matrix.
pub fn bench_matrix() -> AffinityMatrix {
    let tax = TaxonomyNode::parse(PHARMACY_TAXONOMY).expect("bundled taxonomy parses");
    ground_truth_matrix(&tax.category_groups()).expect("ground truth builds")
}
