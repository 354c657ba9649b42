use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mechsearch_bench::{bench_matrix, bench_scene};
use mechsearch_core::affinity::{jsd_score, uniform_matrix};
use mechsearch_core::model::observe;
use mechsearch_core::occupancy::{
    gaussian_smooth, project_to_1d_area, semantic_grid, spatial_grid, Distribution1D, ExploredGrid,
    KnownObject, KnownWorld,
};
use mechsearch_core::policy::{rollout, RolloutConfig};
use mechsearch_core::visibility_fraction;

fn visibility(c: &mut Criterion) {
    let scene = bench_scene();
    c.bench_function("visibility_fraction_16x16", |b| {
        b.iter(|| visibility_fraction(black_box(&scene), black_box(scene.target_index), 16))
    });
    c.bench_function("observe_full_scene", |b| {
        b.iter(|| observe(black_box(&scene), 0.05))
    });
}

fn known_world(scene: &mechsearch_core::Scene) -> KnownWorld {
    let report = observe(scene, 0.05);
    let mut world = KnownWorld::new(160, 70);
    for i in report.detected_indices() {
        let o = &scene.objects[i];
        world.objects.push(KnownObject {
            object_index: i,
            label: o.spec.name.clone(),
            first_seen: o.position,
            current: o.position,
            dims: o.spec.dims,
        });
    }
    world
}

fn distributions(c: &mut Criterion) {
    let scene = bench_scene();
    let matrix = bench_matrix();
    let world = known_world(&scene);
    let explored = ExploredGrid::new(160, 70);
    let dims = scene.target().spec.dims;
    c.bench_function("spatial_grid_160x70", |b| {
        b.iter(|| {
            spatial_grid(
                black_box(&world.current_geometry()),
                dims,
                &scene.shelf,
                0.5,
                8,
                &explored,
            )
        })
    });
    c.bench_function("semantic_grid_160x70", |b| {
        b.iter(|| {
            semantic_grid(
                black_box(&world),
                &scene.target().spec.name,
                &matrix,
                160,
                70,
                &scene.shelf,
            )
        })
    });
    let (grid, _) = spatial_grid(
        &world.current_geometry(),
        dims,
        &scene.shelf,
        0.5,
        8,
        &explored,
    );
    c.bench_function("project_to_1d_area_512", |b| {
        b.iter(|| project_to_1d_area(black_box(&grid), &scene.shelf, 512))
    });
    let mut mass = vec![0.0; 512];
    mass[100] = 0.6;
    mass[300] = 0.4;
    let dist = Distribution1D { mass };
    c.bench_function("gaussian_smooth_sigma50", |b| {
        b.iter(|| gaussian_smooth(black_box(&dist), 50.0))
    });
}

fn policies(c: &mut Criterion) {
    let scene = bench_scene();
    let matrix = bench_matrix();
    c.bench_function("rollout_dar_semantic_n15", |b| {
        b.iter(|| {
            rollout(
                black_box(&scene),
                black_box(&matrix),
                &RolloutConfig::default(),
            )
        })
    });
}

fn affinity(c: &mut Criterion) {
    let truth = bench_matrix();
    let uniform = uniform_matrix(truth.labels()).unwrap();
    c.bench_function("jsd_score_27_labels", |b| {
        b.iter(|| jsd_score(black_box(&uniform), black_box(&truth)))
    });
}

criterion_group!(benches, visibility, distributions, policies, affinity);
criterion_main!(benches);
