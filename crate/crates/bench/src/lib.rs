//! Benchmark fixtures.

use dropsplat::dataset::{generate_synthetic_scene, SyntheticConfig};
use dropsplat::{Camera, GaussianCloud, Image};

/// Ground-truth synthetic cloud, its first camera and that view's image.
pub fn fixture(resolution: usize, per_cluster: usize) -> (GaussianCloud, Camera, Image) {
    let cfg = SyntheticConfig {
        width: resolution,
        height: resolution,
        gaussians_per_cluster: per_cluster,
        ..Default::default()
    };
    let (bundle, cloud) = generate_synthetic_scene(&cfg, 0).expect("valid synthetic config");
    let view = &bundle.views[0];
    (cloud, view.camera.clone(), view.image.clone())
}
