use std::fs;

use dropsplat::dataset::{
    generate_synthetic_scene, linear_to_srgb, load_cloud, load_scene, save_cloud, save_png, save_scene, Split,
    SyntheticConfig,
};
use dropsplat::{Error, Image};

const ONE_CAMERA: &str = r#"{
  "cameras": [{
    "focal": [20.0, 20.0],
    "principal": [4.0, 3.0],
    "resolution": [8, 6],
    "rotation_w2c": [1, 0, 0, 0, 1, 0, 0, 0, 1],
    "translation": [0, 0, 4],
    "split": "train",
    "image_path": "img/a.png"
  }],
  "scene_extent": 1.5
}"#;

#[test]
fn minimal_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    save_png(&Image::filled(8, 6, [0.2, 0.5, 0.9]), &dir.path().join("img/a.png")).unwrap();
    let path = dir.path().join("scene.json");
    fs::write(&path, ONE_CAMERA).unwrap();
    let bundle = load_scene(&path).unwrap();
    assert_eq!(bundle.views.len(), 1);
    assert_eq!(bundle.count(Split::Train), 1);
    assert_eq!((bundle.views[0].camera.width, bundle.views[0].camera.height), (8, 6));
    assert_eq!(bundle.scene_extent, 1.5);
    assert!(bundle.initial_points.is_none());
}

#[test]
fn absent_image_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    fs::write(&path, ONE_CAMERA).unwrap();
    match load_scene(&path) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("img/a.png"), "{}", p.display()),
        other => panic!("expected a missing-file error, got {other:?}"),
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    save_png(&Image::filled(5, 5, [0.0; 3]), &dir.path().join("img/a.png")).unwrap();
    let path = dir.path().join("scene.json");
    fs::write(&path, ONE_CAMERA).unwrap();
    assert!(matches!(load_scene(&path), Err(Error::ResolutionMismatch { .. })));
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    fs::write(&path, "{\"cameras\": 3}").unwrap();
    assert!(matches!(load_scene(&path), Err(Error::MalformedManifest { .. })));
}

#[test]
fn scene_round_trip() {
    let cfg = SyntheticConfig { width: 24, height: 20, ..Default::default() };
    let (bundle, truth) = generate_synthetic_scene(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_scene(&bundle, dir.path()).unwrap();
    let back = load_scene(&manifest).unwrap();

    assert_eq!(back.scene_extent, bundle.scene_extent);
    assert_eq!(back.initial_points, bundle.initial_points);
    assert_eq!(back.views.len(), bundle.views.len());
    for (a, b) in bundle.views.iter().zip(&back.views) {
        assert_eq!(a.split, b.split);
        assert_eq!(a.camera, b.camera);
        // 8-bit quantization happens in the sRGB domain
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((linear_to_srgb(*x) - linear_to_srgb(*y)).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    let cloud_path = dir.path().join("cloud.json");
    save_cloud(&truth, &cloud_path).unwrap();
    assert_eq!(load_cloud(&cloud_path).unwrap(), truth);
}
