//! Scene manifests, PNG images, synthetic scene generation and cloud
//! initialization.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::error::{invalid, Error, Result};
use crate::geometry::{logit, Camera, Gaussian};
use crate::image::Image;
use crate::render::{render, RenderSettings};
use crate::rng::{stream, Stream};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub split: Split,
    pub image: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub xyz: [f64; 3],
    pub rgb: [f64; 3],
}

/// Posed views with images, optional seed points and the scene extent.
///
/// The scene occupies the cube `[-extent, extent]³` around the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<View>,
    pub initial_points: Option<Vec<ScenePoint>>,
    pub scene_extent: f64,
}

impl SceneBundle {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            if v.image.width() != v.camera.width || v.image.height() != v.camera.height {
                return Err(invalid(format!("view {i}: image does not match camera resolution")));
            }
        }
        if !(self.scene_extent > 0.0) {
            return Err(invalid("scene extent must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    focal: [f64; 2],
    principal: [f64; 2],
    resolution: [usize; 2],
    rotation_w2c: [f64; 9],
    translation: [f64; 3],
    #[serde(default = "default_near")]
    near_clip: f64,
    split: Split,
    image_path: String,
}

fn default_near() -> f64 {
    0.01
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    cameras: Vec<CameraRecord>,
    scene_extent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<ScenePoint>>,
}

fn rotation_to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

pub fn srgb_to_linear(s: f64) -> f64 {
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(l: f64) -> f64 {
    let l = l.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        l * 12.92
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// Writes a linear image as 8-bit sRGB PNG, clamping to [0, 1].
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| (linear_to_srgb(v) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| invalid("image buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// Reads an 8-bit PNG and decodes it from sRGB to linear [0, 1].
pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| srgb_to_linear(b as f64 / 255.0)).collect();
    Image::from_vec(w as usize, h as usize, data)
}

/// Parses a scene manifest and the images it references. Image paths are
/// resolved relative to the manifest's directory.
pub fn load_scene(path: &Path) -> Result<SceneBundle> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let malformed = |msg: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        msg,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.cameras.len());
    for (i, rec) in manifest.cameras.iter().enumerate() {
        let camera = Camera::new(
            rec.focal,
            rec.principal,
            rec.resolution,
            Matrix3::from_row_slice(&rec.rotation_w2c),
            Vector3::from(rec.translation),
            rec.near_clip,
        )
        .map_err(|e| malformed(format!("camera {i}: {e}")))?;
        let img_path = root.join(&rec.image_path);
        let image = load_png(&img_path)?;
        if image.width() != camera.width || image.height() != camera.height {
            return Err(Error::ResolutionMismatch {
                path: img_path,
                expected: (camera.width, camera.height),
                found: (image.width(), image.height()),
            });
        }
        views.push(View {
            camera,
            split: rec.split,
            image,
        });
    }
    let bundle = SceneBundle {
        views,
        initial_points: manifest.points,
        scene_extent: manifest.scene_extent,
    };
    bundle.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(bundle)
}

/// Writes `manifest.json` and `images/view_NNN.png` under `dir`, returning
/// the manifest path.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let mut cameras = Vec::with_capacity(bundle.views.len());
    for (i, v) in bundle.views.iter().enumerate() {
        let rel = format!("images/view_{i:03}.png");
        save_png(&v.image, &dir.join(&rel))?;
        let c = &v.camera;
        cameras.push(CameraRecord {
            focal: c.focal,
            principal: c.principal,
            resolution: [c.width, c.height],
            rotation_w2c: rotation_to_row_major(&c.rotation_w2c),
            translation: c.translation_w2c.into(),
            near_clip: c.near_clip,
            split: v.split,
            image_path: rel,
        });
    }
    let manifest = Manifest {
        cameras,
        scene_extent: bundle.scene_extent,
        points: bundle.initial_points.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct GaussianRecord {
    center: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudFile {
    sh_degree: usize,
    gaussians: Vec<GaussianRecord>,
}

/// Serializes every Gaussian parameter as JSON.
pub fn cloud_to_json(cloud: &GaussianCloud) -> Result<String> {
    let file = CloudFile {
        sh_degree: cloud.sh_degree,
        gaussians: cloud
            .iter()
            .map(|g| GaussianRecord {
                center: g.center.into(),
                log_scale: g.log_scale.into(),
                rotation: g.rotation,
                opacity_logit: g.opacity_logit,
                sh: g.sh_coeffs.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn cloud_from_json(text: &str) -> Result<GaussianCloud> {
    let file: CloudFile = serde_json::from_str(text)?;
    GaussianCloud::from_gaussians(
        file.sh_degree,
        file.gaussians
            .into_iter()
            .map(|r| Gaussian {
                center: r.center.into(),
                log_scale: r.log_scale.into(),
                rotation: r.rotation,
                opacity_logit: r.opacity_logit,
                sh_coeffs: r.sh,
            })
            .collect(),
    )
}

pub fn save_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    fs::write(path, cloud_to_json(cloud)?)?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    cloud_from_json(&fs::read_to_string(path)?)
}

/// Parameters of the synthetic sparse-view scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
    /// Camera distance from the scene center.
    pub camera_radius: f64,
    /// Total angle spanned by the camera arc, in degrees.
    pub arc_degrees: f64,
    /// Blob clusters in front of the scene center.
    pub near_clusters: usize,
    /// Blob clusters forming the background layer.
    pub far_clusters: usize,
    pub gaussians_per_cluster: usize,
    /// Seed points sampled from the ground-truth surface for initialization.
    pub n_points: usize,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 3,
            n_test: 5,
            width: 64,
            height: 64,
            fov_degrees: 50.0,
            camera_radius: 4.0,
            arc_degrees: 80.0,
            near_clusters: 4,
            far_clusters: 6,
            gaussians_per_cluster: 8,
            n_points: 200,
            sh_degree: 1,
            background: [0.0; 3],
        }
    }
}

/// Positions on the camera arc, ordered left to right, and the indices of
/// the ones used for training (spread evenly, including both ends).
fn arc_layout(n_train: usize, n_test: usize) -> Vec<Split> {
    let total = n_train + n_test;
    let mut splits = vec![Split::Test; total];
    if n_train == 1 {
        splits[total / 2] = Split::Train;
    } else {
        for j in 0..n_train {
            let k = (j as f64 * (total - 1) as f64 / (n_train - 1) as f64).round() as usize;
            splits[k] = Split::Train;
        }
    }
    splits
}

/// Samples a ground-truth cloud of colored blob clusters spanning a depth
/// range, places cameras on an arc and renders the ground-truth images.
pub fn generate_synthetic_scene(cfg: &SyntheticConfig, seed: u64) -> Result<(SceneBundle, GaussianCloud)> {
    if cfg.n_train == 0 || cfg.width == 0 || cfg.height == 0 || cfg.gaussians_per_cluster == 0 {
        return Err(invalid("synthetic scene counts must be positive"));
    }
    if cfg.near_clusters + cfg.far_clusters == 0 {
        return Err(invalid("synthetic scene needs at least one cluster"));
    }
    let mut rng = stream(seed, Stream::SceneGeneration);
    let mut cloud = GaussianCloud::new(cfg.sh_degree);
    let basis = sh::num_basis(cfg.sh_degree);

    // cameras sit on the -z side looking toward +z; near clusters occupy
    // z < 0, the background layer z > 0
    let mut add_cluster = |rng: &mut rand_chacha::ChaCha8Rng, center: Vector3<f64>, spread: f64, size: f64| {
        let base: [f64; 3] = [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
        for _ in 0..cfg.gaussians_per_cluster {
            let offset = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * spread;
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let rgb = base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.02, 0.98));
            let mut sh_coeffs = vec![[0.0; 3]; basis];
            sh_coeffs[0] = sh::rgb_to_dc(rgb);
            for c in sh_coeffs.iter_mut().skip(1) {
                *c = [0, 1, 2].map(|_| rng.random_range(-0.15..0.15));
            }
            cloud.push(Gaussian {
                center: center + offset,
                log_scale: Vector3::new(
                    (size * rng.random_range(0.5..1.6f64)).ln(),
                    (size * rng.random_range(0.5..1.6f64)).ln(),
                    (size * rng.random_range(0.5..1.6f64)).ln(),
                ),
                rotation: q,
                opacity_logit: logit(rng.random_range(0.75..0.97)),
                sh_coeffs,
            });
        }
    };
    for _ in 0..cfg.near_clusters {
        let c = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.7..0.7), rng.random_range(-0.9..-0.2));
        add_cluster(&mut rng, c, 0.12, 0.09);
    }
    for _ in 0..cfg.far_clusters {
        let c = Vector3::new(rng.random_range(-1.3..1.3), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.2));
        add_cluster(&mut rng, c, 0.25, 0.14);
    }

    let extent = cloud
        .iter()
        .flat_map(|g| g.center.iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
        * 1.1;

    let focal = 0.5 * cfg.width as f64 / (0.5 * cfg.fov_degrees.to_radians()).tan();
    let splits = arc_layout(cfg.n_train, cfg.n_test);
    let total = splits.len();
    let settings = RenderSettings {
        background: cfg.background,
    };
    let mut views = Vec::with_capacity(total);
    for (k, split) in splits.into_iter().enumerate() {
        let frac = if total == 1 { 0.5 } else { k as f64 / (total - 1) as f64 };
        let angle = (frac - 0.5) * cfg.arc_degrees.to_radians();
        let eye = Vector3::new(cfg.camera_radius * angle.sin(), -0.3, -cfg.camera_radius * angle.cos());
        let camera = Camera::look_at(eye, Vector3::zeros(), -Vector3::y(), focal, cfg.width, cfg.height)?;
        let image = render(&cloud, &camera, None, &settings)?.image;
        views.push(View { camera, split, image });
    }

    let points = (0..cfg.n_points)
        .map(|_| {
            let g = &cloud.gaussians[rng.random_range(0..cloud.len())];
            let r = crate::geometry::quat_to_rotation(g.rotation).expect("valid quaternion");
            let z = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let p = g.center + r * z.component_mul(&g.scale());
            let dc = g.sh_coeffs[0];
            ScenePoint {
                xyz: p.into(),
                rgb: dc.map(|c| (0.5 + sh::SH_C0 * c).clamp(0.0, 1.0)),
            }
        })
        .collect();

    Ok((
        SceneBundle {
            views,
            initial_points: Some(points),
            scene_extent: extent,
        },
        cloud,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    FromPoints,
    Random,
}

/// Distance from every point to its nearest neighbour, via a sweep over
/// points sorted along x. Single points get distance 0.
pub fn nearest_neighbor_distances(points: &[Vector3<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    let mut best = vec![f64::INFINITY; n];
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            let dx = points[j].x - points[i].x;
            if dx * dx >= best[i] {
                break;
            }
            let d2 = (points[j] - points[i]).norm_squared();
            best[i] = best[i].min(d2);
            best[j] = best[j].min(d2);
        }
        for &j in order[..pos].iter().rev() {
            let dx = points[i].x - points[j].x;
            if dx * dx >= best[i] {
                break;
            }
            let d2 = (points[j] - points[i]).norm_squared();
            best[i] = best[i].min(d2);
        }
    }
    best.into_iter().map(|d| if d.is_finite() { d.sqrt() } else { 0.0 }).collect()
}

/// Initial opacity of freshly created Gaussians.
pub const INIT_OPACITY: f64 = 0.1;

/// Builds the starting cloud from seed points or uniformly random centers.
pub fn init_cloud<R: Rng + ?Sized>(
    bundle: &SceneBundle,
    strategy: InitStrategy,
    n: usize,
    sh_degree: usize,
    rng: &mut R,
) -> Result<GaussianCloud> {
    let (centers, colors): (Vec<Vector3<f64>>, Vec<[f64; 3]>) = match strategy {
        InitStrategy::FromPoints => {
            let pts = bundle
                .initial_points
                .as_ref()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| invalid("from_points initialization requires seed points"))?;
            pts.iter().map(|p| (Vector3::from(p.xyz), p.rgb)).unzip()
        }
        InitStrategy::Random => {
            let e = bundle.scene_extent;
            (0..n)
                .map(|_| {
                    (
                        Vector3::new(rng.random_range(-e..=e), rng.random_range(-e..=e), rng.random_range(-e..=e)),
                        [0.5; 3],
                    )
                })
                .unzip()
        }
    };
    let nn = nearest_neighbor_distances(&centers);
    let fallback = bundle.scene_extent * 0.01;
    let gaussians = centers
        .into_iter()
        .zip(colors)
        .zip(nn)
        .map(|((c, rgb), d)| {
            let sigma = if d > 1e-7 { d } else { fallback };
            Gaussian::isotropic(c, sigma, INIT_OPACITY, rgb, sh_degree)
        })
        .collect();
    GaussianCloud::from_gaussians(sh_degree, gaussians)
}

/// Random small scene for gradient checks: `n` Gaussians in front of a
/// random camera with footprints of a few pixels.
pub fn random_test_scene<R: Rng + ?Sized>(
    n: usize,
    width: usize,
    height: usize,
    sh_degree: usize,
    rng: &mut R,
) -> Result<(GaussianCloud, Camera)> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = Vector3::new(4.0 * theta.cos(), rng.random_range(-1.0..1.0), 4.0 * theta.sin());
    let target = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let focal = width as f64 * rng.random_range(0.9..1.4);
    let cam = Camera::look_at(eye, target, Vector3::y(), focal, width, height)?;
    let basis = sh::num_basis(sh_degree);
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let center = target
            + Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let mut sh_coeffs: Vec<[f64; 3]> = (0..basis).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.4..0.4))).collect();
        sh_coeffs[0] = [0, 1, 2].map(|_| rng.random_range(-0.8..0.8));
        gaussians.push(Gaussian {
            center,
            log_scale: Vector3::new(
                rng.random_range(-2.6..-1.4),
                rng.random_range(-2.6..-1.4),
                rng.random_range(-2.6..-1.4),
            ),
            rotation: q,
            opacity_logit: rng.random_range(-2.0..2.0),
            sh_coeffs,
        });
    }
    Ok((GaussianCloud::from_gaussians(sh_degree, gaussians)?, cam))
}
