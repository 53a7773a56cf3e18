//! Run directories: the manifest, the training log, test renders, the final
//! cloud and the gradient-by-depth histogram.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dropsplat::autograd::histogram_by_depth;
use dropsplat::dataset::{save_cloud, save_png, Split};
use dropsplat::render::{render, RenderSettings};
use dropsplat::trainer::{TrainOutcome, LOG_HEADER};
use serde::Serialize;

use crate::config::{FileConfig, Scene};

pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";
pub const LOG_FILE: &str = "train_log.csv";
pub const CLOUD_FILE: &str = "final_cloud.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct Schemas {
    pub train_log: &'static str,
    pub histogram: &'static str,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: FileConfig,
    pub train_log: String,
    pub final_cloud: String,
    pub histogram: String,
    pub test_images: Vec<String>,
    pub schemas: Schemas,
}

/// Histogram options shared by `train` and `histogram`.
#[derive(Debug, Clone, Copy)]
pub struct HistogramSpec {
    pub threshold: f64,
    pub bins: usize,
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(
    dir: &Path,
    command: &str,
    cfg: &FileConfig,
    scene: &Scene,
    outcome: &TrainOutcome,
    hist: HistogramSpec,
) -> anyhow::Result<RunManifest> {
    fs::create_dir_all(dir.join("test_images")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), toml::to_string(cfg)?)?;
    fs::write(dir.join(LOG_FILE), outcome.log.to_csv())?;
    save_cloud(&outcome.cloud, &dir.join(CLOUD_FILE))?;

    let settings = RenderSettings { background: cfg.train.background };
    let mut test_images = Vec::new();
    for (k, view) in scene.bundle.split(Split::Test).enumerate() {
        let name = format!("test_images/view_{k:03}.png");
        let out = render(&outcome.cloud, &view.camera, None, &settings)?;
        save_png(&out.image, &dir.join(&name))?;
        test_images.push(name);
    }

    let reference = scene
        .bundle
        .split(Split::Train)
        .next()
        .context("scene has no training views")?;
    let h = histogram_by_depth(&outcome.stats.mean(), &outcome.cloud, &reference.camera, hist.threshold, hist.bins)?;
    fs::write(dir.join(HISTOGRAM_FILE), h.to_csv())?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        train_log: LOG_FILE.into(),
        final_cloud: CLOUD_FILE.into(),
        histogram: HISTOGRAM_FILE.into(),
        test_images,
        schemas: Schemas { train_log: LOG_HEADER, histogram: HISTOGRAM_HEADER },
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn default_run_dir(label: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{label}_seed{seed}"))
}
