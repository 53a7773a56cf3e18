//! Effective configuration: defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use dropsplat::dataset::{generate_synthetic_scene, load_scene, InitStrategy, SceneBundle, SyntheticConfig};
use dropsplat::regularizer::{DropMode, SelectCriterion};
use dropsplat::trainer::{Regularizer, TrainConfig};
use dropsplat::GaussianCloud;
use serde::{Deserialize, Serialize};

/// Layout of the optional `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Path to a scene manifest; ignored when a synthetic scene is requested.
    pub scene: Option<PathBuf>,
}

pub fn load_file(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum RegKind {
    None,
    Dropgaussian,
    Selective,
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ModeArg {
    Progressive,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum CriterionArg {
    Gradient,
    Distance,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum InitArg {
    FromPoints,
    Random,
}

/// Where the views come from.
#[derive(Debug, Clone, Args, Default)]
pub struct SceneArgs {
    /// Scene manifest (JSON) with cameras and image paths.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Generate the synthetic sparse-view scene instead of loading one.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub train_views: Option<usize>,
    #[arg(long)]
    pub test_views: Option<usize>,
    /// Square image side of the synthetic views.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Seed of the synthetic scene (defaults to the run seed).
    #[arg(long)]
    pub scene_seed: Option<u64>,
}

/// Training overrides shared by `train`, `ablate` and `histogram`.
#[derive(Debug, Clone, Args, Default)]
pub struct TrainArgs {
    /// TOML file with `[train]` and `[synthetic]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub reg: Option<RegKind>,
    /// Drop-rate scale factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// Weight of the D-SSIM term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub densify_until: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
}

fn mode(m: ModeArg) -> DropMode {
    match m {
        ModeArg::Progressive => DropMode::Progressive,
        ModeArg::Fixed => DropMode::Fixed,
    }
}

fn criterion(c: CriterionArg) -> SelectCriterion {
    match c {
        CriterionArg::Gradient => SelectCriterion::Gradient,
        CriterionArg::Distance => SelectCriterion::Distance,
    }
}

/// Applies flag overrides on top of the file configuration.
pub fn effective(file: &FileConfig, scene: &SceneArgs, args: &TrainArgs) -> anyhow::Result<FileConfig> {
    let mut out = file.clone();
    let t = &mut out.train;
    if let Some(v) = args.iters {
        t.t_total = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.eval_interval {
        t.eval_interval = v;
    }
    if let Some(v) = args.densify_until {
        t.densify_until = Some(v);
    }
    if let Some(v) = args.init {
        t.init = match v {
            InitArg::FromPoints => InitStrategy::FromPoints,
            InitArg::Random => InitStrategy::Random,
        };
    }
    if let Some(v) = args.sh_degree {
        t.sh_degree = v;
        out.synthetic.sh_degree = v;
    }
    t.regularizer = override_regularizer(t.regularizer, args)?;

    let s = &mut out.synthetic;
    if let Some(v) = scene.train_views {
        s.n_train = v;
    }
    if let Some(v) = scene.test_views {
        s.n_test = v;
    }
    if let Some(v) = scene.resolution {
        s.width = v;
        s.height = v;
    }
    if scene.synthetic {
        out.scene = None;
    } else if let Some(p) = &scene.scene {
        out.scene = Some(p.clone());
    }
    t.validate()?;
    Ok(out)
}

fn override_regularizer(current: Regularizer, a: &TrainArgs) -> anyhow::Result<Regularizer> {
    let (cur_gamma, cur_mode, cur_crit, cur_lreg) = match current {
        Regularizer::None => (None, None, None, None),
        Regularizer::DropGaussian { gamma, mode } => (Some(gamma), Some(mode), None, None),
        Regularizer::Selective { criterion, gamma, mode } => (Some(gamma), Some(mode), Some(criterion), None),
        Regularizer::L1 { criterion, lambda_reg } => (None, None, Some(criterion), Some(lambda_reg)),
    };
    let gamma = a.gamma.or(cur_gamma).unwrap_or(0.2);
    let m = a.mode.map(mode).or(cur_mode).unwrap_or(DropMode::Progressive);
    let c = a.criterion.map(criterion).or(cur_crit);
    let lambda_reg = a.lambda_reg.or(cur_lreg).unwrap_or(1e-3);
    let kind = match a.reg {
        Some(k) => k,
        None => match current {
            Regularizer::None => RegKind::None,
            Regularizer::DropGaussian { .. } => RegKind::Dropgaussian,
            Regularizer::Selective { .. } => RegKind::Selective,
            Regularizer::L1 { .. } => RegKind::L1,
        },
    };
    Ok(match kind {
        RegKind::None => Regularizer::None,
        RegKind::Dropgaussian => Regularizer::DropGaussian { gamma, mode: m },
        RegKind::Selective => {
            let Some(criterion) = c else { bail!("--reg selective needs --criterion") };
            Regularizer::Selective { criterion, gamma, mode: m }
        }
        RegKind::L1 => {
            let Some(criterion) = c else { bail!("--reg l1 needs --criterion") };
            Regularizer::L1 { criterion, lambda_reg }
        }
    })
}

/// Loaded scene plus the ground-truth cloud when it was generated.
pub struct Scene {
    pub bundle: SceneBundle,
    pub ground_truth: Option<GaussianCloud>,
}

pub fn load(cfg: &FileConfig, scene: &SceneArgs, seed: u64) -> anyhow::Result<Scene> {
    if scene.synthetic || (cfg.scene.is_none() && scene.scene.is_none() && has_synthetic_flags(scene)) {
        let (bundle, gt) = generate_synthetic_scene(&cfg.synthetic, scene.scene_seed.unwrap_or(seed))?;
        return Ok(Scene { bundle, ground_truth: Some(gt) });
    }
    match &cfg.scene {
        Some(p) => Ok(Scene { bundle: load_scene(p)?, ground_truth: None }),
        None => bail!("no scene given: pass --scene <manifest> or --synthetic"),
    }
}

fn has_synthetic_flags(s: &SceneArgs) -> bool {
    s.train_views.is_some() || s.test_views.is_some() || s.resolution.is_some() || s.scene_seed.is_some()
}
