//! The optimization loop: drop-plan sampling, render, loss, backward, Adam,
//! densification and periodic evaluation.

use serde::{Deserialize, Serialize};

use crate::autograd::backward;
use crate::cloud::GaussianCloud;
use crate::dataset::{init_cloud, InitStrategy, SceneBundle, Split};
use crate::error::{invalid, Error, Result};
use crate::losses::{color_loss, psnr, ssim, DEFAULT_LAMBDA, PEAK};
use crate::optim::{accumulate_densify_stats, adam_step, densify_and_prune, AdamState, DensifyParams, DensifyStats, LearningRates};
use crate::regularizer::{
    l1_opacity_penalty, l1_weights, sample_drop_mask, selective_drop_mask, DropMode, DropPlan, DropSchedule,
    SelectCriterion,
};
use crate::render::{render, RenderSettings};
use crate::rng::{stream, Stream};

/// Which regularizer runs alongside the photometric loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    None,
    /// Random drop with survivor compensation.
    DropGaussian { gamma: f64, mode: DropMode },
    /// Deterministic drop of the lowest-scoring Gaussians.
    Selective { criterion: SelectCriterion, gamma: f64, mode: DropMode },
    /// Weighted L1 penalty on activated opacities.
    L1 { criterion: SelectCriterion, lambda_reg: f64 },
}

impl Regularizer {
    fn schedule(&self, t_total: usize) -> Result<Option<DropSchedule>> {
        match *self {
            Regularizer::DropGaussian { gamma, mode } | Regularizer::Selective { gamma, mode, .. } => {
                Ok(Some(DropSchedule::new(gamma, t_total, mode)?))
            }
            _ => Ok(None),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Regularizer::None => "baseline".into(),
            Regularizer::DropGaussian { gamma, mode } => format!("drop_{}_{gamma}", mode_name(mode)),
            Regularizer::Selective { criterion, gamma, mode } => {
                format!("selective_{}_{}_{gamma}", criterion_name(criterion), mode_name(mode))
            }
            Regularizer::L1 { criterion, lambda_reg } => format!("l1_{}_{lambda_reg}", criterion_name(criterion)),
        }
    }
}

fn mode_name(m: DropMode) -> &'static str {
    match m {
        DropMode::Progressive => "progressive",
        DropMode::Fixed => "fixed",
    }
}

fn criterion_name(c: SelectCriterion) -> &'static str {
    match c {
        SelectCriterion::Gradient => "gradient",
        SelectCriterion::Distance => "distance",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_total: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    /// Last iteration at which densification may run; `None` means half the run.
    pub densify_until: Option<usize>,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub eval_interval: usize,
    pub seed: u64,
    pub sh_degree: usize,
    pub init: InitStrategy,
    /// Number of Gaussians for random initialization.
    pub init_points: usize,
    pub background: [f64; 3],
    pub lr: LearningRates,
    pub min_opacity: f64,
    /// Split threshold as a fraction of the scene extent.
    pub split_scale_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_total: 10_000,
            densify_interval: 100,
            densify_grad_threshold: 5e-4,
            densify_until: None,
            lambda: DEFAULT_LAMBDA,
            regularizer: Regularizer::None,
            eval_interval: 500,
            seed: 0,
            sh_degree: 1,
            init: InitStrategy::FromPoints,
            init_points: 200,
            background: [0.0; 3],
            lr: LearningRates::default(),
            min_opacity: 0.005,
            split_scale_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn densify_until(&self) -> usize {
        self.densify_until.unwrap_or(self.t_total / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.densify_interval == 0 || self.eval_interval == 0 {
            return Err(invalid("densify and eval intervals must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(invalid(format!("loss weight {} outside [0, 1]", self.lambda)));
        }
        if let Regularizer::L1 { lambda_reg, .. } = self.regularizer {
            if !(lambda_reg >= 0.0) {
                return Err(invalid("L1 weight must be non-negative"));
            }
        }
        self.regularizer.schedule(self.t_total.max(1))?;
        Ok(())
    }

    fn settings(&self) -> RenderSettings {
        RenderSettings { background: self.background }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub train_ssim: f64,
    pub test_ssim: f64,
    pub l1: f64,
    pub dssim: f64,
    pub n_gaussians: usize,
    pub r_t: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "iter,train_psnr,test_psnr,train_ssim,test_ssim,l1,dssim,n_gaussians,r_t";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iter, r.train_psnr, r.test_psnr, r.train_ssim, r.test_ssim, r.l1, r.dssim, r.n_gaussians, r.r_t
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// (PSNR, SSIM) per view in split order.
    pub per_view: Vec<(f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders every view of `split` with all Gaussians and averages metrics.
pub fn evaluate(cloud: &GaussianCloud, bundle: &SceneBundle, split: Split, settings: &RenderSettings) -> Result<EvalResult> {
    let mut per_view = Vec::new();
    for view in bundle.split(split) {
        let out = render(cloud, &view.camera, None, settings)?;
        per_view.push((psnr(&out.image, &view.image, PEAK)?, ssim(&out.image, &view.image)?));
    }
    if per_view.is_empty() {
        return Err(invalid(format!("no {split:?} views to evaluate")));
    }
    let n = per_view.len() as f64;
    Ok(EvalResult {
        mean_psnr: per_view.iter().map(|v| v.0).sum::<f64>() / n,
        mean_ssim: per_view.iter().map(|v| v.1).sum::<f64>() / n,
        per_view,
    })
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub log: TrainLog,
    /// Densification statistics accumulated since the last densify event.
    pub stats: DensifyStats,
}

/// Lifetime mean of the screen-space gradient norm per Gaussian, used by the
/// gradient criterion of the selective and L1 baselines.
struct GradientMetric {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl GradientMetric {
    fn values(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    fn remap(&mut self, origins: &[usize]) {
        self.sum = origins.iter().map(|&o| self.sum[o]).collect();
        self.count = origins.iter().map(|&o| self.count[o]).collect();
    }
}

/// Trains from the initialization prescribed by `cfg`.
pub fn train(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = stream(cfg.seed, Stream::Init);
    let cloud = init_cloud(bundle, cfg.init, cfg.init_points, cfg.sh_degree, &mut rng)?;
    train_from(bundle, cfg, cloud)
}

/// Trains starting from an explicit cloud.
pub fn train_from(bundle: &SceneBundle, cfg: &TrainConfig, mut cloud: GaussianCloud) -> Result<TrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    cloud.validate()?;
    let train_views: Vec<_> = bundle.split(Split::Train).collect();
    if train_views.is_empty() {
        return Err(invalid("scene has no training views"));
    }
    let settings = cfg.settings();
    let schedule = cfg.regularizer.schedule(cfg.t_total.max(1))?;
    let lr = cfg.lr.scaled(bundle.scene_extent);
    let mut state = AdamState::new(cloud.len(), cloud.num_basis(), lr);
    let mut stats = DensifyStats::new(cloud.len());
    let mut metric = GradientMetric {
        sum: vec![0.0; cloud.len()],
        count: vec![0; cloud.len()],
    };
    let densify = DensifyParams {
        grad_threshold: cfg.densify_grad_threshold,
        scale_split_threshold: cfg.split_scale_fraction * bundle.scene_extent,
        min_opacity: cfg.min_opacity,
    };
    let mut drop_rng = stream(cfg.seed, Stream::DropMask);
    let mut densify_rng = stream(cfg.seed, Stream::Densify);
    let mut log = TrainLog::default();
    let has_test = bundle.count(Split::Test) > 0;

    for t in 1..=cfg.t_total {
        let view = train_views[(t - 1) % train_views.len()];
        let cam = &view.camera;
        let r_t = match &schedule {
            Some(s) => s.drop_rate(t)?,
            None => 0.0,
        };
        let plan: Option<DropPlan> = match cfg.regularizer {
            _ if r_t == 0.0 => None,
            Regularizer::DropGaussian { .. } => Some(sample_drop_mask(cloud.len(), r_t, &mut drop_rng)?),
            Regularizer::Selective { criterion, .. } => {
                let values = criterion_values(&cloud, cam, &metric, criterion);
                Some(selective_drop_mask(&cloud, &values, r_t, criterion)?)
            }
            _ => None,
        };

        let out = render(&cloud, cam, plan.as_ref(), &settings)?;
        let (loss, dl_dimage) = color_loss(&out.image, &view.image, cfg.lambda)?;
        let mut total = loss.total;
        let mut grads = backward(&out, &cloud, cam, plan.as_ref(), &dl_dimage)?;
        if let Regularizer::L1 { criterion, lambda_reg } = cfg.regularizer {
            let values = criterion_values(&cloud, cam, &metric, criterion);
            let weights = l1_weights(&values, criterion)?;
            let (penalty, pen_grads) = l1_opacity_penalty(&cloud, &weights, lambda_reg)?;
            total += penalty;
            for (g, p) in grads.opacity_logit.iter_mut().zip(pen_grads) {
                *g += p;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }

        adam_step_with_decay(&mut cloud, &grads, &mut state, lr, t, cfg.t_total)?;
        accumulate_densify_stats(&mut stats, &grads, &out.visible)?;
        for (i, &vis) in out.visible.iter().enumerate() {
            if vis {
                metric.sum[i] += grads.screen_norm(i);
                metric.count[i] += 1;
            }
        }

        if t % cfg.densify_interval == 0 && t <= cfg.densify_until() {
            let outcome = densify_and_prune(&mut cloud, &mut stats, &mut state, &densify, &mut densify_rng)?;
            metric.remap(&outcome.origins);
        }

        if t % cfg.eval_interval == 0 || t == cfg.t_total {
            let train_eval = evaluate(&cloud, bundle, Split::Train, &settings)?;
            let (test_psnr, test_ssim) = if has_test {
                let e = evaluate(&cloud, bundle, Split::Test, &settings)?;
                (e.mean_psnr, e.mean_ssim)
            } else {
                (f64::NAN, f64::NAN)
            };
            log.records.push(LogRecord {
                iter: t,
                train_psnr: train_eval.mean_psnr,
                test_psnr,
                train_ssim: train_eval.mean_ssim,
                test_ssim,
                l1: loss.l1,
                dssim: loss.d_ssim,
                n_gaussians: cloud.len(),
                r_t,
            });
        }
    }
    Ok(TrainOutcome { cloud, log, stats })
}

fn adam_step_with_decay(
    cloud: &mut GaussianCloud,
    grads: &crate::autograd::GradientSet,
    state: &mut AdamState,
    lr: LearningRates,
    t: usize,
    t_total: usize,
) -> Result<()> {
    state.lr.center = lr.center_at(t as f64 / t_total as f64);
    adam_step(cloud, grads, state)
}

fn criterion_values(
    cloud: &GaussianCloud,
    cam: &crate::geometry::Camera,
    metric: &GradientMetric,
    criterion: SelectCriterion,
) -> Vec<f64> {
    match criterion {
        SelectCriterion::Gradient => metric.values(),
        SelectCriterion::Distance => cloud.iter().map(|g| cam.to_camera(&g.center).z).collect(),
    }
}
