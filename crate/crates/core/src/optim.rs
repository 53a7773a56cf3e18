//! Adam updates and adaptive density control (clone, split, prune).

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{param_len, GradientSet};
use crate::cloud::GaussianCloud;
use crate::error::{invalid, Error, ParamClass, Result};
use crate::geometry::Gaussian;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter-class learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub center: f64,
    /// Final center rate reached by exponential decay at the end of training.
    pub center_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 1.6e-4,
            center_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            sh: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn for_class(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Center => self.center,
            ParamClass::LogScale => self.log_scale,
            ParamClass::Rotation => self.rotation,
            ParamClass::OpacityLogit => self.opacity,
            ParamClass::ShCoeffs => self.sh,
        }
    }

    /// Center rate after log-linear decay over `progress` ∈ [0, 1].
    pub fn center_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        (self.center.ln() * (1.0 - p) + self.center_final.ln() * p).exp()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center * factor,
            center_final: self.center_final * factor,
            ..*self
        }
    }

    pub fn zero() -> Self {
        Self {
            center: 0.0,
            center_final: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            sh: 0.0,
        }
    }
}

/// Adam moments, one row of `stride` values per Gaussian laid out as
/// center, log_scale, rotation, opacity_logit, sh_coeffs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    stride: usize,
    num_basis: usize,
    pub step: u64,
    pub lr: LearningRates,
}

fn row_stride(num_basis: usize) -> usize {
    ParamClass::ALL.iter().map(|&c| param_len(c, num_basis)).sum()
}

impl AdamState {
    pub fn new(n: usize, num_basis: usize, lr: LearningRates) -> Self {
        let stride = row_stride(num_basis);
        Self {
            m: vec![0.0; n * stride],
            v: vec![0.0; n * stride],
            stride,
            num_basis,
            step: 0,
            lr,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i * self.stride..(i + 1) * self.stride]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i * self.stride..(i + 1) * self.stride]
    }

    /// Rebuilds rows: `Some(i)` copies old row `i`, `None` starts at zero.
    fn remap(&mut self, rows: &[Option<usize>]) {
        let s = self.stride;
        let mut m = vec![0.0; rows.len() * s];
        let mut v = vec![0.0; rows.len() * s];
        for (new, old) in rows.iter().enumerate() {
            if let Some(old) = *old {
                m[new * s..(new + 1) * s].copy_from_slice(&self.m[old * s..(old + 1) * s]);
                v[new * s..(new + 1) * s].copy_from_slice(&self.v[old * s..(old + 1) * s]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Visits every scalar parameter of `g` with its gradient in row order.
fn for_each_param(g: &mut Gaussian, grads: &GradientSet, i: usize, mut f: impl FnMut(ParamClass, &mut f64, f64)) {
    for k in 0..3 {
        f(ParamClass::Center, &mut g.center[k], grads.center[i][k]);
    }
    for k in 0..3 {
        f(ParamClass::LogScale, &mut g.log_scale[k], grads.log_scale[i][k]);
    }
    for k in 0..4 {
        f(ParamClass::Rotation, &mut g.rotation[k], grads.rotation[i][k]);
    }
    f(ParamClass::OpacityLogit, &mut g.opacity_logit, grads.opacity_logit[i]);
    for (b, coeffs) in g.sh_coeffs.iter_mut().enumerate() {
        for ch in 0..3 {
            f(ParamClass::ShCoeffs, &mut coeffs[ch], grads.sh_coeffs[i][b][ch]);
        }
    }
}

/// One bias-corrected Adam update of every parameter; quaternions are
/// renormalized afterwards.
pub fn adam_step(cloud: &mut GaussianCloud, grads: &GradientSet, state: &mut AdamState) -> Result<()> {
    if grads.len() != cloud.len() || state.len() != cloud.len() || state.num_basis != cloud.num_basis() {
        return Err(invalid("cloud, gradients and optimizer state are not aligned"));
    }
    if let Some((index, class)) = grads.find_non_finite() {
        return Err(Error::NonFiniteGradient { index, class });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let stride = state.stride;
    let lr = state.lr;
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let m = &mut state.m[i * stride..(i + 1) * stride];
        let v = &mut state.v[i * stride..(i + 1) * stride];
        let mut k = 0;
        for_each_param(g, grads, i, |class, p, grad| {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * grad;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * grad * grad;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= lr.for_class(class) * m_hat / (v_hat.sqrt() + ADAM_EPS);
            k += 1;
        });
        let norm = g.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if norm > 0.0 {
            g.rotation = g.rotation.map(|q| q / norm);
        }
    }
    Ok(())
}

/// Running densification statistics since the last densification event.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    /// Sum of screen-space positional gradient norms.
    pub grad_accum: Vec<f64>,
    /// Number of views in which each Gaussian was visible.
    pub count: Vec<u32>,
    /// Sum of world-space center gradients; gives the clone offset direction.
    pub center_grad_accum: Vec<Vector3<f64>>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
            center_grad_accum: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    /// Mean accumulated statistic per Gaussian (0 when never observed).
    pub fn mean(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.count)
            .map(|(&a, &c)| if c == 0 { 0.0 } else { a / c as f64 })
            .collect()
    }
}

/// Adds the screen-space gradient norm of every visible Gaussian.
pub fn accumulate_densify_stats(stats: &mut DensifyStats, grads: &GradientSet, visibility: &[bool]) -> Result<()> {
    if stats.len() != grads.len() || visibility.len() != grads.len() {
        return Err(invalid("densify statistics are not aligned with the gradients"));
    }
    for (i, &vis) in visibility.iter().enumerate() {
        if vis {
            stats.grad_accum[i] += grads.screen_norm(i);
            stats.count[i] += 1;
            stats.center_grad_accum[i] += grads.center[i];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Activated max scale at or above which a Gaussian is split, not cloned.
    pub scale_split_threshold: f64,
    pub min_opacity: f64,
}

/// Scale divisor applied to split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// What a densification event did. `origins[j]` is the pre-densify row the
/// new row `j` derives from; `inherits[j]` is whether it keeps that row's
/// optimizer moments (only surviving originals do).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub origins: Vec<usize>,
    pub inherits: Vec<bool>,
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// nearly transparent ones. All index-aligned state is rebuilt in step and
/// the statistics are reset.
pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    stats: &mut DensifyStats,
    state: &mut AdamState,
    params: &DensifyParams,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    if stats.len() != n || state.len() != n {
        return Err(invalid("densify state is not aligned with the cloud"));
    }
    let mean = stats.mean();
    let mut rows: Vec<(Gaussian, usize, bool)> = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let mut outcome = DensifyOutcome::default();
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !(mean[i] > params.grad_threshold) {
            rows.push((g.clone(), i, true));
            continue;
        }
        let scale = g.scale();
        if scale.max() < params.scale_split_threshold {
            let mut c = g.clone();
            if let Some(dir) = stats.center_grad_accum[i].try_normalize(1e-300) {
                c.center -= dir * (0.5 * scale.max());
            }
            rows.push((g.clone(), i, true));
            clones.push((c, i, false));
            outcome.cloned += 1;
        } else {
            let r = g.rotation_matrix()?;
            for _ in 0..2 {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let mut c = g.clone();
                c.center += r * z.component_mul(&scale);
                c.log_scale = g.log_scale.add_scalar(-SPLIT_SCALE_DIVISOR.ln());
                children.push((c, i, false));
            }
            outcome.split += 1;
        }
    }
    rows.extend(clones);
    rows.extend(children);
    let before_prune = rows.len();
    rows.retain(|(g, _, _)| g.opacity() >= params.min_opacity);
    outcome.pruned = before_prune - rows.len();

    outcome.origins = rows.iter().map(|r| r.1).collect();
    outcome.inherits = rows.iter().map(|r| r.2).collect();
    let moment_rows: Vec<Option<usize>> = rows.iter().map(|r| r.2.then_some(r.1)).collect();
    state.remap(&moment_rows);
    cloud.gaussians = rows.into_iter().map(|r| r.0).collect();
    *stats = DensifyStats::new(cloud.len());
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param_cloud() -> (GaussianCloud, GradientSet) {
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.1, 0.5, [0.5; 3], 0);
        (GaussianCloud::from_gaussians(0, vec![g]).unwrap(), GradientSet::zeros(1, 1))
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let (mut cloud, grads) = one_param_cloud();
        let before = cloud.clone();
        let mut state = AdamState::new(1, 1, LearningRates::default());
        adam_step(&mut cloud, &grads, &mut state).unwrap();
        assert_eq!(cloud, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let (mut cloud, mut grads) = one_param_cloud();
        grads.opacity_logit[0] = 1.0;
        let lr = LearningRates { opacity: 0.1, ..LearningRates::default() };
        let mut state = AdamState::new(1, 1, lr);
        let before = cloud.gaussians[0].opacity_logit;
        adam_step(&mut cloud, &grads, &mut state).unwrap();
        assert!((cloud.gaussians[0].opacity_logit - before + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut cloud, mut grads) = one_param_cloud();
        grads.center[0] = Vector3::new(1.0, -2.0, 3.0);
        grads.rotation[0] = [0.5, 0.1, 0.0, 0.0];
        let before = cloud.clone();
        let mut state = AdamState::new(1, 1, LearningRates::zero());
        adam_step(&mut cloud, &grads, &mut state).unwrap();
        assert_eq!(cloud, before);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let (mut cloud, mut grads) = one_param_cloud();
        grads.log_scale[0].y = f64::NAN;
        let mut state = AdamState::new(1, 1, LearningRates::default());
        match adam_step(&mut cloud, &grads, &mut state) {
            Err(Error::NonFiniteGradient { index: 0, class: ParamClass::LogScale }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // minimize Σ a_k (x_k - b_k)² over the opacity logit and DC coefficients
        let (mut cloud, _) = one_param_cloud();
        let lr = LearningRates { opacity: 0.05, sh: 0.02, ..LearningRates::default() };
        let mut state = AdamState::new(1, 1, lr);
        let a = [1.5, 0.3, 2.0, 0.7];
        let b = [0.4, -1.0, 2.0, 0.25];
        let params = |c: &GaussianCloud| {
            let g = &c.gaussians[0];
            [g.opacity_logit, g.sh_coeffs[0][0], g.sh_coeffs[0][1], g.sh_coeffs[0][2]]
        };
        let mut reference = params(&cloud);
        let rates = [0.05, 0.02, 0.02, 0.02];
        let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
        for step in 1..=100 {
            let x = params(&cloud);
            let mut grads = GradientSet::zeros(1, 1);
            grads.opacity_logit[0] = 2.0 * a[0] * (x[0] - b[0]);
            for ch in 0..3 {
                grads.sh_coeffs[0][0][ch] = 2.0 * a[ch + 1] * (x[ch + 1] - b[ch + 1]);
            }
            adam_step(&mut cloud, &grads, &mut state).unwrap();
            for k in 0..4 {
                let g = 2.0 * a[k] * (reference[k] - b[k]);
                m[k] = 0.9 * m[k] + 0.1 * g;
                v[k] = 0.999 * v[k] + 0.001 * g * g;
                let mh = m[k] / (1.0 - 0.9f64.powi(step));
                let vh = v[k] / (1.0 - 0.999f64.powi(step));
                reference[k] -= rates[k] * mh / (vh.sqrt() + 1e-8);
            }
            let got = params(&cloud);
            for k in 0..4 {
                assert!((got[k] - reference[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quaternion_renormalized() {
        let (mut cloud, mut grads) = one_param_cloud();
        grads.rotation[0] = [0.0, 1.0, 0.0, 0.0];
        let mut state = AdamState::new(1, 1, LearningRates { rotation: 0.3, ..Default::default() });
        adam_step(&mut cloud, &grads, &mut state).unwrap();
        let q = cloud.gaussians[0].rotation;
        assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    fn stats_with(values: &[f64]) -> DensifyStats {
        let mut s = DensifyStats::new(values.len());
        for (i, &v) in values.iter().enumerate() {
            s.grad_accum[i] = v;
            s.count[i] = 1;
        }
        s
    }

    #[test]
    fn accumulation() {
        let mut s = DensifyStats::new(2);
        let mut g = GradientSet::zeros(2, 1);
        g.screen_position[0] = [0.3, 0.0];
        g.screen_position[1] = [0.0, 0.4];
        accumulate_densify_stats(&mut s, &g, &[true, false]).unwrap();
        accumulate_densify_stats(&mut s, &g, &[true, false]).unwrap();
        assert!((s.mean()[0] - 0.3).abs() < 1e-15);
        assert_eq!(s.count[1], 0);
        assert_eq!(s.grad_accum[1], 0.0);
    }

    #[test]
    fn accumulated_mean_matches_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 7;
        let mut s = DensifyStats::new(n);
        let mut seen: Vec<Vec<f64>> = vec![Vec::new(); n];
        for _ in 0..200 {
            let mut g = GradientSet::zeros(n, 1);
            let vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            for i in 0..n {
                g.screen_position[i] = [rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)];
                if vis[i] {
                    let [x, y] = g.screen_position[i];
                    seen[i].push(x.hypot(y));
                }
            }
            accumulate_densify_stats(&mut s, &g, &vis).unwrap();
        }
        for (i, m) in s.mean().iter().enumerate() {
            let oracle = if seen[i].is_empty() { 0.0 } else { seen[i].iter().sum::<f64>() / seen[i].len() as f64 };
            assert!((m - oracle).abs() <= 1e-12 * oracle.max(1e-300), "{i}: {m} vs {oracle}");
            assert_eq!(s.count[i] as usize, seen[i].len());
        }
    }

    fn params() -> DensifyParams {
        DensifyParams {
            grad_threshold: 5e-4,
            scale_split_threshold: 0.05,
            min_opacity: 0.005,
        }
    }

    #[test]
    fn quiet_cloud_unchanged() {
        let (mut cloud, _) = one_param_cloud();
        let before = cloud.clone();
        let mut stats = stats_with(&[1e-4]);
        let mut state = AdamState::new(1, 1, LearningRates::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify_and_prune(&mut cloud, &mut stats, &mut state, &params(), &mut rng).unwrap();
        assert_eq!(cloud, before);
        assert_eq!((out.cloned, out.split, out.pruned), (0, 0, 0));
    }

    #[test]
    fn small_high_gradient_clones() {
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.01, 0.5, [0.5; 3], 0);
        let mut cloud = GaussianCloud::from_gaussians(0, vec![g]).unwrap();
        let mut stats = stats_with(&[1e-3]);
        stats.center_grad_accum[0] = Vector3::new(1.0, 0.0, 0.0);
        let mut state = AdamState::new(1, 1, LearningRates::default());
        state.m[0] = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify_and_prune(&mut cloud, &mut stats, &mut state, &params(), &mut rng).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(out.cloned, 1);
        assert_eq!(state.len(), 2);
        assert_eq!(state.first_moment(0)[0], 0.7);
        assert!(state.first_moment(1).iter().all(|&v| v == 0.0));
        assert!(cloud.gaussians[1].center.x < 0.0);
        assert!(stats.grad_accum.iter().all(|&v| v == 0.0) && stats.len() == 2);
    }

    /// Replays the rules one Gaussian at a time and returns the expected
    /// population size.
    fn rule_oracle(cloud: &GaussianCloud, mean: &[f64], p: &DensifyParams) -> usize {
        let mut size = 0;
        for (g, &m) in cloud.iter().zip(mean) {
            let keeps = g.opacity() >= p.min_opacity;
            // a clone keeps its parent; a split replaces it with two children
            let copies = if m > p.grad_threshold { 2 } else { 1 };
            size += copies * keeps as usize;
        }
        size
    }

    #[test]
    fn mixed_population_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let gs: Vec<Gaussian> = (0..10)
                .map(|_| {
                    Gaussian::isotropic(
                        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)),
                        rng.random_range(0.005..0.2),
                        if rng.random_bool(0.3) { 0.001 } else { rng.random_range(0.01..0.9) },
                        [0.5; 3],
                        1,
                    )
                })
                .collect();
            let mut cloud = GaussianCloud::from_gaussians(1, gs).unwrap();
            let vals: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1e-3)).collect();
            let mut stats = stats_with(&vals);
            let expected = rule_oracle(&cloud, &vals, &params());
            let before = cloud.clone();
            let mut state = AdamState::new(10, 4, LearningRates::default());
            let out = densify_and_prune(&mut cloud, &mut stats, &mut state, &params(), &mut rng).unwrap();
            assert_eq!(cloud.len(), expected);
            assert_eq!(cloud.len(), 10 + out.cloned + 2 * out.split - out.split - out.pruned);
            assert_eq!(state.len(), cloud.len());
            assert_eq!(stats.len(), cloud.len());
            assert!(cloud.iter().all(|g| g.opacity() >= 0.005));
            for (j, &o) in out.origins.iter().enumerate() {
                assert_eq!(cloud.gaussians[j].opacity_logit, before.gaussians[o].opacity_logit);
            }
        }
    }

    #[test]
    fn split_children_are_smaller() {
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.2, 0.5, [0.5; 3], 0);
        let mut cloud = GaussianCloud::from_gaussians(0, vec![g.clone()]).unwrap();
        let mut stats = stats_with(&[1.0]);
        let mut state = AdamState::new(1, 1, LearningRates::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify_and_prune(&mut cloud, &mut stats, &mut state, &params(), &mut rng).unwrap();
        assert_eq!(out.split, 1);
        assert_eq!(cloud.len(), 2);
        for c in cloud.iter() {
            assert!((c.scale().x - 0.2 / 1.6).abs() < 1e-12);
            assert_ne!(c.center, g.center);
        }
    }
}
