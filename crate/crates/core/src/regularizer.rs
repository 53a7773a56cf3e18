//! Random Gaussian dropping with opacity compensation, its drop-rate
//! schedule, and the selective-drop and L1-opacity baselines.

use rand::Rng;

use crate::cloud::GaussianCloud;
use crate::error::{invalid, Result};
use crate::geometry::sigmoid;

/// One iteration's drop mask. Survivors have their activated opacity
/// multiplied by `1/(1−rate)`; dropped Gaussians are not rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct DropPlan {
    mask: Vec<bool>,
    rate: f64,
    compensation: f64,
}

impl DropPlan {
    /// Builds a plan from an explicit mask (`true` = dropped).
    pub fn from_mask(mask: Vec<bool>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            mask,
            rate,
            compensation: 1.0 / (1.0 - rate),
        })
    }

    /// Plan that keeps all `n` Gaussians at rate 0.
    pub fn keep_all(n: usize) -> Self {
        Self {
            mask: vec![false; n],
            rate: 0.0,
            compensation: 1.0,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn compensation(&self) -> f64 {
        self.compensation
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_dropped(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn num_dropped(&self) -> usize {
        self.mask.iter().filter(|&&d| d).count()
    }

    /// Compensation factor M(i): 0 when dropped, 1/(1−r) otherwise.
    pub fn factor(&self, i: usize) -> f64 {
        if self.mask[i] {
            0.0
        } else {
            self.compensation
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("drop rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Number of Gaussians dropped out of `n` at rate `r` (round half to even).
pub fn drop_count(n: usize, r: f64) -> usize {
    (r * n as f64).round_ties_even() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    /// r_t = γ·t/t_total
    Progressive,
    /// r_t = γ
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSchedule {
    pub gamma: f64,
    pub t_total: usize,
    pub mode: DropMode,
}

impl DropSchedule {
    pub fn new(gamma: f64, t_total: usize, mode: DropMode) -> Result<Self> {
        check_rate(gamma)?;
        if mode == DropMode::Progressive && t_total == 0 {
            return Err(invalid("progressive schedule needs t_total > 0"));
        }
        Ok(Self { gamma, t_total, mode })
    }

    /// Drop rate at iteration `t`.
    pub fn drop_rate(&self, t: usize) -> Result<f64> {
        if t > self.t_total {
            return Err(invalid(format!("iteration {t} beyond t_total {}", self.t_total)));
        }
        Ok(match self.mode {
            DropMode::Progressive => self.gamma * (t as f64 / self.t_total as f64),
            DropMode::Fixed => self.gamma,
        })
    }
}

/// Samples `round(r·n)` distinct indices uniformly without replacement.
///
/// Draws nothing from `rng` when no Gaussian is dropped.
pub fn sample_drop_mask<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<DropPlan> {
    check_rate(r)?;
    let k = drop_count(n, r);
    let mut mask = vec![false; n];
    if k > 0 {
        for i in rand::seq::index::sample(rng, n, k) {
            mask[i] = true;
        }
    }
    DropPlan::from_mask(mask, r)
}

/// Metric used by the selective-drop and L1 baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectCriterion {
    /// Accumulated screen-space gradient magnitude; low values are targeted.
    Gradient,
    /// Camera-frame depth; far Gaussians are targeted.
    Distance,
}

/// Converts raw values to a score where LOW means "targeted".
fn selection_scores(n: usize, values: &[f64], criterion: SelectCriterion) -> Result<Vec<f64>> {
    if values.len() != n {
        return Err(invalid(format!("{} metric values for {n} gaussians", values.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("NaN selection metric"));
    }
    match criterion {
        SelectCriterion::Gradient => {
            if values.iter().any(|&v| v < 0.0) {
                return Err(invalid("gradient magnitudes must be non-negative"));
            }
            Ok(values.to_vec())
        }
        SelectCriterion::Distance => Ok(values.iter().map(|d| -d).collect()),
    }
}

/// Indices sorted by ascending score, ties by ascending index.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Deterministically drops the `round(r·n)` lowest-scoring Gaussians.
pub fn selective_drop_mask(
    cloud: &GaussianCloud,
    values: &[f64],
    r: f64,
    criterion: SelectCriterion,
) -> Result<DropPlan> {
    check_rate(r)?;
    let n = cloud.len();
    let scores = selection_scores(n, values, criterion)?;
    let k = drop_count(n, r);
    let mut mask = vec![false; n];
    for &i in rank_order(&scores).iter().take(k) {
        mask[i] = true;
    }
    DropPlan::from_mask(mask, r)
}

/// Per-Gaussian L1 weights: normalized rank with the most targeted
/// Gaussian weighted 1 and the least targeted weighted 0.
pub fn l1_weights(values: &[f64], criterion: SelectCriterion) -> Result<Vec<f64>> {
    let n = values.len();
    let scores = selection_scores(n, values, criterion)?;
    let mut w = vec![0.0; n];
    if n == 1 {
        w[0] = 1.0;
        return Ok(w);
    }
    for (rank, &i) in rank_order(&scores).iter().enumerate() {
        w[i] = (n - 1 - rank) as f64 / (n - 1) as f64;
    }
    Ok(w)
}

/// `λ·Σ wᵢ·oᵢ` and its gradient with respect to each opacity logit.
pub fn l1_opacity_penalty(cloud: &GaussianCloud, weights: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if weights.len() != cloud.len() {
        return Err(invalid(format!("{} weights for {} gaussians", weights.len(), cloud.len())));
    }
    if !(lambda >= 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(invalid("L1 weights and lambda must be non-negative"));
    }
    let mut penalty = 0.0;
    let grads = cloud
        .iter()
        .zip(weights)
        .map(|(g, &w)| {
            let o = sigmoid(g.opacity_logit);
            penalty += w * o;
            lambda * w * o * (1.0 - o)
        })
        .collect();
    Ok((lambda * penalty, grads))
}
