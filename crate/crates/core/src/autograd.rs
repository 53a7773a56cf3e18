//! Reverse-mode gradients through compositing, projection, covariance and
//! color evaluation, plus a central finite-difference checker.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::cloud::GaussianCloud;
use crate::error::{invalid, ParamClass, Result};
use crate::geometry::{inverse_sym2, project_detailed, sigmoid, Camera, Gaussian};
use crate::image::Image;
use crate::losses::color_loss;
use crate::regularizer::DropPlan;
use crate::render::{render, RenderOutput, RenderSettings};
use crate::sh;

/// Number of fixed row chunks whose partial sums are combined in order.
const REDUCTION_CHUNKS: usize = 16;

/// Per-Gaussian gradients, index-aligned with the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub center: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub sh_coeffs: Vec<Vec<[f64; 3]>>,
    /// ∂L/∂mean2d expressed in normalized device coordinates.
    pub screen_position: Vec<[f64; 2]>,
}

impl GradientSet {
    pub fn zeros(n: usize, num_basis: usize) -> Self {
        Self {
            center: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            sh_coeffs: vec![vec![[0.0; 3]; num_basis]; n],
            screen_position: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    /// Norm of the screen-space positional gradient (densification statistic).
    pub fn screen_norm(&self, i: usize) -> f64 {
        let [x, y] = self.screen_position[i];
        (x * x + y * y).sqrt()
    }

    /// Number of scalar components of `class` per Gaussian.
    pub fn class_len(&self, class: ParamClass) -> usize {
        param_len(class, self.sh_coeffs.first().map_or(1, Vec::len))
    }

    pub fn get(&self, class: ParamClass, i: usize, k: usize) -> f64 {
        match class {
            ParamClass::Center => self.center[i][k],
            ParamClass::LogScale => self.log_scale[i][k],
            ParamClass::Rotation => self.rotation[i][k],
            ParamClass::OpacityLogit => self.opacity_logit[i],
            ParamClass::ShCoeffs => self.sh_coeffs[i][k / 3][k % 3],
        }
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, ParamClass)> {
        for i in 0..self.len() {
            for class in ParamClass::ALL {
                if (0..self.class_len(class)).any(|k| !self.get(class, i, k).is_finite()) {
                    return Some((i, class));
                }
            }
        }
        None
    }
}

pub fn param_len(class: ParamClass, num_basis: usize) -> usize {
    match class {
        ParamClass::Center | ParamClass::LogScale => 3,
        ParamClass::Rotation => 4,
        ParamClass::OpacityLogit => 1,
        ParamClass::ShCoeffs => 3 * num_basis,
    }
}

/// Mutable access to scalar component `k` of a parameter class.
pub fn param_mut(g: &mut Gaussian, class: ParamClass, k: usize) -> &mut f64 {
    match class {
        ParamClass::Center => &mut g.center[k],
        ParamClass::LogScale => &mut g.log_scale[k],
        ParamClass::Rotation => &mut g.rotation[k],
        ParamClass::OpacityLogit => &mut g.opacity_logit,
        ParamClass::ShCoeffs => &mut g.sh_coeffs[k / 3][k % 3],
    }
}

/// Gradient with respect to one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    /// Full-matrix gradient of the conic: (G00, G01 = G10, G11).
    conic: [f64; 3],
    /// ∂L/∂õ, the compensated opacity.
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

#[derive(Debug, Clone, Copy)]
struct SplatParams {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
}

/// Back-propagates `dl_dimage` through the render that produced `out`.
pub fn backward(
    out: &RenderOutput,
    cloud: &GaussianCloud,
    cam: &Camera,
    plan: Option<&DropPlan>,
    dl_dimage: &Image,
) -> Result<GradientSet> {
    let n = cloud.len();
    let (w, h) = (cam.width, cam.height);
    if dl_dimage.width() != w || dl_dimage.height() != h || out.image.width() != w || out.image.height() != h {
        return Err(invalid("image gradient shape does not match the render"));
    }
    if out.splats.len() != n {
        return Err(invalid("render output does not match the cloud"));
    }
    if let Some(p) = plan {
        if p.len() != n {
            return Err(invalid("drop plan does not match the cloud"));
        }
    }
    let factor = |i: usize| plan.map_or(1.0, |p| p.factor(i));

    let params: Vec<Option<SplatParams>> = out
        .splats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_ref().map(|s| {
                let k = s.conic();
                SplatParams {
                    mean: [s.mean2d.x, s.mean2d.y],
                    conic: [k[(0, 0)], k[(0, 1)], k[(1, 1)]],
                    opacity: sigmoid(cloud.gaussians[i].opacity_logit) * factor(i),
                }
            })
        })
        .collect();

    let rows_per_chunk = h.div_ceil(REDUCTION_CHUNKS).max(1);
    let chunks: Vec<usize> = (0..h).step_by(rows_per_chunk).collect();
    let partials: Vec<Vec<ScreenGrad>> = chunks
        .par_iter()
        .map(|&y0| {
            let mut acc = vec![ScreenGrad::default(); n];
            for y in y0..(y0 + rows_per_chunk).min(h) {
                for x in 0..w {
                    backward_pixel(out, &params, dl_dimage, x, y, w, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![ScreenGrad::default(); n];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            s.add(p);
        }
    }

    let basis = cloud.num_basis();
    let per_gaussian: Vec<PerGaussian> = (0..n)
        .into_par_iter()
        .map(|i| {
            if out.splats[i].is_none() || factor(i) == 0.0 {
                return Ok(PerGaussian::zeros(basis));
            }
            chain_gaussian(&cloud.gaussians[i], cam, &screen[i], factor(i), out.color_clamped[i])
        })
        .collect::<Result<_>>()?;

    let mut grads = GradientSet::zeros(n, basis);
    for (i, pg) in per_gaussian.into_iter().enumerate() {
        grads.center[i] = pg.center;
        grads.log_scale[i] = pg.log_scale;
        grads.rotation[i] = pg.rotation;
        grads.opacity_logit[i] = pg.opacity_logit;
        grads.sh_coeffs[i] = pg.sh;
        grads.screen_position[i] = [screen[i].mean[0] * 0.5 * w as f64, screen[i].mean[1] * 0.5 * h as f64];
    }
    Ok(grads)
}

fn backward_pixel(
    out: &RenderOutput,
    params: &[Option<SplatParams>],
    dl_dimage: &Image,
    x: usize,
    y: usize,
    w: usize,
    acc: &mut [ScreenGrad],
) {
    let p = y * w + x;
    let entries = out.contribution_log.pixel(p);
    if entries.is_empty() {
        return;
    }
    let dl = dl_dimage.pixel(x, y);
    let t_final = out.final_transmittance[p];
    // color arriving from behind the current entry, background included
    let mut behind = out.background.map(|b| b * t_final);
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    for e in entries.iter().rev() {
        let c = out.colors[e.index];
        let at = e.alpha * e.transmittance;
        let g = &mut acc[e.index];
        let mut dalpha = 0.0;
        for ch in 0..3 {
            g.color[ch] += at * dl[ch];
            dalpha += dl[ch] * (e.transmittance * c[ch] - behind[ch] / (1.0 - e.alpha));
            behind[ch] += c[ch] * at;
        }
        if e.clamped {
            continue;
        }
        let sp = params[e.index].as_ref().expect("blended splat was projected");
        g.opacity += dalpha * e.gauss;
        let dpower = dalpha * sp.opacity * e.gauss;
        let dx = px - sp.mean[0];
        let dy = py - sp.mean[1];
        let [a, b, cc] = sp.conic;
        g.mean[0] += dpower * (a * dx + b * dy);
        g.mean[1] += dpower * (b * dx + cc * dy);
        g.conic[0] += dpower * (-0.5 * dx * dx);
        g.conic[1] += dpower * (-0.5 * dx * dy);
        g.conic[2] += dpower * (-0.5 * dy * dy);
    }
}

struct PerGaussian {
    center: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: Vec<[f64; 3]>,
}

impl PerGaussian {
    fn zeros(basis: usize) -> Self {
        Self {
            center: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; basis],
        }
    }
}

/// Chains screen-space gradients of one Gaussian back to its parameters.
fn chain_gaussian(g: &Gaussian, cam: &Camera, sg: &ScreenGrad, factor: f64, clamped: [bool; 3]) -> Result<PerGaussian> {
    let proj = project_detailed(g, cam)?.expect("gradient for a culled gaussian");
    let basis = g.sh_coeffs.len();

    // opacity through compensation and the logistic
    let o = sigmoid(g.opacity_logit);
    let opacity_logit = sg.opacity * factor * o * (1.0 - o);

    // color through SH
    let dcolor = [0, 1, 2].map(|ch| if clamped[ch] { 0.0 } else { sg.color[ch] });
    let dir = proj.splat.view_dir;
    let mut y = [0.0; 9];
    let mut dy = [Vector3::zeros(); 9];
    sh::basis(&dir, basis, &mut y);
    sh::basis_gradient(&dir, basis, &mut dy);
    let mut sh_grad = vec![[0.0; 3]; basis];
    let mut ddir = Vector3::zeros();
    for b in 0..basis {
        for ch in 0..3 {
            sh_grad[b][ch] = dcolor[ch] * y[b];
            ddir += dy[b] * (dcolor[ch] * g.sh_coeffs[b][ch]);
        }
    }
    let dist = proj.view_offset.norm();
    let mut dcenter = (ddir - dir * dir.dot(&ddir)) / dist;

    // conic -> 2D covariance
    let k = inverse_sym2(&proj.splat.cov2d);
    let gk = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let gcov = -(k * gk * k);

    // 2D covariance -> 3D covariance and the projection Jacobian
    let w2c = cam.rotation_w2c;
    let t = proj.jacobian * w2c;
    let dsigma: Matrix3<f64> = t.transpose() * gcov * t;
    let dt = 2.0 * gcov * t * proj.sigma3d;
    let dj = dt * w2c.transpose();

    let [fx, fy] = cam.focal;
    let (tx, ty, tz) = (proj.t_cam.x, proj.t_cam.y, proj.t_cam.z);
    let iz = 1.0 / tz;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let dmean = Vector2::new(sg.mean[0], sg.mean[1]);
    let dtx = dj[(0, 2)] * (-fx * iz2) + dmean.x * fx * iz;
    let dty = dj[(1, 2)] * (-fy * iz2) + dmean.y * fy * iz;
    let dtz = dj[(0, 0)] * (-fx * iz2)
        + dj[(0, 2)] * (2.0 * fx * tx * iz3)
        + dj[(1, 1)] * (-fy * iz2)
        + dj[(1, 2)] * (2.0 * fy * ty * iz3)
        - dmean.x * fx * tx * iz2
        - dmean.y * fy * ty * iz2;
    dcenter += w2c.transpose() * Vector3::new(dtx, dty, dtz);

    // Σ = M Mᵀ with M = R·diag(s)
    let r = proj.rotation;
    let s = proj.scale;
    let m = r * Matrix3::from_diagonal(&s);
    let dm = 2.0 * dsigma * m;
    let mut log_scale = Vector3::zeros();
    let mut dr = Matrix3::zeros();
    for j in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += dm[(i, j)] * r[(i, j)];
            dr[(i, j)] = dm[(i, j)] * s[j];
        }
        log_scale[j] = ds * s[j];
    }
    let rotation = quat_backward(proj.unit_quat, proj.quat_norm, &dr);

    Ok(PerGaussian {
        center: dcenter,
        log_scale,
        rotation,
        opacity_logit,
        sh: sh_grad,
    })
}

/// Gradient of the rotation matrix entries with respect to the raw
/// (unnormalized) quaternion.
fn quat_backward(q: [f64; 4], norm: f64, dr: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let d = |i: usize, j: usize| dr[(i, j)];
    let dw = 2.0
        * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1));
    let dx = 2.0
        * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2.0 * x * d(1, 1) - w * d(1, 2) + z * d(2, 0) + w * d(2, 1)
            - 2.0 * x * d(2, 2));
    let dy = 2.0
        * (-2.0 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0) + z * d(2, 1)
            - 2.0 * y * d(2, 2));
    let dz = 2.0
        * (-2.0 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2.0 * z * d(1, 1) + y * d(1, 2)
            + x * d(2, 0)
            + y * d(2, 1));
    let dq = [dw, dx, dy, dz];
    let dot: f64 = (0..4).map(|k| q[k] * dq[k]).sum();
    [0, 1, 2, 3].map(|k| (dq[k] - q[k] * dot) / norm)
}

/// Scalar objective used by the finite-difference checker.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Sum of all image values.
    Sum,
    /// Σ weight·value over all image values.
    Weighted(&'a Image),
    /// The training color loss against a target.
    Color { target: &'a Image, lambda: f64 },
}

impl LossSpec<'_> {
    /// Loss value and ∂L/∂image.
    pub fn evaluate(&self, image: &Image) -> Result<(f64, Image)> {
        match *self {
            LossSpec::Sum => Ok((
                image.data().iter().sum(),
                Image::filled(image.width(), image.height(), [1.0; 3]),
            )),
            LossSpec::Weighted(wts) => {
                if !wts.same_shape(image) {
                    return Err(invalid("weight image shape mismatch"));
                }
                Ok((image.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum(), wts.clone()))
            }
            LossSpec::Color { target, lambda } => {
                let (v, g) = color_loss(image, target, lambda)?;
                Ok((v.total, g))
            }
        }
    }
}

impl LossSpec<'_> {
    /// Sign pattern of the L1 residual; the loss has kinks where it changes.
    fn kink_signature(&self, image: &Image) -> Vec<i8> {
        match *self {
            LossSpec::Color { target, .. } => image
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).partial_cmp(&0.0).map_or(0, |o| o as i8))
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Worst analytic-vs-numeric mismatch for one parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub max_rel_error: f64,
    /// (gaussian, component) of the worst offender.
    pub worst: Option<(usize, usize)>,
    pub compared: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdReport {
    pub classes: Vec<ClassReport>,
    /// Parameters excluded because a perturbation within 10h changes the
    /// discrete render structure (culling, gather set, clamps, early stop)
    /// or crosses a kink of the loss.
    pub skipped: Vec<(usize, ParamClass, usize)>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn class(&self, class: ParamClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Discrete structure of a render; finite differences are only meaningful
/// between renders that share it.
fn structure_signature(out: &RenderOutput) -> (Vec<bool>, Vec<(usize, bool)>, Vec<usize>, Vec<[bool; 3]>) {
    let culled = out.splats.iter().map(Option::is_none).collect();
    let log = &out.contribution_log;
    let mut entries = Vec::with_capacity(log.total_entries());
    let mut counts = Vec::with_capacity(log.num_pixels());
    for p in 0..log.num_pixels() {
        let px = log.pixel(p);
        counts.push(px.len());
        entries.extend(px.iter().map(|c| (c.index, c.clamped)));
    }
    (culled, entries, counts, out.color_clamped.clone())
}

/// Relative error with a denominator floor of `1e-6·(1 + scale)`, where
/// `scale` is the largest analytic gradient magnitude of the scene.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = 1e-6 * (1.0 + scale);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares [`backward`] against central differences `(L(θ+h)−L(θ−h))/2h`
/// for every scalar parameter, holding the drop plan fixed.
pub fn finite_diff_check(
    cloud: &GaussianCloud,
    cam: &Camera,
    plan: Option<&DropPlan>,
    loss: &LossSpec<'_>,
    step: f64,
    settings: &RenderSettings,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if cloud.is_empty() {
        return Ok(FdReport::default());
    }
    let out = render(cloud, cam, plan, settings)?;
    let (_, dl) = loss.evaluate(&out.image)?;
    let grads = backward(&out, cloud, cam, plan, &dl)?;
    let base_sig = (structure_signature(&out), loss.kink_signature(&out.image));
    let basis = cloud.num_basis();
    let scale = ParamClass::ALL
        .iter()
        .flat_map(|&c| (0..cloud.len()).flat_map(move |i| (0..param_len(c, basis)).map(move |k| (c, i, k))))
        .map(|(c, i, k)| grads.get(c, i, k).abs())
        .fold(0.0, f64::max);

    let eval = |i: usize, class: ParamClass, k: usize, delta: f64| -> Result<(f64, bool)> {
        let mut perturbed = cloud.clone();
        *param_mut(&mut perturbed.gaussians[i], class, k) += delta;
        let o = render(&perturbed, cam, plan, settings)?;
        let same = (structure_signature(&o), loss.kink_signature(&o.image)) == base_sig;
        Ok((loss.evaluate(&o.image)?.0, same))
    };

    let mut report = FdReport::default();
    for class in ParamClass::ALL {
        let mut cr = ClassReport {
            class,
            max_rel_error: 0.0,
            worst: None,
            compared: 0,
            skipped: 0,
        };
        for i in 0..cloud.len() {
            for k in 0..param_len(class, basis) {
                let (lp, sp) = eval(i, class, k, step)?;
                let (lm, sm) = eval(i, class, k, -step)?;
                let (_, sfp) = eval(i, class, k, 10.0 * step)?;
                let (_, sfm) = eval(i, class, k, -10.0 * step)?;
                if !(sp && sm && sfp && sfm) {
                    cr.skipped += 1;
                    report.skipped.push((i, class, k));
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * step);
                let err = relative_error(grads.get(class, i, k), numeric, scale);
                cr.compared += 1;
                if err > cr.max_rel_error || cr.worst.is_none() {
                    cr.max_rel_error = cr.max_rel_error.max(err);
                    cr.worst = Some((i, k));
                }
            }
        }
        report.classes.push(cr);
    }
    Ok(report)
}

/// Counts per camera-depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl DepthHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// CSV with a `bin_lo,bin_hi,count` header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[b], self.edges[b + 1], c));
        }
        s
    }
}

/// Histogram by camera depth of the Gaussians whose `values` exceed
/// `threshold`. Bin edges span the depth range of all non-culled Gaussians.
pub fn histogram_by_depth(values: &[f64], cloud: &GaussianCloud, cam: &Camera, threshold: f64, bins: usize) -> Result<DepthHistogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    if values.len() != cloud.len() {
        return Err(invalid("one statistic per gaussian required"));
    }
    let depths: Vec<Option<f64>> = cloud
        .iter()
        .map(|g| {
            let z = cam.to_camera(&g.center).z;
            (z > cam.near_clip).then_some(z)
        })
        .collect();
    let (lo, hi) = depths
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    let mut counts = vec![0; bins];
    if lo > hi {
        return Ok(DepthHistogram {
            edges: vec![0.0; bins + 1],
            counts,
        });
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| if b == bins { hi } else { lo + width * b as f64 }).collect();
    for (d, &v) in depths.iter().zip(values) {
        if let Some(d) = d {
            if v > threshold {
                let b = if width > 0.0 { (((d - lo) / width) as usize).min(bins - 1) } else { 0 };
                counts[b] += 1;
            }
        }
    }
    Ok(DepthHistogram { edges, counts })
}

/// Histogram of Gaussians whose screen-space positional gradient norm
/// exceeds `threshold`, binned by camera depth.
pub fn gradient_distance_histogram(
    grads: &GradientSet,
    cloud: &GaussianCloud,
    cam: &Camera,
    threshold: f64,
    bins: usize,
) -> Result<DepthHistogram> {
    let norms: Vec<f64> = (0..grads.len()).map(|i| grads.screen_norm(i)).collect();
    histogram_by_depth(&norms, cloud, cam, threshold, bins)
}
