//! Front-to-back alpha compositing of depth-sorted splats.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::GaussianCloud;
use crate::error::{invalid, Result};
use crate::geometry::{project_detailed, sigmoid, Camera, Splat2D};
use crate::image::Image;
use crate::regularizer::DropPlan;
use crate::sh;

/// Upper clamp on any single splat's alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once transmittance falls below this value.
pub const T_MIN: f64 = 1e-4;
/// Gather radius in units of the splat's larger standard deviation.
pub const CUTOFF_SIGMAS: f64 = 3.0;
/// Pixel columns per screen bin.
const BAND_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [0.0; 3] }
    }
}

/// One blended splat at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub index: usize,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    /// 2D Gaussian value at the pixel center.
    pub gauss: f64,
    /// Whether `alpha` was clamped to `ALPHA_MAX`.
    pub clamped: bool,
}

/// Per-pixel ordered contribution lists, stored per image row in
/// compressed form (offsets into the row's entries).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContributionLog {
    width: usize,
    rows: Vec<RowLog>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RowLog {
    offsets: Vec<u32>,
    entries: Vec<Contribution>,
}

impl ContributionLog {
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        let row = &self.rows[p / self.width];
        let x = p % self.width;
        &row.entries[row.offsets[x] as usize..row.offsets[x + 1] as usize]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.rows.len()
    }

    pub fn total_entries(&self) -> usize {
        self.rows.iter().map(|r| r.entries.len()).sum()
    }
}

/// Rendered image plus everything the backward pass replays.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    pub contribution_log: ContributionLog,
    /// Projected splat per Gaussian; `None` when culled.
    pub splats: Vec<Option<Splat2D>>,
    /// Activated (clamped) color per Gaussian for this view.
    pub colors: Vec<[f64; 3]>,
    /// Channels whose color hit the lower clamp.
    pub color_clamped: Vec<[bool; 3]>,
    /// Projected in front of the near plane with a footprint touching the
    /// image, regardless of dropping.
    pub visible: Vec<bool>,
    pub background: [f64; 3],
}

/// Indices ordered by ascending depth, ties by ascending index.
pub fn depth_sort(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    order
}

/// Composites an already ordered list of `(color, alpha)` entries over
/// `background`, returning the color and the final transmittance.
pub fn composite_pixel(entries: &[([f64; 3], f64)], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for &(c, alpha) in entries {
        let alpha = alpha.min(ALPHA_MAX);
        for ch in 0..3 {
            color[ch] += c[ch] * alpha * t;
        }
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += t * background[ch];
    }
    (color, t)
}

/// Screen-space data of one splat that takes part in blending.
#[derive(Debug, Clone, Copy)]
struct ActiveSplat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    radius_sq: f64,
    opacity: f64,
    color: [f64; 3],
}

struct RowOutput {
    colors: Vec<f64>,
    transmittance: Vec<f64>,
    log: RowLog,
}

/// Renders `cloud` from `cam`. With a plan, dropped Gaussians are skipped
/// and survivors' opacities are multiplied by the plan's compensation.
pub fn render(cloud: &GaussianCloud, cam: &Camera, plan: Option<&DropPlan>, settings: &RenderSettings) -> Result<RenderOutput> {
    if cam.width == 0 || cam.height == 0 {
        return Err(invalid("camera resolution must be positive"));
    }
    if let Some(p) = plan {
        if p.len() != cloud.len() {
            return Err(invalid(format!("drop plan covers {} gaussians, cloud has {}", p.len(), cloud.len())));
        }
    }
    let (w, h) = (cam.width, cam.height);
    let n = cloud.len();
    let cam_pos = cam.position();

    let mut splats = Vec::with_capacity(n);
    let mut colors = vec![[0.0; 3]; n];
    let mut color_clamped = vec![[false; 3]; n];
    let mut visible = vec![false; n];
    let mut active = Vec::new();
    for (i, g) in cloud.iter().enumerate() {
        let Some(proj) = project_detailed(g, cam)? else {
            splats.push(None);
            continue;
        };
        let s = proj.splat;
        let radius = CUTOFF_SIGMAS * s.max_eigenvalue().sqrt();
        visible[i] = s.mean2d.x + radius >= 0.0
            && s.mean2d.x - radius <= w as f64
            && s.mean2d.y + radius >= 0.0
            && s.mean2d.y - radius <= h as f64;
        let dir: Vector3<f64> = (g.center - cam_pos).normalize();
        let (rgb, clamped) = sh::eval_raw(&g.sh_coeffs, &dir);
        colors[i] = rgb;
        color_clamped[i] = clamped;
        let factor = plan.map_or(1.0, |p| p.factor(i));
        if visible[i] && factor != 0.0 {
            let k = s.conic();
            active.push((
                s.depth,
                ActiveSplat {
                    index: i,
                    mean: [s.mean2d.x, s.mean2d.y],
                    conic: [k[(0, 0)], k[(0, 1)], k[(1, 1)]],
                    radius_sq: radius * radius,
                    opacity: sigmoid(g.opacity_logit) * factor,
                    color: rgb,
                },
            ));
        }
        splats.push(Some(s));
    }
    active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)));

    // bin depth-ordered splats into column bands of every row their gather
    // disc touches; the exact disc test still runs per pixel
    let bands = w.div_ceil(BAND_WIDTH);
    let mut bins: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); bands]; h];
    let active: Vec<ActiveSplat> = active.into_iter().map(|(_, s)| s).collect();
    for (k, s) in active.iter().enumerate() {
        let r = s.radius_sq.sqrt();
        let lo = ((s.mean[1] - r - 0.5).ceil().max(0.0)) as usize;
        let hi = (s.mean[1] + r - 0.5).floor();
        if hi < 0.0 {
            continue;
        }
        let hi = (hi as usize).min(h - 1);
        for (y, row) in bins.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let dy = y as f64 + 0.5 - s.mean[1];
            // one pixel of slack keeps rounding from excluding a band
            let half = (s.radius_sq - dy * dy).max(0.0).sqrt() + 1.0;
            let x0 = (s.mean[0] - half - 0.5).ceil();
            let x1 = (s.mean[0] + half - 0.5).floor();
            if x1 < 0.0 || x0 > (w - 1) as f64 {
                continue;
            }
            let b0 = x0.max(0.0) as usize / BAND_WIDTH;
            let b1 = (x1 as usize).min(w - 1) / BAND_WIDTH;
            for band in &mut row[b0..=b1] {
                band.push(k as u32);
            }
        }
    }

    let bg = settings.background;
    let row_outputs: Vec<RowOutput> = bins
        .par_iter()
        .enumerate()
        .map(|(y, row)| render_row(&active, row, y, w, bg))
        .collect();

    let mut data = Vec::with_capacity(w * h * 3);
    let mut final_transmittance = Vec::with_capacity(w * h);
    let mut logs = Vec::with_capacity(h);
    for row in row_outputs {
        data.extend_from_slice(&row.colors);
        final_transmittance.extend_from_slice(&row.transmittance);
        logs.push(row.log);
    }

    Ok(RenderOutput {
        image: Image::from_vec(w, h, data)?,
        final_transmittance,
        contribution_log: ContributionLog { width: w, rows: logs },
        splats,
        colors,
        color_clamped,
        visible,
        background: bg,
    })
}

fn render_row(active: &[ActiveSplat], bands: &[Vec<u32>], y: usize, width: usize, bg: [f64; 3]) -> RowOutput {
    let mut out = RowOutput {
        colors: Vec::with_capacity(width * 3),
        transmittance: Vec::with_capacity(width),
        log: RowLog {
            offsets: Vec::with_capacity(width + 1),
            entries: Vec::with_capacity(width * 16),
        },
    };
    out.log.offsets.push(0);
    let py = y as f64 + 0.5;
    for x in 0..width {
        let px = x as f64 + 0.5;
        let mut color = [0.0; 3];
        let mut t = 1.0;
        for &k in &bands[x / BAND_WIDTH] {
            let s = &active[k as usize];
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            if dx * dx + dy * dy > s.radius_sq {
                continue;
            }
            let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
            let gauss = power.exp();
            let raw = s.opacity * gauss;
            let clamped = raw > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            for ch in 0..3 {
                color[ch] += s.color[ch] * alpha * t;
            }
            out.log.entries.push(Contribution {
                index: s.index,
                alpha,
                transmittance: t,
                gauss,
                clamped,
            });
            t *= 1.0 - alpha;
            if t < T_MIN {
                break;
            }
        }
        for ch in 0..3 {
            color[ch] += t * bg[ch];
        }
        out.colors.extend_from_slice(&color);
        out.transmittance.push(t);
        out.log.offsets.push(out.log.entries.len() as u32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian;
    use nalgebra::{Matrix3, Vector3};

    fn cam8() -> Camera {
        Camera::new([10.0, 10.0], [4.5, 4.5], [8, 8], Matrix3::identity(), Vector3::zeros(), 0.01).unwrap()
    }

    #[test]
    fn depth_sort_examples() {
        let mk = |d: f64| Splat2D {
            mean2d: Default::default(),
            cov2d: Default::default(),
            depth: d,
            view_dir: Vector3::z(),
        };
        assert_eq!(depth_sort(&[mk(3.0), mk(1.0), mk(2.0)]), vec![1, 2, 0]);
        assert_eq!(depth_sort(&[mk(1.0), mk(1.0)]), vec![0, 1]);
    }

    #[test]
    fn composite_examples() {
        let bg = [0.2, 0.4, 0.6];
        assert_eq!(composite_pixel(&[], bg), (bg, 1.0));
        let c = [1.0, 0.5, 0.25];
        let (out, t) = composite_pixel(&[(c, 1.0)], bg);
        for ch in 0..3 {
            assert!((out[ch] - (0.99 * c[ch] + 0.01 * bg[ch])).abs() < 1e-15);
        }
        assert!((t - 0.01).abs() < 1e-15);
        let c2 = [0.0, 1.0, 0.0];
        let (out, t) = composite_pixel(&[(c, 0.5), (c2, 0.5)], bg);
        for ch in 0..3 {
            assert!((out[ch] - (0.5 * c[ch] + 0.25 * c2[ch] + 0.25 * bg[ch])).abs() < 1e-15);
        }
        assert_eq!(t, 0.25);
    }

    #[test]
    fn composite_terminates_early() {
        let entries = vec![([1.0; 3], 0.99); 5];
        let (_, t) = composite_pixel(&entries, [0.0; 3]);
        // 0.01^2 = 1e-4 is not below T_MIN, the third entry brings T to 1e-6
        assert!((t - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cloud = GaussianCloud::new(0);
        let out = render(&cloud, &cam8(), None, &RenderSettings { background: [0.1, 0.2, 0.3] }).unwrap();
        assert_eq!(out.image, Image::filled(8, 8, [0.1, 0.2, 0.3]));
        assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
        assert_eq!(out.contribution_log.total_entries(), 0);
    }

    #[test]
    fn all_dropped_renders_background() {
        let gs = (0..4)
            .map(|i| Gaussian::isotropic(Vector3::new(0.1 * i as f64, 0.0, 3.0), 0.3, 0.9, [0.9; 3], 1))
            .collect();
        let cloud = GaussianCloud::from_gaussians(1, gs).unwrap();
        let plan = DropPlan::from_mask(vec![true; 4], 0.5).unwrap();
        let out = render(&cloud, &cam8(), Some(&plan), &RenderSettings::default()).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
        assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn center_pixel_has_highest_alpha() {
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.4, 0.9, [0.9; 3], 0);
        let cloud = GaussianCloud::from_gaussians(0, vec![g]).unwrap();
        let out = render(&cloud, &cam8(), None, &RenderSettings::default()).unwrap();
        // principal point 4.5 is the center of pixel (4, 4)
        let center = out.contribution_log.pixel(4 * 8 + 4)[0].alpha;
        for p in 0..64 {
            if p != 36 {
                for c in out.contribution_log.pixel(p) {
                    assert!(c.alpha < center);
                }
            }
        }
    }

    #[test]
    fn zero_resolution_is_rejected() {
        let mut cam = cam8();
        cam.width = 0;
        assert!(render(&GaussianCloud::new(0), &cam, None, &RenderSettings::default()).is_err());
    }
}
