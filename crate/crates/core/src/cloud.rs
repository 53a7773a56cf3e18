use crate::error::{invalid, Result};
use crate::geometry::Gaussian;
use crate::sh;

/// The learnable scene: a list of Gaussians sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree,
        }
    }

    pub fn from_gaussians(sh_degree: usize, gaussians: Vec<Gaussian>) -> Result<Self> {
        let cloud = Self {
            gaussians,
            sh_degree,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn num_basis(&self) -> usize {
        sh::num_basis(self.sh_degree)
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(invalid(format!("SH degree {} exceeds {}", self.sh_degree, sh::MAX_DEGREE)));
        }
        let basis = self.num_basis();
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh_coeffs.len() != basis {
                return Err(invalid(format!(
                    "gaussian {i} has {} SH coefficients, expected {basis}",
                    g.sh_coeffs.len()
                )));
            }
            let qn: f64 = g.rotation.iter().map(|v| v * v).sum();
            if !(qn > 0.0) || !qn.is_finite() {
                return Err(invalid(format!("gaussian {i} has a degenerate quaternion")));
            }
            let finite = g.center.iter().chain(g.log_scale.iter()).all(|v| v.is_finite())
                && g.opacity_logit.is_finite()
                && g.sh_coeffs.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(invalid(format!("gaussian {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Copy of the cloud restricted to the indices where `keep` is true.
    pub fn subset(&self, keep: &[bool]) -> Self {
        Self {
            gaussians: self
                .gaussians
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(g, _)| g.clone())
                .collect(),
            sh_degree: self.sh_degree,
        }
    }
}
