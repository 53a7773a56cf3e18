//! CPU differentiable 3D Gaussian splatting with random Gaussian dropping.
//!
//! The crate renders anisotropic Gaussians by front-to-back compositing,
//! differentiates the render analytically, and trains clouds with Adam,
//! adaptive densification and an optional drop regularizer that removes a
//! random fraction of Gaussians each iteration while rescaling the opacity
//! of the survivors.

pub mod autograd;
pub mod cloud;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod optim;
pub mod regularizer;
pub mod render;
pub mod rng;
pub mod sh;
pub mod trainer;

pub use autograd::{backward, finite_diff_check, gradient_distance_histogram, GradientSet, LossSpec};
pub use cloud::GaussianCloud;
pub use error::{Error, ParamClass, Result};
pub use geometry::{covariance_3d, eval_gaussian, project_gaussian, quat_to_rotation, Camera, Gaussian, Splat2D};
pub use image::Image;
pub use losses::{color_loss, psnr, ssim, LossValue};
pub use regularizer::{DropMode, DropPlan, DropSchedule, SelectCriterion};
pub use render::{render, RenderOutput, RenderSettings};
pub use sh::eval_sh;
