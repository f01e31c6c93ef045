//! Image-to-voxel view transform: depth-weighted explicit lifting,
//! query-driven implicit sampling, and their channel concatenation.

mod dca;
mod implicit;
mod lift;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub use dca::{deformable_cross_attention, DcaCache, DeformableCrossAttention, RefPoints};
pub use implicit::{ImplicitBlock, ImplicitStack, ImplicitStackCache};
pub use lift::{lift_explicit, lift_explicit_backward, LiftPlan};

/// Uniform depth discretization evaluated at bin centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.count >= 1) {
            return Err(Error::Config(format!("bad depth bins {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn center(&self, d: usize) -> f64 {
        self.d_min + (d as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|d| self.center(d)).collect()
    }

    /// Bin containing `depth`, if within `[d_min, d_max)`.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        Some((((depth - self.d_min) / self.width()) as usize).min(self.count - 1))
    }
}

/// Per-pixel categorical depth: `probs` is `N_cam×D×H×W`, normalized over `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution<S: Real = f32> {
    pub probs: Tensor<S>,
    pub bins: DepthBins,
}

impl<S: Real> DepthDistribution<S> {
    pub fn new(probs: Tensor<S>, bins: DepthBins) -> Result<Self> {
        match *probs.dims() {
            [_, d, _, _] if d == bins.count => Ok(DepthDistribution { probs, bins }),
            _ => Err(Error::shape(
                "DepthDistribution",
                format!("probs {:?} with {} bins", probs.dims(), bins.count),
            )),
        }
    }
}

/// Concatenates explicit and implicit voxel features along channels, explicit first.
pub fn fuse_ex_im<S: Real>(ex: &Tensor<S>, im: &Tensor<S>) -> Result<Tensor<S>> {
    if ex.dims()[1..] != im.dims()[1..] {
        return Err(Error::shape(
            "fuse_ex_im",
            format!("{:?} vs {:?}", ex.dims(), im.dims()),
        ));
    }
    Tensor::concat0(&[ex, im])
}

/// Splits the fused gradient back into `(explicit, implicit)` parts.
pub fn fuse_ex_im_backward<S: Real>(g: &Tensor<S>, ex_channels: usize) -> (Tensor<S>, Tensor<S>) {
    (g.narrow0(0, ex_channels), g.narrow0(ex_channels, g.dims()[0]))
}
