//! Depth-weighted voxel pooling.

use super::DepthDistribution;
use crate::error::{Error, Result};
use crate::geometry::{back_project_pixel, CameraModel, Transform3D, VoxelGridSpec};
use crate::numcore::{Real, Tensor};

const NONE: u32 = u32::MAX;

/// Voxel receiving each `(camera, v, u, bin)` sample, precomputed from the
/// rig, grid and bins. Out-of-grid samples are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftPlan {
    pub n_cam: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub grid_dims: [usize; 3],
    target: Vec<u32>,
}

impl LiftPlan {
    pub fn new(cams: &[CameraModel], grid: &VoxelGridSpec, bins: &super::DepthBins) -> Result<Self> {
        Self::with_transform(cams, grid, bins, &Transform3D::IDENTITY)
    }

    /// Plan for a grid living in a transformed frame: back-projected points
    /// `p` land in the cell containing `frame · p`.
    pub fn with_transform(
        cams: &[CameraModel],
        grid: &VoxelGridSpec,
        bins: &super::DepthBins,
        frame: &Transform3D,
    ) -> Result<Self> {
        let first = cams
            .first()
            .ok_or_else(|| Error::Config("lifting needs at least one camera".into()))?;
        let (w, h) = first.image_size;
        if cams.iter().any(|c| c.image_size != (w, h)) {
            return Err(Error::Config("all cameras must share one image size".into()));
        }
        let centers = bins.centers();
        let mut target = Vec::with_capacity(cams.len() * h * w * centers.len());
        for cam in cams {
            for v in 0..h {
                for u in 0..w {
                    for &d in &centers {
                        let p = frame.apply_point(back_project_pixel(u as f64, v as f64, d, cam)?);
                        target.push(grid.cell_of(p).map_or(NONE, |c| grid.flat(c) as u32));
                    }
                }
            }
        }
        Ok(LiftPlan {
            n_cam: cams.len(),
            height: h,
            width: w,
            bins: centers.len(),
            grid_dims: grid.dims,
            target,
        })
    }

    /// Destination voxel of one sample.
    pub fn target(&self, cam: usize, v: usize, u: usize, d: usize) -> Option<usize> {
        let t = self.target[((cam * self.height + v) * self.width + u) * self.bins + d];
        (t != NONE).then_some(t as usize)
    }

    fn check<S: Real>(&self, probs: &Tensor<S>, feats: &Tensor<S>) -> Result<usize> {
        let want_p = [self.n_cam, self.bins, self.height, self.width];
        let [n, c, h, w] = *feats.dims() else {
            return Err(Error::shape("lift_explicit", format!("feats {:?}", feats.dims())));
        };
        if probs.dims() != want_p || [n, h, w] != [self.n_cam, self.height, self.width] {
            return Err(Error::shape(
                "lift_explicit",
                format!("probs {:?}, feats {:?}, plan {want_p:?}", probs.dims(), feats.dims()),
            ));
        }
        Ok(c)
    }

    /// Scatter-adds `probs[d]·feats` in `(camera, v, u, d)` order into a
    /// `C×X×Y×Z` volume. Accumulation happens in f64.
    pub fn forward<S: Real>(&self, probs: &Tensor<S>, feats: &Tensor<S>) -> Result<Tensor<S>> {
        let c = self.check(probs, feats)?;
        let nvox: usize = self.grid_dims.iter().product();
        let (h, w, nb) = (self.height, self.width, self.bins);
        let plane = h * w;
        let mut acc = vec![0.0f64; c * nvox];
        let pd = probs.data();
        let fd = feats.data();
        for cam in 0..self.n_cam {
            for v in 0..h {
                for u in 0..w {
                    let px = v * w + u;
                    for d in 0..nb {
                        let Some(t) = self.target(cam, v, u, d) else {
                            continue;
                        };
                        let p = pd[(cam * nb + d) * plane + px].f64();
                        for ch in 0..c {
                            acc[ch * nvox + t] += p * fd[(cam * c + ch) * plane + px].f64();
                        }
                    }
                }
            }
        }
        let [x, y, z] = self.grid_dims;
        Tensor::from_vec(&[c, x, y, z], acc.into_iter().map(S::of).collect())
    }

    /// Returns `(g_probs, g_feats)`.
    pub fn backward<S: Real>(
        &self,
        probs: &Tensor<S>,
        feats: &Tensor<S>,
        g_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let c = self.check(probs, feats)?;
        let nvox: usize = self.grid_dims.iter().product();
        if g_out.numel() != c * nvox {
            return Err(Error::shape("lift_explicit_backward", format!("grad {:?}", g_out.dims())));
        }
        let (h, w, nb) = (self.height, self.width, self.bins);
        let plane = h * w;
        let mut gp = probs.zeros_like();
        let mut gf = feats.zeros_like();
        let (pd, fd, gd) = (probs.data(), feats.data(), g_out.data());
        for cam in 0..self.n_cam {
            for v in 0..h {
                for u in 0..w {
                    let px = v * w + u;
                    for d in 0..nb {
                        let Some(t) = self.target(cam, v, u, d) else {
                            continue;
                        };
                        let pi = (cam * nb + d) * plane + px;
                        let p = pd[pi];
                        let mut acc = S::zero();
                        for ch in 0..c {
                            let fi = (cam * c + ch) * plane + px;
                            let g = gd[ch * nvox + t];
                            acc += fd[fi] * g;
                            gf.data_mut()[fi] += p * g;
                        }
                        gp.data_mut()[pi] = acc;
                    }
                }
            }
        }
        Ok((gp, gf))
    }
}

/// One-shot explicit lifting of `feats: N_cam×C×H×W` with `depth` into `grid`.
pub fn lift_explicit<S: Real>(
    depth: &DepthDistribution<S>,
    feats: &Tensor<S>,
    grid: &VoxelGridSpec,
    cams: &[CameraModel],
) -> Result<Tensor<S>> {
    LiftPlan::new(cams, grid, &depth.bins)?.forward(&depth.probs, feats)
}

pub fn lift_explicit_backward<S: Real>(
    depth: &DepthDistribution<S>,
    feats: &Tensor<S>,
    grid: &VoxelGridSpec,
    cams: &[CameraModel],
    g_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    LiftPlan::new(cams, grid, &depth.bins)?.backward(&depth.probs, feats, g_out)
}
