//! The full forward graph and its reverse pass.

use crate::augmentation::{resample_features, resample_features_backward, warp_label_indices, AugSample, Interp, OccMask};
use crate::error::Result;
use crate::fusion::{FusionCache, LocalGlobalFusion};
use crate::geometry::{CameraModel, Transform3D, VoxelGridSpec};
use crate::heads::{DetHead, OccHead};
use crate::numcore::{Module, Param, Real, Rng, Tensor};
use crate::synth::{input_channels, EncoderCache, ImageEncoder};
use crate::view_transform::{fuse_ex_im, fuse_ex_im_backward, ImplicitStack, ImplicitStackCache, LiftPlan, RefPoints};

use super::config::PipelineConfig;

#[derive(Clone, Debug)]
pub struct Model<S: Real> {
    pub encoder: ImageEncoder<S>,
    pub implicit: Option<ImplicitStack<S>>,
    pub fusion: LocalGlobalFusion<S>,
    pub occ: Option<OccHead<S>>,
    pub det: Option<DetHead<S>>,
}

impl<S: Real> Model<S> {
    pub fn new(cfg: &PipelineConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let f = &cfg.flags;
        let dims = cfg.scene.grid.dims;
        let c = cfg.voxel_channels();
        let encoder = ImageEncoder::new(input_channels(cfg.scene.occ_classes()), m.c_hidden, m.c_img, m.bins.count, &mut rng.fork("encoder"));
        let implicit = if f.use_implicit {
            Some(ImplicitStack::new(m.c_implicit, m.c_img, dims, m.dca_blocks, m.dca_heads, m.dca_points, &mut rng.fork("implicit"))?)
        } else {
            None
        };
        let fusion = LocalGlobalFusion::new(c, dims[2], &cfg.fusion_spec(), &mut rng.fork("fusion"))?;
        let occ = f.use_occ_head.then(|| OccHead::new(c, m.occ_hidden, cfg.scene.occ_classes(), &mut rng.fork("occ")));
        let det = f.use_det_head.then(|| DetHead::new(c, cfg.det_classes(), &mut rng.fork("det")));
        Ok(Model { encoder, implicit, fusion, occ, det })
    }
}

impl<S: Real> Module<S> for Model<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.encoder.visit_params(f);
        self.implicit.visit_params(f);
        self.fusion.visit_params(f);
        self.occ.visit_params(f);
        self.det.visit_params(f);
    }
}

/// Camera-to-grid geometry for one forward pass. With an augmentation the
/// grid lives in the augmented frame.
#[derive(Clone, Debug)]
pub struct ViewGeometry {
    pub plan: LiftPlan,
    pub refs: Option<RefPoints>,
    /// Continuous indices into the augmented volume, for pulling features back.
    pub warp: Option<Tensor<f64>>,
}

impl ViewGeometry {
    pub fn new(cfg: &PipelineConfig, cams: &[CameraModel], aug: Option<&AugSample>) -> Result<Self> {
        let grid: &VoxelGridSpec = &cfg.scene.grid;
        let (m, m_inv) = match aug {
            Some(a) => (a.m_aug, a.m_inv),
            None => (Transform3D::IDENTITY, Transform3D::IDENTITY),
        };
        let plan = LiftPlan::with_transform(cams, grid, &cfg.model.bins, &m)?;
        let refs = cfg.flags.use_implicit.then(|| RefPoints::with_transform(cams, grid, &m_inv));
        let warp = aug.map(|a| warp_label_indices(grid, a));
        Ok(ViewGeometry { plan, refs, warp })
    }
}

#[derive(Clone, Debug)]
pub struct Forward<S: Real> {
    pub feats: Tensor<S>,
    pub probs: Tensor<S>,
    enc: EncoderCache<S>,
    implicit: Option<ImplicitStackCache<S>>,
    fusion: FusionCache<S>,
    pub v_fusion: Tensor<S>,
    pub bev_fusion: Tensor<S>,
    /// Voxel features on the original lattice (after pull-back, if any).
    pub v_occ: Tensor<S>,
    pub mask: Option<OccMask>,
    occ_hidden: Option<Tensor<S>>,
    /// `K_occ × X×Y×Z` on the original lattice.
    pub occ_logits: Option<Tensor<S>>,
    /// Sigmoid heatmap and regression, in the (possibly augmented) BEV frame.
    pub heat: Option<Tensor<S>>,
    pub reg: Option<Tensor<S>>,
}

/// Upstream gradients of the outputs of [`Model::forward`].
pub struct OutputGrads<S> {
    pub probs: Tensor<S>,
    pub occ_logits: Option<Tensor<S>>,
    pub heat: Option<Tensor<S>>,
    pub reg: Option<Tensor<S>>,
}

impl<S: Real> Model<S> {
    /// `planes: N×C_in×H×W` encoder input.
    pub fn forward(&self, planes: &Tensor<S>, geo: &ViewGeometry) -> Result<Forward<S>> {
        let (feats, probs, enc) = self.encoder.forward(planes)?;
        let v_ex = geo.plan.forward(&probs, &feats)?;
        let (v, implicit) = match (&self.implicit, &geo.refs) {
            (Some(stack), Some(refs)) => {
                let (v_im, cache) = stack.forward(&feats, refs)?;
                (fuse_ex_im(&v_ex, &v_im)?, Some(cache))
            }
            _ => (v_ex, None),
        };
        let (v_fusion, bev_fusion, fusion) = self.fusion.forward(&v)?;
        let (v_occ, mask) = match &geo.warp {
            Some(w) => {
                let (f, m) = resample_features(&v_fusion, w, Interp::Trilinear)?;
                (f, Some(m))
            }
            None => (v_fusion.clone(), None),
        };
        let (occ_logits, occ_hidden) = match &self.occ {
            Some(h) => {
                let (l, hid) = h.forward(&v_occ)?;
                (Some(l), Some(hid))
            }
            None => (None, None),
        };
        let (heat, reg) = match &self.det {
            Some(d) => {
                let (h, r) = d.forward(&bev_fusion)?;
                (Some(h), Some(r))
            }
            None => (None, None),
        };
        Ok(Forward { feats, probs, enc, implicit, fusion, v_fusion, bev_fusion, v_occ, mask, occ_hidden, occ_logits, heat, reg })
    }

    /// Accumulates parameter gradients for one forward pass.
    pub fn backward(&mut self, planes: &Tensor<S>, geo: &ViewGeometry, fw: &Forward<S>, g: &OutputGrads<S>) -> Result<()> {
        let mut g_vf = fw.v_fusion.zeros_like();
        if let (Some(head), Some(gl), Some(hid)) = (&mut self.occ, &g.occ_logits, &fw.occ_hidden) {
            let g_occ = head.backward(&fw.v_occ, hid, gl);
            g_vf = match &geo.warp {
                Some(w) => resample_features_backward(fw.v_fusion.dims(), w, Interp::Trilinear, &g_occ)?,
                None => g_occ,
            };
        }
        let mut g_bf = fw.bev_fusion.zeros_like();
        if let (Some(head), Some(gh), Some(gr), Some(heat)) = (&mut self.det, &g.heat, &g.reg, &fw.heat) {
            g_bf = head.backward(&fw.bev_fusion, heat, gh, gr)?;
        }
        let g_v = self.fusion.backward(&fw.fusion, &g_vf, &g_bf)?;
        let mut g_probs = g.probs.clone();
        let (g_ex, mut g_feats) = match (&mut self.implicit, &fw.implicit, &geo.refs) {
            (Some(stack), Some(cache), Some(refs)) => {
                let c_ex = fw.feats.dims()[1];
                let (g_ex, g_im) = fuse_ex_im_backward(&g_v, c_ex);
                (g_ex, stack.backward(cache, &fw.feats, refs, &g_im)?)
            }
            _ => (g_v, fw.feats.zeros_like()),
        };
        let (gp, gf) = geo.plan.backward(&fw.probs, &fw.feats, &g_ex)?;
        g_probs.add_assign(&gp);
        g_feats.add_assign(&gf);
        self.encoder.backward(&fw.enc, planes, &g_feats, &g_probs)?;
        Ok(())
    }
}
