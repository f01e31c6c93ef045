//! Single-document run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::losses::{LossWeights, ScheduleSpec};
use crate::numcore::optim::OptimizerSpec;
use crate::synth::SceneSpec;
use crate::view_transform::DepthBins;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_implicit: bool,
    pub use_local_branch: bool,
    pub use_global_branch: bool,
    pub use_interaction: bool,
    pub use_occ_head: bool,
    pub use_det_head: bool,
    pub use_aug: bool,
    pub use_schedule: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_implicit: true,
            use_local_branch: true,
            use_global_branch: true,
            use_interaction: true,
            use_occ_head: true,
            use_det_head: true,
            use_aug: true,
            use_schedule: true,
        }
    }
}

/// Channel plan and architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub c_hidden: usize,
    /// Image feature channels, also the explicit voxel channels.
    pub c_img: usize,
    /// Implicit query channels.
    pub c_implicit: usize,
    pub dca_blocks: usize,
    pub dca_heads: usize,
    pub dca_points: usize,
    pub occ_hidden: usize,
    pub bins: DepthBins,
    pub local_scales: usize,
    pub global_scales: usize,
    pub deformable_global: bool,
    pub window_voxel: [usize; 3],
    pub window_bev: [usize; 2],
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            c_hidden: 8,
            c_img: 8,
            c_implicit: 8,
            dca_blocks: 1,
            dca_heads: 2,
            dca_points: 2,
            occ_hidden: 16,
            bins: DepthBins { d_min: 0.5, d_max: 20.0, count: 16 },
            local_scales: 2,
            global_scales: 2,
            deformable_global: false,
            window_voxel: [3, 3, 3],
            window_bev: [3, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub score_thresh: f64,
    pub top_k: usize,
    /// Query points sampled inside occupied voxels for point mIoU.
    pub query_points: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { score_thresh: 0.3, top_k: 50, query_points: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    /// Number of synthetic training scenes, cycled in order.
    pub train_scenes: usize,
    pub model: ModelSpec,
    pub flags: AblationFlags,
    pub loss: LossWeights,
    pub schedule: ScheduleSpec,
    /// Steps that make up one schedule epoch.
    pub steps_per_epoch: usize,
    pub aug: AugSpec,
    pub optimizer: OptimizerSpec,
    /// Global gradient-norm cap applied before each update.
    pub grad_clip: Option<f64>,
    pub steps: usize,
    pub eval: EvalSpec,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: SceneSpec::default(),
            train_scenes: 1,
            model: ModelSpec::default(),
            flags: AblationFlags::default(),
            loss: LossWeights::default(),
            schedule: ScheduleSpec { v_min: 0.1, v_max: 1.0, ramp_epochs: 4.0 },
            steps_per_epoch: 50,
            aug: AugSpec::default(),
            optimizer: OptimizerSpec::default(),
            grad_clip: Some(5.0),
            steps: 500,
            eval: EvalSpec::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.aug.validate()?;
        self.model.bins.validate()?;
        let f = &self.flags;
        if !(f.use_occ_head || f.use_det_head) {
            return Err(Error::Config("at least one head must be enabled".into()));
        }
        if f.use_interaction && !(f.use_local_branch && f.use_global_branch) {
            return Err(Error::Config("interaction requires both branches".into()));
        }
        let m = &self.model;
        if [m.c_hidden, m.c_img, m.occ_hidden].contains(&0) || (f.use_implicit && m.c_implicit == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if f.use_implicit && (m.dca_blocks == 0 || m.dca_heads == 0 || m.dca_points == 0 || !m.c_implicit.is_multiple_of(m.dca_heads)) {
            return Err(Error::Config("implicit path needs blocks, heads dividing the channels, and points".into()));
        }
        if self.train_scenes == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("train_scenes and steps_per_epoch must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        match self.optimizer {
            OptimizerSpec::Sgd { lr, momentum } if lr > 0.0 && (0.0..1.0).contains(&momentum) => {}
            OptimizerSpec::Adam { lr, beta1, beta2, eps } if lr > 0.0 && beta1 < 1.0 && beta2 < 1.0 && eps > 0.0 => {}
            ref o => return Err(Error::Config(format!("bad optimizer {o:?}"))),
        }
        Ok(())
    }

    /// Voxel channels after explicit/implicit concatenation.
    pub fn voxel_channels(&self) -> usize {
        self.model.c_img + if self.flags.use_implicit { self.model.c_implicit } else { 0 }
    }

    pub fn det_classes(&self) -> usize {
        self.scene.foreground_classes
    }

    pub fn fusion_spec(&self) -> FusionSpec {
        FusionSpec {
            use_local_branch: self.flags.use_local_branch,
            use_global_branch: self.flags.use_global_branch,
            use_interaction: self.flags.use_interaction,
            local_scales: self.model.local_scales,
            global_scales: self.model.global_scales,
            deformable_global: self.model.deformable_global,
            window_voxel: self.model.window_voxel,
            window_bev: self.model.window_bev,
        }
    }

    /// Hex SHA-256 of the canonical (compact, declaration-ordered) JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Small setting used by the tests and the overfit check.
    pub fn tiny() -> Self {
        let mut c = PipelineConfig::default();
        c.scene.objects = [3, 3];
        c.flags.use_aug = false;
        c.flags.use_schedule = false;
        c.steps = 300;
        c
    }
}
