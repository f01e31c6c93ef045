//! Loss evaluation, the optimization loop and the ndjson training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::PipelineConfig;
use super::model::{Forward, Model, OutputGrads, ViewGeometry};
use crate::augmentation::{masked_occupancy_loss, sample_aug, transform_boxes, AugSample};
use crate::error::{Error, Result};
use crate::heads::{encode_targets, DetTargets};
use crate::losses::{depth_loss, detection_loss, occupancy_loss, schedule_delta, total_loss, DetLossParts, OccLossParts};
use crate::numcore::optim::{clip_grad_norm, grad_norm, Optimizer};
use crate::numcore::{Module, Rng, Tensor};
use crate::synth::{generate_scene, image_planes, Scene};

pub const LOG_FILE: &str = "log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// A scene with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene: Scene,
    pub planes: Tensor<f32>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub targets: Option<DetTargets>,
    pub geo: ViewGeometry,
}

pub fn prepare(cfg: &PipelineConfig, scene: Scene) -> Result<Prepared> {
    if scene.spec.grid != cfg.scene.grid {
        return Err(Error::GridMismatch(format!("scene grid {:?} vs config {:?}", scene.spec.grid, cfg.scene.grid)));
    }
    let planes = image_planes(&scene.renders, cfg.scene.occ_classes(), cfg.model.bins.d_min)?;
    let depth = scene.renders.iter().flat_map(|r| r.depth.iter().copied()).collect();
    let valid = scene.renders.iter().flat_map(|r| r.valid.iter().copied()).collect();
    let targets = if cfg.flags.use_det_head { Some(encode_targets(&scene.boxes, &cfg.scene.grid, cfg.det_classes())?) } else { None };
    let geo = ViewGeometry::new(cfg, &scene.cams, None)?;
    Ok(Prepared { scene, planes, depth, valid, targets, geo })
}

/// Scenes the run trains on, from the `scene` stream of the seed.
pub fn training_scenes(cfg: &PipelineConfig) -> Result<Vec<Scene>> {
    let mut rng = Rng::new(cfg.seed).fork("scene");
    (0..cfg.train_scenes).map(|_| generate_scene(&mut rng, &cfg.scene)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// `L_img + δ·(L_det + L_occ)`.
    pub total: f64,
    pub img: f64,
    pub depth: f64,
    pub occ: Option<OccLossParts>,
    pub det: Option<DetLossParts>,
}

/// Losses of one forward pass and the matching output gradients.
pub fn losses(
    cfg: &PipelineConfig,
    p: &Prepared,
    fw: &Forward<f32>,
    aug: Option<&AugSample>,
    delta: f64,
) -> Result<(StepLosses, OutputGrads<f32>)> {
    let w = &cfg.loss;
    let (l_depth, mut g_probs) = depth_loss(&fw.probs, &p.depth, &p.valid, &cfg.model.bins)?;
    g_probs.scale(w.depth as f32);
    let l_img = w.depth * l_depth;
    let d = delta as f32;
    let (occ, g_occ) = match &fw.occ_logits {
        Some(logits) => {
            let (parts, mut g) = match &fw.mask {
                Some(m) => masked_occupancy_loss(&p.scene.occ.labels, logits, m, w)?,
                None => occupancy_loss(logits, &p.scene.occ.labels, None, w)?,
            };
            g.scale(d);
            (Some(parts), Some(g))
        }
        None => (None, None),
    };
    let (det, g_heat, g_reg) = match (&fw.heat, &fw.reg) {
        (Some(heat), Some(reg)) => {
            let aug_targets;
            let targets = match aug {
                Some(a) => {
                    aug_targets = encode_targets(&transform_boxes(&p.scene.boxes, a), &cfg.scene.grid, cfg.det_classes())?;
                    &aug_targets
                }
                None => p.targets.as_ref().expect("targets prepared when the head is on"),
            };
            let (parts, mut gh, mut gr) = detection_loss(heat, reg, targets, w)?;
            gh.scale(d);
            gr.scale(d);
            (Some(parts), Some(gh), Some(gr))
        }
        _ => (None, None, None),
    };
    let total = total_loss(l_img, det.map_or(0.0, |x| x.total), occ.map_or(0.0, |x| x.total), delta)?;
    Ok((
        StepLosses { total, img: l_img, depth: l_depth, occ, det },
        OutputGrads { probs: g_probs, occ_logits: g_occ, heat: g_heat, reg: g_reg },
    ))
}

/// Forward and losses only.
pub fn evaluate_losses(model: &Model<f32>, cfg: &PipelineConfig, p: &Prepared, aug: Option<&AugSample>, delta: f64) -> Result<StepLosses> {
    let geo = match aug {
        Some(a) => ViewGeometry::new(cfg, &p.scene.cams, Some(a))?,
        None => p.geo.clone(),
    };
    let fw = model.forward(&p.planes, &geo)?;
    Ok(losses(cfg, p, &fw, aug, delta)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header { config_hash: String, seed: u64, steps: usize, params: usize },
    Step {
        step: usize,
        epoch: f64,
        delta: f64,
        scene: usize,
        losses: StepLosses,
        /// Gradient norm before clipping.
        grad_norm: f64,
        aug: Option<AugSample>,
    },
    NonFinite { step: usize, message: String },
}

pub struct TrainRun {
    pub config: PipelineConfig,
    pub model: Model<f32>,
    pub log: Vec<LogRecord>,
    pub scenes: Vec<Prepared>,
}

impl TrainRun {
    pub fn step_losses(&self) -> impl Iterator<Item = &StepLosses> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Step { losses, .. } => Some(losses),
            _ => None,
        })
    }
}

struct LogSink {
    file: Option<fs::File>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(LOG_FILE, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Trains from scratch. With `out`, writes the log and a final checkpoint
/// there.
pub fn train(cfg: &PipelineConfig, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let scenes: Vec<Prepared> = training_scenes(cfg)?.into_iter().map(|s| prepare(cfg, s)).collect::<Result<_>>()?;
    let root = Rng::new(cfg.seed);
    let mut model = Model::<f32>::new(cfg, &mut root.fork("model"))?;
    let mut aug_rng = root.fork("aug");
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some(fs::File::create(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };
    let mut log = LogSink { file, records: Vec::new() };
    log.push(LogRecord::Header { config_hash: cfg.hash(), seed: cfg.seed, steps: cfg.steps, params: model.param_count() })?;
    let center = cfg.scene.grid.center();
    for step in 0..cfg.steps {
        let si = step % scenes.len();
        let p = &scenes[si];
        let epoch = step as f64 / cfg.steps_per_epoch as f64;
        let delta = if cfg.flags.use_schedule { schedule_delta(epoch, &cfg.schedule) } else { 1.0 };
        let aug = cfg.flags.use_aug.then(|| sample_aug(&mut aug_rng, &cfg.aug, center));
        let geo = match &aug {
            Some(a) => ViewGeometry::new(cfg, &p.scene.cams, Some(a))?,
            None => p.geo.clone(),
        };
        model.zero_grad();
        let fw = model.forward(&p.planes, &geo)?;
        let (l, grads) = match losses(cfg, p, &fw, aug.as_ref(), delta) {
            Ok(x) => x,
            Err(Error::NonFinite(m)) => {
                let message = format!("step {step}: {m}");
                log.push(LogRecord::NonFinite { step, message: message.clone() })?;
                return Err(Error::NonFinite(message));
            }
            Err(e) => return Err(e),
        };
        model.backward(&p.planes, &geo, &fw, &grads)?;
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut model, c),
            None => grad_norm(&mut model),
        };
        log.push(LogRecord::Step { step, epoch, delta, scene: si, losses: l, grad_norm, aug })?;
        if !grad_norm.is_finite() {
            let message = format!("step {step}: gradient norm is {grad_norm}");
            log.push(LogRecord::NonFinite { step, message: message.clone() })?;
            return Err(Error::NonFinite(message));
        }
        opt.step(&mut model);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("step {step}/{}: loss {:.4} (img {:.4}) delta {delta:.3} grad {grad_norm:.3}", cfg.steps, l.total, l.img);
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join(CHECKPOINT_DIR), &mut model, cfg, cfg.steps)?;
    }
    Ok(TrainRun { config: cfg.clone(), model, log: log.records, scenes })
}
