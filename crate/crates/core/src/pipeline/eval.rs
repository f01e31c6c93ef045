//! Evaluation runs without augmentation.

use std::path::{Path, PathBuf};

use super::config::PipelineConfig;
use super::model::Model;
use super::train::{prepare, Prepared};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::heads::{decode_boxes, query_point_classes, Box3D};
use crate::metrics::{confusion_miou, detection_metrics_frames, mean_defined, MetricReport, MiouResult};
use crate::numcore::{Rng, Tensor};
use crate::synth::{load_scene, visibility_mask, Scene, SCENE_FILE};

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Argmax occupancy labels in grid order.
    pub occ: Option<Vec<u16>>,
    /// Classes at the query points.
    pub point_classes: Option<Vec<u16>>,
    pub boxes: Vec<Box3D>,
    pub logits: Option<Tensor<f32>>,
    pub heat: Option<Tensor<f32>>,
}

/// `n` points drawn uniformly inside uniformly chosen occupied voxels.
pub fn query_points(scene: &Scene, n: usize, rng: &mut Rng) -> Vec<Vec3> {
    let g = &scene.spec.grid;
    let occupied: Vec<usize> = (0..g.num_cells()).filter(|&f| scene.occ.labels[f] != 0).collect();
    if occupied.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let cell = g.unflat(occupied[rng.below(occupied.len())]);
            [0, 1, 2].map(|a| g.origin[a] + (cell[a] as f64 + rng.uniform()) * g.voxel_size[a])
        })
        .collect()
}

fn argmax_labels(logits: &Tensor<f32>) -> Vec<u16> {
    let k = logits.dims()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

pub fn predict(model: &Model<f32>, cfg: &PipelineConfig, p: &Prepared, queries: &[Vec3]) -> Result<Prediction> {
    let fw = model.forward(&p.planes, &p.geo)?;
    let occ = fw.occ_logits.as_ref().map(argmax_labels);
    let point_classes = fw.occ_logits.as_ref().map(|l| query_point_classes(l, queries, &cfg.scene.grid)).transpose()?;
    let boxes = match (&fw.heat, &fw.reg) {
        (Some(h), Some(r)) => decode_boxes(h, r, &cfg.scene.grid, cfg.eval.score_thresh, cfg.eval.top_k)?,
        _ => Vec::new(),
    };
    Ok(Prediction { occ, point_classes, boxes, logits: fw.occ_logits, heat: fw.heat })
}

/// The ground truth posing as a prediction.
pub fn ground_truth_prediction(scene: &Scene, queries: &[Vec3]) -> Prediction {
    let g = &scene.spec.grid;
    Prediction {
        occ: Some(scene.occ.labels.clone()),
        point_classes: Some(queries.iter().map(|&q| g.cell_of(q).map_or(0, |c| scene.occ.labels[g.flat(c)])).collect()),
        boxes: scene.boxes.clone(),
        logits: None,
        heat: None,
    }
}

fn point_miou(scenes: &[&Scene], preds: &[Prediction], queries: &[Vec<Vec3>]) -> Result<Option<f64>> {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for ((s, pr), q) in scenes.iter().zip(preds).zip(queries) {
        let Some(pc) = &pr.point_classes else { return Ok(None) };
        let g = &s.spec.grid;
        for (&c, &pt) in pc.iter().zip(q) {
            let Some(cell) = g.cell_of(pt) else { continue };
            t.push(s.occ.labels[g.flat(cell)]);
            p.push(c);
        }
    }
    let k = scenes[0].occ.classes;
    let r = confusion_miou(&p, &t, None, k)?;
    // Query points sit in occupied voxels, so free space is not a class here.
    Ok(Some(mean_defined(&r.per_class[1..])))
}

pub fn score(cfg: &PipelineConfig, scenes: &[&Scene], preds: &[Prediction], queries: &[Vec<Vec3>]) -> Result<MetricReport> {
    if scenes.is_empty() || scenes.len() != preds.len() || scenes.len() != queries.len() {
        return Err(Error::Config("need one prediction and query set per scene".into()));
    }
    let k = cfg.scene.occ_classes();
    let have_occ = preds.iter().all(|p| p.occ.is_some());
    let (occ, visible) = if have_occ {
        let (mut p, mut t, mut vis) = (Vec::new(), Vec::new(), Vec::new());
        for (s, pr) in scenes.iter().zip(preds) {
            p.extend_from_slice(pr.occ.as_ref().expect("checked"));
            t.extend_from_slice(&s.occ.labels);
            vis.extend(visibility_mask(&s.occ, &s.spec.grid, &s.cams));
        }
        (confusion_miou(&p, &t, None, k)?, Some(confusion_miou(&p, &t, Some(&vis), k)?.miou))
    } else {
        (MiouResult { confusion: crate::metrics::ConfusionMatrix { classes: k, counts: vec![0; k * k] }, per_class: vec![None; k], miou: 0.0 }, None)
    };
    let frames: Vec<(&[Box3D], &[Box3D])> = scenes.iter().zip(preds).map(|(s, p)| (&p.boxes[..], &s.boxes[..])).collect();
    let classes: Vec<usize> = (0..cfg.det_classes()).collect();
    let det = detection_metrics_frames(&frames, &classes)?;
    let mut report = MetricReport::new(&occ, &det);
    report.miou_visible = visible;
    report.point_miou = point_miou(scenes, preds, queries)?;
    Ok(report)
}

fn query_sets(cfg: &PipelineConfig, scenes: &[&Scene]) -> Vec<Vec<Vec3>> {
    let root = Rng::new(cfg.seed).fork("query");
    scenes.iter().enumerate().map(|(i, s)| query_points(s, cfg.eval.query_points, &mut root.fork(&i.to_string()))).collect()
}

pub fn evaluate(model: &Model<f32>, cfg: &PipelineConfig, scenes: &[Scene]) -> Result<MetricReport> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let queries = query_sets(cfg, &refs);
    let mut preds = Vec::with_capacity(scenes.len());
    for (s, q) in scenes.iter().zip(&queries) {
        let p = prepare(cfg, s.clone())?;
        preds.push(predict(model, cfg, &p, q)?);
    }
    score(cfg, &refs, &preds, &queries)
}

/// Scores the ground truth against itself.
pub fn evaluate_ground_truth(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<MetricReport> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let queries = query_sets(cfg, &refs);
    let preds: Vec<Prediction> = scenes.iter().zip(&queries).map(|(s, q)| ground_truth_prediction(s, q)).collect();
    score(cfg, &refs, &preds, &queries)
}

/// A scene directory, or a directory whose subdirectories are scenes
/// (taken in name order).
pub fn load_scene_set(path: &Path) -> Result<Vec<Scene>> {
    if path.join(SCENE_FILE).exists() {
        return Ok(vec![load_scene(path)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SCENE_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no scenes under {}", path.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}
