//! Occupancy mIoU, nuScenes-style detection AP and TP errors, and NDS.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{wrap_angle, Box3D};

/// BEV center-distance matching thresholds in meters.
pub const MATCH_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches define the TP errors.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
/// Recall samples on `[0, 1]`.
pub const RECALL_POINTS: usize = 101;
/// TP error reported for a class with no true positives.
pub const WORST_TP_ERROR: f64 = 1.0;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `None` for classes absent from both ground truth and predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.at(c, c);
                let fn_: u64 = (0..k).map(|p| self.at(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.at(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean over the defined entries, 0 if there are none.
pub fn mean_defined(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn confusion_miou(pred: &[u16], gt: &[u16], mask: Option<&[bool]>, classes: usize) -> Result<MiouResult> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::shape(
            "confusion_miou",
            format!("pred {} gt {} mask {:?}", pred.len(), gt.len(), mask.map(<[bool]>::len)),
        ));
    }
    let mut counts = vec![0u64; classes * classes];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for l in [p, g] {
            if l as usize >= classes {
                return Err(Error::UnknownClass(l as usize));
            }
        }
        counts[g as usize * classes + p as usize] += 1;
    }
    let confusion = ConfusionMatrix { classes, counts };
    let per_class = confusion.iou();
    let miou = mean_defined(&per_class);
    Ok(MiouResult { confusion, per_class, miou })
}

/// `(5·mAP + Σ (1 - min(1, mTP))) / 10`.
pub fn nds_score(map: f64, mate: f64, mase: f64, maoe: f64, mave: f64, maae: f64) -> f64 {
    let tp: f64 = [mate, mase, maoe, mave, maae].iter().map(|&e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// IoU of two boxes after aligning centers and headings.
fn aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    inter / (va + vb - inter)
}

fn yaw_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs().min(PI)
}

/// Per-match errors `[ATE, ASE, AOE, AVE, AAE]`.
fn match_errors(pred: &Box3D, gt: &Box3D) -> [f64; 5] {
    let dv = (pred.velocity[0] - gt.velocity[0]).hypot(pred.velocity[1] - gt.velocity[1]);
    [bev_distance(pred, gt), 1.0 - aligned_iou(pred, gt), yaw_error(pred.yaw, gt.yaw), dv, 0.0]
}

/// Greedy matching in score-descending order, each prediction taking the
/// nearest unmatched ground truth of its own frame within `thresh`.
/// Returns per prediction (in the given order) the matched ground truth.
fn greedy_match(preds: &[(usize, &Box3D)], gts: &[(usize, &Box3D)], thresh: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|&(frame, p)| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, (f, _))| *f == frame && !used[*j])
                .map(|(j, (_, g))| (j, bev_distance(p, g)))
                .filter(|&(_, d)| d < thresh)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            best.map(|(j, _)| {
                used[j] = true;
                j
            })
        })
        .collect()
}

/// Linear interpolation through `(xs, ys)` with `xs` strictly increasing;
/// left of the first knot holds `ys[0]`, right of the last knot is 0.
fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    if xs.is_empty() || x > xs[xs.len() - 1] {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    let j = xs.partition_point(|&v| v < x);
    let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// AP from the TP flags of score-sorted predictions. The PR curve is
/// sampled at its true-positive knots, interpolated onto 101 recall points,
/// and the area above both minimums is normalized to `[0, 1]`.
pub fn average_precision(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut rec, mut prec) = (Vec::new(), Vec::new());
    for &t in is_tp {
        if t {
            tp += 1;
            rec.push(tp as f64 / n_gt as f64);
            prec.push(tp as f64 / (tp + fp) as f64);
        } else {
            fp += 1;
        }
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let samples: Vec<f64> = (first..RECALL_POINTS)
        .map(|i| (interp(i as f64 / (RECALL_POINTS - 1) as f64, &rec, &prec) - MIN_PRECISION).max(0.0))
        .collect();
    // Rounding can push a perfect curve a few ulps above 1.
    (samples.iter().sum::<f64>() / samples.len() as f64 / (1.0 - MIN_PRECISION)).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class_id: usize,
    /// AP per entry of [`MATCH_THRESHOLDS`].
    pub ap_per_threshold: [f64; 4],
    pub ap: f64,
    /// `[ATE, ASE, AOE, AVE, AAE]` averaged over matches at [`TP_THRESHOLD`].
    pub tp_errors: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub per_class: Vec<ClassDetection>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl DetectionMetrics {
    pub fn nds(&self) -> f64 {
        nds_score(self.map, self.mate, self.mase, self.maoe, self.mave, self.maae)
    }
}

/// Evaluates the listed classes on one frame. Classes with neither ground
/// truth nor predictions are dropped from the means.
pub fn detection_ap_and_tp_errors(preds: &[Box3D], gts: &[Box3D], classes: &[usize]) -> Result<DetectionMetrics> {
    detection_metrics_frames(&[(preds, gts)], classes)
}

fn of_class<'a>(frames: impl Iterator<Item = &'a [Box3D]>, c: usize) -> Vec<(usize, &'a Box3D)> {
    frames
        .enumerate()
        .flat_map(|(f, bs)| bs.iter().filter(move |b| b.class_id == c).map(move |b| (f, b)))
        .collect()
}

/// Multi-frame evaluation: predictions are ranked jointly across frames but
/// only match ground truth of their own frame.
pub fn detection_metrics_frames(frames: &[(&[Box3D], &[Box3D])], classes: &[usize]) -> Result<DetectionMetrics> {
    for b in frames.iter().flat_map(|(p, g)| p.iter().chain(g.iter())) {
        if !classes.contains(&b.class_id) {
            return Err(Error::UnknownClass(b.class_id));
        }
    }
    let mut per_class = Vec::new();
    for &c in classes {
        let mut p = of_class(frames.iter().map(|fr| fr.0), c);
        let g = of_class(frames.iter().map(|fr| fr.1), c);
        if p.is_empty() && g.is_empty() {
            continue;
        }
        p.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut ap_per_threshold = [0.0; 4];
        let mut tp_errors = [WORST_TP_ERROR; 5];
        for (t, &thresh) in MATCH_THRESHOLDS.iter().enumerate() {
            let m = greedy_match(&p, &g, thresh);
            let flags: Vec<bool> = m.iter().map(Option::is_some).collect();
            ap_per_threshold[t] = average_precision(&flags, g.len());
            if thresh == TP_THRESHOLD {
                let errs: Vec<[f64; 5]> = m
                    .iter()
                    .zip(&p)
                    .filter_map(|(j, pb)| j.map(|j| match_errors(pb.1, g[j].1)))
                    .collect();
                if !errs.is_empty() {
                    for k in 0..5 {
                        tp_errors[k] = errs.iter().map(|e| e[k]).sum::<f64>() / errs.len() as f64;
                    }
                }
            }
        }
        let ap = ap_per_threshold.iter().sum::<f64>() / 4.0;
        per_class.push(ClassDetection { class_id: c, ap_per_threshold, ap, tp_errors });
    }
    let mean = |f: &dyn Fn(&ClassDetection) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let worst = |k: usize| if per_class.is_empty() { WORST_TP_ERROR } else { mean(&|c| c.tp_errors[k]) };
    Ok(DetectionMetrics {
        map: mean(&|c| c.ap),
        mate: worst(0),
        mase: worst(1),
        maoe: worst(2),
        mave: worst(3),
        maae: worst(4),
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_ap: Vec<(usize, f64)>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
    /// Voxel mIoU restricted to camera-visible voxels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou_visible: Option<f64>,
    /// mIoU of classes queried at points inside occupied voxels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_miou: Option<f64>,
}

impl MetricReport {
    pub fn new(occ: &MiouResult, det: &DetectionMetrics) -> Self {
        MetricReport {
            per_class_iou: occ.per_class.clone(),
            miou: occ.miou,
            per_class_ap: det.per_class.iter().map(|c| (c.class_id, c.ap)).collect(),
            map: det.map,
            mate: det.mate,
            mase: det.mase,
            maoe: det.maoe,
            mave: det.mave,
            maae: det.maae,
            nds: det.nds(),
            miou_visible: None,
            point_miou: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}", "metric", "value");
        for (name, v) in [
            ("mIoU", self.miou),
            ("mIoU(vis)", self.miou_visible.unwrap_or(f64::NAN)),
            ("mIoU(pts)", self.point_miou.unwrap_or(f64::NAN)),
            ("mAP", self.map),
            ("NDS", self.nds),
            ("mATE", self.mate),
            ("mASE", self.mase),
            ("mAOE", self.maoe),
            ("mAVE", self.mave),
            ("mAAE", self.maae),
        ] {
            let _ = writeln!(s, "{name:<12}{v:>10.4}");
        }
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "{:<12}{v:>10.4}", format!("IoU[{c}]")),
                None => writeln!(s, "{:<12}{:>10}", format!("IoU[{c}]"), "-"),
            }
            .ok();
        }
        for (c, ap) in &self.per_class_ap {
            let _ = writeln!(s, "{:<12}{ap:>10.4}", format!("AP[{c}]"));
        }
        s
    }
}
