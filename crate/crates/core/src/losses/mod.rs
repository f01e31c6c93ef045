//! Training losses and the progressive task-loss schedule.

mod occupancy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{DetTargets, REG_CHANNELS};
use crate::numcore::{Real, Tensor};
use crate::view_transform::DepthBins;

pub use occupancy::{lovasz_class, occupancy_loss, OccLossParts};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
/// Heatmap probabilities are clamped to `[ε, 1 - ε]` inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
    pub geo: f64,
    pub sem: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, lovasz: 1.0, geo: 1.0, sem: 1.0, det_cls: 1.0, det_reg: 1.0, depth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ce, self.lovasz, self.geo, self.sem, self.det_cls, self.det_reg, self.depth];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub v_min: f64,
    pub v_max: f64,
    /// Ramp length `N` in epochs.
    pub ramp_epochs: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min >= 0.0 && self.v_min <= self.v_max && self.v_max.is_finite() && self.ramp_epochs >= 1.0) {
            return Err(Error::Config(format!("bad schedule {self:?}")));
        }
        Ok(())
    }
}

/// `δ = max(V_min, min(V_max, (i / N) · V_max))`.
pub fn schedule_delta(epoch: f64, s: &ScheduleSpec) -> f64 {
    s.v_min.max(s.v_max.min(epoch / s.ramp_epochs * s.v_max))
}

/// `L = L_img + δ·L_det + δ·L_occ`.
pub fn total_loss(l_img: f64, l_det: f64, l_occ: f64, delta: f64) -> Result<f64> {
    for (name, v) in [("image", l_img), ("detection", l_det), ("occupancy", l_occ), ("delta", delta)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component is {v}")));
        }
    }
    Ok(l_img + delta * l_det + delta * l_occ)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLossParts {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    /// Boxes left out: center outside the grid or sharing a cell.
    pub skipped: usize,
}

/// Penalty-reduced focal loss on the heatmap plus L1 on the regression
/// channels at box centers. Returns the parts and `(g_heatmap, g_regmap)`.
pub fn detection_loss<S: Real>(
    heatmap: &Tensor<S>,
    regmap: &Tensor<S>,
    targets: &DetTargets,
    w: &LossWeights,
) -> Result<(DetLossParts, Tensor<S>, Tensor<S>)> {
    if heatmap.dims() != targets.heatmap.dims() {
        return Err(Error::shape(
            "detection_loss",
            format!("heatmap {:?} vs target {:?}", heatmap.dims(), targets.heatmap.dims()),
        ));
    }
    let [_, x, y] = *heatmap.dims() else { unreachable!("checked against a 3D target") };
    if regmap.dims() != [REG_CHANNELS, x, y] {
        return Err(Error::shape("detection_loss", format!("regmap {:?}", regmap.dims())));
    }
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let num_pos = targets.heatmap.data().iter().filter(|&&t| t == 1.0).count();
    let norm = num_pos.max(1) as f64;
    let mut parts = DetLossParts { skipped: targets.skipped, ..Default::default() };
    let mut g_heat = heatmap.zeros_like();
    for (i, (&h, &t)) in heatmap.data().iter().zip(targets.heatmap.data()).enumerate() {
        let raw = h.f64();
        let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let (l, dl) = if t == 1.0 {
            let q = 1.0 - p;
            (-q.powi(a) * p.ln(), a as f64 * q.powi(a - 1) * p.ln() - q.powi(a) / p)
        } else {
            let r = (1.0 - t).powi(b);
            let l1 = (1.0 - p).ln();
            (-r * p.powi(a) * l1, -r * (a as f64 * p.powi(a - 1) * l1 - p.powi(a) / (1.0 - p)))
        };
        parts.cls += l;
        let inside = raw > FOCAL_EPS && raw < 1.0 - FOCAL_EPS;
        g_heat.data_mut()[i] = S::of(if inside { w.det_cls * dl / norm } else { 0.0 });
    }
    parts.cls /= norm;

    let mut g_reg = regmap.zeros_like();
    let mut seen = std::collections::BTreeSet::new();
    let used: Vec<_> = targets.centers.iter().filter(|(cell, _, _)| seen.insert(*cell)).collect();
    parts.skipped += targets.centers.len() - used.len();
    if !used.is_empty() {
        let nb = used.len() as f64;
        for &&((i, j), _, r) in &used {
            for (ch, &tv) in r.iter().enumerate() {
                let idx = (ch * x + i) * y + j;
                let d = regmap.data()[idx].f64() - tv;
                parts.reg += d.abs();
                g_reg.data_mut()[idx] = S::of(w.det_reg * d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / nb);
            }
        }
        parts.reg /= nb;
    }
    parts.total = w.det_cls * parts.cls + w.det_reg * parts.reg;
    Ok((parts, g_heat, g_reg))
}

/// Cross-entropy of the predicted bin distribution (`N×D×H×W`) against
/// the bin of the rendered depth (`N×H×W`), averaged over valid pixels
/// whose depth falls inside the bin range. Returns `(loss, d/d probs)`.
pub fn depth_loss<S: Real>(
    probs: &Tensor<S>,
    gt_depth: &[f64],
    valid: &[bool],
    bins: &DepthBins,
) -> Result<(f64, Tensor<S>)> {
    let [n, d, h, w] = *probs.dims() else {
        return Err(Error::shape("depth_loss", format!("probs {:?}", probs.dims())));
    };
    let plane = h * w;
    if gt_depth.len() != n * plane || valid.len() != n * plane || d != bins.count {
        return Err(Error::shape("depth_loss", format!("{} depths for probs {:?}", gt_depth.len(), probs.dims())));
    }
    let targets: Vec<(usize, usize)> = (0..n * plane)
        .filter(|&i| valid[i])
        .filter_map(|i| bins.bin_of(gt_depth[i]).map(|b| (i, b)))
        .collect();
    let mut grad = probs.zeros_like();
    if targets.is_empty() {
        return Ok((0.0, grad));
    }
    let m = targets.len() as f64;
    let mut loss = 0.0;
    for &(i, bin) in &targets {
        let idx = ((i / plane) * d + bin) * plane + i % plane;
        let p = probs.data()[idx].f64().max(1e-12);
        loss -= p.ln();
        grad.data_mut()[idx] = S::of(-1.0 / (p * m));
    }
    Ok((loss / m, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGridSpec;
    use crate::heads::{encode_targets, Box3D};
    use crate::numcore::gradcheck::{gradcheck, GradCheck};
    use crate::numcore::{nn, Rng};

    fn w_only(f: impl Fn(&mut LossWeights)) -> LossWeights {
        let mut w = LossWeights { ce: 0.0, lovasz: 0.0, geo: 0.0, sem: 0.0, det_cls: 0.0, det_reg: 0.0, depth: 0.0 };
        f(&mut w);
        w
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleSpec { v_min: 0.1, v_max: 1.0, ramp_epochs: 10.0 };
        assert_eq!(schedule_delta(0.0, &s), 0.1);
        assert_eq!(schedule_delta(10.0, &s), 1.0);
        assert_eq!(schedule_delta(5.0, &s), 0.5);
        assert_eq!(schedule_delta(50.0, &s), 1.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5).unwrap(), 3.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0).unwrap(), 6.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0).unwrap(), 1.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 1.0).is_err());
    }

    fn one_hot_logits(labels: &[u16], k: usize, margin: f64) -> Tensor<f64> {
        let n = labels.len();
        Tensor::from_fn(&[k, n], |i| if labels[i % n] as usize == i / n { margin } else { 0.0 })
    }

    #[test]
    fn perfect_prediction_has_small_loss() {
        let labels = [0u16, 1, 2, 1, 0, 0, 2, 1];
        let (p, _) = occupancy_loss(&one_hot_logits(&labels, 3, 40.0), &labels, None, &LossWeights::default()).unwrap();
        assert!(p.ce < 1e-12 && p.lovasz < 1e-12 && p.geo < 1e-12 && p.sem < 1e-12, "{p:?}");
    }

    fn jaccard_oracle(pred: &[u16], gt: &[u16], k: usize) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for c in 0..k as u16 {
            if !gt.contains(&c) {
                continue;
            }
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            acc += 1.0 - inter as f64 / union as f64;
            count += 1;
        }
        acc / count as f64
    }

    /// Lovász-softmax on hard probabilities, computed through the public
    /// per-class extension so the inputs are exact 0/1.
    fn lovasz_hard(pred: &[u16], gt: &[u16], k: usize) -> f64 {
        let present: Vec<u16> = (0..k as u16).filter(|c| gt.contains(c)).collect();
        let mut acc = 0.0;
        for &c in &present {
            let fg: Vec<bool> = gt.iter().map(|&g| g == c).collect();
            let e: Vec<f64> = pred.iter().zip(&fg).map(|(&p, &f)| if (p == c) != f { 1.0 } else { 0.0 }).collect();
            acc += lovasz_class(&e, &fg).0;
        }
        acc / present.len() as f64
    }

    #[test]
    fn lovasz_equals_jaccard_at_vertices() {
        for g in 0..256u32 {
            let gt: Vec<u16> = (0..8).map(|i| ((g >> i) & 1) as u16).collect();
            for p in (0..256u32).step_by(7) {
                let pred: Vec<u16> = (0..8).map(|i| ((p >> i) & 1) as u16).collect();
                assert_eq!(lovasz_hard(&pred, &gt, 2), jaccard_oracle(&pred, &gt, 2));
            }
        }
    }

    #[test]
    fn lovasz_via_softmax_matches_at_large_margin() {
        let gt = [1u16, 0, 1, 1, 0, 0, 1, 0];
        let pred = [1u16, 1, 0, 1, 0, 0, 1, 0];
        let (parts, _) = occupancy_loss(&one_hot_logits(&pred, 2, 60.0), &gt, None, &w_only(|w| w.lovasz = 1.0)).unwrap();
        assert!((parts.lovasz - jaccard_oracle(&pred, &gt, 2)).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_zero() {
        let mut rng = Rng::new(0);
        let logits = Tensor::<f64>::from_fn(&[3, 6], |_| rng.uniform_in(-1.0, 1.0));
        let (p, g) = occupancy_loss(&logits, &[0, 1, 2, 1, 0, 1], Some(&[false; 6]), &LossWeights::default()).unwrap();
        assert_eq!(p.total, 0.0);
        assert!(g.data().iter().all(|&v| v.to_bits() == 0));
    }

    #[test]
    fn masked_voxels_get_bitwise_zero_gradient() {
        let mut rng = Rng::new(1);
        let logits = Tensor::<f64>::from_fn(&[3, 6], |_| rng.uniform_in(-1.0, 1.0));
        let mask = [true, false, true, true, false, true];
        let (_, g) = occupancy_loss(&logits, &[0, 1, 2, 1, 0, 1], Some(&mask), &LossWeights::default()).unwrap();
        for c in 0..3 {
            assert_eq!(g.data()[c * 6 + 1].to_bits(), 0);
            assert_eq!(g.data()[c * 6 + 4].to_bits(), 0);
        }
    }

    #[test]
    fn occupancy_gradcheck_per_term() {
        let terms: [fn(&mut LossWeights); 4] = [|w| w.ce = 1.0, |w| w.lovasz = 1.0, |w| w.geo = 1.0, |w| w.sem = 1.0];
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let labels: Vec<u16> = (0..10).map(|_| rng.below(3) as u16).collect();
            let logits = Tensor::from_fn(&[3, 10], |_| rng.uniform_in(-2.0, 2.0));
            let mask: Vec<bool> = (0..10).map(|i| i != 3).collect();
            for t in terms {
                let w = w_only(t);
                let e = gradcheck(
                    GradCheck::new(seed).step(1e-6),
                    std::slice::from_ref(&logits),
                    |x| Tensor::scalar(occupancy_loss(&x[0], &labels, Some(&mask), &w).unwrap().0.total),
                    |x, g| {
                        let (_, mut gr) = occupancy_loss(&x[0], &labels, Some(&mask), &w).unwrap();
                        gr.scale(g.data()[0]);
                        vec![gr]
                    },
                )
                .unwrap();
                assert!(e < 1e-4, "seed {seed} {w:?}: {e}");
            }
        }
    }

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec { origin: [0.0, 0.0, 0.0], voxel_size: [1.0, 1.0, 1.0], dims: [5, 5, 2] }
    }

    fn one_box() -> Box3D {
        Box3D { center: [2.3, 1.6, 0.5], size: [1.0, 1.0, 1.0], yaw: 0.2, velocity: [0.1, 0.0], class_id: 0, score: 1.0 }
    }

    #[test]
    fn zero_boxes_is_background_focal() {
        let t = encode_targets(&[], &grid(), 1).unwrap();
        let heat = Tensor::<f64>::full(&[1, 5, 5], 0.2);
        let (p, _, _) = detection_loss(&heat, &Tensor::zeros(&[10, 5, 5]), &t, &LossWeights::default()).unwrap();
        assert_eq!(p.reg, 0.0);
        let want = 25.0 * -(0.2f64.powi(2)) * 0.8f64.ln();
        assert!((p.cls - want).abs() < 1e-12);
    }

    #[test]
    fn single_box_hand_computed() {
        let g = grid();
        let t = encode_targets(&[one_box()], &g, 1).unwrap();
        let heat = Tensor::<f64>::full(&[1, 5, 5], 0.3);
        let mut reg = Tensor::<f64>::zeros(&[10, 5, 5]);
        reg.set(&[2, 2, 1], 0.75);
        let (p, _, _) = detection_loss(&heat, &reg, &t, &LossWeights::default()).unwrap();
        // Peak at (2, 1): -(0.7)^2 ln 0.3. Neighbors: -(1 - y)^4 0.09 ln 0.7.
        let mut want = -(0.7f64.powi(2)) * 0.3f64.ln();
        for i in 0..5i32 {
            for j in 0..5i32 {
                let (dx, dy) = (i - 2, j - 1);
                if dx == 0 && dy == 0 {
                    continue;
                }
                let yv = if dx.abs() <= 1 && dy.abs() <= 1 { (-((dx * dx + dy * dy) as f64) / 0.5).exp() } else { 0.0 };
                want += -(1.0 - yv).powi(4) * 0.09 * 0.7f64.ln();
            }
        }
        assert!((p.cls - want).abs() < 1e-12);
        let r = t.centers[0].2;
        let want_reg: f64 = r.iter().enumerate().map(|(ch, &v)| (if ch == 2 { 0.75 } else { 0.0 } - v).abs()).sum();
        assert!((p.reg - want_reg).abs() < 1e-12);
    }

    #[test]
    fn matching_predictions() {
        // Regression equal to targets gives an exactly zero L1 term. With a
        // hard 0/1 heatmap target the focal term vanishes up to the clamp.
        let g = grid();
        let mut t = encode_targets(&[one_box()], &g, 1).unwrap();
        t.heatmap = t.heatmap.map(|v| if v == 1.0 { 1.0 } else { 0.0 });
        let mut reg = Tensor::<f64>::zeros(&[10, 5, 5]);
        for (ch, &v) in t.centers[0].2.iter().enumerate() {
            reg.set(&[ch, 2, 1], v);
        }
        let (p, _, gr) = detection_loss(&t.heatmap.clone(), &reg, &t, &LossWeights::default()).unwrap();
        assert_eq!(p.reg, 0.0);
        assert!(gr.data().iter().all(|&v| v == 0.0));
        assert!(p.cls < 1e-7);
    }

    #[test]
    fn detection_gradcheck() {
        let g = grid();
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let t = encode_targets(&[one_box()], &g, 2).unwrap();
            let heat = Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(0.05, 0.95));
            let reg = Tensor::from_fn(&[10, 5, 5], |_| rng.uniform_in(-1.0, 1.0));
            let w = LossWeights::default();
            let e = gradcheck(
                GradCheck::new(seed).step(1e-7),
                &[heat, reg],
                |x| Tensor::scalar(detection_loss(&x[0], &x[1], &t, &w).unwrap().0.total),
                |x, gy| {
                    let (_, mut a, mut b) = detection_loss(&x[0], &x[1], &t, &w).unwrap();
                    a.scale(gy.data()[0]);
                    b.scale(gy.data()[0]);
                    vec![a, b]
                },
            )
            .unwrap();
            assert!(e < 1e-4, "seed {seed}: {e}");
        }
    }

    #[test]
    fn depth_loss_closed_forms() {
        let bins = DepthBins { d_min: 1.0, d_max: 5.0, count: 4 };
        let gt = [1.5, 2.5, 3.5, 4.5];
        let valid = [true, true, true, false];
        let onehot = Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(depth_loss(&onehot, &gt, &valid, &bins).unwrap().0, 0.0);
        let uniform = Tensor::<f64>::full(&[1, 4, 2, 2], 0.25);
        assert!((depth_loss(&uniform, &gt, &valid, &bins).unwrap().0 - 4f64.ln()).abs() < 1e-12);
        assert_eq!(depth_loss(&uniform, &gt, &[false; 4], &bins).unwrap().0, 0.0);
    }

    #[test]
    fn depth_gradcheck_through_softmax() {
        let bins = DepthBins { d_min: 1.0, d_max: 5.0, count: 4 };
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let logits = Tensor::from_fn(&[2, 4, 2, 3], |_| rng.uniform_in(-1.0, 1.0));
            let gt: Vec<f64> = (0..12).map(|_| rng.uniform_in(0.5, 5.5)).collect();
            let valid: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
            let e = gradcheck(
                GradCheck::new(seed),
                &[logits],
                |x| Tensor::scalar(depth_loss(&nn::softmax(&x[0], 1).unwrap(), &gt, &valid, &bins).unwrap().0),
                |x, gy| {
                    let p = nn::softmax(&x[0], 1).unwrap();
                    let (_, mut g) = depth_loss(&p, &gt, &valid, &bins).unwrap();
                    g.scale(gy.data()[0]);
                    vec![nn::softmax_backward(&p, &g, 1)]
                },
            )
            .unwrap();
            assert!(e < 1e-4);
        }
    }
}
