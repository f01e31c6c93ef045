//! Occupancy losses on `K×...` logits: cross-entropy, Lovász-softmax and
//! the precision/recall/specificity affinity ("scal") terms. Everything is
//! computed in f64 over the unmasked voxels only.

use super::LossWeights;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// Floor applied inside the affinity logs.
const SCAL_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OccLossParts {
    pub ce: f64,
    pub lovasz: f64,
    pub geo: f64,
    pub sem: f64,
    pub total: f64,
}

/// Lovász extension of the Jaccard loss for one class, written as
/// `Σ_i (e_i - e_{i+1}) · J_i` over errors sorted in decreasing order,
/// where `J_i` is the Jaccard loss of the top-`i` set. At 0/1 errors this
/// is exactly `1 - IoU`. Returns the value and `d/d errors` (input order).
pub fn lovasz_class(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let n = errors.len();
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let mut jac = vec![0.0; n + 1];
    let (mut cf, mut cb) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if fg[i] {
            cf += 1.0;
        } else {
            cb += 1.0;
        }
        jac[k + 1] = 1.0 - (gts - cf) / (gts + cb);
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let next = if k + 1 < n { errors[order[k + 1]] } else { 0.0 };
        value += (errors[order[k]] - next) * jac[k + 1];
        grad[order[k]] = jac[k + 1] - jac[k];
    }
    (value, grad)
}

/// `-mean(log term)` over the defined precision, recall and specificity
/// terms of soft prediction `p` against binary target `t`, with `d/dp`.
fn scal_terms(p: &[f64], t: &[bool]) -> Option<(f64, Vec<f64>)> {
    let (mut sp, mut spt, mut st, mut snp_nt, mut snt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&pi, &ti) in p.iter().zip(t) {
        sp += pi;
        if ti {
            spt += pi;
            st += 1.0;
        } else {
            snp_nt += 1.0 - pi;
            snt += 1.0;
        }
    }
    let mut terms = 0usize;
    let mut value = 0.0;
    // d(-log r)/dp_i for r = a/b: -(da_i/a - db_i/b), skipped when clamped.
    let mut grad = vec![0.0; p.len()];
    let mut add = |num: f64, den: f64, dnum: &dyn Fn(bool) -> f64, dden: &dyn Fn(bool) -> f64| {
        terms += 1;
        let r = num / den;
        if r > SCAL_EPS {
            value -= r.ln();
            for (g, &ti) in grad.iter_mut().zip(t) {
                *g -= dnum(ti) / num - dden(ti) / den;
            }
        } else {
            value -= SCAL_EPS.ln();
        }
    };
    if sp > 0.0 {
        add(spt, sp, &|ti| if ti { 1.0 } else { 0.0 }, &|_| 1.0);
    }
    if st > 0.0 {
        add(spt, st, &|ti| if ti { 1.0 } else { 0.0 }, &|_| 0.0);
    }
    if snt > 0.0 {
        add(snp_nt, snt, &|ti| if ti { 0.0 } else { -1.0 }, &|_| 0.0);
    }
    if terms == 0 {
        return None;
    }
    let m = terms as f64;
    Some((value / m, grad.into_iter().map(|g| g / m).collect()))
}

/// Full occupancy loss and its gradient w.r.t. `logits`.
///
/// `labels` and `mask` follow the flattened spatial order of `logits`.
/// Masked voxels get bitwise-zero gradient; an all-masked input gives 0.
pub fn occupancy_loss<S: Real>(
    logits: &Tensor<S>,
    labels: &[u16],
    mask: Option<&[bool]>,
    w: &LossWeights,
) -> Result<(OccLossParts, Tensor<S>)> {
    let k = logits.dims()[0];
    let n = logits.numel() / k.max(1);
    if labels.len() != n {
        return Err(Error::shape("occupancy_loss", format!("{} labels for {n} voxels", labels.len())));
    }
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::shape("occupancy_loss", "mask length differs from voxel count"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::UnknownClass(bad as usize));
    }
    let valid: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    let mut grad = logits.zeros_like();
    let m = valid.len();
    if m == 0 {
        return Ok((OccLossParts::default(), grad));
    }
    let ld = logits.data();
    // Probabilities, class-major over valid voxels.
    let mut p = vec![0.0; k * m];
    for (j, &i) in valid.iter().enumerate() {
        let mx = (0..k).map(|c| ld[c * n + i].f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (ld[c * n + i].f64() - mx).exp();
            p[c * m + j] = e;
            z += e;
        }
        for c in 0..k {
            p[c * m + j] /= z;
        }
    }
    let y: Vec<usize> = valid.iter().map(|&i| labels[i] as usize).collect();
    let mf = m as f64;

    let mut parts = OccLossParts::default();
    let mut g_logit = vec![0.0; k * m];
    let mut g_p = vec![0.0; k * m];

    if w.ce != 0.0 {
        for j in 0..m {
            parts.ce -= p[y[j] * m + j].max(f64::MIN_POSITIVE).ln();
            for c in 0..k {
                let t = if c == y[j] { 1.0 } else { 0.0 };
                g_logit[c * m + j] += w.ce * (p[c * m + j] - t) / mf;
            }
        }
        parts.ce /= mf;
    }

    let present: Vec<usize> = (0..k).filter(|&c| y.contains(&c)).collect();
    if w.lovasz != 0.0 {
        for &c in &present {
            let fg: Vec<bool> = y.iter().map(|&l| l == c).collect();
            let errors: Vec<f64> = (0..m).map(|j| if fg[j] { 1.0 - p[c * m + j] } else { p[c * m + j] }).collect();
            let (v, ge) = lovasz_class(&errors, &fg);
            parts.lovasz += v;
            let s = w.lovasz / present.len() as f64;
            for j in 0..m {
                g_p[c * m + j] += s * if fg[j] { -ge[j] } else { ge[j] };
            }
        }
        parts.lovasz /= present.len() as f64;
    }

    if w.geo != 0.0 {
        let occ: Vec<f64> = (0..m).map(|j| 1.0 - p[j]).collect();
        let t: Vec<bool> = y.iter().map(|&l| l != 0).collect();
        if let Some((v, g)) = scal_terms(&occ, &t) {
            parts.geo = v;
            for j in 0..m {
                g_p[j] -= w.geo * g[j];
            }
        }
    }

    if w.sem != 0.0 {
        let mut count = 0usize;
        let mut acc = Vec::new();
        for &c in &present {
            let t: Vec<bool> = y.iter().map(|&l| l == c).collect();
            if let Some((v, g)) = scal_terms(&p[c * m..(c + 1) * m], &t) {
                count += 1;
                acc.push((c, g));
                parts.sem += v;
            }
        }
        if count > 0 {
            parts.sem /= count as f64;
            for (c, g) in acc {
                for j in 0..m {
                    g_p[c * m + j] += w.sem * g[j] / count as f64;
                }
            }
        }
    }

    for j in 0..m {
        let dot: f64 = (0..k).map(|c| p[c * m + j] * g_p[c * m + j]).sum();
        for c in 0..k {
            g_logit[c * m + j] += p[c * m + j] * (g_p[c * m + j] - dot);
        }
    }
    for (j, &i) in valid.iter().enumerate() {
        for c in 0..k {
            grad.data_mut()[c * n + i] = S::of(g_logit[c * m + j]);
        }
    }
    parts.total = w.ce * parts.ce + w.lovasz * parts.lovasz + w.geo * parts.geo + w.sem * parts.sem;
    Ok((parts, grad))
}
