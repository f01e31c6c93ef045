//! Joint occupancy/detection spatial augmentation. One sampled transform
//! moves the boxes exactly and warps the voxel lattice; supervision is
//! pulled back from augmented space by resampling the voxel features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Transform3D, Vec3, VoxelGridSpec};
use crate::heads::{wrap_angle, Box3D};
use crate::losses::{occupancy_loss, LossWeights, OccLossParts};
use crate::numcore::sample::stencil3;
use crate::numcore::{Real, Rng, RngPosition, Tensor};

/// Points within this distance of the lattice boundary count as inside.
pub const RANGE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugSpec {
    /// Yaw drawn uniformly from `[-yaw_range, yaw_range]` radians.
    pub yaw_range: f64,
    pub scale_range: [f64; 2],
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
    /// Per-axis translation drawn from `[-t, t]` meters.
    pub translation: Vec3,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            yaw_range: 22.5f64.to_radians(),
            scale_range: [0.95, 1.05],
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            translation: [0.5, 0.5, 0.0],
        }
    }
}

impl AugSpec {
    /// Spec that always yields the identity.
    pub fn none() -> Self {
        AugSpec { yaw_range: 0.0, scale_range: [1.0, 1.0], flip_x_prob: 0.0, flip_y_prob: 0.0, translation: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = self.yaw_range >= 0.0
            && lo > 0.0
            && lo <= hi
            && (0.0..=1.0).contains(&self.flip_x_prob)
            && (0.0..=1.0).contains(&self.flip_y_prob)
            && self.translation.iter().all(|&t| t >= 0.0 && t.is_finite());
        if !ok {
            return Err(Error::Config(format!("bad augmentation spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub yaw: f64,
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub translation: Vec3,
    /// Rotation and scaling center (the grid center).
    pub center: Vec3,
}

impl AugParams {
    pub fn identity(center: Vec3) -> Self {
        AugParams { yaw: 0.0, scale: 1.0, flip_x: false, flip_y: false, translation: [0.0; 3], center }
    }

    fn flip(&self) -> Transform3D {
        Transform3D::diagonal([
            if self.flip_x { -1.0 } else { 1.0 },
            if self.flip_y { -1.0 } else { 1.0 },
            1.0,
        ])
    }

    /// `Tr(center + t) · R · S · F · Tr(-center)`.
    pub fn matrix(&self) -> Transform3D {
        let c = self.center;
        let t = self.translation;
        Transform3D::translation([c[0] + t[0], c[1] + t[1], c[2] + t[2]])
            .compose(&Transform3D::rotation_z(self.yaw))
            .compose(&Transform3D::diagonal([self.scale; 3]))
            .compose(&self.flip())
            .compose(&Transform3D::translation([-c[0], -c[1], -c[2]]))
    }

    /// `Tr(center) · F · S⁻¹ · R⁻¹ · Tr(-center - t)`, assembled in closed form.
    pub fn inverse_matrix(&self) -> Transform3D {
        let c = self.center;
        let t = self.translation;
        let (s, co) = self.yaw.sin_cos();
        Transform3D::translation(c)
            .compose(&self.flip())
            .compose(&Transform3D::diagonal([1.0 / self.scale; 3]))
            .compose(&Transform3D::rotation_z_cs(co, -s))
            .compose(&Transform3D::translation([-c[0] - t[0], -c[1] - t[1], -c[2] - t[2]]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugSample {
    pub m_aug: Transform3D,
    pub m_inv: Transform3D,
    pub params: AugParams,
    /// Generator position the parameters were drawn from.
    pub source: Option<RngPosition>,
}

impl AugSample {
    pub fn from_params(params: AugParams) -> Self {
        AugSample { m_aug: params.matrix(), m_inv: params.inverse_matrix(), params, source: None }
    }

    pub fn identity(center: Vec3) -> Self {
        Self::from_params(AugParams::identity(center))
    }

    pub fn is_identity(&self) -> bool {
        self.m_aug == Transform3D::IDENTITY
    }
}

/// Draws flip x, flip y, scale, yaw, then translation x, y, z.
pub fn sample_aug(rng: &mut Rng, spec: &AugSpec, center: Vec3) -> AugSample {
    let source = rng.position();
    let flip_x = rng.uniform() < spec.flip_x_prob;
    let flip_y = rng.uniform() < spec.flip_y_prob;
    let [lo, hi] = spec.scale_range;
    let scale = if hi > lo { rng.uniform_in(lo, hi) } else { lo };
    let yaw = if spec.yaw_range > 0.0 { rng.uniform_in(-spec.yaw_range, spec.yaw_range) } else { 0.0 };
    let mut translation = [0.0; 3];
    for a in 0..3 {
        if spec.translation[a] > 0.0 {
            translation[a] = rng.uniform_in(-spec.translation[a], spec.translation[a]);
        }
    }
    let mut s = AugSample::from_params(AugParams { yaw, scale, flip_x, flip_y, translation, center });
    s.source = Some(source);
    s
}

/// Maps boxes into augmented space: centers by `M_aug`, headings and
/// velocities by its linear block, sizes by `|scale|`.
pub fn transform_boxes(boxes: &[Box3D], a: &AugSample) -> Vec<Box3D> {
    let m = &a.m_aug;
    let s = a.params.scale.abs();
    boxes
        .iter()
        .map(|b| {
            let h = m.apply_vector([b.yaw.cos(), b.yaw.sin(), 0.0]);
            let v = m.apply_vector([b.velocity[0], b.velocity[1], 0.0]);
            Box3D {
                center: m.apply_point(b.center),
                size: [b.size[0] * s, b.size[1] * s, b.size[2] * s],
                yaw: wrap_angle(h[1].atan2(h[0])),
                velocity: [v[0], v[1]],
                class_id: b.class_id,
                score: b.score,
            }
        })
        .collect()
}

/// `P_{c-i} · M · P_{i-c}` applied to continuous indices, evaluated as
/// `I + (M·c - c) / voxel_size` so the identity is exact.
pub fn warp_indices(grid: &VoxelGridSpec, m: &Transform3D, idx: &[Vec3]) -> Vec<Vec3> {
    idx.iter()
        .map(|&i| {
            let c = grid.index_to_coord(i);
            let mc = m.apply_point(c);
            [0, 1, 2].map(|a| i[a] + (mc[a] - c[a]) / grid.voxel_size[a])
        })
        .collect()
}

/// Continuous index into the augmented volume for every cell, `X×Y×Z×3`.
pub fn warp_label_indices(grid: &VoxelGridSpec, a: &AugSample) -> Tensor<f64> {
    let cells: Vec<Vec3> = (0..grid.num_cells())
        .map(|f| grid.unflat(f).map(|v| v as f64))
        .collect();
    let data = warp_indices(grid, &a.m_aug, &cells).into_iter().flatten().collect();
    let [x, y, z] = grid.dims;
    Tensor::from_vec(&[x, y, z, 3], data).expect("one index triple per cell")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Binary mask over the grid, `true` where the warped index was in range.
#[derive(Clone, Debug, PartialEq)]
pub struct OccMask {
    pub m: Vec<bool>,
}

impl OccMask {
    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }
}

/// Index snapped to the lattice range, if within [`RANGE_EPS`] of it.
fn in_range(p: &[f64], dims: [usize; 3]) -> Option<[f64; 3]> {
    let mut q = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if !(p[a] >= -RANGE_EPS && p[a] <= hi + RANGE_EPS) {
            return None;
        }
        q[a] = p[a].clamp(0.0, hi);
    }
    Some(q)
}

/// `F_org[:, i] = sample(F_aug, I_aug[i])`, zero and masked out where
/// `I_aug[i]` leaves the lattice.
pub fn resample_features<S: Real>(f_aug: &Tensor<S>, i_aug: &Tensor<f64>, mode: Interp) -> Result<(Tensor<S>, OccMask)> {
    let [c, x, y, z] = *f_aug.dims() else {
        return Err(Error::shape("resample_features", format!("features {:?}", f_aug.dims())));
    };
    let dims = [x, y, z];
    let n = x * y * z;
    if i_aug.numel() != 3 * n {
        return Err(Error::shape("resample_features", format!("indices {:?}", i_aug.dims())));
    }
    let mut out = f_aug.zeros_like();
    let mut mask = vec![false; n];
    let fd = f_aug.data();
    for (cell, p) in i_aug.data().chunks(3).enumerate() {
        let Some(q) = in_range(p, dims) else { continue };
        mask[cell] = true;
        match mode {
            Interp::Nearest => {
                let r = q.map(|v| v.round() as usize);
                let src = (r[0] * y + r[1]) * z + r[2];
                for ch in 0..c {
                    out.data_mut()[ch * n + cell] = fd[ch * n + src];
                }
            }
            Interp::Trilinear => {
                let st = stencil3(q.map(S::of), dims).expect("snapped index is in range");
                for ch in 0..c {
                    let mut v = S::zero();
                    for j in 0..8 {
                        v += st.w[j] * fd[ch * n + st.idx[j]];
                    }
                    out.data_mut()[ch * n + cell] = v;
                }
            }
        }
    }
    Ok((out, OccMask { m: mask }))
}

/// Adjoint of [`resample_features`] w.r.t. `F_aug`.
pub fn resample_features_backward<S: Real>(
    dims: &[usize],
    i_aug: &Tensor<f64>,
    mode: Interp,
    g_org: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [c, x, y, z] = *dims else {
        return Err(Error::shape("resample_features_backward", format!("dims {dims:?}")));
    };
    let n = x * y * z;
    let mut g = Tensor::zeros(dims);
    for (cell, p) in i_aug.data().chunks(3).enumerate() {
        let Some(q) = in_range(p, [x, y, z]) else { continue };
        match mode {
            Interp::Nearest => {
                let r = q.map(|v| v.round() as usize);
                let src = (r[0] * y + r[1]) * z + r[2];
                for ch in 0..c {
                    g.data_mut()[ch * n + src] += g_org.data()[ch * n + cell];
                }
            }
            Interp::Trilinear => {
                let st = stencil3(q.map(S::of), [x, y, z]).expect("snapped index is in range");
                for ch in 0..c {
                    let go = g_org.data()[ch * n + cell];
                    for j in 0..8 {
                        g.data_mut()[ch * n + st.idx[j]] += st.w[j] * go;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Occupancy loss restricted to `mask`; masked voxels leave every
/// sub-loss and every denominator.
pub fn masked_occupancy_loss<S: Real>(
    labels: &[u16],
    logits: &Tensor<S>,
    mask: &OccMask,
    w: &LossWeights,
) -> Result<(OccLossParts, Tensor<S>)> {
    occupancy_loss(logits, labels, Some(&mask.m), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{gradcheck, GradCheck};
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec { origin: [-2.0, -2.0, 0.0], voxel_size: [0.5, 0.5, 0.5], dims: [8, 8, 4] }
    }

    #[test]
    fn degenerate_spec_gives_identity() {
        let mut rng = Rng::new(0);
        let a = sample_aug(&mut rng, &AugSpec::none(), grid().center());
        assert_eq!(a.m_aug, Transform3D::IDENTITY);
        assert!(a.is_identity());
    }

    #[test]
    fn flip_x_only_is_diagonal() {
        let spec = AugSpec { flip_x_prob: 1.0, ..AugSpec::none() };
        let a = sample_aug(&mut Rng::new(0), &spec, grid().center());
        assert_eq!(a.m_aug, Transform3D::diagonal([-1.0, 1.0, 1.0]));
    }

    #[test]
    fn sampling_is_deterministic_and_inverse_is_exact() {
        let g = grid();
        let a = sample_aug(&mut Rng::new(7), &AugSpec::default(), g.center());
        let b = sample_aug(&mut Rng::new(7), &AugSpec::default(), g.center());
        assert_eq!(a, b);
        assert!(a.m_aug.compose(&a.m_inv).max_abs_diff(&Transform3D::IDENTITY) < 1e-12);
    }

    fn a_box() -> Box3D {
        Box3D { center: [0.7, -0.4, 0.9], size: [1.4, 0.8, 1.0], yaw: 0.3, velocity: [0.5, 0.2], class_id: 1, score: 1.0 }
    }

    #[test]
    fn yaw_quarter_turn_about_origin() {
        let a = AugSample::from_params(AugParams { yaw: FRAC_PI_2, ..AugParams::identity([0.0; 3]) });
        let b = transform_boxes(&[a_box()], &a).remove(0);
        assert!((b.center[0] - 0.4).abs() < 1e-12 && (b.center[1] - 0.7).abs() < 1e-12);
        assert!((b.yaw - (0.3 + FRAC_PI_2)).abs() < 1e-12);
        assert_eq!(transform_boxes(&[a_box()], &AugSample::identity([0.0; 3]))[0], a_box());
    }

    /// Corner sets compared as unordered point sets.
    fn same_corners(a: &[Vec3; 8], b: &[Vec3; 8], tol: f64) -> bool {
        a.iter().all(|p| b.iter().any(|q| (0..3).all(|k| (p[k] - q[k]).abs() < tol)))
    }

    #[test]
    fn corners_follow_the_matrix() {
        let mut rng = Rng::new(3);
        let spec = AugSpec { scale_range: [2.0, 2.0], ..AugSpec::default() };
        for _ in 0..20 {
            let a = sample_aug(&mut rng, &spec, grid().center());
            let b = transform_boxes(&[a_box()], &a).remove(0);
            assert_eq!(b.size, [2.8, 1.6, 2.0]);
            let mapped = a_box().corners().map(|c| a.m_aug.apply_point(c));
            assert!(same_corners(&b.corners(), &mapped, 1e-6));
        }
    }

    #[test]
    fn warp_identity_translation_and_inverse() {
        let g = grid();
        let ids = warp_label_indices(&g, &AugSample::identity(g.center()));
        let orig: Vec<f64> = (0..g.num_cells()).flat_map(|f| g.unflat(f).map(|v| v as f64)).collect();
        assert_eq!(ids.data(), &orig[..]);
        let t = AugSample::from_params(AugParams { translation: [0.5, 0.0, 0.0], ..AugParams::identity(g.center()) });
        let ids = warp_label_indices(&g, &t);
        for (w, o) in ids.data().chunks(3).zip(orig.chunks(3)) {
            assert_eq!([w[0], w[1], w[2]], [o[0] + 1.0, o[1], o[2]]);
        }
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let a = sample_aug(&mut rng, &AugSpec::default(), g.center());
            let fwd: Vec<Vec3> = warp_label_indices(&g, &a).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let back = warp_indices(&g, &a.m_inv, &fwd);
            for (b, o) in back.iter().zip(orig.chunks(3)) {
                assert!((0..3).all(|k| (b[k] - o[k]).abs() < 1e-9));
            }
        }
    }

    fn rand_vol(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn identity_resample_is_exact() {
        let g = grid();
        let f = rand_vol(&mut Rng::new(1), &[2, 8, 8, 4]);
        let ids = warp_label_indices(&g, &AugSample::identity(g.center()));
        for mode in [Interp::Trilinear, Interp::Nearest] {
            let (out, mask) = resample_features(&f, &ids, mode).unwrap();
            assert_eq!(out, f);
            assert_eq!(mask.count(), g.num_cells());
        }
    }

    #[test]
    fn quarter_turn_nearest_is_a_permutation() {
        let g = VoxelGridSpec { origin: [-4.0, -4.0, 0.0], voxel_size: [0.5, 0.5, 0.5], dims: [16, 16, 4] };
        let f = rand_vol(&mut Rng::new(2), &[2, 16, 16, 4]);
        let a = AugSample::from_params(AugParams { yaw: FRAC_PI_2, ..AugParams::identity(g.center()) });
        let (out, mask) = resample_features(&f, &warp_label_indices(&g, &a), Interp::Nearest).unwrap();
        assert_eq!(mask.count(), g.num_cells());
        // Rotating cell (i, j) by +90° about the center lands on (15 - j, i).
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..4 {
                    for c in 0..2 {
                        assert_eq!(out.at(&[c, i, j, k]), f.at(&[c, 15 - j, i, k]));
                    }
                }
            }
        }
    }

    #[test]
    fn half_translation_masks_the_evacuated_half() {
        let g = grid();
        let a = AugSample::from_params(AugParams { translation: [2.0, 0.0, 0.0], ..AugParams::identity(g.center()) });
        let (_, mask) = resample_features(&rand_vol(&mut Rng::new(0), &[1, 8, 8, 4]), &warp_label_indices(&g, &a), Interp::Trilinear).unwrap();
        for f in 0..g.num_cells() {
            assert_eq!(mask.m[f], g.unflat(f)[0] < 4);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let g = grid();
        let f = rand_vol(&mut Rng::new(4), &[2, 8, 8, 4]);
        let flip = AugSample::from_params(AugParams { flip_x: true, flip_y: true, ..AugParams::identity(g.center()) });
        let twice = AugSample { m_aug: flip.m_aug.compose(&flip.m_aug), ..flip.clone() };
        let (out, _) = resample_features(&f, &warp_label_indices(&g, &twice), Interp::Nearest).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn box_interior_voxels_stay_inside() {
        let g = grid();
        let b = a_box();
        let inside: Vec<[usize; 3]> = (0..g.num_cells()).map(|f| g.unflat(f)).filter(|&c| b.contains(g.cell_center(c), 0.0)).collect();
        assert!(!inside.is_empty());
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let a = sample_aug(&mut rng, &AugSpec::default(), g.center());
            let tb = transform_boxes(std::slice::from_ref(&b), &a).remove(0);
            for &c in &inside {
                assert!(tb.contains(a.m_aug.apply_point(g.cell_center(c)), 1e-6));
            }
        }
    }

    #[test]
    fn resample_gradcheck_and_mask_locality() {
        let g = grid();
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let a = sample_aug(&mut rng, &AugSpec { translation: [1.0, 1.0, 0.3], ..AugSpec::default() }, g.center());
            let ids = warp_label_indices(&g, &a);
            let f = rand_vol(&mut rng, &[2, 8, 8, 4]);
            let e = gradcheck(
                GradCheck::new(seed).step(1e-6),
                std::slice::from_ref(&f),
                |x| resample_features(&x[0], &ids, Interp::Trilinear).unwrap().0,
                |_, gy| vec![resample_features_backward(&[2, 8, 8, 4], &ids, Interp::Trilinear, gy).unwrap()],
            )
            .unwrap();
            assert!(e < 1e-5, "seed {seed}: {e}");
            let (_, mask) = resample_features(&f, &ids, Interp::Trilinear).unwrap();
            let mut gy = Tensor::<f64>::zeros(&[2, 8, 8, 4]);
            for (cell, &m) in mask.m.iter().enumerate() {
                if !m {
                    gy.data_mut()[cell] = 1.0;
                }
            }
            let gf = resample_features_backward(&[2, 8, 8, 4], &ids, Interp::Trilinear, &gy).unwrap();
            assert!(gf.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_loss_matches_cropped_oracle() {
        let mut rng = Rng::new(6);
        let n = 16;
        let logits = Tensor::<f64>::from_fn(&[3, n], |_| rng.uniform_in(-1.0, 1.0));
        let labels: Vec<u16> = (0..n).map(|_| rng.below(3) as u16).collect();
        let w = LossWeights::default();
        let all = OccMask { m: vec![true; n] };
        assert_eq!(masked_occupancy_loss(&labels, &logits, &all, &w).unwrap().0, occupancy_loss(&logits, &labels, None, &w).unwrap().0);
        assert_eq!(masked_occupancy_loss(&labels, &logits, &OccMask { m: vec![false; n] }, &w).unwrap().0.total, 0.0);
        let half = OccMask { m: (0..n).map(|i| i < n / 2).collect() };
        let cropped = Tensor::from_fn(&[3, n / 2], |i| logits.data()[(i / (n / 2)) * n + i % (n / 2)]);
        let a = masked_occupancy_loss(&labels, &logits, &half, &w).unwrap().0.total;
        let b = occupancy_loss(&cropped, &labels[..n / 2], None, &w).unwrap().0.total;
        assert!((a - b).abs() < 1e-12);
    }
}
