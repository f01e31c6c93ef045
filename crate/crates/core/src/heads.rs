//! Occupancy and center-based detection heads, target encoding, box
//! decoding and point-query readout.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec3, VoxelGridSpec};
use crate::numcore::layers::{Conv2d, Linear};
use crate::numcore::sample::stencil3;
use crate::numcore::{nn, Module, Param, Real, Rng, Tensor};

/// Label returned for points outside the grid.
pub const SENTINEL: u16 = u16::MAX;
/// Regression channels: dx, dy, z, log l, log w, log h, sin yaw, cos yaw, vx, vy.
pub const REG_CHANNELS: usize = 10;
/// Heatmap bias at initialization, `sigmoid(-2.19) ≈ 0.1`.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;
pub const GAUSSIAN_SIGMA: f64 = 0.5;
pub const GAUSSIAN_RADIUS: usize = 1;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// `(l, w, h)`: extent along the heading, across it, and vertical.
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: [f64; 2],
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) || !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::Config(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    /// Box-frame coordinates of a world point.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a] + tol)
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let l = [
                if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0],
                if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1],
                if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2],
            ];
            *o = [
                self.center[0] + c * l[0] - s * l[1],
                self.center[1] + s * l[0] + c * l[1],
                self.center[2] + l[2],
            ];
        }
        out
    }
}

/// Per-voxel class ids in grid order (`(x·Y + y)·Z + z`), `0 = free`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub classes: usize,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, classes: usize) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("OccupancyGrid", format!("{} labels for {dims:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::UnknownClass(bad as usize));
        }
        Ok(OccupancyGrid { dims, labels, classes })
    }

    pub fn empty(dims: [usize; 3], classes: usize) -> Self {
        OccupancyGrid { dims, labels: vec![0; dims.iter().product()], classes }
    }
}

/// Two pointwise layers `C → C_mid → K_occ` with a relu between.
#[derive(Clone, Debug)]
pub struct OccHead<S: Real> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Real> OccHead<S> {
    pub fn new(c: usize, c_mid: usize, classes: usize, rng: &mut Rng) -> Self {
        OccHead {
            fc1: Linear::new("occ.fc1", c, c_mid, true, rng),
            fc2: Linear::new("occ.fc2", c_mid, classes, true, rng),
        }
    }

    /// `v: C×X×Y×Z` → logits `K×X×Y×Z` plus the hidden pre-activation.
    pub fn forward(&self, v: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let h = self.fc1.forward(v)?;
        Ok((self.fc2.forward(&nn::relu(&h))?, h))
    }

    pub fn backward(&mut self, v: &Tensor<S>, h: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
        let gr = self.fc2.backward(&nn::relu(h), g);
        self.fc1.backward(v, &nn::relu_backward(h, &gr))
    }
}

impl<S: Real> Module<S> for OccHead<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

pub fn occ_head_forward<S: Real>(v: &Tensor<S>, p: &OccHead<S>) -> Result<Tensor<S>> {
    Ok(p.forward(v)?.0)
}

/// Center heatmap and box regression from BEV features.
#[derive(Clone, Debug)]
pub struct DetHead<S: Real> {
    pub heat: Conv2d<S>,
    pub reg: Conv2d<S>,
}

impl<S: Real> DetHead<S> {
    pub fn new(c: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut heat = Conv2d::new("det.heat", c, classes, 3, 1, rng);
        heat.b.value.fill(S::of(HEATMAP_PRIOR_BIAS));
        DetHead { heat, reg: Conv2d::new("det.reg", c, REG_CHANNELS, 3, 1, rng) }
    }

    /// `b: C×X×Y` → `(sigmoid heatmap K×X×Y, regression 10×X×Y)`.
    pub fn forward(&self, b: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((nn::sigmoid(&self.heat.forward(b)?), self.reg.forward(b)?))
    }

    pub fn backward(&mut self, b: &Tensor<S>, heatmap: &Tensor<S>, g_heat: &Tensor<S>, g_reg: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = self.heat.backward(b, &nn::sigmoid_backward(heatmap, g_heat))?;
        g.add_assign(&self.reg.backward(b, g_reg)?);
        Ok(g)
    }
}

impl<S: Real> Module<S> for DetHead<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.heat.visit_params(f);
        self.reg.visit_params(f);
    }
}

pub fn det_head_forward<S: Real>(b: &Tensor<S>, p: &DetHead<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    p.forward(b)
}

/// BEV cell containing a box center, if inside the grid footprint.
pub fn center_cell(grid: &VoxelGridSpec, c: Vec3) -> Option<(usize, usize)> {
    let mut idx = [0usize; 2];
    for a in 0..2 {
        let f = (c[a] - grid.origin[a]) / grid.voxel_size[a];
        if !(f >= 0.0 && f < grid.dims[a] as f64) {
            return None;
        }
        idx[a] = f as usize;
    }
    Some((idx[0], idx[1]))
}

/// Dense training targets for the detection head.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// `K×X×Y` Gaussian splats with exact 1.0 peaks.
    pub heatmap: Tensor<f64>,
    /// One `(cell, class, regression vector)` per encoded box.
    pub centers: Vec<((usize, usize), usize, [f64; REG_CHANNELS])>,
    /// Boxes whose center lies outside the BEV footprint.
    pub skipped: usize,
}

/// Regression vector of `b` relative to the BEV cell `(ix, iy)`.
pub fn encode_box(b: &Box3D, grid: &VoxelGridSpec, cell: (usize, usize)) -> [f64; REG_CHANNELS] {
    let cc = grid.cell_center([cell.0, cell.1, 0]);
    [
        (b.center[0] - cc[0]) / grid.voxel_size[0],
        (b.center[1] - cc[1]) / grid.voxel_size[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

pub fn encode_targets(boxes: &[Box3D], grid: &VoxelGridSpec, classes: usize) -> Result<DetTargets> {
    let [x, y, _] = grid.dims;
    let mut heatmap = Tensor::zeros(&[classes, x, y]);
    let mut centers = Vec::new();
    let mut skipped = 0;
    let r = GAUSSIAN_RADIUS as isize;
    for b in boxes {
        if b.class_id >= classes {
            return Err(Error::UnknownClass(b.class_id));
        }
        let Some((ix, iy)) = center_cell(grid, b.center) else {
            skipped += 1;
            continue;
        };
        for dx in -r..=r {
            for dy in -r..=r {
                let (px, py) = (ix as isize + dx, iy as isize + dy);
                if px < 0 || py < 0 || px >= x as isize || py >= y as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
                let i = [b.class_id, px as usize, py as usize];
                if g > heatmap.at(&i) {
                    heatmap.set(&i, g);
                }
            }
        }
        centers.push(((ix, iy), b.class_id, encode_box(b, grid, (ix, iy))));
    }
    Ok(DetTargets { heatmap, centers, skipped })
}

/// Peaks of the heatmap (≥ every 3×3 neighbor of the same class) with
/// score ≥ `score_thresh`, best first. Equal scores are ordered by lowest
/// `(y, x)`, then class.
pub fn decode_boxes<S: Real>(
    heatmap: &Tensor<S>,
    regmap: &Tensor<S>,
    grid: &VoxelGridSpec,
    score_thresh: f64,
    top_k: usize,
) -> Result<Vec<Box3D>> {
    let [k, x, y] = *heatmap.dims() else {
        return Err(Error::shape("decode_boxes", format!("heatmap {:?}", heatmap.dims())));
    };
    if regmap.dims() != [REG_CHANNELS, x, y] {
        return Err(Error::shape("decode_boxes", format!("regmap {:?}", regmap.dims())));
    }
    let h = |c: usize, i: usize, j: usize| heatmap.data()[(c * x + i) * y + j].f64();
    let mut peaks = Vec::new();
    for c in 0..k {
        for i in 0..x {
            for j in 0..y {
                let s = h(c, i, j);
                if s < score_thresh {
                    continue;
                }
                let mut is_max = true;
                for ni in i.saturating_sub(1)..=(i + 1).min(x - 1) {
                    for nj in j.saturating_sub(1)..=(j + 1).min(y - 1) {
                        if h(c, ni, nj) > s {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    peaks.push((s, j, i, c));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    peaks.truncate(top_k);
    let r = |ch: usize, i: usize, j: usize| regmap.data()[(ch * x + i) * y + j].f64();
    Ok(peaks
        .into_iter()
        .map(|(score, j, i, c)| {
            let cc = grid.cell_center([i, j, 0]);
            Box3D {
                center: [
                    cc[0] + r(0, i, j) * grid.voxel_size[0],
                    cc[1] + r(1, i, j) * grid.voxel_size[1],
                    r(2, i, j),
                ],
                size: [r(3, i, j).exp(), r(4, i, j).exp(), r(5, i, j).exp()],
                yaw: r(6, i, j).atan2(r(7, i, j)),
                velocity: [r(8, i, j), r(9, i, j)],
                class_id: c,
                score,
            }
        })
        .collect())
}

/// Argmax class of trilinearly interpolated logits at world points.
/// Points outside the grid's physical extent get [`SENTINEL`]; points in the
/// outer half-voxel shell are clamped onto the lattice of cell centers.
pub fn query_point_classes<S: Real>(logits: &Tensor<S>, points: &[Vec3], grid: &VoxelGridSpec) -> Result<Vec<u16>> {
    let k = logits.dims()[0];
    if logits.dims()[1..] != grid.dims {
        return Err(Error::GridMismatch(format!("logits {:?} vs grid {:?}", logits.dims(), grid.dims)));
    }
    let n = grid.num_cells();
    let hi = grid.extent_max();
    Ok(points
        .iter()
        .map(|&p| {
            if (0..3).any(|a| !(p[a] >= grid.origin[a] && p[a] <= hi[a])) {
                return SENTINEL;
            }
            let f = grid.coord_to_index(p);
            let idx = [0, 1, 2].map(|a| f[a].clamp(0.0, (grid.dims[a] - 1) as f64));
            let st = stencil3(idx, grid.dims).expect("clamped index is on the lattice");
            let mut best = (f64::NEG_INFINITY, 0usize);
            for c in 0..k {
                let v: f64 = (0..8).map(|j| st.w[j].f64() * logits.data()[c * n + st.idx[j]].f64()).sum();
                if v > best.0 {
                    best = (v, c);
                }
            }
            best.1 as u16
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{gradcheck_module, GradCheck};

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec { origin: [-2.0, -2.0, 0.0], voxel_size: [0.5, 0.5, 0.5], dims: [8, 8, 4] }
    }

    fn rand_t(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn occ_head_is_pointwise() {
        let mut rng = Rng::new(0);
        let head = OccHead::<f64>::new(3, 5, 4, &mut rng);
        let v = rand_t(&mut rng, &[3, 2, 2, 2]);
        // Swap cells 1 and 6 in every channel.
        let perm = |t: &Tensor<f64>| {
            Tensor::from_fn(t.dims(), |i| {
                let (c, j) = (i / 8, i % 8);
                let j = match j { 1 => 6, 6 => 1, o => o };
                t.data()[c * 8 + j]
            })
        };
        let a = perm(&occ_head_forward(&v, &head).unwrap());
        let b = occ_head_forward(&perm(&v), &head).unwrap();
        assert_eq!(a, b);
        let mut z = head.clone();
        z.fc2.w.value.fill(0.0);
        z.fc2.b.as_mut().unwrap().value = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let l = occ_head_forward(&v, &z).unwrap();
        assert!((0..32).all(|i| l.data()[i] == [1.0, -2.0, 0.5, 3.0][i / 8]));
    }

    #[test]
    fn det_head_range_and_zero_weights() {
        let mut rng = Rng::new(1);
        let mut head = DetHead::<f64>::new(3, 2, &mut rng);
        let b = rand_t(&mut rng, &[3, 4, 4]).map(|v| 4.0 * v);
        let (h, r) = det_head_forward(&b, &head).unwrap();
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(r.dims(), &[10, 4, 4]);
        head.heat.w.value.fill(0.0);
        head.heat.b.value.fill(0.0);
        assert!(head.forward(&b).unwrap().0.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_gradchecks() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let head = OccHead::<f64>::new(3, 4, 3, &mut rng);
            let v = rand_t(&mut rng, &[3, 2, 2, 2]);
            let rep = gradcheck_module(
                &GradCheck::new(seed).step(1e-6),
                head,
                &[v],
                |m, x| m.forward(&x[0]).unwrap().0,
                |m, x, g| {
                    let (_, h) = m.forward(&x[0]).unwrap();
                    vec![m.backward(&x[0], &h, g)]
                },
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
            let head = DetHead::<f64>::new(2, 2, &mut rng);
            let b = rand_t(&mut rng, &[2, 3, 3]);
            let rep = gradcheck_module(
                &GradCheck::new(seed),
                head,
                &[b],
                |m, x| {
                    let (h, r) = m.forward(&x[0]).unwrap();
                    Tensor::concat0(&[&h, &r]).unwrap()
                },
                |m, x, g| {
                    let (h, _) = m.forward(&x[0]).unwrap();
                    vec![m.backward(&x[0], &h, &g.narrow0(0, 2), &g.narrow0(2, 12)).unwrap()]
                },
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        }
    }

    fn sample_box() -> Box3D {
        Box3D { center: [0.37, -0.81, 0.6], size: [1.2, 0.7, 0.9], yaw: 0.4, velocity: [0.3, -0.2], class_id: 1, score: 1.0 }
    }

    fn dense_reg(t: &DetTargets, grid: &VoxelGridSpec) -> Tensor<f64> {
        let mut reg = Tensor::zeros(&[REG_CHANNELS, grid.dims[0], grid.dims[1]]);
        for &((i, j), _, r) in &t.centers {
            for (ch, &v) in r.iter().enumerate() {
                reg.set(&[ch, i, j], v);
            }
        }
        reg
    }

    #[test]
    fn encode_decode_round_trip() {
        let g = grid();
        let b = sample_box();
        let t = encode_targets(std::slice::from_ref(&b), &g, 2).unwrap();
        let out = decode_boxes(&t.heatmap, &dense_reg(&t, &g), &g, 0.5, 10).unwrap();
        assert_eq!(out.len(), 1);
        let d = &out[0];
        assert_eq!(d.class_id, 1);
        assert_eq!(d.score, 1.0);
        for a in 0..3 {
            assert!((d.center[a] - b.center[a]).abs() < 1e-12);
            assert!((d.size[a] - b.size[a]).abs() < 1e-12);
        }
        assert!((d.yaw - b.yaw).abs() < 1e-12);
        assert_eq!(d.velocity, b.velocity);
    }

    #[test]
    fn decode_threshold_and_tie_break() {
        let g = grid();
        let reg = Tensor::<f64>::zeros(&[10, 8, 8]);
        let mut h = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(decode_boxes(&h, &reg, &g, 0.1, 5).unwrap().is_empty());
        h.set(&[0, 5, 1], 0.9);
        h.set(&[0, 1, 6], 0.9);
        let out = decode_boxes(&h, &reg, &g, 0.1, 1).unwrap();
        // (y, x) = (1, 5) precedes (6, 1).
        assert_eq!(out[0].center[0], g.cell_center([5, 1, 0])[0]);
    }

    #[test]
    fn point_queries() {
        let g = grid();
        let mut rng = Rng::new(3);
        let logits = rand_t(&mut rng, &[4, 8, 8, 4]);
        let n = g.num_cells();
        for f in 0..n {
            let want = (0..4).max_by(|&a, &b| logits.data()[a * n + f].total_cmp(&logits.data()[b * n + f])).unwrap();
            let got = query_point_classes(&logits, &[g.cell_center(g.unflat(f))], &g).unwrap()[0];
            assert_eq!(got as usize, want);
        }
        assert_eq!(query_point_classes(&logits, &[[10.0, 0.0, 0.0]], &g).unwrap(), vec![SENTINEL]);
        // Two neighbors with opposing one-hot logits; the 0.3 point leans to class 0.
        let mut l = Tensor::<f64>::zeros(&[2, 8, 8, 4]);
        let (a, b) = (g.flat([2, 3, 1]), g.flat([3, 3, 1]));
        l.data_mut()[a] = 1.0;
        l.data_mut()[n + b] = 1.0;
        let pa = g.cell_center([2, 3, 1]);
        let p = [pa[0] + 0.3 * 0.5, pa[1], pa[2]];
        let oracle = [0.7 * 1.0, 0.3 * 1.0];
        let want = if oracle[0] > oracle[1] { 0 } else { 1 };
        assert_eq!(query_point_classes(&l, &[p], &g).unwrap()[0], want);
    }
}
