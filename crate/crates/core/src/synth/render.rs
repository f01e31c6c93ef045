//! Exact voxel traversal of camera rays.

use crate::geometry::{CameraModel, Vec3, VoxelGridSpec};
use crate::heads::OccupancyGrid;

/// Per-camera images in row-major `H×W` order. Depth is camera-frame z in
/// meters, 0 where `valid` is false; `semantic` is 0 there too.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub semantic: Vec<u16>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter of the entry point into the hit voxel.
    pub t: f64,
    pub cell: [usize; 3],
    pub label: u16,
}

/// Ray parameter interval inside the grid box, if any.
fn clip(grid: &VoxelGridSpec, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let hi = grid.extent_max();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < grid.origin[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let ta = (grid.origin[a] - o[a]) / d[a];
        let tb = (hi[a] - o[a]) / d[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Walks the cells pierced by `o + t·d`, `t ≥ 0`, in order, calling
/// `visit(t_entry, cell)` until it returns `true`.
fn traverse(grid: &VoxelGridSpec, o: Vec3, d: Vec3, mut visit: impl FnMut(f64, [usize; 3]) -> bool) {
    let Some((t0, t1)) = clip(grid, o, d) else { return };
    let mut cell = [0usize; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = o[a] + t0 * d[a];
        let g = ((p - grid.origin[a]) / grid.voxel_size[a]).floor();
        cell[a] = g.clamp(0.0, (grid.dims[a] - 1) as f64) as usize;
        if d[a] != 0.0 {
            step[a] = if d[a] > 0.0 { 1 } else { -1 };
            let edge = cell[a] as f64 + if d[a] > 0.0 { 1.0 } else { 0.0 };
            t_max[a] = (grid.origin[a] + edge * grid.voxel_size[a] - o[a]) / d[a];
            t_delta[a] = grid.voxel_size[a] / d[a].abs();
        }
    }
    let mut t = t0;
    while t <= t1 {
        if visit(t, cell) {
            return;
        }
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).expect("three axes");
        t = t_max[a];
        let next = cell[a] as i64 + step[a];
        if next < 0 || next >= grid.dims[a] as i64 {
            return;
        }
        cell[a] = next as usize;
        t_max[a] += t_delta[a];
    }
}

/// First occupied voxel along the ray.
pub fn march_ray(occ: &OccupancyGrid, grid: &VoxelGridSpec, o: Vec3, d: Vec3) -> Option<Hit> {
    let mut hit = None;
    traverse(grid, o, d, |t, cell| {
        let label = occ.labels[grid.flat(cell)];
        if label != 0 {
            hit = Some(Hit { t, cell, label });
        }
        label != 0
    });
    hit
}

/// Brute-force reference: first sample `t = k·step` inside an occupied voxel.
pub fn march_fine(occ: &OccupancyGrid, grid: &VoxelGridSpec, o: Vec3, d: Vec3, step: f64) -> Option<(f64, u16)> {
    let (_, t1) = clip(grid, o, d)?;
    let mut k = 0u64;
    loop {
        let t = k as f64 * step;
        if t > t1 + step {
            return None;
        }
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        if let Some(c) = grid.cell_of(p) {
            let l = occ.labels[grid.flat(c)];
            if l != 0 {
                return Some((t, l));
            }
        }
        k += 1;
    }
}

pub fn render_view(occ: &OccupancyGrid, grid: &VoxelGridSpec, cam: &CameraModel) -> Render {
    let (w, h) = cam.image_size;
    let o = cam.center();
    let mut r = Render { width: w, height: h, depth: vec![0.0; w * h], semantic: vec![0; w * h], valid: vec![false; w * h] };
    for v in 0..h {
        for u in 0..w {
            let d = cam.ray_direction(u as f64, v as f64);
            if let Some(hit) = march_ray(occ, grid, o, d) {
                if hit.t > 0.0 {
                    let i = v * w + u;
                    r.depth[i] = hit.t;
                    r.semantic[i] = hit.label;
                    r.valid[i] = true;
                }
            }
        }
    }
    r
}

pub fn render_views(occ: &OccupancyGrid, grid: &VoxelGridSpec, cams: &[CameraModel]) -> Vec<Render> {
    cams.iter().map(|c| render_view(occ, grid, c)).collect()
}

/// Voxels seen by some pixel ray: every traversed free cell plus the first
/// occupied one.
pub fn visibility_mask(occ: &OccupancyGrid, grid: &VoxelGridSpec, cams: &[CameraModel]) -> Vec<bool> {
    let mut seen = vec![false; grid.num_cells()];
    for cam in cams {
        let o = cam.center();
        let (w, h) = cam.image_size;
        for v in 0..h {
            for u in 0..w {
                traverse(grid, o, cam.ray_direction(u as f64, v as f64), |_, cell| {
                    let f = grid.flat(cell);
                    seen[f] = true;
                    occ.labels[f] != 0
                });
            }
        }
    }
    seen
}
