//! PPM (P6) and PGM (P5) renders of predictions and ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use super::eval::Prediction;
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::heads::Box3D;
use crate::synth::{palette, Scene};

/// Pixels per BEV cell in the box overlay.
const BOX_SCALE: usize = 8;
const GT_COLOR: [u8; 3] = [0, 220, 0];
const PRED_COLOR: [u8; 3] = [230, 30, 30];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
        let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

pub fn to_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// BEV images put +x to the right and +y up.
fn bev_pixel(ix: usize, iy: usize, dims: [usize; 3]) -> (usize, usize) {
    (ix, dims[1] - 1 - iy)
}

pub fn occupancy_slice(labels: &[u16], grid: &VoxelGridSpec, z: usize, colors: &[[u8; 3]]) -> Image {
    let [x, y, _] = grid.dims;
    let mut img = Image::new(x, y);
    for ix in 0..x {
        for iy in 0..y {
            let (px, py) = bev_pixel(ix, iy, grid.dims);
            img.set(px as i64, py as i64, colors[labels[grid.flat([ix, iy, z])] as usize % colors.len()]);
        }
    }
    img
}

/// Max over classes of a `K×X×Y` heatmap, as gray levels.
pub fn heatmap_gray(heat: &[f32], k: usize, dims: [usize; 3]) -> Vec<u8> {
    let [x, y, _] = dims;
    let mut g = vec![0u8; x * y];
    for ix in 0..x {
        for iy in 0..y {
            let m = (0..k).map(|c| heat[(c * x + ix) * y + iy]).fold(0.0f32, f32::max);
            let (px, py) = bev_pixel(ix, iy, dims);
            g[py * x + px] = (m.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    g
}

fn draw_box(img: &mut Image, b: &Box3D, grid: &VoxelGridSpec, c: [u8; 3]) {
    let (s, co) = b.yaw.sin_cos();
    let (hl, hw) = (0.5 * b.size[0], 0.5 * b.size[1]);
    let to_px = |dx: f64, dy: f64| {
        let wx = b.center[0] + co * dx - s * dy;
        let wy = b.center[1] + s * dx + co * dy;
        let fx = (wx - grid.origin[0]) / grid.voxel_size[0] * BOX_SCALE as f64;
        let fy = (wy - grid.origin[1]) / grid.voxel_size[1] * BOX_SCALE as f64;
        (fx.floor() as i64, (grid.dims[1] * BOX_SCALE) as i64 - 1 - fy.floor() as i64)
    };
    let pts = [to_px(hl, hw), to_px(-hl, hw), to_px(-hl, -hw), to_px(hl, -hw)];
    for i in 0..4 {
        img.line(pts[i], pts[(i + 1) % 4], c);
    }
    img.line(to_px(0.0, 0.0), to_px(hl, 0.0), c);
}

/// Top-down view of the ground-truth occupancy with ground-truth (green)
/// and predicted (red) box footprints.
pub fn box_overlay(scene: &Scene, preds: &[Box3D]) -> Image {
    let g = &scene.spec.grid;
    let colors = palette(scene.occ.classes);
    let [x, y, z] = g.dims;
    let mut img = Image::new(x * BOX_SCALE, y * BOX_SCALE);
    for ix in 0..x {
        for iy in 0..y {
            let top = (0..z).rev().map(|k| scene.occ.labels[g.flat([ix, iy, k])]).find(|&l| l != 0).unwrap_or(0);
            let c = colors[top as usize].map(|v| v / 2);
            let (px, py) = bev_pixel(ix, iy, g.dims);
            for dx in 0..BOX_SCALE {
                for dy in 0..BOX_SCALE {
                    img.set((px * BOX_SCALE + dx) as i64, (py * BOX_SCALE + dy) as i64, c);
                }
            }
        }
    }
    for b in &scene.boxes {
        draw_box(&mut img, b, g, GT_COLOR);
    }
    for b in preds {
        draw_box(&mut img, b, g, PRED_COLOR);
    }
    img
}

/// Writes every render for one scene into `dir`; returns the paths.
pub fn write_renders(dir: &Path, scene: &Scene, pred: &Prediction) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &scene.spec.grid;
    let colors = palette(scene.occ.classes);
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for z in 0..g.dims[2] {
        files.push((dir.join(format!("occ_gt_z{z}.ppm")), occupancy_slice(&scene.occ.labels, g, z, &colors).to_ppm()));
        if let Some(occ) = &pred.occ {
            files.push((dir.join(format!("occ_pred_z{z}.ppm")), occupancy_slice(occ, g, z, &colors).to_ppm()));
        }
    }
    if let Some(h) = &pred.heat {
        files.push((dir.join("heatmap.pgm"), to_pgm(g.dims[0], g.dims[1], &heatmap_gray(h.data(), h.dims()[0], g.dims))));
    }
    files.push((dir.join("boxes.ppm"), box_overlay(scene, &pred.boxes).to_ppm()));
    for (p, bytes) in &files {
        fs::write(p, bytes).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_and_sizes() {
        let mut img = Image::new(4, 3);
        img.line((0, 0), (3, 2), [255, 0, 0]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm.len(), 11 + 36);
        assert_eq!(&img.rgb[..3], &[255, 0, 0]);
        assert_eq!(&img.rgb[33..36], &[255, 0, 0]);
        let pgm = to_pgm(2, 2, &[0, 1, 2, 3]);
        assert_eq!(pgm, b"P5\n2 2\n255\n\x00\x01\x02\x03");
    }
}
