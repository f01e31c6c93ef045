//! Procedural ground truth: a ground layer with boxed cuboid objects on
//! top, an inward-facing camera ring, and exact per-pixel renders.

mod encoder;
mod io;
mod render;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::heads::{Box3D, OccupancyGrid};
use crate::numcore::Rng;

pub use encoder::{image_planes, input_channels, EncoderCache, ImageEncoder};
pub use io::{load_scene, save_scene, SCENE_FILE};
pub use render::{march_fine, march_ray, render_view, render_views, visibility_mask, Hit, Render};

/// Placement attempts per requested object before giving up.
const ATTEMPTS_PER_OBJECT: usize = 200;
/// Extra clearance between object footprints, meters.
const FOOTPRINT_GAP: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub cameras: usize,
    /// Ring radius around the grid center, meters.
    pub radius: f64,
    pub height: f64,
    /// Height of the point every camera looks at.
    pub target_height: f64,
    pub focal: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec { cameras: 4, radius: 11.0, height: 3.0, target_height: 0.5, focal: 24.0, image_size: (56, 32) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub grid: VoxelGridSpec,
    pub background_classes: usize,
    pub foreground_classes: usize,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub max_speed: f64,
    pub rig: RigSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            grid: VoxelGridSpec { origin: [-8.0, -8.0, 0.0], voxel_size: [0.5; 3], dims: [32, 32, 8] },
            background_classes: 1,
            foreground_classes: 2,
            objects: [1, 3],
            length_range: [1.5, 3.0],
            width_range: [1.0, 2.0],
            height_range: [1.0, 2.0],
            max_speed: 1.0,
            rig: RigSpec::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if self.background_classes == 0 || self.foreground_classes == 0 {
            return Err(Error::Config("need at least one background and one foreground class".into()));
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::Config(format!("object range {:?}", self.objects)));
        }
        if !(ordered(self.length_range) && ordered(self.width_range) && ordered(self.height_range)) {
            return Err(Error::Config("object size ranges must be positive and ordered".into()));
        }
        if self.rig.cameras == 0 || self.rig.image_size.0 == 0 || self.rig.image_size.1 == 0 || !(self.rig.focal > 0.0) {
            return Err(Error::Config(format!("bad camera rig {:?}", self.rig)));
        }
        if self.grid.dims[2] < 2 {
            return Err(Error::Config("grid needs room above the ground layer".into()));
        }
        Ok(())
    }

    /// `K_occ = 1 + K_bg + K_fg`, label 0 being free space.
    pub fn occ_classes(&self) -> usize {
        1 + self.background_classes + self.foreground_classes
    }

    /// Occupancy label of detection class `c`.
    pub fn fg_label(&self, c: usize) -> u16 {
        (1 + self.background_classes + c) as u16
    }

    /// Detection class of occupancy label `l`, if it is a foreground label.
    pub fn det_class(&self, l: u16) -> Option<usize> {
        let l = l as usize;
        (l > self.background_classes && l < self.occ_classes()).then(|| l - 1 - self.background_classes)
    }

    pub fn class_names(&self) -> Vec<String> {
        const BG: [&str; 4] = ["ground", "sidewalk", "terrain", "vegetation"];
        const FG: [&str; 5] = ["car", "pedestrian", "truck", "bicycle", "barrier"];
        let mut v = vec!["free".to_string()];
        v.extend((0..self.background_classes).map(|i| BG.get(i).map_or(format!("background{i}"), |s| s.to_string())));
        v.extend((0..self.foreground_classes).map(|i| FG.get(i).map_or(format!("object{i}"), |s| s.to_string())));
        v
    }
}

/// Fixed RGB palette indexed by occupancy label.
pub fn palette(classes: usize) -> Vec<[u8; 3]> {
    const P: [[u8; 3]; 8] = [
        [0, 0, 0],
        [128, 64, 128],
        [0, 0, 230],
        [220, 20, 60],
        [255, 158, 0],
        [47, 79, 79],
        [112, 128, 144],
        [0, 175, 0],
    ];
    (0..classes).map(|i| P[i % P.len()]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub occ: OccupancyGrid,
    pub boxes: Vec<Box3D>,
    pub cams: Vec<CameraModel>,
    pub renders: Vec<Render>,
}

/// Inward-facing cameras evenly spaced on a ring around the grid center.
pub fn camera_ring(grid: &VoxelGridSpec, rig: &RigSpec) -> Vec<CameraModel> {
    let c = grid.center();
    (0..rig.cameras)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / rig.cameras as f64;
            let pos = [c[0] + rig.radius * a.cos(), c[1] + rig.radius * a.sin(), rig.height];
            CameraModel::look_at(pos, [c[0], c[1], rig.target_height], rig.focal, rig.focal, rig.image_size)
        })
        .collect()
}

/// Labels every voxel whose center lies inside `b`; returns how many.
pub fn rasterize_box(occ: &mut OccupancyGrid, grid: &VoxelGridSpec, b: &Box3D, label: u16) -> usize {
    let mut n = 0;
    for f in 0..grid.num_cells() {
        if b.contains(grid.cell_center(grid.unflat(f)), 0.0) {
            occ.labels[f] = label;
            n += 1;
        }
    }
    n
}

/// Ground layer (z index 0) split into `K_bg` stripes along x.
pub fn ground(spec: &SceneSpec) -> OccupancyGrid {
    let g = &spec.grid;
    let mut occ = OccupancyGrid::empty(g.dims, spec.occ_classes());
    for ix in 0..g.dims[0] {
        let label = 1 + (ix * spec.background_classes / g.dims[0]) as u16;
        for iy in 0..g.dims[1] {
            occ.labels[g.flat([ix, iy, 0])] = label;
        }
    }
    occ
}

fn footprint_radius(b: &Box3D) -> f64 {
    0.5 * b.size[0].hypot(b.size[1])
}

fn propose(rng: &mut Rng, spec: &SceneSpec) -> Box3D {
    let g = &spec.grid;
    let hi = g.extent_max();
    let l = rng.uniform_in(spec.length_range[0], spec.length_range[1]);
    let w = rng.uniform_in(spec.width_range[0], spec.width_range[1]);
    let h = rng.uniform_in(spec.height_range[0], spec.height_range[1]);
    let x = rng.uniform_in(g.origin[0], hi[0]);
    let y = rng.uniform_in(g.origin[1], hi[1]);
    let yaw = rng.uniform_in(-PI, PI);
    let class_id = rng.below(spec.foreground_classes);
    let speed = rng.uniform_in(0.0, spec.max_speed);
    let heading = rng.uniform_in(-PI, PI);
    let floor = g.origin[2] + g.voxel_size[2];
    Box3D {
        center: [x, y, floor + 0.5 * h],
        size: [l, w, h],
        yaw,
        velocity: [speed * heading.cos(), speed * heading.sin()],
        class_id,
        score: 1.0,
    }
}

fn fits(b: &Box3D, g: &VoxelGridSpec) -> bool {
    let hi = g.extent_max();
    b.corners().iter().all(|c| (0..3).all(|a| c[a] >= g.origin[a] && c[a] <= hi[a]))
}

/// Ground plus non-overlapping cuboids. Proposals whose footprint circle
/// touches an earlier object, leaves the grid, or covers no voxel center
/// are rejected, so every object voxel belongs to exactly one box.
pub fn generate_scene(rng: &mut Rng, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let g = &spec.grid;
    let mut occ = ground(spec);
    let count = spec.objects[0] + rng.below(spec.objects[1] - spec.objects[0] + 1);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        if attempts == ATTEMPTS_PER_OBJECT * count.max(1) {
            return Err(Error::Config(format!("could not place {count} objects in grid {:?}", g.dims)));
        }
        attempts += 1;
        let b = propose(rng, spec);
        let clear = boxes.iter().all(|o| {
            let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
            d > footprint_radius(o) + footprint_radius(&b) + FOOTPRINT_GAP
        });
        if !clear || !fits(&b, g) {
            continue;
        }
        let mut trial = occ.clone();
        if rasterize_box(&mut trial, g, &b, spec.fg_label(b.class_id)) == 0 {
            continue;
        }
        occ = trial;
        boxes.push(b);
    }
    let cams = camera_ring(g, &spec.rig);
    let renders = render_views(&occ, g, &cams);
    Ok(Scene { spec: spec.clone(), occ, boxes, cams, renders })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(objects: [usize; 2]) -> SceneSpec {
        SceneSpec { objects, ..SceneSpec::default() }
    }

    #[test]
    fn zero_objects_is_ground_only() {
        let s = generate_scene(&mut Rng::new(0), &spec([0, 0])).unwrap();
        assert!(s.boxes.is_empty());
        let g = &s.spec.grid;
        for f in 0..g.num_cells() {
            assert_eq!(s.occ.labels[f] != 0, g.unflat(f)[2] == 0);
        }
    }

    #[test]
    fn unit_cube_rasterizes_to_known_cells() {
        let sp = spec([0, 0]);
        let g = &sp.grid;
        let mut occ = OccupancyGrid::empty(g.dims, sp.occ_classes());
        // Cube centered on the shared corner of cells (15..17, 15..17, 2..4).
        let b = Box3D { center: [0.0, 0.0, 1.5], size: [1.0; 3], yaw: 0.0, velocity: [0.0; 2], class_id: 0, score: 1.0 };
        assert_eq!(rasterize_box(&mut occ, g, &b, 2), 8);
        for f in 0..g.num_cells() {
            let [x, y, z] = g.unflat(f);
            let inside = (15..17).contains(&x) && (15..17).contains(&y) && (2..4).contains(&z);
            assert_eq!(occ.labels[f] == 2, inside, "cell {:?}", [x, y, z]);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&mut Rng::new(11), &SceneSpec::default()).unwrap();
        let b = generate_scene(&mut Rng::new(11), &SceneSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_count_errors() {
        let s = SceneSpec { objects: [40, 40], length_range: [6.0, 6.0], width_range: [6.0, 6.0], ..SceneSpec::default() };
        assert!(generate_scene(&mut Rng::new(0), &s).is_err());
    }

    #[test]
    fn foreground_voxels_lie_in_their_box() {
        let sp = spec([3, 3]);
        let mut rng = Rng::new(5);
        let mut checked = 0;
        for _ in 0..4 {
            let s = generate_scene(&mut rng, &sp).unwrap();
            let g = &sp.grid;
            let fg: Vec<usize> = (0..g.num_cells()).filter(|&f| sp.det_class(s.occ.labels[f]).is_some()).collect();
            for _ in 0..250 {
                let f = fg[rng.below(fg.len())];
                let c = g.cell_center(g.unflat(f));
                let owners: Vec<&Box3D> = s.boxes.iter().filter(|b| b.contains(c, 0.0)).collect();
                assert_eq!(owners.len(), 1);
                assert_eq!(sp.fg_label(owners[0].class_id), s.occ.labels[f]);
                checked += 1;
            }
        }
        assert_eq!(checked, 1000);
    }

    #[test]
    fn label_helpers() {
        let sp = SceneSpec::default();
        assert_eq!(sp.occ_classes(), 4);
        assert_eq!(sp.fg_label(1), 3);
        assert_eq!(sp.det_class(3), Some(1));
        assert_eq!(sp.det_class(1), None);
        assert_eq!(sp.class_names(), ["free", "ground", "car", "pedestrian"]);
    }
}
