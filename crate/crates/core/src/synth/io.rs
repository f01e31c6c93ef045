//! Scene directories: `scene.json` plus UVTF payloads for the occupancy
//! labels and the renders.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{palette, Render, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::heads::{Box3D, OccupancyGrid};
use crate::numcore::uvtf::{read_file, write_file, UvtfData};
use crate::numcore::Tensor;

pub const SCENE_FILE: &str = "scene.json";
const OCC_FILE: &str = "occupancy.uvtf";
const RENDER_FILE: &str = "renders.uvtf";

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    name: String,
    color: [u8; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    spec: SceneSpec,
    cameras: Vec<CameraModel>,
    boxes: Vec<Box3D>,
    classes: Vec<ClassEntry>,
    occupancy: String,
    renders: String,
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = scene.spec.class_names();
    let doc = SceneDoc {
        spec: scene.spec.clone(),
        cameras: scene.cams.clone(),
        boxes: scene.boxes.clone(),
        classes: names.into_iter().zip(palette(scene.occ.classes)).map(|(name, color)| ClassEntry { name, color }).collect(),
        occupancy: OCC_FILE.into(),
        renders: RENDER_FILE.into(),
    };
    let json = dir.join(SCENE_FILE);
    fs::write(&json, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&json, e))?;
    write_file(&dir.join(OCC_FILE), &[UvtfData::U16 { dims: scene.occ.dims.to_vec(), data: scene.occ.labels.clone() }])?;
    let (n, first) = (scene.renders.len(), scene.renders.first());
    let (h, w) = first.map_or((0, 0), |r| (r.height, r.width));
    let dims = vec![n, h, w];
    let depth: Vec<f32> = scene.renders.iter().flat_map(|r| r.depth.iter().map(|&d| d as f32)).collect();
    let semantic = scene.renders.iter().flat_map(|r| r.semantic.iter().copied()).collect();
    let valid = scene.renders.iter().flat_map(|r| r.valid.iter().map(|&v| v as u8)).collect();
    write_file(
        &dir.join(RENDER_FILE),
        &[
            UvtfData::F32(Tensor::from_vec(&dims, depth)?),
            UvtfData::U16 { dims: dims.clone(), data: semantic },
            UvtfData::U8 { dims, data: valid },
        ],
    )
}

/// Loads a directory written by [`save_scene`]. Depths come back at f32
/// precision.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let json = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let doc: SceneDoc = serde_json::from_str(&text)?;
    doc.spec.validate()?;
    let mut occ_recs = read_file(&dir.join(&doc.occupancy))?.into_iter();
    let (dims, labels) = occ_recs.next().ok_or_else(|| Error::Format("empty occupancy file".into()))?.into_u16()?;
    if dims != doc.spec.grid.dims {
        return Err(Error::GridMismatch(format!("occupancy {dims:?} vs spec {:?}", doc.spec.grid.dims)));
    }
    let occ = OccupancyGrid::new(doc.spec.grid.dims, labels, doc.spec.occ_classes())?;
    let mut recs = read_file(&dir.join(&doc.renders))?.into_iter();
    let mut next = || recs.next().ok_or_else(|| Error::Format("truncated render file".into()));
    let depth = next()?.into_f32()?;
    let (sd, semantic) = next()?.into_u16()?;
    let (vd, valid) = next()?.into_u8()?;
    let rd = depth.dims().to_vec();
    if rd.len() != 3 || sd != rd || vd != rd || rd[0] != doc.cameras.len() {
        return Err(Error::Format(format!("render dims {rd:?} for {} cameras", doc.cameras.len())));
    }
    let (h, w) = (rd[1], rd[2]);
    let plane = h * w;
    let renders = (0..rd[0])
        .map(|n| Render {
            width: w,
            height: h,
            depth: depth.data()[n * plane..(n + 1) * plane].iter().map(|&d| d as f64).collect(),
            semantic: semantic[n * plane..(n + 1) * plane].to_vec(),
            valid: valid[n * plane..(n + 1) * plane].iter().map(|&v| v != 0).collect(),
        })
        .collect();
    Ok(Scene { spec: doc.spec, occ, boxes: doc.boxes, cams: doc.cameras, renders })
}
