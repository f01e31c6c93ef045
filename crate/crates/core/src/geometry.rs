//! Pinhole cameras, the voxel-grid frame and homogeneous transforms.
//!
//! World frame = ego frame. Camera frame: x right, y down, z forward.
//! Voxel index `i` has its center at `origin + (i + 0.5) * voxel_size`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// 4×4 homogeneous transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Transform3D {
    pub m: [[f64; 4]; 4],
}

impl TryFrom<Vec<f64>> for Transform3D {
    type Error = String;
    fn try_from(v: Vec<f64>) -> std::result::Result<Self, String> {
        if v.len() != 16 {
            return Err(format!("transform needs 16 values, got {}", v.len()));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[4 * i..4 * i + 4]);
        }
        Ok(Transform3D { m })
    }
}

impl From<Transform3D> for Vec<f64> {
    fn from(t: Transform3D) -> Vec<f64> {
        t.m.iter().flatten().copied().collect()
    }
}

impl Transform3D {
    pub const IDENTITY: Transform3D = Transform3D {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    pub fn translation(t: Vec3) -> Self {
        let mut m = Self::IDENTITY;
        for a in 0..3 {
            m.m[a][3] = t[a];
        }
        m
    }

    pub fn diagonal(d: Vec3) -> Self {
        let mut m = Self::IDENTITY;
        for a in 0..3 {
            m.m[a][a] = d[a];
        }
        m
    }

    /// Rotation about +z by `theta` from its cosine and sine.
    pub fn rotation_z_cs(c: f64, s: f64) -> Self {
        let mut m = Self::IDENTITY;
        m.m[0][0] = c;
        m.m[0][1] = -s;
        m.m[1][0] = s;
        m.m[1][1] = c;
        m
    }

    pub fn rotation_z(theta: f64) -> Self {
        Self::rotation_z_cs(theta.cos(), theta.sin())
    }

    /// Rigid transform from a row-major 3×3 rotation and a translation.
    pub fn from_rt(r: [[f64; 3]; 3], t: Vec3) -> Self {
        let mut m = Self::IDENTITY;
        for i in 0..3 {
            m.m[i][..3].copy_from_slice(&r[i]);
            m.m[i][3] = t[i];
        }
        m
    }

    /// `self · rhs`.
    pub fn compose(&self, rhs: &Transform3D) -> Transform3D {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        Transform3D { m }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let mut o = [0.0; 3];
        for (i, v) in o.iter_mut().enumerate() {
            *v = self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3];
        }
        o
    }

    pub fn apply_vector(&self, p: Vec3) -> Vec3 {
        let mut o = [0.0; 3];
        for (i, v) in o.iter_mut().enumerate() {
            *v = self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2];
        }
        o
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn det3(&self) -> f64 {
        det3(&self.linear())
    }

    /// Affine inverse. Fails when the linear block is (near) singular.
    pub fn inverse(&self) -> Result<Transform3D> {
        let a = self.linear();
        let d = det3(&a);
        if d.abs() <= 1e-9 {
            return Err(Error::Config(format!("singular transform (det {d:e})")));
        }
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
            }
        }
        let t = [self.m[0][3], self.m[1][3], self.m[2][3]];
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(inv[i][0] * t[0] + inv[i][1] * t[1] + inv[i][2] * t[2]);
        }
        Ok(Transform3D::from_rt(inv, ti))
    }

    pub fn max_abs_diff(&self, other: &Transform3D) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }
}

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Pinhole camera: intrinsics `k`, world→camera transform `t_wc`, image
/// size `(width, height)` in pixels. Pixel `(u, v)` integer coordinates are
/// pixel centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    #[serde(with = "mat3_row_major")]
    pub k: [[f64; 3]; 3],
    pub t_wc: Transform3D,
    pub image_size: (usize, usize),
}

mod mat3_row_major {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[[f64; 3]; 3], s: S) -> Result<S::Ok, S::Error> {
        m.iter().flatten().copied().collect::<Vec<f64>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[[f64; 3]; 3], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 9 {
            return Err(serde::de::Error::custom("K needs 9 values"));
        }
        Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

pub const MIN_DEPTH: f64 = 1e-6;

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, t_wc: Transform3D, image_size: (usize, usize)) -> Self {
        CameraModel {
            k: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            t_wc,
            image_size,
        }
    }

    /// Camera on `position` looking at `target` with world +z up.
    pub fn look_at(position: Vec3, target: Vec3, fx: f64, fy: f64, image_size: (usize, usize)) -> Self {
        let f = normalize(sub(target, position));
        let mut r = cross(f, [0.0, 0.0, 1.0]);
        if norm(r) < 1e-9 {
            r = [1.0, 0.0, 0.0];
        }
        let r = normalize(r);
        let d = cross(f, r);
        let rot = [r, d, f];
        let t = [-dot(r, position), -dot(d, position), -dot(f, position)];
        let (w, h) = image_size;
        CameraModel::new(
            fx,
            fy,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            Transform3D::from_rt(rot, t),
            image_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k[0][0] > 0.0 && self.k[1][1] > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if self.t_wc.m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config("camera extrinsic bottom row must be (0,0,0,1)".into()));
        }
        let r = self.t_wc.linear();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("empty image".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let r = self.t_wc.linear();
        let t = [self.t_wc.m[0][3], self.t_wc.m[1][3], self.t_wc.m[2][3]];
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World-frame direction of pixel `(u, v)` scaled so that its camera-frame
    /// z component is 1; `center + t * dir` has depth `t`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let x = (u - self.k[0][2] - self.k[0][1] * (v - self.k[1][2]) / self.k[1][1]) / self.k[0][0];
        let y = (v - self.k[1][2]) / self.k[1][1];
        let r = self.t_wc.linear();
        let dc = [x, y, 1.0];
        [
            r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
            r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
            r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
        ]
    }

    /// Camera with `transform` applied to the world frame: points `p` in the
    /// old frame appear at `transform · p`.
    pub fn in_transformed_world(&self, transform_inverse: &Transform3D) -> CameraModel {
        CameraModel {
            k: self.k,
            t_wc: self.t_wc.compose(transform_inverse),
            image_size: self.image_size,
        }
    }
}

pub fn project_point(c: Vec3, cam: &CameraModel) -> Projection {
    let p = cam.t_wc.apply_point(c);
    let depth = p[2];
    if depth <= MIN_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            visible: false,
        };
    }
    let k = &cam.k;
    let u = (k[0][0] * p[0] + k[0][1] * p[1] + k[0][2] * p[2]) / depth;
    let v = (k[1][1] * p[1] + k[1][2] * p[2]) / depth;
    let (w, h) = cam.image_size;
    let visible = u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64;
    Projection { u, v, depth, visible }
}

pub fn back_project_pixel(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Vec3> {
    if depth <= 0.0 {
        return Err(Error::Config(format!("back-projection depth {depth} must be positive")));
    }
    let c = cam.center();
    let d = cam.ray_direction(u, v);
    Ok([c[0] + depth * d[0], c[1] + depth * d[1], c[2] + depth * d[2]])
}

/// Regular voxel lattice: `origin` is the minimum corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: Vec3,
    pub voxel_size: Vec3,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("grid dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat(&self, i: [usize; 3]) -> usize {
        (i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]
    }

    pub fn unflat(&self, f: usize) -> [usize; 3] {
        let z = f % self.dims[2];
        let y = (f / self.dims[2]) % self.dims[1];
        [f / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn index_to_coord(&self, i: Vec3) -> Vec3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + (i[a] + 0.5) * self.voxel_size[a];
        }
        c
    }

    pub fn cell_center(&self, i: [usize; 3]) -> Vec3 {
        self.index_to_coord([i[0] as f64, i[1] as f64, i[2] as f64])
    }

    /// Continuous index; voxel centers map to integers.
    pub fn coord_to_index(&self, x: Vec3) -> Vec3 {
        let mut i = [0.0; 3];
        for a in 0..3 {
            i[a] = (x[a] - self.origin[a]) / self.voxel_size[a] - 0.5;
        }
        i
    }

    /// Voxel containing `x`, if inside the grid extent.
    pub fn cell_of(&self, x: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let g = ((x[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(g >= 0.0 && g < self.dims[a] as f64) {
                return None;
            }
            out[a] = g as usize;
        }
        Some(out)
    }

    pub fn extent_max(&self) -> Vec3 {
        let mut m = [0.0; 3];
        for a in 0..3 {
            m[a] = self.origin[a] + self.dims[a] as f64 * self.voxel_size[a];
        }
        m
    }

    pub fn center(&self) -> Vec3 {
        let m = self.extent_max();
        [
            0.5 * (self.origin[0] + m[0]),
            0.5 * (self.origin[1] + m[1]),
            0.5 * (self.origin[2] + m[2]),
        ]
    }

    /// `P_{i-c}`: index → coordinate.
    pub fn index_to_coord_matrix(&self) -> Transform3D {
        let mut m = Transform3D::diagonal(self.voxel_size);
        for a in 0..3 {
            m.m[a][3] = self.origin[a] + 0.5 * self.voxel_size[a];
        }
        m
    }

    /// `P_{c-i}`: coordinate → index.
    pub fn coord_to_index_matrix(&self) -> Transform3D {
        let mut m = Transform3D::diagonal([
            1.0 / self.voxel_size[0],
            1.0 / self.voxel_size[1],
            1.0 / self.voxel_size[2],
        ]);
        for a in 0..3 {
            m.m[a][3] = -self.origin[a] / self.voxel_size[a] - 0.5;
        }
        m
    }
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}
