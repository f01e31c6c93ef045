//! Bilinear and trilinear lattice sampling.
//!
//! Lattice nodes sit at integer coordinates. A point is in range when every
//! coordinate lies in `[0, dim - 1]`; out-of-range points read as zero and
//! receive no gradient.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Lower neighbor, upper neighbor and fractional weight along one axis.
#[inline]
fn axis<S: Real>(c: S, dim: usize) -> Option<(usize, usize, S)> {
    let hi = S::of((dim - 1) as f64);
    if !(c >= S::zero() && c <= hi) {
        return None;
    }
    if dim == 1 {
        return Some((0, 0, S::zero()));
    }
    let mut i0 = c.floor().to_usize().unwrap_or(0);
    if i0 >= dim - 1 {
        i0 = dim - 2;
    }
    Some((i0, i0 + 1, c - S::of(i0 as f64)))
}

/// Interpolation stencil of one 2D point: flat `y*W + x` offsets, weights,
/// and weight derivatives along x and y.
#[derive(Clone, Copy, Debug)]
pub struct Stencil2<S> {
    pub idx: [usize; 4],
    pub w: [S; 4],
    pub dw_dx: [S; 4],
    pub dw_dy: [S; 4],
}

pub fn stencil2<S: Real>(x: S, y: S, h: usize, w: usize) -> Option<Stencil2<S>> {
    let (x0, x1, fx) = axis(x, w)?;
    let (y0, y1, fy) = axis(y, h)?;
    let one = S::one();
    Some(Stencil2 {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dw_dx: [-(one - fy), one - fy, -fy, fy],
        dw_dy: [-(one - fx), -fx, one - fx, fx],
    })
}

/// 3D analogue of [`Stencil2`] over flat `(x*Y + y)*Z + z` offsets.
#[derive(Clone, Copy, Debug)]
pub struct Stencil3<S> {
    pub idx: [usize; 8],
    pub w: [S; 8],
    pub dw: [[S; 8]; 3],
}

pub fn stencil3<S: Real>(p: [S; 3], dims: [usize; 3]) -> Option<Stencil3<S>> {
    let (x0, x1, fx) = axis(p[0], dims[0])?;
    let (y0, y1, fy) = axis(p[1], dims[1])?;
    let (z0, z1, fz) = axis(p[2], dims[2])?;
    let one = S::one();
    let xs = [(x0, one - fx, -one), (x1, fx, one)];
    let ys = [(y0, one - fy, -one), (y1, fy, one)];
    let zs = [(z0, one - fz, -one), (z1, fz, one)];
    let mut st = Stencil3 {
        idx: [0; 8],
        w: [S::zero(); 8],
        dw: [[S::zero(); 8]; 3],
    };
    let mut k = 0;
    for &(xi, wx, dx) in &xs {
        for &(yi, wy, dy) in &ys {
            for &(zi, wz, dz) in &zs {
                st.idx[k] = (xi * dims[1] + yi) * dims[2] + zi;
                st.w[k] = wx * wy * wz;
                st.dw[0][k] = dx * wy * wz;
                st.dw[1][k] = wx * dy * wz;
                st.dw[2][k] = wx * wy * dz;
                k += 1;
            }
        }
    }
    Some(st)
}

/// Samples `feat: C×H×W` at `points: P×2` given as `(x, y)` pixel coords.
/// Returns `C×P` and a per-point validity flag.
pub fn bilinear_sample_2d<S: Real>(
    feat: &Tensor<S>,
    points: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let (c, h, w) = dims3(feat, "bilinear_sample_2d")?;
    let p = point_rows(points, 2, "bilinear_sample_2d")?;
    let mut out = Tensor::zeros(&[c, p]);
    let mut valid = vec![false; p];
    let pts = points.data();
    let plane = h * w;
    for j in 0..p {
        if let Some(st) = stencil2(pts[2 * j], pts[2 * j + 1], h, w) {
            valid[j] = true;
            for ch in 0..c {
                let f = &feat.data()[ch * plane..(ch + 1) * plane];
                let mut acc = S::zero();
                for k in 0..4 {
                    acc += st.w[k] * f[st.idx[k]];
                }
                out.data_mut()[ch * p + j] = acc;
            }
        }
    }
    Ok((out, valid))
}

/// Gradients of [`bilinear_sample_2d`] w.r.t. `feat` and `points`.
pub fn bilinear_sample_2d_backward<S: Real>(
    feat: &Tensor<S>,
    points: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w) = dims3(feat, "bilinear_sample_2d_backward")?;
    let p = point_rows(points, 2, "bilinear_sample_2d_backward")?;
    if grad_out.dims() != [c, p] {
        return Err(Error::shape(
            "bilinear_sample_2d_backward",
            format!("grad {:?} vs [{c}, {p}]", grad_out.dims()),
        ));
    }
    let mut gfeat = feat.zeros_like();
    let mut gpts = points.zeros_like();
    let plane = h * w;
    let pts = points.data();
    for j in 0..p {
        let Some(st) = stencil2(pts[2 * j], pts[2 * j + 1], h, w) else {
            continue;
        };
        let (mut gx, mut gy) = (S::zero(), S::zero());
        for ch in 0..c {
            let g = grad_out.data()[ch * p + j];
            let f = &feat.data()[ch * plane..(ch + 1) * plane];
            let gf = &mut gfeat.data_mut()[ch * plane..(ch + 1) * plane];
            for k in 0..4 {
                gf[st.idx[k]] += st.w[k] * g;
                gx += st.dw_dx[k] * f[st.idx[k]] * g;
                gy += st.dw_dy[k] * f[st.idx[k]] * g;
            }
        }
        gpts.data_mut()[2 * j] = gx;
        gpts.data_mut()[2 * j + 1] = gy;
    }
    Ok((gfeat, gpts))
}

/// Samples `vol: C×X×Y×Z` at `points: P×3` continuous `(x, y, z)` indices.
pub fn trilinear_sample_3d<S: Real>(
    vol: &Tensor<S>,
    points: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let (c, dims) = dims4(vol, "trilinear_sample_3d")?;
    let p = point_rows(points, 3, "trilinear_sample_3d")?;
    let n = dims.iter().product::<usize>();
    let mut out = Tensor::zeros(&[c, p]);
    let mut valid = vec![false; p];
    let pts = points.data();
    for j in 0..p {
        let pt = [pts[3 * j], pts[3 * j + 1], pts[3 * j + 2]];
        if let Some(st) = stencil3(pt, dims) {
            valid[j] = true;
            for ch in 0..c {
                let f = &vol.data()[ch * n..(ch + 1) * n];
                let mut acc = S::zero();
                for k in 0..8 {
                    acc += st.w[k] * f[st.idx[k]];
                }
                out.data_mut()[ch * p + j] = acc;
            }
        }
    }
    Ok((out, valid))
}

/// Gradients of [`trilinear_sample_3d`] w.r.t. `vol` and `points`.
pub fn trilinear_sample_3d_backward<S: Real>(
    vol: &Tensor<S>,
    points: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, dims) = dims4(vol, "trilinear_sample_3d_backward")?;
    let p = point_rows(points, 3, "trilinear_sample_3d_backward")?;
    if grad_out.dims() != [c, p] {
        return Err(Error::shape(
            "trilinear_sample_3d_backward",
            format!("grad {:?} vs [{c}, {p}]", grad_out.dims()),
        ));
    }
    let n = dims.iter().product::<usize>();
    let mut gvol = vol.zeros_like();
    let mut gpts = points.zeros_like();
    let pts = points.data();
    for j in 0..p {
        let pt = [pts[3 * j], pts[3 * j + 1], pts[3 * j + 2]];
        let Some(st) = stencil3(pt, dims) else {
            continue;
        };
        let mut gp = [S::zero(); 3];
        for ch in 0..c {
            let g = grad_out.data()[ch * p + j];
            let f = &vol.data()[ch * n..(ch + 1) * n];
            let gf = &mut gvol.data_mut()[ch * n..(ch + 1) * n];
            for k in 0..8 {
                gf[st.idx[k]] += st.w[k] * g;
                for (a, gpa) in gp.iter_mut().enumerate() {
                    *gpa += st.dw[a][k] * f[st.idx[k]] * g;
                }
            }
        }
        gpts.data_mut()[3 * j..3 * j + 3].copy_from_slice(&gp);
    }
    Ok((gvol, gpts))
}

fn dims3<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected C×H×W, got {:?}", t.dims()))),
    }
}

fn dims4<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<(usize, [usize; 3])> {
    match *t.dims() {
        [c, x, y, z] => Ok((c, [x, y, z])),
        _ => Err(Error::shape(
            op,
            format!("expected C×X×Y×Z, got {:?}", t.dims()),
        )),
    }
}

fn point_rows<S: Real>(t: &Tensor<S>, cols: usize, op: &'static str) -> Result<usize> {
    match *t.dims() {
        [p, k] if k == cols => Ok(p),
        _ => Err(Error::shape(
            op,
            format!("expected P×{cols} points, got {:?}", t.dims()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{gradcheck, GradCheck};
    use crate::numcore::Rng;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn bilinear_exact_at_node() {
        let mut rng = Rng::new(1);
        let feat = random(&[3, 6, 5], &mut rng);
        let pts = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let (out, valid) = bilinear_sample_2d(&feat, &pts).unwrap();
        assert!(valid[0]);
        for c in 0..3 {
            assert_eq!(out.at(&[c, 0]), feat.at(&[c, 4, 3]));
        }
    }

    #[test]
    fn bilinear_out_of_range_is_zero() {
        let feat = Tensor::<f64>::full(&[2, 4, 4], 1.0);
        let pts = Tensor::from_vec(&[1, 2], vec![-10.0, -10.0]).unwrap();
        let (out, valid) = bilinear_sample_2d(&feat, &pts).unwrap();
        assert!(!valid[0]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_matches_four_neighbor_sum() {
        let mut rng = Rng::new(2);
        let feat = random(&[4, 5, 6], &mut rng);
        let pts = Tensor::from_vec(&[1, 2], vec![1.5, 2.5]).unwrap();
        let (out, _) = bilinear_sample_2d(&feat, &pts).unwrap();
        for c in 0..4 {
            let oracle = 0.25
                * (feat.at(&[c, 2, 1]) + feat.at(&[c, 2, 2]) + feat.at(&[c, 3, 1]) + feat.at(&[c, 3, 2]));
            assert!((out.at(&[c, 0]) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_lattice_and_constant() {
        let mut rng = Rng::new(3);
        let vol = random(&[2, 3, 4, 5], &mut rng);
        let pts = Tensor::from_vec(&[1, 3], vec![2.0, 1.0, 4.0]).unwrap();
        let (out, _) = trilinear_sample_3d(&vol, &pts).unwrap();
        assert_eq!(out.at(&[1, 0]), vol.at(&[1, 2, 1, 4]));

        let v = 0.375;
        let cst = Tensor::<f64>::full(&[1, 3, 3, 3], v);
        let pts = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let (out, _) = trilinear_sample_3d(&cst, &pts).unwrap();
        assert_eq!(out.data()[0], v);
    }

    #[test]
    fn trilinear_matches_eight_neighbor_oracle() {
        let mut rng = Rng::new(4);
        let vol = random(&[3, 2, 2, 2], &mut rng);
        let (px, py, pz) = (0.25, 0.5, 0.75);
        let pts = Tensor::from_vec(&[1, 3], vec![px, py, pz]).unwrap();
        let (out, _) = trilinear_sample_3d(&vol, &pts).unwrap();
        for c in 0..3 {
            let mut oracle = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        let wx = if i == 0 { 1.0 - px } else { px };
                        let wy = if j == 0 { 1.0 - py } else { py };
                        let wz = if k == 0 { 1.0 - pz } else { pz };
                        oracle += wx * wy * wz * vol.at(&[c, i, j, k]);
                    }
                }
            }
            assert!((out.at(&[c, 0]) - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn midpoint_is_mean_of_endpoints() {
        let mut rng = Rng::new(5);
        let vol = random(&[2, 4, 4, 4], &mut rng);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.0, 3.0)).collect();
            let axis = rng.below(3);
            let mut b = a.clone();
            b[axis] = (a[axis] + rng.uniform_in(-0.9, 0.9)).clamp(a[axis].floor(), a[axis].floor() + 1.0);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let pts = Tensor::from_vec(&[3, 3], [a, b, mid].concat()).unwrap();
            let (out, _) = trilinear_sample_3d(&vol, &pts).unwrap();
            for c in 0..2 {
                let m = 0.5 * (out.at(&[c, 0]) + out.at(&[c, 1]));
                assert!((out.at(&[c, 2]) - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampling_gradchecks() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let feat = random(&[2, 5, 6], &mut rng);
            let pts = Tensor::from_fn(&[7, 2], |i| {
                if i % 2 == 0 { rng.uniform_in(0.1, 4.9) } else { rng.uniform_in(0.1, 3.9) }
            });
            let err = gradcheck(
                GradCheck::new(seed).step(1e-6),
                &[feat, pts],
                |x| bilinear_sample_2d(&x[0], &x[1]).unwrap().0,
                |x, g| {
                    let (a, b) = bilinear_sample_2d_backward(&x[0], &x[1], g).unwrap();
                    vec![a, b]
                },
            )
            .unwrap();
            assert!(err < 1e-5, "bilinear seed {seed}: {err}");

            let vol = random(&[2, 3, 4, 3], &mut rng);
            let pts = Tensor::from_fn(&[6, 3], |i| match i % 3 {
                0 => rng.uniform_in(0.1, 1.9),
                1 => rng.uniform_in(0.1, 2.9),
                _ => rng.uniform_in(0.1, 1.9),
            });
            let err = gradcheck(
                GradCheck::new(seed).step(1e-6),
                &[vol, pts],
                |x| trilinear_sample_3d(&x[0], &x[1]).unwrap().0,
                |x, g| {
                    let (a, b) = trilinear_sample_3d_backward(&x[0], &x[1], g).unwrap();
                    vec![a, b]
                },
            )
            .unwrap();
            assert!(err < 1e-5, "trilinear seed {seed}: {err}");
        }
    }
}
