//! Deformable cross-attention from voxel queries into multi-camera features.
//!
//! Each head predicts `K` pixel offsets and `K` logits from the query. The
//! logits are shared by every camera that sees the cell, so normalizing over
//! all visible `(camera, point)` pairs gives `softmax_k / |V|`. Samples are
//! aggregated before the per-head value projection, which is linear.

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraModel, Transform3D, VoxelGridSpec};
use crate::numcore::layers::Linear;
use crate::numcore::sample::stencil2;
use crate::numcore::{nn, Module, Param, Real, Rng, Tensor};

/// Projection of every cell center into every camera, camera-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RefPoints {
    pub n_cam: usize,
    pub n_cells: usize,
    pub uv: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl RefPoints {
    pub fn new(cams: &[CameraModel], grid: &VoxelGridSpec) -> Self {
        Self::with_transform(cams, grid, &Transform3D::IDENTITY)
    }

    /// Reference points of a grid living in a transformed frame: the cell
    /// center `c` is projected from `frame_inv · c`.
    pub fn with_transform(cams: &[CameraModel], grid: &VoxelGridSpec, frame_inv: &Transform3D) -> Self {
        let n = grid.num_cells();
        let mut uv = Vec::with_capacity(cams.len() * n);
        let mut visible = Vec::with_capacity(cams.len() * n);
        for cam in cams {
            for f in 0..n {
                let p = project_point(frame_inv.apply_point(grid.cell_center(grid.unflat(f))), cam);
                uv.push([p.u, p.v]);
                visible.push(p.visible);
            }
        }
        RefPoints { n_cam: cams.len(), n_cells: n, uv, visible }
    }

    /// Explicit reference points for tests and custom rigs.
    pub fn from_parts(n_cam: usize, uv: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if n_cam == 0 || uv.len() != visible.len() || !uv.len().is_multiple_of(n_cam) {
            return Err(Error::shape("RefPoints", format!("{} points for {n_cam} cameras", uv.len())));
        }
        Ok(RefPoints { n_cam, n_cells: uv.len() / n_cam, uv, visible })
    }

    fn n_visible(&self, cell: usize) -> usize {
        (0..self.n_cam).filter(|&c| self.visible[c * self.n_cells + cell]).count()
    }
}

#[derive(Clone, Debug)]
pub struct DeformableCrossAttention<S: Real> {
    pub heads: usize,
    pub points: usize,
    /// `(H·K·2) × C`, rows ordered `(head, point, [du, dv])`.
    pub offsets: Linear<S>,
    /// `(H·K) × C`.
    pub attn: Linear<S>,
    /// `C × C_img`; rows of head `h` are `h·C/H .. (h+1)·C/H`.
    pub value: Param<S>,
    pub out: Linear<S>,
}

/// Forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub struct DcaCache<S> {
    dims: Vec<usize>,
    q: Tensor<S>,
    off: Tensor<S>,
    weights: Tensor<S>,
    agg: Tensor<S>,
    heads_out: Tensor<S>,
}

impl<S: Real> DeformableCrossAttention<S> {
    pub fn new(name: &str, c: usize, c_img: usize, heads: usize, points: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || points == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels cannot split into {heads} heads")));
        }
        Ok(DeformableCrossAttention {
            heads,
            points,
            offsets: Linear::zeroed(&format!("{name}.offsets"), c, heads * points * 2, true),
            attn: Linear::zeroed(&format!("{name}.attn"), c, heads * points, true),
            value: Param::uniform(format!("{name}.value"), &[c, c_img], c_img, rng),
            out: Linear::new(&format!("{name}.out"), c, c, true, rng),
        })
    }

    /// Zero offsets, uniform weights, identity value and output maps (`C == C_img`).
    pub fn identity(name: &str, c: usize, heads: usize, points: usize) -> Self {
        let mut value = Param::zeros(format!("{name}.value"), &[c, c]);
        for i in 0..c {
            value.value.set(&[i, i], S::one());
        }
        DeformableCrossAttention {
            heads,
            points,
            offsets: Linear::zeroed(&format!("{name}.offsets"), c, heads * points * 2, true),
            attn: Linear::zeroed(&format!("{name}.attn"), c, heads * points, true),
            value,
            out: Linear::identity(&format!("{name}.out"), c, true),
        }
    }

    fn channels(&self) -> (usize, usize) {
        (self.value.value.dims()[0], self.value.value.dims()[1])
    }

    fn check(&self, q: &Tensor<S>, feats: &Tensor<S>, refs: &RefPoints) -> Result<(usize, usize, usize)> {
        let (c, ci) = self.channels();
        let n = q.numel() / c.max(1);
        match *feats.dims() {
            [nc, fc, h, w] if nc == refs.n_cam && fc == ci && q.dims()[0] == c && n == refs.n_cells => Ok((n, h, w)),
            _ => Err(Error::shape(
                "deformable_cross_attention",
                format!("q {:?}, feats {:?}, {} cams × {} cells", q.dims(), feats.dims(), refs.n_cam, refs.n_cells),
            )),
        }
    }

    /// `q: C×...` with one column per reference cell; returns the same shape.
    pub fn forward(&self, q: &Tensor<S>, feats: &Tensor<S>, refs: &RefPoints) -> Result<(Tensor<S>, DcaCache<S>)> {
        let (n, h, w) = self.check(q, feats, refs)?;
        let (c, ci) = self.channels();
        let (nh, nk) = (self.heads, self.points);
        let dh = c / nh;
        let q2 = q.clone().reshape(&[c, n])?;
        let off = self.offsets.forward(&q2)?;
        let logits = self.attn.forward(&q2)?.reshape(&[nh, nk, n])?;
        let weights = nn::softmax(&logits, 1)?;
        let plane = h * w;
        let fd = feats.data();
        let mut agg = Tensor::zeros(&[nh, ci, n]);
        for cell in 0..n {
            let nv = refs.n_visible(cell);
            if nv == 0 {
                continue;
            }
            let inv = S::one() / S::of(nv as f64);
            for cam in 0..refs.n_cam {
                let r = cam * n + cell;
                if !refs.visible[r] {
                    continue;
                }
                let [ru, rv] = refs.uv[r];
                for hh in 0..nh {
                    for k in 0..nk {
                        let o = (hh * nk + k) * 2;
                        let x = S::of(ru) + off.data()[o * n + cell];
                        let y = S::of(rv) + off.data()[(o + 1) * n + cell];
                        let Some(st) = stencil2(x, y, h, w) else {
                            continue;
                        };
                        let a = weights.data()[(hh * nk + k) * n + cell] * inv;
                        for ch in 0..ci {
                            let base = (cam * ci + ch) * plane;
                            let mut s = S::zero();
                            for j in 0..4 {
                                s += st.w[j] * fd[base + st.idx[j]];
                            }
                            agg.data_mut()[(hh * ci + ch) * n + cell] += a * s;
                        }
                    }
                }
            }
        }
        let mut heads_out = Tensor::zeros(&[c, n]);
        let wv = self.value.value.data();
        for hh in 0..nh {
            for r in hh * dh..(hh + 1) * dh {
                for ch in 0..ci {
                    let wrc = wv[r * ci + ch];
                    for cell in 0..n {
                        heads_out.data_mut()[r * n + cell] += wrc * agg.data()[(hh * ci + ch) * n + cell];
                    }
                }
            }
        }
        let mut y = self.out.forward(&heads_out)?;
        for cell in 0..n {
            if refs.n_visible(cell) == 0 {
                for ch in 0..c {
                    y.data_mut()[ch * n + cell] = q2.data()[ch * n + cell];
                }
            }
        }
        let y = y.reshape(q.dims())?;
        Ok((y, DcaCache { dims: q.dims().to_vec(), q: q2, off, weights, agg, heads_out }))
    }

    /// Accumulates parameter gradients; returns `(g_q, g_feats)`.
    pub fn backward(
        &mut self,
        cache: &DcaCache<S>,
        feats: &Tensor<S>,
        refs: &RefPoints,
        gy: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let (c, ci) = self.channels();
        let (n, h, w) = self.check(&cache.q, feats, refs)?;
        let (nh, nk) = (self.heads, self.points);
        let dh = c / nh;
        let mut gy = gy.clone().reshape(&[c, n])?;
        let mut gq_fallback = Tensor::zeros(&[c, n]);
        for cell in 0..n {
            if refs.n_visible(cell) == 0 {
                for ch in 0..c {
                    gq_fallback.data_mut()[ch * n + cell] = gy.data()[ch * n + cell];
                    gy.data_mut()[ch * n + cell] = S::zero();
                }
            }
        }
        let g_heads = self.out.backward(&cache.heads_out, &gy);

        let wv = self.value.value.data().to_vec();
        let mut g_value = self.value.value.zeros_like();
        let mut g_agg = Tensor::zeros(&[nh, ci, n]);
        for hh in 0..nh {
            for r in hh * dh..(hh + 1) * dh {
                for ch in 0..ci {
                    let ai = (hh * ci + ch) * n;
                    let mut acc = S::zero();
                    for cell in 0..n {
                        let g = g_heads.data()[r * n + cell];
                        acc += g * cache.agg.data()[ai + cell];
                        g_agg.data_mut()[ai + cell] += wv[r * ci + ch] * g;
                    }
                    g_value.data_mut()[r * ci + ch] = acc;
                }
            }
        }
        self.value.accumulate(&g_value);

        let plane = h * w;
        let fd = feats.data();
        let mut g_feats = feats.zeros_like();
        let mut g_off = cache.off.zeros_like();
        let mut g_w = cache.weights.zeros_like();
        for cell in 0..n {
            let nv = refs.n_visible(cell);
            if nv == 0 {
                continue;
            }
            let inv = S::one() / S::of(nv as f64);
            for cam in 0..refs.n_cam {
                let r = cam * n + cell;
                if !refs.visible[r] {
                    continue;
                }
                let [ru, rv] = refs.uv[r];
                for hh in 0..nh {
                    for k in 0..nk {
                        let o = (hh * nk + k) * 2;
                        let x = S::of(ru) + cache.off.data()[o * n + cell];
                        let y = S::of(rv) + cache.off.data()[(o + 1) * n + cell];
                        let Some(st) = stencil2(x, y, h, w) else {
                            continue;
                        };
                        let wi = (hh * nk + k) * n + cell;
                        let a = cache.weights.data()[wi] * inv;
                        let (mut ga, mut gx, mut gyy) = (S::zero(), S::zero(), S::zero());
                        for ch in 0..ci {
                            let g = g_agg.data()[(hh * ci + ch) * n + cell];
                            let base = (cam * ci + ch) * plane;
                            let (mut s, mut sx, mut sy) = (S::zero(), S::zero(), S::zero());
                            for j in 0..4 {
                                let f = fd[base + st.idx[j]];
                                s += st.w[j] * f;
                                sx += st.dw_dx[j] * f;
                                sy += st.dw_dy[j] * f;
                                g_feats.data_mut()[base + st.idx[j]] += a * g * st.w[j];
                            }
                            ga += g * s;
                            gx += g * sx;
                            gyy += g * sy;
                        }
                        g_w.data_mut()[wi] += ga * inv;
                        g_off.data_mut()[o * n + cell] += a * gx;
                        g_off.data_mut()[(o + 1) * n + cell] += a * gyy;
                    }
                }
            }
        }
        let g_logits = nn::softmax_backward(&cache.weights, &g_w, 1).reshape(&[nh * nk, n])?;
        let mut gq = self.offsets.backward(&cache.q, &g_off);
        gq.add_assign(&self.attn.backward(&cache.q, &g_logits));
        gq.add_assign(&gq_fallback);
        Ok((gq.reshape(&cache.dims)?, g_feats))
    }
}

impl<S: Real> Module<S> for DeformableCrossAttention<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.offsets.visit_params(f);
        self.attn.visit_params(f);
        f(&mut self.value);
        self.out.visit_params(f);
    }
}

/// Attention output for every query column (see [`DeformableCrossAttention::forward`]).
pub fn deformable_cross_attention<S: Real>(
    params: &DeformableCrossAttention<S>,
    q: &Tensor<S>,
    feats: &Tensor<S>,
    refs: &RefPoints,
) -> Result<Tensor<S>> {
    Ok(params.forward(q, feats, refs)?.0)
}
