//! Differentiable primitives with hand-written backward passes.
//!
//! Volumes are channel-major (`C×X×Y×Z`, `C×H×W`). Reductions run in a
//! fixed sequential order so results are bit-reproducible.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `y = x·Wᵀ + b` for row-major `x: N×I`, `w: O×I`, `b: O`.
pub fn dense<S: Real>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, i) = mat(x, "dense")?;
    let (o, wi) = mat(w, "dense")?;
    if wi != i || b.numel() != o {
        return Err(Error::shape(
            "dense",
            format!("x {:?}, w {:?}, b {:?}", x.dims(), w.dims(), b.dims()),
        ));
    }
    let mut y = Tensor::zeros(&[n, o]);
    for r in 0..n {
        let xr = &x.data()[r * i..(r + 1) * i];
        for c in 0..o {
            let wr = &w.data()[c * i..(c + 1) * i];
            let mut acc = b.data()[c];
            for k in 0..i {
                acc += xr[k] * wr[k];
            }
            y.data_mut()[r * o + c] = acc;
        }
    }
    Ok(y)
}

/// Returns `(gx, gw, gb)`.
pub fn dense_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, i) = mat(x, "dense_backward")?;
    let (o, _) = mat(w, "dense_backward")?;
    if gy.dims() != [n, o] {
        return Err(Error::shape("dense_backward", format!("gy {:?}", gy.dims())));
    }
    let mut gx = Tensor::zeros(&[n, i]);
    let mut gw = Tensor::zeros(&[o, i]);
    let mut gb = Tensor::zeros(&[o]);
    for r in 0..n {
        for c in 0..o {
            let g = gy.data()[r * o + c];
            gb.data_mut()[c] += g;
            for k in 0..i {
                gx.data_mut()[r * i + k] += g * w.data()[c * i + k];
                gw.data_mut()[c * i + k] += g * x.data()[r * i + k];
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Channel-major dense layer applied at every position: `x: I×N` → `O×N`.
/// Equivalent to a 1×1 convolution.
pub fn pointwise<S: Real>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let i = x.dims()[0];
    let n = x.numel() / i.max(1);
    let (o, wi) = mat(w, "pointwise")?;
    if wi != i || b.is_some_and(|b| b.numel() != o) {
        return Err(Error::shape(
            "pointwise",
            format!("x {:?}, w {:?}", x.dims(), w.dims()),
        ));
    }
    let mut dims = x.dims().to_vec();
    dims[0] = o;
    let mut y = Tensor::zeros(&dims);
    for c in 0..o {
        let yr = &mut y.data_mut()[c * n..(c + 1) * n];
        if let Some(b) = b {
            yr.fill(b.data()[c]);
        }
        for k in 0..i {
            let wv = w.data()[c * i + k];
            let xr = &x.data()[k * n..(k + 1) * n];
            for (a, &xv) in yr.iter_mut().zip(xr) {
                *a += wv * xv;
            }
        }
    }
    Ok(y)
}

/// Returns `(gx, gw, gb)` for [`pointwise`].
pub fn pointwise_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let i = x.dims()[0];
    let n = x.numel() / i.max(1);
    let o = w.dims()[0];
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = Tensor::zeros(&[o]);
    for c in 0..o {
        let gr = &gy.data()[c * n..(c + 1) * n];
        gb.data_mut()[c] = gr.iter().fold(S::zero(), |a, &v| a + v);
        for k in 0..i {
            let wv = w.data()[c * i + k];
            let xr = &x.data()[k * n..(k + 1) * n];
            let mut acc = S::zero();
            for (&g, &xv) in gr.iter().zip(xr) {
                acc += g * xv;
            }
            gw.data_mut()[c * i + k] = acc;
            let gxr = &mut gx.data_mut()[k * n..(k + 1) * n];
            for (a, &g) in gxr.iter_mut().zip(gr) {
                *a += wv * g;
            }
        }
    }
    (gx, gw, gb)
}

/// Geometry of a zero-padded "same" convolution with odd kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        for &k in &kernel {
            if k % 2 == 0 {
                return Err(Error::EvenKernel(k));
            }
        }
        if stride.contains(&0) {
            return Err(Error::shape("conv", "zero stride"));
        }
        Ok(ConvGeom {
            input,
            kernel,
            stride,
        })
    }

    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.input[a] - 1) / self.stride[a] + 1;
        }
        o
    }

    fn pad(&self, a: usize) -> usize {
        self.kernel[a] / 2
    }

    /// Output index range along axis `a` for which tap `k` reads in range.
    fn valid(&self, a: usize, k: usize) -> std::ops::Range<usize> {
        let (n, s, p) = (self.input[a], self.stride[a], self.pad(a));
        let out = self.output()[a];
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if n - 1 + p < k {
            return 0..0;
        }
        let hi = ((n - 1 + p - k) / s + 1).min(out);
        lo..hi.max(lo)
    }

    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> usize {
        o * self.stride[a] + k - self.pad(a)
    }
}

/// Unrolls `x: Ci×X×Y×Z` into `(Ci·taps)×outputs` columns (zero where a
/// tap reads padding).
fn im2col<S: Real>(xd: &[S], ci: usize, g: &ConvGeom) -> Vec<S> {
    let od = g.output();
    let on = od.iter().product::<usize>();
    let inn = g.input.iter().product::<usize>();
    let kn = g.kernel.iter().product::<usize>();
    let mut cols = vec![S::zero(); ci * kn * on];
    for_each_tap(g, |tap, ka, kb, kc| {
        let (rx, ry, rz) = (g.valid(0, ka), g.valid(1, kb), g.valid(2, kc));
        for ic in 0..ci {
            let xi = &xd[ic * inn..(ic + 1) * inn];
            let col = &mut cols[(ic * kn + tap) * on..(ic * kn + tap + 1) * on];
            for ox in rx.clone() {
                let ix = g.src(0, ox, ka);
                for oy in ry.clone() {
                    let iy = g.src(1, oy, kb);
                    let orow = (ox * od[1] + oy) * od[2];
                    let irow = (ix * g.input[1] + iy) * g.input[2];
                    for oz in rz.clone() {
                        col[orow + oz] = xi[irow + g.src(2, oz, kc)];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
fn col2im<S: Real>(cols: &[S], gx: &mut [S], ci: usize, g: &ConvGeom) {
    let od = g.output();
    let on = od.iter().product::<usize>();
    let inn = g.input.iter().product::<usize>();
    let kn = g.kernel.iter().product::<usize>();
    for_each_tap(g, |tap, ka, kb, kc| {
        let (rx, ry, rz) = (g.valid(0, ka), g.valid(1, kb), g.valid(2, kc));
        for ic in 0..ci {
            let gxi = &mut gx[ic * inn..(ic + 1) * inn];
            let col = &cols[(ic * kn + tap) * on..(ic * kn + tap + 1) * on];
            for ox in rx.clone() {
                let ix = g.src(0, ox, ka);
                for oy in ry.clone() {
                    let iy = g.src(1, oy, kb);
                    let orow = (ox * od[1] + oy) * od[2];
                    let irow = (ix * g.input[1] + iy) * g.input[2];
                    for oz in rz.clone() {
                        gxi[irow + g.src(2, oz, kc)] += col[orow + oz];
                    }
                }
            }
        }
    });
}

#[inline]
fn axpy<S: Real>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Eight partial sums so the loop vectorizes.
#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(S::zero(), |t, (&x, &y)| t + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |t, &v| t + v)
}

/// 3D convolution: `x: Ci×X×Y×Z`, `w: Co×Ci×kx×ky×kz`, `b: Co`.
pub fn conv3d<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: [usize; 3],
) -> Result<Tensor<S>> {
    let (ci, co, g) = conv_shapes(x, w, stride)?;
    if b.numel() != co {
        return Err(Error::shape("conv3d", format!("bias {:?}", b.dims())));
    }
    let od = g.output();
    let on = od.iter().product::<usize>();
    let rows = ci * g.kernel.iter().product::<usize>();
    let cols = im2col(x.data(), ci, &g);
    let mut y = Tensor::zeros(&[co, od[0], od[1], od[2]]);
    let wd = w.data();
    for (oc, yo) in y.data_mut().chunks_mut(on).enumerate() {
        yo.fill(b.data()[oc]);
        for (r, col) in cols.chunks(on).enumerate() {
            let wv = wd[oc * rows + r];
            if wv != S::zero() {
                axpy(yo, wv, col);
            }
        }
    }
    Ok(y)
}

/// Returns `(gx, gw, gb)` for [`conv3d`].
pub fn conv3d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: [usize; 3],
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (ci, co, g) = conv_shapes(x, w, stride)?;
    let od = g.output();
    if gy.dims() != [co, od[0], od[1], od[2]] {
        return Err(Error::shape("conv3d_backward", format!("gy {:?}", gy.dims())));
    }
    let on = od.iter().product::<usize>();
    let rows = ci * g.kernel.iter().product::<usize>();
    let cols = im2col(x.data(), ci, &g);
    let mut gcols = vec![S::zero(); rows * on];
    let mut gw = w.zeros_like();
    let mut gb = Tensor::zeros(&[co]);
    let wd = w.data();
    for (oc, go) in gy.data().chunks(on).enumerate() {
        gb.data_mut()[oc] = go.iter().fold(S::zero(), |a, &v| a + v);
        let gwr = &mut gw.data_mut()[oc * rows..(oc + 1) * rows];
        for (r, (col, gcol)) in cols.chunks(on).zip(gcols.chunks_mut(on)).enumerate() {
            gwr[r] = dot(go, col);
            let wv = wd[oc * rows + r];
            if wv != S::zero() {
                axpy(gcol, wv, go);
            }
        }
    }
    let mut gx = x.zeros_like();
    col2im(&gcols, gx.data_mut(), ci, &g);
    Ok((gx, gw, gb))
}

fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut tap = 0;
    for ka in 0..g.kernel[0] {
        for kb in 0..g.kernel[1] {
            for kc in 0..g.kernel[2] {
                f(tap, ka, kb, kc);
                tap += 1;
            }
        }
    }
}

fn conv_shapes<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: [usize; 3],
) -> Result<(usize, usize, ConvGeom)> {
    let [ci, a, b, c] = *x.dims() else {
        return Err(Error::shape("conv3d", format!("x {:?}", x.dims())));
    };
    let [co, wci, ka, kb, kc] = *w.dims() else {
        return Err(Error::shape("conv3d", format!("w {:?}", w.dims())));
    };
    if wci != ci {
        return Err(Error::shape(
            "conv3d",
            format!("x has {ci} channels, kernel expects {wci}"),
        ));
    }
    Ok((ci, co, ConvGeom::new([a, b, c], [ka, kb, kc], stride)?))
}

/// 2D convolution: `x: Ci×H×W`, `w: Co×Ci×kh×kw`.
pub fn conv2d<S: Real>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let (x4, w5) = lift2d(x, w)?;
    let y = conv3d(&x4, &w5, b, [1, stride, stride])?;
    let d = y.dims().to_vec();
    y.reshape(&[d[0], d[2], d[3]])
}

/// Returns `(gx, gw, gb)` for [`conv2d`].
pub fn conv2d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (x4, w5) = lift2d(x, w)?;
    let gd = gy.dims();
    if gd.len() != 3 {
        return Err(Error::shape("conv2d_backward", format!("gy {gd:?}")));
    }
    let gy4 = gy.clone().reshape(&[gd[0], 1, gd[1], gd[2]])?;
    let (gx, gw, gb) = conv3d_backward(&x4, &w5, [1, stride, stride], &gy4)?;
    Ok((gx.reshape(x.dims())?, gw.reshape(w.dims())?, gb))
}

fn lift2d<S: Real>(x: &Tensor<S>, w: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let [c, h, wd] = *x.dims() else {
        return Err(Error::shape("conv2d", format!("x {:?}", x.dims())));
    };
    let [co, ci, kh, kw] = *w.dims() else {
        return Err(Error::shape("conv2d", format!("w {:?}", w.dims())));
    };
    Ok((
        x.clone().reshape(&[c, 1, h, wd])?,
        w.clone().reshape(&[co, ci, 1, kh, kw])?,
    ))
}

/// Splits `dims` around `axis` into `(outer, len, inner)`.
fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<S: Real>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.dims())));
    }
    let (outer, len, inner) = around(x.dims(), axis);
    let mut y = x.zeros_like();
    let xd = x.data();
    let yd = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                yd[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                yd[at(k)] /= z;
            }
        }
    }
    Ok(y)
}

/// Backward of [`softmax`] given its output `y`.
pub fn softmax_backward<S: Real>(y: &Tensor<S>, gy: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = around(y.dims(), axis);
    let mut gx = y.zeros_like();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = S::zero();
            for k in 0..len {
                dot += gy.data()[at(k)] * y.data()[at(k)];
            }
            for k in 0..len {
                gx.data_mut()[at(k)] = y.data()[at(k)] * (gy.data()[at(k)] - dot);
            }
        }
    }
    gx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward cache of [`layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Normalizes every column of a channel-major `C×...` tensor across `C`.
pub fn layer_norm<S: Real>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let c = x.dims()[0];
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("{c} channels, gamma {:?}", gamma.dims()),
        ));
    }
    let n = x.numel() / c;
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let mut inv_std = vec![S::zero(); n];
    let cs = S::of(c as f64);
    let eps = S::of(LAYER_NORM_EPS);
    for j in 0..n {
        let mut mean = S::zero();
        for k in 0..c {
            mean += x.data()[k * n + j];
        }
        mean /= cs;
        let mut var = S::zero();
        for k in 0..c {
            let d = x.data()[k * n + j] - mean;
            var += d * d;
        }
        var /= cs;
        let is = S::one() / (var + eps).sqrt();
        inv_std[j] = is;
        for k in 0..c {
            let h = (x.data()[k * n + j] - mean) * is;
            xhat.data_mut()[k * n + j] = h;
            y.data_mut()[k * n + j] = gamma.data()[k] * h + beta.data()[k];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(gx, ggamma, gbeta)` for [`layer_norm`].
pub fn layer_norm_backward<S: Real>(
    cache: &LayerNormCache<S>,
    gamma: &Tensor<S>,
    gy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = gamma.numel();
    let n = gy.numel() / c;
    let mut gx = gy.zeros_like();
    let mut gg = gamma.zeros_like();
    let mut gb = gamma.zeros_like();
    let cs = S::of(c as f64);
    let xh = cache.xhat.data();
    for j in 0..n {
        let mut s1 = S::zero();
        let mut s2 = S::zero();
        for k in 0..c {
            let g = gy.data()[k * n + j];
            gg.data_mut()[k] += g * xh[k * n + j];
            gb.data_mut()[k] += g;
            let gh = g * gamma.data()[k];
            s1 += gh;
            s2 += gh * xh[k * n + j];
        }
        for k in 0..c {
            let gh = gy.data()[k * n + j] * gamma.data()[k];
            gx.data_mut()[k * n + j] = cache.inv_std[j] * (gh - (s1 + xh[k * n + j] * s2) / cs);
        }
    }
    (gx, gg, gb)
}

pub fn relu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Backward of [`relu`] given its input.
pub fn relu_backward<S: Real>(x: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    Tensor::from_fn(x.dims(), |i| {
        if x.data()[i] > S::zero() {
            gy.data()[i]
        } else {
            S::zero()
        }
    })
}

pub fn sigmoid<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::one() / (S::one() + (-v).exp()))
}

/// Backward of [`sigmoid`] given its output.
pub fn sigmoid_backward<S: Real>(y: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    Tensor::from_fn(y.dims(), |i| {
        let s = y.data()[i];
        gy.data()[i] * s * (S::one() - s)
    })
}

fn mat<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match *t.dims() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", t.dims()))),
    }
}
