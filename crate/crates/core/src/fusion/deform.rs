//! 3×3 deformable convolution: each tap samples the input bilinearly at
//! its regular position plus a learned per-pixel offset.

use crate::error::{Error, Result};
use crate::numcore::layers::Conv2d;
use crate::numcore::sample::stencil2;
use crate::numcore::{Module, Param, Real, Rng, Tensor};

const TAPS: usize = 9;

#[derive(Clone, Debug)]
pub struct DeformConv2d<S: Real> {
    /// Predicts `(tap, [d_row, d_col])` offsets, zero-initialized.
    pub offsets: Conv2d<S>,
    /// `Co×Ci×3×3`.
    pub w: Param<S>,
    pub b: Param<S>,
}

#[derive(Clone, Debug)]
pub struct DeformCache<S> {
    off: Tensor<S>,
    /// `Ci×9×H×W` sampled inputs.
    samples: Tensor<S>,
}

impl<S: Real> DeformConv2d<S> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        DeformConv2d {
            offsets: Conv2d::zeroed(&format!("{name}.offsets"), cin, 2 * TAPS, 3, 1),
            w: Param::uniform(format!("{name}.w"), &[cout, cin, 3, 3], cin * TAPS, rng),
            b: Param::zeros(format!("{name}.b"), &[cout]),
        }
    }

    /// Same kernel as a plain convolution, so zero offsets reproduce it.
    pub fn from_plain(name: &str, plain: &Conv2d<S>) -> Result<Self> {
        let d = plain.w.value.dims();
        if d[2] != 3 || d[3] != 3 || plain.stride != 1 {
            return Err(Error::Config("deformable conv needs a 3×3 stride-1 kernel".into()));
        }
        Ok(DeformConv2d {
            offsets: Conv2d::zeroed(&format!("{name}.offsets"), d[1], 2 * TAPS, 3, 1),
            w: Param::new(format!("{name}.w"), plain.w.value.clone()),
            b: Param::new(format!("{name}.b"), plain.b.value.clone()),
        })
    }

    fn point(off: &Tensor<S>, t: usize, r: usize, s: usize, plane: usize, w: usize) -> (S, S) {
        let p = r * w + s;
        let (ti, tj) = ((t / 3) as f64 - 1.0, (t % 3) as f64 - 1.0);
        let row = S::of(r as f64 + ti) + off.data()[(2 * t) * plane + p];
        let col = S::of(s as f64 + tj) + off.data()[(2 * t + 1) * plane + p];
        (row, col)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, DeformCache<S>)> {
        let [ci, h, w] = *x.dims() else {
            return Err(Error::shape("deform_conv2d", format!("x {:?}", x.dims())));
        };
        let co = self.w.value.dims()[0];
        if self.w.value.dims()[1] != ci {
            return Err(Error::shape("deform_conv2d", format!("x {:?} vs w {:?}", x.dims(), self.w.value.dims())));
        }
        let off = self.offsets.forward(x)?;
        let plane = h * w;
        let mut samples = Tensor::zeros(&[ci, TAPS, h, w]);
        for t in 0..TAPS {
            for r in 0..h {
                for s in 0..w {
                    let (row, col) = Self::point(&off, t, r, s, plane, w);
                    let Some(st) = stencil2(col, row, h, w) else { continue };
                    for c in 0..ci {
                        let xs = &x.data()[c * plane..(c + 1) * plane];
                        let mut v = S::zero();
                        for j in 0..4 {
                            v += st.w[j] * xs[st.idx[j]];
                        }
                        samples.data_mut()[(c * TAPS + t) * plane + r * w + s] = v;
                    }
                }
            }
        }
        let wd = self.w.value.data();
        let mut y = Tensor::zeros(&[co, h, w]);
        for o in 0..co {
            let yr = &mut y.data_mut()[o * plane..(o + 1) * plane];
            yr.fill(self.b.value.data()[o]);
            for k in 0..ci * TAPS {
                let wv = wd[o * ci * TAPS + k];
                for (a, &sv) in yr.iter_mut().zip(&samples.data()[k * plane..(k + 1) * plane]) {
                    *a += wv * sv;
                }
            }
        }
        Ok((y, DeformCache { off, samples }))
    }

    pub fn backward(&mut self, x: &Tensor<S>, cache: &DeformCache<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let [ci, h, w] = *x.dims() else {
            return Err(Error::shape("deform_conv2d_backward", format!("x {:?}", x.dims())));
        };
        let co = self.w.value.dims()[0];
        let plane = h * w;
        let wd = self.w.value.data().to_vec();
        let mut gw = self.w.value.zeros_like();
        let mut gb = self.b.value.zeros_like();
        let mut gs = cache.samples.zeros_like();
        for o in 0..co {
            let gr = &gy.data()[o * plane..(o + 1) * plane];
            gb.data_mut()[o] = gr.iter().fold(S::zero(), |a, &v| a + v);
            for k in 0..ci * TAPS {
                let sr = &cache.samples.data()[k * plane..(k + 1) * plane];
                let mut acc = S::zero();
                for (&g, &sv) in gr.iter().zip(sr) {
                    acc += g * sv;
                }
                gw.data_mut()[o * ci * TAPS + k] = acc;
                let wv = wd[o * ci * TAPS + k];
                for (a, &g) in gs.data_mut()[k * plane..(k + 1) * plane].iter_mut().zip(gr) {
                    *a += wv * g;
                }
            }
        }
        self.w.accumulate(&gw);
        self.b.accumulate(&gb);

        let mut gx = x.zeros_like();
        let mut goff = cache.off.zeros_like();
        for t in 0..TAPS {
            for r in 0..h {
                for s in 0..w {
                    let (row, col) = Self::point(&cache.off, t, r, s, plane, w);
                    let Some(st) = stencil2(col, row, h, w) else { continue };
                    let p = r * w + s;
                    let (mut g_row, mut g_col) = (S::zero(), S::zero());
                    for c in 0..ci {
                        let g = gs.data()[(c * TAPS + t) * plane + p];
                        let base = c * plane;
                        for j in 0..4 {
                            let xv = x.data()[base + st.idx[j]];
                            g_col += g * st.dw_dx[j] * xv;
                            g_row += g * st.dw_dy[j] * xv;
                            gx.data_mut()[base + st.idx[j]] += g * st.w[j];
                        }
                    }
                    goff.data_mut()[(2 * t) * plane + p] = g_row;
                    goff.data_mut()[(2 * t + 1) * plane + p] = g_col;
                }
            }
        }
        gx.add_assign(&self.offsets.backward(x, &goff)?);
        Ok(gx)
    }
}

impl<S: Real> Module<S> for DeformConv2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.offsets.visit_params(f);
        f(&mut self.w);
        f(&mut self.b);
    }
}
