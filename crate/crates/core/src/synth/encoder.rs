//! Stand-in image backbone: two convolutions for features and a parallel
//! convolution + softmax head for per-pixel depth distributions.

use super::Render;
use crate::error::{Error, Result};
use crate::numcore::layers::Conv2d;
use crate::numcore::nn::{relu, relu_backward, softmax, softmax_backward};
use crate::numcore::{Module, Param, Real, Rng, Tensor};

/// One-hot planes for the non-free labels, inverse depth, validity.
pub fn input_channels(occ_classes: usize) -> usize {
    occ_classes + 1
}

/// Stacks renders into `N×C_in×H×W` planes. Inverse depth is scaled by
/// `d_near` so it lies in `(0, 1]` for depths beyond `d_near`.
pub fn image_planes<S: Real>(renders: &[Render], occ_classes: usize, d_near: f64) -> Result<Tensor<S>> {
    let first = renders.first().ok_or_else(|| Error::Config("no renders".into()))?;
    let (w, h) = (first.width, first.height);
    let c = input_channels(occ_classes);
    let plane = w * h;
    let mut t = Tensor::zeros(&[renders.len(), c, h, w]);
    for (n, r) in renders.iter().enumerate() {
        if (r.width, r.height) != (w, h) {
            return Err(Error::shape("image_planes", "renders differ in size"));
        }
        let s = t.slab_mut(n);
        for i in 0..plane {
            if !r.valid[i] {
                continue;
            }
            let l = r.semantic[i] as usize;
            if l == 0 || l >= occ_classes {
                return Err(Error::UnknownClass(l));
            }
            s[(l - 1) * plane + i] = S::one();
            s[(occ_classes - 1) * plane + i] = S::of((d_near / r.depth[i]).min(1.0));
            s[occ_classes * plane + i] = S::one();
        }
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder<S: Real> {
    pub conv1: Conv2d<S>,
    pub conv2: Conv2d<S>,
    pub depth: Conv2d<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<S> {
    pub pre: Vec<Tensor<S>>,
    pub hidden: Vec<Tensor<S>>,
    pub probs: Tensor<S>,
}

impl<S: Real> ImageEncoder<S> {
    pub fn new(c_in: usize, c_hidden: usize, c_img: usize, bins: usize, rng: &mut Rng) -> Self {
        ImageEncoder {
            conv1: Conv2d::new("encoder.conv1", c_in, c_hidden, 3, 1, rng),
            conv2: Conv2d::new("encoder.conv2", c_hidden, c_img, 3, 1, rng),
            depth: Conv2d::new("encoder.depth", c_hidden, bins, 3, 1, rng),
        }
    }

    /// `x: N×C_in×H×W` → `(F_img N×C×H×W, D N×D×H×W)`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, EncoderCache<S>)> {
        let [n, ..] = *x.dims() else {
            return Err(Error::shape("ImageEncoder", format!("x {:?}", x.dims())));
        };
        if x.ndim() != 4 {
            return Err(Error::shape("ImageEncoder", format!("x {:?}", x.dims())));
        }
        let (mut pre, mut hidden, mut feats, mut logits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let xi = x.narrow0(i, i + 1);
            let d = xi.dims()[1..].to_vec();
            let p = self.conv1.forward(&xi.reshape(&d)?)?;
            let hdn = relu(&p);
            feats.push(self.conv2.forward(&hdn)?);
            logits.push(self.depth.forward(&hdn)?);
            pre.push(p);
            hidden.push(hdn);
        }
        let stack = |v: &[Tensor<S>]| -> Result<Tensor<S>> {
            let d = v[0].dims().to_vec();
            let flat: Vec<Tensor<S>> = v.iter().map(|t| t.clone().reshape(&[1, d[0], d[1], d[2]])).collect::<Result<_>>()?;
            Tensor::concat0(&flat.iter().collect::<Vec<_>>())
        };
        let f = stack(&feats)?;
        let probs = softmax(&stack(&logits)?, 1)?;
        Ok((f, probs.clone(), EncoderCache { pre, hidden, probs }))
    }

    /// Accumulates parameter gradients from `dL/dF_img` and `dL/dD` and
    /// returns `dL/dx`.
    pub fn backward(&mut self, cache: &EncoderCache<S>, x: &Tensor<S>, g_feats: &Tensor<S>, g_probs: &Tensor<S>) -> Result<Tensor<S>> {
        let g_logits = softmax_backward(&cache.probs, g_probs, 1);
        let mut gx = x.zeros_like();
        for i in 0..cache.pre.len() {
            let unbatch = |t: &Tensor<S>| {
                let d = t.dims()[1..].to_vec();
                t.narrow0(i, i + 1).reshape(&d)
            };
            let mut gh = self.conv2.backward(&cache.hidden[i], &unbatch(g_feats)?)?;
            gh.add_assign(&self.depth.backward(&cache.hidden[i], &unbatch(&g_logits)?)?);
            let gp = relu_backward(&cache.pre[i], &gh);
            let g = self.conv1.backward(&unbatch(x)?, &gp)?;
            gx.slab_mut(i).copy_from_slice(g.data());
        }
        Ok(gx)
    }
}

impl<S: Real> Module<S> for ImageEncoder<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.depth.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{gradcheck_module, GradCheck};
    use crate::synth::{generate_scene, SceneSpec};

    #[test]
    fn shapes_and_normalized_depth() {
        let spec = SceneSpec::default();
        let s = generate_scene(&mut Rng::new(1), &spec).unwrap();
        let x = image_planes::<f64>(&s.renders, spec.occ_classes(), 0.5).unwrap();
        assert_eq!(x.dims(), &[4, 5, 32, 56]);
        let enc = ImageEncoder::<f64>::new(5, 6, 8, 16, &mut Rng::new(2));
        let (f, p, _) = enc.forward(&x).unwrap();
        assert_eq!(f.dims(), &[4, 8, 32, 56]);
        assert_eq!(p.dims(), &[4, 16, 32, 56]);
        let plane = 32 * 56;
        for n in 0..4 {
            for i in 0..plane {
                let s: f64 = (0..16).map(|d| p.data()[(n * 16 + d) * plane + i]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn encoder_gradcheck() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |_| rng.uniform_in(-1.0, 1.0));
            let enc = ImageEncoder::<f64>::new(3, 4, 3, 4, &mut rng);
            let r = gradcheck_module(
                &GradCheck::new(seed).step(1e-6).max_per_tensor(16),
                enc,
                &[x],
                |m, xs| {
                    let (f, p, _) = m.forward(&xs[0]).unwrap();
                    let (nf, np) = (f.numel(), p.numel());
                    Tensor::concat0(&[&f.reshape(&[nf]).unwrap(), &p.reshape(&[np]).unwrap()]).unwrap()
                },
                |m, xs, g| {
                    let (f, _, cache) = m.forward(&xs[0]).unwrap();
                    let nf = f.numel();
                    let gf = g.narrow0(0, nf).reshape(f.dims()).unwrap();
                    let gp = g.narrow0(nf, g.numel()).reshape(cache.probs.dims()).unwrap();
                    vec![m.backward(&cache, &xs[0], &gf, &gp).unwrap()]
                },
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }
}
