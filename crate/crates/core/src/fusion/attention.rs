//! Windowed cross-attention: every query position attends over the kv
//! entries inside a `Δp` window centered on it. Window cells outside the
//! map are masked out of the softmax.

use crate::error::{Error, Result};
use crate::numcore::layers::Linear;
use crate::numcore::{Module, Param, Real, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct NeighborhoodAttention<S: Real> {
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
    /// Odd window extent per axis; the third entry is 1 for BEV maps.
    pub window: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct AttnCache<S> {
    qp: Tensor<S>,
    kp: Tensor<S>,
    vp: Tensor<S>,
    /// Softmax weights per position and window slot (0 for masked slots).
    weights: Vec<S>,
    att: Tensor<S>,
}

/// Spatial dims of a `C×X×Y×Z` or `C×X×Y` map, the latter as `Z = 1`.
fn spatial<S: Real>(t: &Tensor<S>) -> Result<[usize; 3]> {
    match *t.dims() {
        [_, x, y, z] => Ok([x, y, z]),
        [_, x, y] => Ok([x, y, 1]),
        _ => Err(Error::shape("neighborhood_attention", format!("map {:?}", t.dims()))),
    }
}

impl<S: Real> NeighborhoodAttention<S> {
    pub fn new(name: &str, c_q: usize, c_kv: usize, c_attn: usize, window: [usize; 3], rng: &mut Rng) -> Result<Self> {
        if let Some(&w) = window.iter().find(|&&w| w % 2 == 0) {
            return Err(Error::EvenKernel(w));
        }
        Ok(NeighborhoodAttention {
            q: Linear::new(&format!("{name}.q"), c_q, c_attn, true, rng),
            k: Linear::new(&format!("{name}.k"), c_kv, c_attn, true, rng),
            v: Linear::new(&format!("{name}.v"), c_kv, c_attn, true, rng),
            o: Linear::new(&format!("{name}.o"), c_attn, c_q, true, rng),
            window,
        })
    }

    pub fn identity(name: &str, c: usize, window: [usize; 3]) -> Result<Self> {
        if let Some(&w) = window.iter().find(|&&w| w % 2 == 0) {
            return Err(Error::EvenKernel(w));
        }
        Ok(NeighborhoodAttention {
            q: Linear::identity(&format!("{name}.q"), c, true),
            k: Linear::identity(&format!("{name}.k"), c, true),
            v: Linear::identity(&format!("{name}.v"), c, true),
            o: Linear::identity(&format!("{name}.o"), c, true),
            window,
        })
    }

    fn slots(&self) -> usize {
        self.window.iter().product()
    }

    /// Flat kv index of window slot `s` around position `p`, if inside the map.
    fn neighbor(&self, dims: [usize; 3], p: [usize; 3], s: usize) -> Option<usize> {
        let [wx, wy, wz] = self.window;
        let off = [s / (wy * wz), (s / wz) % wy, s % wz];
        let mut n = [0usize; 3];
        for a in 0..3 {
            let half = [wx, wy, wz][a] / 2;
            let c = (p[a] + off[a]).checked_sub(half)?;
            if c >= dims[a] {
                return None;
            }
            n[a] = c;
        }
        Some((n[0] * dims[1] + n[1]) * dims[2] + n[2])
    }

    pub fn forward(&self, query: &Tensor<S>, kv: &Tensor<S>) -> Result<(Tensor<S>, AttnCache<S>)> {
        let dims = spatial(query)?;
        if spatial(kv)? != dims {
            return Err(Error::shape(
                "neighborhood_attention",
                format!("query {:?} vs kv {:?}", query.dims(), kv.dims()),
            ));
        }
        let qp = self.q.forward(query)?;
        let kp = self.k.forward(kv)?;
        let vp = self.v.forward(kv)?;
        let ca = qp.dims()[0];
        let n = qp.numel() / ca;
        let ns = self.slots();
        let scale = S::one() / S::of(ca as f64).sqrt();
        let mut weights = vec![S::zero(); n * ns];
        let mut att = qp.zeros_like();
        let mut logit = vec![S::zero(); ns];
        for pi in 0..n {
            let p = [pi / (dims[1] * dims[2]), (pi / dims[2]) % dims[1], pi % dims[2]];
            let mut m = S::neg_infinity();
            for s in 0..ns {
                if let Some(j) = self.neighbor(dims, p, s) {
                    let mut d = S::zero();
                    for c in 0..ca {
                        d += qp.data()[c * n + pi] * kp.data()[c * n + j];
                    }
                    logit[s] = d * scale;
                    m = m.max(logit[s]);
                }
            }
            let w = &mut weights[pi * ns..(pi + 1) * ns];
            let mut z = S::zero();
            for s in 0..ns {
                if self.neighbor(dims, p, s).is_some() {
                    w[s] = (logit[s] - m).exp();
                    z += w[s];
                }
            }
            for s in 0..ns {
                if let Some(j) = self.neighbor(dims, p, s) {
                    w[s] /= z;
                    for c in 0..ca {
                        att.data_mut()[c * n + pi] += w[s] * vp.data()[c * n + j];
                    }
                }
            }
        }
        let mut out = self.o.forward(&att)?;
        out.add_assign(query);
        Ok((out, AttnCache { qp, kp, vp, weights, att }))
    }

    /// Returns `(g_query, g_kv)`.
    pub fn backward(
        &mut self,
        query: &Tensor<S>,
        kv: &Tensor<S>,
        cache: &AttnCache<S>,
        g_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let dims = spatial(query)?;
        let g_att = self.o.backward(&cache.att, g_out);
        let ca = cache.qp.dims()[0];
        let n = cache.qp.numel() / ca;
        let ns = self.slots();
        let scale = S::one() / S::of(ca as f64).sqrt();
        let (qd, kd, vd) = (cache.qp.data(), cache.kp.data(), cache.vp.data());
        let mut gq = cache.qp.zeros_like();
        let mut gk = cache.kp.zeros_like();
        let mut gv = cache.vp.zeros_like();
        let mut ga = vec![S::zero(); ns];
        for pi in 0..n {
            let p = [pi / (dims[1] * dims[2]), (pi / dims[2]) % dims[1], pi % dims[2]];
            let w = &cache.weights[pi * ns..(pi + 1) * ns];
            let mut dot = S::zero();
            for s in 0..ns {
                ga[s] = S::zero();
                if let Some(j) = self.neighbor(dims, p, s) {
                    for c in 0..ca {
                        let g = g_att.data()[c * n + pi];
                        ga[s] += g * vd[c * n + j];
                        gv.data_mut()[c * n + j] += w[s] * g;
                    }
                    dot += w[s] * ga[s];
                }
            }
            for s in 0..ns {
                if let Some(j) = self.neighbor(dims, p, s) {
                    let gs = w[s] * (ga[s] - dot) * scale;
                    for c in 0..ca {
                        gq.data_mut()[c * n + pi] += gs * kd[c * n + j];
                        gk.data_mut()[c * n + j] += gs * qd[c * n + pi];
                    }
                }
            }
        }
        let mut g_query = self.q.backward(query, &gq);
        g_query.add_assign(g_out);
        let mut g_kv = self.k.backward(kv, &gk);
        g_kv.add_assign(&self.v.backward(kv, &gv));
        Ok((g_query, g_kv))
    }
}

impl<S: Real> Module<S> for NeighborhoodAttention<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
        self.o.visit_params(f);
    }
}

/// Output map of [`NeighborhoodAttention::forward`].
pub fn neighborhood_cross_attention<S: Real>(
    params: &NeighborhoodAttention<S>,
    query: &Tensor<S>,
    kv: &Tensor<S>,
) -> Result<Tensor<S>> {
    Ok(params.forward(query, kv)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{gradcheck_module, GradCheck};
    use crate::numcore::nn;

    fn rand_t(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn constant_value_field_passes_through() {
        let mut rng = Rng::new(0);
        let mut na = NeighborhoodAttention::<f64>::identity("a", 3, [3, 3, 1]).unwrap();
        na.q.w.value = rand_t(&mut rng, &[3, 3]);
        let query = rand_t(&mut rng, &[3, 5, 4]);
        let kv = Tensor::from_fn(&[3, 5, 4], |i| [0.2, -0.4, 0.9][i / 20]);
        let (out, cache) = na.forward(&query, &kv).unwrap();
        for (i, (&o, &q)) in out.data().iter().zip(query.data()).enumerate() {
            assert!((o - q - [0.2, -0.4, 0.9][i / 20]).abs() < 1e-12);
        }
        for w in cache.weights.chunks(9) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn even_window_is_rejected() {
        let mut rng = Rng::new(0);
        assert!(NeighborhoodAttention::<f64>::new("a", 2, 2, 2, [3, 2, 1], &mut rng).is_err());
    }

    #[test]
    fn border_weights_are_normalized() {
        let mut rng = Rng::new(5);
        let na = NeighborhoodAttention::<f64>::new("a", 2, 3, 4, [3, 3, 3], &mut rng).unwrap();
        let (_, cache) = na.forward(&rand_t(&mut rng, &[2, 3, 3, 2]), &rand_t(&mut rng, &[3, 3, 3, 2])).unwrap();
        for w in cache.weights.chunks(27) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    /// Full cross-attention computed with dense matrices.
    fn dense_oracle(na: &NeighborhoodAttention<f64>, query: &Tensor<f64>, kv: &Tensor<f64>) -> Tensor<f64> {
        let qp = na.q.forward(query).unwrap();
        let kp = na.k.forward(kv).unwrap();
        let vp = na.v.forward(kv).unwrap();
        let ca = qp.dims()[0];
        let n = qp.numel() / ca;
        let scores = Tensor::from_fn(&[n, n], |i| {
            let (a, b) = (i / n, i % n);
            (0..ca).map(|c| qp.data()[c * n + a] * kp.data()[c * n + b]).sum::<f64>() / (ca as f64).sqrt()
        });
        let w = nn::softmax(&scores, 1).unwrap();
        let att = Tensor::from_fn(qp.dims(), |i| {
            let (c, a) = (i / n, i % n);
            (0..n).map(|b| w.data()[a * n + b] * vp.data()[c * n + b]).sum()
        });
        let mut out = na.o.forward(&att).unwrap();
        out.add_assign(query);
        out
    }

    #[test]
    fn large_window_matches_dense_attention() {
        let mut rng = Rng::new(9);
        let na = NeighborhoodAttention::<f64>::new("a", 3, 2, 4, [13, 13, 1], &mut rng).unwrap();
        let (q, kv) = (rand_t(&mut rng, &[3, 6, 6]), rand_t(&mut rng, &[2, 6, 6]));
        assert!(na.forward(&q, &kv).unwrap().0.max_abs_diff(&dense_oracle(&na, &q, &kv)) < 1e-5);
        let na = NeighborhoodAttention::<f64>::new("a", 3, 2, 4, [9, 9, 7], &mut rng).unwrap();
        let (q, kv) = (rand_t(&mut rng, &[3, 4, 4, 3]), rand_t(&mut rng, &[2, 4, 4, 3]));
        assert!(na.forward(&q, &kv).unwrap().0.max_abs_diff(&dense_oracle(&na, &q, &kv)) < 1e-5);
    }

    #[test]
    fn attention_gradcheck() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            for (qd, kd, win) in [(vec![3, 4, 4], vec![2, 4, 4], [3, 3, 1]), (vec![3, 3, 3, 2], vec![2, 3, 3, 2], [3, 3, 3])] {
                let na = NeighborhoodAttention::<f64>::new("a", 3, 2, 4, win, &mut rng).unwrap();
                let inputs = [rand_t(&mut rng, &qd), rand_t(&mut rng, &kd)];
                let rep = gradcheck_module(
                    &GradCheck::new(seed),
                    na,
                    &inputs,
                    |m, x| m.forward(&x[0], &x[1]).unwrap().0,
                    |m, x, g| {
                        let (_, c) = m.forward(&x[0], &x[1]).unwrap();
                        let (a, b) = m.backward(&x[0], &x[1], &c, g).unwrap();
                        vec![a, b]
                    },
                )
                .unwrap();
                assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
            }
        }
    }
}
