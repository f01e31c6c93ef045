use serde::{Deserialize, Serialize};

use super::{Module, Real, Tensor};

/// Optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Sgd {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Optimizer state: one or two moment buffers per parameter, in visit order.
#[derive(Clone, Debug)]
pub struct Optimizer<S: Real> {
    spec: OptimizerSpec,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Real> Optimizer<S> {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<M: Module<S>>(&mut self, model: &mut M) {
        self.t += 1;
        let spec = self.spec.clone();
        let t = self.t;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_params(&mut |p| {
            if m.len() <= k {
                m.push(p.value.zeros_like());
                v.push(p.value.zeros_like());
            }
            match spec {
                OptimizerSpec::Sgd { lr, momentum } => {
                    let (lr, mu) = (S::of(lr), S::of(momentum));
                    let buf = m[k].data_mut();
                    for ((w, b), &g) in p.value.data_mut().iter_mut().zip(buf).zip(p.grad.data()) {
                        *b = mu * *b + g;
                        *w -= lr * *b;
                    }
                }
                OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t as i32);
                    let c2 = 1.0 - beta2.powi(t as i32);
                    let (b1, b2) = (S::of(beta1), S::of(beta2));
                    let step = S::of(lr / c1);
                    let (c2, eps) = (S::of(c2), S::of(eps));
                    let mb = m[k].data_mut();
                    let vb = v[k].data_mut();
                    for (((w, mm), vv), &g) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(mb)
                        .zip(vb)
                        .zip(p.grad.data())
                    {
                        *mm = b1 * *mm + (S::one() - b1) * g;
                        *vv = b2 * *vv + (S::one() - b2) * g * g;
                        *w -= step * *mm / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
            k += 1;
        });
    }
}

/// Global L2 norm of the accumulated gradients (summed in f64).
pub fn grad_norm<S: Real, M: Module<S>>(model: &mut M) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |p| sq += p.grad.data().iter().map(|g| g.f64() * g.f64()).sum::<f64>());
    sq.sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Real, M: Module<S>>(model: &mut M, max_norm: f64) -> f64 {
    let n = grad_norm(model);
    if n > max_norm {
        let k = S::of(max_norm / n);
        model.visit_params(&mut |p| p.grad.scale(k));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Param;

    struct Quad(Param<f64>);
    impl Module<f64> for Quad {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    fn minimize(spec: OptimizerSpec) -> f64 {
        let mut q = Quad(Param::new("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()));
        let mut opt = Optimizer::new(spec);
        for _ in 0..500 {
            let g = q.0.value.map(|v| 2.0 * v);
            q.0.accumulate(&g);
            opt.step(&mut q);
        }
        q.0.value.data().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut q = Quad(Param::new("x", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()));
        q.0.accumulate(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut q, 10.0), 5.0);
        assert_eq!(q.0.grad.data(), &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut q, 1.0), 5.0);
        assert!((grad_norm(&mut q) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn both_optimizers_descend() {
        assert!(minimize(OptimizerSpec::Sgd { lr: 0.05, momentum: 0.9 }) < 1e-6);
        assert!(minimize(OptimizerSpec::Adam { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }) < 1e-2);
    }
}
