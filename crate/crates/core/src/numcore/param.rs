use super::{Real, Rng, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Real> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = value.zeros_like();
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(dims))
    }

    pub fn ones(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, Tensor::full(dims, S::one()))
    }

    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance preserving).
    pub fn uniform(name: impl Into<String>, dims: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        Self::new(
            name,
            Tensor::from_fn(dims, |_| S::of(rng.uniform_in(-bound, bound))),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<S>) {
        self.grad.add_assign(g);
    }
}

/// Anything owning parameters. Visiting order is fixed and defines the
/// checkpoint layout.
pub trait Module<S: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

impl<S: Real, M: Module<S>> Module<S> for Vec<M> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for m in self {
            m.visit_params(f);
        }
    }
}

impl<S: Real, M: Module<S>> Module<S> for Option<M> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }
}
