//! Central-difference gradient checking.
//!
//! The output is reduced to a scalar by a random projection `L = <r, y>`,
//! the analytic gradient of `L` is compared to `(L(x+h) - L(x-h)) / 2h`
//! entry by entry, and the worst relative error is reported. The relative
//! error of an entry is `|a - n| / max(|a|, |n|, floor)` where `floor` is
//! `1e-3` of the largest gradient magnitude seen, so entries that are zero
//! up to truncation noise do not dominate.

use super::{Module, Rng, Tensor};
use crate::error::{Error, Result};

/// An operation with its analytic backward, evaluated in 64-bit mode.
pub trait Differentiable {
    fn forward(&self) -> Tensor<f64>;
    /// Gradients w.r.t. every tensor returned by [`Self::inputs_mut`], same order.
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Vec<Tensor<f64>>;
    fn inputs_mut(&mut self) -> Vec<&mut Tensor<f64>>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub seed: u64,
    pub step: f64,
    /// Probe at most this many entries per input tensor (chosen at random).
    pub max_per_tensor: Option<usize>,
}

impl GradCheck {
    pub fn new(seed: u64) -> Self {
        GradCheck {
            seed,
            step: 1e-4,
            max_per_tensor: None,
        }
    }

    pub fn step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    pub fn max_per_tensor(mut self, n: usize) -> Self {
        self.max_per_tensor = Some(n);
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

/// Runs the check on any [`Differentiable`] and returns the full report.
pub fn check<D: Differentiable>(cfg: &GradCheck, op: &mut D) -> Result<GradReport> {
    let mut rng = Rng::new(cfg.seed).fork("gradcheck");
    let y = op.forward();
    y.ensure_finite("gradcheck forward")?;
    let r = Tensor::from_fn(y.dims(), |_| rng.uniform_in(-1.0, 1.0));
    let analytic = op.backward(&r);
    for g in &analytic {
        g.ensure_finite("gradcheck backward")?;
    }
    let n_inputs = op.inputs_mut().len();
    if analytic.len() != n_inputs {
        return Err(Error::shape(
            "gradcheck",
            format!("{} gradients for {n_inputs} inputs", analytic.len()),
        ));
    }

    let h = cfg.step;
    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for t in 0..n_inputs {
        let n = op.inputs_mut()[t].numel();
        if analytic[t].numel() != n {
            return Err(Error::shape(
                "gradcheck",
                format!("gradient {t} has {} entries, input has {n}", analytic[t].numel()),
            ));
        }
        let entries: Vec<usize> = match cfg.max_per_tensor {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = op.inputs_mut()[t].data()[j];
            op.inputs_mut()[t].data_mut()[j] = orig + h;
            let lp = op.forward().dot(&r);
            op.inputs_mut()[t].data_mut()[j] = orig - h;
            let lm = op.forward().dot(&r);
            op.inputs_mut()[t].data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            if !num.is_finite() {
                return Err(Error::NonFinite(format!("finite difference at input {t}[{j}]")));
            }
            pairs.push((t, j, analytic[t].data()[j], num));
        }
    }

    let scale = pairs
        .iter()
        .map(|&(_, _, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let mut rep = GradReport {
        probed: pairs.len(),
        ..Default::default()
    };
    for (t, j, a, n) in pairs {
        let e = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if e > rep.max_rel_error {
            rep = GradReport {
                max_rel_error: e,
                worst_input: t,
                worst_index: j,
                analytic: a,
                numeric: n,
                probed: rep.probed,
            };
        }
    }
    Ok(rep)
}

struct FnOp<F, B> {
    inputs: Vec<Tensor<f64>>,
    forward: F,
    backward: B,
}

impl<F, B> Differentiable for FnOp<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    fn forward(&self) -> Tensor<f64> {
        (self.forward)(&self.inputs)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Vec<Tensor<f64>> {
        (self.backward)(&self.inputs, grad_out)
    }
    fn inputs_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.inputs.iter_mut().collect()
    }
}

/// Closure form: `forward(inputs)` and `backward(inputs, grad_out)`.
/// Returns the maximum relative error.
pub fn gradcheck<F, B>(cfg: GradCheck, inputs: &[Tensor<f64>], forward: F, backward: B) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    let mut op = FnOp {
        inputs: inputs.to_vec(),
        forward,
        backward,
    };
    Ok(check(&cfg, &mut op)?.max_rel_error)
}

struct ModuleOp<M, F, B> {
    module: M,
    inputs: Vec<Tensor<f64>>,
    params: Vec<Tensor<f64>>,
    forward: F,
    backward: B,
}

fn load_params<M: Module<f64>>(m: &mut M, params: &[Tensor<f64>]) {
    let mut i = 0;
    m.visit_params(&mut |p| {
        p.value.data_mut().copy_from_slice(params[i].data());
        i += 1;
    });
}

impl<M, F, B> Differentiable for ModuleOp<M, F, B>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&mut M, &[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    fn forward(&self) -> Tensor<f64> {
        let mut m = self.module.clone();
        load_params(&mut m, &self.params);
        (self.forward)(&m, &self.inputs)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Vec<Tensor<f64>> {
        load_params(&mut self.module, &self.params);
        self.module.zero_grad();
        let mut g = (self.backward)(&mut self.module, &self.inputs, grad_out);
        self.module.visit_params(&mut |p| g.push(p.grad.clone()));
        g
    }
    fn inputs_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.inputs.iter_mut().chain(self.params.iter_mut()).collect()
    }
}

/// Checks a parameterized operation: inputs come first, then every
/// parameter of `module` in visiting order. `backward` must accumulate
/// parameter gradients and return the input gradients.
pub fn gradcheck_module<M, F, B>(
    cfg: &GradCheck,
    mut module: M,
    inputs: &[Tensor<f64>],
    forward: F,
    backward: B,
) -> Result<GradReport>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&mut M, &[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    let mut params = Vec::new();
    module.visit_params(&mut |p| params.push(p.value.clone()));
    let mut op = ModuleOp {
        module,
        inputs: inputs.to_vec(),
        params,
        forward,
        backward,
    };
    check(cfg, &mut op)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let ok = gradcheck(
            GradCheck::new(0),
            std::slice::from_ref(&x),
            |i| i[0].map(|v| v * v),
            |i, g| vec![Tensor::from_fn(&[3], |k| 2.0 * i[0].data()[k] * g.data()[k])],
        )
        .unwrap();
        assert!(ok < 1e-8);
        let bad = gradcheck(
            GradCheck::new(0),
            &[x],
            |i| i[0].map(|v| v * v),
            |i, g| vec![Tensor::from_fn(&[3], |k| 3.0 * i[0].data()[k] * g.data()[k])],
        )
        .unwrap();
        assert!(bad > 0.1);
    }
}
