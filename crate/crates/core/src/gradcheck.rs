//! Central finite-difference gradient checking in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{frozen_estimates, grad, GradOptions, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-4,
            max_coords: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords: usize,
}

impl CheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            coords: 0,
        }
    }

    fn record(&mut self, label: &str, i: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / denom;
        self.coords += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{label}[{i}]: analytic {analytic:.6e}, numeric {numeric:.6e}");
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn project(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    if y.numel() == 1 {
        return y.sum_all();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    y.mul(&r)?.sum_all()
}

fn coords(n: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = n.div_ceil(max.max(1)).max(1);
    (0..n).step_by(step)
}

fn perturbed(t: &Tensor<f64>, i: usize, delta: f64) -> Result<Tensor<f64>> {
    let mut v = t.to_vec();
    v[i] += delta;
    Ok(Tensor::from_vec(v, t.shape())?.requires_grad_(true))
}

/// Checks `f` with respect to each of `inputs`. Non-scalar outputs are
/// contracted with fixed random weights first.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, cfg: CheckConfig) -> Result<CheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    frozen_estimates(|| {
        let xs: Vec<Tensor<f64>> = inputs.iter().map(|x| x.detach().requires_grad_(true)).collect();
        let y = project(&f(&xs)?)?;
        let refs: Vec<&Tensor<f64>> = xs.iter().collect();
        let gs = grad(&y, &refs, GradOptions::default())?;
        let mut report = CheckReport::new();
        for (k, x) in xs.iter().enumerate() {
            let analytic = gs[k].as_ref().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
            for i in coords(x.numel(), cfg.max_coords) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut shifted = xs.clone();
                    shifted[k] = perturbed(x, i, delta)?;
                    project(&f(&shifted)?)?.item()
                };
                let numeric = (eval(cfg.eps)? - eval(-cfg.eps)?) / (2.0 * cfg.eps);
                report.record(&format!("input{k}"), i, analytic[i], numeric, cfg.floor);
            }
        }
        Ok(report)
    })
}

/// Checks `f` with respect to its inputs and every trainable parameter of
/// `module`.
pub fn check_module<M, F>(module: &mut M, inputs: &[Tensor<f64>], f: F, cfg: CheckConfig) -> Result<CheckReport>
where
    M: Module<f64>,
    F: Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut report = check_fn(inputs, |xs| f(module, xs), cfg)?;
    frozen_estimates(|| {
        let y = project(&f(module, inputs)?)?;
        let mut params = Vec::new();
        module.visit_params(&mut |p: &Param<f64>| {
            if p.trainable() {
                params.push((p.name.clone(), p.tensor().clone()));
            }
        });
        let refs: Vec<&Tensor<f64>> = params.iter().map(|(_, t)| t).collect();
        let gs = grad(&y, &refs, GradOptions::default())?;
        for (k, (name, t)) in params.iter().enumerate() {
            let analytic = gs[k].as_ref().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            let base = t.to_vec();
            for i in coords(t.numel(), cfg.max_coords) {
                let mut eval = |delta: f64| -> Result<f64> {
                    let mut v = base.clone();
                    v[i] += delta;
                    set_param(module, name, v)?;
                    let out = project(&f(module, inputs)?)?.item();
                    set_param(module, name, base.clone())?;
                    out
                };
                let numeric = (eval(cfg.eps)? - eval(-cfg.eps)?) / (2.0 * cfg.eps);
                report.record(name, i, analytic[i], numeric, cfg.floor);
            }
        }
        Ok(report)
    })
}

fn set_param<M: Module<f64>>(module: &mut M, name: &str, data: Vec<f64>) -> Result<()> {
    let mut data = Some(data);
    let mut res = Err(Error::invalid(format!("no parameter named `{name}`")));
    module.visit_params_mut(&mut |p| {
        if p.name == name {
            if let Some(d) = data.take() {
                res = p.set_data(d);
            }
        }
    });
    res
}
