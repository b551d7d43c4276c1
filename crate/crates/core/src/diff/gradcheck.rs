//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::graph::{Gradients, Graph, Var};
use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates sampled from each parameter tensor.
    pub coords_per_param: usize,
    /// Upper bound on parameter tensors visited (sampled when exceeded).
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-4, tolerance: 1e-3, coords_per_param: 2, max_params: usize::MAX, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub worst: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.error)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        match &self.worst {
            Some(w) => write!(
                f,
                "{verdict}: {} coords, worst {}[{}] analytic {:.6e} numeric {:.6e} err {:.3e} (tol {:.0e})",
                self.checked, w.param, w.index, w.analytic, w.numeric, w.error, self.tolerance
            ),
            None => write!(f, "{verdict}: no coordinates checked"),
        }
    }
}

/// Pins a closure to the higher-ranked signature expected by [`grad_check`].
pub fn scalar_fn<T, F>(f: F) -> F
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    f
}

fn eval<T, F>(f: &F, params: &ParamStore<T>) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let out = f(&g, params)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("function output must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0].as_f64())
}

/// Analytic parameter gradients of a scalar function.
pub fn analytic_gradients<T, F>(f: &F, params: &ParamStore<T>) -> Result<Gradients<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let out = f(&g, params)?;
    g.backward(out)
}

/// Compares `analytic` against central differences on sampled coordinates.
pub fn check_against<T, F>(
    f: &F,
    params: &ParamStore<T>,
    analytic: impl Fn(ParamId) -> Option<Tensor<T>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    if !(1e-6..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {} outside [1e-6, 1e-3]", opts.epsilon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = params.ids().collect();
    let chosen: Vec<ParamId> = if ids.len() > opts.max_params {
        let mut idx = sample(&mut rng, ids.len(), opts.max_params).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| ids[i]).collect()
    } else {
        ids
    };
    let mut work = params.clone();
    let mut report = GradCheckReport { checked: 0, tolerance: opts.tolerance, worst: None };
    for id in chosen {
        let n = params.get(id).numel();
        let grad = analytic(id);
        let coords = sample(&mut rng, n, opts.coords_per_param.min(n)).into_vec();
        for i in coords {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + T::c(opts.epsilon);
            let plus = eval(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - T::c(opts.epsilon);
            let minus = eval(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i].as_f64());
            let error = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| error > w.error) {
                report.worst =
                    Some(Coordinate { param: params.name(id).to_string(), index: i, analytic: a, numeric, error });
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of the backward pass of `f` with respect to `params`.
pub fn grad_check<T, F>(f: F, params: &ParamStore<T>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    eval(&f, params)?;
    let grads = analytic_gradients(&f, params)?;
    check_against(&f, params, |id| grads.param(id).cloned(), opts)
}
