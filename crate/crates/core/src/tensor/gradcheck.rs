//! Central finite-difference checks of the reverse pass, run in `f64`.

use rand::seq::index;
use rand::Rng;

use super::{Graph, NdArray, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Denominator floor for the relative error, so that two tiny gradients
    /// are compared absolutely.
    pub floor: f64,
    pub tolerance: f64,
    /// Corrupt the analytic backward pass (negative control).
    pub inject_fault: bool,
}

impl CheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        CheckOptions { eps: 1e-6, floor: 1e-7, tolerance, inject_fault: false }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Differentiates `f` with respect to every element of every input.
pub fn check_inputs<F>(
    name: &str,
    inputs: &[NdArray<f64>],
    opts: CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[NdArray<f64>]| -> Result<f64> {
        let mut g = Graph::detached();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.scalar_value(loss)
    };

    let mut g = Graph::detached();
    if opts.inject_fault {
        g.inject_backward_fault();
    }
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf_grad(v.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], |s| s.to_vec()))
        .collect();

    let mut vals = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for i in 0..vals.len() {
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&vals)?;
            vals[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            max_err = max_err.max(rel_err(analytic[i][j], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_err, checked, tolerance: opts.tolerance })
}

/// Differentiates `f` with respect to parameters, sampling up to
/// `per_param` coordinates of every parameter tensor.
pub fn check_params<F, R>(
    name: &str,
    store: &ParamStore<f64>,
    per_param: usize,
    rng: &mut R,
    opts: CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check_param_subset(name, store, &ids, per_param, rng, opts, f)
}

/// [`check_params`] restricted to the parameters `f` actually reads.
pub fn check_used_params<F, R>(
    name: &str,
    store: &ParamStore<f64>,
    per_param: usize,
    rng: &mut R,
    opts: CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let ids = {
        let mut g = Graph::new(store);
        f(&mut g)?;
        g.used_params()
    };
    check_param_subset(name, store, &ids, per_param, rng, opts, f)
}

fn check_param_subset<F, R>(
    name: &str,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut R,
    opts: CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut g = Graph::new(store);
        if opts.inject_fault {
            g.inject_backward_fault();
        }
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        g.scalar_value(loss)
    };

    let mut work = store.clone();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for &id in ids {
        let n = store.value(id).numel();
        let picks = index::sample(rng, n, per_param.min(n)).into_vec();
        for j in picks {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = rel_err(analytic.get(id).data()[j], numeric, opts.floor);
            if err > max_err {
                log::debug!("{name}: {} [{j}] rel err {err:.3e}", store.get(id).name);
            }
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_err, checked, tolerance: opts.tolerance })
}
