//! Derivative-free local maximization, used to maximize exact likelihoods.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;

use crate::error::{Error, Result};
use crate::model::PanelModel;
use crate::models::kalman::exact_loglik;
use crate::params::{EstimationMap, ParamSet};

#[derive(Clone, Copy, Debug)]
pub struct NelderMeadOptions {
    /// Offset of the initial simplex vertices along each axis.
    pub initial_step: f64,
    pub max_iters: u64,
    /// Stop once the standard deviation of simplex values drops below this.
    pub sd_tolerance: f64,
    /// Number of restarts from the previous optimum.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { initial_step: 0.1, max_iters: 5000, sd_tolerance: 1e-10, restarts: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
}

struct Negated<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Negated<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let v = (self.0)(p);
        Ok(if v.is_nan() { f64::INFINITY } else { -v })
    }
}

/// Maximizes `f` by Nelder-Mead from `start`; NaN counts as `-inf`.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, start: &[f64], opts: &NelderMeadOptions) -> Result<Optimum> {
    if start.is_empty() {
        return Ok(Optimum { x: Vec::new(), value: f(start) });
    }
    let problem = Negated(f);
    let mut x = start.to_vec();
    let mut value = -problem.cost(&x).expect("infallible");
    for _ in 0..=opts.restarts {
        let mut simplex = vec![x.clone()];
        for i in 0..x.len() {
            let mut v = x.clone();
            v[i] += opts.initial_step;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(opts.sd_tolerance)
            .map_err(|e| Error::Argument(e.to_string()))?;
        let res = Executor::new(&problem, solver)
            .configure(|s| s.max_iters(opts.max_iters))
            .run()
            .map_err(|e| Error::Argument(e.to_string()))?;
        let state = res.state();
        if let Some(best) = &state.best_param {
            let v = -state.best_cost;
            if v >= value {
                x = best.clone();
                value = v;
            }
        }
    }
    Ok(Optimum { x, value })
}

impl<F: Fn(&[f64]) -> f64> CostFunction for &Negated<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        (*self).cost(p)
    }
}

/// Maximizes the exact log-likelihood of a linear-Gaussian panel over the
/// flat parameters in `free`, searching on the estimation scale. Returns
/// the maximizing parameters and the maximum.
pub fn maximize_exact_loglik(
    panel: &PanelModel,
    start: &ParamSet,
    free: &[String],
    opts: &NelderMeadOptions,
) -> Result<(ParamSet, f64)> {
    let layout = panel.layout();
    let map = EstimationMap::compile(panel.transforms(), &layout)?;
    let base = map.to_est(&start.values())?;
    let idx = free
        .iter()
        .map(|n| layout.index_of(n).ok_or_else(|| Error::UnknownParameter(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    // Indices whose natural value can move: every member of a block that
    // contains a free parameter. The rest keep their exact start values.
    let moving: Vec<usize> = map
        .blocks
        .iter()
        .filter(|b| b.indices.iter().any(|i| idx.contains(i)))
        .flat_map(|b| b.indices.iter().copied())
        .collect();
    let start_values = start.values();
    let natural = |z: &[f64]| {
        let mut est = base.clone();
        for (&i, &v) in idx.iter().zip(z) {
            est[i] = v;
        }
        let full = map.from_est(&est);
        let mut out = start_values.clone();
        for &i in &moving {
            out[i] = full[i];
        }
        out
    };
    let objective = |z: &[f64]| {
        ParamSet::unflatten(&layout, &natural(z))
            .and_then(|p| panel.with_params(p))
            .and_then(|p| exact_loglik(&p))
            .map_or(f64::NEG_INFINITY, |l| l.total)
    };
    let z0: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
    let opt = maximize(objective, &z0, opts)?;
    Ok((ParamSet::unflatten(&layout, &natural(&opt.x))?, opt.value))
}
