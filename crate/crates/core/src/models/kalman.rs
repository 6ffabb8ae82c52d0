//! Exact log-likelihoods for the built-in linear-Gaussian models.
//!
//! Both built-ins reduce to the scalar model
//!
//! ```text
//! z[k+1] = a z[k] + c + N(0, q)        (one step per unit of time)
//! w[n]   = z[n] + N(0, obs_var)
//! ```
//!
//! with `z` the log state and `w = log y` for the Gompertz (plus the Jacobian
//! `-log y` to return to the density of `y`), and the identity for the random
//! walk.

use std::f64::consts::PI;

use super::gompertz::{n_steps, GompertzParams};
use crate::error::{Error, Result};
use crate::model::{PanelModel, UnitModel};

#[derive(Clone, Copy, Debug)]
struct ScalarModel {
    a: f64,
    c: f64,
    q: f64,
    obs_var: f64,
    m0: f64,
}

fn scalar_loglik(model: &ScalarModel, t0: f64, times: &[f64], obs: impl Iterator<Item = f64>) -> f64 {
    let (mut m, mut p) = (model.m0, 0.0);
    let mut t_prev = t0;
    let mut ll = 0.0;
    for (&t, w) in times.iter().zip(obs) {
        for _ in 0..n_steps(t_prev, t) {
            m = model.a * m + model.c;
            p = model.a * model.a * p + model.q;
        }
        let s = p + model.obs_var;
        let innov = w - m;
        ll += -0.5 * ((2.0 * PI * s).ln() + innov * innov / s);
        let gain = p / s;
        m += gain * innov;
        p *= 1.0 - gain;
        t_prev = t;
    }
    ll
}

/// Exact per-unit and total log-likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactLoglik {
    pub units: Vec<String>,
    pub unit_logliks: Vec<f64>,
    pub total: f64,
}

fn check_key(unit: &UnitModel, key: &'static str) -> Result<()> {
    if unit.dynamics().registry_key() != key {
        return Err(Error::Capability { unit: unit.name().to_string(), expected: key });
    }
    if !unit.has_data() {
        return Err(Error::Argument(format!("unit `{}` has no data", unit.name())));
    }
    Ok(())
}

/// Exact log-likelihood of one Gompertz unit's data.
pub fn gompertz_unit_loglik(unit: &UnitModel, p: &GompertzParams) -> Result<f64> {
    check_key(unit, "gompertz")?;
    if !(p.tau > 0.0) {
        return Err(Error::DegenerateMeasurement);
    }
    if !(p.k > 0.0 && p.x0 > 0.0 && p.sigma >= 0.0) {
        return Err(Error::Domain(format!("invalid Gompertz parameters {p:?}")));
    }
    let ys: Vec<f64> = unit.data().iter().map(|y| y[0]).collect();
    if ys.iter().any(|&y| !(y > 0.0)) {
        return Err(Error::Domain(format!("unit `{}` has non-positive observations", unit.name())));
    }
    let a = (-p.r).exp();
    let model = ScalarModel { a, c: (1.0 - a) * p.k.ln(), q: p.sigma * p.sigma, obs_var: p.tau * p.tau, m0: p.x0.ln() };
    let ll = scalar_loglik(&model, unit.t0(), unit.times(), ys.iter().map(|y| y.ln()));
    let jacobian: f64 = ys.iter().map(|y| y.ln()).sum();
    Ok(ll - jacobian)
}

pub fn random_walk_unit_loglik(unit: &UnitModel, sigma: f64, tau: f64, x0: f64) -> Result<f64> {
    check_key(unit, "random_walk")?;
    if !(tau > 0.0) {
        return Err(Error::DegenerateMeasurement);
    }
    let model = ScalarModel { a: 1.0, c: 0.0, q: sigma * sigma, obs_var: tau * tau, m0: x0 };
    Ok(scalar_loglik(&model, unit.t0(), unit.times(), unit.data().iter().map(|y| y[0])))
}

fn per_unit(panel: &PanelModel, f: impl Fn(&UnitModel) -> Result<f64>) -> Result<ExactLoglik> {
    let unit_logliks = panel.units().iter().map(f).collect::<Result<Vec<f64>>>()?;
    Ok(ExactLoglik { units: panel.unit_names(), total: unit_logliks.iter().sum(), unit_logliks })
}

/// Exact log-likelihood of a Gompertz panel at its current parameters.
pub fn gompertz_kalman_loglik(panel: &PanelModel) -> Result<ExactLoglik> {
    per_unit(panel, |unit| {
        check_key(unit, "gompertz")?;
        let p = GompertzParams::from_named(&panel.unit_params(unit.name())?)?;
        gompertz_unit_loglik(unit, &p)
    })
}

pub fn random_walk_kalman_loglik(panel: &PanelModel) -> Result<ExactLoglik> {
    per_unit(panel, |unit| {
        check_key(unit, "random_walk")?;
        let p = panel.unit_params(unit.name())?;
        let get = |n: &str| p.get(n).copied().ok_or_else(|| Error::UnknownParameter(n.to_string()));
        random_walk_unit_loglik(unit, get("sigma")?, get("tau")?, get("X_0")?)
    })
}

/// Dispatches on the units' registry key.
pub fn exact_loglik(panel: &PanelModel) -> Result<ExactLoglik> {
    match panel.units().first().map(|u| u.dynamics().registry_key()) {
        Some("random_walk") => random_walk_kalman_loglik(panel),
        _ => gompertz_kalman_loglik(panel),
    }
}
