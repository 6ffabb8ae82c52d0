//! Reference computations shared by the integration suites.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use panelpomp::model::PanelModel;

#[allow(clippy::too_many_arguments)]
/// Log-likelihood of one Gompertz unit computed from the joint Gaussian law
/// of the log observations, without any recursion. Times are assumed to be
/// integers counted from `t0`.
pub fn dense_gompertz_unit(t0: f64, times: &[f64], ys: &[f64], k: f64, r: f64, sigma: f64, tau: f64, x0: f64) -> f64 {
    let a = (-r).exp();
    let steps: Vec<i32> = times.iter().map(|t| (t - t0).round() as i32).collect();
    let n = times.len();
    let z0 = x0.ln();
    let mean = DVector::from_fn(n, |i, _| {
        let an = a.powi(steps[i]);
        an * z0 + (1.0 - an) * k.ln()
    });
    // cov(z_s, z_t) = sigma^2 * sum_{k=1}^{min(s,t)} a^(s-k) a^(t-k)
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let (s, t) = (steps[i], steps[j]);
        let c: f64 = (1..=s.min(t)).map(|q| a.powi(s - q) * a.powi(t - q)).sum();
        sigma * sigma * c + if i == j { tau * tau } else { 0.0 }
    });
    let w = DVector::from_iterator(n, ys.iter().map(|y| y.ln()));
    let resid = w - mean;
    let chol = cov.cholesky().expect("covariance is positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = resid.dot(&chol.solve(&resid));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad) - ys.iter().map(|y| y.ln()).sum::<f64>()
}

/// Per-unit dense log-likelihoods of a Gompertz panel at its parameters.
pub fn dense_gompertz_panel(panel: &PanelModel) -> Vec<f64> {
    panel
        .units()
        .iter()
        .map(|unit| {
            let p = panel.unit_params(unit.name()).unwrap();
            let ys: Vec<f64> = unit.data().iter().map(|y| y[0]).collect();
            dense_gompertz_unit(unit.t0(), unit.times(), &ys, p["K"], p["r"], p["sigma"], p["tau"], p["X_0"])
        })
        .collect()
}

/// Plain-arithmetic log of the mean of exponentials.
pub fn naive_logmeanexp(x: &[f64]) -> f64 {
    (x.iter().map(|v| v.exp()).sum::<f64>() / x.len() as f64).ln()
}

/// Delete-one jackknife standard error of `stat` over replicate indices.
pub fn jackknife(n: usize, stat: impl Fn(&[usize]) -> f64) -> f64 {
    let loo: Vec<f64> = (0..n)
        .map(|i| stat(&(0..n).filter(|&j| j != i).collect::<Vec<_>>()))
        .collect();
    let m = loo.iter().sum::<f64>() / n as f64;
    ((n as f64 - 1.0) / n as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

pub fn sd(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}
