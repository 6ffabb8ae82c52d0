//! Stochastic Gompertz population model with lognormal measurements.
//!
//! ```text
//! X[n+1] = K^(1 - exp(-r)) * X[n]^exp(-r) * eps[n],   log eps ~ N(0, sigma^2)
//! log Y[n] | X[n] ~ N(log X[n], tau^2)
//! ```
//!
//! On the log scale this is a linear Gaussian state-space model, which is what
//! makes the exact likelihood in [`super::kalman`] available.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{PanelModel, SlotResult, SpecificInput, UnitDynamics, UnitModel};
use crate::params::{NamedValues, TransformSpec};
use crate::rng::{Stream, StreamRng};

const K: usize = 0;
const R: usize = 1;
const SIGMA: usize = 2;
const TAU: usize = 3;
const X_0: usize = 4;

pub const PARAM_NAMES: [&str; 5] = ["K", "r", "sigma", "tau", "X_0"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GompertzParams {
    /// Carrying capacity.
    pub k: f64,
    /// Growth rate.
    pub r: f64,
    /// Process noise sd (log scale).
    pub sigma: f64,
    /// Measurement noise sd (log scale).
    pub tau: f64,
    /// Initial density.
    pub x0: f64,
}

impl Default for GompertzParams {
    fn default() -> Self {
        Self { k: 1.0, r: 0.1, sigma: 0.1, tau: 0.1, x0: 1.0 }
    }
}

impl GompertzParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.k, self.r, self.sigma, self.tau, self.x0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("Gompertz parameters must be finite".into()));
        }
        if self.k <= 0.0 || self.r <= 0.0 || self.x0 <= 0.0 || self.sigma < 0.0 || self.tau < 0.0 {
            return Err(Error::Domain(format!("invalid Gompertz parameters {self:?}")));
        }
        Ok(())
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self { k: p[K], r: p[R], sigma: p[SIGMA], tau: p[TAU], x0: p[X_0] }
    }

    pub fn from_named(p: &NamedValues) -> Result<Self> {
        let get = |n: &str| p.get(n).copied().ok_or_else(|| Error::UnknownParameter(n.to_string()));
        Ok(Self { k: get("K")?, r: get("r")?, sigma: get("sigma")?, tau: get("tau")?, x0: get("X_0")? })
    }

    pub fn to_named(&self) -> NamedValues {
        PARAM_NAMES
            .iter()
            .zip([self.k, self.r, self.sigma, self.tau, self.x0])
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }
}

#[inline]
fn step_log(log_x: f64, k: f64, r: f64, sigma: f64, z: f64) -> f64 {
    let a = (-r).exp();
    a * log_x + (1.0 - a) * k.ln() + sigma * z
}

/// One transition of the Gompertz map.
pub fn gompertz_step<R: Rng + ?Sized>(x: f64, params: &GompertzParams, rng: &mut R) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("Gompertz state must be positive, got {x}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(step_log(x.ln(), params.k, params.r, params.sigma, z).exp())
}

/// Lognormal measurement density of `y` given state `x`.
pub fn gompertz_dmeasure(y: f64, x: f64, tau: f64, log: bool) -> Result<f64> {
    if tau == 0.0 {
        return Err(Error::DegenerateMeasurement);
    }
    if !(y > 0.0 && x > 0.0 && tau > 0.0) {
        return Err(Error::Domain(format!("gompertz_dmeasure needs y, x, tau > 0 (got {y}, {x}, {tau})")));
    }
    let d = log_density(y, x, tau);
    Ok(if log { d } else { d.exp() })
}

#[inline]
fn log_density(y: f64, x: f64, tau: f64) -> f64 {
    let z = (y.ln() - x.ln()) / tau;
    -0.5 * z * z - (tau * (2.0 * PI).sqrt()).ln() - y.ln()
}

#[derive(Debug)]
pub struct Gompertz {
    params: Vec<String>,
    states: Vec<String>,
    obs: Vec<String>,
}

impl Default for Gompertz {
    fn default() -> Self {
        Self {
            params: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            states: vec!["X".into()],
            obs: vec!["Y".into()],
        }
    }
}

/// Number of unit-length steps between two observation times.
pub(crate) fn n_steps(t_from: f64, t_to: f64) -> usize {
    (t_to - t_from).round().max(0.0) as usize
}

impl UnitDynamics for Gompertz {
    fn registry_key(&self) -> &str {
        "gompertz"
    }

    fn param_names(&self) -> &[String] {
        &self.params
    }

    fn state_names(&self) -> &[String] {
        &self.states
    }

    fn obs_names(&self) -> &[String] {
        &self.obs
    }

    fn rinit(&self, p: &[f64], _t0: f64, _rng: &mut StreamRng, state: &mut [f64]) -> SlotResult<()> {
        state[0] = p[X_0];
        Ok(())
    }

    fn rprocess(&self, state: &mut [f64], t_from: f64, t_to: f64, p: &[f64], rng: &mut StreamRng) -> SlotResult<()> {
        let mut log_x = state[0].ln();
        for _ in 0..n_steps(t_from, t_to) {
            let z: f64 = rng.sample(StandardNormal);
            log_x = step_log(log_x, p[K], p[R], p[SIGMA], z);
        }
        state[0] = log_x.exp();
        Ok(())
    }

    fn rmeasure(&self, state: &[f64], _t: f64, p: &[f64], rng: &mut StreamRng, obs: &mut [f64]) -> SlotResult<()> {
        let z: f64 = rng.sample(StandardNormal);
        obs[0] = state[0] * (p[TAU] * z).exp();
        Ok(())
    }

    fn dmeasure(&self, obs: &[f64], state: &[f64], _t: f64, p: &[f64]) -> SlotResult<f64> {
        let (y, x, tau) = (obs[0], state[0], p[TAU]);
        if !(y > 0.0 && x > 0.0 && tau > 0.0) || !y.is_finite() || !x.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(log_density(y, x, tau))
    }

    fn dinit(&self, state: &[f64], _t0: f64, p: &[f64]) -> SlotResult<f64> {
        Ok(if state[0] == p[X_0] { 0.0 } else { f64::NEG_INFINITY })
    }
}

/// A single Gompertz unit with log transforms on all parameters.
pub fn gompertz_unit(name: &str, params: &GompertzParams, t0: f64, times: Vec<f64>) -> Result<UnitModel> {
    params.validate()?;
    Ok(UnitModel::new(name, Arc::new(Gompertz::default()), t0, times, params.to_named())?
        .with_transforms(TransformSpec::log(&PARAM_NAMES)))
}

/// `U` Gompertz units observed at times `1..=N` from `t0 = 0`, with `r` and
/// `sigma` shared and `K`, `tau`, `X_0` unit-specific. Data are simulated
/// with per-unit streams `stream.child(0).child_str(unit)`.
pub fn panel_gompertz(units: usize, n: usize, params: &GompertzParams, stream: Stream) -> Result<PanelModel> {
    if units == 0 || n == 0 {
        return Err(Error::Argument("panel_gompertz needs U >= 1 and N >= 1".into()));
    }
    let times: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let unit_models = (1..=units)
        .map(|u| gompertz_unit(&format!("unit{u}"), params, 0.0, times.clone()))
        .collect::<Result<Vec<_>>>()?;
    let shared: NamedValues = [("r".to_string(), params.r), ("sigma".to_string(), params.sigma)].into_iter().collect();
    let specific = SpecificInput::Names(vec!["K".into(), "tau".into(), "X_0".into()]);
    let panel = PanelModel::build(unit_models, shared, specific)?;
    Ok(panel.simulate(1, stream, false)?.remove(0).panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn rng() -> StreamRng {
        Stream::new(11).rng()
    }

    #[test]
    fn step_examples() {
        let fixed = GompertzParams { k: 1.0, r: 0.7, sigma: 0.0, tau: 0.1, x0: 1.0 };
        assert_eq!(gompertz_step(1.0, &fixed, &mut rng()).unwrap(), 1.0);
        let no_growth = GompertzParams { k: 3.0, r: 0.0, sigma: 0.0, ..fixed };
        assert!((gompertz_step(2.5, &no_growth, &mut rng()).unwrap() - 2.5).abs() < 1e-15);
        let p = GompertzParams { k: 1.5, r: 0.1, sigma: 0.0, ..fixed };
        let expect = ((1.0 - (-0.1f64).exp()) * 1.5f64.ln()).exp();
        let got = gompertz_step(1.0, &p, &mut rng()).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 1.03934).abs() < 1e-5);
        assert!(gompertz_step(0.0, &p, &mut rng()).is_err());
    }

    #[test]
    fn deterministic_contraction() {
        let p: [f64; 5] = [2.0, 0.3, 0.0, 0.1, 0.5];
        let d = Gompertz::default();
        let mut x = [p[X_0]];
        let mut r = rng();
        let gap0 = (p[X_0].ln() - p[K].ln()).abs();
        for n in 1..=30 {
            d.rprocess(&mut x, (n - 1) as f64, n as f64, &p, &mut r).unwrap();
            let gap = (x[0].ln() - p[K].ln()).abs();
            let expect = (-p[R] * n as f64).exp() * gap0;
            assert!((gap - expect).abs() < 1e-12, "n={n}: {gap} vs {expect}");
        }
    }

    #[test]
    fn dmeasure_examples() {
        let tau = 0.1;
        let d = gompertz_dmeasure(1.0, 1.0, tau, true).unwrap();
        assert!((d - 1.383_646_559_789_372_8).abs() < 1e-12);
        let y: f64 = 2.0;
        let d = gompertz_dmeasure(y, y, 0.3, true).unwrap();
        assert!((d - (-(0.3 * (2.0 * PI).sqrt()).ln() - y.ln())).abs() < 1e-14);
        assert!(matches!(gompertz_dmeasure(1.0, 1.0, 0.0, true), Err(Error::DegenerateMeasurement)));
        assert!((gompertz_dmeasure(1.0, 1.0, tau, false).unwrap() - d_exp(1.0, 1.0, tau)).abs() < 1e-12);
    }

    fn d_exp(y: f64, x: f64, tau: f64) -> f64 {
        log_density(y, x, tau).exp()
    }

    #[test]
    fn dmeasure_integrates_to_one() {
        // Substituting y = exp(s) turns the integral into one over s of
        // f(exp(s)) exp(s); composite Simpson over +-12 tau is ample.
        let (x, tau): (f64, f64) = (1.7, 0.25);
        let (lo, hi, n) = (x.ln() - 12.0 * tau, x.ln() + 12.0 * tau, 20_000);
        let h = (hi - lo) / n as f64;
        let f = |s: f64| gompertz_dmeasure(s.exp(), x, tau, false).unwrap() * s.exp();
        let mut sum = f(lo) + f(hi);
        for i in 1..n {
            sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((sum * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_simulation() {
        let p = GompertzParams { k: 1.0, r: 0.1, sigma: 0.0, tau: 0.0, x0: 1.0 };
        let panel = panel_gompertz(2, 10, &p, Stream::new(1)).unwrap();
        for unit in panel.units() {
            assert!(unit.data().iter().all(|y| y[0] == 1.0));
        }
    }

    #[test]
    fn panel_shape_and_positivity() {
        let panel = panel_gompertz(50, 100, &GompertzParams::default(), Stream::new(2)).unwrap();
        assert_eq!(panel.units().len(), 50);
        assert!(panel.units().iter().all(|u| u.data().len() == 100));
        let minimal = panel_gompertz(1, 1, &GompertzParams::default(), Stream::new(2)).unwrap();
        assert_eq!(minimal.units()[0].data().len(), 1);
        for seed in 0..1000 {
            let p = panel_gompertz(1, 5, &GompertzParams { sigma: 0.5, tau: 0.5, ..Default::default() }, Stream::new(seed)).unwrap();
            assert!(p.units()[0].data().iter().all(|y| y[0] > 0.0 && y[0].is_finite()));
        }
        assert!(panel_gompertz(0, 5, &GompertzParams::default(), Stream::new(2)).is_err());
    }

    #[test]
    fn log_y1_moments_match_closed_form() {
        // log Y1 ~ N(a log X0 + (1-a) log K, sigma^2 + tau^2), a = exp(-r)
        let p = GompertzParams { k: 2.0, r: 0.2, sigma: 0.3, tau: 0.2, x0: 0.5 };
        let panel = panel_gompertz(1, 1, &p, Stream::new(0)).unwrap();
        let n = 100_000;
        let sims = panel.simulate(n, Stream::new(99), false).unwrap();
        let logs: Vec<f64> = sims.iter().map(|s| s.panel.units()[0].data()[0][0].ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let a = (-p.r).exp();
        let expect = a * p.x0.ln() + (1.0 - a) * p.k.ln();
        let se = ((p.sigma * p.sigma + p.tau * p.tau) / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect} (se {se})");
    }

    #[test]
    fn named_roundtrip() {
        let p = GompertzParams { k: 1.2, r: 0.3, sigma: 0.05, tau: 0.2, x0: 0.9 };
        assert_eq!(GompertzParams::from_named(&p.to_named()).unwrap(), p);
        let _ = ParamSet::from_flat(&p.to_named(), None).unwrap();
    }
}
