//! Gaussian random walks observed with Gaussian noise.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::gompertz::n_steps;
use crate::error::{Error, Result};
use crate::model::{PanelModel, SlotResult, SpecificInput, UnitDynamics, UnitModel};
use crate::params::{NamedValues, TransformSpec};
use crate::rng::{Stream, StreamRng};

pub const PARAM_NAMES: [&str; 3] = ["sigma", "tau", "X_0"];

/// Default measurement sd.
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug)]
pub struct RandomWalk {
    params: Vec<String>,
    states: Vec<String>,
    obs: Vec<String>,
}

impl Default for RandomWalk {
    fn default() -> Self {
        Self {
            params: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            states: vec!["X".into()],
            obs: vec!["Y".into()],
        }
    }
}

impl UnitDynamics for RandomWalk {
    fn registry_key(&self) -> &str {
        "random_walk"
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
        state[0] = p[2];
        Ok(())
    }

    fn rprocess(&self, state: &mut [f64], t_from: f64, t_to: f64, p: &[f64], rng: &mut StreamRng) -> SlotResult<()> {
        for _ in 0..n_steps(t_from, t_to) {
            let z: f64 = rng.sample(StandardNormal);
            state[0] += p[0] * z;
        }
        Ok(())
    }

    fn rmeasure(&self, state: &[f64], _t: f64, p: &[f64], rng: &mut StreamRng, obs: &mut [f64]) -> SlotResult<()> {
        let z: f64 = rng.sample(StandardNormal);
        obs[0] = state[0] + p[1] * z;
        Ok(())
    }

    fn dmeasure(&self, obs: &[f64], state: &[f64], _t: f64, p: &[f64]) -> SlotResult<f64> {
        let tau = p[1];
        if !(tau > 0.0) || !obs[0].is_finite() || !state[0].is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let z = (obs[0] - state[0]) / tau;
        Ok(-0.5 * z * z - tau.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// `U` random-walk units observed at times `1..=N`, with process sd `sd`
/// shared and measurement sd and initial value unit-specific.
pub fn panel_random_walk(units: usize, n: usize, sd: f64, stream: Stream) -> Result<PanelModel> {
    if units == 0 || n == 0 {
        return Err(Error::Argument("panel_random_walk needs U >= 1 and N >= 1".into()));
    }
    if !(sd >= 0.0 && sd.is_finite()) {
        return Err(Error::Domain(format!("random walk sd must be >= 0, got {sd}")));
    }
    let times: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let defaults: NamedValues =
        PARAM_NAMES.iter().map(|s| s.to_string()).zip([sd, DEFAULT_TAU, 0.0]).collect();
    let unit_models = (1..=units)
        .map(|u| {
            Ok(UnitModel::new(format!("unit{u}"), Arc::new(RandomWalk::default()), 0.0, times.clone(), defaults.clone())?
                .with_transforms(TransformSpec::log(&["sigma", "tau"])))
        })
        .collect::<Result<Vec<_>>>()?;
    let shared: NamedValues = [("sigma".to_string(), sd)].into_iter().collect();
    let panel = PanelModel::build(unit_models, shared, SpecificInput::Names(vec!["tau".into(), "X_0".into()]))?;
    Ok(panel.simulate(1, stream, false)?.remove(0).panel)
}
