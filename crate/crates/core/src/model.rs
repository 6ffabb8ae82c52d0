//! Unit models and panels.
//!
//! A [`UnitModel`] pairs a [`UnitDynamics`] implementation (the simulator and
//! density slots) with one unit's observation times, data and default
//! parameters. A [`PanelModel`] is an ordered collection of unit models plus
//! a [`ParamSet`] splitting parameters into shared and unit-specific ones.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result, Slot};
use crate::params::{Layout, NamedValues, ParamSet, SpecificMatrix, TransformSpec};
use crate::rng::{Stream, StreamRng};

/// Returned by a slot the model does not implement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MissingSlot(pub Slot);

pub type SlotResult<T> = std::result::Result<T, MissingSlot>;

/// Model functions for one unit. Parameters arrive as a slice ordered like
/// [`UnitDynamics::param_names`]; states and observations are flat slices of
/// length `state_names().len()` and `obs_names().len()`.
///
/// Implementations must be re-entrant: the same instance is called from many
/// threads, each with its own generator.
pub trait UnitDynamics: Send + Sync + fmt::Debug {
    /// Key under which the model is registered (see [`crate::models::registry`]).
    fn registry_key(&self) -> &str;

    fn param_names(&self) -> &[String];

    fn state_names(&self) -> &[String];

    fn obs_names(&self) -> &[String];

    fn rinit(&self, _params: &[f64], _t0: f64, _rng: &mut StreamRng, _state: &mut [f64]) -> SlotResult<()> {
        Err(MissingSlot(Slot::Rinit))
    }

    /// Advances `state` from `t_from` to `t_to`.
    fn rprocess(
        &self,
        _state: &mut [f64],
        _t_from: f64,
        _t_to: f64,
        _params: &[f64],
        _rng: &mut StreamRng,
    ) -> SlotResult<()> {
        Err(MissingSlot(Slot::Rprocess))
    }

    fn rmeasure(
        &self,
        _state: &[f64],
        _t: f64,
        _params: &[f64],
        _rng: &mut StreamRng,
        _obs: &mut [f64],
    ) -> SlotResult<()> {
        Err(MissingSlot(Slot::Rmeasure))
    }

    /// Log measurement density; `-inf` off the support, never NaN.
    fn dmeasure(&self, _obs: &[f64], _state: &[f64], _t: f64, _params: &[f64]) -> SlotResult<f64> {
        Err(MissingSlot(Slot::Dmeasure))
    }

    fn dinit(&self, _state: &[f64], _t0: f64, _params: &[f64]) -> SlotResult<f64> {
        Err(MissingSlot(Slot::Dinit))
    }

    fn dprocess(&self, _to: &[f64], _from: &[f64], _t_from: f64, _t_to: f64, _params: &[f64]) -> SlotResult<f64> {
        Err(MissingSlot(Slot::Dprocess))
    }
}

#[derive(Clone, Debug)]
pub struct UnitModel {
    name: String,
    t0: f64,
    times: Vec<f64>,
    /// One observation vector per time, or empty before simulation.
    data: Vec<Vec<f64>>,
    dynamics: Arc<dyn UnitDynamics>,
    defaults: NamedValues,
    transforms: TransformSpec,
}

impl UnitModel {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn UnitDynamics>,
        t0: f64,
        times: Vec<f64>,
        defaults: NamedValues,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(['[', ']']) {
            return Err(Error::NameFormat(name));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!("unit `{name}`: times must be finite and strictly increasing")));
        }
        if !t0.is_finite() || times.first().is_some_and(|&t1| t0 > t1) {
            return Err(Error::Argument(format!("unit `{name}`: t0 must not exceed the first observation time")));
        }
        Ok(Self { name, t0, times, data: Vec::new(), dynamics, defaults, transforms: TransformSpec::new() })
    }

    pub fn with_data(mut self, data: Vec<Vec<f64>>) -> Result<Self> {
        if !data.is_empty() {
            if data.len() != self.times.len() {
                return Err(Error::Argument(format!(
                    "unit `{}`: {} observations for {} times",
                    self.name,
                    data.len(),
                    self.times.len()
                )));
            }
            let width = self.dynamics.obs_names().len();
            if data.iter().any(|y| y.len() != width) {
                return Err(Error::Argument(format!("unit `{}`: observation vectors must have length {width}", self.name)));
            }
        }
        self.data = data;
        Ok(self)
    }

    pub fn with_transforms(mut self, transforms: TransformSpec) -> Self {
        self.transforms = transforms;
        self
    }

    pub fn with_defaults(mut self, defaults: NamedValues) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn has_data(&self) -> bool {
        !self.data.is_empty() || self.times.is_empty()
    }

    pub fn dynamics(&self) -> &Arc<dyn UnitDynamics> {
        &self.dynamics
    }

    pub fn defaults(&self) -> &NamedValues {
        &self.defaults
    }

    pub fn transforms(&self) -> &TransformSpec {
        &self.transforms
    }

    pub(crate) fn slot_error(&self, missing: MissingSlot) -> Error {
        Error::MissingSlot { unit: self.name.clone(), slot: missing.0 }
    }

    /// Gathers the dynamics' parameter vector from named values.
    pub fn param_vector(&self, params: &NamedValues) -> Result<Vec<f64>> {
        self.dynamics
            .param_names()
            .iter()
            .map(|n| params.get(n).copied().ok_or_else(|| Error::UnknownParameter(n.clone())))
            .collect()
    }

    /// Simulates states and observations at every observation time.
    pub fn simulate(&self, params: &[f64], rng: &mut StreamRng) -> Result<UnitSimulation> {
        let dyns = &self.dynamics;
        let mut state = vec![0.0; dyns.state_names().len()];
        dyns.rinit(params, self.t0, rng, &mut state).map_err(|e| self.slot_error(e))?;
        let mut t_prev = self.t0;
        let mut states = Vec::with_capacity(self.times.len());
        let mut observations = Vec::with_capacity(self.times.len());
        for &t in &self.times {
            dyns.rprocess(&mut state, t_prev, t, params, rng).map_err(|e| self.slot_error(e))?;
            let mut y = vec![0.0; dyns.obs_names().len()];
            dyns.rmeasure(&state, t, params, rng, &mut y).map_err(|e| self.slot_error(e))?;
            states.push(state.clone());
            observations.push(y);
            t_prev = t;
        }
        Ok(UnitSimulation { states, observations })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitSimulation {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

/// Specific parameters for [`PanelModel::build`].
#[derive(Clone, Debug)]
pub enum SpecificInput {
    /// Names whose values are taken from each unit's defaults.
    Names(Vec<String>),
    Matrix(SpecificMatrix),
}

#[derive(Clone, Debug)]
pub struct PanelModel {
    units: Vec<UnitModel>,
    params: ParamSet,
    transforms: TransformSpec,
    /// Per unit: flattened index of each dynamics parameter.
    unit_index: Vec<Vec<usize>>,
}

impl PanelModel {
    /// Assembles a panel. Shared values override the units' defaults; a
    /// specific name list is filled from each unit's defaults.
    pub fn build(units: Vec<UnitModel>, shared: NamedValues, specific: SpecificInput) -> Result<Self> {
        let unit_names: Vec<String> = units.iter().map(|u| u.name.clone()).collect();
        for (i, n) in unit_names.iter().enumerate() {
            if unit_names[..i].contains(n) {
                return Err(Error::Construction(format!("duplicate unit name `{n}`")));
            }
        }
        let matrix = match specific {
            SpecificInput::Matrix(m) => {
                if m.units() != unit_names.as_slice() {
                    return Err(Error::Construction("specific matrix columns must match the unit order".into()));
                }
                m
            }
            SpecificInput::Names(names) => {
                let mut values = Vec::with_capacity(names.len() * units.len());
                for name in &names {
                    for unit in &units {
                        let v = unit.defaults.get(name).ok_or_else(|| {
                            Error::Construction(format!("unit `{}` has no value for specific parameter `{name}`", unit.name))
                        })?;
                        values.push(*v);
                    }
                }
                SpecificMatrix::new(names, unit_names.clone(), values).map_err(|e| Error::Construction(e.to_string()))?
            }
        };
        for name in shared.keys() {
            if matrix.row_index(name).is_some() {
                return Err(Error::Construction(format!("`{name}` is both shared and unit-specific")));
            }
        }
        let params = ParamSet::new(shared, matrix).map_err(|e| Error::Construction(e.to_string()))?;
        let transforms = units
            .iter()
            .try_fold(TransformSpec::new(), |acc, u| acc.merge(&u.transforms))?;
        Self::assemble(units, params, transforms)
    }

    fn assemble(units: Vec<UnitModel>, params: ParamSet, transforms: TransformSpec) -> Result<Self> {
        let layout = params.layout();
        let mut unit_index = Vec::with_capacity(units.len());
        for (u, unit) in units.iter().enumerate() {
            let idx = unit
                .dynamics
                .param_names()
                .iter()
                .map(|name| {
                    if let Some(a) = layout.shared.iter().position(|s| s == name) {
                        Ok(layout.shared_index(a))
                    } else if let Some(b) = layout.specific.iter().position(|s| s == name) {
                        Ok(layout.specific_index(b, u))
                    } else {
                        Err(Error::Construction(format!(
                            "parameter `{name}` used by unit `{}` is neither shared nor specific",
                            unit.name
                        )))
                    }
                })
                .collect::<Result<Vec<usize>>>()?;
            unit_index.push(idx);
        }
        Ok(Self { units, params, transforms, unit_index })
    }

    pub fn units(&self) -> &[UnitModel] {
        &self.units
    }

    pub fn unit(&self, name: &str) -> Option<&UnitModel> {
        self.units.iter().find(|u| u.name == name)
    }

    pub fn unit_names(&self) -> Vec<String> {
        self.units.iter().map(|u| u.name.clone()).collect()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn layout(&self) -> Layout {
        self.params.layout()
    }

    pub fn transforms(&self) -> &TransformSpec {
        &self.transforms
    }

    /// Same units under new parameters; the layout may differ (e.g. after
    /// reclassification) but the unit order must match.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if params.units() != self.unit_names().as_slice() {
            return Err(Error::Argument("parameter units do not match the panel".into()));
        }
        Self::assemble(self.units.clone(), params, self.transforms.clone())
    }

    /// Replaces values by flat name, keeping the layout. Bare names of
    /// specific parameters set every unit.
    pub fn with_values(&self, values: &NamedValues) -> Result<Self> {
        let mut params = self.params.clone();
        for (name, &v) in values {
            params.set(name, v)?;
        }
        self.with_params(params)
    }

    pub fn with_units(&self, units: Vec<UnitModel>) -> Result<Self> {
        if units.iter().map(UnitModel::name).ne(self.units.iter().map(UnitModel::name)) {
            return Err(Error::Argument("replacement units must keep names and order".into()));
        }
        Self::assemble(units, self.params.clone(), self.transforms.clone())
    }

    pub fn with_transforms(&self, transforms: TransformSpec) -> Self {
        Self { transforms, ..self.clone() }
    }

    /// Indices into the flattened parameter vector, in the order unit `u`'s
    /// dynamics expects them.
    pub fn unit_param_indices(&self, u: usize) -> &[usize] {
        &self.unit_index[u]
    }

    /// Shared entries plus unit `name`'s column, by base name.
    pub fn unit_params(&self, name: &str) -> Result<NamedValues> {
        self.params.unit_params(name)
    }

    /// Each unit paired with its materialized parameters. The returned units
    /// carry those parameters as their defaults.
    pub fn as_unit_list(&self) -> Vec<(UnitModel, NamedValues)> {
        self.units
            .iter()
            .map(|unit| {
                let params = self.params.unit_params(&unit.name).expect("unit present");
                (unit.clone().with_defaults(params.clone()), params)
            })
            .collect()
    }

    /// Sub-panel with the named units, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let units: Vec<UnitModel> = names
            .iter()
            .map(|n| self.unit(n).cloned().ok_or_else(|| Error::Argument(format!("unknown unit `{n}`"))))
            .collect::<Result<_>>()?;
        let m = self.params.specific();
        let mut values = Vec::new();
        for b in 0..m.rows().len() {
            for n in names {
                values.push(m.get(b, m.unit_index(n).unwrap()));
            }
        }
        let matrix = SpecificMatrix::new(m.rows().to_vec(), names.iter().map(|s| s.to_string()).collect(), values)?;
        let params = ParamSet::new(self.params.shared().clone(), matrix)?;
        Self::assemble(units, params, self.transforms.clone())
    }

    /// Draws `nsim` panels from the full generative model. Unit `u` of
    /// simulation `i` uses stream `stream.child(i).child_str(u)`.
    pub fn simulate(&self, nsim: usize, stream: Stream, keep_states: bool) -> Result<Vec<PanelSimulation>> {
        let theta = self.params.values();
        (0..nsim)
            .map(|i| {
                let sim_stream = stream.child(i as u64);
                let mut units = Vec::with_capacity(self.units.len());
                let mut states = Vec::new();
                for (u, unit) in self.units.iter().enumerate() {
                    let params: Vec<f64> = self.unit_index[u].iter().map(|&k| theta[k]).collect();
                    let mut rng = sim_stream.child_str(&unit.name).rng();
                    let sim = unit.simulate(&params, &mut rng)?;
                    units.push(unit.clone().with_data(sim.observations)?);
                    if keep_states {
                        states.push(sim.states);
                    }
                }
                Ok(PanelSimulation {
                    panel: self.with_units(units)?,
                    states: keep_states.then_some(states),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PanelSimulation {
    pub panel: PanelModel,
    /// Per unit, per time latent states, when requested.
    pub states: Option<Vec<Vec<Vec<f64>>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gompertz::{gompertz_unit, GompertzParams};

    fn gomp_units() -> Vec<UnitModel> {
        let p = |k: f64, tau: f64| GompertzParams { k, r: 0.1, sigma: 0.1, tau, x0: 1.0 };
        vec![
            gompertz_unit("unit1", &p(1.0, 0.1), 0.0, (1..=20).map(f64::from).collect()).unwrap(),
            gompertz_unit("unit2", &p(1.5, 0.07), 0.0, (1..=21).map(f64::from).collect()).unwrap(),
            gompertz_unit("unit3", &p(1.2, 0.15), 0.0, (3..=25).map(f64::from).collect()).unwrap(),
        ]
    }

    fn named(pairs: &[(&str, f64)]) -> NamedValues {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn gomp() -> PanelModel {
        PanelModel::build(
            gomp_units(),
            named(&[("r", 0.1), ("sigma", 0.1)]),
            SpecificInput::Names(vec!["K".into(), "tau".into(), "X_0".into()]),
        )
        .unwrap()
    }

    #[test]
    fn build_three_unit_panel() {
        let p = gomp();
        let layout = p.layout();
        assert_eq!((layout.shared.len(), layout.specific.len(), layout.units.len(), layout.len()), (2, 3, 3, 11));
        assert_eq!(p.params().get("K[unit2]"), Some(1.5));
        assert_eq!(p.params().get("tau[unit3]"), Some(0.15));
    }

    #[test]
    fn build_errors() {
        let err = PanelModel::build(gomp_units(), named(&[("r", 0.1), ("sigma", 0.1)]), SpecificInput::Names(vec!["zeta".into()]));
        assert!(matches!(err, Err(Error::Construction(_))));
        let err = PanelModel::build(
            gomp_units(),
            named(&[("r", 0.1), ("K", 1.0)]),
            SpecificInput::Names(vec!["K".into(), "sigma".into(), "tau".into(), "X_0".into()]),
        );
        assert!(matches!(err, Err(Error::Construction(_))));
        let mut units = gomp_units();
        units[1] = units[0].clone();
        let err = PanelModel::build(units, named(&[]), SpecificInput::Names(vec![]));
        assert!(matches!(err, Err(Error::Construction(_))));
        // a parameter the dynamics needs but nobody supplies
        let err = PanelModel::build(gomp_units(), named(&[("r", 0.1)]), SpecificInput::Names(vec!["K".into()]));
        assert!(matches!(err, Err(Error::Construction(_))));
    }

    #[test]
    fn single_unit_all_shared() {
        let unit = gomp_units().remove(0);
        let shared = unit.defaults().clone();
        let p = PanelModel::build(vec![unit], shared.clone(), SpecificInput::Names(vec![])).unwrap();
        assert!(p.params().specific().rows().is_empty());
        assert_eq!(p.unit_params("unit1").unwrap(), shared);
    }

    #[test]
    fn unit_params_after_edit() {
        let p = gomp().with_values(&named(&[("K[unit2]", 0.9), ("tau[unit2]", 0.07)])).unwrap();
        assert_eq!(
            p.unit_params("unit2").unwrap(),
            named(&[("r", 0.1), ("sigma", 0.1), ("K", 0.9), ("tau", 0.07), ("X_0", 1.0)])
        );
    }

    #[test]
    fn unit_list_roundtrip_and_isolation() {
        let p = gomp();
        let mut list = p.as_unit_list();
        assert_eq!(list.len(), 3);
        let units: Vec<UnitModel> = list.iter().map(|(u, _)| u.clone()).collect();
        let rebuilt = PanelModel::build(
            units,
            p.params().shared().clone(),
            SpecificInput::Names(p.params().specific().rows().to_vec()),
        )
        .unwrap();
        assert_eq!(rebuilt.params().flatten(), p.params().flatten());
        list[0].1.insert("K".into(), 99.0);
        assert_eq!(p.params().get("K[unit1]"), Some(1.0));
        // units without data pass through with empty data
        assert!(list.iter().all(|(u, _)| u.data().is_empty()));
    }

    #[test]
    fn simulate_fills_data_and_sub_panel_matches() {
        let p = gomp();
        let sims = p.simulate(2, Stream::new(5), true).unwrap();
        assert_eq!(sims.len(), 2);
        let full = &sims[1];
        for (u, unit) in full.panel.units().iter().enumerate() {
            assert_eq!(unit.data().len(), unit.times().len());
            assert_eq!(full.states.as_ref().unwrap()[u].len(), unit.times().len());
        }
        let sub = p.subset(&["unit3"]).unwrap().simulate(2, Stream::new(5), false).unwrap();
        assert_eq!(sub[1].panel.units()[0].data(), full.panel.units()[2].data());
    }

    #[derive(Debug)]
    struct NoMeasure {
        names: Vec<String>,
    }

    impl UnitDynamics for NoMeasure {
        fn registry_key(&self) -> &str {
            "no_measure"
        }
        fn param_names(&self) -> &[String] {
            &[]
        }
        fn state_names(&self) -> &[String] {
            &self.names
        }
        fn obs_names(&self) -> &[String] {
            &self.names
        }
        fn rinit(&self, _: &[f64], _: f64, _: &mut StreamRng, x: &mut [f64]) -> SlotResult<()> {
            x[0] = 0.0;
            Ok(())
        }
        fn rprocess(&self, _: &mut [f64], _: f64, _: f64, _: &[f64], _: &mut StreamRng) -> SlotResult<()> {
            Ok(())
        }
    }

    #[test]
    fn missing_slot_names_unit_and_slot() {
        let dynamics = Arc::new(NoMeasure { names: vec!["x".into()] });
        let unit = UnitModel::new("lonely", dynamics, 0.0, vec![1.0], NamedValues::new()).unwrap();
        let p = PanelModel::build(vec![unit], NamedValues::new(), SpecificInput::Names(vec![])).unwrap();
        match p.simulate(1, Stream::new(1), false) {
            Err(Error::MissingSlot { unit, slot }) => {
                assert_eq!(unit, "lonely");
                assert_eq!(slot, Slot::Rmeasure);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_times_validated() {
        let d = Arc::new(NoMeasure { names: vec!["x".into()] });
        assert!(UnitModel::new("a", d.clone(), 0.0, vec![1.0, 1.0], NamedValues::new()).is_err());
        assert!(UnitModel::new("a", d.clone(), 2.0, vec![1.0], NamedValues::new()).is_err());
        assert!(UnitModel::new("a", d, 1.0, vec![1.0, 3.0], NamedValues::new()).is_ok());
    }
}
