use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Layout;
use crate::error::{Error, Result};

/// Random-walk intensity for one base parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RwSd {
    /// One intensity; recycled to every unit for unit-specific parameters.
    Recycled(f64),
    /// Separate intensity per unit name; units not listed get 0.
    PerUnit(IndexMap<String, f64>),
}

/// Perturbation intensities on the estimation scale. Parameters without an
/// entry are held fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RwSdSpec {
    entries: IndexMap<String, RwSd>,
    /// Optional multiplier per observation index `n = 0..=N`, by base name.
    profiles: IndexMap<String, Vec<f64>>,
}

impl RwSdSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, sd: f64) -> Self {
        self.entries.insert(name.to_string(), RwSd::Recycled(sd));
        self
    }

    pub fn with_unit(mut self, name: &str, unit: &str, sd: f64) -> Self {
        let entry = self.entries.entry(name.to_string()).or_insert_with(|| RwSd::PerUnit(IndexMap::new()));
        if let RwSd::Recycled(_) = entry {
            *entry = RwSd::PerUnit(IndexMap::new());
        }
        if let RwSd::PerUnit(map) = entry {
            map.insert(unit.to_string(), sd);
        }
        self
    }

    /// Tabulated per-time multipliers for `name`; index 0 applies at the
    /// initial perturbation.
    pub fn with_profile(mut self, name: &str, multipliers: Vec<f64>) -> Self {
        self.profiles.insert(name.to_string(), multipliers);
        self
    }

    pub fn entries(&self) -> &IndexMap<String, RwSd> {
        &self.entries
    }

    pub fn profiles(&self) -> &IndexMap<String, Vec<f64>> {
        &self.profiles
    }

    pub fn remove(&mut self, name: &str) {
        self.entries.shift_remove(name);
        self.profiles.shift_remove(name);
    }

    /// Keeps only the listed base names.
    pub fn retain(&self, names: &[String]) -> Self {
        let mut out = self.clone();
        out.entries.retain(|k, _| names.contains(k));
        out.profiles.retain(|k, _| names.contains(k));
        out
    }

    /// Single-unit view: per-unit entries collapse to `unit`'s intensity and
    /// only `names` are kept.
    pub fn for_unit(&self, unit: &str, names: &[String]) -> Self {
        let mut out = self.retain(names);
        for sd in out.entries.values_mut() {
            if let RwSd::PerUnit(map) = sd {
                *sd = RwSd::Recycled(map.get(unit).copied().unwrap_or(0.0));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|sd| match sd {
            RwSd::Recycled(v) => *v == 0.0,
            RwSd::PerUnit(m) => m.values().all(|v| *v == 0.0),
        })
    }

    /// Resolves the entries against a layout.
    pub fn table(&self, layout: &Layout) -> Result<RwSdTable> {
        for name in self.entries.keys().chain(self.profiles.keys()) {
            if !layout.shared.contains(name) && !layout.specific.contains(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        let mut base = vec![0.0; layout.len()];
        let mut profile = vec![None; layout.len()];
        for (index, (b, p)) in base.iter_mut().zip(profile.iter_mut()).enumerate() {
            let (name, unit) = layout.describe(index);
            let sd = match (self.entries.get(name), unit) {
                (None, _) => 0.0,
                (Some(RwSd::Recycled(v)), _) => *v,
                (Some(RwSd::PerUnit(_)), None) => {
                    return Err(Error::Argument(format!(
                        "per-unit random walk intensities given for shared parameter `{name}`"
                    )))
                }
                (Some(RwSd::PerUnit(map)), Some(u)) => {
                    for key in map.keys() {
                        if !layout.units.contains(key) {
                            return Err(Error::Argument(format!("unknown unit `{key}` in rw_sd for `{name}`")));
                        }
                    }
                    map.get(&layout.units[u]).copied().unwrap_or(0.0)
                }
            };
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::Argument(format!("random walk intensity for `{name}` must be finite and >= 0")));
            }
            *b = sd;
            if let Some(mult) = self.profiles.get(name) {
                if mult.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                    return Err(Error::Argument(format!("negative or non-finite rw_sd profile for `{name}`")));
                }
                *p = Some(mult.clone());
            }
        }
        Ok(RwSdTable { base, profile })
    }
}

/// Intensity per flattened index and observation index.
#[derive(Clone, Debug)]
pub struct RwSdTable {
    base: Vec<f64>,
    profile: Vec<Option<Vec<f64>>>,
}

impl RwSdTable {
    /// Intensity for flattened index `index` at observation index `n`
    /// (`n = 0` is the perturbation before the first observation).
    pub fn sd(&self, index: usize, n: usize) -> Result<f64> {
        match &self.profile[index] {
            None => Ok(self.base[index]),
            Some(mult) => mult.get(n).map(|m| m * self.base[index]).ok_or_else(|| {
                Error::Argument(format!("rw_sd profile has {} entries, observation index {n} requested", mult.len()))
            }),
        }
    }

    pub fn base(&self, index: usize) -> f64 {
        self.base[index]
    }
}
