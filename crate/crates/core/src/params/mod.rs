//! Parameter sets for panel models.
//!
//! A panel carries a vector of shared parameters and a dense matrix of
//! unit-specific parameters (rows = parameter names, columns = units). The
//! flattened form used for CSV columns and for the particle swarms puts the
//! shared entries first, followed by the specific entries grouped by unit:
//!
//! ```text
//! r, sigma, K[unit1], tau[unit1], X_0[unit1], K[unit2], tau[unit2], ...
//! ```

mod design;
mod rw_sd;
pub(crate) mod transform;

pub use design::{profile_design, runif_panel_design, DesignMatrix};
pub use rw_sd::{RwSd, RwSdSpec, RwSdTable};
pub use transform::{CustomTransform, EstimationMap, Transform, TransformSpec};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered name → value map.
pub type NamedValues = IndexMap<String, f64>;

fn is_base_name(base: &str) -> bool {
    let mut chars = base.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits `base[unit]` into its parts; shared names have no unit.
pub fn parse_param_name(flat_name: &str) -> Result<(String, Option<String>)> {
    let bad = || Error::NameFormat(flat_name.to_string());
    match flat_name.find('[') {
        None => {
            if !is_base_name(flat_name) {
                return Err(bad());
            }
            Ok((flat_name.to_string(), None))
        }
        Some(open) => {
            let base = &flat_name[..open];
            let rest = &flat_name[open + 1..];
            let unit = rest.strip_suffix(']').ok_or_else(bad)?;
            if !is_base_name(base) || unit.is_empty() || unit.contains(['[', ']']) {
                return Err(bad());
            }
            Ok((base.to_string(), Some(unit.to_string())))
        }
    }
}

pub fn format_param_name(base: &str, unit: Option<&str>) -> String {
    match unit {
        Some(unit) => format!("{base}[{unit}]"),
        None => base.to_string(),
    }
}

/// Names and ordering of a flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub shared: Vec<String>,
    pub specific: Vec<String>,
    pub units: Vec<String>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.shared.len() + self.specific.len() * self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened index of shared parameter `a`.
    pub fn shared_index(&self, a: usize) -> usize {
        a
    }

    /// Flattened index of specific row `b` for unit `u`.
    pub fn specific_index(&self, b: usize, u: usize) -> usize {
        self.shared.len() + u * self.specific.len() + b
    }

    pub fn flat_names(&self) -> Vec<String> {
        let mut names = self.shared.clone();
        for unit in &self.units {
            for row in &self.specific {
                names.push(format_param_name(row, Some(unit)));
            }
        }
        names
    }

    /// Flattened index for a flat name.
    pub fn index_of(&self, flat_name: &str) -> Option<usize> {
        let (base, unit) = parse_param_name(flat_name).ok()?;
        match unit {
            None => self.shared.iter().position(|s| *s == base),
            Some(unit) => {
                let b = self.specific.iter().position(|s| *s == base)?;
                let u = self.units.iter().position(|s| *s == unit)?;
                Some(self.specific_index(b, u))
            }
        }
    }

    /// Base name of the parameter at a flattened index, with its unit index.
    pub fn describe(&self, index: usize) -> (&str, Option<usize>) {
        let a = self.shared.len();
        if index < a {
            (&self.shared[index], None)
        } else {
            let b = self.specific.len();
            let offset = index - a;
            (&self.specific[offset % b], Some(offset / b))
        }
    }
}

/// Dense matrix of unit-specific values, rows = parameters, columns = units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificMatrix {
    rows: Vec<String>,
    units: Vec<String>,
    /// Row-major, `rows.len() * units.len()` entries.
    values: Vec<f64>,
}

impl SpecificMatrix {
    pub fn new(rows: Vec<String>, units: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows.len() * units.len() {
            return Err(Error::Argument(format!(
                "specific matrix needs {} x {} values, got {}",
                rows.len(),
                units.len(),
                values.len()
            )));
        }
        check_unique("specific parameter", &rows)?;
        check_unique("unit", &units)?;
        for unit in &units {
            if unit.is_empty() || unit.contains(['[', ']']) {
                return Err(Error::NameFormat(unit.clone()));
            }
        }
        for row in &rows {
            if !is_base_name(row) {
                return Err(Error::NameFormat(row.clone()));
            }
        }
        Ok(Self { rows, units, values })
    }

    pub fn empty(units: Vec<String>) -> Result<Self> {
        Self::new(Vec::new(), units, Vec::new())
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn row_index(&self, name: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == name)
    }

    pub fn unit_index(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit)
    }

    pub fn get(&self, row: usize, unit: usize) -> f64 {
        self.values[row * self.units.len() + unit]
    }

    pub fn set(&mut self, row: usize, unit: usize, value: f64) {
        let width = self.units.len();
        self.values[row * width + unit] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let width = self.units.len();
        &self.values[row * width..(row + 1) * width]
    }

    pub fn column(&self, unit: usize) -> Vec<f64> {
        (0..self.rows.len()).map(|b| self.get(b, unit)).collect()
    }

    fn remove_row(&mut self, row: usize) -> Vec<f64> {
        let width = self.units.len();
        self.rows.remove(row);
        self.values.drain(row * width..(row + 1) * width).collect()
    }

    fn push_row(&mut self, name: String, values: &[f64]) {
        self.rows.push(name);
        self.values.extend_from_slice(values);
    }
}

fn check_unique(what: &str, names: &[String]) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        if names[..i].contains(name) {
            return Err(Error::Argument(format!("duplicate {what} name `{name}`")));
        }
    }
    Ok(())
}

/// Shared vector plus unit-specific matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    shared: NamedValues,
    specific: SpecificMatrix,
}

impl ParamSet {
    pub fn new(shared: NamedValues, specific: SpecificMatrix) -> Result<Self> {
        for name in shared.keys() {
            if !is_base_name(name) {
                return Err(Error::NameFormat(name.clone()));
            }
            if specific.row_index(name).is_some() {
                return Err(Error::Argument(format!(
                    "`{name}` is both shared and unit-specific"
                )));
            }
        }
        Ok(Self { shared, specific })
    }

    pub fn shared(&self) -> &NamedValues {
        &self.shared
    }

    pub fn specific(&self) -> &SpecificMatrix {
        &self.specific
    }

    pub fn units(&self) -> &[String] {
        self.specific.units()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            shared: self.shared.keys().cloned().collect(),
            specific: self.specific.rows.clone(),
            units: self.specific.units.clone(),
        }
    }

    /// Flattened values in layout order.
    pub fn values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.shared.values().copied().collect();
        for u in 0..self.specific.units.len() {
            out.extend(self.specific.column(u));
        }
        out
    }

    pub fn flatten(&self) -> NamedValues {
        self.layout().flat_names().into_iter().zip(self.values()).collect()
    }

    pub fn unflatten(layout: &Layout, values: &[f64]) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Argument(format!(
                "expected {} values for layout, got {}",
                layout.len(),
                values.len()
            )));
        }
        let a = layout.shared.len();
        let shared = layout.shared.iter().cloned().zip(values[..a].iter().copied()).collect();
        let (b, width) = (layout.specific.len(), layout.units.len());
        let mut matrix = vec![0.0; b * width];
        for u in 0..width {
            for row in 0..b {
                matrix[row * width + u] = values[layout.specific_index(row, u)];
            }
        }
        let specific = SpecificMatrix::new(layout.specific.clone(), layout.units.clone(), matrix)?;
        Self::new(shared, specific)
    }

    /// Rebuilds a parameter set from flat names, inferring the layout: plain
    /// names are shared, `base[unit]` names are specific. Row and unit order
    /// follow first appearance; `units` fixes the unit order when given.
    pub fn from_flat(flat: &NamedValues, units: Option<&[String]>) -> Result<Self> {
        let mut shared = NamedValues::new();
        let mut rows: Vec<String> = Vec::new();
        let mut seen_units: Vec<String> = units.map(|u| u.to_vec()).unwrap_or_default();
        let mut entries = Vec::new();
        for (name, &value) in flat {
            match parse_param_name(name)? {
                (base, None) => {
                    shared.insert(base, value);
                }
                (base, Some(unit)) => {
                    if !rows.contains(&base) {
                        rows.push(base.clone());
                    }
                    if !seen_units.contains(&unit) {
                        if units.is_some() {
                            return Err(Error::Argument(format!("unknown unit `{unit}` in `{name}`")));
                        }
                        seen_units.push(unit.clone());
                    }
                    entries.push((base, unit, value));
                }
            }
        }
        let width = seen_units.len();
        let mut values = vec![f64::NAN; rows.len() * width];
        let mut filled = vec![false; values.len()];
        for (base, unit, value) in entries {
            let b = rows.iter().position(|r| *r == base).unwrap();
            let u = seen_units.iter().position(|s| *s == unit).unwrap();
            values[b * width + u] = value;
            filled[b * width + u] = true;
        }
        if let Some(pos) = filled.iter().position(|f| !f) {
            let (b, u) = (pos / width, pos % width);
            return Err(Error::Argument(format!(
                "missing value for `{}`",
                format_param_name(&rows[b], Some(&seen_units[u]))
            )));
        }
        Self::new(shared, SpecificMatrix::new(rows, seen_units, values)?)
    }

    /// Value by flat name.
    pub fn get(&self, flat_name: &str) -> Option<f64> {
        let (base, unit) = parse_param_name(flat_name).ok()?;
        match unit {
            None => self.shared.get(&base).copied(),
            Some(unit) => {
                let b = self.specific.row_index(&base)?;
                let u = self.specific.unit_index(&unit)?;
                Some(self.specific.get(b, u))
            }
        }
    }

    /// Sets a value by flat name. A bare specific base name sets every unit.
    pub fn set(&mut self, flat_name: &str, value: f64) -> Result<()> {
        let unknown = || Error::UnknownParameter(flat_name.to_string());
        let (base, unit) = parse_param_name(flat_name)?;
        match unit {
            None => {
                if let Some(v) = self.shared.get_mut(&base) {
                    *v = value;
                } else {
                    let b = self.specific.row_index(&base).ok_or_else(unknown)?;
                    for u in 0..self.specific.units.len() {
                        self.specific.set(b, u, value);
                    }
                }
            }
            Some(unit) => {
                let b = self.specific.row_index(&base).ok_or_else(unknown)?;
                let u = self.specific.unit_index(&unit).ok_or_else(unknown)?;
                self.specific.set(b, u, value);
            }
        }
        Ok(())
    }

    /// Parameters seen by one unit: shared entries then the unit's column.
    pub fn unit_params(&self, unit: &str) -> Result<NamedValues> {
        let u = self
            .specific
            .unit_index(unit)
            .ok_or_else(|| Error::Argument(format!("unknown unit `{unit}`")))?;
        let mut out = self.shared.clone();
        for (b, row) in self.specific.rows.iter().enumerate() {
            out.insert(row.clone(), self.specific.get(b, u));
        }
        Ok(out)
    }

    /// Moves `name` into the shared vector with `value`, or updates it if it
    /// is already shared.
    pub fn reclassify_to_shared(&self, name: &str, value: f64) -> Result<Self> {
        let mut out = self.clone();
        if let Some(v) = out.shared.get_mut(name) {
            *v = value;
            return Ok(out);
        }
        let b = out
            .specific
            .row_index(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        out.specific.remove_row(b);
        out.shared.insert(name.to_string(), value);
        Ok(out)
    }

    /// Moves `name` into the specific matrix. Without `values` the current
    /// value is broadcast to every unit.
    pub fn reclassify_to_specific(&self, name: &str, values: Option<&[f64]>) -> Result<Self> {
        let width = self.specific.units.len();
        if let Some(values) = values {
            if values.len() != width {
                return Err(Error::Argument(format!(
                    "expected {width} per-unit values for `{name}`, got {}",
                    values.len()
                )));
            }
        }
        let mut out = self.clone();
        if let Some(b) = out.specific.row_index(name) {
            if let Some(values) = values {
                for (u, &v) in values.iter().enumerate() {
                    out.specific.set(b, u, v);
                }
            }
            return Ok(out);
        }
        let current = out
            .shared
            .shift_remove(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let row = values.map(<[f64]>::to_vec).unwrap_or_else(|| vec![current; width]);
        out.specific.push_row(name.to_string(), &row);
        Ok(out)
    }
}
