use std::io::{Read, Write};

use rand::Rng;

use super::{parse_param_name, NamedValues, ParamSet};
use crate::error::{Error, Result};

/// Rows of starting points over flattened parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DesignMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> NamedValues {
        self.columns.iter().cloned().zip(self.rows[i].iter().copied()).collect()
    }

    /// Row `i` as a parameter set with the given unit order.
    pub fn param_set(&self, i: usize, units: &[String]) -> Result<ParamSet> {
        ParamSet::from_flat(&self.row(i), Some(units))
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        for c in &columns {
            parse_param_name(c)?;
        }
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Argument(format!("bad number `{s}` in design"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    /// Reorders columns into the flattened order (shared first, then
    /// specific entries grouped by unit).
    fn canonicalize(mut self) -> Result<Self> {
        if self.rows.is_empty() {
            return Ok(self);
        }
        let canonical: Vec<String> = ParamSet::from_flat(&self.row(0), None)?.flatten().keys().cloned().collect();
        let perm: Vec<usize> = canonical
            .iter()
            .map(|c| self.columns.iter().position(|n| n == c).unwrap())
            .collect();
        self.rows = self.rows.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect();
        self.columns = canonical;
        Ok(self)
    }
}

fn check_bounds(lower: &NamedValues, upper: &NamedValues) -> Result<()> {
    if lower.len() != upper.len() || lower.keys().any(|k| !upper.contains_key(k)) {
        return Err(Error::Argument("lower and upper must name the same parameters".into()));
    }
    for (name, &lo) in lower {
        let hi = upper[name];
        if !(lo <= hi) {
            return Err(Error::Bounds { name: name.clone(), lower: lo, upper: hi });
        }
    }
    Ok(())
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    (lo + (hi - lo) * u).clamp(lo, hi)
}

/// Uniform draws from a box. Shared names are drawn once per row; names in
/// `specific_names` are drawn independently for every unit.
pub fn runif_panel_design<R: Rng + ?Sized>(
    lower: &NamedValues,
    upper: &NamedValues,
    specific_names: &[String],
    unit_names: &[String],
    nseq: usize,
    rng: &mut R,
) -> Result<DesignMatrix> {
    check_bounds(lower, upper)?;
    for name in specific_names {
        if !lower.contains_key(name) {
            return Err(Error::Argument(format!("specific parameter `{name}` has no bounds")));
        }
    }
    let shared: Vec<&String> = lower.keys().filter(|k| !specific_names.contains(k)).collect();
    let specific: Vec<&String> = specific_names.iter().collect();
    let mut columns: Vec<String> = shared.iter().map(|s| s.to_string()).collect();
    for unit in unit_names {
        for name in &specific {
            columns.push(format!("{name}[{unit}]"));
        }
    }
    let rows = (0..nseq)
        .map(|_| {
            let mut row: Vec<f64> = shared.iter().map(|n| uniform(rng, lower[*n], upper[*n])).collect();
            for _ in unit_names {
                row.extend(specific.iter().map(|n| uniform(rng, lower[*n], upper[*n])));
            }
            row
        })
        .collect();
    Ok(DesignMatrix { columns, rows })
}

/// Profile starting points: the focal parameter cycles through `grid`, each
/// value appearing `nprof` times; every other named parameter is drawn
/// uniformly from `[lower, upper]` (equal bounds copy a fixed value through).
/// `lower`/`upper` use flattened names.
pub fn profile_design<R: Rng + ?Sized>(
    focal: &str,
    grid: &[f64],
    lower: &NamedValues,
    upper: &NamedValues,
    nprof: usize,
    rng: &mut R,
) -> Result<DesignMatrix> {
    if grid.is_empty() {
        return Err(Error::Argument("profile grid is empty".into()));
    }
    parse_param_name(focal)?;
    if lower.contains_key(focal) || upper.contains_key(focal) {
        return Err(Error::Argument(format!("focal parameter `{focal}` must not be randomized")));
    }
    check_bounds(lower, upper)?;
    let mut columns = vec![focal.to_string()];
    columns.extend(lower.keys().cloned());
    let rows = (0..grid.len() * nprof)
        .map(|i| {
            let mut row = vec![grid[i % grid.len()]];
            row.extend(lower.iter().map(|(n, &lo)| uniform(rng, lo, upper[n])));
            row
        })
        .collect();
    DesignMatrix { columns, rows }.canonicalize()
}
