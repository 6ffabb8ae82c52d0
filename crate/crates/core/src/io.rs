//! Reading and writing panels and small tables.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PanelModel, SpecificInput, UnitModel};
use crate::models::registry;
use crate::params::{Layout, NamedValues, ParamSet, Transform, TransformSpec};

#[derive(Serialize, Deserialize)]
struct UnitEntry {
    name: String,
    t0: f64,
    times: Vec<f64>,
    data_file: String,
}

#[derive(Serialize, Deserialize)]
struct PanelFile {
    model: String,
    layout: Layout,
    values: Vec<f64>,
    transforms: IndexMap<String, String>,
    units: Vec<UnitEntry>,
}

fn transform_label(t: &Transform) -> Result<String> {
    match t {
        Transform::Custom(c) => Err(Error::Argument(format!("custom transform `{}` cannot be saved", c.name))),
        t => Ok(t.to_string()),
    }
}

fn parse_transform(label: &str) -> Result<Transform> {
    Ok(match label {
        "identity" => Transform::Identity,
        "log" => Transform::Log,
        "logit" => Transform::Logit,
        _ => {
            let group = label
                .strip_prefix("barycentric(")
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| Error::Argument(format!("unknown transform `{label}`")))?;
            Transform::Barycentric(group.to_string())
        }
    })
}

/// Writes `panel.json` plus one CSV of observations per unit into `dir`.
/// Only panels of built-in models can be saved.
pub fn write_panel(dir: &Path, panel: &PanelModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let key = panel.units().first().map(|u| u.dynamics().registry_key().to_string()).unwrap_or_default();
    if registry(&key).is_none() || panel.units().iter().any(|u| u.dynamics().registry_key() != key) {
        return Err(Error::Argument("only panels of a single built-in model can be saved".into()));
    }
    let mut transforms = IndexMap::new();
    for name in panel.transforms().names() {
        transforms.insert(name.to_string(), transform_label(panel.transforms().get(name))?);
    }
    let mut units = Vec::new();
    for (u, unit) in panel.units().iter().enumerate() {
        let data_file = format!("unit_{u}.csv");
        let mut w = csv::Writer::from_path(dir.join(&data_file))?;
        let mut header = vec!["time".to_string()];
        header.extend(unit.dynamics().obs_names().iter().cloned());
        w.write_record(&header)?;
        for (t, y) in unit.times().iter().zip(unit.data()) {
            let mut rec = vec![t.to_string()];
            rec.extend(y.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush()?;
        units.push(UnitEntry { name: unit.name().to_string(), t0: unit.t0(), times: unit.times().to_vec(), data_file });
    }
    let file = PanelFile { model: key, layout: panel.layout(), values: panel.params().values(), transforms, units };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("panel.json"))?), &file)?;
    Ok(())
}

pub fn read_panel(dir: &Path) -> Result<PanelModel> {
    let file: PanelFile = serde_json::from_reader(File::open(dir.join("panel.json"))?)?;
    let dynamics = registry(&file.model).ok_or_else(|| Error::Argument(format!("unknown model `{}`", file.model)))?;
    let mut spec = TransformSpec::new();
    for (name, label) in &file.transforms {
        spec = spec.with(name, parse_transform(label)?);
    }
    let params = ParamSet::unflatten(&file.layout, &file.values)?;
    let mut units = Vec::new();
    for entry in file.units {
        let mut r = csv::Reader::from_path(dir.join(&entry.data_file))?;
        let mut data = Vec::new();
        for rec in r.records() {
            let vals = rec?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Argument(format!("bad number `{s}` in {}", entry.data_file))))
                .collect::<Result<Vec<f64>>>()?;
            data.push(vals[1..].to_vec());
        }
        let unit = UnitModel::new(entry.name, dynamics.clone(), entry.t0, entry.times, NamedValues::new())?
            .with_data(data)?
            .with_transforms(spec.clone());
        units.push(unit);
    }
    Ok(PanelModel::build(units, params.shared().clone(), SpecificInput::Matrix(params.specific().clone()))?
        .with_transforms(spec))
}

/// Writes a CSV with the given header and rows.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV into its header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, csv::Error>>()?;
    Ok((header, rows))
}
