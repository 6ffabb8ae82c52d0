//! Bootstrap particle filtering and replicate averaging.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{PanelModel, UnitModel};
use crate::params::{NamedValues, ParamSet};
use crate::rng::{Stream, StreamRng};

/// Weights with no positive finite mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegenerateWeights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Resampling {
    /// Independent categorical draws.
    #[default]
    Multinomial,
    /// One uniform offset, evenly spaced points.
    Systematic,
}

fn cumulative(weights: &[f64]) -> std::result::Result<Vec<f64>, DegenerateWeights> {
    let mut acc = 0.0;
    let mut cum = Vec::with_capacity(weights.len());
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(DegenerateWeights);
        }
        acc += w;
        cum.push(acc);
    }
    if !(acc > 0.0 && acc.is_finite()) {
        return Err(DegenerateWeights);
    }
    Ok(cum)
}

fn locate(cum: &[f64], u: f64) -> usize {
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// `weights.len()` i.i.d. draws of an index with probability proportional
/// to its weight.
pub fn multinomial_resample(
    weights: &[f64],
    rng: &mut StreamRng,
) -> std::result::Result<Vec<usize>, DegenerateWeights> {
    let cum = cumulative(weights)?;
    let total = cum[cum.len() - 1];
    Ok((0..weights.len()).map(|_| locate(&cum, rng.random::<f64>() * total)).collect())
}

pub fn systematic_resample(
    weights: &[f64],
    rng: &mut StreamRng,
) -> std::result::Result<Vec<usize>, DegenerateWeights> {
    let cum = cumulative(weights)?;
    let n = weights.len();
    let total = cum[n - 1];
    let offset: f64 = rng.random();
    Ok((0..n).map(|j| locate(&cum, (j as f64 + offset) / n as f64 * total)).collect())
}

impl Resampling {
    pub fn resample(
        self,
        weights: &[f64],
        rng: &mut StreamRng,
    ) -> std::result::Result<Vec<usize>, DegenerateWeights> {
        match self {
            Resampling::Multinomial => multinomial_resample(weights, rng),
            Resampling::Systematic => systematic_resample(weights, rng),
        }
    }
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    s * s / s2
}

/// Turns log weights into max-shifted weights; returns the shift.
pub(crate) fn normalize_log_weights(log_w: &[f64], w: &mut [f64]) -> Option<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_w.iter().any(|v| v.is_nan()) {
        return None;
    }
    for (wi, &lw) in w.iter_mut().zip(log_w) {
        *wi = (lw - max).exp();
    }
    Some(max)
}

/// One unit's share of a [`FilterResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFilter {
    pub unit: String,
    pub loglik: f64,
    pub cond_logliks: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Bootstrap filter for one unit with parameters in the dynamics' order.
pub fn pfilter_unit_vector(
    unit: &UnitModel,
    params: &[f64],
    particles: usize,
    resampling: Resampling,
    rng: &mut StreamRng,
) -> Result<UnitFilter> {
    if particles == 0 {
        return Err(Error::Argument("particle count must be >= 1".into()));
    }
    if !unit.has_data() {
        return Err(Error::Argument(format!("unit `{}` has no data", unit.name())));
    }
    let dynamics = unit.dynamics();
    let dim = dynamics.state_names().len();
    let mut states = vec![0.0; particles * dim];
    let mut scratch = vec![0.0; particles * dim];
    for x in states.chunks_exact_mut(dim.max(1)).take(particles) {
        dynamics.rinit(params, unit.t0(), rng, x).map_err(|e| unit.slot_error(e))?;
    }
    let n_obs = unit.times().len();
    let mut log_w = vec![0.0; particles];
    let mut w = vec![0.0; particles];
    let mut cond_logliks = Vec::with_capacity(n_obs);
    let mut ess = Vec::with_capacity(n_obs);
    let mut t_prev = unit.t0();
    for (n, (&t, y)) in unit.times().iter().zip(unit.data()).enumerate() {
        for (x, lw) in states.chunks_exact_mut(dim.max(1)).zip(log_w.iter_mut()) {
            dynamics.rprocess(x, t_prev, t, params, rng).map_err(|e| unit.slot_error(e))?;
            *lw = dynamics.dmeasure(y, x, t, params).map_err(|e| unit.slot_error(e))?;
        }
        let failure = || Error::FilterFailure { unit: unit.name().to_string(), time_index: n };
        let shift = normalize_log_weights(&log_w, &mut w).ok_or_else(failure)?;
        let sum: f64 = w.iter().sum();
        cond_logliks.push(shift + (sum / particles as f64).ln());
        ess.push(effective_sample_size(&w));
        let idx = resampling.resample(&w, rng).map_err(|_| failure())?;
        for (j, &k) in idx.iter().enumerate() {
            scratch[j * dim..(j + 1) * dim].copy_from_slice(&states[k * dim..(k + 1) * dim]);
        }
        std::mem::swap(&mut states, &mut scratch);
        t_prev = t;
    }
    Ok(UnitFilter {
        unit: unit.name().to_string(),
        loglik: cond_logliks.iter().sum(),
        cond_logliks,
        ess,
    })
}

/// Bootstrap filter for one unit with named parameters.
pub fn pfilter_unit(unit: &UnitModel, params: &NamedValues, particles: usize, rng: &mut StreamRng) -> Result<UnitFilter> {
    let vector = unit.param_vector(params)?;
    pfilter_unit_vector(unit, &vector, particles, Resampling::Multinomial, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub units: Vec<String>,
    pub unit_logliks: Vec<f64>,
    pub total_loglik: f64,
    pub cond_logliks: Vec<Vec<f64>>,
    pub ess: Vec<Vec<f64>>,
    pub params: ParamSet,
    pub particles: usize,
}

impl FilterResult {
    fn assemble(unit_filters: Vec<UnitFilter>, params: ParamSet, particles: usize) -> Self {
        let unit_logliks: Vec<f64> = unit_filters.iter().map(|f| f.loglik).collect();
        let total_loglik = unit_logliks.iter().sum();
        let mut units = Vec::new();
        let mut cond_logliks = Vec::new();
        let mut ess = Vec::new();
        for f in unit_filters {
            units.push(f.unit);
            cond_logliks.push(f.cond_logliks);
            ess.push(f.ess);
        }
        Self { units, unit_logliks, total_loglik, cond_logliks, ess, params, particles }
    }

    /// CSV with one `step` row per (unit, time), a `unit` row per unit and a
    /// final `panel` row.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row_type", "unit", "time_index", "cond_loglik", "ess", "loglik"])?;
        for (u, unit) in self.units.iter().enumerate() {
            for (n, (c, e)) in self.cond_logliks[u].iter().zip(&self.ess[u]).enumerate() {
                w.write_record(["step", unit, &n.to_string(), &c.to_string(), &e.to_string(), ""])?;
            }
        }
        for (unit, ll) in self.units.iter().zip(&self.unit_logliks) {
            w.write_record(["unit", unit, "", "", "", &ll.to_string()])?;
        }
        w.write_record(["panel", "", "", "", "", &self.total_loglik.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FilterSettings {
    pub particles: usize,
    pub resampling: Resampling,
}

impl FilterSettings {
    pub fn new(particles: usize) -> Self {
        Self { particles, resampling: Resampling::Multinomial }
    }
}

/// Filters every unit with stream `stream.child_str(unit)`.
pub fn pfilter_panel(panel: &PanelModel, particles: usize, stream: Stream) -> Result<FilterResult> {
    pfilter_panel_with(panel, &FilterSettings::new(particles), stream)
}

pub fn pfilter_panel_with(panel: &PanelModel, settings: &FilterSettings, stream: Stream) -> Result<FilterResult> {
    let theta = panel.params().values();
    let filters = panel
        .units()
        .iter()
        .enumerate()
        .map(|(u, unit)| {
            let params: Vec<f64> = panel.unit_param_indices(u).iter().map(|&k| theta[k]).collect();
            let mut rng = stream.child_str(unit.name()).rng();
            pfilter_unit_vector(unit, &params, settings.particles, settings.resampling, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterResult::assemble(filters, panel.params().clone(), settings.particles))
}

/// Point estimate with an optional standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

fn lme(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v - max).exp(), n + 1));
    max + (sum / n as f64).ln()
}

/// Delete-one jackknife standard error of `stat` over `n` replicates.
fn jackknife_se(n: usize, stat: impl Fn(usize) -> f64) -> f64 {
    let leave_out: Vec<f64> = (0..n).map(stat).collect();
    let mean = leave_out.iter().sum::<f64>() / n as f64;
    let ss: f64 = leave_out.iter().map(|v| (v - mean).powi(2)).sum();
    ((n as f64 - 1.0) / n as f64 * ss).sqrt()
}

/// `log(mean(exp(values)))` computed with a max shift.
pub fn logmeanexp(values: &[f64], with_se: bool) -> Result<Estimate> {
    if values.is_empty() {
        return Err(Error::Argument("logmeanexp of an empty slice".into()));
    }
    if with_se && values.len() < 2 {
        return Err(Error::Argument("a jackknife standard error needs at least two values".into()));
    }
    let value = lme(values.iter().copied());
    let se = with_se.then(|| {
        jackknife_se(values.len(), |i| {
            lme(values.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| *v))
        })
    });
    Ok(Estimate { value, se })
}

/// Averages replicates per unit on the natural scale and sums over units.
/// `unit_by_replicate[u][i]` is unit `u`'s log-likelihood in replicate `i`.
pub fn panel_logmeanexp(unit_by_replicate: &[Vec<f64>], with_se: bool) -> Result<Estimate> {
    let reps = unit_by_replicate.first().map_or(0, Vec::len);
    if reps == 0 {
        return Err(Error::Argument("panel_logmeanexp needs at least one replicate".into()));
    }
    if unit_by_replicate.iter().any(|row| row.len() != reps) {
        return Err(Error::Argument("panel_logmeanexp needs a rectangular matrix".into()));
    }
    if with_se && reps < 2 {
        return Err(Error::Argument("a jackknife standard error needs at least two replicates".into()));
    }
    let stat = |skip: Option<usize>| -> f64 {
        unit_by_replicate
            .iter()
            .map(|row| lme(row.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| *v)))
            .sum()
    };
    let value = stat(None);
    let se = with_se.then(|| jackknife_se(reps, |i| stat(Some(i))));
    Ok(Estimate { value, se })
}
