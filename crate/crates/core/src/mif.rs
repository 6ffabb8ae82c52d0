//! Panel iterated filtering.
//!
//! Parameters are carried by a swarm of `J` particles. Each iteration runs a
//! perturbed particle filter through the units in order; the shared columns
//! of the swarm pass from one unit to the next, and a unit's specific
//! columns are perturbed and resampled only while that unit is filtered
//! (marginalized variant) or follow every resampling step of every unit
//! (unmarginalized variant).

use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PanelModel, SpecificInput, UnitModel};
use crate::params::transform::{block_from_est, Block};
use crate::params::{format_param_name, EstimationMap, Layout, NamedValues, ParamSet, RwSdSpec, RwSdTable, TransformSpec};
use crate::rng::{Stream, StreamRng};
use crate::smc::{multinomial_resample, normalize_log_weights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoolingType {
    #[default]
    Geometric,
    Hyperbolic,
}

/// Iteration-dependent multiplier on the random-walk intensities, pinned by
/// its value after 50 iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoolingSchedule {
    kind: CoolingType,
    fraction_50: f64,
}

impl Default for CoolingSchedule {
    fn default() -> Self {
        Self { kind: CoolingType::Geometric, fraction_50: 0.5 }
    }
}

impl CoolingSchedule {
    pub fn new(kind: CoolingType, fraction_50: f64) -> Result<Self> {
        if !(fraction_50 > 0.0 && fraction_50 <= 1.0) {
            return Err(Error::Argument(format!("cooling fraction must lie in (0, 1], got {fraction_50}")));
        }
        if kind == CoolingType::Hyperbolic && fraction_50 <= 1.0 / 50.0 {
            return Err(Error::Argument(format!("hyperbolic cooling needs a fraction above 1/50, got {fraction_50}")));
        }
        Ok(Self { kind, fraction_50 })
    }

    pub fn geometric(fraction_50: f64) -> Result<Self> {
        Self::new(CoolingType::Geometric, fraction_50)
    }

    pub fn hyperbolic(fraction_50: f64) -> Result<Self> {
        Self::new(CoolingType::Hyperbolic, fraction_50)
    }

    pub fn kind(&self) -> CoolingType {
        self.kind
    }

    pub fn fraction_50(&self) -> f64 {
        self.fraction_50
    }

    /// Multiplier applied during iteration `m` (1-based); `m = 0` gives 1.
    pub fn multiplier(&self, m: usize) -> f64 {
        let f = self.fraction_50;
        match self.kind {
            CoolingType::Geometric => f.powf(m as f64 / 50.0),
            CoolingType::Hyperbolic => {
                if m == 0 || f == 1.0 {
                    return 1.0;
                }
                let s = (50.0 * f - 1.0) / (1.0 - f);
                (s + 1.0) / (s + m as f64)
            }
        }
    }
}

/// Adds `scale * sd[i] * Z` to column `i` of every row on the estimation
/// scale and maps back. Columns with zero intensity are left untouched and
/// consume no random numbers.
pub fn perturb(rows: &mut [f64], map: &EstimationMap, sd: &[f64], scale: f64, rng: &mut StreamRng) -> Result<()> {
    let width = map.len();
    if width == 0 || sd.len() != width || !rows.len().is_multiple_of(width) {
        return if width == 0 && rows.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument("perturbation dimensions do not match".into()))
        };
    }
    let active: Vec<&Block> = map
        .blocks
        .iter()
        .filter(|b| b.indices.iter().any(|&i| sd[i] * scale > 0.0))
        .collect();
    if active.is_empty() {
        return Ok(());
    }
    let mut est = vec![0.0; width];
    for row in rows.chunks_exact_mut(width) {
        for block in &active {
            map.block_to_est(block, row, &mut est)?;
            for &i in &block.indices {
                let s = sd[i] * scale;
                if s > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    est[i] += s * z;
                }
            }
            block_from_est(block, &est, row);
        }
    }
    Ok(())
}

/// Intensity used for flattened index `index` at observation index `n`
/// during iteration `m`.
pub fn perturbation_sd(table: &RwSdTable, cooling: &CoolingSchedule, index: usize, n: usize, m: usize) -> Result<f64> {
    Ok(table.sd(index, n)? * cooling.multiplier(m))
}

/// `J` parameter vectors over a flattened layout, stored particle-major on
/// the natural scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Swarm {
    layout: Layout,
    particles: usize,
    values: Vec<f64>,
}

impl Swarm {
    pub fn constant(params: &ParamSet, particles: usize) -> Self {
        let v = params.values();
        let values = (0..particles).flat_map(|_| v.iter().copied()).collect();
        Self { layout: params.layout(), particles, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    fn width(&self) -> usize {
        self.layout.len()
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let d = self.width();
        &self.values[j * d..(j + 1) * d]
    }

    pub fn value(&self, index: usize, j: usize) -> f64 {
        self.values[j * self.width() + index]
    }

    pub fn shared(&self, a: usize, j: usize) -> f64 {
        self.value(self.layout.shared_index(a), j)
    }

    pub fn specific(&self, b: usize, u: usize, j: usize) -> f64 {
        self.value(self.layout.specific_index(b, u), j)
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        (0..self.particles).map(|j| self.value(index, j)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MifSettings {
    /// Number of iterations `M`.
    pub iterations: usize,
    /// Number of particles `J`.
    pub particles: usize,
    pub rw_sd: RwSdSpec,
    pub cooling: CoolingSchedule,
    pub marginalize: bool,
    /// Filtering failures tolerated over a whole search before aborting.
    pub failure_threshold: usize,
}

impl MifSettings {
    pub fn new(iterations: usize, particles: usize, rw_sd: RwSdSpec) -> Self {
        Self {
            iterations,
            particles,
            rw_sd,
            cooling: CoolingSchedule::default(),
            marginalize: false,
            failure_threshold: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub params: Vec<f64>,
    /// Perturbed-filter log-likelihood per unit; NaN in row 0.
    pub unit_logliks: Vec<f64>,
    pub loglik: f64,
}

/// Per-iteration point estimates and perturbed-filter log-likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct Traces {
    pub param_names: Vec<String>,
    pub units: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl Traces {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["iteration".to_string()];
        h.extend(self.param_names.iter().cloned());
        h.extend(self.units.iter().map(|u| format!("loglik[{u}]")));
        h.push("loglik".into());
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for (m, row) in self.rows.iter().enumerate() {
            let mut rec = vec![m.to_string()];
            rec.extend(row.params.iter().chain(&row.unit_logliks).map(f64::to_string));
            rec.push(row.loglik.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("iteration") || header.last().map(String::as_str) != Some("loglik")
        {
            return Err(Error::Argument("not a traces table".into()));
        }
        let body = &header[1..header.len() - 1];
        let split = body.iter().position(|h| h.starts_with("loglik[")).unwrap_or(body.len());
        let param_names = body[..split].to_vec();
        let units = body[split..]
            .iter()
            .map(|h| {
                h.strip_prefix("loglik[")
                    .and_then(|s| s.strip_suffix(']'))
                    .map(str::to_string)
                    .ok_or_else(|| Error::Argument(format!("unexpected traces column `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| Error::Argument(format!("bad number `{s}` in traces"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != body.len() + 1 {
                return Err(Error::Argument("ragged traces row".into()));
            }
            rows.push(TraceRow {
                params: vals[..split].to_vec(),
                unit_logliks: vals[split..body.len()].to_vec(),
                loglik: vals[body.len()],
            });
        }
        Ok(Self { param_names, units, rows })
    }
}

/// Outcome of [`block_refine`].
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    /// Final-iteration log-likelihood of every repetition, per unit.
    pub rep_logliks: Vec<Vec<f64>>,
    /// Index of the repetition installed for each unit.
    pub chosen: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MifResult {
    pub start: ParamSet,
    pub final_swarm: Swarm,
    pub estimate: ParamSet,
    pub traces: Traces,
    pub settings: MifSettings,
    /// Time steps at which every particle had zero weight.
    pub failures: usize,
    pub refinement: Option<Refinement>,
}

impl MifResult {
    /// A result holding only a point estimate, as when resuming from saved
    /// estimates: the swarm is constant and the traces contain just row 0.
    pub fn from_estimate(estimate: ParamSet, settings: MifSettings) -> Self {
        let layout = estimate.layout();
        Self {
            start: estimate.clone(),
            final_swarm: Swarm::constant(&estimate, settings.particles),
            traces: Traces {
                param_names: layout.flat_names(),
                units: layout.units.clone(),
                rows: vec![TraceRow {
                    params: estimate.values(),
                    unit_logliks: vec![f64::NAN; layout.units.len()],
                    loglik: f64::NAN,
                }],
            },
            estimate,
            settings,
            failures: 0,
            refinement: None,
        }
    }

    /// Perturbed-filter log-likelihood of the final iteration.
    pub fn loglik(&self) -> f64 {
        self.traces.rows.last().map_or(f64::NAN, |r| r.loglik)
    }
}

/// Instrumentation hooks; the swarm passed in is fully written back.
pub trait MifObserver {
    fn iteration_start(&mut self, _m: usize, _swarm: &Swarm) {}
    fn unit_start(&mut self, _m: usize, _u: usize, _swarm: &Swarm) {}
    fn unit_end(&mut self, _m: usize, _u: usize, _swarm: &Swarm) {}
}

struct NoObserver;

impl MifObserver for NoObserver {}

/// The columns one unit's filter touches.
struct UnitContext {
    /// Flattened indices: shared first, then this unit's specific ones.
    active: Vec<usize>,
    map: EstimationMap,
    /// For each dynamics parameter, its position in `active`.
    param_local: Vec<usize>,
    /// Specific columns of every other unit.
    others: Vec<usize>,
}

impl UnitContext {
    fn new(panel: &PanelModel, layout: &Layout, u: usize) -> Result<Self> {
        let a = layout.shared.len();
        let b = layout.specific.len();
        let active: Vec<usize> = (0..a).chain((0..b).map(|k| layout.specific_index(k, u))).collect();
        let local = Layout {
            shared: layout.shared.clone(),
            specific: layout.specific.clone(),
            units: vec![layout.units[u].clone()],
        };
        let map = EstimationMap::compile(panel.transforms(), &local)?;
        let param_local = panel
            .unit_param_indices(u)
            .iter()
            .map(|g| active.iter().position(|x| x == g).expect("unit parameter is active"))
            .collect();
        let others = (0..layout.units.len())
            .filter(|&v| v != u)
            .flat_map(|v| (0..b).map(move |k| (k, v)))
            .map(|(k, v)| layout.specific_index(k, v))
            .collect();
        Ok(Self { active, map, param_local, others })
    }
}

struct IterationContext<'a> {
    table: &'a RwSdTable,
    scale: f64,
    marginalize: bool,
    threshold: usize,
}

fn filter_unit(
    unit: &UnitModel,
    ctx: &UnitContext,
    it: &IterationContext<'_>,
    swarm: &mut Swarm,
    failures: &mut usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    let j_count = swarm.particles;
    let d = swarm.width();
    let k = ctx.active.len();
    let dynamics = unit.dynamics();
    let dim = dynamics.state_names().len();

    let mut rows = vec![0.0; j_count * k];
    for j in 0..j_count {
        for (li, &g) in ctx.active.iter().enumerate() {
            rows[j * k + li] = swarm.values[j * d + g];
        }
    }
    let mut rows_scratch = rows.clone();
    let mut states = vec![0.0; j_count * dim];
    let mut states_scratch = states.clone();
    let mut ancestors: Vec<usize> = (0..j_count).collect();
    let mut ancestors_scratch = ancestors.clone();
    let mut p = vec![0.0; ctx.param_local.len()];
    let mut log_w = vec![0.0; j_count];
    let mut w = vec![0.0; j_count];

    let gather = |row: &[f64], p: &mut [f64]| {
        for (pi, &li) in p.iter_mut().zip(&ctx.param_local) {
            *pi = row[li];
        }
    };
    let sd_at = |n: usize| -> Result<Vec<f64>> { ctx.active.iter().map(|&g| it.table.sd(g, n)).collect() };

    perturb(&mut rows, &ctx.map, &sd_at(0)?, it.scale, rng)?;
    for j in 0..j_count {
        gather(&rows[j * k..(j + 1) * k], &mut p);
        dynamics
            .rinit(&p, unit.t0(), rng, &mut states[j * dim..(j + 1) * dim])
            .map_err(|e| unit.slot_error(e))?;
    }

    let mut loglik = 0.0;
    let mut t_prev = unit.t0();
    for (n, (&t, y)) in unit.times().iter().zip(unit.data()).enumerate() {
        perturb(&mut rows, &ctx.map, &sd_at(n + 1)?, it.scale, rng)?;
        for j in 0..j_count {
            gather(&rows[j * k..(j + 1) * k], &mut p);
            let x = &mut states[j * dim..(j + 1) * dim];
            dynamics.rprocess(x, t_prev, t, &p, rng).map_err(|e| unit.slot_error(e))?;
            log_w[j] = dynamics.dmeasure(y, x, t, &p).map_err(|e| unit.slot_error(e))?;
        }
        match normalize_log_weights(&log_w, &mut w) {
            Some(shift) => loglik += shift + (w.iter().sum::<f64>() / j_count as f64).ln(),
            None => {
                *failures += 1;
                if *failures > it.threshold {
                    return Err(Error::FailureThreshold { failures: *failures, threshold: it.threshold });
                }
                loglik = f64::NEG_INFINITY;
                w.fill(1.0);
            }
        }
        let idx = multinomial_resample(&w, rng).expect("weights are positive and finite");
        for (j, &src) in idx.iter().enumerate() {
            rows_scratch[j * k..(j + 1) * k].copy_from_slice(&rows[src * k..(src + 1) * k]);
            states_scratch[j * dim..(j + 1) * dim].copy_from_slice(&states[src * dim..(src + 1) * dim]);
            ancestors_scratch[j] = ancestors[src];
        }
        std::mem::swap(&mut rows, &mut rows_scratch);
        std::mem::swap(&mut states, &mut states_scratch);
        std::mem::swap(&mut ancestors, &mut ancestors_scratch);
        t_prev = t;
    }

    if !it.marginalize && !ctx.others.is_empty() {
        let mut column = vec![0.0; j_count];
        for &g in &ctx.others {
            for (c, &src) in column.iter_mut().zip(&ancestors) {
                *c = swarm.values[src * d + g];
            }
            for (j, c) in column.iter().enumerate() {
                swarm.values[j * d + g] = *c;
            }
        }
    }
    for j in 0..j_count {
        for (li, &g) in ctx.active.iter().enumerate() {
            swarm.values[j * d + g] = rows[j * k + li];
        }
    }
    Ok(loglik)
}

/// Swarm mean on the estimation scale, mapped back. Blocks on which every
/// particle agrees return that value unchanged.
fn point_estimate(swarm: &Swarm, map: &EstimationMap) -> Result<Vec<f64>> {
    let d = swarm.width();
    let mut out = vec![0.0; d];
    let mut est = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let first = swarm.particle(0);
    for block in &map.blocks {
        let constant = (1..swarm.particles)
            .all(|j| block.indices.iter().all(|&i| swarm.value(i, j).to_bits() == first[i].to_bits()));
        if constant {
            for &i in &block.indices {
                out[i] = first[i];
            }
            continue;
        }
        for &i in &block.indices {
            mean[i] = 0.0;
        }
        for j in 0..swarm.particles {
            map.block_to_est(block, swarm.particle(j), &mut est)?;
            for &i in &block.indices {
                mean[i] += est[i];
            }
        }
        for &i in &block.indices {
            mean[i] /= swarm.particles as f64;
        }
        block_from_est(block, &mean, &mut out);
    }
    Ok(out)
}

/// Iterated filtering over a whole panel. Iteration `m`, unit `u` draws from
/// `stream.child(m).child_str(u)`.
pub fn mif2_panel(panel: &PanelModel, start: &ParamSet, settings: &MifSettings, stream: Stream) -> Result<MifResult> {
    mif2_panel_observed(panel, start, settings, stream, &mut NoObserver)
}

pub fn mif2_panel_observed(
    panel: &PanelModel,
    start: &ParamSet,
    settings: &MifSettings,
    stream: Stream,
    observer: &mut dyn MifObserver,
) -> Result<MifResult> {
    if settings.iterations == 0 || settings.particles == 0 {
        return Err(Error::Argument("iterated filtering needs at least one iteration and one particle".into()));
    }
    let layout = panel.layout();
    if start.layout() != layout {
        return Err(Error::Argument("starting parameters do not match the panel layout".into()));
    }
    if let Some(unit) = panel.units().iter().find(|u| !u.has_data()) {
        return Err(Error::Argument(format!("unit `{}` has no data", unit.name())));
    }
    let global = EstimationMap::compile(panel.transforms(), &layout)?;
    global.to_est(&start.values())?;
    let table = settings.rw_sd.table(&layout)?;
    let contexts = (0..panel.units().len())
        .map(|u| UnitContext::new(panel, &layout, u))
        .collect::<Result<Vec<_>>>()?;

    let mut swarm = Swarm::constant(start, settings.particles);
    let units = panel.unit_names();
    let mut traces = Traces {
        param_names: layout.flat_names(),
        units: units.clone(),
        rows: vec![TraceRow {
            params: start.values(),
            unit_logliks: vec![f64::NAN; units.len()],
            loglik: f64::NAN,
        }],
    };
    let mut failures = 0;
    for m in 1..=settings.iterations {
        observer.iteration_start(m, &swarm);
        let it = IterationContext {
            table: &table,
            scale: settings.cooling.multiplier(m),
            marginalize: settings.marginalize,
            threshold: settings.failure_threshold,
        };
        let iteration_stream = stream.child(m as u64);
        let mut unit_logliks = Vec::with_capacity(units.len());
        for (u, unit) in panel.units().iter().enumerate() {
            observer.unit_start(m, u, &swarm);
            let mut rng = iteration_stream.child_str(unit.name()).rng();
            unit_logliks.push(filter_unit(unit, &contexts[u], &it, &mut swarm, &mut failures, &mut rng)?);
            observer.unit_end(m, u, &swarm);
        }
        traces.rows.push(TraceRow {
            params: point_estimate(&swarm, &global)?,
            loglik: unit_logliks.iter().sum(),
            unit_logliks,
        });
    }
    let estimate = ParamSet::unflatten(&layout, &traces.rows[settings.iterations].params)?;
    Ok(MifResult {
        start: start.clone(),
        final_swarm: swarm,
        estimate,
        traces,
        settings: settings.clone(),
        failures,
        refinement: None,
    })
}

fn mif2_unit_with(
    unit: &UnitModel,
    params: &NamedValues,
    transforms: &TransformSpec,
    settings: &MifSettings,
    stream: Stream,
) -> Result<MifResult> {
    let names = unit.dynamics().param_names().to_vec();
    let values = unit.param_vector(params)?;
    let shared: NamedValues = names.iter().cloned().zip(values).collect();
    let panel = PanelModel::build(vec![unit.clone()], shared, SpecificInput::Names(Vec::new()))?
        .with_transforms(transforms.clone());
    let settings = MifSettings { rw_sd: settings.rw_sd.for_unit(unit.name(), &names), ..settings.clone() };
    mif2_panel(&panel, &panel.params().clone(), &settings, stream)
}

/// Iterated filtering on a single unit with every parameter treated as
/// shared. Per-unit intensities in `settings.rw_sd` resolve to this unit's.
pub fn mif2_unit(unit: &UnitModel, params: &NamedValues, settings: &MifSettings, stream: Stream) -> Result<MifResult> {
    mif2_unit_with(unit, params, unit.transforms(), settings, stream)
}

/// Re-optimizes each unit's specific parameters on its own, holding the
/// shared ones at the estimate. Every unit runs `reps` single-unit searches
/// with the settings of `result` and keeps the one whose final iteration has
/// the highest log-likelihood. Unit `u`, repetition `r` uses
/// `stream.child_str(u).child(r)`.
pub fn block_refine(result: &MifResult, panel: &PanelModel, reps: usize, stream: Stream) -> Result<MifResult> {
    if reps == 0 {
        return Err(Error::Argument("block refinement needs at least one repetition".into()));
    }
    let layout = panel.layout();
    if result.estimate.layout() != layout {
        return Err(Error::Argument("estimate does not match the panel layout".into()));
    }
    let mut out = result.clone();
    if layout.specific.is_empty() {
        out.refinement = Some(Refinement { rep_logliks: vec![Vec::new(); layout.units.len()], chosen: Vec::new() });
        return Ok(out);
    }
    let mut refinement = Refinement { rep_logliks: Vec::new(), chosen: Vec::new() };
    let d = layout.len();
    for (u, unit) in panel.units().iter().enumerate() {
        let start = result.estimate.unit_params(unit.name())?;
        let settings = MifSettings {
            rw_sd: result.settings.rw_sd.for_unit(unit.name(), &layout.specific),
            ..result.settings.clone()
        };
        let unit_stream = stream.child_str(unit.name());
        let runs = (0..reps)
            .map(|r| mif2_unit_with(unit, &start, panel.transforms(), &settings, unit_stream.child(r as u64)))
            .collect::<Result<Vec<_>>>()?;
        let logliks: Vec<f64> = runs.iter().map(MifResult::loglik).collect();
        let mut best = 0;
        for (r, ll) in logliks.iter().enumerate() {
            if *ll > logliks[best] || (logliks[best].is_nan() && !ll.is_nan()) {
                best = r;
            }
        }
        let chosen = &runs[best];
        let local = chosen.estimate.layout();
        for (b, name) in layout.specific.iter().enumerate() {
            let li = local.shared.iter().position(|n| n == name).expect("unit uses its specific parameters");
            let flat = format_param_name(name, Some(unit.name()));
            out.estimate.set(&flat, chosen.estimate.shared()[name])?;
            let g = layout.specific_index(b, u);
            for j in 0..out.final_swarm.particles {
                out.final_swarm.values[j * d + g] = chosen.final_swarm.value(li, j);
            }
        }
        out.failures += runs.iter().map(|r| r.failures).sum::<usize>();
        refinement.rep_logliks.push(logliks);
        refinement.chosen.push(best);
    }
    out.refinement = Some(refinement);
    Ok(out)
}
