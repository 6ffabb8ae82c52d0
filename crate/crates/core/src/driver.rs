//! Experiment configuration and the command runner behind the CLI.
//!
//! A configuration is flat `key=value` text. Keys that take several entries
//! (`param`, `rw_sd`, `lower`, `upper`) are repeated, one `name:value` per
//! line. Every run writes `config.txt` (a canonical echo that can be fed
//! back with `--config`), its result CSVs and `manifest.json`; a failed run
//! also writes `error.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde_json::json;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::io::{read_csv, read_panel, write_csv, write_panel};
use crate::mif::{block_refine, mif2_panel, CoolingSchedule, CoolingType, MifResult, MifSettings};
use crate::model::PanelModel;
use crate::models::gompertz::{panel_gompertz, GompertzParams};
use crate::models::kalman::exact_loglik;
use crate::models::random_walk::panel_random_walk;
use crate::optim::{maximize_exact_loglik, NelderMeadOptions};
use crate::params::{parse_param_name, profile_design, runif_panel_design, DesignMatrix, NamedValues, ParamSet, RwSdSpec};
use crate::profile::{mcap, run_profile, ProfileSettings, ProfileTable};
use crate::rng::Stream;
use crate::smc::{logmeanexp, panel_logmeanexp, pfilter_unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Pfilter,
    Mif2,
    BlockRefine,
    Profile,
    Mcap,
    Kalman,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Simulate,
        Command::Pfilter,
        Command::Mif2,
        Command::BlockRefine,
        Command::Profile,
        Command::Mcap,
        Command::Kalman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Pfilter => "pfilter",
            Command::Mif2 => "mif2",
            Command::BlockRefine => "block-refine",
            Command::Profile => "profile",
            Command::Mcap => "mcap",
            Command::Kalman => "kalman",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub model: String,
    /// Number of units `U` of a simulated panel.
    pub units: usize,
    /// Number of observation times `N` of a simulated panel.
    pub times: usize,
    /// Parameter overrides by flat or base name.
    pub params: Vec<(String, f64)>,
    /// Directory written by `simulate`; replaces simulation when given.
    pub panel: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: PathBuf,
    pub particles: usize,
    pub iterations: usize,
    pub reps: usize,
    pub block_reps: usize,
    pub rw_sd: Vec<(String, f64)>,
    pub cooling: CoolingType,
    pub cooling_fraction: f64,
    pub marginalize: bool,
    pub failure_threshold: usize,
    pub nseq: usize,
    pub lower: Vec<(String, f64)>,
    pub upper: Vec<(String, f64)>,
    pub starts: Option<PathBuf>,
    pub estimates: Option<PathBuf>,
    pub focal: Option<String>,
    pub grid: Vec<f64>,
    pub nprof: usize,
    pub eval_reps: usize,
    pub eval_particles: usize,
    pub span: f64,
    pub level: f64,
    pub profile: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            model: "gompertz".into(),
            units: 50,
            times: 100,
            params: Vec::new(),
            panel: None,
            seed: None,
            workers: 1,
            out: PathBuf::from("out"),
            particles: 1000,
            iterations: 25,
            reps: 10,
            block_reps: 0,
            rw_sd: Vec::new(),
            cooling: CoolingType::Geometric,
            cooling_fraction: 0.5,
            marginalize: false,
            failure_threshold: 100,
            nseq: 0,
            lower: Vec::new(),
            upper: Vec::new(),
            starts: None,
            estimates: None,
            focal: None,
            grid: Vec::new(),
            nprof: 3,
            eval_reps: 10,
            eval_particles: 2500,
            span: 0.75,
            level: 0.95,
            profile: None,
        }
    }

    /// Applies `key=value` pairs in order; scalar keys keep the last value,
    /// list keys accumulate.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn entry(key: &str, v: &str) -> Result<(String, f64)> {
            let (name, x) = v
                .rsplit_once(':')
                .ok_or_else(|| Error::Config(format!("`{key}` expects name:value, got `{v}`")))?;
            parse_param_name(name.trim()).map_err(|e| Error::Config(e.to_string()))?;
            Ok((name.trim().to_string(), num(key, x)?))
        }
        let v = value.trim();
        match key.trim() {
            "command" => {
                let c: Command = v.parse()?;
                if c != self.command {
                    return Err(Error::Config(format!("config is for `{v}`, not `{}`", self.command.name())));
                }
            }
            "model" => self.model = v.to_string(),
            "units" => self.units = num(key, v)?,
            "times" => self.times = num(key, v)?,
            "param" => self.params.push(entry(key, v)?),
            "panel" => self.panel = Some(PathBuf::from(v)),
            "seed" => self.seed = Some(num(key, v)?),
            "workers" => self.workers = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "particles" => self.particles = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "reps" => self.reps = num(key, v)?,
            "block_reps" => self.block_reps = num(key, v)?,
            "rw_sd" => self.rw_sd.push(entry(key, v)?),
            "cooling" => {
                self.cooling = match v {
                    "geometric" => CoolingType::Geometric,
                    "hyperbolic" => CoolingType::Hyperbolic,
                    _ => return Err(Error::Config(format!("unknown cooling type `{v}`"))),
                }
            }
            "cooling_fraction" => self.cooling_fraction = num(key, v)?,
            "marginalize" => self.marginalize = num(key, v)?,
            "failure_threshold" => self.failure_threshold = num(key, v)?,
            "nseq" => self.nseq = num(key, v)?,
            "lower" => self.lower.push(entry(key, v)?),
            "upper" => self.upper.push(entry(key, v)?),
            "starts" => self.starts = Some(PathBuf::from(v)),
            "estimates" => self.estimates = Some(PathBuf::from(v)),
            "focal" => self.focal = Some(v.to_string()),
            "grid" => {
                self.grid = v.split(',').map(|x| num(key, x)).collect::<Result<Vec<f64>>>()?;
            }
            "nprof" => self.nprof = num(key, v)?,
            "eval_reps" => self.eval_reps = num(key, v)?,
            "eval_particles" => self.eval_particles = num(key, v)?,
            "span" => self.span = num(key, v)?,
            "level" => self.level = num(key, v)?,
            "profile" => self.profile = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical `key=value` echo; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("command", self.command.name().into());
        line("model", self.model.clone());
        line("units", self.units.to_string());
        line("times", self.times.to_string());
        for (n, v) in &self.params {
            line("param", format!("{n}:{v}"));
        }
        if let Some(p) = &self.panel {
            line("panel", p.display().to_string());
        }
        if let Some(seed) = self.seed {
            line("seed", seed.to_string());
        }
        line("workers", self.workers.to_string());
        line("out", self.out.display().to_string());
        line("particles", self.particles.to_string());
        line("iterations", self.iterations.to_string());
        line("reps", self.reps.to_string());
        line("block_reps", self.block_reps.to_string());
        for (n, v) in &self.rw_sd {
            line("rw_sd", format!("{n}:{v}"));
        }
        line(
            "cooling",
            match self.cooling {
                CoolingType::Geometric => "geometric".into(),
                CoolingType::Hyperbolic => "hyperbolic".into(),
            },
        );
        line("cooling_fraction", self.cooling_fraction.to_string());
        line("marginalize", self.marginalize.to_string());
        line("failure_threshold", self.failure_threshold.to_string());
        line("nseq", self.nseq.to_string());
        for (n, v) in &self.lower {
            line("lower", format!("{n}:{v}"));
        }
        for (n, v) in &self.upper {
            line("upper", format!("{n}:{v}"));
        }
        if let Some(p) = &self.starts {
            line("starts", p.display().to_string());
        }
        if let Some(p) = &self.estimates {
            line("estimates", p.display().to_string());
        }
        if let Some(f) = &self.focal {
            line("focal", f.clone());
        }
        if !self.grid.is_empty() {
            line("grid", self.grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        }
        line("nprof", self.nprof.to_string());
        line("eval_reps", self.eval_reps.to_string());
        line("eval_particles", self.eval_particles.to_string());
        line("span", self.span.to_string());
        line("level", self.level.to_string());
        if let Some(p) = &self.profile {
            line("profile", p.display().to_string());
        }
        s
    }

    fn needs_seed(&self) -> bool {
        match self.command {
            Command::Mcap => false,
            Command::Kalman => self.panel.is_none(),
            _ => true,
        }
    }

    fn settings(&self) -> Result<MifSettings> {
        let mut rw = RwSdSpec::new();
        for (name, v) in &self.rw_sd {
            let (base, unit) = parse_param_name(name)?;
            rw = match unit {
                Some(u) => rw.with_unit(&base, &u, *v),
                None => rw.with(&base, *v),
            };
        }
        Ok(MifSettings {
            iterations: self.iterations,
            particles: self.particles,
            rw_sd: rw,
            cooling: CoolingSchedule::new(self.cooling, self.cooling_fraction).map_err(|e| Error::Config(e.to_string()))?,
            marginalize: self.marginalize,
            failure_threshold: self.failure_threshold,
        })
    }

    /// Checks everything that can be checked without running the command.
    fn validate(&self, panel: Option<&PanelModel>) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.needs_seed() && self.seed.is_none() {
            return cfg(format!("`{}` needs a seed", self.command.name()));
        }
        if self.workers == 0 {
            return cfg("workers must be >= 1".into());
        }
        self.settings()?;
        let Some(panel) = panel else { return Ok(()) };
        let layout = panel.layout();
        let known = |name: &str| {
            layout.index_of(name).is_some() || layout.shared.iter().chain(&layout.specific).any(|n| n == name)
        };
        for (name, _) in self.params.iter().chain(&self.lower).chain(&self.upper).chain(&self.rw_sd) {
            if !known(name) {
                return cfg(format!("unknown parameter `{name}` for this model"));
            }
        }
        self.settings()?.rw_sd.table(&layout).map_err(|e| Error::Config(e.to_string()))?;
        let names = |v: &[(String, f64)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        if names(&self.lower) != names(&self.upper) {
            return cfg("lower and upper must name the same parameters in the same order".into());
        }
        match self.command {
            Command::Pfilter if self.reps == 0 || self.particles == 0 => cfg("pfilter needs reps >= 1 and particles >= 1".into()),
            Command::Mif2 | Command::BlockRefine | Command::Profile if self.iterations == 0 || self.particles == 0 => {
                cfg("searches need iterations >= 1 and particles >= 1".into())
            }
            Command::BlockRefine if self.block_reps == 0 => cfg("block-refine needs block_reps >= 1".into()),
            Command::Profile => {
                let Some(focal) = &self.focal else { return cfg("profile needs a focal parameter".into()) };
                if layout.index_of(focal).is_none() {
                    return cfg(format!("focal parameter `{focal}` is not in the panel"));
                }
                if self.grid.is_empty() || self.nprof == 0 {
                    return cfg("profile needs a non-empty grid and nprof >= 1".into());
                }
                if self.eval_reps == 0 || self.eval_particles == 0 {
                    return cfg("profile needs eval_reps >= 1 and eval_particles >= 1".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{l}`")))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub outputs: Vec<PathBuf>,
    /// Filtering failures (time steps with no weight) over the whole run.
    pub failures: usize,
    /// Profile points or searches given up on.
    pub dropped: usize,
}

fn master(cfg: &ExperimentConfig) -> Stream {
    Stream::new(cfg.seed.unwrap_or(0))
}

fn overrides(cfg: &ExperimentConfig) -> NamedValues {
    cfg.params.iter().cloned().collect()
}

/// Latent states per unit, time and state variable.
type States = Vec<Vec<Vec<f64>>>;

/// Finished searches by task index, and the first failure-threshold abort.
type Partitioned = (Vec<(usize, MifResult)>, Option<Error>);

/// The panel a command works on: loaded from `panel`, or simulated from the
/// model with stream `seed/"data"`.
fn build_panel(cfg: &ExperimentConfig, keep_states: bool) -> Result<(PanelModel, Option<States>)> {
    if let Some(dir) = &cfg.panel {
        let panel = read_panel(dir)?;
        return Ok((panel.with_values(&overrides(cfg)).map_err(|e| Error::Config(e.to_string()))?, None));
    }
    if cfg.units == 0 || cfg.times == 0 {
        return Err(Error::Config("units and times must be >= 1".into()));
    }
    let template = match cfg.model.as_str() {
        "gompertz" => panel_gompertz(cfg.units, cfg.times, &GompertzParams::default(), Stream::new(0))?,
        "random_walk" => panel_random_walk(cfg.units, cfg.times, 1.0, Stream::new(0))?,
        other => return Err(Error::Config(format!("unknown model `{other}`"))),
    };
    let panel = template.with_values(&overrides(cfg)).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.seed.is_none() {
        return Ok((panel, None));
    }
    let mut sim = panel.simulate(1, master(cfg).child_str("data"), keep_states)?.remove(0);
    Ok((sim.panel, sim.states.take()))
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn file(&mut self, name: &str) -> Result<std::fs::File> {
        Ok(std::fs::File::create(self.path(name))?)
    }
}

fn f(x: f64) -> String {
    x.to_string()
}

fn estimate_header(layout_names: &[String]) -> Vec<String> {
    let mut h = vec!["search".to_string()];
    h.extend(layout_names.iter().cloned());
    h.push("loglik".into());
    h.push("failures".into());
    h
}

fn estimate_row(i: usize, r: &MifResult) -> Vec<String> {
    let mut row = vec![i.to_string()];
    row.extend(r.estimate.values().into_iter().map(f));
    row.push(f(r.loglik()));
    row.push(r.failures.to_string());
    row
}

fn run_simulate(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<RunReport> {
    let (panel, states) = build_panel(cfg, true)?;
    let dir = out.path("panel");
    write_panel(&dir, &panel)?;
    let states = states.unwrap_or_default();
    let mut rows = Vec::new();
    for (u, unit) in panel.units().iter().enumerate() {
        for (n, (t, y)) in unit.times().iter().zip(unit.data()).enumerate() {
            let mut row = vec![unit.name().to_string(), f(*t)];
            row.extend(states.get(u).map(|s| s[n].clone()).unwrap_or_default().into_iter().map(f));
            row.extend(y.iter().copied().map(f));
            rows.push(row);
        }
    }
    let dynamics = panel.units()[0].dynamics();
    let mut header = vec!["unit".to_string(), "time".to_string()];
    header.extend(dynamics.state_names().iter().cloned());
    header.extend(dynamics.obs_names().iter().cloned());
    write_csv(&out.path("plot_data.csv"), &header, &rows)?;
    Ok(RunReport::default())
}

fn run_pfilter(cfg: &ExperimentConfig, panel: &PanelModel, exec: &Executor, out: &mut Outputs<'_>) -> Result<RunReport> {
    let stream = master(cfg).child_str("pfilter");
    let unit_params = panel
        .unit_names()
        .iter()
        .map(|n| panel.unit_params(n))
        .collect::<Result<Vec<_>>>()?;
    // Same streams as pfilter_panel: replicate r, unit u -> child(r).child_str(u).
    let results = exec.map((0..cfg.reps).collect(), |_, r: usize| -> Result<(Vec<f64>, usize)> {
        let rep = stream.child(r as u64);
        let mut lls = Vec::new();
        let mut failures = 0;
        for (unit, params) in panel.units().iter().zip(&unit_params) {
            match pfilter_unit(unit, params, cfg.particles, &mut rep.child_str(unit.name()).rng()) {
                Ok(fr) => lls.push(fr.loglik),
                Err(Error::FilterFailure { .. }) => {
                    failures += 1;
                    lls.push(f64::NEG_INFINITY);
                }
                Err(e) => return Err(e),
            }
        }
        Ok((lls, failures))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let units = panel.unit_names();
    let mut header = vec!["replicate".to_string()];
    header.extend(units.iter().map(|u| format!("loglik[{u}]")));
    header.push("loglik".into());
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for (r, (lls, _)) in results.iter().enumerate() {
        let total: f64 = lls.iter().sum();
        totals.push(total);
        let mut row = vec![r.to_string()];
        row.extend(lls.iter().copied().map(f));
        row.push(f(total));
        rows.push(row);
    }
    write_csv(&out.path("pfilter_replicates.csv"), &header, &rows)?;
    let with_se = cfg.reps > 1;
    let by_unit: Vec<Vec<f64>> = (0..units.len()).map(|u| results.iter().map(|(l, _)| l[u]).collect()).collect();
    let l1 = logmeanexp(&totals, with_se)?;
    let l2 = panel_logmeanexp(&by_unit, with_se)?;
    let se = |s: Option<f64>| s.map(f).unwrap_or_default();
    write_csv(
        &out.path("pfilter_summary.csv"),
        &["estimator".into(), "value".into(), "se".into()],
        &[
            vec!["lambda1".into(), f(l1.value), se(l1.se)],
            vec!["lambda2".into(), f(l2.value), se(l2.se)],
        ],
    )?;
    Ok(RunReport { failures: results.iter().map(|(_, k)| k).sum(), ..Default::default() })
}

fn read_design(path: &Path) -> Result<DesignMatrix> {
    DesignMatrix::read_csv(std::fs::File::open(path)?)
}

fn starts(cfg: &ExperimentConfig, panel: &PanelModel) -> Result<DesignMatrix> {
    if let Some(p) = &cfg.starts {
        return read_design(p);
    }
    if cfg.nseq > 0 {
        let layout = panel.layout();
        let lower: NamedValues = cfg.lower.iter().cloned().collect();
        let upper: NamedValues = cfg.upper.iter().cloned().collect();
        let specific: Vec<String> = lower.keys().filter(|k| layout.specific.contains(k)).cloned().collect();
        let mut rng = master(cfg).child_str("design").rng();
        return runif_panel_design(&lower, &upper, &specific, &layout.units, cfg.nseq, &mut rng);
    }
    Ok(DesignMatrix { columns: panel.layout().flat_names(), rows: vec![panel.params().values()] })
}

fn start_sets(panel: &PanelModel, design: &DesignMatrix) -> Result<Vec<ParamSet>> {
    (0..design.len())
        .map(|i| panel.with_values(&design.row(i)).map(|p| p.params().clone()))
        .collect()
}

/// Collects per-task results, keeping the successes and remembering the
/// first failure-threshold error.
fn partition(results: Vec<Result<MifResult>>) -> Result<Partitioned> {
    let mut ok = Vec::new();
    let mut failed = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => ok.push((i, r)),
            Err(e @ Error::FailureThreshold { .. }) => {
                failed.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ok, failed))
}

fn run_mif2(cfg: &ExperimentConfig, panel: &PanelModel, exec: &Executor, out: &mut Outputs<'_>) -> Result<RunReport> {
    let settings = cfg.settings()?;
    let design = starts(cfg, panel)?;
    design.write_csv(out.file("design.csv")?)?;
    let stream = master(cfg).child_str("mif2");
    let results = exec.map(start_sets(panel, &design)?, |i, start| {
        let task = stream.child(i as u64);
        let fit = mif2_panel(panel, &start, &settings, task)?;
        if cfg.block_reps > 0 {
            block_refine(&fit, panel, cfg.block_reps, task.child_str("block"))
        } else {
            Ok(fit)
        }
    });
    let (ok, failed) = partition(results)?;
    std::fs::create_dir_all(out.dir.join("traces"))?;
    for (i, r) in &ok {
        r.traces.write_csv(out.file(&format!("traces/search_{i}.csv"))?)?;
    }
    let names = panel.layout().flat_names();
    let rows: Vec<Vec<String>> = ok.iter().map(|(i, r)| estimate_row(*i, r)).collect();
    write_csv(&out.path("estimates.csv"), &estimate_header(&names), &rows)?;
    let report = RunReport {
        failures: ok.iter().map(|(_, r)| r.failures).sum(),
        dropped: design.len() - ok.len(),
        ..Default::default()
    };
    match failed {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn run_block_refine(
    cfg: &ExperimentConfig,
    panel: &PanelModel,
    exec: &Executor,
    out: &mut Outputs<'_>,
) -> Result<RunReport> {
    let settings = cfg.settings()?;
    let layout = panel.layout();
    let names = layout.flat_names();
    let estimates: Vec<ParamSet> = match &cfg.estimates {
        None => vec![panel.params().clone()],
        Some(path) => {
            let (header, rows) = read_csv(path)?;
            rows.iter()
                .map(|row| {
                    let values: NamedValues = header
                        .iter()
                        .zip(row)
                        .filter(|(h, _)| names.contains(h))
                        .map(|(h, v)| {
                            v.parse::<f64>()
                                .map(|x| (h.clone(), x))
                                .map_err(|_| Error::Config(format!("bad number `{v}` in {}", path.display())))
                        })
                        .collect::<Result<_>>()?;
                    Ok(panel.with_values(&values)?.params().clone())
                })
                .collect::<Result<_>>()?
        }
    };
    let stream = master(cfg).child_str("block-refine");
    let results = exec.map(estimates, |i, est| {
        block_refine(&MifResult::from_estimate(est, settings.clone()), panel, cfg.block_reps, stream.child(i as u64))
    });
    let (ok, failed) = partition(results)?;
    let rows: Vec<Vec<String>> = ok.iter().map(|(i, r)| estimate_row(*i, r)).collect();
    write_csv(&out.path("estimates.csv"), &estimate_header(&names), &rows)?;
    let mut detail = Vec::new();
    for (i, r) in &ok {
        if let Some(refinement) = &r.refinement {
            for (u, lls) in refinement.rep_logliks.iter().enumerate() {
                for (rep, ll) in lls.iter().enumerate() {
                    let chosen = refinement.chosen.get(u) == Some(&rep);
                    detail.push(vec![i.to_string(), layout.units[u].clone(), rep.to_string(), f(*ll), chosen.to_string()]);
                }
            }
        }
    }
    write_csv(
        &out.path("block_refine.csv"),
        &["search", "unit", "rep", "loglik", "chosen"].map(String::from),
        &detail,
    )?;
    let report = RunReport { failures: ok.iter().map(|(_, r)| r.failures).sum(), ..Default::default() };
    match failed {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Exact-likelihood profile over the grid: every parameter with a nonzero
/// random walk (other than the focal one) is maximized by Nelder-Mead.
fn kalman_profile(cfg: &ExperimentConfig, panel: &PanelModel, focal: &str, exec: &Executor) -> Result<Vec<Vec<String>>> {
    let layout = panel.layout();
    let table = cfg.settings()?.rw_sd.table(&layout)?;
    let free: Vec<String> = layout
        .flat_names()
        .into_iter()
        .enumerate()
        .filter(|(i, n)| table.base(*i) > 0.0 && n != focal)
        .map(|(_, n)| n)
        .collect();
    let rows = exec.map(cfg.grid.clone(), |_, v| -> Result<Vec<String>> {
        let mut start = panel.params().clone();
        start.set(focal, v)?;
        let (best, ll) = maximize_exact_loglik(panel, &start, &free, &NelderMeadOptions::default())?;
        let mut row = vec![f(v), f(ll)];
        row.extend(best.values().into_iter().map(f));
        Ok(row)
    });
    rows.into_iter().collect()
}

fn run_profile_cmd(
    cfg: &ExperimentConfig,
    panel: &PanelModel,
    exec: &Executor,
    out: &mut Outputs<'_>,
) -> Result<RunReport> {
    let focal = cfg.focal.clone().expect("validated");
    let lower: NamedValues = cfg.lower.iter().cloned().collect();
    let upper: NamedValues = cfg.upper.iter().cloned().collect();
    let mut rng = master(cfg).child_str("design").rng();
    let design = profile_design(&focal, &cfg.grid, &lower, &upper, cfg.nprof, &mut rng)?;
    design.write_csv(out.file("design.csv")?)?;
    let settings = ProfileSettings {
        search: cfg.settings()?,
        block_reps: cfg.block_reps,
        eval_reps: cfg.eval_reps,
        eval_particles: cfg.eval_particles,
    };
    let table = run_profile(panel, &focal, &design, &settings, master(cfg).child_str("profile"), exec)?;
    table.write_csv(out.file("profile.csv")?)?;
    if exact_loglik(panel).is_ok() {
        let mut header = vec![focal.clone(), "loglik".to_string()];
        header.extend(panel.layout().flat_names());
        write_csv(&out.path("kalman_profile.csv"), &header, &kalman_profile(cfg, panel, &focal, exec)?)?;
    }
    Ok(RunReport { dropped: table.dropped, ..Default::default() })
}

fn run_mcap(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<RunReport> {
    let focal = cfg.focal.clone().ok_or_else(|| Error::Config("mcap needs a focal parameter".into()))?;
    let path = cfg.profile.clone().ok_or_else(|| Error::Config("mcap needs a profile table".into()))?;
    let table = ProfileTable::read_csv(&focal, std::fs::File::open(&path)?)?;
    let r = mcap(&table.logliks(), &table.focal_values(), cfg.level, cfg.span)?;
    r.write_summary_csv(out.file("mcap_summary.csv")?)?;
    r.write_curve_csv(out.file("mcap_curve.csv")?)?;
    Ok(RunReport::default())
}

fn run_kalman(panel: &PanelModel, out: &mut Outputs<'_>) -> Result<RunReport> {
    let exact = exact_loglik(panel)?;
    let mut rows: Vec<Vec<String>> =
        exact.units.iter().zip(&exact.unit_logliks).map(|(u, l)| vec![u.clone(), f(*l)]).collect();
    rows.push(vec!["total".into(), f(exact.total)]);
    write_csv(&out.path("kalman.csv"), &["unit".into(), "loglik".into()], &rows)?;
    Ok(RunReport::default())
}

fn execute(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<RunReport> {
    cfg.validate(None)?;
    let exec = Executor::new(cfg.workers)?;
    match cfg.command {
        Command::Simulate => {
            let (panel, _) = build_panel(cfg, false)?;
            cfg.validate(Some(&panel))?;
            run_simulate(cfg, out)
        }
        Command::Mcap => run_mcap(cfg, out),
        command => {
            let (panel, _) = build_panel(cfg, false)?;
            cfg.validate(Some(&panel))?;
            match command {
                Command::Pfilter => run_pfilter(cfg, &panel, &exec, out),
                Command::Mif2 => run_mif2(cfg, &panel, &exec, out),
                Command::BlockRefine => run_block_refine(cfg, &panel, &exec, out),
                Command::Profile => run_profile_cmd(cfg, &panel, &exec, out),
                Command::Kalman => run_kalman(&panel, out),
                Command::Simulate | Command::Mcap => unreachable!(),
            }
        }
    }
}

/// Short machine-readable name of an error variant.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::NameFormat(_) => "name_format",
        Error::UnknownParameter(_) => "unknown_parameter",
        Error::TransformDomain { .. } => "transform_domain",
        Error::Bounds { .. } => "bounds",
        Error::Argument(_) => "argument",
        Error::Construction(_) => "construction",
        Error::MissingSlot { .. } => "missing_slot",
        Error::Capability { .. } => "capability",
        Error::Domain(_) => "domain",
        Error::DegenerateMeasurement => "degenerate_measurement",
        Error::FilterFailure { .. } => "filter_failure",
        Error::FailureThreshold { .. } => "failure_threshold",
        Error::Smoothing(_) => "smoothing",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

/// Writes `error.json` with the error kind and message into `dir`.
pub fn write_error_record(dir: &Path, kind: &str, message: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let record = json!({ "status": "error", "kind": kind, "message": message });
    std::fs::write(dir.join("error.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

/// Runs one command, writing its outputs, `config.txt` and `manifest.json`
/// (plus `error.json` on failure) into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let mut out = Outputs { dir: &cfg.out, written: Vec::new() };
    let result = execute(cfg, &mut out);
    let outputs: Vec<String> = out
        .written
        .iter()
        .map(|p| p.strip_prefix(&cfg.out).unwrap_or(p).display().to_string())
        .collect();
    let (status, report) = match &result {
        Ok(r) => ("ok", r.clone()),
        Err(_) => ("error", RunReport::default()),
    };
    let manifest = json!({
        "command": cfg.command.name(),
        "status": status,
        "config": cfg.to_text().lines().collect::<Vec<_>>(),
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "failures": report.failures,
        "dropped": report.dropped,
        "outputs": outputs,
    });
    std::fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    match result {
        Ok(mut r) => {
            r.outputs = out.written;
            Ok(r)
        }
        Err(e) => {
            write_error_record(&cfg.out, error_kind(&e), &e.to_string())?;
            Err(e)
        }
    }
}
