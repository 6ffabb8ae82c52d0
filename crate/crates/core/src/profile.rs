//! Profile likelihood and Monte Carlo adjusted profile (MCAP) intervals.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::mif::{block_refine, mif2_panel, MifSettings};
use crate::model::PanelModel;
use crate::params::{parse_param_name, DesignMatrix, ParamSet, RwSd, RwSdSpec};
use crate::rng::Stream;
use crate::smc::{logmeanexp, pfilter_panel};

/// Number of grid points on which the smoothed profile is evaluated.
pub const MCAP_GRID: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct LoessFit {
    pub fitted: Vec<f64>,
    /// Residual variance times the squared norm of the smoother weights.
    pub variance: Vec<f64>,
}

fn tricube(u: f64) -> f64 {
    if u < 1.0 {
        (1.0 - u * u * u).powi(3)
    } else {
        0.0
    }
}

/// Weighted least squares of `y` on `basis` columns; returns the smoother
/// row giving the intercept, or `None` if the system is singular.
fn intercept_weights(t: &[f64], w: &[f64], degree: usize) -> Option<Vec<f64>> {
    let p = degree + 1;
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for (&ti, &wi) in t.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let row: Vec<f64> = (0..p).map(|k| ti.powi(k as i32)).collect();
        for r in 0..p {
            for c in 0..p {
                xtwx[(r, c)] += wi * row[r] * row[c];
            }
        }
    }
    let chol = xtwx.cholesky()?;
    let mut e1 = DVector::<f64>::zeros(p);
    e1[0] = 1.0;
    let coef = chol.solve(&e1);
    Some(
        t.iter()
            .zip(w)
            .map(|(&ti, &wi)| wi * (0..p).map(|k| coef[k] * ti.powi(k as i32)).sum::<f64>())
            .collect(),
    )
}

struct Loess<'a> {
    x: &'a [f64],
    q: usize,
}

impl Loess<'_> {
    /// Smoother weights at `x0`.
    fn weights(&self, x0: f64) -> Vec<f64> {
        let d: Vec<f64> = self.x.iter().map(|&xi| (xi - x0).abs()).collect();
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let h = sorted[self.q - 1];
        if h == 0.0 {
            let k = d.iter().filter(|&&di| di == 0.0).count() as f64;
            return d.iter().map(|&di| if di == 0.0 { 1.0 / k } else { 0.0 }).collect();
        }
        // Slightly widened so the q-th neighbour keeps a tiny positive weight.
        let h = h * (1.0 + 1e-10);
        let w: Vec<f64> = d.iter().map(|&di| tricube(di / h)).collect();
        let t: Vec<f64> = self.x.iter().map(|&xi| (xi - x0) / h).collect();
        let mut distinct: Vec<f64> = t.iter().zip(&w).filter(|(_, &wi)| wi > 0.0).map(|(&ti, _)| ti).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let max_degree = distinct.len().saturating_sub(1).min(2);
        (0..=max_degree)
            .rev()
            .find_map(|deg| intercept_weights(&t, &w, deg))
            .expect("a constant fit always exists")
    }
}

/// Local quadratic regression with tricube weights over the
/// `floor(span * n)` nearest neighbours of each evaluation point. Local fits
/// drop to linear or constant where a neighbourhood has too few distinct
/// abscissae.
pub fn loess_smooth(x: &[f64], y: &[f64], span: f64, eval_points: &[f64]) -> Result<LoessFit> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Smoothing("x and y differ in length".into()));
    }
    if n < 5 {
        return Err(Error::Smoothing(format!("need at least 5 points, got {n}")));
    }
    if x.iter().chain(y).chain(eval_points).any(|v| !v.is_finite()) {
        return Err(Error::Smoothing("non-finite input".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::Smoothing("all x values are equal".into()));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::Smoothing(format!("span must lie in (0, 1], got {span}")));
    }
    let q = (n as f64 * span).floor() as usize;
    if q < 3 {
        return Err(Error::Smoothing(format!("span {span} leaves {q} points per neighbourhood, need 3")));
    }
    let loess = Loess { x, q };
    let dot = |l: &[f64]| l.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut rss = 0.0;
    let mut trace = 0.0;
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let l = loess.weights(xi);
        trace += l[i];
        rss += (yi - dot(&l)).powi(2);
    }
    let sigma2 = rss / (n as f64 - trace).max(1.0);
    let mut fitted = Vec::with_capacity(eval_points.len());
    let mut variance = Vec::with_capacity(eval_points.len());
    for &x0 in eval_points {
        let l = loess.weights(x0);
        fitted.push(dot(&l));
        variance.push(sigma2 * l.iter().map(|v| v * v).sum::<f64>());
    }
    Ok(LoessFit { fitted, variance })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McapResult {
    pub level: f64,
    pub span: f64,
    /// Argmax of the smoothed profile.
    pub mle: f64,
    /// Log-likelihood drop defining the interval.
    pub delta: f64,
    pub ci: (f64, f64),
    /// False when the interval runs into the edge of the profiled range.
    pub lower_bounded: bool,
    pub upper_bounded: bool,
    /// False when the local quadratic is not concave; the standard errors
    /// are then NaN and no Monte Carlo adjustment is made.
    pub concave: bool,
    /// Coefficients of `c - a z^2 + b z` with `z = parameter - mle`.
    pub quadratic: (f64, f64),
    pub se_stat: f64,
    pub se_mc: f64,
    pub se_total: f64,
    pub grid: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Chi-square (1 df) quantile, as the squared two-sided normal quantile;
/// stays accurate for levels near 0.
pub fn chisq1_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0).powi(2)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// `(a, b)` and their covariance `(var_a, var_b, cov_ab)`.
type QuadraticFit = ((f64, f64), (f64, f64, f64));

/// Weighted quadratic fit `y ~ c - a z^2 + b z`; returns `(a, b)` and their
/// estimated covariance `(var_a, var_b, cov_ab)`.
fn weighted_quadratic(z: &[f64], y: &[f64], w: &[f64]) -> Result<QuadraticFit> {
    let rows: Vec<usize> = (0..z.len()).filter(|&i| w[i] > 0.0).collect();
    let n = rows.len();
    if n < 4 {
        return Err(Error::Smoothing(format!("{n} weighted points near the maximum, need at least 4")));
    }
    let x = DMatrix::from_fn(n, 3, |r, c| {
        let zi = z[rows[r]];
        let v = [1.0, -zi * zi, zi][c];
        v * w[rows[r]].sqrt()
    });
    let yv = DVector::from_fn(n, |r, _| y[rows[r]] * w[rows[r]].sqrt());
    let xtx = x.transpose() * &x;
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Smoothing("quadratic fit is singular".into()))?;
    let coef = &inv * (x.transpose() * &yv);
    let resid = &yv - &x * &coef;
    let s2 = resid.norm_squared() / (n - 3) as f64;
    let v = inv * s2;
    Ok(((coef[1], coef[2]), (v[(1, 1)], v[(2, 2)], v[(1, 2)])))
}

/// Monte Carlo adjusted profile interval.
///
/// The profile is smoothed, the maximum located on a fine grid, and a
/// weighted quadratic fitted to the raw points near it. Its curvature gives
/// the statistical standard error; the sampling variability of its argmax
/// gives the Monte Carlo one. The cutoff is the chi-square cutoff inflated
/// by their ratio, so it never falls below `chisq1(level) / 2`.
pub fn mcap(loglik: &[f64], parameter: &[f64], level: f64, span: f64) -> Result<McapResult> {
    if loglik.len() != parameter.len() {
        return Err(Error::Argument("loglik and parameter differ in length".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("level must lie in (0, 1), got {level}")));
    }
    if loglik.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("profile log-likelihoods must be finite".into()));
    }
    let top = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y: Vec<f64> = loglik.iter().map(|v| v - top).collect();
    let lo = parameter.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = parameter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(lo, hi, MCAP_GRID);
    let centred = loess_smooth(parameter, &y, span, &grid)?.fitted;
    let (imax, smax) = centred
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let mle = grid[imax];

    let dist: Vec<f64> = parameter.iter().map(|p| (p - mle).abs()).collect();
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (span * dist.len() as f64).trunc() as usize;
    if k == 0 {
        return Err(Error::Smoothing("span too small for the quadratic fit".into()));
    }
    let cutoff = sorted[k - 1];
    let maxdist = dist.iter().copied().filter(|&d| d < cutoff).fold(0.0, f64::max);
    if maxdist == 0.0 {
        return Err(Error::Smoothing("too few distinct points near the maximum".into()));
    }
    let weight: Vec<f64> = dist
        .iter()
        .map(|&d| if d < cutoff { tricube(d / maxdist) } else { 0.0 })
        .collect();
    let z: Vec<f64> = parameter.iter().map(|p| p - mle).collect();
    let ((a, b), (var_a, var_b, cov_ab)) = weighted_quadratic(&z, &y, &weight)?;

    let chi = chisq1_quantile(level);
    let concave = a > 0.0;
    let (se_stat, se_mc, delta) = if concave {
        let se_stat2 = 1.0 / (2.0 * a);
        let se_mc2 = (var_b - 2.0 * b / a * cov_ab + b * b / (a * a) * var_a) / (4.0 * a * a);
        let se_mc2 = se_mc2.max(0.0);
        (se_stat2.sqrt(), se_mc2.sqrt(), chi * (a * se_mc2 + 0.5))
    } else {
        (f64::NAN, f64::NAN, chi / 2.0)
    };

    let inside = |i: usize| smax - centred[i] <= delta;
    let mut lo_i = imax;
    while lo_i > 0 && inside(lo_i - 1) {
        lo_i -= 1;
    }
    let mut hi_i = imax;
    while hi_i + 1 < grid.len() && inside(hi_i + 1) {
        hi_i += 1;
    }
    Ok(McapResult {
        level,
        span,
        mle,
        delta,
        ci: (grid[lo_i], grid[hi_i]),
        lower_bounded: lo_i > 0,
        upper_bounded: hi_i + 1 < grid.len(),
        concave,
        quadratic: (a, b),
        se_stat,
        se_mc,
        se_total: (se_stat * se_stat + se_mc * se_mc).sqrt(),
        smoothed: centred.iter().map(|v| v + top).collect(),
        grid,
    })
}

impl McapResult {
    /// One-row summary CSV.
    pub fn write_summary_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "level", "span", "mle", "delta", "ci_lower", "ci_upper", "lower_bounded", "upper_bounded", "concave",
            "se_stat", "se_mc", "se_total",
        ])?;
        w.write_record([
            self.level.to_string(),
            self.span.to_string(),
            self.mle.to_string(),
            self.delta.to_string(),
            self.ci.0.to_string(),
            self.ci.1.to_string(),
            self.lower_bounded.to_string(),
            self.upper_bounded.to_string(),
            self.concave.to_string(),
            self.se_stat.to_string(),
            self.se_mc.to_string(),
            self.se_total.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Smoothed profile as `(parameter, fitted)` pairs.
    pub fn write_curve_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "smoothed_loglik"])?;
        for (x, y) in self.grid.iter().zip(&self.smoothed) {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub params: Vec<f64>,
    pub loglik: f64,
    pub loglik_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    pub focal: String,
    pub param_names: Vec<String>,
    pub rows: Vec<ProfileRow>,
    /// Design rows whose search failed or whose evaluations all failed.
    pub dropped: usize,
}

impl ProfileTable {
    pub fn focal_values(&self) -> Vec<f64> {
        let c = self.param_names.iter().position(|n| *n == self.focal).expect("focal column");
        self.rows.iter().map(|r| r.params[c]).collect()
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loglik).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.param_names.clone();
        header.push("loglik".into());
        header.push("loglik_se".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.params.iter().map(f64::to_string).collect();
            rec.push(r.loglik.to_string());
            rec.push(r.loglik_se.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(focal: &str, reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let p = header.len().checked_sub(2).filter(|_| header.ends_with(&["loglik".into(), "loglik_se".into()]));
        let p = p.ok_or_else(|| Error::Argument("profile table must end with loglik, loglik_se".into()))?;
        let param_names = header[..p].to_vec();
        if !param_names.iter().any(|n| n == focal) {
            return Err(Error::Argument(format!("profile table has no column `{focal}`")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let vals = rec?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Argument(format!("bad number `{s}` in profile table"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != header.len() {
                return Err(Error::Argument("ragged profile row".into()));
            }
            rows.push(ProfileRow { params: vals[..p].to_vec(), loglik: vals[p], loglik_se: vals[p + 1] });
        }
        Ok(Self { focal: focal.to_string(), param_names, rows, dropped: 0 })
    }
}

#[derive(Clone, Debug)]
pub struct ProfileSettings {
    pub search: MifSettings,
    /// Repetitions per unit in the block refinement; 0 skips it.
    pub block_reps: usize,
    pub eval_reps: usize,
    pub eval_particles: usize,
}

/// Removes the random walk on `focal` (a shared name or `name[unit]`).
pub fn freeze(rw_sd: &RwSdSpec, focal: &str, units: &[String]) -> Result<RwSdSpec> {
    let (base, unit) = parse_param_name(focal)?;
    let Some(unit) = unit else {
        let mut out = rw_sd.clone();
        out.remove(&base);
        return Ok(out);
    };
    let mut out = rw_sd.clone();
    if let Some(entry) = rw_sd.entries().get(&base) {
        for u in units {
            let sd = match entry {
                RwSd::Recycled(v) => *v,
                RwSd::PerUnit(map) => map.get(u).copied().unwrap_or(0.0),
            };
            out = out.with_unit(&base, u, if *u == unit { 0.0 } else { sd });
        }
    }
    Ok(out)
}

/// One search per design row with `focal` held at the row's value, then
/// unperturbed re-evaluation; per focal value the best row is kept. Row `i`
/// uses `stream.child(i)`.
pub fn run_profile(
    panel: &PanelModel,
    focal: &str,
    design: &DesignMatrix,
    settings: &ProfileSettings,
    stream: Stream,
    executor: &Executor,
) -> Result<ProfileTable> {
    let layout = panel.layout();
    let focal_index = layout.index_of(focal).ok_or_else(|| Error::UnknownParameter(focal.to_string()))?;
    if !design.columns.iter().any(|c| c == focal) {
        return Err(Error::Argument(format!("design has no column `{focal}`")));
    }
    if settings.eval_reps == 0 || settings.eval_particles == 0 {
        return Err(Error::Argument("profile evaluation needs reps >= 1 and particles >= 1".into()));
    }
    let search = MifSettings { rw_sd: freeze(&settings.search.rw_sd, focal, &layout.units)?, ..settings.search.clone() };
    search.rw_sd.table(&layout)?;
    let starts = (0..design.len())
        .map(|i| panel.with_values(&design.row(i)).map(|p| p.params().clone()))
        .collect::<Result<Vec<ParamSet>>>()?;

    let evaluate = |i: usize, start: ParamSet| -> Result<Option<ProfileRow>> {
        let task = stream.child(i as u64);
        let fit = match mif2_panel(panel, &start, &search, task.child(0)) {
            Ok(fit) => fit,
            Err(Error::FailureThreshold { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let fit = if settings.block_reps > 0 {
            match block_refine(&fit, panel, settings.block_reps, task.child(1)) {
                Ok(fit) => fit,
                Err(Error::FailureThreshold { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        } else {
            fit
        };
        let fitted = panel.with_params(fit.estimate.clone())?;
        let eval_stream = task.child(2);
        let lls = (0..settings.eval_reps)
            .map(|r| match pfilter_panel(&fitted, settings.eval_particles, eval_stream.child(r as u64)) {
                Ok(f) => Ok(f.total_loglik),
                Err(Error::FilterFailure { .. }) => Ok(f64::NEG_INFINITY),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<f64>>>()?;
        if lls.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Ok(None);
        }
        let est = logmeanexp(&lls, lls.len() > 1)?;
        Ok(Some(ProfileRow { params: fit.estimate.values(), loglik: est.value, loglik_se: est.se.unwrap_or(0.0) }))
    };
    let results = executor.map(starts, evaluate);

    let mut best: Vec<ProfileRow> = Vec::new();
    let mut dropped = 0;
    for r in results {
        let Some(row) = r? else {
            dropped += 1;
            continue;
        };
        let v = row.params[focal_index];
        match best.iter_mut().find(|b| b.params[focal_index].to_bits() == v.to_bits()) {
            Some(b) if row.loglik > b.loglik => *b = row,
            Some(_) => {}
            None => best.push(row),
        }
    }
    best.sort_by(|a, b| a.params[focal_index].total_cmp(&b.params[focal_index]));
    Ok(ProfileTable { focal: focal.to_string(), param_names: layout.flat_names(), rows: best, dropped })
}
