//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. The profile coverage study is slow and
//! only runs with `--ignored` or `--include-ignored`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{dense_gompertz_panel, sd};
use panelpomp::driver::{run, Command, ExperimentConfig};
use panelpomp::exec::Executor;
use panelpomp::mif::{block_refine, mif2_panel, CoolingSchedule, CoolingType, MifSettings};
use panelpomp::model::PanelModel;
use panelpomp::models::gompertz::{panel_gompertz, GompertzParams};
use panelpomp::optim::{maximize_exact_loglik, NelderMeadOptions};
use panelpomp::params::{parse_param_name, profile_design, NamedValues, ParamSet, RwSdSpec, TransformSpec};
use panelpomp::profile::{chisq1_quantile, mcap, run_profile, ProfileSettings};
use panelpomp::rng::Stream;
use panelpomp::smc::{logmeanexp, panel_logmeanexp, pfilter_panel};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

/// Number, name, check and whether it belongs to the slow suite.
type Criterion = (usize, &'static str, fn() -> Outcome, bool);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exact_total(panel: &PanelModel, p: &ParamSet) -> f64 {
    dense_gompertz_panel(&panel.with_params(p.clone()).unwrap()).iter().sum()
}

/// Replicated panel filtering; returns the unit-by-replicate matrix and the
/// replicate totals.
fn replicate(panel: &PanelModel, reps: usize, particles: usize, stream: Stream) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut by_unit = vec![Vec::with_capacity(reps); panel.units().len()];
    let mut totals = Vec::with_capacity(reps);
    for r in 0..reps {
        let f = pfilter_panel(panel, particles, stream.child(r as u64)).unwrap();
        for (u, l) in f.unit_logliks.iter().enumerate() {
            by_unit[u].push(*l);
        }
        totals.push(f.total_loglik);
    }
    (by_unit, totals)
}

fn doubled(panel: &PanelModel) -> ParamSet {
    let mut p = panel.params().clone();
    p.set("r", 2.0 * p.get("r").unwrap()).unwrap();
    p.set("sigma", 2.0 * p.get("sigma").unwrap()).unwrap();
    for u in panel.unit_names() {
        let name = format!("tau[{u}]");
        p.set(&name, 2.0 * p.get(&name).unwrap()).unwrap();
    }
    p
}

fn rw_02() -> RwSdSpec {
    RwSdSpec::new().with("r", 0.02).with("sigma", 0.02).with("tau", 0.02)
}

/// Particle filter against the exact likelihood on three simulated panels.
fn kalman_smc_agreement() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [101u64, 202, 303] {
        let panel = panel_gompertz(5, 50, &GompertzParams::default(), Stream::new(seed)).unwrap();
        let exact: f64 = dense_gompertz_panel(&panel).iter().sum();
        let (by_unit, _) = replicate(&panel, 10, 2000, Stream::new(seed).child_str("filter"));
        let est = panel_logmeanexp(&by_unit, true).unwrap();
        let se = est.se.unwrap();
        let gap = (est.value - exact).abs();
        ok &= gap <= 3.0 * se;
        lines.push(format!("seed {seed}: |{:.3} - {:.3}| = {gap:.3} vs 3se {:.3}", est.value, exact, 3.0 * se));
    }
    check(ok, lines.join("; "))
}

/// Per-unit averaging is no noisier than whole-panel averaging.
fn estimator_comparison() -> Outcome {
    let panel = panel_gompertz(3, 30, &GompertzParams::default(), Stream::new(42)).unwrap();
    let stream = Stream::new(43);
    let (mut l1, mut l2) = (Vec::new(), Vec::new());
    for meta in 0..100 {
        let (by_unit, totals) = replicate(&panel, 5, 500, stream.child(meta));
        l1.push(logmeanexp(&totals, false).unwrap().value);
        l2.push(panel_logmeanexp(&by_unit, false).unwrap().value);
    }
    let (s1, s2) = (sd(&l1), sd(&l2));
    check(s2 <= 1.1 * s1, format!("sd lambda2 {s2:.4} vs 1.1 x sd lambda1 {:.4}", 1.1 * s1))
}

/// Iterated filtering plus block refinement against a deterministic optimum
/// of the exact likelihood from the same start.
fn pif_maximization() -> Outcome {
    let panel = panel_gompertz(5, 50, &GompertzParams::default(), Stream::new(7)).unwrap();
    let start = doubled(&panel);
    let mut settings = MifSettings::new(100, 1000, rw_02());
    settings.cooling = CoolingSchedule::geometric(0.5).unwrap();
    let fit = mif2_panel(&panel, &start, &settings, Stream::new(8)).unwrap();
    let fit = block_refine(&fit, &panel, 3, Stream::new(9)).unwrap();
    let at_fit = exact_total(&panel, &fit.estimate);

    let mut free = vec!["r".to_string(), "sigma".to_string()];
    free.extend(panel.unit_names().iter().map(|u| format!("tau[{u}]")));
    let (best, _) = maximize_exact_loglik(&panel, &start, &free, &NelderMeadOptions::default()).unwrap();
    let at_oracle = exact_total(&panel, &best);
    let at_start = exact_total(&panel, &start);
    check(
        at_fit >= at_oracle - 5.0,
        format!("start {at_start:.2}, estimate {at_fit:.2}, optimizer {at_oracle:.2}, shortfall {:.2}", at_oracle - at_fit),
    )
}

/// Marginalized and unmarginalized searches: bitwise parity without
/// unit-specific parameters, improvement with them.
fn mpif_parity() -> Outcome {
    let panel = panel_gompertz(3, 30, &GompertzParams::default(), Stream::new(55)).unwrap();
    let mut shared = panel.params().clone();
    for name in ["K", "tau", "X_0"] {
        let v = shared.get(&format!("{name}[unit1]")).unwrap();
        shared = shared.reclassify_to_shared(name, v).unwrap();
    }
    let flat = panel.with_params(shared).unwrap();
    assert!(flat.params().specific().rows().is_empty());
    let mut start = flat.params().clone();
    start.set("r", 0.2).unwrap();
    let mut settings = MifSettings::new(10, 200, rw_02());
    let a = mif2_panel(&flat, &start, &settings, Stream::new(56)).unwrap();
    settings.marginalize = true;
    let b = mif2_panel(&flat, &start, &settings, Stream::new(56)).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = a.estimate == b.estimate
        && a.final_swarm.column(0) == b.final_swarm.column(0)
        && a.traces.rows.len() == b.traces.rows.len()
        && a.traces.rows.iter().zip(&b.traces.rows).all(|(x, y)| {
            bits(&x.params) == bits(&y.params) && bits(&x.unit_logliks) == bits(&y.unit_logliks)
        });

    let panel = panel_gompertz(5, 50, &GompertzParams::default(), Stream::new(57)).unwrap();
    let start = doubled(&panel);
    let before = exact_total(&panel, &start);
    let mut details = vec![format!("B=0 bit-identical: {identical}")];
    let mut improved = true;
    for marginalize in [false, true] {
        let mut s = MifSettings::new(50, 1000, rw_02());
        s.marginalize = marginalize;
        let fit = mif2_panel(&panel, &start, &s, Stream::new(58)).unwrap();
        let after = exact_total(&panel, &fit.estimate);
        improved &= after > before;
        details.push(format!("marginalize={marginalize}: {before:.2} -> {after:.2}"));
    }
    check(identical && improved, details.join("; "))
}

/// Interval construction on synthetic profiles.
fn mcap_analytics() -> Outcome {
    let floor = chisq1_quantile(0.95) / 2.0;
    let (center, sq) = (0.3, 0.05);
    let x: Vec<f64> = (0..41).map(|i| center - 0.2 + 0.01 * i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| -100.0 - (v - center).powi(2) / (2.0 * sq * sq)).collect();
    let r = mcap(&y, &x, 0.95, 0.75).unwrap();
    let half = (r.ci.1 - r.ci.0) / 2.0;
    let expect = (2.0 * r.delta * sq * sq).sqrt();
    let mut ok = (r.delta - 1.92073).abs() <= 1e-3 && ((half - expect) / expect).abs() <= 0.01;
    let mut detail = format!("noiseless delta {:.5}, half-width {half:.5} vs {expect:.5}", r.delta);

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rng = Stream::new(5).rng();
    let mut min_delta = f64::INFINITY;
    let mut shift_ok = true;
    for _ in 0..100 {
        let scale = rng.random_range(0.1..3.0);
        let noisy: Vec<f64> = y.iter().map(|v| v + scale * noise.sample(&mut rng)).collect();
        let r = mcap(&noisy, &x, 0.95, 0.75).unwrap();
        min_delta = min_delta.min(r.delta);
        let shifted: Vec<f64> = noisy.iter().map(|v| v + 512.25).collect();
        let s = mcap(&shifted, &x, 0.95, 0.75).unwrap();
        shift_ok &= s.mle == r.mle && s.ci == r.ci && (s.delta - r.delta).abs() < 1e-10;
    }
    ok &= min_delta >= floor && shift_ok;
    detail.push_str(&format!("; min noisy delta {min_delta:.5} (floor {floor:.5}); shift invariant: {shift_ok}"));
    check(ok, detail)
}

/// Coverage of the 95% interval for `r` over simulated panels.
fn profile_coverage() -> Outcome {
    let truth = GompertzParams::default();
    let grid: Vec<f64> = (0..15).map(|i| (0.02f64.ln() + i as f64 * (0.5f64 / 0.02).ln() / 14.0).exp()).collect();
    let bounds = |v: f64| -> NamedValues { [("sigma".to_string(), v), ("tau".to_string(), v)].into_iter().collect() };
    let (lower, upper) = (bounds(0.05), bounds(0.2));
    let mut settings = MifSettings::new(50, 500, rw_02());
    settings.cooling = CoolingSchedule::new(CoolingType::Geometric, 0.5).unwrap();
    let settings = ProfileSettings { search: settings, block_reps: 0, eval_reps: 10, eval_particles: 1000 };
    let exec = Executor::new(8).unwrap();
    let mut covered = 0;
    let mut lines = Vec::new();
    for k in 0..50u64 {
        let root = Stream::new(9000 + k);
        let panel = panel_gompertz(3, 40, &truth, root.child_str("data")).unwrap();
        let design = profile_design("r", &grid, &lower, &upper, 3, &mut root.child_str("design").rng()).unwrap();
        let table = run_profile(&panel, "r", &design, &settings, root.child_str("profile"), &exec).unwrap();
        let r = mcap(&table.logliks(), &table.focal_values(), 0.95, 0.75).unwrap();
        let hit = r.ci.0 <= truth.r && truth.r <= r.ci.1;
        covered += hit as usize;
        lines.push(format!("{k}:[{:.3},{:.3}]{}", r.ci.0, r.ci.1, if hit { "" } else { "*" }));
    }
    eprintln!("intervals (* misses): {}", lines.join(" "));
    check(covered >= 42, format!("{covered}/50 intervals contain r = {}", truth.r))
}

/// Exact values of the small building blocks.
fn unit_exact() -> Outcome {
    let mut fails = Vec::new();
    let mut near = |name: &str, got: f64, want: f64| {
        if !((got - want).abs() <= 1e-12 || got == want) {
            fails.push(format!("{name}: {got} != {want}"));
        }
    };
    let c = logmeanexp(&[2.5, 2.5, 2.5], true).unwrap();
    near("logmeanexp const", c.value, 2.5);
    near("logmeanexp const se", c.se.unwrap(), 0.0);
    near("logmeanexp (0, ln3)", logmeanexp(&[0.0, 3f64.ln()], false).unwrap().value, 2f64.ln());
    near("logmeanexp shift", logmeanexp(&[1000.0, 1000.0 + 3f64.ln()], false).unwrap().value, 1000.0 + 2f64.ln());
    near("panel single column", panel_logmeanexp(&[vec![-1.5], vec![-2.25]], false).unwrap().value, -3.75);
    let m = vec![vec![0.0, 3f64.ln()], vec![0.0, 3f64.ln()]];
    near("panel 2x2", panel_logmeanexp(&m, false).unwrap().value, 2.0 * 2f64.ln());

    let geo = CoolingSchedule::geometric(0.5).unwrap();
    let hyp = CoolingSchedule::hyperbolic(0.5).unwrap();
    near("geometric m=50", geo.multiplier(50), 0.5);
    near("geometric m=0", geo.multiplier(0), 1.0);
    near("hyperbolic m=0", hyp.multiplier(0), 1.0);
    near("geometric m=1", geo.multiplier(1), 0.5f64.powf(1.0 / 50.0));
    near("geometric m=1 rounded", (geo.multiplier(1) * 1e6).round() / 1e6, 0.986233);
    near("hyperbolic m=50", hyp.multiplier(50), 0.5);

    let name_ok = parse_param_name("tau[unit2]").unwrap() == ("tau".to_string(), Some("unit2".to_string()))
        && parse_param_name("r").unwrap() == ("r".to_string(), None)
        && parse_param_name("K[unit2").is_err();
    near("parse_param_name examples", name_ok as u8 as f64, 1.0);

    let flat: NamedValues =
        [("K".to_string(), 1.0), ("p".to_string(), 0.5), ("tau".to_string(), 0.15)].into_iter().collect();
    let p = ParamSet::from_flat(&flat, None).unwrap();
    let spec = TransformSpec::new()
        .with("K", panelpomp::params::Transform::Log)
        .with("p", panelpomp::params::Transform::Logit)
        .with("tau", panelpomp::params::Transform::Log);
    let est = spec.to_est(&p).unwrap();
    near("log K=1", est[0], 0.0);
    near("logit 0.5", est[1], 0.0);
    near("log 0.15 rounded", (est[2] * 1e4).round() / 1e4, -1.8971);
    let back = spec.from_est(&est, &p.layout()).unwrap();
    near("K back", back.get("K").unwrap(), 1.0);
    near("p back", back.get("p").unwrap(), 0.5);
    near("tau back", back.get("tau").unwrap(), 0.15);
    check(fails.is_empty(), if fails.is_empty() { "all examples exact".into() } else { fails.join("; ") })
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Every stochastic command gives identical CSVs with 1 and 8 workers.
fn determinism() -> Outcome {
    let base = tempfile::tempdir().unwrap();
    let small = [("units", "3"), ("times", "15"), ("particles", "80"), ("iterations", "3")];
    let rw = [("rw_sd", "r:0.02"), ("rw_sd", "sigma:0.02"), ("rw_sd", "tau:0.02")];
    let box_ = [("lower", "sigma:0.05"), ("upper", "sigma:0.2"), ("lower", "tau:0.05"), ("upper", "tau:0.2")];
    let cases: Vec<(Command, Vec<(&str, &str)>)> = vec![
        (Command::Simulate, vec![]),
        (Command::Pfilter, vec![("reps", "6")]),
        (Command::Mif2, [&rw[..], &box_[..], &[("nseq", "8"), ("block_reps", "2")]].concat()),
        (Command::BlockRefine, [&rw[..], &[("block_reps", "3")]].concat()),
        (
            Command::Profile,
            [&rw[..], &box_[..], &[("focal", "r"), ("grid", "0.05,0.1,0.2"), ("nprof", "2"), ("eval_reps", "2"), ("eval_particles", "50")]]
                .concat(),
        ),
    ];
    let mut mismatched = Vec::new();
    for (command, extra) in cases {
        let mut outputs = Vec::new();
        for workers in [1usize, 8] {
            let mut cfg = ExperimentConfig::new(command);
            cfg.seed = Some(2024);
            cfg.workers = workers;
            cfg.out = base.path().join(format!("{}-{workers}", command.name()));
            for (k, v) in small.iter().chain(&extra) {
                cfg.set(k, v).unwrap();
            }
            run(&cfg).unwrap();
            outputs.push(csv_files(&cfg.out));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            mismatched.push(command.name());
        }
    }
    check(mismatched.is_empty(), format!("commands differing across worker counts: {mismatched:?}"))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // libtest-style flags: the slow study is opt-in.
    let slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 8] = [
        (1, "Kalman-SMC agreement", kalman_smc_agreement, false),
        (2, "estimator comparison", estimator_comparison, false),
        (3, "PIF maximization", pif_maximization, false),
        (4, "MPIF parity and improvement", mpif_parity, false),
        (5, "MCAP analytics", mcap_analytics, false),
        (6, "profile coverage", profile_coverage, true),
        (7, "unit-exact examples", unit_exact, false),
        (8, "determinism across workers", determinism, false),
    ];
    let mut failed = 0;
    for (n, name, f, is_slow) in criteria {
        if is_slow && !slow {
            println!("criterion {n} ({name}): SKIPPED (slow suite; run with --include-ignored)");
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
