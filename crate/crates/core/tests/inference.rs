mod common;

use common::dense_gompertz_panel;
use panelpomp::mif::{block_refine, mif2_panel, mif2_unit, CoolingSchedule, MifSettings, Traces};
use panelpomp::model::PanelModel;
use panelpomp::models::gompertz::{panel_gompertz, GompertzParams};
use panelpomp::params::{ParamSet, RwSdSpec};
use panelpomp::rng::Stream;

fn total(panel: &PanelModel, p: &ParamSet) -> f64 {
    dense_gompertz_panel(&panel.with_params(p.clone()).unwrap()).iter().sum()
}

fn doubled(panel: &PanelModel) -> ParamSet {
    let mut start = panel.params().clone();
    for name in ["r", "sigma", "tau"] {
        let v = start.get(name).unwrap_or_else(|| start.get(&format!("{name}[unit1]")).unwrap());
        start.set(name, 2.0 * v).unwrap();
    }
    start
}

fn rw() -> RwSdSpec {
    RwSdSpec::new().with("r", 0.02).with("sigma", 0.02).with("tau", 0.02)
}

#[test]
fn panel_search_improves_exact_likelihood() {
    let panel = panel_gompertz(5, 50, &GompertzParams::default(), Stream::new(8)).unwrap();
    let start = doubled(&panel);
    let settings = MifSettings::new(50, 1000, rw());
    let fit = mif2_panel(&panel, &start, &settings, Stream::new(9)).unwrap();
    assert_eq!(fit.traces.len(), 51);
    assert_eq!(fit.traces.rows[0].params, start.values());
    let (before, after) = (total(&panel, &start), total(&panel, &fit.estimate));
    assert!(after > before, "{after} <= {before}");
    let first = fit.traces.rows[1].loglik;
    assert!(fit.loglik() > first, "trace loglik {} -> {}", first, fit.loglik());
    // K and X_0 carry no random walk.
    assert_eq!(fit.estimate.get("K[unit3]"), start.get("K[unit3]"));

    let mut buf = Vec::new();
    fit.traces.write_csv(&mut buf).unwrap();
    let back = Traces::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.rows.len(), fit.traces.rows.len());
    for (a, b) in back.rows.iter().zip(&fit.traces.rows) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
    }
}

#[test]
fn unit_search_improves_exact_likelihood() {
    let panel = panel_gompertz(1, 60, &GompertzParams::default(), Stream::new(4)).unwrap();
    let unit = &panel.units()[0];
    let mut params = panel.unit_params(unit.name()).unwrap();
    for n in ["r", "sigma", "tau"] {
        *params.get_mut(n).unwrap() *= 2.0;
    }
    let settings = MifSettings::new(40, 1000, rw());
    let fit = mif2_unit(unit, &params, &settings, Stream::new(5)).unwrap();
    let ll = |p: &ParamSet| {
        let g = |n: &str| p.get(n).unwrap();
        common::dense_gompertz_unit(
            unit.t0(),
            unit.times(),
            &unit.data().iter().map(|y| y[0]).collect::<Vec<_>>(),
            g("K"),
            g("r"),
            g("sigma"),
            g("tau"),
            g("X_0"),
        )
    };
    assert_eq!(fit.start.get("r"), params.get("r").copied());
    assert!(ll(&fit.estimate) > ll(&fit.start));
}

#[test]
fn zero_sd_search_is_identity() {
    let panel = panel_gompertz(2, 10, &GompertzParams::default(), Stream::new(1)).unwrap();
    let fit = mif2_panel(&panel, panel.params(), &MifSettings::new(1, 50, RwSdSpec::new()), Stream::new(2)).unwrap();
    assert_eq!(&fit.estimate, panel.params());
    assert!(fit.traces.rows.iter().all(|r| r.params == panel.params().values()));
}

#[test]
fn block_refinement_does_not_lose_ground() {
    let panel = panel_gompertz(4, 40, &GompertzParams::default(), Stream::new(12)).unwrap();
    let start = doubled(&panel);
    let mut settings = MifSettings::new(30, 500, rw());
    settings.cooling = CoolingSchedule::geometric(0.5).unwrap();
    let fit = mif2_panel(&panel, &start, &settings, Stream::new(13)).unwrap();
    let refined = block_refine(&fit, &panel, 3, Stream::new(14)).unwrap();
    let r = refined.refinement.as_ref().unwrap();
    assert_eq!(r.rep_logliks.len(), 4);
    // Shared parameters are left alone.
    assert_eq!(refined.estimate.get("r"), fit.estimate.get("r"));
    let (a, b) = (total(&panel, &fit.estimate), total(&panel, &refined.estimate));
    assert!(b >= a - 3.0, "refined {b} vs {a}");
}
