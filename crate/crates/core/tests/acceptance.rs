//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use koopman_control::basis::{inner_product, BasisSpec, DomainBox};
use koopman_control::koopman::{KoopmanModel, KoopmanOptions};
use koopman_control::mapinv::{invert_map, inversion_residual};
use koopman_control::models::{
    cw_dynamics, duffing_dynamics, potential_rho_form, potential_table_discrepancies, printed_potential_table,
    CwConfig, DuffingParams,
};
use koopman_control::ocp::augment_energy_optimal;
use koopman_control::scenario::{CompareSpec, GridSpec, ModelSpec, Scenario, Session, SolverKind, SweepSpec};
use koopman_control::verify::significant_relative_errors;
use koopman_control::{MultiPoly, PolyMap};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const A_LEO: f64 = 6_678_000.0;
const ONE_DAY_X0: [f64; 4] = [-2077.2, 4515.7, -0.086074, 4.2376];
/// Printed costates (km-based units), planar components.
const PUBLISHED_LAMBDA: [f64; 4] = [-4.3659e-11, 1.6400e-13, -1.0017e-9, -1.5900e-8];

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn cw_scenario(k_max: u32, order: u32, x0: [f64; 4], tf: f64) -> Scenario {
    Scenario::from_json_str(&format!(
        r#"{{"schema_version":1,"model":{{"name":"cw","a":{A_LEO},"k_max":{k_max},"planar":true}},
            "basis":{{"max_order":{order}}},"x0":{x0:?},"tf":{tf}}}"#
    ))
    .unwrap()
}

fn duffing_scenario(tf: f64) -> Scenario {
    Scenario::from_json_str(&format!(
        r#"{{"schema_version":1,"model":{{"name":"duffing"}},"basis":{{"max_order":3}},"x0":[1.0,0.0],"tf":{tf}}}"#
    ))
    .unwrap()
}

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Relative errors per costate group (position, velocity), flooring tiny
/// components at 1e-3 of their group maximum.
fn grouped_errors(value: &[f64], reference: &[f64]) -> Vec<f64> {
    let h = value.len() / 2;
    let mut e = significant_relative_errors(&value[..h], &reference[..h], 1e-3);
    e.extend(significant_relative_errors(&value[h..], &reference[h..], 1e-3));
    e
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let session = Session::new();
    let sc = cw_scenario(2, 3, ONE_DAY_X0, 86400.0);
    let out = session.solve(&sc).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed().as_secs_f64();
    let r = &out.report;
    let vs_stm = significant_relative_errors(&r.lambda0, &r.lambda0_linear, 0.0);
    let km: Vec<f64> = r.lambda0.iter().map(|l| l * 1e-3).collect();
    let vs_published = significant_relative_errors(&km, &PUBLISHED_LAMBDA, 0.0);
    ensure(
        max_of(&vs_stm) <= 0.02 && max_of(&vs_published) <= 0.05 && elapsed <= 60.0,
        format!(
            "koopman vs STM max rel {:.2e}, vs published max rel {:.2e} ({:?}), {elapsed:.2} s",
            max_of(&vs_stm),
            max_of(&vs_published),
            vs_published.iter().map(|v| format!("{:.3}%", v * 100.0)).collect::<Vec<_>>()
        ),
    )
}

fn criterion_2() -> Check {
    let session = Session::new();
    let mut sc = cw_scenario(2, 3, ONE_DAY_X0, 86400.0);
    let pm = sc.model.prepare().map_err(|e| e.to_string())?;
    let sep: f64 = pm.state_to_model(&ONE_DAY_X0).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
    let koop = session.solve(&sc).map_err(|e| e.to_string())?;
    sc.solver = SolverKind::StmOracle;
    let stm = session.solve(&sc).map_err(|e| e.to_string())?;
    let rel_stm = stm.report.terminal_error_model / sep;
    let rel_koop = koop.report.terminal_error_model / sep;
    ensure(
        rel_stm <= 1e-8 && rel_koop <= 1e-2,
        format!("scaled relative terminal error: STM {rel_stm:.2e}, Koopman {rel_koop:.2e}"),
    )
}

fn criterion_3() -> Check {
    let session = Session::new();
    let tfs: Vec<f64> = (2..=10).map(f64::from).collect();
    let mut sc = duffing_scenario(2.0);
    sc.sweep = Some(SweepSpec { tf: tfs.clone() });
    let sweep = session.sweep(&sc).map_err(|e| e.to_string())?;
    let mut worst_terminal = 0.0f64;
    let mut worst_agree = 0.0f64;
    for (tf, r) in tfs.iter().zip(&sweep.results) {
        let k = r.as_ref().map_err(|f| format!("tf {tf}: {}", f.error))?;
        worst_terminal = worst_terminal.max(k.report.terminal_error.absolute);
        let mut sh = duffing_scenario(*tf);
        sh.solver = SolverKind::Shooting;
        let s = session.solve(&sh).map_err(|e| e.to_string())?;
        let e = significant_relative_errors(&k.report.lambda0, &s.report.lambda0, 1e-3);
        worst_agree = worst_agree.max(max_of(&e));
    }
    let mut grid = duffing_scenario(2.0);
    let mut points = Vec::new();
    for q in [-1.5, -0.5, 0.5, 1.5] {
        for p in [-1.0, 0.0, 1.0] {
            points.push(vec![q, p]);
        }
    }
    grid.grid = Some(GridSpec { points, circle: None });
    let results = session.grid(&grid).map_err(|e| e.to_string())?;
    let ok = results.iter().filter(|r| r.as_ref().is_ok_and(|o| o.report.terminal_error.absolute <= 1e-2)).count();
    ensure(
        worst_terminal <= 1e-2 && worst_agree <= 0.05 && sweep.monotone_effort && ok == 12,
        format!(
            "sweep terminal max {worst_terminal:.2e}, shooting agreement max {:.2}%, monotone effort {}, grid {ok}/12",
            worst_agree * 100.0,
            sweep.monotone_effort
        ),
    )
}

fn criterion_4() -> Check {
    let printed = printed_potential_table();
    let mut matched = Vec::new();
    for k in [0, 1, 3, 5] {
        let row = &printed.iter().find(|(kk, _)| *kk == k).ok_or("missing table row")?.1;
        let derived = potential_rho_form(k).map_err(|e| e.to_string())?;
        if &derived != row {
            return Err(format!("k = {k}: generating formula differs from the table"));
        }
        matched.push(k);
    }
    let cfg = CwConfig {
        scale: 1.0,
        ..CwConfig::new(A_LEO, 2)
    };
    let aug = augment_energy_optimal(&cw_dynamics(&cfg).map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    // (x, y, z, vx, vy, vz, lx, ly, lz, lvx, lvy, lvz), n = 1
    let e = |i: usize| {
        let mut v = vec![0u32; 12];
        v[i] = 1;
        v
    };
    let p = |terms: &[(usize, f64)]| MultiPoly::from_terms(12, terms.iter().map(|(i, c)| (e(*i), *c))).unwrap();
    let want = [
        p(&[(3, 1.0)]),
        p(&[(4, 1.0)]),
        p(&[(5, 1.0)]),
        p(&[(0, 3.0), (4, 2.0), (9, -1.0)]),
        p(&[(3, -2.0), (10, -1.0)]),
        p(&[(2, -1.0), (11, -1.0)]),
        p(&[(9, -3.0)]),
        MultiPoly::zero(12),
        p(&[(11, 1.0)]),
        p(&[(6, -1.0), (10, 2.0)]),
        p(&[(7, -1.0), (9, -2.0)]),
        p(&[(8, -1.0)]),
    ];
    for (i, w) in want.iter().enumerate() {
        let got = aug.dynamics().component(i);
        if got.try_sub(w).unwrap().max_abs_coefficient() != 0.0 {
            return Err(format!("augmented row {i}: got {got}, want {w}"));
        }
    }
    let disc = potential_table_discrepancies().map_err(|e| e.to_string())?;
    ensure(
        disc == vec![2, 4],
        format!("table rows {matched:?} exact, k_max = 2 augmented rows exact, table discrepancies at k = {disc:?}"),
    )
}

fn criterion_5() -> Check {
    let session = Session::new();
    let mut sc = cw_scenario(6, 4, [0.0, 10000.0, 0.0, 0.0], 43200.0);
    let mut linear = CwConfig::new(A_LEO, 2);
    linear.planar = true;
    sc.compare = Some(CompareSpec {
        model_b: ModelSpec::Cw(linear),
    });
    let rep = session.compare(&sc).map_err(|e| e.to_string())?;
    let koop = rep.controlled[0].truth_position_error.ok_or("high-order controlled solve failed")?;
    let lin = rep.controlled[1].truth_position_error.ok_or("linear controlled solve failed")?;
    let lam = rep.controlled[0].lambda0.clone().unwrap();
    sc.compare = None;
    sc.solver = SolverKind::Shooting;
    let shoot = session.solve(&sc).map_err(|e| e.to_string())?;
    let agree = grouped_errors(&lam, &shoot.report.lambda0);
    ensure(
        rep.truth == "cw-k6" && koop <= 100.0 && lin >= 10.0 * koop && max_of(&agree) <= 0.05,
        format!(
            "k6 truth position error: Koopman {koop:.3} m, linear-model costates {lin:.1} m (ratio {:.0}), shooting agreement max {:.2}%",
            lin / koop,
            max_of(&agree) * 100.0
        ),
    )
}

fn criterion_6() -> Check {
    let t = Instant::now();
    let sc = Scenario::from_json_str(&format!(
        r#"{{"schema_version":1,"model":{{"name":"cw","a":{A_LEO},"k_max":6,"planar":true}},
            "basis":{{"max_order":4}},"x0":[2000,0,0,0],"tf":14400,
            "grid":{{"circle":{{"radius":2000,"count":8,"velocity":"tangential"}}}}}}"#
    ))
    .unwrap();
    let session = Session::new();
    let results = session.grid(&sc).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed().as_secs_f64();
    let errs: Vec<f64> = results
        .iter()
        .map(|r| r.as_ref().map_or(f64::INFINITY, |o| o.report.terminal_position_error))
        .collect();
    ensure(
        results.len() == 8 && max_of(&errs) <= 20.0 && elapsed <= 600.0 && session.cached_maps() == 1,
        format!(
            "{} starts, max terminal position error {:.3} m, {} map(s), {elapsed:.1} s",
            results.len(),
            max_of(&errs),
            session.cached_maps()
        ),
    )
}

fn criterion_7() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=6);
        let order = rng.gen_range(1..=4);
        let map = common::random_map(&mut rng, d, order);
        let inv = invert_map(&map, order).map_err(|e| e.to_string())?;
        worst = worst.max(inversion_residual(&map, &inv, order).map_err(|e| e.to_string())?);
    }
    let f = PolyMap::new(1, vec![MultiPoly::from_terms(1, [(vec![1], 1.0), (vec![2], 1.0)]).unwrap()]).unwrap();
    let g = invert_map(&f, 4).map_err(|e| e.to_string())?;
    let want = [0.0, 1.0, -1.0, 2.0, -5.0];
    let rev = (0..=4u32)
        .map(|k| (g.component(0).coefficient(&[k]) - want[k as usize]).abs())
        .fold(0.0, f64::max);
    ensure(
        worst <= 1e-9 && rev <= 1e-12 && g.component(0).degree() == 4,
        format!("100 random maps worst residual {worst:.2e}, series reversion error {rev:.2e}"),
    )
}

fn criterion_8() -> Check {
    let spec = BasisSpec::new(3, 4).map_err(|e| e.to_string())?;
    let mut gram = 0.0f64;
    for i in 0..spec.len() {
        for j in 0..spec.len() {
            let g = inner_product(spec.function(i), spec.function(j)).unwrap();
            gram = gram.max((g - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let mut rng = StdRng::seed_from_u64(8);
    let exps = common::exponents(3, 0, 4);
    let mut quad = 0.0f64;
    for _ in 0..100 {
        let p = MultiPoly::monomial(3, exps[rng.gen_range(0..exps.len())].clone(), rng.gen_range(-2.0..2.0)).unwrap();
        let q = MultiPoly::monomial(3, exps[rng.gen_range(0..exps.len())].clone(), rng.gen_range(-2.0..2.0)).unwrap();
        quad = quad.max((inner_product(&p, &q).unwrap() - common::quadrature_inner(&p, &q, 5)).abs());
    }
    ensure(
        gram <= 1e-12 && quad <= 1e-12,
        format!("gram deviation {gram:.2e} ({} functions), quadrature mismatch {quad:.2e}", spec.len()),
    )
}

fn criterion_9() -> Check {
    let params = DuffingParams::default();
    let f = duffing_dynamics(&params).map_err(|e| e.to_string())?;
    let period = 2.0 * std::f64::consts::PI;
    let steps = 20_000;
    let oracle = common::rk4(common::duffing_rhs(params.a, params.mass, params.k, params.eps), &[1.0, 0.0], period, steps);
    let mut line = Vec::new();
    let mut ok = true;
    for order in [4, 5, 6] {
        let spec = BasisSpec::new(2, order).unwrap();
        let domain = DomainBox::symmetric(&[1.5, 1.5]).unwrap();
        let km = KoopmanModel::build(&f, spec, domain, &KoopmanOptions::default()).map_err(|e| e.to_string())?;
        let mut dev = 0.0f64;
        for (i, z) in oracle.iter().enumerate().step_by(500) {
            let t = period * i as f64 / steps as f64;
            let x = km.propagate(&[1.0, 0.0], t).map_err(|e| e.to_string())?;
            dev = dev.max((x[0] - z[0]).abs().max((x[1] - z[1]).abs()));
        }
        ok &= dev <= 1e-3;
        line.push(format!("order {order}: {dev:.2e}"));
    }

    // t = 0 gives the identity for every model
    let mut worst0 = 0.0f64;
    let models = [
        ModelSpec::Duffing(params),
        ModelSpec::Cw(CwConfig { planar: true, ..CwConfig::new(A_LEO, 2) }),
        ModelSpec::Cw(CwConfig::new(A_LEO, 4)),
    ];
    for m in models {
        let aug = m.prepare().map_err(|e| e.to_string())?;
        let dyns = aug.augmented().dynamics();
        let d = dyns.num_vars_in();
        let spec = BasisSpec::new(d, 3).unwrap();
        let domain = DomainBox::symmetric(&vec![0.5; d]).unwrap();
        let km = KoopmanModel::build(dyns, spec, domain, &KoopmanOptions::default()).map_err(|e| e.to_string())?;
        let x0: Vec<f64> = (0..d).map(|i| 0.3 * ((i as f64) * 0.7).sin()).collect();
        let x = km.propagate(&x0, 0.0).map_err(|e| e.to_string())?;
        worst0 = worst0.max(x.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(
        ok && worst0 <= 1e-10,
        format!("max deviation over one period {}; t = 0 identity error {worst0:.1e}", line.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("linear CW oracle equivalence", criterion_1),
        ("linear CW closed loop", criterion_2),
        ("Duffing control", criterion_3),
        ("potential expansion", criterion_4),
        ("high-order rendezvous", criterion_5),
        ("direction grid", criterion_6),
        ("map inversion properties", criterion_7),
        ("Galerkin exactness", criterion_8),
        ("Koopman propagation accuracy", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg} [{secs:.1} s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
