//! One PASS/FAIL line per acceptance criterion; the test fails if any does.

use cpsc_core::conformal::*;
use cpsc_core::corrector::*;
use cpsc_core::fowler::*;
use cpsc_core::gluing::*;
use cpsc_core::modeline::*;
use std::f64::consts::{FRAC_PI_2, PI};

type Check = Result<String, String>;

fn d(n: usize) -> Dimension {
    Dimension::new(n).unwrap()
}

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn potential(n: usize, u: f64) -> f64 {
    let nf = n as f64;
    (nf - 2.0).powi(2) / 4.0 * (u.powf(2.0 * nf / (nf - 2.0)) - u * u)
}

// Root of V(u) = V(eps) above the cylinder constant, by bisection.
fn umax_oracle(n: usize, eps: f64) -> f64 {
    let target = potential(n, eps);
    let (mut lo, mut hi) = (cylinder_constant(d(n)), 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if potential(n, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn grid_eps(n: usize) -> [f64; 4] {
    [0.1, 0.3, 0.5, 0.99 * cylinder_constant(d(n))]
}

fn default_nx(len: f64) -> usize {
    (len / DEFAULT_SPACING).ceil() as usize + 1
}

fn dipole(t: f64) -> GluingConfig {
    chain_config(3, &[(0.4, 0.25), (0.4, 0.25)], &[t]).unwrap()
}

fn delaunay_core() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    for n in [3, 4] {
        for eps in grid_eps(n) {
            let o = DelaunayOrbit::new(d(n), eps).map_err(|e| e.to_string())?;
            let drift = o.energy_drift(10).map_err(|e| e.to_string())?;
            let gap = (o.u_max - umax_oracle(n, eps)).abs();
            ensure(drift <= 1e-8, format!("n={n} eps={eps}: drift {drift:e}"))?;
            ensure(gap <= 1e-8, format!("n={n} eps={eps}: u_max gap {gap:e}"))?;
            worst = (worst.0.max(drift), worst.1.max(gap));
        }
        let o = DelaunayOrbit::new(d(n), cylinder_constant(d(n)) * (1.0 - 1e-3)).map_err(|e| e.to_string())?;
        let lin = 2.0 * PI / (n as f64 - 2.0).sqrt();
        ensure((o.period - lin).abs() <= 1e-3, format!("n={n}: period {} vs {lin}", o.period))?;
    }
    Ok(format!("drift {:.1e}, u_max gap {:.1e}", worst.0, worst.1))
}

fn jacobi_floquet() -> Check {
    let o = DelaunayOrbit::new(d(3), 0.3).map_err(|e| e.to_string())?;
    let fields = |per: usize| -> Result<[f64; 4], String> {
        let f = |r: cpsc_core::Result<JacobiField>| r.map(|x| x.residual(&o)).map_err(|e| e.to_string());
        Ok([
            f(jacobi_translation(&o, 1, per))?,
            f(jacobi_parameter(&o, 1, per))?,
            f(jacobi_explicit(&o, 1, 0.0, 1, per))?,
            f(jacobi_explicit(&o, -1, 0.0, 1, per))?,
        ])
    };
    let coarse = fields(1024)?;
    let fine = fields(2048)?;
    let at_default = fields(DEFAULT_PER_PERIOD)?;
    for k in 0..4 {
        ensure(at_default[k] <= 1e-6, format!("field {k}: residual {:e}", at_default[k]))?;
        let ratio = coarse[k] / fine[k];
        ensure((3.5..=4.5).contains(&ratio), format!("field {k}: refinement ratio {ratio}"))?;
    }
    let mut worst = 0.0f64;
    for n in [3, 4] {
        for eps in grid_eps(n) {
            let o = DelaunayOrbit::new(d(n), eps).map_err(|e| e.to_string())?;
            let r1 = floquet(&o, 1).map_err(|e| e.to_string())?;
            let rel = (r1.delta - o.period).abs() / o.period;
            ensure(rel <= 1e-6, format!("n={n} eps={eps}: δ₁ rel gap {rel:e}"))?;
            let r0 = floquet(&o, 0).map_err(|e| e.to_string())?;
            ensure((r0.trace - 2.0).abs() <= 1e-6, format!("n={n} eps={eps}: j=0 trace {}", r0.trace))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("max residual {:.1e}, δ₁ vs period {worst:.1e}", at_default.iter().fold(0.0f64, |a, b| a.max(*b))))
}

fn indicial_roots() -> Check {
    for n in 3..=6 {
        let r = indicial_roots_cylinder(d(n), 1);
        for (root, want) in r.iter().zip([1.0, -1.0]) {
            let gap = (root.re - want).abs() + root.im.abs();
            ensure(gap <= 1e-10, format!("n={n}: root {root}"))?;
        }
    }
    Ok("±1 for n = 3..6".into())
}

fn conformal_identities() -> Check {
    let mut worst = 0.0f64;
    for n in [3, 4] {
        let g = MetricDescriptor::new(MetricKind::CylinderNormalized, d(n));
        let o = DelaunayOrbit::new(d(n), 0.3).map_err(|e| e.to_string())?;
        let ub = cylinder_constant(d(n));
        let defects = |nx: usize, nt: usize| -> Result<(f64, f64), String> {
            let chart = Chart::new(g, 0.0, o.period, nx, nt).map_err(|e| e.to_string())?;
            let u = DiscreteField::from_fn(chart, |t, _| o.u(t) / ub);
            let phi = DiscreteField::from_fn(chart, |t, th| (0.8 * t).sin() * th.cos() + 0.3 * th.cos().powi(2));
            let eq = equivariance_defect(&u, &phi, &g).map_err(|e| e.to_string())?;
            let cj = conjugation_defect(&u, &phi, &g).map_err(|e| e.to_string())?;
            Ok((eq, cj))
        };
        let (eq, cj) = defects(default_nx(o.period), DEFAULT_NTHETA)?;
        ensure(eq <= 1e-4 && cj <= 1e-4, format!("n={n}: equivariance {eq:e}, conjugation {cj:e}"))?;
        let c = defects(201, 17)?;
        let f = defects(401, 33)?;
        for (name, ratio) in [("equivariance", c.0 / f.0), ("conjugation", c.1 / f.1)] {
            ensure((3.5..=4.5).contains(&ratio), format!("n={n}: {name} refinement ratio {ratio}"))?;
        }
        let rec = delaunay_recovery_error(&o).map_err(|e| e.to_string())?;
        ensure(rec <= 1e-4, format!("n={n}: curvature recovery {rec:e}"))?;
        worst = worst.max(eq).max(cj).max(rec);
    }
    Ok(format!("max defect {worst:.1e}"))
}

fn approximate_solution() -> Check {
    let m = build_connected_sum(&dipole(12.0)).map_err(|e| e.to_string())?;
    let f = error_field(&m);
    let (all, outside) = support_split(&m, &f);
    ensure(outside <= 1e-8 * all, format!("outside mass {outside:e} of {all:e}"))?;
    let ts = [8.0, 10.0, 12.0, 14.0, 16.0];
    let mut rates = Vec::new();
    for n in [3, 4] {
        let c = chain_config(n, &[(0.4, 0.25), (0.4, 0.25)], &[10.0]).map_err(|e| e.to_string())?;
        let fit = error_decay_scan(&c, &ts).map_err(|e| e.to_string())?;
        let bound = -(n as f64 - 2.0) / 4.0 + 0.05;
        ensure(fit.rate <= bound && fit.r_squared >= 0.99, format!("n={n}: {fit:?}"))?;
        if n == 4 {
            ensure((fit.rate + 0.5).abs() <= 0.1, format!("n=4: rate {}", fit.rate))?;
        }
        rates.push(format!("n={n} rate {:.4} R² {:.6}", fit.rate, fit.r_squared));
    }
    Ok(rates.join(", "))
}

fn cap_degeneracy() -> Check {
    let mut worst = 0.0f64;
    for n in [3, 4, 5] {
        let r = cap_degeneracy_radius(d(n), 1.0, 2.2, 1e-8).map_err(|e| e.to_string())?;
        ensure((r - FRAC_PI_2).abs() <= 1e-4, format!("n={n}: r = {r}"))?;
        worst = worst.max((r - FRAC_PI_2).abs());
    }
    Ok(format!("|r − π/2| ≤ {worst:.1e}"))
}

fn nonlinear_solve(out: &SolveOutcome) -> Check {
    let r = &out.report;
    ensure(r.status == SolveStatus::Converged, format!("status {:?}", r.status))?;
    let ratio = r.contraction_ratio.unwrap_or(f64::INFINITY);
    ensure(ratio <= 0.5, format!("ratio {ratio}"))?;
    ensure(r.final_residual <= 1e-8, format!("residual {:e}", r.final_residual))?;
    let o = DelaunayOrbit::new(d(3), 0.3).map_err(|e| e.to_string())?;
    let reference = delaunay_recovery_error(&o).map_err(|e| e.to_string())?;
    ensure(
        r.curvature_defect <= 10.0 * reference,
        format!("defect {:e} vs 10 × {reference:e}", r.curvature_defect),
    )?;
    ensure(r.kernel_count == Some(0), format!("kernel count {:?}", r.kernel_count))?;
    Ok(format!(
        "{} iterations, ratio {ratio:.1e}, residual {:.1e}, defect {:.1e}",
        r.iterations.len(),
        r.final_residual,
        r.curvature_defect
    ))
}

fn end_parameters(out: &SolveOutcome) -> Check {
    let mut worst = 0.0f64;
    for e in out.report.end_estimates.iter().filter(|e| !e.deficiency) {
        let gap = (e.eps_hat - 0.4).abs();
        ensure(gap <= 1e-6, format!("{e:?}"))?;
        worst = worst.max(gap);
    }
    let ubar = cylinder_constant(d(3));
    let c = chain_config(3, &[(ubar, 0.25), (0.4, 0.25)], &[12.0]).map_err(|e| e.to_string())?;
    let cyl = contraction_solve(&c, &SolverConfig::default(), false).map_err(|e| e.to_string())?;
    let free = cyl.report.end_estimates.iter().find(|e| e.end.body == 0 && !e.deficiency);
    ensure(free.is_some_and(|e| e.cylindrical), format!("no cylindrical end: {:?}", cyl.report.end_estimates))?;
    Ok(format!("free ends within {worst:.1e}, cylindrical end detected"))
}

fn uniformity() -> Check {
    let scan = right_inverse_norm_scan(&dipole(12.0), &[8.0, 12.0, 16.0], &SolverConfig::default()).map_err(|e| e.to_string())?;
    ensure(scan.inverse_spread <= 1.5, format!("inverse spread {}", scan.inverse_spread))?;
    ensure(scan.injectivity_spread <= 1.5, format!("injectivity spread {}", scan.injectivity_spread))?;
    ensure(scan.plateau, format!("growth {}", scan.growth))?;
    let m = build_connected_sum(&dipole(12.0)).map_err(|e| e.to_string())?;
    let delta = default_delta(&m, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let cr = Corrector::new(&m, delta).map_err(|e| e.to_string())?;
    let w = &cr.weight.values;
    let f = cr.system.residual(&cr.u_t, &cr.u_t);
    let (v, _) = solve_bordered(&cr.solver, &f).map_err(|e| e.to_string())?;
    let c_max = scan.samples.iter().fold(0.0f64, |a, s| a.max(s.inverse));
    let ratio = cr.system.weighted_norm(w, &v) / cr.system.weighted_norm(w, &f);
    ensure(ratio <= 2.0 * c_max, format!("‖v‖/‖f‖ = {ratio} vs C = {c_max}"))?;
    Ok(format!("spreads {:.4} / {:.4}", scan.inverse_spread, scan.injectivity_spread))
}

fn chain() -> Check {
    let s = [(0.4, 0.25), (0.4, 0.25), (0.4, 0.25)];
    let r = chain_schedule(3, &s, &SolverConfig::default(), &ScheduleOptions::default()).map_err(|e| e.to_string())?;
    ensure(r.report.status == SolveStatus::Converged, format!("status {:?}", r.report.status))?;
    for (k, (c, b)) in r.corrections.iter().zip(&r.bounds).enumerate() {
        ensure(*b == 2f64.powi(-(k as i32) - 3), format!("junction {k}: bound {b}"))?;
        ensure(c <= b, format!("junction {k}: correction {c:e} > {b}"))?;
    }
    Ok(format!("T {:?}, max correction {:.1e}", r.t_list, r.corrections.iter().fold(0.0f64, |a, c| a.max(*c))))
}

#[test]
fn acceptance() {
    let dipole_out = contraction_solve(&dipole(12.0), &SolverConfig::default(), true);
    let solved = |f: fn(&SolveOutcome) -> Check| match &dipole_out {
        Ok(out) => f(out),
        Err(e) => Err(format!("dipole solve failed: {e}")),
    };
    let results: Vec<(&str, Check)> = vec![
        ("Delaunay core", delaunay_core()),
        ("Jacobi fields and Floquet weights", jacobi_floquet()),
        ("cylinder indicial roots", indicial_roots()),
        ("conformal identities", conformal_identities()),
        ("approximate solution", approximate_solution()),
        ("spherical-cap degeneracy", cap_degeneracy()),
        ("dipole nonlinear solve", solved(nonlinear_solve)),
        ("end parameters", solved(end_parameters)),
        ("uniformity scans", uniformity()),
        ("chain schedule", chain()),
    ];
    let mut failed = 0;
    println!();
    for (k, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(msg) => println!("PASS {:>2} {name}: {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg}", k + 1);
            }
        }
    }
    assert_eq!(failed, 0, "{failed} criteria failed");
}
