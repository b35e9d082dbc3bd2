use cpsc_core::fowler::*;
use cpsc_core::modeline::*;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

fn d(n: usize) -> Dimension {
    Dimension::new(n).unwrap()
}

fn grid_eps(n: usize) -> [f64; 4] {
    [0.1, 0.3, 0.5, 0.99 * cylinder_constant(d(n))]
}

// RK4 with a fixed small step: an independent integrator for oracles.
fn rk4<const N: usize>(f: impl Fn(f64, &[f64; N]) -> [f64; N], y0: [f64; N], t0: f64, t1: f64, steps: usize) -> [f64; N] {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0;
    let mut t = t0;
    let add = |y: &[f64; N], k: &[f64; N], s: f64| {
        let mut o = *y;
        for i in 0..N {
            o[i] += s * k[i];
        }
        o
    };
    for _ in 0..steps {
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &add(&y, &k1, h / 2.0));
        let k3 = f(t + h / 2.0, &add(&y, &k2, h / 2.0));
        let k4 = f(t + h, &add(&y, &k3, h));
        for i in 0..N {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    y
}

#[test]
fn delta_one_equals_period_on_grid() {
    for n in [3, 4] {
        for eps in grid_eps(n) {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            let r = floquet(&o, 1).unwrap();
            assert!((r.delta - o.period).abs() / o.period <= 1e-6, "n={n} eps={eps}");
            assert!(r.wronskian_defect <= 1e-8);
        }
    }
}

#[test]
fn mode_zero_monodromy_is_jordan() {
    for n in [3, 4, 5] {
        for eps in [0.2, 0.45] {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            let r = floquet(&o, 0).unwrap();
            assert!((r.trace - 2.0).abs() <= 1e-6, "n={n} eps={eps} trace={}", r.trace);
            assert_eq!(r.delta, 0.0);
        }
    }
}

#[test]
fn large_j_obeys_sturm_bracket() {
    // n = 4: q = 6u², shift λ_j + 1.
    let o = DelaunayOrbit::new(d(4), 0.3).unwrap();
    let sup_q = 6.0 * o.u_max.powi(2);
    let inf_q = 6.0 * o.eps.powi(2);
    for j in [3usize, 5, 7] {
        let lam = (j * (j + 2)) as f64 + 1.0;
        let r = floquet(&o, j).unwrap();
        let rate = r.delta / o.period;
        assert!(rate >= (lam - sup_q).sqrt() - 1e-9 && rate <= (lam - inf_q).sqrt() + 1e-9, "j={j}");
    }
}

#[test]
fn fredholm_weights_monotone() {
    for n in [3, 4] {
        let o = DelaunayOrbit::new(d(n), 0.4).unwrap();
        let w = fredholm_weights(&o, 4).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - o.period).abs() / o.period < 1e-6);
        for k in 1..w.len() - 1 {
            assert!(w[k] > 0.0 && w[k + 1] > w[k]);
        }
    }
}

#[test]
fn near_cylinder_matches_indicial_roots() {
    for n in [3, 4] {
        let o = DelaunayOrbit::new(d(n), cylinder_constant(d(n)) * (1.0 - 1e-4)).unwrap();
        for j in 1..=3 {
            let r = floquet(&o, j).unwrap();
            let expect = indicial_roots_cylinder(d(n), j)[0].norm() * o.period;
            assert!((r.delta - expect).abs() / expect <= 1e-2, "n={n} j={j}");
        }
    }
}

#[test]
fn floquet_record_serializes() {
    let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
    let r = floquet(&o, 1).unwrap();
    let v = serde_json::to_value(FloquetRecord::new(&o, &r)).unwrap();
    for key in ["n", "eps", "j", "delta", "multipliers", "period"] {
        assert!(v.get(key).is_some());
    }
}

#[test]
fn wronskian_constant_along_solves() {
    for j in 0..4 {
        let o = DelaunayOrbit::new(d(4), 0.3).unwrap();
        assert!(wronskian_drift(&o, j, 2.0 * o.period).unwrap() <= 1e-8, "j={j}");
    }
}

#[test]
fn jacobi_residuals_at_default_resolution() {
    let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
    let per = DEFAULT_PER_PERIOD;
    let plus = jacobi_translation(&o, 1, per).unwrap();
    assert!(plus.residual(&o) <= 1e-6);
    let minus = jacobi_parameter(&o, 1, per).unwrap();
    assert!(minus.residual(&o) <= 1e-6);
    let wp = jacobi_explicit(&o, 1, 0.0, 2, per).unwrap();
    assert!(wp.residual(&o) <= 1e-6);
    let wm = jacobi_explicit(&o, -1, 0.0, 2, per).unwrap();
    assert!(wm.residual(&o) <= 1e-6);
}

#[test]
fn jacobi_residuals_are_second_order() {
    let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
    let res = |per: usize| {
        [
            jacobi_translation(&o, 1, per).unwrap().residual(&o),
            jacobi_parameter(&o, 1, per).unwrap().residual(&o),
            jacobi_explicit(&o, 1, 0.0, 1, per).unwrap().residual(&o),
            jacobi_explicit(&o, -1, 0.0, 1, per).unwrap().residual(&o),
        ]
    };
    let coarse = res(1024);
    let fine = res(2048);
    for k in 0..4 {
        let ratio = coarse[k] / fine[k];
        assert!((3.5..=4.5).contains(&ratio), "field {k}: ratio {ratio}");
    }
}

#[test]
fn translation_field_is_periodic() {
    let o = DelaunayOrbit::new(d(4), 0.2).unwrap();
    let f = jacobi_translation(&o, 2, 512).unwrap();
    for i in 0..=512 {
        assert!((f.phi[i] - f.phi[i + 512]).abs() < 1e-9);
    }
}

#[test]
fn parameter_field_matches_central_difference() {
    let n = d(3);
    let eps = 0.3;
    let o = DelaunayOrbit::new(n, eps).unwrap();
    let f = jacobi_parameter(&o, 1, 256).unwrap();
    assert_eq!(f.phi[0], 1.0);
    let solve = |e: f64, t: f64| {
        rk4(|_, y: &[f64; 2]| [y[1], 0.25 * y[0] - 0.75 * y[0].powi(5)], [e, 0.0], 0.0, t, 4000)[0]
    };
    let errs: Vec<f64> = [1e-3, 5e-4]
        .iter()
        .map(|&h| {
            (0..=256)
                .step_by(16)
                .map(|k| {
                    let t = f.t[k];
                    ((solve(eps + h, t) - solve(eps - h, t)) / (2.0 * h) - f.phi[k]).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(errs[0] < 1e-3, "{errs:?}");
    // O(h²): halving h cuts the discrepancy by about four.
    assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
}

#[test]
fn parameter_field_grows_linearly() {
    let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
    let per = 256;
    let f = jacobi_parameter(&o, 10, per).unwrap();
    // At t = kP the secular term is invisible (u_ε(kP_ε) = ε for every ε),
    // so the growth is read off the sup over the k-th period.
    let pts: Vec<(f64, f64)> = (1..=10)
        .map(|k| {
            let sup = f.phi[(k - 1) * per..=k * per].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (k as f64, sup)
        })
        .collect();
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / 10.0;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / 10.0;
    let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    assert!(r2 >= 0.999, "R² = {r2}");
    assert!(sxy / sxx > 1e-3);
}

#[test]
fn explicit_fields_have_unit_growth() {
    let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
    for sign in [1, -1] {
        let w = jacobi_explicit(&o, sign, 0.0, 3, 256).unwrap();
        let rem: Vec<f64> = w.t.iter().zip(&w.phi).map(|(t, p)| p.abs().ln() - sign as f64 * t).collect();
        let lo = rem.iter().cloned().fold(f64::MAX, f64::min);
        let hi = rem.iter().cloned().fold(f64::MIN, f64::max);
        assert!(hi - lo < 5.0);
        // Periodic remainder.
        assert!((rem[0] - rem[256]).abs() < 1e-8 && (rem[256] - rem[512]).abs() < 1e-8);
    }
}

// Shooting oracle: zonal solution regular at the pole, evaluated at r.
fn shoot(n: usize, mu: f64, r: f64) -> f64 {
    let nf = n as f64;
    let rho0 = 1e-4;
    let a = -(nf - mu) / (2.0 * nf);
    let y0 = [1.0 + a * rho0 * rho0, 2.0 * a * rho0];
    let y = rk4(
        |rho, y: &[f64; 2]| [y[1], -(nf - 1.0) / rho.tan() * y[1] - (nf - mu) * y[0]],
        y0,
        rho0,
        r,
        20000,
    );
    y[0]
}

fn shooting_eigenvalue_near_zero(n: usize, r: f64) -> f64 {
    // Scan for sign changes of f(r; μ) and return the root of least magnitude.
    let mut best = f64::NAN;
    let grid: Vec<f64> = (0..=600).map(|k| -40.0 + k as f64 * 0.1).collect();
    for w in grid.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (mut fa, fb) = (shoot(n, a, r), shoot(n, b, r));
        if fa.signum() == fb.signum() {
            continue;
        }
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            let fm = shoot(n, m, r);
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        let root = 0.5 * (a + b);
        if best.is_nan() || root.abs() < best.abs() {
            best = root;
        }
    }
    best
}

#[test]
fn cap_eigenvalue_matches_shooting() {
    for n in [3, 4] {
        for r in [FRAC_PI_4, 1.2, 2.0] {
            let fd = cap_kernel_eigenvalue(d(n), r).unwrap();
            let sh = shooting_eigenvalue_near_zero(n, r);
            assert!((fd - sh).abs() < 1e-4 * (1.0 + sh.abs()), "n={n} r={r}: {fd} vs {sh}");
        }
    }
}

#[test]
fn cap_degenerates_exactly_at_equator() {
    for n in [3, 4, 5] {
        let mu = cap_kernel_eigenvalue(d(n), FRAC_PI_2).unwrap();
        assert!(mu.abs() <= 1e-6, "n={n}: {mu}");
        assert!(cap_kernel_eigenvalue(d(n), FRAC_PI_4).unwrap().abs() >= 0.1);
        let r = cap_degeneracy_radius(d(n), 1.0, 2.2, 1e-8).unwrap();
        assert!((r - FRAC_PI_2).abs() <= 1e-6, "n={n}: {r}");
    }
}

#[test]
fn cap_kernel_is_linear_function() {
    let (mu, rho, f) = cap_kernel_eigenpair(d(3), FRAC_PI_2, 2000).unwrap();
    assert!(mu.abs() < 1e-6);
    for (x, v) in rho.iter().zip(&f) {
        assert!((v - x.cos()).abs() < 1e-4, "at {x}: {v}");
    }
}

#[test]
fn sphere_kernel_has_dimension_n_plus_one() {
    for n in [3, 4, 5] {
        let (count, _) = sphere_kernel_count(d(n), 3, 2000, 1e-3);
        assert_eq!(count, n + 1);
    }
}

#[test]
fn half_delaunay_is_nondegenerate() {
    for n in [3, 4] {
        for eps in [0.1, 0.3, 0.5] {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            assert!(half_delaunay_nondegenerate(&o, 0, 6).unwrap());
            assert!(half_delaunay_nondegenerate(&o, 1, 6).unwrap());
        }
    }
}

#[test]
fn cylinder_mode_equations_are_constant_coefficient() {
    for n in [3, 4, 6] {
        let o = DelaunayOrbit::new(d(n), cylinder_constant(d(n))).unwrap();
        assert!((mode_operator(&o, 0).cylinder_coefficient() - (n as f64 - 2.0)).abs() < 1e-12);
        assert!((mode_operator(&o, 1).cylinder_coefficient() + 1.0).abs() < 1e-12);
        let w = jacobi_explicit(&o, -1, 0.0, 1, 128).unwrap();
        let k = (n as f64 - 2.0) / 2.0 * cylinder_constant(d(n));
        for (t, v) in w.t.iter().zip(&w.phi) {
            assert!((v - k * (-t).exp()).abs() < 1e-12);
        }
    }
}
