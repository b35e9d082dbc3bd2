use cpsc_core::fowler::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn d(n: usize) -> Dimension {
    Dimension::new(n).unwrap()
}

fn v(n: usize, u: f64) -> f64 {
    let nf = n as f64;
    (nf - 2.0).powi(2) / 4.0 * (u.powf(2.0 * nf / (nf - 2.0)) - u * u)
}

fn ubar(n: usize) -> f64 {
    let nf = n as f64;
    ((nf - 2.0) / nf).powf((nf - 2.0) / 4.0)
}

// Root of V(u) = V(eps) on [ubar, 1] by plain bisection.
fn umax_oracle(n: usize, eps: f64) -> f64 {
    let target = v(n, eps);
    let (mut lo, mut hi) = (ubar(n), 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if v(n, mid) - target < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// P = 2 ∫_eps^umax du / sqrt(H - V(u)) with u = (a+b)/2 - (b-a)/2 cos θ,
// which removes both square-root endpoint singularities.
fn period_oracle(n: usize, eps: f64) -> f64 {
    let a = eps;
    let b = umax_oracle(n, eps);
    let h = v(n, eps);
    let m = 20000;
    let mut acc = 0.0;
    for k in 0..m {
        let th = PI * (k as f64 + 0.5) / m as f64;
        let u = 0.5 * (a + b) - 0.5 * (b - a) * th.cos();
        let gap = h - v(n, u);
        acc += 0.5 * (b - a) * th.sin() / gap.max(1e-300).sqrt();
    }
    2.0 * acc * PI / m as f64
}

fn grid_eps(n: usize) -> [f64; 4] {
    [0.1, 0.3, 0.5, 0.99 * ubar(n)]
}

#[test]
fn energy_conserved_over_ten_periods() {
    for n in [3, 4] {
        for eps in grid_eps(n) {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            let drift = o.energy_drift(10).unwrap();
            assert!(drift <= 1e-8, "n={n} eps={eps} drift={drift}");
            for s in &o.samples {
                let h = hamiltonian(d(n), s.u, s.up).unwrap();
                assert!((h - o.energy).abs() <= 1e-8 * o.energy.abs());
            }
        }
    }
}

#[test]
fn umax_matches_bisection_oracle() {
    for n in [3, 4] {
        for eps in grid_eps(n) {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            let oracle = umax_oracle(n, eps);
            assert!((o.u_max - oracle).abs() <= 1e-8, "n={n} eps={eps}");
            let sampled = o.samples.iter().fold(0.0f64, |m, s| m.max(s.u));
            assert!(sampled <= oracle + 1e-8);
            assert!((umax_from_energy(d(n), eps).unwrap() - oracle).abs() <= 1e-10);
        }
    }
    assert!((umax_oracle(3, 0.3) - 0.9757).abs() < 1e-4);
}

#[test]
fn period_matches_quadrature_oracle() {
    for n in [3, 4, 5] {
        for eps in [0.05, 0.2, 0.4] {
            let o = DelaunayOrbit::new(d(n), eps).unwrap();
            let p = period_oracle(n, eps);
            assert!((o.period - p).abs() / p < 1e-7, "n={n} eps={eps}: {} vs {p}", o.period);
        }
    }
}

#[test]
fn period_tends_to_linear_value_near_cylinder() {
    for n in [3, 4, 5] {
        let eps = ubar(n) * (1.0 - 1e-3);
        let o = DelaunayOrbit::new(d(n), eps).unwrap();
        let lin = 2.0 * PI / (n as f64 - 2.0).sqrt();
        assert!((o.period - lin).abs() <= 1e-3, "n={n}: {}", o.period);
        assert!(o.period >= lin);
    }
}

#[test]
fn period_minus_log_term_stays_bounded() {
    for n in [3, 4] {
        let offsets: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&eps| {
                let o = DelaunayOrbit::new(d(n), eps).unwrap();
                o.period - 4.0 / (n as f64 - 2.0) * (1.0 / eps).ln()
            })
            .collect();
        // Least-squares slope of the offset against log(1/eps) is ~0.
        let xs: Vec<f64> = [1e-2f64, 1e-3, 1e-4].iter().map(|e| (1.0 / e).ln()).collect();
        let xm = xs.iter().sum::<f64>() / 3.0;
        let ym = offsets.iter().sum::<f64>() / 3.0;
        let slope = xs.iter().zip(&offsets).map(|(x, y)| (x - xm) * (y - ym)).sum::<f64>()
            / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
        assert!(slope.abs() < 1e-3, "n={n}: {offsets:?}");
        assert!(offsets.iter().all(|o| o.abs() < 10.0), "n={n}: {offsets:?}");
    }
}

#[test]
fn fixed_point_orbit() {
    for n in [3, 4, 6] {
        let o = DelaunayOrbit::new(d(n), ubar(n)).unwrap();
        assert!(o.degenerate);
        for s in &o.samples {
            assert!((s.u - ubar(n)).abs() <= 1e-10);
        }
    }
    assert!((cylinder_constant(d(6)) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn orbit_rejects_out_of_range() {
    assert!(DelaunayOrbit::new(d(3), 0.0).is_err());
    assert!(DelaunayOrbit::new(d(3), 0.8).is_err());
    assert!(DelaunayOrbit::new(d(3), -0.1).is_err());
    assert!(fowler_rhs(d(3), 0.0).is_err());
}

#[test]
fn fowler_rhs_examples() {
    assert!(fowler_rhs(d(3), ubar(3)).unwrap().abs() < 1e-15);
    assert!(fowler_rhs(d(4), 0.5f64.sqrt()).unwrap().abs() < 1e-15);
    assert!((fowler_rhs(d(3), 0.3).unwrap() - 0.073178).abs() < 1e-6);
    assert!((hamiltonian(d(3), ubar(3), 0.0).unwrap() + 0.096225).abs() < 1e-6);
    assert!((hamiltonian(d(3), 0.3, 0.0).unwrap() + 0.022318).abs() < 1e-6);
}

#[test]
fn csv_and_header_round_trip() {
    let o = DelaunayOrbit::new(d(4), 0.3).unwrap();
    let mut buf = Vec::new();
    o.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,u,up"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[1], 0.3);
    let header = serde_json::to_value(o.header()).unwrap();
    for key in ["n", "eps", "period", "energy", "u_max", "tol"] {
        assert!(header.get(key).is_some(), "missing {key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn orbit_invariants(n in 3usize..6, frac in 0.05f64..0.98) {
        let eps = frac * ubar(n);
        let o = DelaunayOrbit::new(d(n), eps).unwrap();
        prop_assert_eq!(o.samples[0].u, eps);
        prop_assert_eq!(o.samples[0].up, 0.0);
        prop_assert!(fowler_rhs(d(n), eps).unwrap() >= 0.0);
        prop_assert!(o.period >= 2.0 * PI / (n as f64 - 2.0).sqrt());
        for s in &o.samples {
            prop_assert!(s.u > 0.0);
            prop_assert!(s.u >= eps - 1e-10 && s.u <= o.u_max + 1e-10);
        }
        // Evenness about the minimum.
        for &t in &[0.3, 1.1, 0.37 * o.period] {
            prop_assert!((o.u(t) - o.u(-t)).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_inverse_round_trip(n in 3usize..7, frac in 0.01f64..0.999) {
        let eps = frac * ubar(n);
        let h = potential(d(n), eps);
        let back = eps_from_energy(d(n), h).unwrap();
        prop_assert!((back - eps).abs() < 1e-10);
    }
}
