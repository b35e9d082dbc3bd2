//! Delaunay conformal factors: periodic solutions of the Fowler equation
//!
//! ```text
//! u'' = ((n-2)^2/4) u - (n(n-2)/4) u^{(n+2)/(n-2)}
//! ```
//!
//! on the cylinder `R x S^{n-1}`. The metric `u^{4/(n-2)} (dt^2 + dθ^2)` then
//! has scalar curvature `n(n-1)`. Orbits are parameterized by their minimum
//! `eps = u(0)` with `0 < eps <= ū(n)`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{dopri_step, sample_uniform, Stepper, Tolerances};

/// Manifold dimension `n >= 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Dimension(usize);

impl Dimension {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Domain(format!("dimension must be at least 3, got {n}")));
        }
        Ok(Dimension(n))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn f(self) -> f64 {
        self.0 as f64
    }

    /// Critical exponent `(n+2)/(n-2)`.
    pub fn critical_exponent(self) -> f64 {
        (self.f() + 2.0) / (self.f() - 2.0)
    }

    /// Conformal exponent `4/(n-2)` in `g = u^{4/(n-2)} g_0`.
    pub fn conformal_exponent(self) -> f64 {
        4.0 / (self.f() - 2.0)
    }

    /// `(n-2)/(4(n-1))`, the curvature coupling of the conformal Laplacian.
    pub fn coupling(self) -> f64 {
        (self.f() - 2.0) / (4.0 * (self.f() - 1.0))
    }

    /// Scalar curvature of the round unit sphere, `n(n-1)`.
    pub fn sphere_curvature(self) -> f64 {
        self.f() * (self.f() - 1.0)
    }

    /// `(n-2)^2/4`
    pub fn linear_coefficient(self) -> f64 {
        let m = self.f() - 2.0;
        m * m / 4.0
    }

    /// `n(n-2)/4`
    pub fn nonlinear_coefficient(self) -> f64 {
        self.f() * (self.f() - 2.0) / 4.0
    }
}

impl TryFrom<usize> for Dimension {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Dimension::new(n)
    }
}

impl From<Dimension> for usize {
    fn from(d: Dimension) -> usize {
        d.0
    }
}

/// Right-hand side of the Fowler equation.
pub fn fowler_rhs(n: Dimension, u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("Fowler equation needs u > 0, got {u}")));
    }
    Ok(rhs_unchecked(n, u))
}

#[inline]
pub(crate) fn rhs_unchecked(n: Dimension, u: f64) -> f64 {
    n.linear_coefficient() * u - n.nonlinear_coefficient() * u.powf(n.critical_exponent())
}

/// The cylinder constant `ū = ((n-2)/n)^{(n-2)/4}`.
pub fn cylinder_constant(n: Dimension) -> f64 {
    let nf = n.f();
    ((nf - 2.0) / nf).powf((nf - 2.0) / 4.0)
}

/// Linearized period at the cylinder, `2π/√(n-2)`.
pub fn linear_period(n: Dimension) -> f64 {
    2.0 * PI / (n.f() - 2.0).sqrt()
}

/// Potential `V(u) = ((n-2)^2/4)(u^{2n/(n-2)} - u^2)`.
pub fn potential(n: Dimension, u: f64) -> f64 {
    let nf = n.f();
    n.linear_coefficient() * (u.abs().powf(2.0 * nf / (nf - 2.0)) - u * u)
}

/// First integral `H = u'^2 + V(u)` of the Fowler equation.
pub fn hamiltonian(n: Dimension, u: f64, up: f64) -> Result<f64> {
    if u < 0.0 {
        return Err(Error::Domain(format!("Hamiltonian needs u >= 0, got {u}")));
    }
    Ok(up * up + potential(n, u))
}

fn bisect<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut glo = g(lo);
    let ghi = g(hi);
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    if glo.signum() == ghi.signum() {
        return Err(Error::Numeric(format!(
            "root not bracketed on [{lo}, {hi}]: g = ({glo}, {ghi})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm == 0.0 {
            return Ok(mid);
        }
        if gm.signum() == glo.signum() {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
        if hi - lo <= tol {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_eps(n: Dimension, eps: f64) -> Result<f64> {
    let ubar = cylinder_constant(n);
    if !(eps > 0.0) || eps > ubar * (1.0 + 1e-14) {
        return Err(Error::Domain(format!(
            "Delaunay parameter must lie in (0, {ubar}], got {eps}"
        )));
    }
    Ok(ubar)
}

/// The maximum of the orbit with minimum `eps`: the root in `[ū, 1)` of
/// `V(u_max) = V(eps)`, found by bisection.
pub fn umax_from_energy(n: Dimension, eps: f64) -> Result<f64> {
    let ubar = check_eps(n, eps)?;
    if eps >= ubar * (1.0 - 1e-15) {
        return Ok(ubar);
    }
    let target = potential(n, eps);
    bisect(|u| potential(n, u) - target, ubar, 1.0, 1e-16)
}

/// Inverse of `eps ↦ H(eps, 0) = V(eps)` on `(0, ū]`. Energies below
/// `V(ū)` are clamped to the cylinder.
pub fn eps_from_energy(n: Dimension, energy: f64) -> Result<f64> {
    let ubar = cylinder_constant(n);
    let vmin = potential(n, ubar);
    if energy <= vmin {
        return Ok(ubar);
    }
    if energy >= 0.0 {
        return Err(Error::Domain(format!(
            "energy {energy} is not that of a Delaunay orbit (needs V(ū) <= H < 0)"
        )));
    }
    bisect(|u| potential(n, u) - energy, 1e-300_f64.max(f64::MIN_POSITIVE), ubar, 1e-16)
}

/// Round-sphere profile `cosh(t - t0)^{-(n-2)/2}`, the `H = 0` homoclinic.
pub fn sphere_profile(n: Dimension, t: f64, t0: f64) -> f64 {
    (t - t0).cosh().powf(-(n.f() - 2.0) / 2.0)
}

/// Derivative of [`sphere_profile`] in `t`.
pub fn sphere_profile_dt(n: Dimension, t: f64, t0: f64) -> f64 {
    let k = (n.f() - 2.0) / 2.0;
    -k * (t - t0).tanh() * sphere_profile(n, t, t0)
}

/// Parameters for [`solve_orbit`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrbitOptions {
    /// Initial integration horizon in `t`; doubled until a period is found.
    pub horizon: f64,
    /// Local error tolerance of the integrator.
    pub tol: f64,
    /// Number of uniform sample intervals over one period.
    pub resolution: usize,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions {
            horizon: 20.0,
            tol: 1e-10,
            resolution: 2048,
        }
    }
}

/// One sample `(t, u, u')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitSample {
    pub t: f64,
    pub u: f64,
    pub up: f64,
}

/// Sampled periodic Delaunay factor with minimum `eps` at `t = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct DelaunayOrbit {
    pub n: Dimension,
    pub eps: f64,
    pub period: f64,
    pub energy: f64,
    pub u_max: f64,
    pub tol: f64,
    /// True at `eps = ū`, where `period` is the linearized value.
    pub degenerate: bool,
    /// Uniform samples over `[0, period]`, endpoint included.
    pub samples: Vec<OrbitSample>,
    #[serde(skip)]
    step_tol: Tolerances,
}

/// JSON header describing an orbit; paired with the CSV samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitHeader {
    pub n: usize,
    pub eps: f64,
    pub period: f64,
    pub energy: f64,
    pub u_max: f64,
    pub tol: f64,
    pub degenerate: bool,
}

fn fowler_field(n: Dimension) -> impl Fn(f64, &[f64; 2]) -> [f64; 2] {
    move |_t, y| [y[1], rhs_unchecked(n, y[0].max(f64::MIN_POSITIVE))]
}

/// Integrates the Fowler orbit with minimum `eps` over one period.
pub fn solve_orbit(n: Dimension, eps: f64, opts: OrbitOptions) -> Result<DelaunayOrbit> {
    let ubar = check_eps(n, eps)?;
    if opts.resolution < 8 {
        return Err(Error::Config("orbit resolution must be at least 8".into()));
    }
    // Local error control is two orders tighter than the requested accuracy
    // so that the energy stays conserved over many periods.
    let tol = Tolerances {
        rtol: (opts.tol * 1e-2).max(1e-14),
        atol: (opts.tol * 1e-5).max(1e-17),
        h_max: 0.05,
    };
    let energy = potential(n, eps);
    if eps >= ubar * (1.0 - 1e-13) {
        let period = linear_period(n);
        let m = opts.resolution;
        let samples = (0..=m)
            .map(|k| OrbitSample {
                t: period * k as f64 / m as f64,
                u: ubar,
                up: 0.0,
            })
            .collect();
        return Ok(DelaunayOrbit {
            n,
            eps: ubar,
            period,
            energy: potential(n, ubar),
            u_max: ubar,
            tol: opts.tol,
            degenerate: true,
            samples,
            step_tol: tol,
        });
    }

    let f = fowler_field(n);
    let period = detect_period(n, eps, opts.horizon.max(1.0), tol)?;
    let states = sample_uniform(&f, 0.0, [eps, 0.0], period, opts.resolution, tol)?;
    let m = opts.resolution;
    let samples: Vec<OrbitSample> = states
        .iter()
        .enumerate()
        .map(|(k, y)| OrbitSample {
            t: period * k as f64 / m as f64,
            u: y[0],
            up: y[1],
        })
        .collect();
    let u_max = samples.iter().map(|s| s.u).fold(f64::MIN, f64::max);
    // Polish the maximum: it sits at the half period by reflection symmetry.
    let half = integrate_from_min(n, eps, 0.5 * period, tol)?;
    let u_max = u_max.max(half[0]);
    Ok(DelaunayOrbit {
        n,
        eps,
        period,
        energy,
        u_max,
        tol: opts.tol,
        degenerate: false,
        samples,
        step_tol: tol,
    })
}

fn integrate_from_min(n: Dimension, eps: f64, t: f64, tol: Tolerances) -> Result<[f64; 2]> {
    crate::ode::integrate(&fowler_field(n), 0.0, [eps, 0.0], t, tol)
}

/// Locates the first return to a minimum: `u'` crossing zero upward.
fn detect_period(n: Dimension, eps: f64, horizon: f64, tol: Tolerances) -> Result<f64> {
    let f = fowler_field(n);
    let mut stepper = Stepper::new(0.0, [eps, 0.0], tol);
    let mut budget = horizon;
    let mut passed_max = false;
    loop {
        let t_prev = stepper.t;
        let y_prev = stepper.y;
        stepper.step(&f, budget - stepper.t)?;
        let up_prev = y_prev[1];
        let up = stepper.y[1];
        if !passed_max && up_prev > 0.0 && up <= 0.0 {
            passed_max = true;
        } else if passed_max && up_prev < 0.0 && up >= 0.0 {
            // Secant refinement with exact single-step evaluation from t_prev.
            let g = |t: f64| dopri_step(&f, t_prev, &y_prev, t - t_prev).0[1];
            let mut a = t_prev;
            let mut b = stepper.t;
            let mut ga = up_prev;
            let mut gb = up;
            for _ in 0..100 {
                let c = if gb != ga { b - gb * (b - a) / (gb - ga) } else { 0.5 * (a + b) };
                let c = c.clamp(a.min(b), a.max(b));
                let gc = g(c);
                if gc.abs() < 1e-300 || (b - a).abs() < 1e-13 {
                    return Ok(c);
                }
                if gc.signum() == ga.signum() {
                    a = c;
                    ga = gc;
                } else {
                    b = c;
                    gb = gc;
                }
                // Newton polish using u'' from the equation.
                let yc = dopri_step(&f, t_prev, &y_prev, c - t_prev).0;
                let upp = rhs_unchecked(n, yc[0]);
                if upp > 0.0 {
                    let tn = c - yc[1] / upp;
                    if (tn - c).abs() < 1e-13 {
                        return Ok(tn);
                    }
                }
            }
            return Ok(0.5 * (a + b));
        }
        if stepper.t >= budget - 1e-12 {
            if budget > 1e5 {
                return Err(Error::Numeric(format!(
                    "no period detected for eps = {eps} within t = {budget}"
                )));
            }
            budget *= 2.0;
        }
    }
}

impl DelaunayOrbit {
    /// Convenience constructor with default options.
    pub fn new(n: Dimension, eps: f64) -> Result<Self> {
        solve_orbit(n, eps, OrbitOptions::default())
    }

    pub fn resolution(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.resolution() as f64
    }

    /// `(u, u')` at arbitrary `t` by periodic extension; off-grid values are
    /// obtained with one integrator step from the nearest sample.
    pub fn state(&self, t: f64) -> [f64; 2] {
        if self.degenerate {
            return [self.eps, 0.0];
        }
        let p = self.period;
        let tr = t - p * (t / p).floor();
        let h = self.spacing();
        let k = ((tr / h).round() as usize).min(self.resolution());
        let s = &self.samples[k];
        let dt = tr - s.t;
        if dt.abs() < 1e-15 {
            return [s.u, s.up];
        }
        dopri_step(&fowler_field(self.n), s.t, &[s.u, s.up], dt).0
    }

    pub fn u(&self, t: f64) -> f64 {
        self.state(t)[0]
    }

    pub fn up(&self, t: f64) -> f64 {
        self.state(t)[1]
    }

    pub fn upp(&self, t: f64) -> f64 {
        rhs_unchecked(self.n, self.u(t))
    }

    /// Maximum relative Hamiltonian drift over `periods` periods, integrated
    /// continuously (not via the stored samples).
    pub fn energy_drift(&self, periods: usize) -> Result<f64> {
        if self.degenerate {
            return Ok(0.0);
        }
        let f = fowler_field(self.n);
        let mut s = Stepper::new(0.0, [self.eps, 0.0], self.step_tol);
        let t_end = periods as f64 * self.period;
        let h0 = self.energy;
        let mut worst: f64 = 0.0;
        while s.t < t_end {
            s.step(&f, t_end - s.t)?;
            let h = s.y[1] * s.y[1] + potential(self.n, s.y[0]);
            worst = worst.max((h - h0).abs() / h0.abs());
        }
        Ok(worst)
    }

    pub fn header(&self) -> OrbitHeader {
        OrbitHeader {
            n: self.n.get(),
            eps: self.eps,
            period: self.period,
            energy: self.energy,
            u_max: self.u_max,
            tol: self.tol,
            degenerate: self.degenerate,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,up")?;
        for s in &self.samples {
            writeln!(w, "{:.17e},{:.17e},{:.17e}", s.t, s.u, s.up)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d(n: usize) -> Dimension {
        Dimension::new(n).unwrap()
    }

    #[test]
    fn dimension_rejects_small_n() {
        assert!(Dimension::new(2).is_err());
        assert!(Dimension::new(3).is_ok());
    }

    #[test]
    fn rhs_vanishes_at_cylinder() {
        assert!(fowler_rhs(d(3), cylinder_constant(d(3))).unwrap().abs() < 1e-15);
        assert!(fowler_rhs(d(4), 1.0 / 2f64.sqrt()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn rhs_closed_form_value() {
        let v = fowler_rhs(d(3), 0.3).unwrap();
        assert_relative_eq!(v, 0.25 * 0.3 - 0.75 * 0.3f64.powi(5), epsilon = 1e-15);
        assert!((v - 0.073178).abs() < 1e-6);
    }

    #[test]
    fn rhs_rejects_nonpositive() {
        assert!(fowler_rhs(d(3), 0.0).is_err());
        assert!(fowler_rhs(d(3), -1.0).is_err());
    }

    #[test]
    fn cylinder_constants() {
        assert!((cylinder_constant(d(3)) - 0.759836).abs() < 1e-6);
        assert!((cylinder_constant(d(4)) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_relative_eq!(cylinder_constant(d(6)), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn hamiltonian_values() {
        let ub = cylinder_constant(d(3));
        assert!((hamiltonian(d(3), ub, 0.0).unwrap() + 0.096225).abs() < 1e-6);
        assert!(hamiltonian(d(5), 1e-12, 0.0).unwrap().abs() < 1e-20);
        let h = hamiltonian(d(3), 0.3, 0.0).unwrap();
        assert_relative_eq!(h, 0.25 * (0.3f64.powi(6) - 0.09), epsilon = 1e-15);
        assert!((h + 0.022318).abs() < 1e-6);
    }

    #[test]
    fn umax_oracle() {
        let ub = cylinder_constant(d(3));
        assert_eq!(umax_from_energy(d(3), ub).unwrap(), ub);
        assert!((umax_from_energy(d(3), 0.3).unwrap() - 0.9757).abs() < 1e-4);
        assert!(umax_from_energy(d(3), 1e-9).unwrap() > 1.0 - 1e-6);
        assert!(umax_from_energy(d(3), 0.9).is_err());
    }

    #[test]
    fn eps_energy_inverse() {
        for &eps in &[0.01, 0.3, 0.7] {
            let e = eps_from_energy(d(3), potential(d(3), eps)).unwrap();
            assert!((e - eps).abs() < 1e-12, "{e} vs {eps}");
        }
    }

    #[test]
    fn sphere_profile_is_homoclinic() {
        for n in 3..8 {
            let n = d(n);
            assert_eq!(sphere_profile(n, 0.7, 0.7), 1.0);
            for &t in &[-2.0, -0.3, 0.0, 0.5, 3.0] {
                let u = sphere_profile(n, t, 0.0);
                let up = sphere_profile_dt(n, t, 0.0);
                assert!(hamiltonian(n, u, up).unwrap().abs() < 1e-14);
            }
        }
        assert!((sphere_profile(d(3), 1.0, 0.0) - 0.805_018_18).abs() < 1e-8);
    }

    #[test]
    fn degenerate_orbit_is_constant() {
        let n = d(3);
        let o = DelaunayOrbit::new(n, cylinder_constant(n)).unwrap();
        assert!(o.degenerate);
        assert_relative_eq!(o.period, 2.0 * PI, epsilon = 1e-15);
        let ub = cylinder_constant(n);
        assert!(o.samples.iter().all(|s| (s.u - ub).abs() < 1e-10));
    }

    #[test]
    fn orbit_rejects_bad_eps() {
        assert!(DelaunayOrbit::new(d(3), 0.0).is_err());
        assert!(DelaunayOrbit::new(d(3), 0.8).is_err());
    }

    #[test]
    fn orbit_minimum_and_bounds() {
        let o = DelaunayOrbit::new(d(3), 0.3).unwrap();
        assert_eq!(o.samples[0].u, 0.3);
        assert_eq!(o.samples[0].up, 0.0);
        assert!(fowler_rhs(o.n, o.eps).unwrap() >= 0.0);
        for s in &o.samples {
            assert!(s.u >= o.eps - 1e-12 && s.u <= o.u_max + 1e-12);
        }
        assert!((o.u_max - umax_from_energy(o.n, 0.3).unwrap()).abs() < 1e-8);
        let last = o.samples.last().unwrap();
        assert!((last.u - 0.3).abs() < 1e-9 && last.up.abs() < 1e-9);
    }

    #[test]
    fn orbit_is_even_about_minimum() {
        let o = DelaunayOrbit::new(d(4), 0.2).unwrap();
        for &t in &[0.1, 0.77, 1.9, 2.5] {
            assert!((o.u(t) - o.u(-t)).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let o = solve_orbit(
            d(3),
            0.4,
            OrbitOptions {
                resolution: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        o.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 18);
        assert!(s.starts_with("t,u,up"));
        let h = serde_json::to_value(o.header()).unwrap();
        assert_eq!(h["n"], 3);
    }
}
