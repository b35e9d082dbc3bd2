//! Mode-by-mode analysis of the linearized scalar curvature operator on a
//! Delaunay cylinder.
//!
//! Separating variables along the spherical harmonics of degree `j` on
//! `S^{n-1}` reduces `Δ + n` (conjugated to the product cylinder) to the Hill
//! equation
//!
//! ```text
//! L_j φ = φ'' - (λ_j + (n-2)^2/4) φ + (n(n+2)/4) u_ε^{4/(n-2)} φ,   λ_j = j(j+n-2).
//! ```
//!
//! Growth exponents `δ_j` are reported per period: a mode-`j` solution grows
//! like `exp(δ_j t / P_ε)`. With that convention `δ_0 = 0` and `δ_1 = P_ε`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fowler::{cylinder_constant, rhs_unchecked, DelaunayOrbit, Dimension};
use crate::ode::{integrate, sample_uniform, Tolerances};

/// Eigenvalue of `-Δ_θ` on degree-`j` harmonics of `S^{n-1}`.
pub fn harmonic_eigenvalue(n: Dimension, j: usize) -> f64 {
    let j = j as f64;
    j * (j + n.f() - 2.0)
}

/// Dimension of the degree-`j` spherical harmonics on `S^{n-1}`.
pub fn harmonic_multiplicity(n: Dimension, j: usize) -> usize {
    fn binom(a: usize, b: usize) -> usize {
        if b > a {
            return 0;
        }
        let mut r: usize = 1;
        for i in 0..b {
            r = r * (a - i) / (i + 1);
        }
        r
    }
    let n = n.get();
    if j == 0 {
        return 1;
    }
    binom(j + n - 1, n - 1) - if j >= 2 { binom(j + n - 3, n - 1) } else { 0 }
}

/// Zeroth-order potential `(n(n+2)/4) u^{4/(n-2)}`.
#[inline]
pub fn mode_potential(n: Dimension, u: f64) -> f64 {
    let nf = n.f();
    nf * (nf + 2.0) / 4.0 * u.powf(n.conformal_exponent())
}

/// The mode-`j` Hill operator over a Delaunay orbit.
#[derive(Debug, Clone)]
pub struct ModeSystem<'a> {
    pub orbit: &'a DelaunayOrbit,
    pub j: usize,
    pub lambda: f64,
    /// `q(t)` on the orbit sample grid.
    pub potential: Vec<f64>,
}

impl ModeSystem<'_> {
    /// `c(t)` in `φ'' + c(t) φ = 0`.
    pub fn coefficient_of_u(&self, u: f64) -> f64 {
        let n = self.orbit.n;
        mode_potential(n, u) - self.lambda - n.linear_coefficient()
    }

    /// Constant coefficient at the cylinder `u ≡ ū`.
    pub fn cylinder_coefficient(&self) -> f64 {
        self.coefficient_of_u(cylinder_constant(self.orbit.n))
    }

    /// Coupled first-order field for `(u, u', φ_1, φ_1', ...)`.
    fn field<const N: usize>(&self) -> impl Fn(f64, &[f64; N]) -> [f64; N] + '_ {
        let n = self.orbit.n;
        let shift = self.lambda + n.linear_coefficient();
        move |_t, y| {
            let mut out = [0.0; N];
            let u = y[0].max(f64::MIN_POSITIVE);
            out[0] = y[1];
            out[1] = rhs_unchecked(n, u);
            let c = mode_potential(n, u) - shift;
            let mut k = 2;
            while k + 1 < N {
                out[k] = y[k + 1];
                out[k + 1] = -c * y[k];
                k += 2;
            }
            out
        }
    }
}

pub fn mode_operator(orbit: &DelaunayOrbit, j: usize) -> ModeSystem<'_> {
    let potential = orbit
        .samples
        .iter()
        .map(|s| mode_potential(orbit.n, s.u))
        .collect();
    ModeSystem {
        orbit,
        j,
        lambda: harmonic_eigenvalue(orbit.n, j),
        potential,
    }
}

fn tolerances() -> Tolerances {
    Tolerances {
        rtol: 1e-14,
        atol: 1e-17,
        h_max: 0.02,
    }
}

/// Indicial roots `±√(λ_j - (n-2))` of the mode equation at `u ≡ ū`.
pub fn indicial_roots_cylinder(n: Dimension, j: usize) -> [Complex64; 2] {
    let radicand = harmonic_eigenvalue(n, j) - (n.f() - 2.0);
    let r = Complex64::new(radicand, 0.0).sqrt();
    [r, -r]
}

/// Floquet data of one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloquetResult {
    pub j: usize,
    pub multipliers: [Complex64; 2],
    /// Growth per period, `log max|μ|`, or 0 when oscillatory.
    pub delta: f64,
    pub oscillatory: bool,
    pub trace: f64,
    /// Determinant of the monodromy, equal to the product of multipliers.
    pub determinant: f64,
    /// `|det - 1|` relative to the size of the products cancelling in `det`.
    pub wronskian_defect: f64,
    pub period: f64,
}

/// Multipliers within this distance of the unit circle are oscillatory.
pub const FLOQUET_TOL: f64 = 1e-6;

/// Monodromy matrix of mode `j` over one period.
pub fn monodromy(orbit: &DelaunayOrbit, j: usize) -> Result<[[f64; 2]; 2]> {
    let sys = mode_operator(orbit, j);
    if orbit.degenerate {
        let c = sys.cylinder_coefficient();
        let p = orbit.period;
        return Ok(if c > 0.0 {
            let w = c.sqrt();
            [[(w * p).cos(), (w * p).sin() / w], [-w * (w * p).sin(), (w * p).cos()]]
        } else if c < 0.0 {
            let w = (-c).sqrt();
            [[(w * p).cosh(), (w * p).sinh() / w], [w * (w * p).sinh(), (w * p).cosh()]]
        } else {
            [[1.0, p], [0.0, 1.0]]
        });
    }
    let f = sys.field::<6>();
    let y0 = [orbit.eps, 0.0, 1.0, 0.0, 0.0, 1.0];
    let y = integrate(&f, 0.0, y0, orbit.period, tolerances())?;
    Ok([[y[2], y[4]], [y[3], y[5]]])
}

/// Floquet multipliers and the growth exponent `δ_j` of mode `j`.
pub fn floquet(orbit: &DelaunayOrbit, j: usize) -> Result<FloquetResult> {
    let m = monodromy(orbit, j)?;
    let trace = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = (m[0][0] * m[1][1]).abs().max((m[0][1] * m[1][0]).abs()).max(1.0);
    let half = 0.5 * trace;
    let disc = half * half - det;
    let multipliers = if disc >= 0.0 {
        let big = half + half.signum() * disc.sqrt();
        [Complex64::new(big, 0.0), Complex64::new(det / big, 0.0)]
    } else {
        let im = (-disc).sqrt();
        [Complex64::new(half, im), Complex64::new(half, -im)]
    };
    let big = multipliers[0].norm().max(multipliers[1].norm());
    let delta_raw = big.ln();
    if delta_raw > 50.0 || !delta_raw.is_finite() {
        return Err(Error::Numeric(format!(
            "monodromy of mode {j} is ill-conditioned (log multiplier {delta_raw})"
        )));
    }
    let oscillatory = delta_raw <= FLOQUET_TOL;
    Ok(FloquetResult {
        j,
        multipliers,
        delta: if oscillatory { 0.0 } else { delta_raw },
        oscillatory,
        trace,
        determinant: det,
        wronskian_defect: (det - 1.0).abs() / scale,
        period: orbit.period,
    })
}

/// `δ_0, ..., δ_jmax`.
pub fn fredholm_weights(orbit: &DelaunayOrbit, jmax: usize) -> Result<Vec<f64>> {
    (0..=jmax).map(|j| floquet(orbit, j).map(|r| r.delta)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobiLabel {
    /// `φ_0^+`, from translations in `t`.
    Translation,
    /// `φ_0^-`, from varying the Delaunay parameter.
    Parameter,
    ExplicitPlus,
    ExplicitMinus,
}

/// Sampled Jacobi field `(t, φ, φ')` on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct JacobiField {
    pub label: JacobiLabel,
    pub j: usize,
    pub t: Vec<f64>,
    pub phi: Vec<f64>,
    pub phip: Vec<f64>,
    /// Set when the field had to be replaced at `eps = ū`.
    pub degenerate: bool,
}

impl JacobiField {
    pub fn spacing(&self) -> f64 {
        self.t[1] - self.t[0]
    }

    pub fn sup(&self) -> f64 {
        self.phi.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy scaled to unit sup-norm over the first `points_per_period + 1`
    /// samples.
    pub fn normalized_on(&self, count: usize) -> JacobiField {
        let s = self.phi[..count.min(self.phi.len())]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let mut out = self.clone();
        if s > 0.0 {
            out.phi.iter_mut().for_each(|v| *v /= s);
            out.phip.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    /// Relative sup residual `‖L_j φ‖/‖φ‖` with `φ''` from the centred
    /// second difference of the samples (interior points).
    pub fn residual(&self, orbit: &DelaunayOrbit) -> f64 {
        let sys = mode_operator(orbit, self.j);
        let h = self.spacing();
        let m = self.phi.len() - 1;
        let us: Vec<f64> = match orbit_states(orbit, self.t[0], h, m) {
            Ok(states) if !orbit.degenerate => states.iter().map(|y| y[0]).collect(),
            _ => self.t.iter().map(|&t| orbit.u(t)).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in 1..m {
            let d2 = (self.phi[i + 1] - 2.0 * self.phi[i] + self.phi[i - 1]) / (h * h);
            let c = sys.coefficient_of_u(us[i]);
            worst = worst.max((d2 + c * self.phi[i]).abs());
        }
        let s = self.sup();
        if s == 0.0 {
            0.0
        } else {
            worst / s
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,phi,phip")?;
        for i in 0..self.t.len() {
            writeln!(w, "{:.17e},{:.17e},{:.17e}", self.t[i], self.phi[i], self.phip[i])?;
        }
        Ok(())
    }
}

/// Default sampling density of Jacobi fields, per period.
pub const DEFAULT_PER_PERIOD: usize = 16384;

/// `(u, u')` integrated afresh from the minimum on `t0 + k h`, so samples
/// carry the mode-solver accuracy rather than interpolation error.
fn orbit_states(orbit: &DelaunayOrbit, t0: f64, h: f64, m: usize) -> Result<Vec<[f64; 2]>> {
    let n = orbit.n;
    let f = move |_t: f64, y: &[f64; 2]| [y[1], rhs_unchecked(n, y[0].max(f64::MIN_POSITIVE))];
    let start = integrate(&f, 0.0, [orbit.eps, 0.0], t0, tolerances())?;
    sample_uniform(&f, t0, start, t0 + m as f64 * h, m, tolerances())
}

fn grid(orbit: &DelaunayOrbit, periods: usize, per_period: usize) -> Vec<f64> {
    let m = periods * per_period;
    let h = orbit.period / per_period as f64;
    (0..=m).map(|k| k as f64 * h).collect()
}

/// `φ_0^+ = u_ε'`, scaled to unit sup-norm. At `eps = ū` the field vanishes
/// and is replaced by the bounded mode `sin(√(n-2) t)`, flagged degenerate.
pub fn jacobi_translation(orbit: &DelaunayOrbit, periods: usize, per_period: usize) -> Result<JacobiField> {
    let t = grid(orbit, periods, per_period);
    if orbit.degenerate {
        let w = (orbit.n.f() - 2.0).sqrt();
        return Ok(JacobiField {
            label: JacobiLabel::Translation,
            j: 0,
            phi: t.iter().map(|&s| (w * s).sin()).collect(),
            phip: t.iter().map(|&s| w * (w * s).cos()).collect(),
            t,
            degenerate: true,
        });
    }
    let states = orbit_states(orbit, 0.0, orbit.period / per_period as f64, t.len() - 1)?;
    let phi: Vec<f64> = states.iter().map(|y| y[1]).collect();
    let phip: Vec<f64> = states.iter().map(|y| rhs_unchecked(orbit.n, y[0])).collect();
    let f = JacobiField {
        label: JacobiLabel::Translation,
        j: 0,
        t,
        phi,
        phip,
        degenerate: false,
    };
    Ok(f.normalized_on(per_period + 1))
}

/// `φ_0^- = ∂u_ε/∂ε` from the variational equation with `φ(0) = 1`,
/// `φ'(0) = 0`. At `eps = ū` this is `cos(√(n-2) t)`, flagged degenerate.
pub fn jacobi_parameter(orbit: &DelaunayOrbit, periods: usize, per_period: usize) -> Result<JacobiField> {
    let t = grid(orbit, periods, per_period);
    if orbit.degenerate {
        let w = (orbit.n.f() - 2.0).sqrt();
        return Ok(JacobiField {
            label: JacobiLabel::Parameter,
            j: 0,
            phi: t.iter().map(|&s| (w * s).cos()).collect(),
            phip: t.iter().map(|&s| -w * (w * s).sin()).collect(),
            t,
            degenerate: true,
        });
    }
    let sys = mode_operator(orbit, 0);
    let f = sys.field::<4>();
    let t_end = *t.last().unwrap();
    let states = sample_uniform(&f, 0.0, [orbit.eps, 0.0, 1.0, 0.0], t_end, t.len() - 1, tolerances())?;
    Ok(JacobiField {
        label: JacobiLabel::Parameter,
        j: 0,
        phi: states.iter().map(|y| y[2]).collect(),
        phip: states.iter().map(|y| y[3]).collect(),
        t,
        degenerate: false,
    })
}

/// The explicit degree-one fields `e^{±t}((n-2)/2 u_ε ± u_ε')` sampled on
/// `[t0, t0 + periods·P]`.
pub fn jacobi_explicit(
    orbit: &DelaunayOrbit,
    sign: i32,
    t0: f64,
    periods: usize,
    per_period: usize,
) -> Result<JacobiField> {
    if sign != 1 && sign != -1 {
        return Err(Error::Domain(format!("sign must be ±1, got {sign}")));
    }
    let s = sign as f64;
    let k = (orbit.n.f() - 2.0) / 2.0;
    let t: Vec<f64> = grid(orbit, periods, per_period).iter().map(|v| v + t0).collect();
    let mut phi = Vec::with_capacity(t.len());
    let mut phip = Vec::with_capacity(t.len());
    let states = if orbit.degenerate {
        vec![[orbit.eps, 0.0]; t.len()]
    } else {
        orbit_states(orbit, t0, orbit.period / per_period as f64, t.len() - 1)?
    };
    for (&tt, &[u, up]) in t.iter().zip(&states) {
        let upp = rhs_unchecked(orbit.n, u);
        let e = (s * tt).exp();
        let core = k * u + s * up;
        phi.push(e * core);
        phip.push(e * (s * core + k * up + s * upp));
    }
    Ok(JacobiField {
        label: if sign > 0 {
            JacobiLabel::ExplicitPlus
        } else {
            JacobiLabel::ExplicitMinus
        },
        j: 1,
        t,
        phi,
        phip,
        degenerate: orbit.degenerate,
    })
}

/// Solution of mode `j` with given initial data at `t = 0`, sampled.
pub fn mode_solution(
    orbit: &DelaunayOrbit,
    j: usize,
    phi0: f64,
    phip0: f64,
    t_end: f64,
    samples: usize,
) -> Result<Vec<[f64; 2]>> {
    let sys = mode_operator(orbit, j);
    if orbit.degenerate {
        let c = sys.cylinder_coefficient();
        return Ok((0..=samples)
            .map(|k| {
                let t = t_end * k as f64 / samples as f64;
                constant_coefficient_solution(c, phi0, phip0, t)
            })
            .collect());
    }
    let f = sys.field::<4>();
    let states = sample_uniform(&f, 0.0, [orbit.eps, 0.0, phi0, phip0], t_end, samples, tolerances())?;
    Ok(states.iter().map(|y| [y[2], y[3]]).collect())
}

fn constant_coefficient_solution(c: f64, a: f64, b: f64, t: f64) -> [f64; 2] {
    if c > 0.0 {
        let w = c.sqrt();
        [a * (w * t).cos() + b * (w * t).sin() / w, -a * w * (w * t).sin() + b * (w * t).cos()]
    } else if c < 0.0 {
        let w = (-c).sqrt();
        [a * (w * t).cosh() + b * (w * t).sinh() / w, a * w * (w * t).sinh() + b * (w * t).cosh()]
    } else {
        [a + b * t, b]
    }
}

/// Largest relative deviation of the Wronskian `φ_1 φ_2' - φ_1' φ_2` from
/// its initial value 1 along `[0, t_end]`, for the fundamental pair of
/// mode `j`. Relative to the size of the cancelling products.
pub fn wronskian_drift(orbit: &DelaunayOrbit, j: usize, t_end: f64) -> Result<f64> {
    if orbit.degenerate {
        return Ok(0.0);
    }
    let sys = mode_operator(orbit, j);
    let f = sys.field::<6>();
    let mut s = crate::ode::Stepper::new(0.0, [orbit.eps, 0.0, 1.0, 0.0, 0.0, 1.0], tolerances());
    let mut worst: f64 = 0.0;
    while s.t < t_end {
        s.step(&f, t_end - s.t)?;
        let y = s.y;
        let a = y[2] * y[5];
        let b = y[3] * y[4];
        worst = worst.max(((a - b) - 1.0).abs() / a.abs().max(b.abs()).max(1.0));
    }
    Ok(worst)
}

/// JSON record for one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloquetRecord {
    pub n: usize,
    pub eps: f64,
    pub j: usize,
    pub delta: f64,
    pub multipliers: [Complex64; 2],
    pub period: f64,
    /// Growth exponents are per period: solutions grow like exp(delta t / period).
    pub convention: String,
}

impl FloquetRecord {
    pub fn new(orbit: &DelaunayOrbit, r: &FloquetResult) -> Self {
        FloquetRecord {
            n: orbit.n.get(),
            eps: orbit.eps,
            j: r.j,
            delta: r.delta,
            multipliers: r.multipliers,
            period: r.period,
            convention: "per_period".into(),
        }
    }
}

/// Shooting check on the half cylinder `t >= 0`: the Dirichlet solution
/// `φ(0) = 0, φ'(0) = 1` of mode `j` must not decay, i.e. its sup over the
/// last of `periods` periods stays comparable to its sup over the first.
pub fn half_delaunay_nondegenerate(orbit: &DelaunayOrbit, j: usize, periods: usize) -> Result<bool> {
    let per = 256;
    let sol = mode_solution(orbit, j, 0.0, 1.0, periods as f64 * orbit.period, periods * per)?;
    let first = sol[..=per].iter().fold(0.0f64, |m, v| m.max(v[0].abs()));
    let last = sol[sol.len() - per - 1..].iter().fold(0.0f64, |m, v| m.max(v[0].abs()));
    Ok(last >= 0.5 * first)
}

/// Number of linearly independent Jacobi fields of `Δ + n` on a Delaunay
/// cylinder, over modes `0..=jmax` with multiplicity, whose growth rate per
/// unit `t` is at most `rate`.
pub fn temperate_solution_count(orbit: &DelaunayOrbit, jmax: usize, rate: f64) -> Result<usize> {
    let mut count = 0;
    for j in 0..=jmax {
        let growth = if orbit.degenerate {
            indicial_roots_cylinder(orbit.n, j)[0].re
        } else {
            floquet(orbit, j)?.delta / orbit.period
        };
        if growth <= rate * (1.0 + 1e-9) {
            count += 2 * harmonic_multiplicity(orbit.n, j);
        }
    }
    Ok(count)
}

/// Symmetric tridiagonal matrix given by its diagonal and off-diagonal.
#[derive(Debug, Clone)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    /// Number of eigenvalues strictly below `x` (Sturm count).
    pub fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..self.diag.len() {
            let off2 = if i == 0 { 0.0 } else { self.off[i - 1] * self.off[i - 1] };
            d = self.diag[i] - x - if i == 0 { 0.0 } else { off2 / d };
            if d == 0.0 {
                d = -1e-300;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn bounds(&self) -> (f64, f64) {
        let m = self.diag.len();
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for i in 0..m {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < m { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// `k`-th smallest eigenvalue (0-based) by bisection.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        let (mut lo, mut hi) = self.bounds();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.count_below(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Eigenvalue of smallest magnitude.
    pub fn nearest_zero(&self) -> f64 {
        let below = self.count_below(0.0);
        let pos = if below < self.diag.len() { Some(self.eigenvalue(below)) } else { None };
        let neg = if below > 0 { Some(self.eigenvalue(below - 1)) } else { None };
        match (neg, pos) {
            (Some(a), Some(b)) => {
                if a.abs() < b.abs() {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => f64::NAN,
        }
    }
}

/// Finite-volume discretization of the zonal operator
/// `f ↦ f'' + (n-1)cot(ρ) f' - (λ/sin²ρ) f + n f` on colatitude `[0, r]`,
/// symmetrized. With `pole_regular` the node at `ρ = 0` is kept (even
/// parity); otherwise `f(0) = 0`. Dirichlet at `ρ = r`.
pub fn zonal_sphere_operator(n: Dimension, lambda: f64, r: f64, m: usize, pole_regular: bool) -> SymTridiagonal {
    let h = r / m as f64;
    let w = |rho: f64| rho.sin().powf(n.f() - 1.0);
    let first = if pole_regular { 0 } else { 1 };
    let last = m - 1;
    let count = last + 1 - first;
    let mut mass = Vec::with_capacity(count);
    let mut diag = Vec::with_capacity(count);
    let mut flux = Vec::with_capacity(count);
    for i in first..=last {
        let rho = i as f64 * h;
        let wr = w(rho + 0.5 * h);
        let (vol, wl) = if i == 0 {
            let half = 0.5 * h;
            // ∫_0^{h/2} sin^{n-1}: Simpson on the half cell.
            let v = half / 6.0 * (0.0 + 4.0 * w(0.5 * half) + w(half));
            (v, 0.0)
        } else {
            (h * w(rho), w(rho - 0.5 * h))
        };
        mass.push(vol);
        let pot = if i == 0 { 0.0 } else { lambda / (rho.sin() * rho.sin()) * vol };
        diag.push(-(wr + wl) / h + (n.f()) * vol - pot);
        flux.push(wr / h);
    }
    // Generalized symmetric problem S f = μ M f with S tridiagonal symmetric;
    // similarity by M^{-1/2} gives the standard symmetric form.
    let d: Vec<f64> = diag.iter().zip(&mass).map(|(a, m)| a / m).collect();
    let off: Vec<f64> = (0..count - 1)
        .map(|k| flux[k] / (mass[k] * mass[k + 1]).sqrt())
        .collect();
    SymTridiagonal { diag: d, off }
}

/// Smallest-magnitude zonal Dirichlet eigenvalue of `Δ + n` on the geodesic
/// cap of radius `r` in `S^n`.
pub fn cap_kernel_eigenvalue(n: Dimension, r: f64) -> Result<f64> {
    cap_kernel_eigenvalue_with(n, r, 4000)
}

pub fn cap_kernel_eigenvalue_with(n: Dimension, r: f64, m: usize) -> Result<f64> {
    if !(r > 0.0 && r < std::f64::consts::PI) {
        return Err(Error::Domain(format!("cap radius must lie in (0, π), got {r}")));
    }
    if m < 8 {
        return Err(Error::Config("cap discretization needs at least 8 cells".into()));
    }
    let op = zonal_sphere_operator(n, 0.0, r, m, true);
    let mu = op.nearest_zero();
    if !mu.is_finite() {
        return Err(Error::Numeric(format!("cap eigenvalue failed at r = {r}")));
    }
    Ok(mu)
}

/// Zonal cap eigenpair nearest zero: eigenvalue, colatitudes of the nodes
/// and the eigenfunction at those nodes, scaled to unit sup-norm.
pub fn cap_kernel_eigenpair(n: Dimension, r: f64, m: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mu = cap_kernel_eigenvalue_with(n, r, m)?;
    let op = zonal_sphere_operator(n, 0.0, r, m, true);
    let h = r / m as f64;
    let rho: Vec<f64> = (0..m).map(|i| i as f64 * h).collect();
    // Shifted inverse iteration; the shift sits just off the eigenvalue.
    let shift = mu + 1e-9 * (1.0 + mu.abs());
    let mut v = vec![1.0; m];
    for _ in 0..4 {
        v = solve_tridiagonal(&op, shift, &v)?;
        let s = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        v.iter_mut().for_each(|x| *x /= s);
    }
    // Undo the symmetrizing similarity to return nodal values.
    let w = |x: f64| x.sin().powf(n.f() - 1.0);
    let mut f: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mass = if i == 0 {
                let half = 0.5 * h;
                half / 6.0 * (4.0 * w(0.5 * half) + w(half))
            } else {
                h * w(rho[i])
            };
            x / mass.sqrt()
        })
        .collect();
    let s = f.iter().fold(0.0f64, |a, x| if x.abs() > a.abs() { *x } else { a });
    f.iter_mut().for_each(|x| *x /= s);
    Ok((mu, rho, f))
}

/// Solves `(T - shift) x = b` for symmetric tridiagonal `T` (Thomas).
pub fn solve_tridiagonal(t: &SymTridiagonal, shift: f64, b: &[f64]) -> Result<Vec<f64>> {
    let m = t.diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = t.diag[0] - shift;
    for i in 0..m {
        if i > 0 {
            denom = t.diag[i] - shift - t.off[i - 1] * c[i - 1];
        }
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Numeric("singular tridiagonal pivot".into()));
        }
        c[i] = if i + 1 < m { t.off[i] / denom } else { 0.0 };
        d[i] = (b[i] - if i > 0 { t.off[i - 1] * d[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..m - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Radius where the zonal cap eigenvalue changes sign, by bisection on
/// `[lo, hi]`.
pub fn cap_degeneracy_radius(n: Dimension, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = cap_kernel_eigenvalue(n, a)?;
    let fb = cap_kernel_eigenvalue(n, b)?;
    if fa.signum() == fb.signum() {
        return Err(Error::Numeric("cap eigenvalue does not change sign on the bracket".into()));
    }
    while b - a > tol {
        let mid = 0.5 * (a + b);
        let fm = cap_kernel_eigenvalue(n, mid)?;
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Kernel count of `Δ + n` on the full round `S^n`, resolved by harmonic
/// degree `j = 0..=jmax` of the `S^{n-1}` factor and weighted by
/// multiplicity. Eigenvalues with magnitude at most `window` are counted.
pub fn sphere_kernel_count(n: Dimension, jmax: usize, m: usize, window: f64) -> (usize, Vec<f64>) {
    let mut count = 0;
    let mut smallest = Vec::new();
    for j in 0..=jmax {
        let lambda = harmonic_eigenvalue(n, j);
        // Full colatitude range [0, π]: mirror the half problem by parity.
        // Even and odd (in ρ ↦ π-ρ) solutions: Neumann vs Dirichlet at π/2.
        let half = std::f64::consts::FRAC_PI_2;
        let dir = zonal_sphere_operator(n, lambda, half, m, j == 0).nearest_zero();
        let neu = zonal_neumann_half(n, lambda, m, j == 0).nearest_zero();
        for mu in [dir, neu] {
            smallest.push(mu);
            if mu.abs() <= window {
                count += harmonic_multiplicity(n, j);
            }
        }
    }
    (count, smallest)
}

fn zonal_neumann_half(n: Dimension, lambda: f64, m: usize, pole_regular: bool) -> SymTridiagonal {
    // Same as the Dirichlet version but keeps the node at π/2 with a
    // half cell and no flux through the equator.
    let r = std::f64::consts::FRAC_PI_2;
    let h = r / m as f64;
    let w = |rho: f64| rho.sin().powf(n.f() - 1.0);
    let first = if pole_regular { 0 } else { 1 };
    let mut mass = Vec::new();
    let mut diag = Vec::new();
    let mut flux = Vec::new();
    for i in first..=m {
        let rho = i as f64 * h;
        let wr = if i == m { 0.0 } else { w(rho + 0.5 * h) };
        let (vol, wl) = if i == 0 {
            let half = 0.5 * h;
            (half / 6.0 * (4.0 * w(0.5 * half) + w(half)), 0.0)
        } else if i == m {
            (0.5 * h * w(rho), w(rho - 0.5 * h))
        } else {
            (h * w(rho), w(rho - 0.5 * h))
        };
        mass.push(vol);
        let pot = if i == 0 { 0.0 } else { lambda / (rho.sin() * rho.sin()) * vol };
        diag.push(-(wr + wl) / h + n.f() * vol - pot);
        flux.push(wr / h);
    }
    let count = mass.len();
    let d: Vec<f64> = diag.iter().zip(&mass).map(|(a, m)| a / m).collect();
    let off: Vec<f64> = (0..count - 1)
        .map(|k| flux[k] / (mass[k] * mass[k + 1]).sqrt())
        .collect();
    SymTridiagonal { diag: d, off }
}
