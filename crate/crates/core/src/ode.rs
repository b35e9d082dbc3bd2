//! Adaptive Dormand–Prince 5(4) integrator over fixed-size states.
//!
//! Every ODE in the crate (the Fowler equation, mode equations, monodromy
//! systems) is small and non-stiff, so a single explicit embedded pair with
//! step-size control covers all of them.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th-order weights minus 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step length.
    pub h_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-12,
            atol: 1e-14,
            h_max: 0.05,
        }
    }
}

impl Tolerances {
    pub fn with_tol(tol: f64) -> Self {
        Tolerances {
            rtol: tol,
            atol: tol * 1e-2,
            ..Default::default()
        }
    }
}

#[inline]
fn axpy<const N: usize>(y: &[f64; N], terms: &[(f64, &[f64; N])], h: f64) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        let ch = c * h;
        for i in 0..N {
            out[i] += ch * k[i];
        }
    }
    out
}

/// One Dormand–Prince step. Returns the 5th-order solution and the
/// embedded error estimate vector.
pub fn dopri_step<const N: usize, F>(f: &F, t: f64, y: &[f64; N], h: f64) -> ([f64; N], [f64; N])
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let k1 = f(t, y);
    let k2 = f(t + C2 * h, &axpy(y, &[(A21, &k1)], h));
    let k3 = f(t + C3 * h, &axpy(y, &[(A31, &k1), (A32, &k2)], h));
    let k4 = f(t + C4 * h, &axpy(y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h));
    let k5 = f(
        t + C5 * h,
        &axpy(y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h),
    );
    let k6 = f(
        t + h,
        &axpy(
            y,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            h,
        ),
    );
    let y1 = axpy(
        y,
        &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        h,
    );
    let k7 = f(t + h, &y1);
    let mut err = [0.0; N];
    for i in 0..N {
        err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }
    (y1, err)
}

fn error_norm<const N: usize>(y0: &[f64; N], y1: &[f64; N], err: &[f64; N], tol: &Tolerances) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y0[i].abs().max(y1[i].abs());
        acc += (err[i] / sc).powi(2);
    }
    (acc / N as f64).sqrt()
}

/// Adaptive integrator state carried between calls so that consecutive
/// `advance_to` calls reuse the last accepted step size.
#[derive(Debug, Clone)]
pub struct Stepper<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    h: f64,
    tol: Tolerances,
    pub steps: usize,
}

impl<const N: usize> Stepper<N> {
    pub fn new(t0: f64, y0: [f64; N], tol: Tolerances) -> Self {
        Stepper {
            t: t0,
            y: y0,
            h: (tol.h_max * 0.1).max(1e-4),
            tol,
            steps: 0,
        }
    }

    /// Takes one accepted step of at most `h_cap` in the direction of
    /// `sign(h_cap)`. Returns the step actually taken.
    pub fn step<F>(&mut self, f: &F, h_cap: f64) -> Result<f64>
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
    {
        let dir = h_cap.signum();
        let mut h = self.h.min(h_cap.abs()).min(self.tol.h_max);
        for _ in 0..200 {
            let (y1, err) = dopri_step(f, self.t, &self.y, dir * h);
            let e = error_norm(&self.y, &y1, &err, &self.tol);
            if !e.is_finite() {
                h *= 0.25;
                continue;
            }
            if e <= 1.0 {
                self.t += dir * h;
                self.y = y1;
                self.steps += 1;
                let grow = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
                // Do not let a short final step shrink the carried step.
                self.h = (h * grow).max(self.h.min(h * 5.0)).min(self.tol.h_max);
                return Ok(dir * h);
            }
            h *= (0.9 * e.powf(-0.2)).clamp(0.1, 0.9);
            if h < 1e-14 {
                break;
            }
        }
        Err(Error::Numeric(format!(
            "step size underflow at t = {}",
            self.t
        )))
    }

    /// Integrates until `t_target`, landing on it exactly.
    pub fn advance_to<F>(&mut self, f: &F, t_target: f64) -> Result<()>
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
    {
        while (t_target - self.t).abs() > 1e-15 * (1.0 + t_target.abs()) {
            let remaining = t_target - self.t;
            self.step(f, remaining)?;
        }
        self.t = t_target;
        Ok(())
    }
}

/// Integrates from `t0` to `t1` and returns the final state.
pub fn integrate<const N: usize, F>(f: &F, t0: f64, y0: [f64; N], t1: f64, tol: Tolerances) -> Result<[f64; N]>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let mut s = Stepper::new(t0, y0, tol);
    s.advance_to(f, t1)?;
    Ok(s.y)
}

/// Samples the solution on the uniform grid `t0 + k*(t1-t0)/m`, k = 0..=m.
pub fn sample_uniform<const N: usize, F>(
    f: &F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    m: usize,
    tol: Tolerances,
) -> Result<Vec<[f64; N]>>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let mut s = Stepper::new(t0, y0, tol);
    let mut out = Vec::with_capacity(m + 1);
    out.push(y0);
    let dt = (t1 - t0) / m as f64;
    for k in 1..=m {
        s.advance_to(f, t0 + k as f64 * dt)?;
        out.push(s.y);
    }
    Ok(out)
}
