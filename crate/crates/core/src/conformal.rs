//! Conformal geometry on axisymmetric charts.
//!
//! Every field is invariant under the `SO(n-1)` fixing a common axis, so it
//! is a function of a length coordinate `x` (cylinder `t`, polar distance
//! `ρ` on the sphere, or radius `r` in `R^n`) and the polar angle
//! `ϑ ∈ [0, π]` on `S^{n-1}`. The Laplacian of any of the supported
//! backgrounds then takes the form
//!
//! ```text
//! Δ f = a(x) f_xx + b(x) f_x + c(x) (f_ϑϑ + (n-2) cot ϑ f_ϑ)
//! ```
//!
//! discretized with centred differences on a tensor grid whose `ϑ` nodes
//! include both poles. Pole rows use the even-parity ghost `f_{-1} = f_1`,
//! where the angular part becomes `(n-1) f_ϑϑ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fowler::{DelaunayOrbit, Dimension};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `((n-2)/n)(dt² + dθ²)`, scalar curvature `n(n-1)`.
    CylinderNormalized,
    /// `dt² + dθ²`, scalar curvature `(n-1)(n-2)`.
    CylinderProduct,
    /// `dρ² + sin²ρ dθ²`.
    RoundSphere,
    /// `dr² + r² dθ²`.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Cylinder,
    SpherePolar,
    EuclideanPolar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub kind: MetricKind,
    pub n: Dimension,
}

/// Coefficients of the reduced Laplacian at one value of `x`.
#[derive(Debug, Clone, Copy)]
pub struct LaplaceCoefficients {
    /// `g^{xx}`.
    pub xx: f64,
    pub x: f64,
    /// `g^{ϑϑ}`, multiplying the `S^{n-1}` Laplacian.
    pub angular: f64,
}

impl MetricDescriptor {
    pub fn new(kind: MetricKind, n: Dimension) -> Self {
        MetricDescriptor { kind, n }
    }

    pub fn scalar_curvature(&self) -> f64 {
        let n = self.n.f();
        match self.kind {
            MetricKind::CylinderNormalized | MetricKind::RoundSphere => n * (n - 1.0),
            MetricKind::CylinderProduct => (n - 1.0) * (n - 2.0),
            MetricKind::Euclidean => 0.0,
        }
    }

    pub fn chart_kind(&self) -> ChartKind {
        match self.kind {
            MetricKind::CylinderNormalized | MetricKind::CylinderProduct => ChartKind::Cylinder,
            MetricKind::RoundSphere => ChartKind::SpherePolar,
            MetricKind::Euclidean => ChartKind::EuclideanPolar,
        }
    }

    pub fn coefficients(&self, x: f64) -> LaplaceCoefficients {
        let n = self.n.f();
        match self.kind {
            MetricKind::CylinderProduct => LaplaceCoefficients { xx: 1.0, x: 0.0, angular: 1.0 },
            MetricKind::CylinderNormalized => {
                let k = n / (n - 2.0);
                LaplaceCoefficients { xx: k, x: 0.0, angular: k }
            }
            MetricKind::RoundSphere => LaplaceCoefficients {
                xx: 1.0,
                x: (n - 1.0) / x.tan(),
                angular: 1.0 / (x.sin() * x.sin()),
            },
            MetricKind::Euclidean => LaplaceCoefficients {
                xx: 1.0,
                x: (n - 1.0) / x,
                angular: 1.0 / (x * x),
            },
        }
    }

    /// Euclidean radius of the point with length coordinate `x`, and the
    /// factor `σ` with `g = σ^{4/(n-2)} δ` there.
    fn to_euclidean(&self, x: f64) -> (f64, f64) {
        let k = (self.n.f() - 2.0) / 2.0;
        match self.kind {
            MetricKind::Euclidean => (x, 1.0),
            MetricKind::CylinderProduct => {
                let r = (-x).exp();
                (r, r.powf(-k))
            }
            MetricKind::CylinderNormalized => {
                let r = (-x).exp();
                (r, crate::fowler::cylinder_constant(self.n) * r.powf(-k))
            }
            MetricKind::RoundSphere => {
                let r = (0.5 * x).tan();
                (r, (2.0 / (1.0 + r * r)).powf(k))
            }
        }
    }

    fn from_euclidean(&self, r: f64) -> f64 {
        match self.kind {
            MetricKind::Euclidean => r,
            MetricKind::CylinderProduct | MetricKind::CylinderNormalized => -r.ln(),
            MetricKind::RoundSphere => 2.0 * r.atan(),
        }
    }
}

/// Default grid spacing in the length coordinate.
pub const DEFAULT_SPACING: f64 = 0.004;
/// Default number of polar-angle nodes, poles included.
pub const DEFAULT_NTHETA: usize = 33;

/// Conformal coupling `(n-2)/(4(n-1))`.
pub fn coupling(n: Dimension) -> f64 {
    n.coupling()
}

/// Tensor grid over `[x0, x1] × [0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub kind: ChartKind,
    pub x0: f64,
    pub x1: f64,
    pub nx: usize,
    pub ntheta: usize,
    pub background: MetricDescriptor,
    /// Order of the `x` differences: 2, 4 or 6, reduced on rows too close to
    /// the ends for the wider stencil.
    pub x_order: usize,
}

impl Chart {
    pub fn new(background: MetricDescriptor, x0: f64, x1: f64, nx: usize, ntheta: usize) -> Result<Self> {
        let c = Chart {
            kind: background.chart_kind(),
            x0,
            x1,
            nx,
            ntheta,
            background,
            x_order: 2,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_order(mut self, order: usize) -> Result<Self> {
        self.x_order = order;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != self.background.chart_kind() {
            return Err(Error::Config(format!(
                "chart {:?} does not carry a {:?} background",
                self.kind, self.background.kind
            )));
        }
        if !(self.x1 > self.x0) || self.nx < 5 || self.ntheta < 3 {
            return Err(Error::Config("chart needs x1 > x0, nx >= 5, ntheta >= 3".into()));
        }
        if ![2, 4, 6].contains(&self.x_order) {
            return Err(Error::Config(format!("unsupported x order {}", self.x_order)));
        }
        match self.kind {
            ChartKind::SpherePolar if !(self.x0 > 0.0 && self.x1 < std::f64::consts::PI) => {
                Err(Error::Domain("sphere chart must avoid the poles of ρ".into()))
            }
            ChartKind::EuclideanPolar if !(self.x0 > 0.0) => Err(Error::Domain("euclidean chart must avoid r = 0".into())),
            _ => Ok(()),
        }
    }

    pub fn hx(&self) -> f64 {
        (self.x1 - self.x0) / (self.nx - 1) as f64
    }

    pub fn htheta(&self) -> f64 {
        std::f64::consts::PI / (self.ntheta - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x1
        } else {
            self.x0 + i as f64 * self.hx()
        }
    }

    pub fn theta(&self, j: usize) -> f64 {
        if j + 1 == self.ntheta {
            std::f64::consts::PI
        } else {
            j as f64 * self.htheta()
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ntheta + j
    }

    /// Same chart at twice the resolution in both directions.
    pub fn refined(&self) -> Chart {
        Chart {
            nx: 2 * self.nx - 1,
            ntheta: 2 * self.ntheta - 1,
            ..*self
        }
    }

    /// Stencil weights of `∂_x²` and `∂_x` at row `i` (offsets -3..=3). The
    /// order drops near the ends of the chart.
    fn x_weights(&self, i: usize, order: usize) -> ([f64; 7], [f64; 7]) {
        let h = self.hx();
        let h2 = h * h;
        if order >= 6 && i >= 3 && i + 3 < self.nx {
            (
                [1.0 / 90.0, -3.0 / 20.0, 1.5, -49.0 / 18.0, 1.5, -3.0 / 20.0, 1.0 / 90.0].map(|w| w / h2),
                [-1.0 / 60.0, 3.0 / 20.0, -0.75, 0.0, 0.75, -3.0 / 20.0, 1.0 / 60.0].map(|w| w / h),
            )
        } else if order >= 4 && i >= 2 && i + 2 < self.nx {
            (
                [0.0, -1.0, 16.0, -30.0, 16.0, -1.0, 0.0].map(|w| w / (12.0 * h2)),
                [0.0, 1.0, -8.0, 0.0, 8.0, -1.0, 0.0].map(|w| w / (12.0 * h)),
            )
        } else {
            (
                [0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0].map(|w| w / h2),
                [0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0].map(|w| w / h),
            )
        }
    }

    /// Appends `(node, weight)` pairs of the discrete Laplacian of
    /// `background` at interior row `i`, column `j`.
    pub fn laplacian_stencil(&self, desc: &MetricDescriptor, i: usize, j: usize, out: &mut Vec<(usize, f64)>) {
        self.laplacian_stencil_with_order(desc, i, j, self.x_order, out);
    }

    /// As [`Chart::laplacian_stencil`] with the `x` order capped at `order`.
    pub fn laplacian_stencil_with_order(
        &self,
        desc: &MetricDescriptor,
        i: usize,
        j: usize,
        order: usize,
        out: &mut Vec<(usize, f64)>,
    ) {
        debug_assert!(i >= 1 && i + 1 < self.nx);
        let c = desc.coefficients(self.x(i));
        let (w2, w1) = self.x_weights(i, order.min(self.x_order));
        for (k, off) in (-3i64..=3).enumerate() {
            let w = c.xx * w2[k] + c.x * w1[k];
            if w != 0.0 {
                out.push((self.index((i as i64 + off) as usize, j), w));
            }
        }
        let h = self.htheta();
        let last = self.ntheta - 1;
        // Flux form in `sin^{n-2} dϑ`, symmetric against `angular_measure`.
        if j == 0 || j == last {
            let nb = if j == 0 { 1 } else { last - 1 };
            let w = c.angular * self.face_weight(desc.n, 0) / (h * self.angular_measure(desc.n, j));
            out.push((self.index(i, nb), w));
            out.push((self.index(i, j), -w));
        } else {
            let m = h * self.angular_measure(desc.n, j);
            let up = c.angular * self.face_weight(desc.n, j) / m;
            let dn = c.angular * self.face_weight(desc.n, j - 1) / m;
            out.push((self.index(i, j + 1), up));
            out.push((self.index(i, j - 1), dn));
            out.push((self.index(i, j), -(up + dn)));
        }
    }

    /// `sin^{n-2}` at the face between angular nodes `j` and `j + 1`.
    pub fn face_weight(&self, n: Dimension, j: usize) -> f64 {
        (self.htheta() * (j as f64 + 0.5)).sin().powi(n.get() as i32 - 2)
    }

    /// Angular cell measure of node `j`: the integral of `sin^{n-2}` over
    /// the cell between neighbouring faces, truncated at the poles.
    pub fn angular_measure(&self, n: Dimension, j: usize) -> f64 {
        let h = self.htheta();
        let lo = (h * (j as f64 - 0.5)).max(0.0);
        let hi = (h * (j as f64 + 0.5)).min(std::f64::consts::PI);
        sin_power_integral(n.get() - 2, lo, hi)
    }

    /// `∂_x f` and `∂_ϑ f` at interior node `(i, j)`.
    pub fn gradient(&self, f: &[f64], i: usize, j: usize) -> (f64, f64) {
        let (_, w1) = self.x_weights(i, self.x_order);
        let mut fx = 0.0;
        for (k, off) in (-3i64..=3).enumerate() {
            if w1[k] != 0.0 {
                fx += w1[k] * f[self.index((i as i64 + off) as usize, j)];
            }
        }
        let ft = if j == 0 || j + 1 == self.ntheta {
            0.0
        } else {
            (f[self.index(i, j + 1)] - f[self.index(i, j - 1)]) / (2.0 * self.htheta())
        };
        (fx, ft)
    }
}

/// `∫_a^b sin^k`.
fn sin_power_integral(k: usize, a: f64, b: f64) -> f64 {
    match k {
        0 => b - a,
        1 => a.cos() - b.cos(),
        _ => {
            let kf = k as f64;
            let edge = |x: f64| -x.sin().powi(k as i32 - 1) * x.cos() / kf;
            edge(b) - edge(a) + (kf - 1.0) / kf * sin_power_integral(k - 2, a, b)
        }
    }
}

/// Values on the nodes of a chart. Operator outputs are only meaningful on
/// rows `margin..nx-margin`; the rest are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub chart: Chart,
    pub values: Vec<f64>,
    pub margin: usize,
}

impl DiscreteField {
    pub fn from_fn(chart: Chart, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(chart.len());
        for i in 0..chart.nx {
            let x = chart.x(i);
            for j in 0..chart.ntheta {
                values.push(f(x, chart.theta(j)));
            }
        }
        DiscreteField { chart, values, margin: 0 }
    }

    pub fn constant(chart: Chart, c: f64) -> Self {
        DiscreteField {
            chart,
            values: vec![c; chart.len()],
            margin: 0,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.chart.index(i, j)]
    }

    fn rows(&self) -> std::ops::Range<usize> {
        self.margin..self.chart.nx - self.margin
    }

    /// Sup norm over the valid rows.
    pub fn sup_norm(&self) -> f64 {
        let nt = self.chart.ntheta;
        self.rows()
            .flat_map(|i| self.values[i * nt..(i + 1) * nt].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sup norm over valid rows whose `x` lies in `[a, b]`.
    pub fn sup_norm_on(&self, a: f64, b: f64) -> f64 {
        let nt = self.chart.ntheta;
        self.rows()
            .filter(|&i| {
                let x = self.chart.x(i);
                x >= a && x <= b
            })
            .flat_map(|i| self.values[i * nt..(i + 1) * nt].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest `|∂_ϑ f|` at the poles, from the one-sided second-order
    /// difference. Zero for exactly even data.
    pub fn pole_parity_defect(&self) -> f64 {
        let c = &self.chart;
        let h = c.htheta();
        let last = c.ntheta - 1;
        let mut worst: f64 = 0.0;
        for i in self.rows() {
            let d0 = (-3.0 * self.get(i, 0) + 4.0 * self.get(i, 1) - self.get(i, 2)) / (2.0 * h);
            let d1 = (3.0 * self.get(i, last) - 4.0 * self.get(i, last - 1) + self.get(i, last - 2)) / (2.0 * h);
            worst = worst.max(d0.abs()).max(d1.abs());
        }
        worst
    }

    fn zip(&self, other: &DiscreteField, f: impl Fn(f64, f64) -> f64) -> DiscreteField {
        DiscreteField {
            chart: self.chart,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            margin: self.margin.max(other.margin),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,theta,value")?;
        for i in 0..self.chart.nx {
            for j in 0..self.chart.ntheta {
                writeln!(w, "{:.17e},{:.17e},{:.17e}", self.chart.x(i), self.chart.theta(j), self.get(i, j))?;
            }
        }
        Ok(())
    }
}

fn check_pair(field: &DiscreteField, desc: &MetricDescriptor) -> Result<()> {
    if field.chart.kind != desc.chart_kind() {
        return Err(Error::Config(format!(
            "{:?} background is not supported on a {:?} chart",
            desc.kind, field.chart.kind
        )));
    }
    Ok(())
}

fn check_positive(u: &DiscreteField) -> Result<()> {
    if let Some(v) = u.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("conformal factor must be positive, found {v}")));
    }
    Ok(())
}

/// Reduced Laplace–Beltrami operator of `desc` applied to `field`.
pub fn laplace_beltrami(field: &DiscreteField, desc: &MetricDescriptor) -> Result<DiscreteField> {
    check_pair(field, desc)?;
    let c = &field.chart;
    let mut out = vec![0.0; c.len()];
    let mut stencil = Vec::with_capacity(9);
    for i in 1..c.nx - 1 {
        for j in 0..c.ntheta {
            stencil.clear();
            c.laplacian_stencil(desc, i, j, &mut stencil);
            out[c.index(i, j)] = stencil.iter().map(|&(k, w)| w * field.values[k]).sum();
        }
    }
    Ok(DiscreteField {
        chart: *c,
        values: out,
        margin: field.margin + 1,
    })
}

/// `⟨∇a, ∇b⟩` in the background metric.
fn gradient_product(a: &DiscreteField, b: &DiscreteField, desc: &MetricDescriptor) -> DiscreteField {
    let c = &a.chart;
    let mut out = vec![0.0; c.len()];
    for i in 1..c.nx - 1 {
        let k = desc.coefficients(c.x(i));
        for j in 0..c.ntheta {
            let (ax, at) = c.gradient(&a.values, i, j);
            let (bx, bt) = c.gradient(&b.values, i, j);
            out[c.index(i, j)] = k.xx * ax * bx + k.angular * at * bt;
        }
    }
    DiscreteField {
        chart: *c,
        values: out,
        margin: a.margin.max(b.margin) + 1,
    }
}

/// `Δu − c R(g₀) u + c R u^{(n+2)/(n-2)}`, with `c = (n-2)/(4(n-1))`.
pub fn yamabe_residual(u: &DiscreteField, desc: &MetricDescriptor, target_r: f64) -> Result<DiscreteField> {
    check_positive(u)?;
    let n = desc.n;
    let c = n.coupling();
    let r0 = desc.scalar_curvature();
    let p = n.critical_exponent();
    let lap = laplace_beltrami(u, desc)?;
    Ok(lap.zip(u, |l, v| l - c * r0 * v + c * target_r * v.powf(p)))
}

/// `R(u^{4/(n-2)} g₀)` from the Yamabe equation solved for `R`.
pub fn scalar_curvature_of(u: &DiscreteField, desc: &MetricDescriptor) -> Result<DiscreteField> {
    check_positive(u)?;
    let n = desc.n;
    let c = n.coupling();
    let r0 = desc.scalar_curvature();
    let p = n.critical_exponent();
    let lap = laplace_beltrami(u, desc)?;
    Ok(lap.zip(u, |l, v| (-l + c * r0 * v) / (c * v.powf(p))))
}

/// `sup |R − n(n−1)|` of a Delaunay factor over one period on the default
/// grid: the reference discretization error of curvature recovery.
pub fn delaunay_recovery_error(orbit: &DelaunayOrbit) -> Result<f64> {
    let n = orbit.n;
    let desc = MetricDescriptor::new(MetricKind::CylinderProduct, n);
    let nx = (orbit.period / DEFAULT_SPACING).ceil() as usize + 1;
    let chart = Chart::new(desc, 0.0, orbit.period, nx, DEFAULT_NTHETA)?;
    let mut r = scalar_curvature_of(&DiscreteField::from_fn(chart, |t, _| orbit.u(t)), &desc)?;
    let target = n.sphere_curvature();
    r.values.iter_mut().for_each(|v| *v -= target);
    Ok(r.sup_norm())
}

/// Linearization of the Yamabe operator at a positive factor.
#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    pub chart: Chart,
    pub desc: MetricDescriptor,
    /// Zeroth-order coefficient `−c R(g₀) + ((n+2)/(4(n-1))) R u^{4/(n-2)}`.
    pub potential: Vec<f64>,
}

impl LinearizedOperator {
    pub fn apply(&self, v: &DiscreteField) -> Result<DiscreteField> {
        let lap = laplace_beltrami(v, &self.desc)?;
        let mut out = lap;
        for (o, (p, x)) in out.values.iter_mut().zip(self.potential.iter().zip(&v.values)) {
            *o += p * x;
        }
        let c = &self.chart;
        for i in [0, c.nx - 1] {
            for j in 0..c.ntheta {
                out.values[c.index(i, j)] = 0.0;
            }
        }
        Ok(out)
    }

    /// Row `(i, j)` of the operator as `(node, weight)` pairs.
    pub fn row(&self, i: usize, j: usize, out: &mut Vec<(usize, f64)>) {
        self.chart.laplacian_stencil(&self.desc, i, j, out);
        let k = self.chart.index(i, j);
        out.push((k, self.potential[k]));
    }
}

pub fn linearize(u: &DiscreteField, desc: &MetricDescriptor, target_r: f64) -> Result<LinearizedOperator> {
    check_pair(u, desc)?;
    check_positive(u)?;
    let n = desc.n;
    let c = n.coupling();
    let cl = (n.f() + 2.0) / (4.0 * (n.f() - 1.0));
    let r0 = desc.scalar_curvature();
    let q = n.conformal_exponent();
    Ok(LinearizedOperator {
        chart: u.chart,
        desc: *desc,
        potential: u.values.iter().map(|v| -c * r0 + cl * target_r * v.powf(q)).collect(),
    })
}

/// `Δ_{g'} φ` for `g' = u^{4/(n-2)} g`, from
/// `u^{4/(n-2)} Δ_{g'} φ = Δ_g φ + 2⟨∇u, ∇φ⟩/u`.
fn conformal_laplacian_of(u: &DiscreteField, phi: &DiscreteField, desc: &MetricDescriptor) -> Result<DiscreteField> {
    let q = desc.n.conformal_exponent();
    let lap = laplace_beltrami(phi, desc)?;
    let g = gradient_product(u, phi, desc);
    let mut out = lap.clone();
    for k in 0..out.values.len() {
        let v = u.values[k];
        out.values[k] = (lap.values[k] + 2.0 * g.values[k] / v) / v.powf(q);
    }
    out.margin = lap.margin.max(g.margin);
    Ok(out)
}

/// Sup over valid rows of `ℒ_g(uφ) − u^{(n+2)/(n-2)} ℒ_{g'}φ`, where
/// `ℒ = Δ − c R` is the conformal Laplacian and `g' = u^{4/(n-2)} g`.
/// `Δ_{g'}` and `R(g')` are evaluated from their own formulas, so the
/// defect measures the discrete product rule.
pub fn equivariance_defect(u: &DiscreteField, phi: &DiscreteField, desc: &MetricDescriptor) -> Result<f64> {
    check_pair(u, desc)?;
    check_positive(u)?;
    let n = desc.n;
    let c = n.coupling();
    let p = n.critical_exponent();
    let r0 = desc.scalar_curvature();
    let uphi = u.zip(phi, |a, b| a * b);
    let lhs = laplace_beltrami(&uphi, desc)?.zip(&uphi, |l, v| l - c * r0 * v);
    let r_prime = scalar_curvature_of(u, desc)?;
    let lap_prime = conformal_laplacian_of(u, phi, desc)?;
    let mut defect = lhs.clone();
    for k in 0..defect.values.len() {
        let rhs = u.values[k].powf(p) * (lap_prime.values[k] - c * r_prime.values[k] * phi.values[k]);
        defect.values[k] = lhs.values[k] - rhs;
    }
    defect.margin = lhs.margin.max(lap_prime.margin);
    Ok(defect.sup_norm())
}

/// Sup over valid rows of `L_g(uφ) − u^{(n+2)/(n-2)} L_{g'}φ` for two
/// metrics of scalar curvature `n(n-1)`: `L_g` is the linearization at `u`
/// on the background, `L_{g'} = Δ_{g'} + n` the linearization at 1.
pub fn conjugation_defect(u: &DiscreteField, phi: &DiscreteField, desc: &MetricDescriptor) -> Result<f64> {
    check_pair(u, desc)?;
    check_positive(u)?;
    let n = desc.n;
    let target = n.sphere_curvature();
    let p = n.critical_exponent();
    let uphi = u.zip(phi, |a, b| a * b);
    let lhs = linearize(u, desc, target)?.apply(&uphi)?;
    let lap_prime = conformal_laplacian_of(u, phi, desc)?;
    let mut defect = lhs.clone();
    for k in 0..defect.values.len() {
        let rhs = u.values[k].powf(p) * (lap_prime.values[k] + n.f() * phi.values[k]);
        defect.values[k] = lhs.values[k] - rhs;
    }
    defect.margin = lhs.margin.max(lap_prime.margin);
    Ok(defect.sup_norm())
}

/// Axisymmetric point data: length coordinate, polar angle and the value
/// of a conformal factor there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportPoint {
    pub x: f64,
    pub theta: f64,
    pub u: f64,
}

/// The weight `ω` at `x` (coordinates of `from`) with
/// `g_to = ω^{4/(n-2)} g_from` under the identification through `R^n`.
pub fn transport_weight(from: &MetricDescriptor, to: &MetricDescriptor, x: f64) -> Result<f64> {
    if from.n != to.n {
        return Err(Error::Config("transport between different dimensions".into()));
    }
    let inside = match from.kind {
        MetricKind::RoundSphere => x > 0.0 && x < std::f64::consts::PI * (1.0 - 1e-12),
        MetricKind::Euclidean => x > 0.0 && x.is_finite(),
        _ => x.is_finite(),
    };
    let (r, s_from) = from.to_euclidean(x);
    if !inside || !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("point x = {x} is a puncture")));
    }
    let (_, s_to) = to.to_euclidean(to.from_euclidean(r));
    let w = s_to / s_from;
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::Domain(format!("transport weight degenerates at x = {x}")));
    }
    Ok(w)
}

/// Transports conformal factors between backgrounds: if `F*g_to = ω^{4/(n-2)} g_from`
/// then `u_to ∘ F = u_from / ω`, so both describe the same metric.
pub fn cylinder_sphere_transport(
    from: &MetricDescriptor,
    to: &MetricDescriptor,
    points: &[TransportPoint],
) -> Result<Vec<TransportPoint>> {
    points
        .iter()
        .map(|pt| {
            let w = transport_weight(from, to, pt.x)?;
            let (r, _) = from.to_euclidean(pt.x);
            Ok(TransportPoint {
                x: to.from_euclidean(r),
                theta: pt.theta,
                u: pt.u / w,
            })
        })
        .collect()
}
