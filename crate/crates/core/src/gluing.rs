//! Connected sums of Delaunay summands along axial points.
//!
//! Each summand keeps its own body chart in `(t, ϑ)` with the product
//! cylinder as background, and each junction gets a neck chart in `(s, ψ)`
//! with the normalized cylinder as background. Near a gluing point `p` the
//! summand is rescaled to flat coordinates `ŷ` with `p = e₁`; then
//! `s = −log|ŷ − e₁|` and `ψ` is the angle of `ŷ − e₁` from the axis. The
//! second summand of a junction enters through `s₂ = A₁ + A₂ + T − s` with the
//! same `ψ`. Charts overlap; fringe nodes take their values from the other
//! chart by Lagrange interpolation and the conformal weight between the two
//! backgrounds.

use crate::conformal::{cylinder_sphere_transport, Chart, DiscreteField, MetricDescriptor, MetricKind, TransportPoint};
use crate::fowler::{self, DelaunayOrbit, Dimension};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Quintic smoothstep on `[0, 1]`, clamped outside.
pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
}

pub fn smoothstep_d1(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    30.0 * x * x * (1.0 - x) * (1.0 - x)
}

pub fn smoothstep_d2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    60.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndSide {
    #[serde(rename = "-", alias = "minus")]
    Minus,
    #[serde(rename = "+", alias = "plus")]
    Plus,
}

impl EndSide {
    pub fn sign(self) -> f64 {
        match self {
            EndSide::Minus => -1.0,
            EndSide::Plus => 1.0,
        }
    }
}

/// Axial point `(t_p, ϑ_p)` of a summand cylinder, `ϑ_p ∈ {0, π}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GluingPoint {
    pub t: f64,
    pub theta: f64,
}

impl From<[f64; 2]> for GluingPoint {
    fn from(a: [f64; 2]) -> Self {
        GluingPoint { t: a[0], theta: a[1] }
    }
}

impl From<GluingPoint> for [f64; 2] {
    fn from(p: GluingPoint) -> Self {
        [p.t, p.theta]
    }
}

impl GluingPoint {
    pub fn new(t: f64, theta: f64) -> Self {
        GluingPoint { t, theta }
    }

    fn axis_sign(&self) -> f64 {
        if self.theta.abs() < 1e-12 {
            1.0
        } else {
            -1.0
        }
    }

    fn validate(&self) -> Result<()> {
        let on_axis = self.theta.abs() < 1e-12 || (self.theta - PI).abs() < 1e-12;
        if !self.t.is_finite() || !on_axis {
            return Err(Error::Config(format!(
                "gluing point ({}, {}) must have ϑ = 0 or π",
                self.t, self.theta
            )));
        }
        Ok(())
    }

    /// `(r̂, ψ, |ŷ|)` of the body point `(t, ϑ)`.
    pub fn to_neck(&self, t: f64, theta: f64) -> (f64, f64, f64) {
        let rho = (self.t - t).exp();
        let y1 = self.axis_sign() * rho * theta.cos();
        let yp = rho * theta.sin().abs();
        let (d1, dp) = (y1 - 1.0, yp);
        (d1.hypot(dp), dp.atan2(d1), rho)
    }

    /// `(t, ϑ, |ŷ|)` of the point at distance `r̂` and angle `ψ` from `p`.
    pub fn to_body(&self, rhat: f64, psi: f64) -> (f64, f64, f64) {
        let y1 = 1.0 + rhat * psi.cos();
        let yp = rhat * psi.sin().abs();
        let norm = y1.hypot(yp);
        (self.t - norm.ln(), yp.atan2(self.axis_sign() * y1), norm)
    }
}

/// `ω` with `U_body = ω U_neck` at a point with `|ŷ|` and `r̂`.
pub fn neck_weight(n: Dimension, ynorm: f64, rhat: f64) -> f64 {
    let nf = n.f();
    ((nf - 2.0) / nf * (ynorm / rhat).powi(2)).powf((nf - 2.0) / 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummandSpec {
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gluing_point: Option<GluingPoint>,
    /// For summands in the middle of a chain: the left then the right point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gluing_points: Vec<GluingPoint>,
    pub alpha: f64,
    #[serde(default = "default_end")]
    pub deficiency_end: EndSide,
}

fn default_end() -> EndSide {
    EndSide::Plus
}

impl SummandSpec {
    pub fn new(eps: f64, point: GluingPoint, alpha: f64, deficiency_end: EndSide) -> Self {
        SummandSpec {
            eps,
            gluing_point: Some(point),
            gluing_points: Vec::new(),
            alpha,
            deficiency_end,
        }
    }

    pub fn points(&self) -> Vec<GluingPoint> {
        self.gluing_point.iter().chain(&self.gluing_points).copied().collect()
    }
}

/// Grid and overlap parameters shared by all charts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub body_spacing: f64,
    pub body_ntheta: usize,
    pub neck_spacing: f64,
    pub neck_ntheta: usize,
    pub x_order: usize,
    /// Points per direction of the interpolation stencil between charts.
    pub interp_points: usize,
    /// The neck chart reaches out to `r̂ = α e^{overlap}`.
    pub overlap: f64,
    /// Body nodes with `r̂ < α e^{hole}` are inactive.
    pub hole: f64,
    /// Body core extends this far past the outermost gluing points.
    pub core_margin: f64,
    /// End length past the core, in periods.
    pub end_periods: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            body_spacing: 0.05,
            body_ntheta: 49,
            neck_spacing: 0.025,
            neck_ntheta: 65,
            x_order: 6,
            interp_points: 6,
            overlap: 0.7,
            hole: -0.6,
            core_margin: 3.0,
            end_periods: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GluingConfig {
    pub n: usize,
    pub summands: Vec<SummandSpec>,
    /// `T = −log ε_neck`, one per junction.
    #[serde(rename = "T")]
    pub neck_parameters: Vec<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff_width: f64,
    #[serde(default)]
    pub grids: GridSpec,
}

fn default_cutoff() -> f64 {
    1.0
}

impl GluingConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: GluingConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn dimension(&self) -> Result<Dimension> {
        Dimension::new(self.n).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_neck_parameters(&self, t: &[f64]) -> Self {
        GluingConfig {
            neck_parameters: t.to_vec(),
            ..self.clone()
        }
    }

    /// Checks everything that does not need the summand orbits.
    pub fn validate(&self) -> Result<()> {
        let n = self.dimension()?;
        let count = self.summands.len();
        if count == 0 {
            return Err(Error::Config("at least one summand is required".into()));
        }
        if self.neck_parameters.len() + 1 != count {
            return Err(Error::Config(format!(
                "{count} summands need {} neck parameters, got {}",
                count - 1,
                self.neck_parameters.len()
            )));
        }
        let w = self.cutoff_width;
        if !(w > 0.0) {
            return Err(Error::Config("cutoff_width must be positive".into()));
        }
        for (k, &t) in self.neck_parameters.iter().enumerate() {
            if !(t > 2.0 * (w + 1.0)) {
                return Err(Error::Config(format!(
                    "junction {k}: T = {t} must exceed 2·(cutoff_width + 1) = {}",
                    2.0 * (w + 1.0)
                )));
            }
        }
        let g = &self.grids;
        let ok = g.body_spacing > 0.0
            && g.neck_spacing > 0.0
            && g.body_ntheta >= 9
            && g.neck_ntheta >= 9
            && matches!(g.x_order, 2 | 4 | 6)
            && matches!(g.interp_points, 4 | 6)
            && g.hole.is_finite()
            && g.overlap > g.hole
            && g.core_margin > 0.0
            && g.end_periods > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid grid parameters {g:?}")));
        }
        let ubar = fowler::cylinder_constant(n);
        for (i, s) in self.summands.iter().enumerate() {
            if !(s.eps > 0.0 && s.eps <= ubar * (1.0 + 1e-12)) {
                return Err(Error::Config(format!("summand {i}: eps = {} outside (0, {ubar}]", s.eps)));
            }
            if !(s.alpha > 0.0 && 2.0 * s.alpha < 1.0) {
                return Err(Error::Config(format!("summand {i}: alpha = {} must lie in (0, 1/2)", s.alpha)));
            }
            if s.alpha * g.overlap.exp() > 0.7 {
                return Err(Error::Config(format!(
                    "summand {i}: alpha·e^overlap = {} comes too close to the far puncture",
                    s.alpha * g.overlap.exp()
                )));
            }
            let pts = s.points();
            let needed = usize::from(i > 0) + usize::from(i + 1 < count);
            if pts.len() != needed {
                return Err(Error::Config(format!(
                    "summand {i} needs {needed} gluing point(s), got {}",
                    pts.len()
                )));
            }
            for p in &pts {
                p.validate()?;
            }
            let reach = s.alpha * g.overlap.exp();
            let extent = ((1.0 + reach) / (1.0 - reach)).ln();
            for a in 0..pts.len() {
                for b in a + 1..pts.len() {
                    if (pts[a].t - pts[b].t).abs() <= extent + 4.0 * g.body_spacing {
                        return Err(Error::Config(format!("summand {i}: overlapping gluing balls")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Default placement for an `N`-fold chain: the first summand is glued at
/// `t = 0`, middle summands at `t = ∓P`, the last at `t = 0`, all on `ϑ = 0`.
pub fn chain_config(n: usize, summands: &[(f64, f64)], t_list: &[f64]) -> Result<GluingConfig> {
    let dim = Dimension::new(n).map_err(|e| Error::Config(e.to_string()))?;
    let count = summands.len();
    if count < 2 || t_list.len() + 1 != count {
        return Err(Error::Config("a chain needs N ≥ 2 summands and N − 1 neck parameters".into()));
    }
    let mut specs = Vec::with_capacity(count);
    for (i, &(eps, alpha)) in summands.iter().enumerate() {
        let points = if i == 0 || i + 1 == count {
            vec![GluingPoint::new(0.0, 0.0)]
        } else {
            let p = summand_period(dim, eps)?;
            vec![GluingPoint::new(-p, 0.0), GluingPoint::new(p, 0.0)]
        };
        specs.push(SummandSpec {
            eps,
            gluing_point: None,
            gluing_points: points,
            alpha,
            deficiency_end: if i == 0 { EndSide::Minus } else { EndSide::Plus },
        });
    }
    let c = GluingConfig {
        n,
        summands: specs,
        neck_parameters: t_list.to_vec(),
        cutoff_width: 1.0,
        grids: GridSpec::default(),
    };
    c.validate()?;
    Ok(c)
}

fn summand_period(n: Dimension, eps: f64) -> Result<f64> {
    Ok(DelaunayOrbit::new(n, eps.min(fowler::cylinder_constant(n)))?.period)
}

/// One summand's chart: the cylinder `[t_lo, t_hi] × [0, π]` minus holes
/// around its gluing points.
#[derive(Debug, Clone)]
pub struct Body {
    pub summand: usize,
    pub orbit: DelaunayOrbit,
    pub chart: Chart,
    pub points: Vec<GluingPoint>,
    /// Neck index attached to each point.
    pub necks: Vec<usize>,
    pub alpha: f64,
    /// Compact core `[t_lo, t_hi]`; the ends lie outside it.
    pub core: (f64, f64),
    pub deficiency_end: EndSide,
}

impl Body {
    pub fn period(&self) -> f64 {
        self.orbit.period
    }
}

/// Neck chart of one junction in the coordinate `s = s₁` of its left summand.
#[derive(Debug, Clone)]
pub struct Neck {
    pub junction: usize,
    /// `(summand, point index)` on each side.
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub chart: Chart,
    pub a_left: f64,
    pub a_right: f64,
    pub t: f64,
    pub cutoff_width: f64,
}

impl Neck {
    /// `s₂` for the right summand.
    pub fn right_coordinate(&self, s: f64) -> f64 {
        self.a_left + self.a_right + self.t - s
    }

    /// Centre of the cutoff transition.
    pub fn midpoint(&self) -> f64 {
        self.a_left + 0.5 * self.t
    }

    /// `(χ_left, χ_left', χ_left'')` in `s`; `χ_right = 1 − χ_left`.
    pub fn cutoff(&self, s: f64) -> (f64, f64, f64) {
        let w = self.cutoff_width;
        let x = (s - (self.midpoint() - w)) / (2.0 * w);
        (
            1.0 - smoothstep(x),
            -smoothstep_d1(x) / (2.0 * w),
            -smoothstep_d2(x) / (4.0 * w * w),
        )
    }

    /// Whether `s` lies in the transition zone.
    pub fn in_transition(&self, s: f64) -> bool {
        (s - self.midpoint()).abs() < self.cutoff_width
    }
}

/// Interpolation source of a fringe node: `U = ω Σ w_k U[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Donor {
    pub chart: usize,
    pub nodes: Vec<(usize, f64)>,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Field,
    Hole,
    Dirichlet,
    Fringe(Donor),
}

/// Reference to one end of one body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndRef {
    pub body: usize,
    pub side: EndSide,
}

#[derive(Debug, Clone)]
pub struct GluedManifold {
    pub n: Dimension,
    pub config: GluingConfig,
    pub bodies: Vec<Body>,
    pub necks: Vec<Neck>,
    /// Start of each chart (bodies first, then necks) in the global vector.
    pub offsets: Vec<usize>,
    pub kinds: Vec<NodeKind>,
    /// Cap on the `x` order of each node's stencil; lowered next to holes.
    pub orders: Vec<u8>,
}

/// Per-chart values, in the order of [`GluedManifold::charts`].
#[derive(Debug, Clone, PartialEq)]
pub struct GluedField {
    pub charts: Vec<DiscreteField>,
}

impl GluedField {
    pub fn flatten(&self) -> Vec<f64> {
        self.charts.iter().flat_map(|f| f.values.iter().copied()).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.charts.iter().map(|f| f.sup_norm()).fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.charts
            .iter()
            .flat_map(|f| f.values.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

fn grid_count(len: f64, h: f64) -> usize {
    (len / h).ceil() as usize + 1
}

/// Lagrange weights of the nodes `x0 + (base + k) h`, `k < q`, at `x`.
fn lagrange(x: f64, x0: f64, h: f64, base: i64, q: usize) -> Vec<f64> {
    let nodes: Vec<f64> = (0..q).map(|k| x0 + (base + k as i64) as f64 * h).collect();
    (0..q)
        .map(|a| {
            (0..q)
                .filter(|&b| b != a)
                .map(|b| (x - nodes[b]) / (nodes[a] - nodes[b]))
                .product()
        })
        .collect()
}

/// Tensor Lagrange stencil at `(x, θ)` on `chart`; angular indices past the
/// poles are reflected, which is exact for even fields.
fn interpolation_stencil(chart: &Chart, x: f64, theta: f64, q: usize) -> Option<Vec<(usize, f64)>> {
    let hx = chart.hx();
    let ht = chart.htheta();
    if x < chart.x0 - 1e-12 || x > chart.x1 + 1e-12 {
        return None;
    }
    let half = q as i64 / 2 - 1;
    let ib = ((((x - chart.x0) / hx).floor() as i64) - half).clamp(0, chart.nx as i64 - q as i64);
    let jb = ((theta / ht).floor() as i64) - half;
    let wx = lagrange(x, chart.x0, hx, ib, q);
    let wt = lagrange(theta, 0.0, ht, jb, q);
    let last = chart.ntheta as i64 - 1;
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(q * q);
    for (a, wa) in wx.iter().enumerate() {
        for (b, wb) in wt.iter().enumerate() {
            let mut j = jb + b as i64;
            if j < 0 {
                j = -j;
            }
            if j > last {
                j = 2 * last - j;
            }
            let k = chart.index((ib + a as i64) as usize, j as usize);
            match out.iter_mut().find(|e| e.0 == k) {
                Some(e) => e.1 += wa * wb,
                None => out.push((k, wa * wb)),
            }
        }
    }
    Some(out)
}

impl GluedManifold {
    pub fn charts(&self) -> Vec<&Chart> {
        self.bodies.iter().map(|b| &b.chart).chain(self.necks.iter().map(|k| &k.chart)).collect()
    }

    pub fn chart(&self, c: usize) -> &Chart {
        if c < self.bodies.len() {
            &self.bodies[c].chart
        } else {
            &self.necks[c - self.bodies.len()].chart
        }
    }

    pub fn chart_count(&self) -> usize {
        self.bodies.len() + self.necks.len()
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn descriptor(&self, c: usize) -> MetricDescriptor {
        self.chart(c).background
    }

    /// `(chart, local index)` of a global index.
    pub fn locate(&self, k: usize) -> (usize, usize) {
        let c = self.offsets.partition_point(|&o| o <= k) - 1;
        (c, k - self.offsets[c])
    }

    pub fn ends(&self) -> Vec<EndRef> {
        (0..self.bodies.len())
            .flat_map(|b| [EndSide::Minus, EndSide::Plus].map(|side| EndRef { body: b, side }))
            .collect()
    }

    pub fn split(&self, values: &[f64]) -> GluedField {
        let charts = (0..self.chart_count())
            .map(|c| {
                let ch = *self.chart(c);
                let o = self.offsets[c];
                DiscreteField {
                    chart: ch,
                    values: values[o..o + ch.len()].to_vec(),
                    margin: 0,
                }
            })
            .collect();
        GluedField { charts }
    }

    /// Factor of summand `side` of neck `k` relative to the normalized
    /// cylinder at `(s, ψ)`, with its `s`-derivative.
    pub fn neck_summand_factor(&self, k: usize, right: bool, s: f64, psi: f64) -> (f64, f64) {
        let neck = &self.necks[k];
        let (summand, pi) = if right { neck.right } else { neck.left };
        let body = &self.bodies[summand];
        let si = if right { neck.right_coordinate(s) } else { s };
        let rhat = (-si).exp();
        let (t, _, ynorm) = body.points[pi].to_body(rhat, psi);
        let [u, up] = body.orbit.state(t);
        let value = u / neck_weight(self.n, ynorm, rhat);
        let nf = self.n.f();
        let dlog_y = -rhat * (psi.cos() + rhat) / (ynorm * ynorm);
        let dlog = 0.5 * (nf - 2.0) * (-1.0 - dlog_y) - up / u * dlog_y;
        let ds = value * dlog;
        (value, if right { -ds } else { ds })
    }

    /// Body factor (relative to the product cylinder) at a neck point.
    pub fn neck_to_body(&self, k: usize, right: bool, s: f64, psi: f64) -> (usize, f64, f64, f64) {
        let neck = &self.necks[k];
        let (summand, pi) = if right { neck.right } else { neck.left };
        let si = if right { neck.right_coordinate(s) } else { s };
        let rhat = (-si).exp();
        let (t, theta, ynorm) = self.bodies[summand].points[pi].to_body(rhat, psi);
        (summand, t, theta, neck_weight(self.n, ynorm, rhat))
    }

    /// Largest relative disagreement of `field` between each fringe node and
    /// its interpolated donor value.
    pub fn overlap_defect(&self, field: &GluedField) -> f64 {
        let flat = field.flatten();
        let mut worst: f64 = 0.0;
        for (k, kind) in self.kinds.iter().enumerate() {
            if let NodeKind::Fringe(d) = kind {
                let v = d.omega * d.nodes.iter().map(|&(m, w)| w * flat[m]).sum::<f64>();
                worst = worst.max((flat[k] - v).abs() / flat[k].abs().max(1e-300));
            }
        }
        worst
    }

    /// Largest deviation from conformality of the body ↔ neck maps at the
    /// overlap nodes: the pulled back product metric must equal
    /// `ω^{-4/(n-2)}` times the normalized cylinder, in all directions.
    pub fn isometry_defect(&self) -> f64 {
        let nf = self.n.f();
        let mut worst: f64 = 0.0;
        let h = 2e-3;
        for (k, neck) in self.necks.iter().enumerate() {
            let ch = &neck.chart;
            for right in [false, true] {
                let i = if right { ch.nx - 1 } else { 0 };
                let s = ch.x(i);
                for j in 1..ch.ntheta - 1 {
                    let psi = ch.theta(j);
                    let map = |ds: f64, dp: f64| {
                        let (_, t, th, _) = self.neck_to_body(k, right, s + ds, psi + dp);
                        [t, th]
                    };
                    let d = |f: &dyn Fn(f64) -> [f64; 2]| {
                        let w = [-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0];
                        let mut out = [0.0; 2];
                        for (k, wk) in w.iter().enumerate() {
                            let v = f((k as f64 - 3.0) * h);
                            out[0] += wk * v[0] / (60.0 * h);
                            out[1] += wk * v[1] / (60.0 * h);
                        }
                        out
                    };
                    let js = d(&|x| map(x, 0.0));
                    let jp = d(&|x| map(0.0, x));
                    let (_, _, th, w) = self.neck_to_body(k, right, s, psi);
                    let lam = w.powf(-4.0 / (nf - 2.0)) * (nf - 2.0) / nf;
                    let gss = js[0] * js[0] + js[1] * js[1];
                    let gpp = jp[0] * jp[0] + jp[1] * jp[1];
                    let gsp = js[0] * jp[0] + js[1] * jp[1];
                    let gang = th.sin().powi(2) / psi.sin().powi(2);
                    for defect in [gss / lam - 1.0, gpp / lam - 1.0, gsp / lam, gang / lam - 1.0] {
                        worst = worst.max(defect.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Builds the charts, the node classification and the overlap maps.
pub fn build_connected_sum(config: &GluingConfig) -> Result<GluedManifold> {
    config.validate()?;
    let n = config.dimension()?;
    let g = &config.grids;
    let count = config.summands.len();
    let mut bodies = Vec::with_capacity(count);
    for (i, s) in config.summands.iter().enumerate() {
        let ubar = fowler::cylinder_constant(n);
        let orbit = DelaunayOrbit::new(n, s.eps.min(ubar))?;
        if s.alpha > 0.25 * orbit.period {
            return Err(Error::Config(format!(
                "summand {i}: alpha = {} exceeds a quarter period {}",
                s.alpha,
                0.25 * orbit.period
            )));
        }
        let points = s.points();
        let lo = points.iter().map(|p| p.t).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.t).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if points.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        let core = (lo - g.core_margin, hi + g.core_margin);
        let l_end = g.end_periods * orbit.period;
        let (x0, x1) = (core.0 - l_end, core.1 + l_end);
        let desc = MetricDescriptor::new(MetricKind::CylinderProduct, n);
        let chart = Chart::new(desc, x0, x1, grid_count(x1 - x0, g.body_spacing), g.body_ntheta)?.with_order(g.x_order)?;
        bodies.push(Body {
            summand: i,
            orbit,
            chart,
            points,
            necks: Vec::new(),
            alpha: s.alpha,
            core,
            deficiency_end: s.deficiency_end,
        });
    }
    let mut necks = Vec::with_capacity(count.saturating_sub(1));
    for (k, &t) in config.neck_parameters.iter().enumerate() {
        let left_point = bodies[k].points.len() - 1;
        let (al, ar) = (-bodies[k].alpha.ln(), -bodies[k + 1].alpha.ln());
        let (x0, x1) = (al - g.overlap, al + t + g.overlap);
        let desc = MetricDescriptor::new(MetricKind::CylinderNormalized, n);
        let chart = Chart::new(desc, x0, x1, grid_count(x1 - x0, g.neck_spacing), g.neck_ntheta)?.with_order(g.x_order)?;
        bodies[k].necks.push(k);
        bodies[k + 1].necks.insert(0, k);
        necks.push(Neck {
            junction: k,
            left: (k, left_point),
            right: (k + 1, 0),
            chart,
            a_left: al,
            a_right: ar,
            t,
            cutoff_width: config.cutoff_width,
        });
    }
    let mut offsets = Vec::with_capacity(bodies.len() + necks.len());
    let mut total = 0;
    for c in bodies.iter().map(|b| &b.chart).chain(necks.iter().map(|k| &k.chart)) {
        offsets.push(total);
        total += c.len();
    }
    let mut m = GluedManifold {
        n,
        config: config.clone(),
        bodies,
        necks,
        offsets,
        kinds: vec![NodeKind::Field; total],
        orders: vec![0; total],
    };
    classify(&mut m)?;
    Ok(m)
}

fn classify(m: &mut GluedManifold) -> Result<()> {
    let g = m.config.grids.clone();
    let nbodies = m.bodies.len();
    let mut kinds = vec![NodeKind::Field; m.len()];
    let mut orders = vec![g.x_order as u8; m.len()];
    for (b, body) in m.bodies.iter().enumerate() {
        let ch = &body.chart;
        let off = m.offsets[b];
        // Nearest gluing point of each hole node.
        let mut hole = vec![None; ch.len()];
        for i in 0..ch.nx {
            for j in 0..ch.ntheta {
                for (pi, p) in body.points.iter().enumerate() {
                    let (rhat, _, _) = p.to_neck(ch.x(i), ch.theta(j));
                    if rhat < body.alpha * g.hole.exp() {
                        hole[ch.index(i, j)] = Some(pi);
                    }
                }
            }
        }
        for i in 0..ch.nx {
            for j in 0..ch.ntheta {
                let k = ch.index(i, j);
                kinds[off + k] = if hole[k].is_some() {
                    NodeKind::Hole
                } else if i == 0 || i + 1 == ch.nx {
                    NodeKind::Dirichlet
                } else {
                    let mut touch = None;
                    let last = ch.ntheta - 1;
                    let angular = if j == 0 { [1, 1] } else if j == last { [last - 1, last - 1] } else { [j - 1, j + 1] };
                    for q in [ch.index(i - 1, j), ch.index(i + 1, j), ch.index(i, angular[0]), ch.index(i, angular[1])] {
                        if let Some(pi) = hole[q] {
                            touch = Some(pi);
                        }
                    }
                    if touch.is_none() {
                        // Widest x stencil that stays clear of the holes.
                        let clear = |r: usize| {
                            (1..=r).all(|k| {
                                (i < k || hole[ch.index(i - k, j)].is_none())
                                    && (i + k >= ch.nx || hole[ch.index(i + k, j)].is_none())
                            })
                        };
                        orders[off + k] = [3, 2, 1].into_iter().find(|&r| clear(r)).unwrap_or(1) as u8 * 2;
                    }
                    match touch {
                        None => NodeKind::Field,
                        Some(pi) => {
                            let neck_id = body.necks[pi];
                            let neck = &m.necks[neck_id];
                            let right = neck.right.0 == b;
                            let (rhat, psi, ynorm) = body.points[pi].to_neck(ch.x(i), ch.theta(j));
                            let si = -rhat.ln();
                            let s = if right { neck.right_coordinate(si) } else { si };
                            let c = nbodies + neck_id;
                            let stencil = interpolation_stencil(&neck.chart, s, psi, g.interp_points)
                                .ok_or_else(|| Error::Config("body fringe node outside its neck chart".into()))?;
                            NodeKind::Fringe(Donor {
                                chart: c,
                                nodes: stencil.into_iter().map(|(q, w)| (m.offsets[c] + q, w)).collect(),
                                omega: neck_weight(m.n, ynorm, rhat),
                            })
                        }
                    }
                };
            }
        }
    }
    for (k, neck) in m.necks.iter().enumerate() {
        let ch = &neck.chart;
        let off = m.offsets[nbodies + k];
        for (i, right) in [(0, false), (ch.nx - 1, true)] {
            for j in 0..ch.ntheta {
                let (summand, t, theta, w) = m.neck_to_body(k, right, ch.x(i), ch.theta(j));
                let bch = &m.bodies[summand].chart;
                let stencil = interpolation_stencil(bch, t, theta, g.interp_points)
                    .ok_or_else(|| Error::Config("neck fringe node outside its body chart".into()))?;
                kinds[off + ch.index(i, j)] = NodeKind::Fringe(Donor {
                    chart: summand,
                    nodes: stencil.into_iter().map(|(q, wq)| (m.offsets[summand] + q, wq)).collect(),
                    omega: 1.0 / w,
                });
            }
        }
    }
    for (k, kind) in kinds.iter().enumerate() {
        if let NodeKind::Fringe(d) = kind {
            for &(q, _) in &d.nodes {
                if !matches!(kinds[q], NodeKind::Field) {
                    let (c, local) = m.locate(k);
                    let (dc, dl) = m.locate(q);
                    let (ch, dch) = (m.chart(c), m.chart(dc));
                    return Err(Error::Config(format!(
                        "chart {c} node ({:.4}, {:.4}): interpolation stencil reaches ({:.4}, {:.4}) of chart {dc}, \
                         which is not a field node; refine the grids or widen the overlap",
                        ch.x(local / ch.ntheta),
                        ch.theta(local % ch.ntheta),
                        dch.x(dl / dch.ntheta),
                        dch.theta(dl % dch.ntheta),
                    )));
                }
            }
        }
    }
    m.kinds = kinds;
    m.orders = orders;
    Ok(())
}

/// `u_T`: the summand factors on bodies and `χ₁ũ₁ + χ₂ũ₂` on necks.
pub fn approximate_factor(m: &GluedManifold) -> Result<GluedField> {
    let mut charts = Vec::with_capacity(m.chart_count());
    for body in &m.bodies {
        charts.push(DiscreteField::from_fn(body.chart, |t, _| body.orbit.u(t)));
    }
    for (k, neck) in m.necks.iter().enumerate() {
        charts.push(DiscreteField::from_fn(neck.chart, |s, psi| {
            let (chi, _, _) = neck.cutoff(s);
            let left = if chi > 0.0 { m.neck_summand_factor(k, false, s, psi).0 } else { 0.0 };
            let right = if chi < 1.0 { m.neck_summand_factor(k, true, s, psi).0 } else { 0.0 };
            chi * left + (1.0 - chi) * right
        }));
    }
    let f = GluedField { charts };
    let low = f.min();
    if !(low > 0.0) {
        return Err(Error::Numeric(format!("approximate factor is not positive (min {low})")));
    }
    Ok(f)
}

/// `f_T = N(u_T)` from the exact product rule: both summand factors solve
/// the equation, so only cutoff derivatives and the nonlinear mismatch
/// survive. Vanishes identically off the transition zones.
pub fn error_field(m: &GluedManifold) -> GluedField {
    let n = m.n;
    let nf = n.f();
    let k_lap = nf / (nf - 2.0);
    let cr = n.coupling() * n.sphere_curvature();
    let p = n.critical_exponent();
    let mut charts = Vec::with_capacity(m.chart_count());
    for body in &m.bodies {
        charts.push(DiscreteField::constant(body.chart, 0.0));
    }
    for (k, neck) in m.necks.iter().enumerate() {
        charts.push(DiscreteField::from_fn(neck.chart, |s, psi| {
            if !neck.in_transition(s) {
                return 0.0;
            }
            let (chi, d1, d2) = neck.cutoff(s);
            let (ul, dl) = m.neck_summand_factor(k, false, s, psi);
            let (ur, dr) = m.neck_summand_factor(k, true, s, psi);
            let u = chi * ul + (1.0 - chi) * ur;
            let linear = k_lap * (d2 * ul + 2.0 * d1 * dl - d2 * ur - 2.0 * d1 * dr);
            linear + cr * (u.powf(p) - chi * ul.powf(p) - (1.0 - chi) * ur.powf(p))
        }));
    }
    GluedField { charts }
}

/// Sup and outside-zone sup of `f_T` (the latter over neck nodes outside the
/// transition zones and all body nodes).
pub fn support_split(m: &GluedManifold, f: &GluedField) -> (f64, f64) {
    let nb = m.bodies.len();
    let mut inside: f64 = 0.0;
    let mut outside: f64 = 0.0;
    for (c, field) in f.charts.iter().enumerate() {
        let ch = &field.chart;
        for i in 0..ch.nx {
            for j in 0..ch.ntheta {
                let v = field.values[ch.index(i, j)].abs();
                if c >= nb && m.necks[c - nb].in_transition(ch.x(i)) {
                    inside = inside.max(v);
                } else {
                    outside = outside.max(v);
                }
            }
        }
    }
    (inside.max(outside), outside)
}

/// Sup of `u_T` at the middle of each neck.
pub fn midneck_values(m: &GluedManifold, u: &GluedField) -> Vec<f64> {
    let nb = m.bodies.len();
    m.necks
        .iter()
        .enumerate()
        .map(|(k, neck)| {
            let f = &u.charts[nb + k];
            let ch = &f.chart;
            let i = (((neck.midpoint() - ch.x0) / ch.hx()).round() as usize).min(ch.nx - 1);
            (0..ch.ntheta).map(|j| f.get(i, j)).fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub t_values: Vec<f64>,
    pub norms: Vec<f64>,
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub monotone: bool,
}

/// Least-squares slope of `log‖f_T‖_∞` against `T` (all junctions share
/// the same `T`).
pub fn error_decay_scan(config: &GluingConfig, t_list: &[f64]) -> Result<DecayFit> {
    if t_list.len() < 4 {
        return Err(Error::Config("a decay scan needs at least four values of T".into()));
    }
    let mut norms = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let c = config.with_neck_parameters(&vec![t; config.neck_parameters.len()]);
        let m = build_connected_sum(&c)?;
        norms.push(error_field(&m).sup_norm());
    }
    let monotone = norms.windows(2).all(|w| w[1] < w[0]);
    let ys: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let (rate, intercept, r_squared) = linear_fit(t_list, &ys);
    Ok(DecayFit {
        t_values: t_list.to_vec(),
        norms,
        rate,
        intercept,
        r_squared,
        monotone,
    })
}

/// `(slope, intercept, R²)` of an ordinary least-squares line.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - ym).powi(2)).sum();
    (slope, intercept, if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 })
}

/// The switched background near one gluing point, on a flat polar chart in
/// `(r̂, ψ)`.
#[derive(Debug, Clone)]
pub struct BackgroundSwitch {
    /// `v_i` with `g_i = v_i^{4/(n-2)} δ`.
    pub v: DiscreteField,
    pub rho: DiscreteField,
    /// `u_i = ρ + (1 − ρ) ((n-2)/n)^{(2-n)/4} r̂^{(n-2)/2} v_i`.
    pub u: DiscreteField,
    /// Largest relative round-trip residual of the transport used for `v_i`.
    pub transport_residual: f64,
}

/// Factor turning `g_i` into a metric that is an exact normalized cylinder
/// inside `B_α(p)` and equals `g_i` outside `B_{2α}(p)`.
pub fn background_switch(
    n: Dimension,
    spec: &SummandSpec,
    point: usize,
    nr: usize,
    ntheta: usize,
) -> Result<BackgroundSwitch> {
    let alpha = spec.alpha;
    let outer = 2.5 * alpha;
    if !(alpha > 0.0 && outer < 0.95) {
        return Err(Error::Config(format!("alpha = {alpha} too large for a background switch")));
    }
    let p = *spec
        .points()
        .get(point)
        .ok_or_else(|| Error::Config(format!("summand has no gluing point {point}")))?;
    p.validate()?;
    let orbit = DelaunayOrbit::new(n, spec.eps.min(fowler::cylinder_constant(n)))?;
    let flat = MetricDescriptor::new(MetricKind::Euclidean, n);
    let cyl = MetricDescriptor::new(MetricKind::CylinderProduct, n);
    let chart = Chart::new(flat, 0.2 * alpha, outer, nr, ntheta)?;
    let nf = n.f();
    let mut v = vec![0.0; chart.len()];
    let mut residual: f64 = 0.0;
    let scale = (-(nf - 2.0) * p.t / 2.0).exp();
    for i in 0..chart.nx {
        for j in 0..chart.ntheta {
            let (t, theta, _) = p.to_body(chart.x(i), chart.theta(j));
            let pt = TransportPoint {
                x: t,
                theta,
                u: orbit.u(t),
            };
            let there = cylinder_sphere_transport(&cyl, &flat, &[pt])?[0];
            let back = cylinder_sphere_transport(&flat, &cyl, &[there])?[0];
            residual = residual.max((back.u - pt.u).abs() / pt.u).max((back.x - pt.x).abs());
            v[chart.index(i, j)] = there.u * scale;
        }
    }
    let v = DiscreteField {
        chart,
        values: v,
        margin: 0,
    };
    let rho = DiscreteField::from_fn(chart, |r, _| smoothstep((r / alpha).ln() / 2f64.ln()));
    let c = ((nf - 2.0) / nf).powf((2.0 - nf) / 4.0);
    let mut u = rho.clone();
    for i in 0..chart.nx {
        for j in 0..chart.ntheta {
            let k = chart.index(i, j);
            let r = chart.x(i);
            u.values[k] = rho.values[k] + (1.0 - rho.values[k]) * c * r.powf((nf - 2.0) / 2.0) * v.values[k];
        }
    }
    Ok(BackgroundSwitch {
        v,
        rho,
        u,
        transport_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_is_c2_at_ends() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(smoothstep_d1(0.0), 0.0);
        assert_eq!(smoothstep_d2(1.0), 0.0);
        for x in [0.1, 0.37, 0.8] {
            assert!((smoothstep(x) + smoothstep(1.0 - x) - 1.0).abs() < 1e-15);
            let h = 1e-5;
            let fd = (smoothstep(x + h) - smoothstep(x - h)) / (2.0 * h);
            assert!((fd - smoothstep_d1(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn neck_coordinates_round_trip() {
        for p in [GluingPoint::new(0.3, 0.0), GluingPoint::new(-1.0, PI)] {
            for (r, psi) in [(0.2, 0.4), (0.7, 2.9), (0.05, 1.5)] {
                let (t, th, _) = p.to_body(r, psi);
                let (r2, psi2, _) = p.to_neck(t, th);
                assert!((r - r2).abs() < 1e-13 && (psi - psi2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lagrange_reproduces_cubics() {
        let w = lagrange(0.37, 0.0, 0.1, 2, 4);
        let v: f64 = w.iter().enumerate().map(|(k, w)| w * (0.1 * (k + 2) as f64).powi(3)).sum();
        assert!((v - 0.37f64.powi(3)).abs() < 1e-14);
    }

    #[test]
    fn config_rejects_short_necks() {
        let s = SummandSpec::new(0.4, GluingPoint::new(0.0, 0.0), 0.3, EndSide::Plus);
        let c = GluingConfig {
            n: 3,
            summands: vec![s.clone(), s],
            neck_parameters: vec![3.9],
            cutoff_width: 1.0,
            grids: GridSpec::default(),
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(c.with_neck_parameters(&[4.1]).validate().is_ok());
    }
}
