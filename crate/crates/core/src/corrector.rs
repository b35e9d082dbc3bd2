//! Weighted linear theory on a glued manifold, the bordered right inverse,
//! the fixed-point corrector and its certification.
//!
//! Unknowns are a correction `v` on every node plus two deficiency
//! coefficients `(a, b)` per designated end. The total factor is
//! `B(a, b) + v`, where `B` is `u_T` with each designated end replaced
//! beyond a cutoff by a translated Delaunay factor of shifted parameter.

use serde::{Deserialize, Serialize};

use crate::fowler::{self, DelaunayOrbit, Dimension};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::conformal::MetricKind;
use crate::gluing::{chain_config, smoothstep, EndRef, EndSide, GluedManifold, GluingConfig, GridSpec, NodeKind};
use crate::modeline;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    FixedPoint,
    NewtonAccelerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Weight parameter per period of the end coordinate. `None` selects
    /// `delta_fraction` times the smallest admissible bound.
    pub delta: Option<f64>,
    pub delta_fraction: f64,
    pub max_iterations: usize,
    /// Target for the weighted nonlinear residual.
    pub residual_target: f64,
    /// Number of trailing iterations whose ratios must stay below one.
    pub contraction_window: usize,
    /// Iterations excluded from the contraction-ratio gate.
    pub burn_in: usize,
    /// Replaces the grids of the gluing configuration.
    pub grids: Option<GridSpec>,
    /// Replaces the end length (in periods) of the gluing configuration.
    pub end_periods: Option<f64>,
    pub mode: SolverMode,
    /// Seed for randomized probes.
    pub seed: u64,
    pub probes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            delta: None,
            delta_fraction: 0.25,
            max_iterations: 30,
            residual_target: 2e-9,
            contraction_window: 3,
            burn_in: 2,
            grids: None,
            end_periods: None,
            mode: SolverMode::FixedPoint,
            seed: 7,
            probes: 20,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_target > 0.0) {
            return Err(Error::Config(format!("residual_target must be positive, got {}", self.residual_target)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.delta_fraction > 0.0 && self.delta_fraction < 1.0) {
            return Err(Error::Config(format!("delta_fraction must lie in (0, 1), got {}", self.delta_fraction)));
        }
        if self.contraction_window == 0 {
            return Err(Error::Config("contraction_window must be at least 1".into()));
        }
        if let Some(l) = self.end_periods {
            if !(l >= 1.0) {
                return Err(Error::Config(format!("end_periods must be at least 1, got {l}")));
            }
        }
        Ok(())
    }

    /// Gluing configuration with this solver's grid overrides applied.
    pub fn apply(&self, config: &GluingConfig) -> GluingConfig {
        let mut out = config.clone();
        if let Some(g) = &self.grids {
            out.grids = g.clone();
        }
        if let Some(l) = self.end_periods {
            out.grids.end_periods = l;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Weights

/// `α^δ` normalized to one on the core, with `α = e^{√(1+τ²)}` and `τ` the
/// distance past the core measured in periods.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    pub delta: f64,
    pub values: Vec<f64>,
}

/// End coordinate past the core of body `b`, in periods; zero on the core.
pub fn end_coordinate(m: &GluedManifold, b: usize, t: f64) -> f64 {
    let body = &m.bodies[b];
    let past = (t - body.core.1).max(body.core.0 - t).max(0.0);
    past / body.period()
}

/// Smallest `δ_1` over the summands and the summand attaining it.
pub fn admissible_bound(m: &GluedManifold) -> Result<(f64, usize)> {
    let mut best = (f64::INFINITY, 0);
    for (i, body) in m.bodies.iter().enumerate() {
        let d1 = modeline::fredholm_weights(&body.orbit, 1)?[1];
        if d1 < best.0 {
            best = (d1, i);
        }
    }
    Ok(best)
}

pub fn default_delta(m: &GluedManifold, config: &SolverConfig) -> Result<f64> {
    match config.delta {
        Some(d) => Ok(d),
        None => Ok(config.delta_fraction * admissible_bound(m)?.0),
    }
}

pub fn weight(m: &GluedManifold, delta: f64) -> Result<WeightFunction> {
    if !(delta > 0.0) {
        return Err(Error::Admissibility {
            delta,
            reason: "the decaying space needs delta > 0".into(),
        });
    }
    for (i, body) in m.bodies.iter().enumerate() {
        let d1 = modeline::fredholm_weights(&body.orbit, 1)?[1];
        if delta >= d1 {
            return Err(Error::Admissibility {
                delta,
                reason: format!("summand {i} (eps = {}) has delta_1 = {d1}", body.orbit.eps),
            });
        }
    }
    let nb = m.bodies.len();
    let mut values = vec![1.0; m.len()];
    for b in 0..nb {
        let ch = &m.bodies[b].chart;
        let o = m.offsets[b];
        for i in 0..ch.nx {
            let tau = end_coordinate(m, b, ch.x(i));
            let w = (delta * ((1.0 + tau * tau).sqrt() - 1.0)).exp();
            for j in 0..ch.ntheta {
                values[o + ch.index(i, j)] = w;
            }
        }
    }
    Ok(WeightFunction { delta, values })
}

// ---------------------------------------------------------------------------
// Deficiency space

/// Cutoff rising from the core edge to one over `2w` along a designated end.
pub fn end_cutoff(m: &GluedManifold, b: usize, side: EndSide, t: f64) -> f64 {
    let body = &m.bodies[b];
    let w = m.config.cutoff_width;
    match side {
        EndSide::Plus => smoothstep((t - body.core.1) / (2.0 * w)),
        EndSide::Minus => smoothstep((body.core.0 - t) / (2.0 * w)),
    }
}

/// Parameter Jacobi field `∂_ε u_ε` sampled densely on `[0, t_max]` and
/// evaluated by cubic Hermite interpolation; even in `t`.
struct ParameterField {
    step: f64,
    samples: Vec<[f64; 2]>,
}

impl ParameterField {
    fn new(orbit: &DelaunayOrbit, t_max: f64) -> Result<Self> {
        let count = ((t_max / 2e-3).ceil() as usize).max(16);
        let samples = modeline::mode_solution(orbit, 0, 1.0, 0.0, t_max, count)?;
        Ok(ParameterField {
            step: t_max / count as f64,
            samples,
        })
    }

    fn eval(&self, t: f64) -> f64 {
        self.eval_with_derivative(t).0
    }

    /// Value and derivative; the derivative is odd in `t`.
    fn eval_with_derivative(&self, t: f64) -> (f64, f64) {
        let x = t.abs() / self.step;
        let k = (x.floor() as usize).min(self.samples.len() - 2);
        let s = x - k as f64;
        let [p0, d0] = self.samples[k];
        let [p1, d1] = self.samples[k + 1];
        let h = self.step;
        let (s2, s3) = (s * s, s * s * s);
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * p0
            + (s3 - 2.0 * s2 + s) * h * d0
            + (-2.0 * s3 + 3.0 * s2) * p1
            + (s3 - s2) * h * d1;
        let slope = ((6.0 * s2 - 6.0 * s) * p0 + (-6.0 * s2 + 6.0 * s) * p1) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (3.0 * s2 - 2.0 * s) * d1;
        (value, slope * t.signum())
    }
}

/// The two deficiency directions of one designated end, tabulated per
/// body row. `phi[0]` is the translation field `φ_0^+`, `phi[1]` the
/// parameter field `φ_0^-`, both of unit sup over the first period.
#[derive(Debug, Clone, PartialEq)]
pub struct DeficiencyEnd {
    pub end: EndRef,
    /// At `eps = ū` both directions are the bounded cylinder modes
    /// `sin ωt`, `cos ωt` and the modification is linear.
    pub degenerate: bool,
    pub cutoff: Vec<f64>,
    pub phi: [Vec<f64>; 2],
    /// `sup |u'|` and `sup |∂_ε u|` over the first period.
    pub scales: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeficiencyBasis {
    pub ends: Vec<DeficiencyEnd>,
}

impl DeficiencyBasis {
    pub fn dim(&self) -> usize {
        2 * self.ends.len()
    }

    pub fn any_degenerate(&self) -> bool {
        self.ends.iter().any(|e| e.degenerate)
    }

    /// Basis field `k` (end `k/2`, direction `k%2`) as a global vector.
    pub fn field(&self, m: &GluedManifold, k: usize) -> Vec<f64> {
        let e = &self.ends[k / 2];
        let b = e.end.body;
        let ch = &m.bodies[b].chart;
        let o = m.offsets[b];
        let mut out = vec![0.0; m.len()];
        for i in 0..ch.nx {
            let v = e.cutoff[i] * e.phi[k % 2][i];
            if v != 0.0 {
                for j in 0..ch.ntheta {
                    out[o + ch.index(i, j)] = v;
                }
            }
        }
        out
    }
}

pub fn deficiency_basis(m: &GluedManifold) -> Result<DeficiencyBasis> {
    let n = m.n;
    let mut ends = Vec::new();
    for (b, body) in m.bodies.iter().enumerate() {
        let side = body.deficiency_end;
        let ch = &body.chart;
        let orbit = &body.orbit;
        let cutoff: Vec<f64> = (0..ch.nx).map(|i| end_cutoff(m, b, side, ch.x(i))).collect();
        let (phi, scales, degenerate) = if orbit.degenerate {
            let w = (n.f() - 2.0).sqrt();
            let s: Vec<f64> = (0..ch.nx).map(|i| (w * ch.x(i)).sin()).collect();
            let c: Vec<f64> = (0..ch.nx).map(|i| (w * ch.x(i)).cos()).collect();
            ([s, c], [1.0, 1.0], true)
        } else {
            let p = orbit.period;
            let per = 2048;
            let su = (0..=per).map(|k| orbit.up(p * k as f64 / per as f64).abs()).fold(0.0, f64::max);
            let t_max = ch.x(0).abs().max(ch.x(ch.nx - 1).abs()).max(p) + 1.0;
            let pf = ParameterField::new(orbit, t_max)?;
            let sp = (0..=per).map(|k| pf.eval(p * k as f64 / per as f64).abs()).fold(0.0, f64::max);
            let tr: Vec<f64> = (0..ch.nx).map(|i| -orbit.up(ch.x(i)) / su).collect();
            let pa: Vec<f64> = (0..ch.nx).map(|i| pf.eval(ch.x(i)) / sp).collect();
            ([tr, pa], [su, sp], false)
        };
        ends.push(DeficiencyEnd {
            end: EndRef { body: b, side },
            degenerate,
            cutoff,
            phi,
            scales,
        });
    }
    Ok(DeficiencyBasis { ends })
}

/// Smooth monotone reparameterizations of the deficiency coefficients:
/// `τ(a) = (P/2) tanh(κ_a a)` onto `(−P/2, P/2)` and
/// `d(b) = m + (ū/2) tanh(κ_b b + β)` onto `(−ε, ū − ε)`, scaled so that
/// the derivatives of the modified factor at zero are the basis fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndMaps {
    pub eps: f64,
    pub ubar: f64,
    pub period: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub beta: f64,
}

impl EndMaps {
    pub fn new(n: Dimension, e: &DeficiencyEnd, orbit: &DelaunayOrbit) -> Self {
        let ubar = fowler::cylinder_constant(n);
        let eps = orbit.eps;
        let period = orbit.period;
        if e.degenerate {
            return EndMaps {
                eps,
                ubar,
                period,
                kappa_a: 1.0,
                kappa_b: 1.0,
                beta: 0.0,
            };
        }
        let tb = 2.0 * eps / ubar - 1.0;
        EndMaps {
            eps,
            ubar,
            period,
            kappa_a: 2.0 / (period * e.scales[0]),
            kappa_b: 2.0 / (ubar * e.scales[1] * (1.0 - tb * tb)),
            beta: tb.atanh(),
        }
    }

    pub fn tau(&self, a: f64) -> f64 {
        0.5 * self.period * (self.kappa_a * a).tanh()
    }

    pub fn d(&self, b: f64) -> f64 {
        (0.5 * self.ubar - self.eps) + 0.5 * self.ubar * (self.kappa_b * b + self.beta).tanh()
    }

    /// Inside a quarter of the ranges of `τ` and `d`.
    pub fn in_trust_region(&self, a: f64, b: f64) -> bool {
        let ta = self.tau(a).abs() <= 0.125 * self.period;
        let db = self.d(b);
        ta && db >= -0.25 * self.eps && db <= 0.25 * (self.ubar - self.eps)
    }
}

/// `B(a, b)`: the factor `base` with each designated end modified beyond
/// its cutoff. `coeffs` holds `(a, b)` per end in basis order.
pub fn end_modification(m: &GluedManifold, basis: &DeficiencyBasis, base: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != basis.dim() {
        return Err(Error::Domain(format!("expected {} coefficients, got {}", basis.dim(), coeffs.len())));
    }
    let mut out = base.to_vec();
    for (e_idx, e) in basis.ends.iter().enumerate() {
        let (a, b) = (coeffs[2 * e_idx], coeffs[2 * e_idx + 1]);
        if a == 0.0 && b == 0.0 {
            continue;
        }
        let body = &m.bodies[e.end.body];
        let ch = &body.chart;
        let o = m.offsets[e.end.body];
        let maps = EndMaps::new(m.n, e, &body.orbit);
        let row_value: Box<dyn Fn(usize) -> f64> = if e.degenerate {
            if a.abs() > 0.25 * maps.ubar || b.abs() > 0.25 * maps.ubar {
                return Err(Error::TrustRegion { a, b });
            }
            Box::new(move |i| body.orbit.u(ch.x(i)) + a * e.phi[0][i] + b * e.phi[1][i])
        } else {
            if !maps.in_trust_region(a, b) {
                return Err(Error::TrustRegion { a, b });
            }
            let tau = maps.tau(a);
            let d = maps.d(b);
            let orbit = if d == 0.0 { body.orbit.clone() } else { DelaunayOrbit::new(m.n, maps.eps + d)? };
            Box::new(move |i| orbit.u(ch.x(i) - tau))
        };
        for i in 0..ch.nx {
            let chi = e.cutoff[i];
            if chi == 0.0 {
                continue;
            }
            let u0 = body.orbit.u(ch.x(i));
            let v = u0 + chi * (row_value(i) - u0);
            for j in 0..ch.ntheta {
                let k = o + ch.index(i, j);
                out[k] += v - u0;
            }
        }
    }
    Ok(out)
}

/// Delaunay parameter of a designated end after modification by `b`.
pub fn modified_end_parameter(m: &GluedManifold, e: &DeficiencyEnd, b: f64) -> f64 {
    let orbit = &m.bodies[e.end.body].orbit;
    if e.degenerate {
        return orbit.eps;
    }
    let maps = EndMaps::new(m.n, e, orbit);
    maps.eps + maps.d(b)
}

// ---------------------------------------------------------------------------
// Discrete system

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Yamabe equation of the chart background.
    Field,
    /// Agreement with the interpolated donor value.
    Fringe,
    /// `v = 0`: holes and outer end rows.
    Fixed,
}

/// Compressed rows.
#[derive(Debug, Clone, Default)]
struct Rows {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Rows {
    fn row(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.ptr[k]..self.ptr[k + 1];
        self.idx[r.clone()].iter().copied().zip(self.val[r].iter().copied())
    }
}

/// Nonlinear discrete Yamabe system `F(U)` on a glued manifold. Field rows
/// are `Δ U − c R(g₀) U + c n(n−1) U^p` with per-node stencil order; fringe
/// rows are `U − ω Σ w U_donor`; fixed rows pin `U` to the background.
#[derive(Debug, Clone)]
pub struct GlueSystem {
    pub n: Dimension,
    pub kinds: Vec<RowKind>,
    /// Discrete volume element of the chart background at each node.
    pub volume: Vec<f64>,
    /// `c R(g₀)` at each node.
    pub curvature_term: Vec<f64>,
    /// Off-centre Laplacian weights (field) or `−ω w` donor rows (fringe).
    rows: Rows,
}

impl GlueSystem {
    pub fn new(m: &GluedManifold) -> Self {
        let n = m.n;
        let len = m.len();
        let mut kinds = Vec::with_capacity(len);
        let mut volume = vec![0.0; len];
        let mut curvature_term = vec![0.0; len];
        let mut rows = Rows {
            ptr: vec![0],
            ..Default::default()
        };
        let mut stencil = Vec::with_capacity(16);
        for c in 0..m.chart_count() {
            let ch = m.chart(c);
            let desc = m.descriptor(c);
            let scale = match desc.kind {
                MetricKind::CylinderNormalized => ((n.f() - 2.0) / n.f()).powf(0.5 * n.f()),
                _ => 1.0,
            };
            let cr = n.coupling() * desc.scalar_curvature();
            let o = m.offsets[c];
            for i in 0..ch.nx {
                for j in 0..ch.ntheta {
                    let k = o + ch.index(i, j);
                    volume[k] = scale * ch.hx() * ch.angular_measure(n, j);
                    curvature_term[k] = cr;
                    match &m.kinds[k] {
                        NodeKind::Field => {
                            stencil.clear();
                            ch.laplacian_stencil_with_order(&desc, i, j, m.orders[k] as usize, &mut stencil);
                            // The centre weight is implied: rows act on differences.
                            for &(l, w) in &stencil {
                                if o + l != k {
                                    rows.idx.push(o + l);
                                    rows.val.push(w);
                                }
                            }
                            kinds.push(RowKind::Field);
                        }
                        NodeKind::Fringe(d) => {
                            for &(l, w) in &d.nodes {
                                rows.idx.push(l);
                                rows.val.push(-d.omega * w);
                            }
                            kinds.push(RowKind::Fringe);
                        }
                        NodeKind::Hole | NodeKind::Dirichlet => kinds.push(RowKind::Fixed),
                    }
                    rows.ptr.push(rows.idx.len());
                }
            }
        }
        GlueSystem {
            n,
            kinds,
            volume,
            curvature_term,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    fn target(&self) -> f64 {
        self.n.sphere_curvature()
    }

    /// Donor combination of a fringe row.
    fn row_dot(&self, k: usize, u: &[f64]) -> f64 {
        self.rows.row(k).map(|(l, w)| w * u[l]).sum()
    }

    /// Discrete Laplacian of a field row as `Σ w (u_l − u_k)`, which avoids
    /// cancelling large multiples of `u_k`.
    fn laplacian(&self, k: usize, u: &[f64]) -> f64 {
        self.rows.row(k).map(|(l, w)| w * (u[l] - u[k])).sum()
    }

    /// `F(U)` with fixed rows measured against `fixed`.
    pub fn residual(&self, u: &[f64], fixed: &[f64]) -> Vec<f64> {
        let c = self.n.coupling();
        let p = self.n.critical_exponent();
        let r = self.target();
        (0..self.len())
            .map(|k| match self.kinds[k] {
                RowKind::Field => self.laplacian(k, u) - self.curvature_term[k] * u[k] + c * r * u[k].powf(p),
                RowKind::Fringe => u[k] + self.row_dot(k, u),
                RowKind::Fixed => u[k] - fixed[k],
            })
            .collect()
    }

    /// `sup |R(U) − n(n−1)|` over field rows, from the same operator.
    pub fn curvature_defect(&self, u: &[f64]) -> f64 {
        let c = self.n.coupling();
        let p = self.n.critical_exponent();
        let f = self.residual(u, u);
        (0..self.len())
            .filter(|&k| self.kinds[k] == RowKind::Field)
            .map(|k| (f[k] / (c * u[k].powf(p))).abs())
            .fold(0.0, f64::max)
    }

    /// `(Σ w² vol x²)^{1/2}` over all rows.
    pub fn weighted_norm(&self, weight: &[f64], x: &[f64]) -> f64 {
        x.iter()
            .zip(weight)
            .zip(&self.volume)
            .map(|((x, w), v)| w * w * v * x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Weighted `H²` proxy: weighted `L²` of `x` plus that of its
    /// Laplacian on field rows.
    pub fn weighted_h2_norm(&self, weight: &[f64], x: &[f64]) -> f64 {
        let lap: Vec<f64> = (0..self.len())
            .map(|k| if self.kinds[k] == RowKind::Field { self.laplacian(k, x) } else { 0.0 })
            .collect();
        (self.weighted_norm(weight, x).powi(2) + self.weighted_norm(weight, &lap).powi(2)).sqrt()
    }

    /// Unweighted discrete inner product.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.volume).map(|((a, b), v)| a * b * v).sum()
    }
}

/// `L_T`: the derivative of [`GlueSystem::residual`] at a factor, with
/// fixed rows acting as the identity.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub kinds: Vec<RowKind>,
    /// Zeroth-order coefficient on field rows.
    pub potential: Vec<f64>,
    rows: Rows,
}

pub fn assemble_linearization(system: &GlueSystem, u: &[f64]) -> Result<LinearOperator> {
    if let Some(k) = (0..u.len()).find(|&k| !(u[k] > 0.0)) {
        return Err(Error::Domain(format!("factor is not positive at node {k}: {}", u[k])));
    }
    let n = system.n;
    let cl = (n.f() + 2.0) / (4.0 * (n.f() - 1.0));
    let q = n.conformal_exponent();
    let r = system.target();
    let potential = (0..u.len())
        .map(|k| match system.kinds[k] {
            RowKind::Field => -system.curvature_term[k] + cl * r * u[k].powf(q),
            _ => 0.0,
        })
        .collect();
    Ok(LinearOperator {
        kinds: system.kinds.clone(),
        potential,
        rows: system.rows.clone(),
    })
}

impl LinearOperator {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// `L x`; fixed rows return `x` itself.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| match self.kinds[k] {
                RowKind::Field => {
                    self.rows.row(k).map(|(l, w)| w * (x[l] - x[k])).sum::<f64>() + self.potential[k] * x[k]
                }
                RowKind::Fringe => x[k] + self.rows.row(k).map(|(l, w)| w * x[l]).sum::<f64>(),
                RowKind::Fixed => x[k],
            })
            .collect()
    }

    /// `Lᵀ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for k in 0..self.len() {
            let field = self.kinds[k] == RowKind::Field;
            for (l, w) in self.rows.row(k) {
                out[l] += w * x[k];
                if field {
                    out[k] -= w * x[k];
                }
            }
            out[k] += if field { self.potential[k] } else { 1.0 } * x[k];
        }
        out
    }

    /// `L x` with fixed rows zeroed: the image of a change of background.
    pub fn apply_free(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.apply(x);
        for (o, k) in out.iter_mut().zip(&self.kinds) {
            if *k == RowKind::Fixed {
                *o = 0.0;
            }
        }
        out
    }

    pub fn to_sparse(&self) -> Result<SparseColMat<usize, f64>> {
        let n = self.len();
        let mut trip = Vec::with_capacity(self.rows.idx.len() + n);
        for k in 0..n {
            let mut diag = if self.kinds[k] == RowKind::Field { self.potential[k] } else { 1.0 };
            for (l, w) in self.rows.row(k) {
                trip.push(Triplet::new(k, l, w));
                if self.kinds[k] == RowKind::Field {
                    diag -= w;
                }
            }
            trip.push(Triplet::new(k, k, diag));
        }
        SparseColMat::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Numeric(format!("sparse assembly: {e:?}")))
    }
}

// ---------------------------------------------------------------------------
// Bordered right inverse

/// Factored `[L_v  L_W]` with the minimal-weighted-norm selection.
///
/// Solutions of `L_v v + L_W c = f` are `v = L_v⁻¹f − V c` with
/// `V = L_v⁻¹ L_W`; the coefficients minimize `‖v‖_{−δ}`, a dense least
/// squares problem in `dim W` unknowns. Its optimality condition places `v`
/// in the range of the weighted adjoint.
pub struct BorderedSolver {
    pub len: usize,
    lu: Lu<usize, f64>,
    /// `L_W` columns.
    pub border: Vec<Vec<f64>>,
    /// `V = L_v⁻¹ L_W`.
    lifted: Vec<Vec<f64>>,
    /// `w² vol` per node.
    pub metric: Vec<f64>,
    /// Orthonormal basis of `D^{1/2} V` and the triangular factor.
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

fn solve_columns(lu: &Lu<usize, f64>, cols: &[Vec<f64>], transpose: bool) -> Vec<Vec<f64>> {
    if cols.is_empty() {
        return Vec::new();
    }
    let n = cols[0].len();
    let mut rhs = Mat::from_fn(n, cols.len(), |i, j| cols[j][i]);
    if transpose {
        lu.solve_transpose_in_place(rhs.as_mut());
    } else {
        lu.solve_in_place(rhs.as_mut());
    }
    (0..cols.len()).map(|j| (0..n).map(|i| rhs[(i, j)]).collect()).collect()
}

impl BorderedSolver {
    pub fn new(l: &LinearOperator, border: Vec<Vec<f64>>, system: &GlueSystem, weight: &[f64]) -> Result<Self> {
        let a = l.to_sparse()?;
        let lu = a.sp_lu().map_err(|e| Error::Numeric(format!("sparse LU failed: {e:?}")))?;
        let lifted = solve_columns(&lu, &border, false);
        let metric: Vec<f64> = weight.iter().zip(&system.volume).map(|(w, v)| w * w * v).collect();
        let sd: Vec<f64> = metric.iter().map(|d| d.sqrt()).collect();
        let mut q: Vec<Vec<f64>> = Vec::new();
        let m = lifted.len();
        let mut r = vec![vec![0.0; m]; m];
        for (j, col) in lifted.iter().enumerate() {
            let mut v: Vec<f64> = col.iter().zip(&sd).map(|(x, s)| x * s).collect();
            let norm0 = dot(&v, &v).sqrt();
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let c = dot(qi, &v);
                    r[i][j] += c;
                    v.iter_mut().zip(qi).for_each(|(x, y)| *x -= c * y);
                }
            }
            let nv = dot(&v, &v).sqrt();
            if !(nv > 1e-12 * norm0) {
                return Err(Error::Numeric(format!(
                    "bordered system is near singular: deficiency direction {j} is dependent (relative size {:.3e}); run the kernel diagnostic",
                    nv / norm0.max(f64::MIN_POSITIVE)
                )));
            }
            r[j][j] = nv;
            v.iter_mut().for_each(|x| *x /= nv);
            q.push(v);
        }
        Ok(BorderedSolver {
            len: l.len(),
            lu,
            border,
            lifted,
            metric,
            q,
            r,
        })
    }

    pub fn dim(&self) -> usize {
        self.border.len()
    }

    /// `L_v⁻¹ f`.
    pub fn solve_plain(&self, f: &[f64]) -> Vec<f64> {
        solve_columns(&self.lu, &[f.to_vec()], false).pop().unwrap()
    }

    /// `L_v⁻ᵀ f`.
    pub fn solve_plain_transpose(&self, f: &[f64]) -> Vec<f64> {
        solve_columns(&self.lu, &[f.to_vec()], true).pop().unwrap()
    }

    /// Minimal-weighted-norm `(v, c)` with `L_v v + L_W c = f`.
    pub fn solve(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v0 = self.solve_plain(f);
        let m = self.dim();
        let rhs: Vec<f64> = (0..m)
            .map(|i| self.q[i].iter().zip(&v0).zip(&self.metric).map(|((q, v), d)| q * v * d.sqrt()).sum())
            .collect();
        let mut c = vec![0.0; m];
        for i in (0..m).rev() {
            let s: f64 = (i + 1..m).map(|j| self.r[i][j] * c[j]).sum();
            c[i] = (rhs[i] - s) / self.r[i][i];
        }
        let mut v = v0;
        for (j, col) in self.lifted.iter().enumerate() {
            v.iter_mut().zip(col).for_each(|(x, y)| *x -= c[j] * y);
        }
        (v, c)
    }

    /// `L_v v + L_W c`, recomputed from the operator.
    pub fn image(&self, l: &LinearOperator, v: &[f64], c: &[f64]) -> Vec<f64> {
        let mut out = l.apply(v);
        for (j, col) in self.border.iter().enumerate() {
            out.iter_mut().zip(col).for_each(|(x, y)| *x += c[j] * y);
        }
        out
    }

    /// Optimality defect: with `λ = L_v⁻ᵀ D v`, the minimal-norm solution has
    /// `L_Wᵀ λ = 0`. Returned relative to `‖L_W‖ ‖λ‖`.
    pub fn adjoint_range_defect(&self, v: &[f64]) -> f64 {
        let dv: Vec<f64> = v.iter().zip(&self.metric).map(|(x, d)| x * d).collect();
        let lam = self.solve_plain_transpose(&dv);
        let nl = dot(&lam, &lam).sqrt();
        self.border
            .iter()
            .map(|b| dot(b, &lam).abs() / (dot(b, b).sqrt() * nl).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L_W`: images of the deficiency basis fields.
pub fn border_columns(m: &GluedManifold, basis: &DeficiencyBasis, l: &LinearOperator) -> Vec<Vec<f64>> {
    (0..basis.dim()).map(|k| l.apply_free(&basis.field(m, k))).collect()
}

/// Solves `L_T(v + w) = f` with `w ∈ W`, minimal weighted norm in `v`.
pub fn solve_bordered(solver: &BorderedSolver, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if f.len() != solver.len || f.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("right-hand side has the wrong length or non-finite entries".into()));
    }
    Ok(solver.solve(f))
}

// ---------------------------------------------------------------------------
// Contraction iteration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    Diverged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖N(B + v)‖_{0,−δ}` at the start of the iteration.
    pub residual: f64,
    /// Weighted size of the update produced by the iteration.
    pub increment: f64,
    /// `increment_k / increment_{k−1}`.
    pub ratio: Option<f64>,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndCoefficients {
    pub end: EndRef,
    pub a: f64,
    pub b: f64,
    /// `τ(a)` and the modified Delaunay parameter `ε + d(b)`.
    pub shift: f64,
    pub eps: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndEstimate {
    pub end: EndRef,
    pub prescribed: f64,
    pub eps_hat: f64,
    /// Spread of the per-row estimates over the fitted period.
    pub width: f64,
    pub cylindrical: bool,
    /// Whether this end carries deficiency coefficients.
    pub deficiency: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub version: String,
    pub gluing: GluingConfig,
    pub solver: SolverConfig,
    pub delta: f64,
    pub nodes: usize,
    pub deficiency_dim: usize,
    pub degenerate_deficiency: bool,
    pub status: SolveStatus,
    pub iterations: Vec<IterationRecord>,
    /// Largest ratio after the burn-in.
    pub contraction_ratio: Option<f64>,
    pub final_residual: f64,
    pub coefficients: Vec<EndCoefficients>,
    /// `sup |R − n(n−1)|` of the final factor.
    pub curvature_defect: f64,
    /// Same for `u_T`, for reference.
    pub initial_curvature_defect: f64,
    pub end_estimates: Vec<EndEstimate>,
    pub kernel_count: Option<usize>,
    /// Relative change of the defect when the ends are doubled.
    pub end_length_sensitivity: Option<f64>,
    pub threads: usize,
}

/// Result of a solve: the report and the fields behind it.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub report: SolveReport,
    pub u_t: Vec<f64>,
    pub error: Vec<f64>,
    pub correction: Vec<f64>,
    pub factor: Vec<f64>,
}

/// Everything a solve needs once the manifold is built.
pub struct Corrector<'a> {
    pub m: &'a GluedManifold,
    pub system: GlueSystem,
    pub basis: DeficiencyBasis,
    pub weight: WeightFunction,
    pub u_t: Vec<f64>,
    pub linear: LinearOperator,
    pub solver: BorderedSolver,
}

impl<'a> Corrector<'a> {
    pub fn new(m: &'a GluedManifold, delta: f64) -> Result<Self> {
        let system = GlueSystem::new(m);
        let basis = deficiency_basis(m)?;
        let weight = weight(m, delta)?;
        let u_t = crate::gluing::approximate_factor(m)?.flatten();
        let linear = assemble_linearization(&system, &u_t)?;
        let border = border_columns(m, &basis, &linear);
        let solver = BorderedSolver::new(&linear, border, &system, &weight.values)?;
        Ok(Corrector {
            m,
            system,
            basis,
            weight,
            u_t,
            linear,
            solver,
        })
    }

    pub fn background(&self, c: &[f64]) -> Result<Vec<f64>> {
        end_modification(self.m, &self.basis, &self.u_t, c)
    }

    /// `F(v, c)`.
    pub fn residual(&self, v: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let b = self.background(c)?;
        let u: Vec<f64> = b.iter().zip(v).map(|(x, y)| x + y).collect();
        Ok(self.system.residual(&u, &b))
    }

    fn norm(&self, x: &[f64]) -> f64 {
        self.system.weighted_norm(&self.weight.values, x)
    }

    pub fn coefficients(&self, c: &[f64]) -> Vec<EndCoefficients> {
        self.basis
            .ends
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let orbit = &self.m.bodies[e.end.body].orbit;
                let maps = EndMaps::new(self.m.n, e, orbit);
                let (a, b) = (c[2 * k], c[2 * k + 1]);
                EndCoefficients {
                    end: e.end,
                    a,
                    b,
                    shift: if e.degenerate { 0.0 } else { maps.tau(a) },
                    eps: modified_end_parameter(self.m, e, b),
                    degenerate: e.degenerate,
                }
            })
            .collect()
    }
}

/// Positive factor `B(c) + v`, or `None` if positivity or the trust region
/// fails.
fn total_factor(cr: &Corrector, v: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    let b = cr.background(c).ok()?;
    let u: Vec<f64> = b.iter().zip(v).map(|(x, y)| x + y).collect();
    u.iter().all(|x| *x > 0.0).then_some(u)
}

/// Runs `X_{k+1} = −G(F(X_k) − L X_k) = X_k − G F(X_k)` from `X_0 = 0`. In Newton mode the
/// operator is refactored at every iterate.
pub fn contraction_iterate(cr: &mut Corrector, config: &SolverConfig) -> Result<(SolveStatus, Vec<IterationRecord>, Vec<f64>, Vec<f64>)> {
    let len = cr.system.len();
    let dim = cr.basis.dim();
    let mut v = vec![0.0; len];
    let mut c = vec![0.0; dim];
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    for it in 0..config.max_iterations {
        let f = cr.residual(&v, &c)?;
        let res = cr.norm(&f);
        if res <= config.residual_target {
            records.push(IterationRecord {
                iteration: it,
                residual: res,
                increment: 0.0,
                ratio: None,
                damping: 1.0,
            });
            status = SolveStatus::Converged;
            break;
        }
        let (dv, dc) = match config.mode {
            SolverMode::FixedPoint => {
                // Iterates stay in the range of G, where G L is the identity,
                // so −G(F(X) − L X) = X − G F(X). The increment form keeps
                // the linear solve error proportional to the residual.
                let neg: Vec<f64> = f.iter().map(|x| -x).collect();
                cr.solver.solve(&neg)
            }
            SolverMode::NewtonAccelerated => {
                if it > 0 {
                    let b = cr.background(&c)?;
                    let u: Vec<f64> = b.iter().zip(&v).map(|(x, y)| x + y).collect();
                    cr.linear = assemble_linearization(&cr.system, &u)?;
                    let border = border_columns(cr.m, &cr.basis, &cr.linear);
                    cr.solver = BorderedSolver::new(&cr.linear, border, &cr.system, &cr.weight.values)?;
                }
                let neg: Vec<f64> = f.iter().map(|x| -x).collect();
                cr.solver.solve(&neg)
            }
        };
        let mut damping = 1.0;
        let (nv, nc) = loop {
            let nv: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + damping * b).collect();
            let nc: Vec<f64> = c.iter().zip(&dc).map(|(a, b)| a + damping * b).collect();
            if total_factor(cr, &nv, &nc).is_some() {
                break (nv, nc);
            }
            damping *= 0.5;
            if damping < 1.0 / 32.0 {
                return Err(Error::Numeric(format!(
                    "iteration {it}: the factor loses positivity or leaves the trust region even after damping"
                )));
            }
        };
        let increment = damping * (cr.norm(&dv).powi(2) + dot(&dc, &dc)).sqrt();
        let ratio = records.last().map(|r| increment / r.increment);
        records.push(IterationRecord {
            iteration: it,
            residual: res,
            increment,
            ratio,
            damping,
        });
        v = nv;
        c = nc;
        let window = config.contraction_window;
        if records.len() > window {
            let tail = &records[records.len() - window..];
            if tail.iter().all(|r| r.ratio.is_some_and(|q| q >= 1.0)) {
                status = SolveStatus::Diverged;
                break;
            }
        }
    }
    Ok((status, records, v, c))
}

/// Largest ratio after the burn-in, over iterations that moved.
pub fn post_burn_in_ratio(records: &[IterationRecord], burn_in: usize) -> Option<f64> {
    records
        .iter()
        .filter(|r| r.iteration >= burn_in && r.increment > 0.0)
        .filter_map(|r| r.ratio)
        .reduce(f64::max)
}

/// Builds, solves and certifies one configuration. `certify` adds the
/// near-kernel count at the solution and the end-length sensitivity.
pub fn contraction_solve(config: &GluingConfig, solver: &SolverConfig, certify: bool) -> Result<SolveOutcome> {
    solver.validate()?;
    let gluing = solver.apply(config);
    let m = crate::gluing::build_connected_sum(&gluing)?;
    let delta = default_delta(&m, solver)?;
    let mut cr = Corrector::new(&m, delta)?;
    let (status, iterations, v, c) = contraction_iterate(&mut cr, solver)?;
    let b = cr.background(&c)?;
    let factor: Vec<f64> = b.iter().zip(&v).map(|(x, y)| x + y).collect();
    let final_residual = cr.norm(&cr.residual(&v, &c)?);
    let error = cr.system.residual(&cr.u_t, &cr.u_t);
    let curvature_defect = cr.system.curvature_defect(&factor);
    let initial_curvature_defect = cr.system.curvature_defect(&cr.u_t);
    let designated: Vec<EndRef> = cr.basis.ends.iter().map(|e| e.end).collect();
    let mut end_estimates = Vec::new();
    for end in m.ends() {
        let mut est = end_parameter_estimate(&m, &factor, end)?;
        est.deficiency = designated.contains(&end);
        end_estimates.push(est);
    }
    let mut report = SolveReport {
        version: crate::VERSION.to_string(),
        gluing: gluing.clone(),
        solver: solver.clone(),
        delta,
        nodes: m.len(),
        deficiency_dim: cr.basis.dim(),
        degenerate_deficiency: cr.basis.any_degenerate(),
        status,
        contraction_ratio: post_burn_in_ratio(&iterations, solver.burn_in),
        iterations,
        final_residual,
        coefficients: cr.coefficients(&c),
        curvature_defect,
        initial_curvature_defect,
        end_estimates,
        kernel_count: None,
        end_length_sensitivity: None,
        threads: rayon_threads(),
    };
    if certify && status == SolveStatus::Converged {
        let l = assemble_linearization(&cr.system, &factor)?;
        let diag = kernel_diagnostic(&m, &cr.system, &l, &cr.weight.values, KernelOptions::default())?;
        report.kernel_count = Some(diag.count);
        let mut longer = solver.clone();
        longer.end_periods = Some(2.0 * gluing.grids.end_periods);
        let other = contraction_solve(config, &longer, false)?;
        report.end_length_sensitivity = Some((other.report.curvature_defect - curvature_defect).abs() / curvature_defect);
    }
    Ok(SolveOutcome {
        report,
        u_t: cr.u_t.clone(),
        error,
        correction: v,
        factor,
    })
}

/// Sets the thread count of the sparse and dense kernels; `0` keeps the
/// library default. Results are deterministic for a fixed count.
pub fn set_threads(threads: usize) {
    match threads {
        0 => {}
        1 => faer::set_global_parallelism(faer::Par::Seq),
        t => faer::set_global_parallelism(faer::Par::rayon(t)),
    }
}

pub fn rayon_threads() -> usize {
    match faer::get_global_parallelism() {
        faer::Par::Seq => 1,
        faer::Par::Rayon(n) => n.get(),
    }
}

// ---------------------------------------------------------------------------
// End parameters

/// Fits the Hamiltonian energy of the angular average of `factor` over the
/// last full period of an end and inverts it for the Delaunay parameter.
pub fn end_parameter_estimate(m: &GluedManifold, factor: &[f64], end: EndRef) -> Result<EndEstimate> {
    let n = m.n;
    let body = &m.bodies[end.body];
    let ch = &body.chart;
    let o = m.offsets[end.body];
    let h = ch.hx();
    let rows = (body.period() / h).ceil() as usize;
    let (lo, hi) = match end.side {
        EndSide::Plus => (ch.nx.saturating_sub(4 + rows), ch.nx - 4),
        EndSide::Minus => (3, 3 + rows),
    };
    let past = |i: usize| end_coordinate(m, end.body, ch.x(i));
    if lo < 3 || hi + 3 >= ch.nx || past(lo).min(past(hi)) <= 0.0 {
        return Err(Error::Domain(format!(
            "end {:?} of body {} is too short for one period",
            end.side, end.body
        )));
    }
    let total: f64 = (0..ch.ntheta).map(|j| ch.angular_measure(n, j)).sum();
    let profile: Vec<f64> = (0..ch.nx)
        .map(|i| (0..ch.ntheta).map(|j| ch.angular_measure(n, j) * factor[o + ch.index(i, j)]).sum::<f64>() / total)
        .collect();
    let w = [-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0];
    let ubar = fowler::cylinder_constant(n);
    let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut energies = Vec::with_capacity(hi - lo + 1);
    for i in lo..=hi {
        let up: f64 = (0..7).map(|k| w[k] * profile[i + k - 3]).sum::<f64>() / (60.0 * h);
        energies.push(fowler::hamiltonian(n, profile[i], up)?);
        umin = umin.min(profile[i]);
        umax = umax.max(profile[i]);
    }
    let prescribed = body.orbit.eps;
    if umax - umin <= 1e-6 * ubar && (umax - ubar).abs().max((umin - ubar).abs()) <= 1e-4 * ubar {
        return Ok(EndEstimate {
            end,
            prescribed,
            eps_hat: ubar,
            width: umax - umin,
            cylindrical: true,
            deficiency: false,
        });
    }
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    let eps_hat = fowler::eps_from_energy(n, mean)?;
    let mut width: f64 = 0.0;
    for e in &energies {
        width = width.max((fowler::eps_from_energy(n, *e)? - eps_hat).abs());
    }
    Ok(EndEstimate {
        end,
        prescribed,
        eps_hat,
        width,
        cylindrical: false,
        deficiency: false,
    })
}

// ---------------------------------------------------------------------------
// Near kernel and deficiency pairing

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub block: usize,
    pub iterations: usize,
    /// Singular values below `window · scale` count as kernel.
    pub window: f64,
    pub seed: u64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            block: 4,
            iterations: 30,
            window: 1e-6,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostic {
    pub count: usize,
    /// Smallest singular values of the weighted operator, ascending.
    pub singular_values: Vec<f64>,
    /// Largest zeroth-order coefficient of the operator.
    pub scale: f64,
    /// `‖L φ‖_{−δ} / ‖φ‖_{−δ}` of the returned vectors.
    pub rayleigh: Vec<f64>,
    /// Singular vectors mapped back to node values, unit weighted norm.
    #[serde(skip)]
    pub vectors: Vec<Vec<f64>>,
}

fn orthonormalize(block: &mut [Vec<f64>]) {
    for j in 0..block.len() {
        for _ in 0..2 {
            for i in 0..j {
                let c = dot(&block[i], &block[j]);
                let (a, b) = block.split_at_mut(j);
                b[0].iter_mut().zip(&a[i]).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nv = dot(&block[j], &block[j]).sqrt();
        block[j].iter_mut().for_each(|x| *x /= nv);
    }
}

/// Rows of the far-boundary slope: the `sin^{n-2}`-weighted mean of
/// `∂_t φ` on the outer row of every end, in node coordinates.
fn end_slope_rows(m: &GluedManifold, weight: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let n = m.n;
    let mut rows = Vec::new();
    for (b, body) in m.bodies.iter().enumerate() {
        let ch = &body.chart;
        let o = m.offsets[b];
        let area: f64 = (0..ch.ntheta).map(|j| ch.angular_measure(n, j)).sum();
        for (edge, inner) in [(0, 1), (ch.nx - 1, ch.nx - 2)] {
            let scale = weight[o + ch.index(edge, 0)] * area.sqrt() / (area * ch.hx());
            let mut row = Vec::with_capacity(2 * ch.ntheta);
            for j in 0..ch.ntheta {
                let mu = ch.angular_measure(n, j) * scale;
                row.push((o + ch.index(edge, j), mu));
                row.push((o + ch.index(inner, j), -mu));
            }
            rows.push(row);
        }
    }
    rows
}

/// Smallest singular values of the weighted operator on the decaying space.
///
/// The operator is `S L S⁻¹`, `S = (w² vol)^{1/2}`, stacked with one row per
/// end holding the weighted far-boundary slope. Decaying fields have no
/// slope at infinity; without these rows the Dirichlet truncation admits
/// `j = 0` Jacobi fields vanishing at `L_end` as spurious near-kernel, with
/// ratio `O(e^{−δ L_end})`. Inverse subspace iteration on the normal
/// operator uses the factored `L` and a Woodbury correction for the extra
/// rows, followed by Rayleigh-Ritz.
///
/// `scale` is the largest zeroth-order coefficient of `L`, the natural size
/// of the operator on unit-length features; the count uses
/// `window · scale`.
pub fn kernel_diagnostic(
    m: &GluedManifold,
    system: &GlueSystem,
    l: &LinearOperator,
    weight: &[f64],
    opts: KernelOptions,
) -> Result<KernelDiagnostic> {
    use rand::{Rng, SeedableRng};
    let len = l.len();
    let s: Vec<f64> = weight.iter().zip(&system.volume).map(|(w, v)| w * v.sqrt()).collect();
    let lu = l.to_sparse()?.sp_lu().map_err(|e| Error::Numeric(format!("sparse LU failed: {e:?}")))?;
    let slope = end_slope_rows(m, weight);
    // Extra rows acting on weighted variables x = S φ.
    let extra: Vec<Vec<(usize, f64)>> = slope.iter().map(|r| r.iter().map(|&(k, c)| (k, c / s[k])).collect()).collect();
    let extra_apply = |x: &[f64]| -> Vec<f64> { extra.iter().map(|r| r.iter().map(|&(k, c)| c * x[k]).sum()).collect() };
    let weighted = |x: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a / b).collect();
        l.apply(&y).iter().zip(&s).map(|(a, b)| a * b).collect()
    };
    // L̃⁻ᵀ and L̃⁻¹ on blocks.
    let inv_t = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let scaled: Vec<Vec<f64>> = cols.iter().map(|b| b.iter().zip(&s).map(|(a, w)| a * w).collect()).collect();
        solve_columns(&lu, &scaled, true)
            .into_iter()
            .map(|b| b.iter().zip(&s).map(|(a, w)| a / w).collect())
            .collect()
    };
    let inv = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let scaled: Vec<Vec<f64>> = cols.iter().map(|b| b.iter().zip(&s).map(|(a, w)| a / w).collect()).collect();
        solve_columns(&lu, &scaled, false)
            .into_iter()
            .map(|b| b.iter().zip(&s).map(|(a, w)| a * w).collect())
            .collect()
    };
    // Cᵀ = L̃⁻ᵀ Eᵀ and the small capacitance factor of I + C Cᵀ.
    let e_cols: Vec<Vec<f64>> = extra
        .iter()
        .map(|r| {
            let mut c = vec![0.0; len];
            for &(k, v) in r {
                c[k] += v;
            }
            c
        })
        .collect();
    let ct = inv_t(&e_cols);
    let ne = ct.len();
    let cap = Mat::from_fn(ne, ne, |i, j| dot(&ct[i], &ct[j]) + if i == j { 1.0 } else { 0.0 });
    let cap_lu = cap.partial_piv_lu();
    let project = |z: &mut Vec<f64>| {
        if ne == 0 {
            return;
        }
        let cz = Mat::from_fn(ne, 1, |i, _| dot(&ct[i], z));
        let y = cap_lu.solve(&cz);
        for (i, c) in ct.iter().enumerate() {
            let coef = y[(i, 0)];
            z.iter_mut().zip(c).for_each(|(a, b)| *a -= coef * b);
        }
    };
    let scale = (0..len)
        .filter(|&k| l.kinds[k] == RowKind::Field)
        .map(|k| l.potential[k].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let k = opts.block.min(len);
    let mut block: Vec<Vec<f64>> = (0..k).map(|_| (0..len).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
    orthonormalize(&mut block);
    for _ in 0..opts.iterations {
        let mut z = inv_t(&block);
        z.iter_mut().for_each(&project);
        block = inv(&z);
        orthonormalize(&mut block);
    }
    let images: Vec<Vec<f64>> = block
        .iter()
        .map(|b| {
            let mut img = weighted(b);
            img.extend(extra_apply(b));
            img
        })
        .collect();
    let gram = Mat::from_fn(k, k, |i, j| dot(&images[i], &images[j]));
    let eig = gram
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let values: Vec<f64> = eig.S().column_vector().iter().map(|v| v.max(0.0).sqrt()).collect();
    let u = eig.U();
    let mut vectors = Vec::with_capacity(k);
    let mut rayleigh = Vec::with_capacity(k);
    for c in 0..k {
        let mut ritz = vec![0.0; len];
        for (i, b) in block.iter().enumerate() {
            let coef = u[(i, c)];
            ritz.iter_mut().zip(b).for_each(|(x, y)| *x += coef * y);
        }
        let mut img = weighted(&ritz);
        img.extend(extra_apply(&ritz));
        rayleigh.push((dot(&img, &img) / dot(&ritz, &ritz)).sqrt());
        vectors.push(ritz.iter().zip(&s).map(|(a, w)| a / w).collect());
    }
    let count = values.iter().filter(|v| **v <= opts.window * scale).count();
    Ok(KernelDiagnostic {
        count,
        singular_values: values,
        scale,
        rayleigh,
        vectors,
    })
}

/// Kernel count of `Δ + n` on the round sphere (restrictions of linear
/// functions), from the zonal mode reduction. The window is relative to the
/// potential `n`, as in [`kernel_diagnostic`].
pub fn round_sphere_kernel_count(n: Dimension) -> usize {
    modeline::sphere_kernel_count(n, 3, 1600, 1e-6 * n.f()).0
}

/// Number of Jacobi fields on one Delaunay cylinder, modes `j ≤ 1`, growing
/// at most like `e^{rate·t}`.
pub fn temperate_count(orbit: &DelaunayOrbit, rate: f64) -> Result<usize> {
    modeline::temperate_solution_count(orbit, 1, rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    /// `M[k][w] = ∫ (L w) φ_k`.
    pub matrix: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Smallest over largest singular value; one for an empty matrix.
    pub normalized_min: f64,
}

fn pairing_from(matrix: Vec<Vec<f64>>) -> Result<Pairing> {
    if matrix.is_empty() || matrix[0].is_empty() {
        return Ok(Pairing {
            matrix,
            singular_values: Vec::new(),
            normalized_min: 1.0,
        });
    }
    let a = Mat::from_fn(matrix.len(), matrix[0].len(), |i, j| matrix[i][j]);
    let sv = a.singular_values().map_err(|e| Error::Numeric(format!("SVD failed: {e:?}")))?;
    let big = sv.first().copied().unwrap_or(0.0);
    let small = sv.last().copied().unwrap_or(0.0);
    Ok(Pairing {
        matrix,
        normalized_min: if big > 0.0 { small / big } else { 0.0 },
        singular_values: sv,
    })
}

/// Pairing of deficiency images `L w` against near-kernel fields.
pub fn deficiency_pairing(system: &GlueSystem, kernel: &[Vec<f64>], images: &[Vec<f64>]) -> Result<Pairing> {
    let matrix = kernel.iter().map(|k| images.iter().map(|w| system.inner(w, k)).collect()).collect();
    pairing_from(matrix)
}

/// Uncut Jacobi fields `φ_0^±` of each designated body, as node vectors on
/// that body: the temperate directions the deficiency space must pair with.
pub fn designated_jacobi_fields(m: &GluedManifold, basis: &DeficiencyBasis) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for e in &basis.ends {
        let ch = &m.bodies[e.end.body].chart;
        let o = m.offsets[e.end.body];
        for phi in &e.phi {
            let mut f = vec![0.0; m.len()];
            for i in 0..ch.nx {
                for j in 0..ch.ntheta {
                    f[o + ch.index(i, j)] = phi[i];
                }
            }
            out.push(f);
        }
    }
    out
}

/// One-dimensional pairing on an unglued Delaunay end:
/// `M[k][l] = ∫ (χ''φ_l + 2χ'φ_l') φ_k dt` with the unit-sup fields.
pub fn summand_pairing(orbit: &DelaunayOrbit, cutoff_width: f64) -> Result<Pairing> {
    let len = 2.0 * cutoff_width;
    let steps = 20000;
    let h = len / steps as f64;
    let p = orbit.period;
    let per = 2048;
    let (fields, derivs): (Vec<Box<dyn Fn(f64) -> f64>>, Vec<Box<dyn Fn(f64) -> f64>>) = if orbit.degenerate {
        let w = (orbit.n.f() - 2.0).sqrt();
        (
            vec![Box::new(move |t: f64| (w * t).sin()), Box::new(move |t: f64| (w * t).cos())],
            vec![Box::new(move |t: f64| w * (w * t).cos()), Box::new(move |t: f64| -w * (w * t).sin())],
        )
    } else {
        let su = (0..=per).map(|k| orbit.up(p * k as f64 / per as f64).abs()).fold(0.0, f64::max);
        let pf = std::rc::Rc::new(ParameterField::new(orbit, len + p + 1.0)?);
        let sp = (0..=per).map(|k| pf.eval(p * k as f64 / per as f64).abs()).fold(0.0, f64::max);
        let (o1, o2) = (orbit.clone(), orbit.clone());
        let (p1, p2) = (pf.clone(), pf);
        (
            vec![Box::new(move |t: f64| -o1.up(t) / su), Box::new(move |t: f64| p1.eval(t) / sp)],
            vec![Box::new(move |t: f64| -o2.upp(t) / su), Box::new(move |t: f64| p2.eval_with_derivative(t).1 / sp)],
        )
    };
    let mut matrix = vec![vec![0.0; 2]; 2];
    for step in 0..=steps {
        let t = step as f64 * h;
        let x = t / len;
        let chi1 = crate::gluing::smoothstep_d1(x) / len;
        let chi2 = crate::gluing::smoothstep_d2(x) / (len * len);
        let wq = if step == 0 || step == steps { 0.5 * h } else { h };
        for k in 0..2 {
            for l in 0..2 {
                matrix[k][l] += wq * (chi2 * fields[l](t) + 2.0 * chi1 * derivs[l](t)) * fields[k](t);
            }
        }
    }
    pairing_from(matrix)
}

// ---------------------------------------------------------------------------
// Uniformity scans

/// Compactly supported probes: a `C²` bump of half-width 1 in `x` times a
/// random `cos kθ` profile (`k ≤ 2`), centred near a body gluing point
/// (2.5 to either side) or near a neck midpoint. Anchors are fixed relative
/// to the geometry, so probe families are comparable across `T`. Entries
/// off field rows are zero.
pub fn probe_fields(m: &GluedManifold, system: &GlueSystem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut anchors: Vec<(usize, f64)> = Vec::new();
    for (b, body) in m.bodies.iter().enumerate() {
        for p in &body.points {
            anchors.push((b, p.t - 2.5));
            anchors.push((b, p.t + 2.5));
        }
        if body.points.is_empty() {
            anchors.push((b, 0.5 * (body.core.0 + body.core.1)));
        }
    }
    for (k, neck) in m.necks.iter().enumerate() {
        anchors.push((m.bodies.len() + k, neck.midpoint()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|p| {
            let (c, x0) = anchors[p % anchors.len()];
            let centre = x0 + rng.gen_range(-0.5..0.5);
            let coef: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let ch = m.chart(c);
            let o = m.offsets[c];
            let mut f = vec![0.0; m.len()];
            for i in 0..ch.nx {
                let r = (ch.x(i) - centre).abs();
                if r >= 1.0 {
                    continue;
                }
                let bump = 1.0 - smoothstep(r);
                for j in 0..ch.ntheta {
                    let k = o + ch.index(i, j);
                    if system.kinds[k] == RowKind::Field {
                        let th = ch.theta(j);
                        f[k] = bump * (coef[0] + coef[1] * th.cos() + coef[2] * (2.0 * th).cos());
                    }
                }
            }
            f
        })
        .collect()
}

/// `max ‖(v, c)‖ / ‖f‖_{0,−δ}` over probe right-hand sides, with
/// `‖(v, c)‖² = ‖v‖²_{2,−δ} + |c|²`: a lower estimate of the norm of the
/// bordered right inverse.
pub fn right_inverse_norm(cr: &Corrector, probes: &[Vec<f64>]) -> f64 {
    let w = &cr.weight.values;
    probes
        .iter()
        .map(|f| {
            let (v, c) = cr.solver.solve(f);
            let num = (cr.system.weighted_h2_norm(w, &v).powi(2) + dot(&c, &c)).sqrt();
            num / cr.system.weighted_norm(w, f)
        })
        .fold(0.0, f64::max)
}

/// `max ‖φ‖_{2,−δ} / ‖L φ‖_{0,−δ}` over probe fields: the constant of the
/// injectivity estimate seen by compactly supported fields.
pub fn nondegeneracy_constant(cr: &Corrector, probes: &[Vec<f64>]) -> f64 {
    let w = &cr.weight.values;
    probes
        .iter()
        .map(|phi| cr.system.weighted_h2_norm(w, phi) / cr.system.weighted_norm(w, &cr.linear.apply_free(phi)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    #[serde(rename = "T")]
    pub t: Option<f64>,
    pub delta: f64,
    pub nodes: usize,
    /// Bordered right-inverse estimate.
    pub inverse: f64,
    /// Injectivity constant estimate.
    pub injectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormScan {
    pub samples: Vec<NormSample>,
    /// `inverse(T_last) / inverse(T_first)`.
    pub growth: f64,
    /// `max / min` of the inverse estimates.
    pub inverse_spread: f64,
    /// `max / min` of the injectivity estimates.
    pub injectivity_spread: f64,
    /// `growth ≤ 1.5`.
    pub plateau: bool,
}

fn spread(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = xs.clone().fold(0.0, f64::max);
    let lo = xs.fold(f64::INFINITY, f64::min);
    hi / lo
}

/// Norm estimates of the bordered inverse and the injectivity constant for
/// each neck parameter in `t_list` (applied to every junction). A config
/// without junctions yields one sample.
pub fn right_inverse_norm_scan(config: &GluingConfig, t_list: &[f64], solver: &SolverConfig) -> Result<NormScan> {
    solver.validate()?;
    let configs: Vec<(Option<f64>, GluingConfig)> = if config.neck_parameters.is_empty() {
        vec![(None, solver.apply(config))]
    } else {
        if t_list.is_empty() {
            return Err(Error::Config("the norm scan needs at least one T".into()));
        }
        t_list
            .iter()
            .map(|&t| {
                let c = config.with_neck_parameters(&vec![t; config.neck_parameters.len()]);
                (Some(t), solver.apply(&c))
            })
            .collect()
    };
    let mut samples = Vec::with_capacity(configs.len());
    for (t, c) in configs {
        c.validate()?;
        let m = crate::gluing::build_connected_sum(&c)?;
        let delta = default_delta(&m, solver)?;
        let cr = Corrector::new(&m, delta)?;
        let probes = probe_fields(&m, &cr.system, solver.probes, solver.seed);
        samples.push(NormSample {
            t,
            delta,
            nodes: m.len(),
            inverse: right_inverse_norm(&cr, &probes),
            injectivity: nondegeneracy_constant(&cr, &probes),
        });
    }
    let growth = samples.last().unwrap().inverse / samples[0].inverse;
    Ok(NormScan {
        growth,
        inverse_spread: spread(samples.iter().map(|s| s.inverse)),
        injectivity_spread: spread(samples.iter().map(|s| s.injectivity)),
        plateau: growth <= 1.5,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Chain schedule

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrial {
    pub junction: usize,
    #[serde(rename = "T")]
    pub t: f64,
    pub correction: f64,
    pub bound: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    #[serde(rename = "T")]
    pub t_list: Vec<f64>,
    /// Accepted correction per junction on the first-body window.
    pub corrections: Vec<f64>,
    pub bounds: Vec<f64>,
    pub trials: Vec<ScheduleTrial>,
    /// Report of the full chain at the accepted parameters.
    pub report: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOptions {
    /// First candidate for `T_1`.
    pub t_start: f64,
    /// Increment between candidates; also the minimal gap `T_{k+1} − T_k`.
    pub t_step: f64,
    pub t_max: f64,
    /// The window is the first body's nodes with `t` in
    /// `[p − window.1, p − window.0]` for its gluing point `p`.
    pub window: (f64, f64),
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            t_start: 8.0,
            t_step: 2.0,
            t_max: 24.0,
            window: (1.5, 5.0),
        }
    }
}

/// `sup |u − u_prev|` over the first-body window. The first body's chart
/// does not depend on later junctions, so the comparison is node by node.
fn window_correction(m: &GluedManifold, factor: &[f64], previous: Option<&[f64]>, window: (f64, f64)) -> f64 {
    let body = &m.bodies[0];
    let p = body.points[0].t;
    let ch = &body.chart;
    let o = m.offsets[0];
    let mut sup: f64 = 0.0;
    for i in 0..ch.nx {
        let t = ch.x(i);
        if t < p - window.1 || t > p - window.0 {
            continue;
        }
        for j in 0..ch.ntheta {
            let k = o + ch.index(i, j);
            let reference = previous.map_or_else(|| body.orbit.u(t), |p| p[k]);
            sup = sup.max((factor[k] - reference).abs());
        }
    }
    sup
}

/// Chooses increasing `T_k` junction by junction so that adding summand
/// `k + 1` moves the solved factor on a fixed window of the first body by
/// at most `2^{−k−2}`. The reference for `k = 1` is the unglued first
/// summand.
pub fn chain_schedule(
    n: usize,
    summands: &[(f64, f64)],
    solver: &SolverConfig,
    options: &ScheduleOptions,
) -> Result<ScheduleResult> {
    if summands.len() < 2 {
        return Err(Error::Config("a chain needs at least two summands".into()));
    }
    if !(options.t_step > 0.0 && options.t_max >= options.t_start && options.window.1 > options.window.0) {
        return Err(Error::Config(format!("invalid schedule options {options:?}")));
    }
    // Before the first junction the reference is the unglued summand.
    let mut previous: Option<Vec<f64>> = None;
    let mut t_list: Vec<f64> = Vec::new();
    let mut corrections = Vec::new();
    let mut bounds = Vec::new();
    let mut trials = Vec::new();
    let mut last_report = None;
    for k in 1..summands.len() {
        let bound = 2f64.powi(-(k as i32) - 2);
        let mut t = t_list.last().map_or(options.t_start, |p| p + options.t_step);
        let accepted = loop {
            if t > options.t_max {
                return Err(Error::Numeric(format!(
                    "junction {k}: no T ≤ {} brings the first-body correction below {bound}",
                    options.t_max
                )));
            }
            let mut ts = t_list.clone();
            ts.push(t);
            let c = chain_config(n, &summands[..=k], &ts)?;
            let out = contraction_solve(&c, solver, false)?;
            let m = crate::gluing::build_connected_sum(&solver.apply(&c))?;
            let correction = window_correction(&m, &out.factor, previous.as_deref(), options.window);
            let status = out.report.status;
            trials.push(ScheduleTrial {
                junction: k,
                t,
                correction,
                bound,
                status,
            });
            if status == SolveStatus::Converged && correction <= bound {
                break (out, correction, m.bodies[0].chart.len());
            }
            t += options.t_step;
        };
        let (out, correction, first_len) = accepted;
        t_list.push(t);
        corrections.push(correction);
        bounds.push(bound);
        previous = Some(out.factor[..first_len].to_vec());
        last_report = Some(out.report);
    }
    Ok(ScheduleResult {
        t_list,
        corrections,
        bounds,
        trials,
        report: last_report.unwrap(),
    })
}
