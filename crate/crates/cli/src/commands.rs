//! Subcommand bodies. Each returns the process exit code on success.

use std::io::Write;

use cpsc_core::conformal::delaunay_recovery_error;
use cpsc_core::corrector::{
    chain_schedule, contraction_solve, right_inverse_norm_scan, NormScan, SolveOutcome, SolveReport, SolveStatus,
};
use cpsc_core::fowler::{cylinder_constant, linear_period, DelaunayOrbit, Dimension, OrbitHeader};
use cpsc_core::gluing::{
    approximate_factor, build_connected_sum, error_decay_scan, error_field, midneck_values, support_split, DecayFit,
    GluingConfig,
};
use cpsc_core::modeline::{self, FloquetRecord, DEFAULT_PER_PERIOD};
use cpsc_core::{Error, Result};
use serde::Serialize;

use crate::config::{OrbitRequest, RunConfig};
use crate::output::Output;

/// Resolved orbit parameters echoed into reports.
#[derive(Debug, Clone, Serialize)]
pub struct OrbitParams {
    pub n: usize,
    pub eps: f64,
    pub jmax: usize,
    pub j: usize,
    pub periods: usize,
}

pub fn resolve_orbit(req: &OrbitRequest) -> Result<OrbitParams> {
    let n = req.n.ok_or_else(|| Error::Config("missing n (flag --n or config key \"n\")".into()))?;
    let eps = req.eps.ok_or_else(|| Error::Config("missing eps (flag --eps or config key \"eps\")".into()))?;
    Dimension::new(n).map_err(|e| Error::Config(e.to_string()))?;
    let periods = req.periods.unwrap_or(4);
    if periods == 0 {
        return Err(Error::Config("periods must be at least 1".into()));
    }
    Ok(OrbitParams {
        n,
        eps,
        jmax: req.jmax.unwrap_or(2),
        j: req.j.unwrap_or(1),
        periods,
    })
}

fn orbit_of(p: &OrbitParams) -> Result<DelaunayOrbit> {
    DelaunayOrbit::new(Dimension::new(p.n)?, p.eps)
}

#[derive(Debug, Serialize)]
struct DelaunaySummary {
    #[serde(flatten)]
    header: OrbitHeader,
    ubar: f64,
    linear_period: f64,
    samples: usize,
}

pub fn delaunay(p: &OrbitParams, out: &Output) -> Result<i32> {
    let orbit = orbit_of(p)?;
    out.with("orbit.csv", |w| orbit.write_csv(w))?;
    let n = orbit.n;
    let summary = DelaunaySummary {
        header: orbit.header(),
        ubar: cylinder_constant(n),
        linear_period: linear_period(n),
        samples: orbit.samples.len(),
    };
    let text = out.json("delaunay.json", "delaunay", p, &summary)?;
    println!("{text}");
    Ok(0)
}

#[derive(Debug, Serialize)]
struct ModeRow {
    j: usize,
    multiplicity: usize,
    /// Growth per period.
    delta: f64,
    /// Growth per unit `t`.
    rate: f64,
    trace: f64,
    oscillatory: bool,
    /// `jordan` when the monodromy trace is 2, else `oscillatory` or
    /// `hyperbolic`.
    class: String,
    /// `|δ − P| / P` on the first mode, where `δ_1 = P`.
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_minus_period: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ModesSummary {
    period: f64,
    degenerate: bool,
    rows: Vec<ModeRow>,
    fields: Vec<String>,
}

pub fn modes(p: &OrbitParams, out: &Output) -> Result<i32> {
    let orbit = orbit_of(p)?;
    let n = orbit.n;
    let mut rows = Vec::new();
    for j in 0..=p.jmax {
        let (delta, trace, oscillatory) = if orbit.degenerate {
            let root = modeline::indicial_roots_cylinder(n, j)[0];
            (root.re * orbit.period, 2.0 * (root.im * orbit.period).cos(), root.re == 0.0)
        } else {
            let r = modeline::floquet(&orbit, j)?;
            (r.delta, r.trace, r.oscillatory)
        };
        let class = if (trace - 2.0).abs() <= modeline::FLOQUET_TOL {
            "jordan"
        } else if oscillatory {
            "oscillatory"
        } else {
            "hyperbolic"
        };
        rows.push(ModeRow {
            j,
            multiplicity: modeline::harmonic_multiplicity(n, j),
            delta,
            rate: delta / orbit.period,
            trace,
            oscillatory,
            class: class.into(),
            delta_minus_period: (j == 1).then(|| (delta - orbit.period).abs() / orbit.period),
        });
    }
    let per = DEFAULT_PER_PERIOD / 8;
    let mut fields = Vec::new();
    let translation = modeline::jacobi_translation(&orbit, p.periods, per)?;
    let parameter = modeline::jacobi_parameter(&orbit, p.periods, per)?;
    for (name, f) in [("jacobi_translation.csv", &translation), ("jacobi_parameter.csv", &parameter)] {
        out.with(name, |w| f.write_csv(w))?;
        fields.push(name.to_string());
    }
    if p.jmax >= 1 {
        for (sign, name) in [(1, "jacobi_explicit_plus.csv"), (-1, "jacobi_explicit_minus.csv")] {
            let f = modeline::jacobi_explicit(&orbit, sign, 0.0, p.periods, per)?;
            out.with(name, |w| f.write_csv(w))?;
            fields.push(name.to_string());
        }
    }
    let summary = ModesSummary {
        period: orbit.period,
        degenerate: orbit.degenerate,
        rows,
        fields,
    };
    let text = out.json("modes.json", "modes", p, &summary)?;
    println!("{text}");
    Ok(0)
}

#[derive(Debug, Serialize)]
struct FloquetSummary {
    record: FloquetRecord,
    monodromy: [[f64; 2]; 2],
    trace: f64,
    determinant: f64,
    oscillatory: bool,
    wronskian_drift: f64,
}

pub fn floquet(p: &OrbitParams, out: &Output) -> Result<i32> {
    let orbit = orbit_of(p)?;
    if orbit.degenerate {
        return Err(Error::Domain(
            "eps = ū is the cylinder: use `modes`, which reports the indicial roots".into(),
        ));
    }
    let r = modeline::floquet(&orbit, p.j)?;
    let summary = FloquetSummary {
        record: FloquetRecord::new(&orbit, &r),
        monodromy: modeline::monodromy(&orbit, p.j)?,
        trace: r.trace,
        determinant: r.determinant,
        oscillatory: r.oscillatory,
        wronskian_drift: modeline::wronskian_drift(&orbit, p.j, p.periods as f64 * orbit.period)?,
    };
    let text = out.json("floquet.json", "floquet", p, &summary)?;
    println!("{text}");
    Ok(0)
}

#[derive(Debug, Serialize)]
struct GlueSummary {
    nodes: usize,
    charts: usize,
    error_sup: f64,
    error_outside_transition: f64,
    midneck: Vec<f64>,
    isometry_defect: f64,
    overlap_defect: f64,
}

pub fn glue(run: &RunConfig, out: &Output) -> Result<i32> {
    let gluing = run.solver.apply(&run.gluing);
    let m = build_connected_sum(&gluing)?;
    let u = approximate_factor(&m)?;
    let f = error_field(&m);
    out.glued_field("u_T", &m, &u)?;
    out.glued_field("f_T", &m, &f)?;
    let (sup, outside) = support_split(&m, &f);
    let summary = GlueSummary {
        nodes: m.len(),
        charts: m.chart_count(),
        error_sup: sup,
        error_outside_transition: outside,
        midneck: midneck_values(&m, &u),
        isometry_defect: m.isometry_defect(),
        overlap_defect: m.overlap_defect(&u),
    };
    let text = out.json("glue.json", "glue", run, &summary)?;
    println!("{text}");
    Ok(0)
}

/// Gluing configuration to solve: the given one, or the chain at the neck
/// parameters chosen by the schedule search.
fn schedule_or_given(run: &RunConfig) -> Result<(GluingConfig, Option<cpsc_core::corrector::ScheduleResult>)> {
    match &run.schedule {
        None => Ok((run.gluing.clone(), None)),
        Some(opts) => {
            let summands: Vec<(f64, f64)> = run.gluing.summands.iter().map(|s| (s.eps, s.alpha)).collect();
            let result = chain_schedule(run.gluing.n, &summands, &run.solver, opts)?;
            let mut gluing = cpsc_core::gluing::chain_config(run.gluing.n, &summands, &result.t_list)?;
            gluing.cutoff_width = run.gluing.cutoff_width;
            gluing.grids = run.gluing.grids.clone();
            Ok((gluing, Some(result)))
        }
    }
}

fn write_solution(out: &Output, gluing: &GluingConfig, run: &RunConfig, outcome: &SolveOutcome) -> Result<()> {
    let m = build_connected_sum(&run.solver.apply(gluing))?;
    out.glued_field("u_T", &m, &m.split(&outcome.u_t))?;
    out.glued_field("f_T", &m, &m.split(&outcome.error))?;
    out.glued_field("factor", &m, &m.split(&outcome.factor))?;
    out.glued_field("correction", &m, &m.split(&outcome.correction))?;
    out.iterations("iterations.csv", &outcome.report.iterations)?;
    Ok(())
}

fn status_code(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Converged => 0,
        SolveStatus::Diverged | SolveStatus::MaxIterations => 2,
    }
}

#[derive(Debug, Serialize)]
struct SolveSummary<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<&'a cpsc_core::corrector::ScheduleResult>,
    report: &'a SolveReport,
}

pub fn solve(run: &RunConfig, out: &Output) -> Result<i32> {
    let (gluing, schedule) = schedule_or_given(run)?;
    let outcome = contraction_solve(&gluing, &run.solver, true)?;
    write_solution(out, &gluing, run, &outcome)?;
    let summary = SolveSummary {
        schedule: schedule.as_ref(),
        report: &outcome.report,
    };
    out.json("report.json", "solve", run, &summary)?;
    print_solve(&outcome.report);
    Ok(status_code(outcome.report.status))
}

fn print_solve(r: &SolveReport) {
    let mut o = std::io::stdout().lock();
    let _ = writeln!(
        o,
        "status {:?}  iterations {}  residual {:.3e}  ratio {}  curvature defect {:.3e}  kernel {}",
        r.status,
        r.iterations.len(),
        r.final_residual,
        r.contraction_ratio.map_or("n/a".into(), |q| format!("{q:.3e}")),
        r.curvature_defect,
        r.kernel_count.map_or("n/a".into(), |k| k.to_string()),
    );
    for e in &r.end_estimates {
        let _ = writeln!(
            o,
            "  end body {} {:?}: eps {:.9} estimate {:.9}{}{}",
            e.end.body,
            e.end.side,
            e.prescribed,
            e.eps_hat,
            if e.deficiency { " (deficiency)" } else { "" },
            if e.cylindrical { " cylindrical" } else { "" },
        );
    }
}

#[derive(Debug, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

fn gate(name: &str, value: f64, limit: f64) -> Gate {
    Gate {
        name: name.into(),
        value,
        limit,
        pass: value <= limit,
    }
}

#[derive(Debug, Serialize)]
struct VerifySummary<'a> {
    gates: Vec<Gate>,
    pass: bool,
    /// Reference error of curvature recovery on the summand factors.
    discretization_error: f64,
    report: &'a SolveReport,
}

pub fn verify(run: &RunConfig, out: &Output) -> Result<i32> {
    let (gluing, _) = schedule_or_given(run)?;
    let outcome = contraction_solve(&gluing, &run.solver, true)?;
    let r = &outcome.report;
    let n = Dimension::new(gluing.n)?;
    let mut reference: f64 = 0.0;
    for s in &gluing.summands {
        let orbit = DelaunayOrbit::new(n, s.eps.min(cylinder_constant(n)))?;
        if !orbit.degenerate {
            reference = reference.max(delaunay_recovery_error(&orbit)?);
        }
    }
    let mut gates = vec![
        gate("converged", if r.status == SolveStatus::Converged { 0.0 } else { 1.0 }, 0.0),
        gate("contraction_ratio", r.contraction_ratio.unwrap_or(0.0), 0.5),
        gate("final_residual", r.final_residual, 1e-8),
        gate("curvature_defect", r.curvature_defect, 10.0 * reference),
        gate("kernel_count", r.kernel_count.map_or(f64::INFINITY, |k| k as f64), 0.0),
        gate("end_length_sensitivity", r.end_length_sensitivity.unwrap_or(f64::INFINITY), 0.2),
    ];
    for e in r.end_estimates.iter().filter(|e| !e.deficiency) {
        gates.push(gate(
            &format!("end_body{}_{:?}", e.end.body, e.end.side).to_lowercase(),
            (e.eps_hat - e.prescribed).abs(),
            1e-6,
        ));
    }
    let pass = gates.iter().all(|g| g.pass);
    let summary = VerifySummary {
        gates,
        pass,
        discretization_error: reference,
        report: r,
    };
    out.json("verify.json", "verify", run, &summary)?;
    let mut o = std::io::stdout().lock();
    for g in &summary.gates {
        let _ = writeln!(o, "{} {} {:.3e} <= {:.3e}", if g.pass { "PASS" } else { "FAIL" }, g.name, g.value, g.limit);
    }
    Ok(if pass { 0 } else { 2 })
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    decay: DecayFit,
    /// Gate on the fitted rate: `−(n−2)/4 + 0.05`.
    rate_bound: f64,
    norms: NormScan,
}

pub fn sweep(run: &RunConfig, out: &Output) -> Result<i32> {
    let spec = run
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a \"sweep\": {\"T\": [...]} section".into()))?;
    let gluing = run.solver.apply(&run.gluing);
    if gluing.neck_parameters.is_empty() {
        return Err(Error::Config("sweep needs at least one junction".into()));
    }
    let decay = error_decay_scan(&gluing, &spec.t_values)?;
    let norms = right_inverse_norm_scan(&run.gluing, &spec.t_values, &run.solver)?;
    out.with("sweep.csv", |w| {
        writeln!(w, "T,error_sup,inverse_norm,injectivity")?;
        for (k, t) in spec.t_values.iter().enumerate() {
            let s = &norms.samples[k];
            writeln!(w, "{t},{:.17e},{:.17e},{:.17e}", decay.norms[k], s.inverse, s.injectivity)?;
        }
        Ok(())
    })?;
    if !decay.monotone {
        eprintln!("warning: error norms are not monotone in T");
    }
    let summary = SweepSummary {
        rate_bound: -(gluing.n as f64 - 2.0) / 4.0 + 0.05,
        decay,
        norms,
    };
    let text = out.json("sweep.json", "sweep", run, &summary)?;
    println!("{text}");
    Ok(0)
}

pub fn check(run: &RunConfig) -> Result<i32> {
    // Building the manifold also checks what needs the summand orbits.
    build_connected_sum(&run.solver.apply(&run.gluing))?;
    println!("{}", serde_json::to_string_pretty(run)?);
    Ok(0)
}
