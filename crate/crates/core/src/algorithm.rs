//! Outer loop of the chance-constrained OPF: margins are linearized at the incumbent
//! operating point, the tightened OPF is re-solved, and the loop stops once the margins
//! settle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipm::IpmOptions;
use crate::model::Network;
use crate::opf::{solve_acopf, MarginMode, OpfError, OpfProblem, OpfSolution, PolicyMode};
use crate::powerflow::{line_flows, OperatingPoint};
use crate::sensitivity::{all_quantities, margin_factor, PolicySet, Quantity, ResponseModel, RowVariance, SensError};
use crate::uncertainty::WindModel;

#[derive(Debug, Clone, Error)]
pub enum CcError {
    #[error("invalid options: {0}")]
    Options(String),
    #[error("OPF failed in outer iteration {iteration}: {source}")]
    Opf { iteration: usize, source: OpfError },
    #[error("sensitivity evaluation failed in outer iteration {iteration}: {source}")]
    Sensitivity { iteration: usize, source: SensError },
    #[error("no convergence after {} outer iterations: {diagnosis}", trace.records.len().saturating_sub(1))]
    NonConvergence { trace: Box<IterationTrace>, diagnosis: String },
    #[error("constraint generation did not settle after {rounds} rounds; still violated: {}", persistent.join(", "))]
    Generation { rounds: usize, persistent: Vec<String> },
}

impl CcError {
    /// The underlying OPF failure, when there is one.
    pub fn opf_error(&self) -> Option<&OpfError> {
        match self {
            CcError::Opf { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Response policy handling of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    Fixed(PolicySet),
    /// Optimize α and β, or only the factors that are not pinned.
    Optimize {
        alpha: Option<Vec<f64>>,
        beta: Option<Vec<f64>>,
        beta_max: f64,
    },
}

impl PolicyChoice {
    pub fn optimize_all() -> Self {
        PolicyChoice::Optimize { alpha: None, beta: None, beta_max: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct CcOptions {
    pub epsilon: f64,
    pub rho: f64,
    pub max_outer: usize,
    pub policy: PolicyChoice,
    pub constraint_generation: bool,
    /// Tolerance for violated tightened limits, p.u.
    pub violation_tol: f64,
    pub max_generation_rounds: usize,
    /// Outer iteration after which consecutive margins are averaged.
    pub damping_after: usize,
    pub ipm: IpmOptions,
}

impl Default for CcOptions {
    fn default() -> Self {
        CcOptions {
            epsilon: 0.05,
            rho: 1e-5,
            max_outer: 50,
            policy: PolicyChoice::optimize_all(),
            constraint_generation: false,
            violation_tol: 1e-6,
            max_generation_rounds: 20,
            damping_after: 15,
            ipm: IpmOptions::default(),
        }
    }
}

impl CcOptions {
    pub fn validate(&self) -> Result<(), CcError> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CcError::Options(format!("epsilon {} must lie in (0, 0.5)", self.epsilon)));
        }
        if !(self.rho > 0.0) {
            return Err(CcError::Options(format!("rho {} must be positive", self.rho)));
        }
        if self.max_outer == 0 {
            return Err(CcError::Options("at least one outer iteration is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// $/h.
    pub objective: f64,
    /// Margins aligned with [`all_quantities`], zero where not included.
    pub margins: Vec<f64>,
    /// `‖λ_k − λ_{k−1}‖∞`.
    pub delta: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub status: String,
    /// Margins included in the solve.
    pub active: usize,
    pub damped: bool,
    /// Largest violation of the full tightened set re-linearized at this iterate.
    pub certificate: Option<f64>,
    /// Seconds; recorded for diagnostics and left out of exported files.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub diverged: Option<String>,
}

impl IterationTrace {
    /// Outer iterations after the deterministic start.
    pub fn outer_iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// `iteration,objective,max_margin_delta,active_margins,damped,certificate,alpha_bus<b>…,beta_<from>_<to>…`
    pub fn to_csv(&self, net: &Network) -> String {
        let mut out = String::from("iteration,objective,max_margin_delta,active_margins,damped,certificate");
        for g in &net.generators {
            out.push_str(&format!(",alpha_bus{}", g.bus));
        }
        for h in &net.hvdc_lines {
            out.push_str(&format!(",beta_{}_{}", h.from, h.to));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6e},{},{},{}",
                r.iteration,
                r.objective,
                r.delta,
                r.active,
                r.damped,
                r.certificate.map(|c| format!("{c:.3e}")).unwrap_or_default()
            ));
            for a in &r.alpha {
                out.push_str(&format!(",{a:.9}"));
            }
            for b in &r.beta {
                out.push_str(&format!(",{b:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CcSolution {
    pub solution: OpfSolution,
    /// Iteration 0, the OPF without margins.
    pub deterministic: OpfSolution,
    pub policies: PolicySet,
    /// Final margins, aligned with [`all_quantities`].
    pub margins: Vec<f64>,
    pub trace: IterationTrace,
    pub converged: bool,
    /// Largest violation of the full margin set re-linearized at the final point.
    pub certificate: f64,
    /// Margins included in the final solve.
    pub active: Vec<bool>,
    /// Non-linear margins added by constraint generation over the whole run.
    pub generated: usize,
}

/// Wall clock for trace diagnostics; reads zero where the platform has no clock.
struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> std::time::Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed();
        #[cfg(target_arch = "wasm32")]
        std::time::Duration::ZERO
    }
}

/// `‖now − prev‖∞`; entries that exist on one side only compare against zero.
pub fn margin_convergence(now: &[f64], prev: &[f64]) -> f64 {
    let n = now.len().max(prev.len());
    (0..n).map(|i| (now.get(i).copied().unwrap_or(0.0) - prev.get(i).copied().unwrap_or(0.0)).abs()).fold(0.0, f64::max)
}

/// Violation of one quantity's tightened limits, positive when violated.
fn tightened_violation(net: &Network, op: &OperatingPoint, flows: &[f64], q: Quantity, margin: f64) -> f64 {
    let over = |v: f64, lo: f64, hi: f64| (v - (hi - margin)).max((lo + margin) - v);
    match q {
        Quantity::GenP(k) => over(op.gen_p[k], net.generators[k].p_min, net.generators[k].p_max),
        Quantity::GenQ(k) => over(op.gen_q[k], net.generators[k].q_min, net.generators[k].q_max),
        Quantity::Voltage(i) => over(op.v_mag[i], net.buses[i].v_min, net.buses[i].v_max),
        Quantity::LineP(l) => over(flows[l], -net.ac_lines[l].p_max, net.ac_lines[l].p_max),
        Quantity::HvdcP(c) => {
            let lim = net.hvdc_lines[c].p_limit();
            op.hvdc_p[c].iter().map(|p| over(*p, -lim, lim)).fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

/// Violations above `tol` of every tightened limit, with margins from `model` at `policies`.
pub fn tightened_violations(
    net: &Network,
    op: &OperatingPoint,
    model: &ResponseModel,
    policies: &PolicySet,
    tol: f64,
) -> Vec<(usize, f64)> {
    let flows: Vec<f64> = line_flows(net, op).iter().map(|f| f.p_from).collect();
    let margins = model.margins(&policies.alpha, &policies.beta);
    model
        .quantities
        .iter()
        .enumerate()
        .map(|(i, q)| (i, tightened_violation(net, op, &flows, *q, margins[i])))
        .filter(|(_, v)| *v > tol)
        .collect()
}

/// Outcome of [`constraint_generation_solve`].
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub solution: OpfSolution,
    pub active: Vec<bool>,
    pub rounds: usize,
    /// Margins added beyond the initial set.
    pub added: Vec<usize>,
}

/// Solves an affine-margin problem with a growing subset of its margins.
///
/// The initial subset holds the generator and HVDC active-power margins plus any margin
/// already active in `problem`. Violated tightened limits are added and the problem is
/// re-solved until the full set holds within `tol`.
pub fn constraint_generation_solve(
    problem: &OpfProblem,
    start: &OperatingPoint,
    tol: f64,
    max_rounds: usize,
) -> Result<GenerationOutcome, CcError> {
    let MarginMode::Affine(model) = &problem.margins else {
        return Err(CcError::Options("constraint generation needs policy-dependent margins".into()));
    };
    let net = problem.net;
    let mut active: Vec<bool> = model
        .quantities
        .iter()
        .enumerate()
        .map(|(i, q)| matches!(q, Quantity::GenP(_) | Quantity::HvdcP(_)) || problem.active.as_ref().map(|a| a[i]).unwrap_or(false))
        .collect();
    let mut added = Vec::new();
    let mut prob = problem.clone();
    let mut start = start.clone();
    for round in 1..=max_rounds {
        prob.active = Some(active.clone());
        let sol = solve_acopf(&prob, &start).map_err(|source| CcError::Opf { iteration: round, source })?;
        let policies = sol.policies.clone().unwrap_or_else(|| PolicySet::uniform(net));
        let violated: Vec<usize> =
            tightened_violations(net, &sol.op, model, &policies, tol).into_iter().map(|(i, _)| i).filter(|i| !active[*i]).collect();
        if violated.is_empty() {
            return Ok(GenerationOutcome { solution: sol, active, rounds: round, added });
        }
        if round == max_rounds {
            return Err(CcError::Generation {
                rounds: round,
                persistent: violated.iter().map(|i| model.quantities[*i].label(net)).collect(),
            });
        }
        for i in violated {
            active[i] = true;
            added.push(i);
        }
        start = sol.op.clone();
        prob.start_policies = sol.policies.clone();
    }
    Err(CcError::Generation { rounds: max_rounds, persistent: vec![] })
}

/// Averages the response rows of two linearizations.
fn average_models(a: &ResponseModel, b: &ResponseModel, sigma: &nalgebra::DMatrix<f64>) -> ResponseModel {
    let mid = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect::<Vec<f64>>();
    let rows: Vec<_> = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(r, s)| crate::sensitivity::ResponseRow {
            base: mid(&r.base, &s.base),
            per_gen: mid(&r.per_gen, &s.per_gen),
            per_hvdc: mid(&r.per_hvdc, &s.per_hvdc),
        })
        .collect();
    let variances = rows.iter().map(|r| RowVariance::new(r, sigma)).collect();
    ResponseModel { quantities: a.quantities.clone(), rows, variances, z: a.z }
}

/// Solves the OPF without margins or policies.
pub fn solve_deterministic(net: &Network, ipm: IpmOptions) -> Result<OpfSolution, OpfError> {
    let prob = OpfProblem { ipm, ..OpfProblem::deterministic(net) };
    solve_acopf(&prob, &OperatingPoint::flat(net))
}

/// Runs the iterative chance-constrained OPF from the deterministic solution.
pub fn run_iterative_ccopf(net: &Network, wind: &WindModel, opts: &CcOptions) -> Result<CcSolution, CcError> {
    opts.validate()?;
    if wind.dim() != net.wind_farms.len() {
        return Err(CcError::Options(format!("wind model has {} farms, network {}", wind.dim(), net.wind_farms.len())));
    }
    margin_factor(opts.epsilon).map_err(|source| CcError::Sensitivity { iteration: 0, source })?;
    let clock = Clock::start();
    let nq = all_quantities(net).len();
    let sigma = wind.sigma();

    let det = solve_deterministic(net, opts.ipm).map_err(|source| CcError::Opf { iteration: 0, source })?;
    let base_policy = match &opts.policy {
        PolicyChoice::Fixed(p) => p.clone(),
        PolicyChoice::Optimize { alpha, beta, .. } => {
            let mut p = PolicySet::uniform(net);
            if let Some(a) = alpha {
                p.alpha = a.clone();
            }
            if let Some(b) = beta {
                p.beta = b.clone();
            }
            p
        }
    };
    let mut trace = IterationTrace::default();
    trace.records.push(IterationRecord {
        iteration: 0,
        objective: det.objective,
        margins: vec![0.0; nq],
        delta: 0.0,
        alpha: base_policy.alpha.clone(),
        beta: base_policy.beta.clone(),
        status: "optimal".into(),
        active: 0,
        damped: false,
        certificate: None,
        wall_time: clock.elapsed().as_secs_f64(),
    });

    let mut incumbent = det.clone();
    let mut policies = base_policy.clone();
    let mut lambda_prev = vec![0.0; nq];
    let mut prev_model: Option<ResponseModel> = None;
    let mut active_prev: Option<Vec<bool>> = None;
    let mut generated = std::collections::BTreeSet::new();

    for k in 1..=opts.max_outer {
        let raw =
            ResponseModel::build(net, &incumbent.op, wind, opts.epsilon).map_err(|source| CcError::Sensitivity { iteration: k, source })?;
        let damped = k > opts.damping_after;
        let (sol, active) =
            match &opts.policy {
                PolicyChoice::Fixed(p) => {
                    let mut m = raw.margins(&p.alpha, &p.beta);
                    if damped {
                        m = m.iter().zip(&lambda_prev).map(|(a, b)| 0.5 * (a + b)).collect();
                    }
                    let prob = OpfProblem {
                        net,
                        margins: MarginMode::Fixed(m),
                        policy: PolicyMode::Fixed(p.clone()),
                        active: None,
                        start_policies: None,
                        ipm: opts.ipm,
                    };
                    let sol = solve_acopf(&prob, &incumbent.op).map_err(|source| CcError::Opf { iteration: k, source })?;
                    (sol, vec![true; nq])
                }
                PolicyChoice::Optimize { alpha, beta, beta_max } => {
                    let model = match (&prev_model, damped) {
                        (Some(prev), true) => average_models(&raw, prev, &sigma),
                        _ => raw.clone(),
                    };
                    let prob = OpfProblem {
                        net,
                        margins: MarginMode::Affine(model),
                        policy: PolicyMode::Optimize { alpha: alpha.clone(), beta: beta.clone(), beta_max: *beta_max },
                        active: active_prev.clone(),
                        start_policies: Some(policies.clone()),
                        ipm: opts.ipm,
                    };
                    if opts.constraint_generation {
                        let out = constraint_generation_solve(&prob, &incumbent.op, opts.violation_tol, opts.max_generation_rounds)
                            .map_err(|e| match e {
                                CcError::Opf { source, .. } => CcError::Opf { iteration: k, source },
                                other => other,
                            })?;
                        generated.extend(out.added.iter().copied());
                        (out.solution, out.active)
                    } else {
                        let sol = solve_acopf(&prob, &incumbent.op).map_err(|source| CcError::Opf { iteration: k, source })?;
                        (sol, vec![true; nq])
                    }
                }
            };
        prev_model = Some(raw);
        policies = sol.policies.clone().unwrap_or_else(|| policies.clone());
        let lambda = sol.margins.clone();
        let delta = margin_convergence(&lambda, &lambda_prev);
        let mut record = IterationRecord {
            iteration: k,
            objective: sol.objective,
            margins: lambda.clone(),
            delta,
            alpha: policies.alpha.clone(),
            beta: policies.beta.clone(),
            status: "optimal".into(),
            active: active.iter().filter(|a| **a).count(),
            damped,
            certificate: None,
            wall_time: 0.0,
        };
        incumbent = sol;
        lambda_prev = lambda;
        active_prev = Some(active.clone());
        if delta <= opts.rho {
            let check = ResponseModel::build(net, &incumbent.op, wind, opts.epsilon)
                .map_err(|source| CcError::Sensitivity { iteration: k, source })?;
            let worst = tightened_violations(net, &incumbent.op, &check, &policies, f64::NEG_INFINITY)
                .into_iter()
                .map(|(_, v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            record.certificate = Some(worst);
            record.wall_time = clock.elapsed().as_secs_f64();
            trace.records.push(record);
            if worst <= opts.violation_tol {
                trace.converged = true;
                let margins = check.margins(&policies.alpha, &policies.beta);
                return Ok(CcSolution {
                    solution: incumbent,
                    deterministic: det,
                    policies,
                    margins,
                    trace,
                    converged: true,
                    certificate: worst,
                    active,
                    generated: generated.len(),
                });
            }
        } else {
            record.wall_time = clock.elapsed().as_secs_f64();
            trace.records.push(record);
        }
    }
    let last = trace.records.last().map(|r| r.delta).unwrap_or(f64::NAN);
    let diagnosis = format!("last margin change {last:.3e} exceeds rho {:.1e}", opts.rho);
    trace.diverged = Some(diagnosis.clone());
    Err(CcError::NonConvergence { trace: Box::new(trace), diagnosis })
}
