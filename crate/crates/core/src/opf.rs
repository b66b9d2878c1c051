//! AC optimal power flow with HVDC lines and margin-tightened limits.
//!
//! Decision vector layout: `θ (N) | V (N) | P_G (G) | Q_G (G) | P_C (2H) | Q_C (2H) |
//! α (participating generators, when optimized) | β⁺ (H) | β⁻ (H)`, with converter
//! terminals stored as `[from, to]` pairs. `β = β⁺ − β⁻` keeps the HVDC margin linear
//! in `β⁺ + β⁻`.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipm::{self, IpmOptions, IpmStatus, Nlp, NlpEval};
use crate::model::Network;
use crate::powerflow::{balance_hessian, calc_injections, jacobian, sending_p, Admittance, OperatingPoint};
use crate::sensitivity::{all_quantities, wind_gamma, PolicySet, Quantity, ResponseModel, RowVariance};

/// Smoothing of `√(ΓΣΓᵀ)` near zero: `√(ΓΣΓᵀ + ς²)`.
pub const SOC_SMOOTHING: f64 = 1e-8;
/// Objective scaling inside the solver; reported multipliers are unscaled.
pub const COST_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OpfError {
    #[error("problem is infeasible: largest violation {violation:.3e} at {constraint}")]
    Infeasible { violation: f64, constraint: String },
    #[error("interior-point method stopped after {iterations} iterations (violation {violation:.3e}, stationarity {stationarity:.3e})")]
    MaxIterations { iterations: usize, violation: f64, stationarity: f64 },
    #[error("interior-point method failed numerically after {iterations} iterations (violation {violation:.3e} at {constraint})")]
    NumericalFailure { iterations: usize, violation: f64, constraint: String },
    #[error("ill-formed problem: {0}")]
    Problem(String),
}

/// How limits are tightened.
#[derive(Debug, Clone)]
pub enum MarginMode {
    None,
    /// One margin per quantity, aligned with [`all_quantities`].
    Fixed(Vec<f64>),
    /// Margins as functions of the policy variables.
    Affine(ResponseModel),
}

/// Response policies of the problem.
#[derive(Debug, Clone)]
pub enum PolicyMode {
    /// Deterministic dispatch, no policy reported.
    None,
    Fixed(PolicySet),
    /// Optimize the factors that are not pinned.
    Optimize {
        alpha: Option<Vec<f64>>,
        beta: Option<Vec<f64>>,
        beta_max: f64,
    },
}

#[derive(Debug, Clone)]
pub struct OpfProblem<'a> {
    pub net: &'a Network,
    pub margins: MarginMode,
    pub policy: PolicyMode,
    /// Margin inclusion per quantity, aligned with [`all_quantities`]; `None` includes all.
    pub active: Option<Vec<bool>>,
    /// Initial policy values for optimized factors.
    pub start_policies: Option<PolicySet>,
    pub ipm: IpmOptions,
}

impl<'a> OpfProblem<'a> {
    pub fn deterministic(net: &'a Network) -> Self {
        OpfProblem {
            net,
            margins: MarginMode::None,
            policy: PolicyMode::None,
            active: None,
            start_policies: None,
            ipm: IpmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpfStatus {
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖∇L‖∞ / (1 + max(‖λ‖∞, ‖μ‖∞))` in solver scaling.
    pub stationarity: f64,
    /// `max(‖g‖∞, max(h, 0))` in per-unit.
    pub primal: f64,
    /// `max |μ_i h_i|` in solver scaling.
    pub complementarity: f64,
    /// Smallest inequality multiplier.
    pub dual_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfSolution {
    pub op: OperatingPoint,
    pub policies: Option<PolicySet>,
    /// $/h at the forecast dispatch.
    pub objective: f64,
    pub status: OpfStatus,
    pub kkt: KktReport,
    pub binding: Vec<String>,
    /// Margin applied to each quantity, aligned with [`all_quantities`].
    pub margins: Vec<f64>,
    pub iterations: usize,
    pub note: Option<String>,
    pub x: Vec<f64>,
    /// Equality multipliers in $/h per p.u.
    pub lam: Vec<f64>,
    /// Inequality multipliers in $/h per p.u.
    pub mu: Vec<f64>,
}

/// `Σ c2·P² + c1·P + c0` with `P` in MW.
pub fn evaluate_objective(net: &Network, gen_p: &[f64]) -> f64 {
    net.generators
        .iter()
        .zip(gen_p)
        .map(|(g, p)| {
            let mw = p * net.base_mva;
            g.cost_c2 * mw * mw + g.cost_c1 * mw + g.cost_c0
        })
        .sum()
}

#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    ng: usize,
    nh: usize,
    pg: usize,
    qg: usize,
    pc: usize,
    qc: usize,
    alpha: usize,
    alpha_gen: Vec<usize>,
    bplus: usize,
    n_beta: usize,
    bminus: usize,
    total: usize,
}

impl Layout {
    fn new(net: &Network, alpha_gen: Vec<usize>, optimize_beta: bool) -> Self {
        let (n, ng, nh) = (net.n_bus(), net.generators.len(), net.hvdc_lines.len());
        let pg = 2 * n;
        let qg = pg + ng;
        let pc = qg + ng;
        let qc = pc + 2 * nh;
        let alpha = qc + 2 * nh;
        let bplus = alpha + alpha_gen.len();
        let n_beta = if optimize_beta { nh } else { 0 };
        let bminus = bplus + n_beta;
        Layout { n, ng, nh, pg, qg, pc, qc, alpha, alpha_gen, bplus, n_beta, bminus, total: bminus + n_beta }
    }
}

#[derive(Debug, Clone)]
enum Value {
    Var(usize),
    Line(usize),
}

#[derive(Debug, Clone)]
struct Ineq {
    value: Value,
    sign: f64,
    limit: f64,
    margin: Option<usize>,
    name: String,
}

/// Margin of one quantity as a function of the policy variables.
#[derive(Debug, Clone)]
enum MarginTerm {
    Const(f64),
    Linear(Vec<(usize, f64)>),
    Soc { z: f64, var: RowVariance, s0: f64, grad: Vec<(usize, f64)> },
}

impl MarginTerm {
    fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            MarginTerm::Const(v) => *v,
            MarginTerm::Linear(c) => c.iter().map(|(i, a)| a * x[*i]).sum(),
            MarginTerm::Soc { z, var, s0, grad } => {
                let s = s0 + grad.iter().map(|(i, a)| a * x[*i]).sum::<f64>();
                z * (var.at(s) + SOC_SMOOTHING * SOC_SMOOTHING).sqrt()
            }
        }
    }

    fn grad(&self, x: &DVector<f64>, out: &mut [f64]) {
        match self {
            MarginTerm::Const(_) => {}
            MarginTerm::Linear(c) => {
                for (i, a) in c {
                    out[*i] += a;
                }
            }
            MarginTerm::Soc { z, var, s0, grad } => {
                let s = s0 + grad.iter().map(|(i, a)| a * x[*i]).sum::<f64>();
                let f = (var.at(s) + SOC_SMOOTHING * SOC_SMOOTHING).sqrt();
                let d = z * (var.b + var.c * s) / f;
                for (i, a) in grad {
                    out[*i] += d * a;
                }
            }
        }
    }

    fn add_hessian(&self, x: &DVector<f64>, weight: f64, out: &mut DMatrix<f64>) {
        if let MarginTerm::Soc { z, var, s0, grad } = self {
            let s = s0 + grad.iter().map(|(i, a)| a * x[*i]).sum::<f64>();
            let q = var.at(s) + SOC_SMOOTHING * SOC_SMOOTHING;
            let curv = ((var.a * var.c - var.b * var.b).max(0.0) + var.c * SOC_SMOOTHING * SOC_SMOOTHING) / (q * q.sqrt());
            let w = weight * z * curv;
            for (i, a) in grad {
                for (j, b) in grad {
                    out[(*i, *j)] += w * a * b;
                }
            }
        }
    }
}

struct OpfNlp<'p> {
    net: &'p Network,
    y: Admittance,
    lay: Layout,
    ineqs: Vec<Ineq>,
    terms: Vec<Option<MarginTerm>>,
    wind_p: Vec<f64>,
    wind_q: Vec<f64>,
    ref_bus: usize,
    /// Line admittances and bus positions.
    lines: Vec<(usize, usize, f64, f64)>,
    alpha_fixed: Vec<f64>,
    beta_fixed: Vec<f64>,
}

fn build_terms(
    prob: &OpfProblem,
    lay: &Layout,
    quantities: &[Quantity],
    alpha_fixed: &[f64],
    beta_fixed: &[f64],
) -> Result<Vec<Option<MarginTerm>>, OpfError> {
    let net = prob.net;
    let active = |i: usize| prob.active.as_ref().map(|a| a[i]).unwrap_or(true);
    match &prob.margins {
        MarginMode::None => Ok(vec![None; quantities.len()]),
        MarginMode::Fixed(values) => {
            if values.len() != quantities.len() {
                return Err(OpfError::Problem(format!("{} fixed margins for {} quantities", values.len(), quantities.len())));
            }
            Ok(values.iter().enumerate().map(|(i, v)| if active(i) { Some(MarginTerm::Const(*v)) } else { None }).collect())
        }
        MarginMode::Affine(model) => {
            if model.quantities != quantities {
                return Err(OpfError::Problem("response model does not match network".into()));
            }
            let z = model.z;
            let mut out = Vec::with_capacity(quantities.len());
            for (i, q) in quantities.iter().enumerate() {
                if !active(i) {
                    out.push(None);
                    continue;
                }
                let row = &model.rows[i];
                let var = model.variances[i];
                let mut s0 = 0.0;
                let mut grad = Vec::new();
                for (k, p) in row.per_gen.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    match lay.alpha_gen.iter().position(|&g| g == k) {
                        Some(a) => grad.push((lay.alpha + a, *p)),
                        None => s0 += p * alpha_fixed[k],
                    }
                }
                for (c, p) in row.per_hvdc.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    if lay.n_beta > 0 {
                        grad.push((lay.bplus + c, *p));
                        grad.push((lay.bminus + c, -*p));
                    } else {
                        s0 += p * beta_fixed[c];
                    }
                }
                let sc = z * var.c.sqrt();
                let term = match *q {
                    Quantity::GenP(k) if q.is_linear(net) => match lay.alpha_gen.iter().position(|&g| g == k) {
                        Some(a) => MarginTerm::Linear(vec![(lay.alpha + a, sc)]),
                        None => MarginTerm::Const(sc * alpha_fixed[k].abs()),
                    },
                    Quantity::HvdcP(c) => {
                        if lay.n_beta > 0 {
                            MarginTerm::Linear(vec![(lay.bplus + c, sc), (lay.bminus + c, sc)])
                        } else {
                            MarginTerm::Const(sc * beta_fixed[c].abs())
                        }
                    }
                    _ if grad.is_empty() => MarginTerm::Const(z * var.at(s0).sqrt()),
                    _ => MarginTerm::Soc { z, var, s0, grad },
                };
                out.push(Some(term));
            }
            Ok(out)
        }
    }
}

impl<'p> OpfNlp<'p> {
    fn new(prob: &OpfProblem<'p>) -> Result<Self, OpfError> {
        let net = prob.net;
        let (ng, nh) = (net.generators.len(), net.hvdc_lines.len());
        let (alpha_gen, optimize_beta, alpha_fixed, beta_fixed, beta_max) = match &prob.policy {
            PolicyMode::None => (vec![], false, vec![0.0; ng], vec![0.0; nh], 0.0),
            PolicyMode::Fixed(p) => {
                p.validate(net).map_err(|e| OpfError::Problem(e.to_string()))?;
                (vec![], false, p.alpha.clone(), p.beta.clone(), 0.0)
            }
            PolicyMode::Optimize { alpha, beta, beta_max } => {
                let alpha_gen = if alpha.is_none() { net.participating() } else { vec![] };
                if alpha.is_none() && alpha_gen.is_empty() {
                    return Err(OpfError::Problem("no participating generator".into()));
                }
                let af = alpha.clone().unwrap_or_else(|| vec![0.0; ng]);
                let bf = beta.clone().unwrap_or_else(|| vec![0.0; nh]);
                if af.len() != ng || bf.len() != nh {
                    return Err(OpfError::Problem("pinned policy has wrong length".into()));
                }
                (alpha_gen, beta.is_none(), af, bf, *beta_max)
            }
        };
        if matches!(prob.margins, MarginMode::Affine(_)) && matches!(prob.policy, PolicyMode::None) {
            return Err(OpfError::Problem("policy-dependent margins need a policy".into()));
        }
        let lay = Layout::new(net, alpha_gen, optimize_beta);
        let quantities = all_quantities(net);
        if let Some(a) = &prob.active {
            if a.len() != quantities.len() {
                return Err(OpfError::Problem("active set has wrong length".into()));
            }
        }
        let terms = build_terms(prob, &lay, &quantities, &alpha_fixed, &beta_fixed)?;
        let qidx = |q: Quantity| quantities.iter().position(|x| *x == q);

        let mut ineqs = Vec::new();
        let push_box = |ineqs: &mut Vec<Ineq>, value: Value, lo: f64, hi: f64, margin: Option<usize>, name: String| {
            ineqs.push(Ineq { value: value.clone(), sign: 1.0, limit: hi, margin, name: format!("{name} max") });
            ineqs.push(Ineq { value, sign: -1.0, limit: lo, margin, name: format!("{name} min") });
        };
        for (i, b) in net.buses.iter().enumerate() {
            push_box(&mut ineqs, Value::Var(lay.n + i), b.v_min, b.v_max, qidx(Quantity::Voltage(i)), format!("V bus {}", b.id));
        }
        for (k, g) in net.generators.iter().enumerate() {
            push_box(&mut ineqs, Value::Var(lay.pg + k), g.p_min, g.p_max, qidx(Quantity::GenP(k)), format!("P_G bus {}", g.bus));
            push_box(&mut ineqs, Value::Var(lay.qg + k), g.q_min, g.q_max, qidx(Quantity::GenQ(k)), format!("Q_G bus {}", g.bus));
        }
        for (l, line) in net.ac_lines.iter().enumerate() {
            push_box(
                &mut ineqs,
                Value::Line(l),
                -line.p_max,
                line.p_max,
                qidx(Quantity::LineP(l)),
                format!("P_L {}-{}", line.from, line.to),
            );
        }
        for (c, h) in net.hvdc_lines.iter().enumerate() {
            let (qlo, qhi) = h.q_bounds(net.hvdc_qmin);
            for (t, bus) in [h.from, h.to].into_iter().enumerate() {
                push_box(
                    &mut ineqs,
                    Value::Var(lay.pc + 2 * c + t),
                    -h.p_limit(),
                    h.p_limit(),
                    qidx(Quantity::HvdcP(c)),
                    format!("P_C {}-{} bus {bus}", h.from, h.to),
                );
                push_box(&mut ineqs, Value::Var(lay.qc + 2 * c + t), qlo, qhi, None, format!("Q_C {}-{} bus {bus}", h.from, h.to));
            }
        }
        for (a, &k) in lay.alpha_gen.iter().enumerate() {
            ineqs.push(Ineq {
                value: Value::Var(lay.alpha + a),
                sign: -1.0,
                limit: 0.0,
                margin: None,
                name: format!("alpha bus {} min", net.generators[k].bus),
            });
        }
        for c in 0..lay.n_beta {
            for (off, tag) in [(lay.bplus, "beta+"), (lay.bminus, "beta-")] {
                push_box(&mut ineqs, Value::Var(off + c), 0.0, beta_max, None, format!("{tag} {}", c + 1));
            }
        }

        let lines = net
            .ac_lines
            .iter()
            .map(|l| {
                let (g, b) = l.series_admittance();
                (net.pos(l.from), net.pos(l.to), g, b)
            })
            .collect();
        Ok(OpfNlp {
            net,
            y: Admittance::new(net),
            lay,
            ineqs,
            terms,
            wind_p: net.wind_farms.iter().map(|w| w.p_forecast).collect(),
            wind_q: net.wind_farms.iter().map(|w| w.power_ratio() * w.p_forecast).collect(),
            ref_bus: net.ref_bus(),
            lines,
            alpha_fixed,
            beta_fixed,
        })
    }

    fn n_eq(&self) -> usize {
        2 * self.lay.n + self.lay.nh + 1 + usize::from(!self.lay.alpha_gen.is_empty())
    }

    fn initial_point(&self, start: &OperatingPoint, pol: Option<&PolicySet>) -> DVector<f64> {
        let lay = &self.lay;
        let mut x = DVector::zeros(lay.total);
        for (i, b) in self.net.buses.iter().enumerate() {
            x[i] = start.v_ang[i];
            x[lay.n + i] = start.v_mag[i].clamp(b.v_min, b.v_max);
        }
        for (k, g) in self.net.generators.iter().enumerate() {
            x[lay.pg + k] = start.gen_p[k].clamp(g.p_min, g.p_max);
            x[lay.qg + k] = start.gen_q[k].clamp(g.q_min, g.q_max);
        }
        for c in 0..lay.nh {
            for t in 0..2 {
                x[lay.pc + 2 * c + t] = start.hvdc_p[c][t];
                x[lay.qc + 2 * c + t] = start.hvdc_q[c][t];
            }
        }
        let na = lay.alpha_gen.len();
        for (a, &k) in lay.alpha_gen.iter().enumerate() {
            let warm = pol.map(|p| p.alpha[k]).unwrap_or(1.0 / na as f64);
            x[lay.alpha + a] = warm.max(1e-3);
        }
        if na > 0 {
            let s: f64 = (0..na).map(|a| x[lay.alpha + a]).sum();
            for a in 0..na {
                x[lay.alpha + a] /= s;
            }
        }
        for c in 0..lay.n_beta {
            let b = pol.map(|p| p.beta[c]).unwrap_or(0.0);
            x[lay.bplus + c] = b.max(0.0) + 1e-3;
            x[lay.bminus + c] = (-b).max(0.0) + 1e-3;
        }
        x
    }

    fn line_p(&self, l: usize, x: &DVector<f64>) -> (f64, [f64; 4], [[f64; 4]; 4], [usize; 4]) {
        let (i, j, g, b) = self.lines[l];
        let n = self.lay.n;
        let (v, grad, hess) = sending_p(g, b, x[n + i], x[n + j], x[i] - x[j]);
        (v, grad, hess, [i, j, n + i, n + j])
    }

    fn policies(&self, x: &DVector<f64>, mode: &PolicyMode) -> Option<PolicySet> {
        let lay = &self.lay;
        match mode {
            PolicyMode::None => None,
            PolicyMode::Fixed(p) => Some(p.clone()),
            PolicyMode::Optimize { .. } => {
                let mut alpha = self.alpha_fixed.clone();
                if !lay.alpha_gen.is_empty() {
                    let raw: Vec<f64> = (0..lay.alpha_gen.len()).map(|a| x[lay.alpha + a].max(0.0)).collect();
                    let s: f64 = raw.iter().sum();
                    for (a, &k) in lay.alpha_gen.iter().enumerate() {
                        alpha[k] = raw[a] / s;
                    }
                }
                let beta = if lay.n_beta > 0 {
                    (0..lay.nh).map(|c| x[lay.bplus + c] - x[lay.bminus + c]).collect()
                } else {
                    self.beta_fixed.clone()
                };
                Some(PolicySet { alpha, beta, gamma: wind_gamma(self.net) })
            }
        }
    }
}

impl Nlp for OpfNlp<'_> {
    fn n_var(&self) -> usize {
        self.lay.total
    }

    fn eval(&self, x: &DVector<f64>) -> NlpEval {
        let lay = &self.lay;
        let net = self.net;
        let n = lay.n;
        let nv = lay.total;
        let base = net.base_mva;

        let mut f = 0.0;
        let mut df = DVector::zeros(nv);
        for (k, g) in net.generators.iter().enumerate() {
            let mw = x[lay.pg + k] * base;
            f += COST_SCALE * (g.cost_c2 * mw * mw + g.cost_c1 * mw + g.cost_c0);
            df[lay.pg + k] = COST_SCALE * base * (2.0 * g.cost_c2 * mw + g.cost_c1);
        }

        let v: Vec<f64> = (0..n).map(|i| x[n + i]).collect();
        let th: Vec<f64> = (0..n).map(|i| x[i]).collect();
        let (pc, qc) = calc_injections(&self.y, &v, &th);
        let jac = jacobian(&self.y, &v, &th);
        let neq = self.n_eq();
        let mut g = DVector::zeros(neq);
        let mut dg = DMatrix::zeros(neq, nv);
        for (i, b) in net.buses.iter().enumerate() {
            g[i] = -b.load_p - pc[i];
            g[n + i] = -b.load_q - qc[i];
        }
        for r in 0..2 * n {
            for c in 0..2 * n {
                dg[(r, c)] = -jac[(r, c)];
            }
        }
        for (k, gen) in net.generators.iter().enumerate() {
            let i = net.pos(gen.bus);
            g[i] += x[lay.pg + k];
            g[n + i] += x[lay.qg + k];
            dg[(i, lay.pg + k)] += 1.0;
            dg[(n + i, lay.qg + k)] += 1.0;
        }
        for (w, farm) in net.wind_farms.iter().enumerate() {
            let i = net.pos(farm.bus);
            g[i] += self.wind_p[w];
            g[n + i] += self.wind_q[w];
        }
        for (c, h) in net.hvdc_lines.iter().enumerate() {
            for (t, bus) in [h.from, h.to].into_iter().enumerate() {
                let i = net.pos(bus);
                g[i] += x[lay.pc + 2 * c + t];
                g[n + i] += x[lay.qc + 2 * c + t];
                dg[(i, lay.pc + 2 * c + t)] += 1.0;
                dg[(n + i, lay.qc + 2 * c + t)] += 1.0;
            }
            let r = 2 * n + c;
            g[r] = x[lay.pc + 2 * c] + x[lay.pc + 2 * c + 1] + h.loss();
            dg[(r, lay.pc + 2 * c)] = 1.0;
            dg[(r, lay.pc + 2 * c + 1)] = 1.0;
        }
        let r = 2 * n + lay.nh;
        g[r] = x[self.ref_bus];
        dg[(r, self.ref_bus)] = 1.0;
        if !lay.alpha_gen.is_empty() {
            let r = r + 1;
            g[r] = (0..lay.alpha_gen.len()).map(|a| x[lay.alpha + a]).sum::<f64>() - 1.0;
            for a in 0..lay.alpha_gen.len() {
                dg[(r, lay.alpha + a)] = 1.0;
            }
        }

        let niq = self.ineqs.len();
        let mut h = DVector::zeros(niq);
        let mut dh = DMatrix::zeros(niq, nv);
        let mut row = vec![0.0; nv];
        for (r, q) in self.ineqs.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            let val = match q.value {
                Value::Var(i) => {
                    row[i] += q.sign;
                    x[i]
                }
                Value::Line(l) => {
                    let (val, grad, _, cols) = self.line_p(l, x);
                    for (a, c) in cols.iter().enumerate() {
                        row[*c] += q.sign * grad[a];
                    }
                    val
                }
            };
            h[r] = q.sign * (val - q.limit);
            if let Some(Some(term)) = q.margin.map(|m| &self.terms[m]) {
                h[r] += term.value(x);
                term.grad(x, &mut row);
            }
            for (c, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    dh[(r, c)] = *v;
                }
            }
        }
        NlpEval { f, df, g, dg, h, dh }
    }

    fn hessian(&self, x: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        let lay = &self.lay;
        let net = self.net;
        let n = lay.n;
        let mut hess = DMatrix::zeros(lay.total, lay.total);
        for (k, g) in net.generators.iter().enumerate() {
            hess[(lay.pg + k, lay.pg + k)] = COST_SCALE * 2.0 * g.cost_c2 * net.base_mva * net.base_mva;
        }
        let v: Vec<f64> = (0..n).map(|i| x[n + i]).collect();
        let th: Vec<f64> = (0..n).map(|i| x[i]).collect();
        let mp: Vec<f64> = (0..n).map(|i| -lam[i]).collect();
        let mq: Vec<f64> = (0..n).map(|i| -lam[n + i]).collect();
        let hb = balance_hessian(&self.y, &v, &th, &mp, &mq);
        hess.view_mut((0, 0), (2 * n, 2 * n)).add_assign(&hb);
        for (r, q) in self.ineqs.iter().enumerate() {
            if mu[r] == 0.0 {
                continue;
            }
            if let Value::Line(l) = q.value {
                let (_, _, h4, cols) = self.line_p(l, x);
                for a in 0..4 {
                    for b in 0..4 {
                        hess[(cols[a], cols[b])] += mu[r] * q.sign * h4[a][b];
                    }
                }
            }
            if let Some(Some(term)) = q.margin.map(|m| &self.terms[m]) {
                term.add_hessian(x, mu[r], &mut hess);
            }
        }
        hess
    }
}

fn worst_violation(nlp: &OpfNlp, e: &NlpEval) -> (f64, String) {
    let mut worst = (0.0, String::from("none"));
    for (i, g) in e.g.iter().enumerate() {
        if g.abs() > worst.0 {
            let n = nlp.lay.n;
            let name = if i < 2 * n {
                format!("{} balance bus {}", if i < n { "P" } else { "Q" }, nlp.net.buses[i % n].id)
            } else {
                format!("equality {i}")
            };
            worst = (g.abs(), name);
        }
    }
    for (r, h) in e.h.iter().enumerate() {
        if *h > worst.0 {
            worst = (*h, nlp.ineqs[r].name.clone());
        }
    }
    worst
}

/// Solves the OPF from `start` (voltages, dispatch and converter setpoints).
pub fn solve_acopf(problem: &OpfProblem, start: &OperatingPoint) -> Result<OpfSolution, OpfError> {
    let nlp = OpfNlp::new(problem)?;
    let x0 = nlp.initial_point(start, problem.start_policies.as_ref());
    let res = ipm::solve(&nlp, x0, &problem.ipm);
    let last = res.history.last().copied();
    if res.status != IpmStatus::Converged {
        let (violation, constraint) = worst_violation(&nlp, &res.eval);
        let stationarity = last.map(|p| p.gradcond).unwrap_or(f64::NAN);
        return Err(match res.status {
            IpmStatus::NumericalFailure if violation > 1e-4 => OpfError::Infeasible { violation, constraint },
            IpmStatus::NumericalFailure => OpfError::NumericalFailure { iterations: res.iterations, violation, constraint },
            _ if violation > 1e-4 => OpfError::Infeasible { violation, constraint },
            _ => OpfError::MaxIterations { iterations: res.iterations, violation, stationarity },
        });
    }
    let x = &res.x;
    let lay = &nlp.lay;
    let net = problem.net;
    let n = lay.n;
    let mut op = OperatingPoint {
        v_mag: (0..n).map(|i| x[n + i]).collect(),
        v_ang: (0..n).map(|i| x[i]).collect(),
        p_inj: vec![],
        q_inj: vec![],
        gen_p: (0..lay.ng).map(|k| x[lay.pg + k]).collect(),
        gen_q: (0..lay.ng).map(|k| x[lay.qg + k]).collect(),
        wind_p: nlp.wind_p.clone(),
        wind_q: nlp.wind_q.clone(),
        hvdc_p: (0..lay.nh).map(|c| [x[lay.pc + 2 * c], x[lay.pc + 2 * c + 1]]).collect(),
        hvdc_q: (0..lay.nh).map(|c| [x[lay.qc + 2 * c], x[lay.qc + 2 * c + 1]]).collect(),
        solved: true,
    };
    op.refresh_injections(net);
    let policies = nlp.policies(x, &problem.policy);
    let margins = nlp.terms.iter().map(|t| t.as_ref().map(|t| t.value(x)).unwrap_or(0.0)).collect();
    let binding = nlp.ineqs.iter().zip(res.eval.h.iter()).filter(|(_, h)| **h > -1e-6).map(|(q, _)| q.name.clone()).collect();
    let kkt = kkt_from(&res.eval, &res.lam, &res.mu);
    let note = degeneracy_note(&nlp, x, &res.eval);
    Ok(OpfSolution {
        objective: evaluate_objective(net, &op.gen_p),
        op,
        policies,
        status: OpfStatus::Optimal,
        kkt,
        binding,
        margins,
        iterations: res.iterations,
        note,
        x: x.iter().copied().collect(),
        lam: res.lam.iter().map(|l| l / COST_SCALE).collect(),
        mu: res.mu.iter().map(|m| m / COST_SCALE).collect(),
    })
}

/// Optimized participation factors that sit strictly inside their range while their
/// generator has slack in both directions leave the objective unchanged locally.
fn degeneracy_note(nlp: &OpfNlp, x: &DVector<f64>, e: &NlpEval) -> Option<String> {
    let lay = &nlp.lay;
    let free: Vec<u32> = lay
        .alpha_gen
        .iter()
        .enumerate()
        .filter(|(a, &k)| {
            let v = x[lay.alpha + a];
            let slack = nlp
                .ineqs
                .iter()
                .zip(e.h.iter())
                .filter(|(q, _)| matches!(q.value, Value::Var(i) if i == lay.pg + k))
                .all(|(_, h)| *h < -1e-4);
            v > 1e-4 && v < 1.0 - 1e-4 && slack
        })
        .map(|(_, &k)| nlp.net.generators[k].bus)
        .collect();
    (free.len() >= 2).then(|| format!("participation factors of generators at buses {free:?} are not uniquely determined"))
}

fn kkt_from(e: &NlpEval, lam: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
    let lx = &e.df + e.dg.tr_mul(lam) + e.dh.tr_mul(mu);
    let inf = |v: &DVector<f64>| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let primal = inf(&e.g).max(e.h.iter().fold(0.0f64, |a, h| a.max(*h)));
    KktReport {
        stationarity: inf(&lx) / (1.0 + inf(lam).max(inf(mu))),
        primal,
        complementarity: e.h.iter().zip(mu.iter()).fold(0.0f64, |a, (h, m)| a.max((h * m).abs())),
        dual_min: mu.iter().fold(f64::INFINITY, |a, m| a.min(*m)),
    }
}

/// Re-evaluates the KKT conditions of `problem` at a reported solution.
pub fn kkt_residuals(problem: &OpfProblem, solution: &OpfSolution) -> Result<KktReport, OpfError> {
    let nlp = OpfNlp::new(problem)?;
    if solution.x.len() != nlp.lay.total {
        return Err(OpfError::Problem("solution does not belong to this problem".into()));
    }
    let x = DVector::from_vec(solution.x.clone());
    let lam = DVector::from_iterator(solution.lam.len(), solution.lam.iter().map(|l| l * COST_SCALE));
    let mu = DVector::from_iterator(solution.mu.len(), solution.mu.iter().map(|m| m * COST_SCALE));
    Ok(kkt_from(&nlp.eval(&x), &lam, &mu))
}

/// Inequality names in solver order, aligned with [`OpfSolution::mu`].
pub fn inequality_names(problem: &OpfProblem) -> Result<Vec<String>, OpfError> {
    Ok(OpfNlp::new(problem)?.ineqs.into_iter().map(|q| q.name).collect())
}
