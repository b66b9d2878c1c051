//! Polar-form AC power flow.
//!
//! State ordering used throughout the crate: a vector over `(θ, V)` has the
//! angles of all buses first, then all magnitudes. Injection vectors put the
//! active balance of all buses first, then the reactive balance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BusKind, Network};
use crate::sensitivity::PolicySet;

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PfError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {residual:.3e} p.u.)")]
    NonConvergence { iterations: usize, residual: f64, trace: Vec<f64> },
    #[error("singular power-flow Jacobian at iteration {0}")]
    Singular(usize),
    #[error("policy assigns alpha {alpha} to non-participating generator {generator}")]
    Policy { generator: usize, alpha: f64 },
}

/// Bus admittance matrix in rectangular form plus the sparsity pattern.
#[derive(Debug, Clone)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Off-diagonal neighbours per bus.
    pub neighbours: Vec<Vec<usize>>,
}

impl Admittance {
    pub fn new(net: &Network) -> Self {
        let n = net.n_bus();
        let mut g = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        let mut neighbours = vec![Vec::new(); n];
        for (i, bus) in net.buses.iter().enumerate() {
            g[(i, i)] += bus.shunt_g;
            b[(i, i)] += bus.shunt_b;
        }
        for line in &net.ac_lines {
            let (i, j) = (net.pos(line.from), net.pos(line.to));
            let (gs, bs) = line.series_admittance();
            g[(i, i)] += gs;
            g[(j, j)] += gs;
            b[(i, i)] += bs + line.charging_b / 2.0;
            b[(j, j)] += bs + line.charging_b / 2.0;
            g[(i, j)] -= gs;
            g[(j, i)] -= gs;
            b[(i, j)] -= bs;
            b[(j, i)] -= bs;
            if !neighbours[i].contains(&j) {
                neighbours[i].push(j);
                neighbours[j].push(i);
            }
        }
        for nb in &mut neighbours {
            nb.sort_unstable();
        }
        Admittance { g, b, neighbours }
    }
}

/// Local gradient and Hessian of `T = Vi·Vj·(a cos θij + b sin θij)` with respect to
/// `(θi, θj, Vi, Vj)`.
pub(crate) fn coupling_term(vi: f64, vj: f64, th: f64, a: f64, b: f64) -> (f64, [f64; 4], [[f64; 4]; 4]) {
    let (s, c) = th.sin_cos();
    let phi = a * c + b * s;
    let dphi = -a * s + b * c;
    let t = vi * vj * phi;
    let grad = [vi * vj * dphi, -vi * vj * dphi, vj * phi, vi * phi];
    let vv = vi * vj * phi;
    let hess = [
        [-vv, vv, vj * dphi, vi * dphi],
        [vv, -vv, -vj * dphi, -vi * dphi],
        [vj * dphi, -vj * dphi, 0.0, phi],
        [vi * dphi, -vi * dphi, phi, 0.0],
    ];
    (t, grad, hess)
}

/// Injection calculated from the network state: `(P, Q)` per bus.
pub fn calc_injections(y: &Admittance, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        p[i] = y.g[(i, i)] * v[i] * v[i];
        q[i] = -y.b[(i, i)] * v[i] * v[i];
        for &j in &y.neighbours[i] {
            let (s, c) = (th[i] - th[j]).sin_cos();
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            p[i] += v[i] * v[j] * (gij * c + bij * s);
            q[i] += v[i] * v[j] * (gij * s - bij * c);
        }
    }
    (p, q)
}

/// `∂(P, Q)/∂(θ, V)` of the calculated injections, dense `2N × 2N`.
pub fn jacobian(y: &Admittance, v: &[f64], th: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        jac[(i, n + i)] += 2.0 * y.g[(i, i)] * v[i];
        jac[(n + i, n + i)] -= 2.0 * y.b[(i, i)] * v[i];
        for &j in &y.neighbours[i] {
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            let cols = [i, j, n + i, n + j];
            let (_, gp, _) = coupling_term(v[i], v[j], th[i] - th[j], gij, bij);
            let (_, gq, _) = coupling_term(v[i], v[j], th[i] - th[j], -bij, gij);
            for k in 0..4 {
                jac[(i, cols[k])] += gp[k];
                jac[(n + i, cols[k])] += gq[k];
            }
        }
    }
    jac
}

/// `Σ_i mp_i ∇²P_i + mq_i ∇²Q_i` over `(θ, V)`.
pub fn balance_hessian(y: &Admittance, v: &[f64], th: &[f64], mp: &[f64], mq: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        h[(n + i, n + i)] += 2.0 * (mp[i] * y.g[(i, i)] - mq[i] * y.b[(i, i)]);
        for &j in &y.neighbours[i] {
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            let cols = [i, j, n + i, n + j];
            let (_, _, hp) = coupling_term(v[i], v[j], th[i] - th[j], gij, bij);
            let (_, _, hq) = coupling_term(v[i], v[j], th[i] - th[j], -bij, gij);
            for a in 0..4 {
                for b in 0..4 {
                    h[(cols[a], cols[b])] += mp[i] * hp[a][b] + mq[i] * hq[a][b];
                }
            }
        }
    }
    h
}

/// Branch power leaving each terminal towards the line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl LineFlow {
    pub fn loss(&self) -> f64 {
        self.p_from + self.p_to
    }
}

/// Value, gradient and Hessian over `(θi, θj, Vi, Vj)` of the sending-end active flow
/// of a line with series admittance `g + jb`.
pub(crate) fn sending_p(g: f64, b: f64, vi: f64, vj: f64, th: f64) -> (f64, [f64; 4], [[f64; 4]; 4]) {
    let (t, mut grad, mut hess) = coupling_term(vi, vj, th, -g, -b);
    grad[2] += 2.0 * vi * g;
    hess[2][2] += 2.0 * g;
    (t + vi * vi * g, grad, hess)
}

pub fn line_flows(net: &Network, op: &OperatingPoint) -> Vec<LineFlow> {
    net.ac_lines
        .iter()
        .map(|l| {
            let (i, j) = (net.pos(l.from), net.pos(l.to));
            let (g, b) = l.series_admittance();
            let bc = l.charging_b / 2.0;
            let (vi, vj) = (op.v_mag[i], op.v_mag[j]);
            let (s, c) = (op.v_ang[i] - op.v_ang[j]).sin_cos();
            LineFlow {
                p_from: vi * vi * g - vi * vj * (g * c + b * s),
                q_from: -vi * vi * (b + bc) - vi * vj * (g * s - b * c),
                p_to: vj * vj * g - vi * vj * (g * c - b * s),
                q_to: -vj * vj * (b + bc) + vi * vj * (g * s + b * c),
            }
        })
        .collect()
}

/// `∂P_L/∂(θ, V)` of every line's sending-end active flow, `|L| × 2N`.
pub fn line_flow_jacobian(net: &Network, op: &OperatingPoint) -> DMatrix<f64> {
    let n = net.n_bus();
    let mut out = DMatrix::zeros(net.ac_lines.len(), 2 * n);
    for (k, l) in net.ac_lines.iter().enumerate() {
        let (i, j) = (net.pos(l.from), net.pos(l.to));
        let (g, b) = l.series_admittance();
        let (_, grad, _) = sending_p(g, b, op.v_mag[i], op.v_mag[j], op.v_ang[i] - op.v_ang[j]);
        for (c, col) in [i, j, n + i, n + j].into_iter().enumerate() {
            out[(k, col)] += grad[c];
        }
    }
    out
}

/// Scheduled injections for a power-flow solve.
///
/// Generator active power is honoured at PV buses only (the reference bus absorbs the
/// slack). Reactive generator output is always a result of the solve since generators
/// only sit at REF and PV buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub kinds: Vec<BusKind>,
    /// Voltage magnitude setpoints; read at REF and PV buses.
    pub v_set: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    pub wind_p: Vec<f64>,
    pub wind_q: Vec<f64>,
    /// Converter terminal injections into the AC grid, `[from, to]` per HVDC line.
    pub hvdc_p: Vec<[f64; 2]>,
    pub hvdc_q: Vec<[f64; 2]>,
}

impl InjectionSpec {
    /// Net specified injection per bus including loads, excluding shunts.
    pub fn bus_injections(&self, net: &Network) -> (Vec<f64>, Vec<f64>) {
        let mut p: Vec<f64> = net.buses.iter().map(|b| -b.load_p).collect();
        let mut q: Vec<f64> = net.buses.iter().map(|b| -b.load_q).collect();
        for (k, g) in net.generators.iter().enumerate() {
            let i = net.pos(g.bus);
            p[i] += self.gen_p[k];
            q[i] += self.gen_q[k];
        }
        for (w, f) in net.wind_farms.iter().enumerate() {
            let i = net.pos(f.bus);
            p[i] += self.wind_p[w];
            q[i] += self.wind_q[w];
        }
        for (c, h) in net.hvdc_lines.iter().enumerate() {
            let (i, j) = (net.pos(h.from), net.pos(h.to));
            p[i] += self.hvdc_p[c][0];
            p[j] += self.hvdc_p[c][1];
            q[i] += self.hvdc_q[c][0];
            q[j] += self.hvdc_q[c][1];
        }
        (p, q)
    }

    fn check(&self, net: &Network) -> Result<(), PfError> {
        let n = net.n_bus();
        let ok = self.kinds.len() == n
            && self.v_set.len() == n
            && self.gen_p.len() == net.generators.len()
            && self.gen_q.len() == net.generators.len()
            && self.wind_p.len() == net.wind_farms.len()
            && self.wind_q.len() == net.wind_farms.len()
            && self.hvdc_p.len() == net.hvdc_lines.len()
            && self.hvdc_q.len() == net.hvdc_lines.len();
        if ok {
            Ok(())
        } else {
            Err(PfError::Dimension("injection spec does not match network".into()))
        }
    }
}

/// Network state together with the injections that produce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    pub wind_p: Vec<f64>,
    pub wind_q: Vec<f64>,
    pub hvdc_p: Vec<[f64; 2]>,
    pub hvdc_q: Vec<[f64; 2]>,
    pub solved: bool,
}

impl OperatingPoint {
    /// Flat voltage profile with generators at the midpoint of their range, wind at the
    /// forecast and converters carrying only their losses.
    pub fn flat(net: &Network) -> Self {
        let n = net.n_bus();
        let mut op = OperatingPoint {
            v_mag: vec![1.0; n],
            v_ang: vec![0.0; n],
            p_inj: vec![0.0; n],
            q_inj: vec![0.0; n],
            gen_p: net.generators.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect(),
            gen_q: vec![0.0; net.generators.len()],
            wind_p: net.wind_farms.iter().map(|w| w.p_forecast).collect(),
            wind_q: net.wind_farms.iter().map(|w| w.power_ratio() * w.p_forecast).collect(),
            hvdc_p: net.hvdc_lines.iter().map(|h| [-0.5 * h.loss(), -0.5 * h.loss()]).collect(),
            hvdc_q: vec![[0.0; 2]; net.hvdc_lines.len()],
            solved: false,
        };
        op.refresh_injections(net);
        op
    }

    pub fn spec(&self, net: &Network) -> InjectionSpec {
        InjectionSpec {
            kinds: net.kinds(),
            v_set: self.v_mag.clone(),
            gen_p: self.gen_p.clone(),
            gen_q: self.gen_q.clone(),
            wind_p: self.wind_p.clone(),
            wind_q: self.wind_q.clone(),
            hvdc_p: self.hvdc_p.clone(),
            hvdc_q: self.hvdc_q.clone(),
        }
    }

    /// Recomputes the calculated injections from the voltage state.
    pub fn refresh_injections(&mut self, net: &Network) {
        let y = Admittance::new(net);
        let (p, q) = calc_injections(&y, &self.v_mag, &self.v_ang);
        self.p_inj = p;
        self.q_inj = q;
    }

    fn check(&self, net: &Network) -> Result<(), PfError> {
        let n = net.n_bus();
        if self.v_mag.len() != n || self.v_ang.len() != n {
            return Err(PfError::Dimension(format!("operating point has {} buses, network {}", self.v_mag.len(), n)));
        }
        if self.gen_p.len() != net.generators.len()
            || self.wind_p.len() != net.wind_farms.len()
            || self.hvdc_p.len() != net.hvdc_lines.len()
        {
            return Err(PfError::Dimension("operating point injections do not match network".into()));
        }
        Ok(())
    }
}

/// Specified minus calculated injection, active block first (length `2N`).
pub fn pf_residual(net: &Network, op: &OperatingPoint) -> Result<Vec<f64>, PfError> {
    op.check(net)?;
    let y = Admittance::new(net);
    let (pc, qc) = calc_injections(&y, &op.v_mag, &op.v_ang);
    let (ps, qs) = op.spec(net).bus_injections(net);
    Ok(ps.iter().zip(&pc).map(|(s, c)| s - c).chain(qs.iter().zip(&qc).map(|(s, c)| s - c)).collect())
}

/// Jacobian of the calculated injections; the residual's Jacobian is its negation.
pub fn assemble_jacobian(net: &Network, op: &OperatingPoint) -> DMatrix<f64> {
    jacobian(&Admittance::new(net), &op.v_mag, &op.v_ang)
}

/// Newton–Raphson solve.
///
/// Unknowns are the angles at non-reference buses and the magnitudes at PQ buses; the
/// reference angle is zero and REF/PV magnitudes come from `spec.v_set`.
pub fn solve_power_flow(net: &Network, spec: &InjectionSpec, start: &OperatingPoint) -> Result<OperatingPoint, PfError> {
    solve_power_flow_traced(net, spec, start).map(|(op, _)| op)
}

/// [`solve_power_flow`] that also returns the max-mismatch norm of every iterate.
pub fn solve_power_flow_traced(net: &Network, spec: &InjectionSpec, start: &OperatingPoint) -> Result<(OperatingPoint, Vec<f64>), PfError> {
    spec.check(net)?;
    start.check(net)?;
    let n = net.n_bus();
    let y = Admittance::new(net);
    let (ps, qs) = spec.bus_injections(net);

    let mut v = start.v_mag.clone();
    let mut th = start.v_ang.clone();
    let mut rows = Vec::new();
    for (i, k) in spec.kinds.iter().enumerate() {
        match k {
            BusKind::Ref => {
                th[i] = 0.0;
                v[i] = spec.v_set[i];
            }
            BusKind::Pv => {
                v[i] = spec.v_set[i];
                rows.push(i);
            }
            BusKind::Pq => rows.push(i),
        }
    }
    for (i, k) in spec.kinds.iter().enumerate() {
        if *k == BusKind::Pq {
            rows.push(n + i);
        }
    }
    let m = rows.len();

    let mismatch = |v: &[f64], th: &[f64]| -> (Vec<f64>, f64) {
        let (pc, qc) = calc_injections(&y, v, th);
        let f: Vec<f64> = rows.iter().map(|&r| if r < n { ps[r] - pc[r] } else { qs[r - n] - qc[r - n] }).collect();
        let norm = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        (f, norm)
    };

    let mut trace = Vec::new();
    let (mut f, mut norm) = mismatch(&v, &th);
    trace.push(norm);
    let mut iter = 0;
    while norm > PF_TOLERANCE {
        if iter == PF_MAX_ITER || !norm.is_finite() {
            return Err(PfError::NonConvergence { iterations: iter, residual: norm, trace });
        }
        iter += 1;
        let jac = jacobian(&y, &v, &th);
        let red = DMatrix::from_fn(m, m, |a, b| jac[(rows[a], rows[b])]);
        let dx = red.lu().solve(&DVector::from_vec(f)).ok_or(PfError::Singular(iter))?;
        for (a, &r) in rows.iter().enumerate() {
            if r < n {
                th[r] += dx[a];
            } else {
                v[r - n] += dx[a];
            }
        }
        (f, norm) = mismatch(&v, &th);
        trace.push(norm);
    }

    let (pc, qc) = calc_injections(&y, &v, &th);
    let mut op = OperatingPoint {
        v_mag: v,
        v_ang: th,
        p_inj: pc.clone(),
        q_inj: qc.clone(),
        gen_p: spec.gen_p.clone(),
        gen_q: spec.gen_q.clone(),
        wind_p: spec.wind_p.clone(),
        wind_q: spec.wind_q.clone(),
        hvdc_p: spec.hvdc_p.clone(),
        hvdc_q: spec.hvdc_q.clone(),
        solved: true,
    };
    // Slack and reactive outputs: whatever the network draws beyond the other injections.
    for (k, g) in net.generators.iter().enumerate() {
        let i = net.pos(g.bus);
        match spec.kinds[i] {
            BusKind::Ref => {
                op.gen_p[k] += pc[i] - ps[i];
                op.gen_q[k] += qc[i] - qs[i];
            }
            BusKind::Pv => op.gen_q[k] += qc[i] - qs[i],
            BusKind::Pq => {}
        }
    }
    Ok((op, trace))
}

/// Scheduled injections after a wind deviation `omega` under affine response policies.
pub fn apply_response_policy(base: &OperatingPoint, policies: &PolicySet, net: &Network, omega: &[f64]) -> Result<InjectionSpec, PfError> {
    if omega.len() != net.wind_farms.len() {
        return Err(PfError::Dimension(format!("omega has {} entries, network {} wind farms", omega.len(), net.wind_farms.len())));
    }
    if policies.alpha.len() != net.generators.len()
        || policies.beta.len() != net.hvdc_lines.len()
        || policies.gamma.len() != net.wind_farms.len()
    {
        return Err(PfError::Dimension("policy set does not match network".into()));
    }
    for (k, g) in net.generators.iter().enumerate() {
        if !g.can_participate && policies.alpha[k] != 0.0 {
            return Err(PfError::Policy { generator: k, alpha: policies.alpha[k] });
        }
    }
    let total: f64 = omega.iter().sum();
    let mut spec = base.spec(net);
    for (w, d) in omega.iter().enumerate() {
        spec.wind_p[w] += d;
        spec.wind_q[w] += policies.gamma[w] * d;
    }
    for (k, a) in policies.alpha.iter().enumerate() {
        spec.gen_p[k] -= a * total;
    }
    for (c, b) in policies.beta.iter().enumerate() {
        spec.hvdc_p[c][0] += b * total;
        spec.hvdc_p[c][1] -= b * total;
    }
    Ok(spec)
}
