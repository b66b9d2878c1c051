//! Linear response of the AC operating point to wind deviations and the resulting
//! uncertainty margins.
//!
//! The bus-type partition splits the balance rows into
//! `R1 = {P_ref, Q_ref, Q_pv}` (rows whose injection change `δ` is unknown) and
//! `R2 = {P_pv, P_pq, Q_pq}`, and the state into the fixed part `{θ_ref, V_ref, V_pv}`
//! and the free part `x̂ = {θ_pv, θ_pq, V_pq}`. With `J` the Jacobian of the calculated
//! injections, `Γ^x̂ = J[R2, x̂]⁻¹ Ψ[R2]` and `Γ^δ = J[R1, x̂] Γ^x̂ − Ψ[R1]`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BusKind, Network};
use crate::powerflow::{assemble_jacobian, line_flow_jacobian, OperatingPoint};
use crate::uncertainty::{normal_quantile, WindModel};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SensError {
    #[error("reduced power-flow Jacobian is singular at this operating point")]
    Singular,
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("epsilon {0} outside (0, 0.5)")]
    Epsilon(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Affine response policies.
///
/// HVDC line `c` shifts its `from` terminal injection by `+beta[c]·Ω` and its `to`
/// terminal by `−beta[c]·Ω`, where `Ω` is the total wind deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    /// Per generator in network order.
    pub alpha: Vec<f64>,
    /// Per HVDC line.
    pub beta: Vec<f64>,
    /// Per wind farm.
    pub gamma: Vec<f64>,
}

pub const ALPHA_SUM_TOL: f64 = 1e-9;

impl PolicySet {
    /// Equal shares over the participating generators, no HVDC response.
    pub fn uniform(net: &Network) -> Self {
        let part = net.participating();
        let mut alpha = vec![0.0; net.generators.len()];
        for &k in &part {
            alpha[k] = 1.0 / part.len() as f64;
        }
        PolicySet { alpha, beta: vec![0.0; net.hvdc_lines.len()], gamma: wind_gamma(net) }
    }

    pub fn new(net: &Network, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, SensError> {
        let p = PolicySet { alpha, beta, gamma: wind_gamma(net) };
        p.validate(net)?;
        Ok(p)
    }

    pub fn validate(&self, net: &Network) -> Result<(), SensError> {
        if self.alpha.len() != net.generators.len() || self.beta.len() != net.hvdc_lines.len() || self.gamma.len() != net.wind_farms.len() {
            return Err(SensError::Dimension("policy set does not match network".into()));
        }
        for (k, (a, g)) in self.alpha.iter().zip(&net.generators).enumerate() {
            if !a.is_finite() || *a < 0.0 {
                return Err(SensError::Policy(format!("alpha[{k}] = {a} must be a non-negative number")));
            }
            if !g.can_participate && *a != 0.0 {
                return Err(SensError::Policy(format!("generator {k} at bus {} does not participate", g.bus)));
            }
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > ALPHA_SUM_TOL {
            return Err(SensError::Policy(format!("alpha sums to {sum}, expected 1")));
        }
        if let Some(b) = self.beta.iter().find(|b| !b.is_finite()) {
            return Err(SensError::Policy(format!("beta {b} is not finite")));
        }
        Ok(())
    }
}

pub fn wind_gamma(net: &Network) -> Vec<f64> {
    net.wind_farms.iter().map(|w| w.power_ratio()).collect()
}

/// Column blocks of the structural GDF: one column per wind farm, per generator
/// response unit and per HVDC response unit.
fn structural_gdf(net: &Network, gamma: &[f64]) -> DMatrix<f64> {
    let n = net.n_bus();
    let (w, g, h) = (net.wind_farms.len(), net.generators.len(), net.hvdc_lines.len());
    let mut psi = DMatrix::zeros(2 * n, w + g + h);
    for (c, f) in net.wind_farms.iter().enumerate() {
        let i = net.pos(f.bus);
        psi[(i, c)] += 1.0;
        psi[(n + i, c)] += gamma[c];
    }
    for (k, gen) in net.generators.iter().enumerate() {
        psi[(net.pos(gen.bus), w + k)] -= 1.0;
    }
    for (c, line) in net.hvdc_lines.iter().enumerate() {
        psi[(net.pos(line.from), w + g + c)] += 1.0;
        psi[(net.pos(line.to), w + g + c)] -= 1.0;
    }
    psi
}

/// GDF matrix `Ψ(α, β, γ)`, `2N × |W|`: scheduled injection change per unit deviation.
pub fn assemble_gdf(net: &Network, policies: &PolicySet) -> DMatrix<f64> {
    let n = net.n_bus();
    let w = net.wind_farms.len();
    let mut psi = DMatrix::zeros(2 * n, w);
    for (c, f) in net.wind_farms.iter().enumerate() {
        let i = net.pos(f.bus);
        psi[(i, c)] += 1.0;
        psi[(n + i, c)] += policies.gamma[c];
    }
    for (k, gen) in net.generators.iter().enumerate() {
        let i = net.pos(gen.bus);
        for c in 0..w {
            psi[(i, c)] -= policies.alpha[k];
        }
    }
    for (l, line) in net.hvdc_lines.iter().enumerate() {
        let (i, j) = (net.pos(line.from), net.pos(line.to));
        for c in 0..w {
            psi[(i, c)] += policies.beta[l];
            psi[(j, c)] -= policies.beta[l];
        }
    }
    psi
}

/// Row and column index sets of the bus-type partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Free state entries, as indices into the `(θ, V)` ordering.
    pub x_hat: Vec<usize>,
    /// Balance rows with unknown injection change `δ`, indices into the `(P, Q)` ordering.
    pub r1: Vec<usize>,
    /// Balance rows with scheduled injection change.
    pub r2: Vec<usize>,
}

impl Partition {
    pub fn new(kinds: &[BusKind]) -> Self {
        let n = kinds.len();
        let of = |k: BusKind| (0..n).filter(move |&i| kinds[i] == k);
        let non_ref = (0..n).filter(|&i| kinds[i] != BusKind::Ref);
        let x_hat: Vec<usize> = non_ref.clone().chain(of(BusKind::Pq).map(|i| n + i)).collect();
        let r1 = of(BusKind::Ref).chain(of(BusKind::Ref).map(|i| n + i)).chain(of(BusKind::Pv).map(|i| n + i)).collect();
        let r2 = non_ref.chain(of(BusKind::Pq).map(|i| n + i)).collect();
        Partition { x_hat, r1, r2 }
    }

    pub fn state_row(&self, state_index: usize) -> Option<usize> {
        self.x_hat.iter().position(|&x| x == state_index)
    }

    pub fn delta_row(&self, balance_index: usize) -> Option<usize> {
        self.r1.iter().position(|&r| r == balance_index)
    }
}

#[derive(Debug, Clone)]
pub struct GammaPair {
    /// `Γ^x̂`, rows ordered as `partition.x_hat`.
    pub state: DMatrix<f64>,
    /// `Γ^δ`, rows ordered as `partition.r1`.
    pub delta: DMatrix<f64>,
    pub partition: Partition,
}

/// Sensitivities of the free states and the unknown injections to the GDF columns.
pub fn partition_and_solve(jac: &DMatrix<f64>, psi: &DMatrix<f64>, kinds: &[BusKind]) -> Result<GammaPair, SensError> {
    let n = kinds.len();
    if jac.nrows() != 2 * n || jac.ncols() != 2 * n || psi.nrows() != 2 * n {
        return Err(SensError::Dimension(format!("expected {0}×{0} Jacobian and {0}-row GDF", 2 * n)));
    }
    let part = Partition::new(kinds);
    let m = part.x_hat.len();
    let cols = psi.ncols();
    let j4 = DMatrix::from_fn(m, m, |a, b| jac[(part.r2[a], part.x_hat[b])]);
    let j2 = DMatrix::from_fn(part.r1.len(), m, |a, b| jac[(part.r1[a], part.x_hat[b])]);
    let psi2 = DMatrix::from_fn(m, cols, |a, c| psi[(part.r2[a], c)]);
    let psi1 = DMatrix::from_fn(part.r1.len(), cols, |a, c| psi[(part.r1[a], c)]);
    let lu = j4.lu();
    let state = if m == 0 { DMatrix::zeros(0, cols) } else { lu.solve(&psi2).ok_or(SensError::Singular)? };
    if !state.iter().all(|x| x.is_finite()) {
        return Err(SensError::Singular);
    }
    let delta = j2 * &state - psi1;
    Ok(GammaPair { state, delta, partition: part })
}

/// `Γ^{P_L}`: sending-end active flow sensitivity of every line, `|L| × cols`.
pub fn flow_sensitivities(net: &Network, op: &OperatingPoint, gamma: &GammaPair) -> DMatrix<f64> {
    let dl = line_flow_jacobian(net, op);
    let xs = &gamma.partition.x_hat;
    let dl_hat = DMatrix::from_fn(dl.nrows(), xs.len(), |l, a| dl[(l, xs[a])]);
    dl_hat * &gamma.state
}

/// `Φ⁻¹(1−ε)·√(γ Σ γᵀ)`.
pub fn uncertainty_margin(row: &[f64], sigma: &DMatrix<f64>, epsilon: f64) -> Result<f64, SensError> {
    let z = margin_factor(epsilon)?;
    if row.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    Ok(z * quad(row, sigma).max(0.0).sqrt())
}

pub fn margin_factor(epsilon: f64) -> Result<f64, SensError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(SensError::Epsilon(epsilon));
    }
    normal_quantile(1.0 - epsilon).map_err(|_| SensError::Epsilon(epsilon))
}

fn quad(row: &[f64], sigma: &DMatrix<f64>) -> f64 {
    bilinear(row, sigma, row)
}

fn bilinear(a: &[f64], sigma: &DMatrix<f64>, b: &[f64]) -> f64 {
    let w = a.len();
    let mut s = 0.0;
    for i in 0..w {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..w {
            s += a[i] * sigma[(i, j)] * b[j];
        }
    }
    s
}

/// Constraint classes reported by the validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintClass {
    GenP,
    GenQ,
    Voltage,
    LineP,
    HvdcP,
}

impl ConstraintClass {
    pub const ALL: [ConstraintClass; 5] =
        [ConstraintClass::GenP, ConstraintClass::GenQ, ConstraintClass::Voltage, ConstraintClass::LineP, ConstraintClass::HvdcP];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintClass::GenP => "P_G",
            ConstraintClass::GenQ => "Q_G",
            ConstraintClass::Voltage => "V",
            ConstraintClass::LineP => "P_L",
            ConstraintClass::HvdcP => "P_C",
        }
    }
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A quantity whose limits are tightened by a margin. Both bounds of a quantity share
/// the same margin since the response is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    /// Active output of generator `k`.
    GenP(usize),
    /// Reactive output of generator `k`.
    GenQ(usize),
    /// Voltage magnitude at bus position `i` (PQ buses only).
    Voltage(usize),
    /// Sending-end active flow of AC line `l`.
    LineP(usize),
    /// Active injection of HVDC line `c` at either terminal.
    HvdcP(usize),
}

impl Quantity {
    pub fn class(&self) -> ConstraintClass {
        match self {
            Quantity::GenP(_) => ConstraintClass::GenP,
            Quantity::GenQ(_) => ConstraintClass::GenQ,
            Quantity::Voltage(_) => ConstraintClass::Voltage,
            Quantity::LineP(_) => ConstraintClass::LineP,
            Quantity::HvdcP(_) => ConstraintClass::HvdcP,
        }
    }

    /// Human-readable element name, e.g. `P_G bus 3` or `P_L 2-10`.
    pub fn label(&self, net: &Network) -> String {
        match *self {
            Quantity::GenP(k) => format!("P_G bus {}", net.generators[k].bus),
            Quantity::GenQ(k) => format!("Q_G bus {}", net.generators[k].bus),
            Quantity::Voltage(i) => format!("V bus {}", net.buses[i].id),
            Quantity::LineP(l) => format!("P_L {}-{}", net.ac_lines[l].from, net.ac_lines[l].to),
            Quantity::HvdcP(c) => format!("P_C {}-{}", net.hvdc_lines[c].from, net.hvdc_lines[c].to),
        }
    }

    /// Margins of generator and HVDC active power are linear in the policies.
    pub fn is_linear(&self, net: &Network) -> bool {
        match *self {
            Quantity::GenP(k) => net.pos(net.generators[k].bus) != net.ref_bus(),
            Quantity::HvdcP(_) => true,
            _ => false,
        }
    }
}

/// Every quantity that carries a margin, in a fixed order.
pub fn all_quantities(net: &Network) -> Vec<Quantity> {
    let mut q: Vec<Quantity> = (0..net.generators.len()).map(Quantity::GenP).collect();
    q.extend((0..net.generators.len()).map(Quantity::GenQ));
    q.extend((0..net.n_bus()).filter(|&i| net.buses[i].kind == BusKind::Pq).map(Quantity::Voltage));
    q.extend((0..net.ac_lines.len()).map(Quantity::LineP));
    q.extend((0..net.hvdc_lines.len()).map(Quantity::HvdcP));
    q
}

/// Sensitivity row of one quantity as an affine function of the policies:
/// `Γ(α, β) = base + s(α, β)·𝟙` with `s = per_gen·α + per_hvdc·β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub base: Vec<f64>,
    pub per_gen: Vec<f64>,
    pub per_hvdc: Vec<f64>,
}

impl ResponseRow {
    pub fn shift(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        self.per_gen.iter().zip(alpha).map(|(p, a)| p * a).sum::<f64>() + self.per_hvdc.iter().zip(beta).map(|(p, b)| p * b).sum::<f64>()
    }

    pub fn row(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let s = self.shift(alpha, beta);
        self.base.iter().map(|b| b + s).collect()
    }
}

/// Variance of a response row as a quadratic in its shift: `a + 2 b s + c s²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowVariance {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl RowVariance {
    pub fn new(row: &ResponseRow, sigma: &DMatrix<f64>) -> Self {
        let ones = vec![1.0; row.base.len()];
        RowVariance { a: quad(&row.base, sigma), b: bilinear(&row.base, sigma, &ones), c: quad(&ones, sigma) }
    }

    pub fn at(&self, s: f64) -> f64 {
        (self.a + 2.0 * self.b * s + self.c * s * s).max(0.0)
    }
}

/// Response rows of every margin-carrying quantity, linearized at one operating point.
///
/// The policies stay symbolic: a margin can be evaluated for any `(α, β)` without
/// refactorizing the Jacobian.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    pub quantities: Vec<Quantity>,
    pub rows: Vec<ResponseRow>,
    pub variances: Vec<RowVariance>,
    /// `Φ⁻¹(1 − ε)`.
    pub z: f64,
}

impl ResponseModel {
    pub fn build(net: &Network, op: &OperatingPoint, wind: &WindModel, epsilon: f64) -> Result<Self, SensError> {
        let z = margin_factor(epsilon)?;
        let w = net.wind_farms.len();
        if wind.dim() != w {
            return Err(SensError::Dimension(format!("wind model has {} farms, network {w}", wind.dim())));
        }
        let g = net.generators.len();
        let jac = assemble_jacobian(net, op);
        let psi = structural_gdf(net, &wind_gamma(net));
        let gamma = partition_and_solve(&jac, &psi, &net.kinds())?;
        let flows = flow_sensitivities(net, op, &gamma);
        let n = net.n_bus();
        let sigma = wind.sigma();
        let split = |r: Vec<f64>| ResponseRow { base: r[..w].to_vec(), per_gen: r[w..w + g].to_vec(), per_hvdc: r[w + g..].to_vec() };
        let row_of = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
        let width = psi.ncols();

        let quantities = all_quantities(net);
        let mut rows = Vec::with_capacity(quantities.len());
        for q in &quantities {
            let r = match *q {
                Quantity::GenP(k) => {
                    let i = net.pos(net.generators[k].bus);
                    let mut r = match net.buses[i].kind {
                        BusKind::Ref => row_of(&gamma.delta, gamma.partition.delta_row(i).expect("P_ref row")),
                        _ => vec![0.0; width],
                    };
                    r[w + k] -= 1.0;
                    r
                }
                Quantity::GenQ(k) => {
                    let i = net.pos(net.generators[k].bus);
                    match gamma.partition.delta_row(n + i) {
                        Some(d) => row_of(&gamma.delta, d),
                        None => vec![0.0; width],
                    }
                }
                Quantity::Voltage(i) => row_of(&gamma.state, gamma.partition.state_row(n + i).expect("PQ voltage row")),
                Quantity::LineP(l) => row_of(&flows, l),
                Quantity::HvdcP(c) => {
                    let mut r = vec![0.0; width];
                    r[w + g + c] = 1.0;
                    r
                }
            };
            rows.push(split(r));
        }
        let variances = rows.iter().map(|r| RowVariance::new(r, &sigma)).collect();
        Ok(ResponseModel { quantities, rows, variances, z })
    }

    pub fn margin(&self, index: usize, alpha: &[f64], beta: &[f64]) -> f64 {
        let s = self.rows[index].shift(alpha, beta);
        self.z * self.variances[index].at(s).sqrt()
    }

    pub fn margins(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.margin(i, alpha, beta)).collect()
    }

    pub fn index_of(&self, q: Quantity) -> Option<usize> {
        self.quantities.iter().position(|x| *x == q)
    }
}

/// Sensitivities and margins at one operating point for one policy set.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub gamma_state: DMatrix<f64>,
    pub gamma_delta: DMatrix<f64>,
    pub gamma_flow: DMatrix<f64>,
    /// Active response per generator, `|G| × |W|`.
    pub gamma_genp: DMatrix<f64>,
    /// Active response of each HVDC line's `from` terminal; the `to` terminal is its
    /// negation.
    pub gamma_hvdc: DMatrix<f64>,
    pub partition: Partition,
    pub quantities: Vec<Quantity>,
    /// Sensitivity row per quantity, aligned with `quantities`.
    pub rows: Vec<Vec<f64>>,
    /// Margin per quantity, aligned with `quantities`.
    pub margins: Vec<f64>,
}

/// Evaluates `Ψ` for the given policies and derives every margin from it.
pub fn margins_for_all_constraints(
    net: &Network,
    op: &OperatingPoint,
    policies: &PolicySet,
    wind: &WindModel,
    epsilon: f64,
) -> Result<SensitivityBundle, SensError> {
    policies.validate(net)?;
    margin_factor(epsilon)?;
    let w = net.wind_farms.len();
    if wind.dim() != w {
        return Err(SensError::Dimension(format!("wind model has {} farms, network {w}", wind.dim())));
    }
    let n = net.n_bus();
    let jac = assemble_jacobian(net, op);
    let psi = assemble_gdf(net, policies);
    let gamma = partition_and_solve(&jac, &psi, &net.kinds())?;
    let flows = flow_sensitivities(net, op, &gamma);
    let sigma = wind.sigma();
    let ref_bus = net.ref_bus();

    let mut genp = DMatrix::zeros(net.generators.len(), w);
    for (k, g) in net.generators.iter().enumerate() {
        let i = net.pos(g.bus);
        for c in 0..w {
            genp[(k, c)] = -policies.alpha[k];
            if i == ref_bus {
                genp[(k, c)] += gamma.delta[(gamma.partition.delta_row(i).expect("P_ref row"), c)];
            }
        }
    }
    let hvdc = DMatrix::from_fn(net.hvdc_lines.len(), w, |c, _| policies.beta[c]);

    let quantities = all_quantities(net);
    let mut rows = Vec::with_capacity(quantities.len());
    for q in &quantities {
        let r: Vec<f64> = match *q {
            Quantity::GenP(k) => genp.row(k).iter().copied().collect(),
            Quantity::GenQ(k) => match gamma.partition.delta_row(n + net.pos(net.generators[k].bus)) {
                Some(d) => gamma.delta.row(d).iter().copied().collect(),
                None => vec![0.0; w],
            },
            Quantity::Voltage(i) => gamma.state.row(gamma.partition.state_row(n + i).expect("PQ voltage row")).iter().copied().collect(),
            Quantity::LineP(l) => flows.row(l).iter().copied().collect(),
            Quantity::HvdcP(c) => hvdc.row(c).iter().copied().collect(),
        };
        rows.push(r);
    }
    let margins = rows.iter().map(|r| uncertainty_margin(r, &sigma, epsilon)).collect::<Result<Vec<_>, _>>()?;
    Ok(SensitivityBundle {
        gamma_state: gamma.state,
        gamma_delta: gamma.delta,
        gamma_flow: flows,
        gamma_genp: genp,
        gamma_hvdc: hvdc,
        partition: gamma.partition,
        quantities,
        rows,
        margins,
    })
}

impl SensitivityBundle {
    /// CSV table: element, class, margin in MW (p.u. for voltages), then one
    /// sensitivity column per wind farm.
    pub fn to_csv(&self, net: &Network) -> String {
        let mut out = String::from("element,class,margin");
        for f in &net.wind_farms {
            out.push_str(&format!(",gamma_{}", f.id));
        }
        out.push('\n');
        for ((q, m), r) in self.quantities.iter().zip(&self.margins).zip(&self.rows) {
            let scale = if q.class() == ConstraintClass::Voltage { 1.0 } else { net.base_mva };
            out.push_str(&format!("{},{},{}", q.label(net), q.class(), m * scale));
            for x in r {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}
