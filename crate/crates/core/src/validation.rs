//! Monte Carlo assessment of a dispatch with response policies against wind samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Network;
use crate::powerflow::{apply_response_policy, line_flows, solve_power_flow, OperatingPoint};
use crate::sensitivity::{ConstraintClass, PolicySet};
use crate::uncertainty::SampleSet;

/// Rates below this many percent are reported as zero.
pub const RATE_FLOOR_PERCENT: f64 = 0.1;
/// A limit counts as violated when exceeded by more than this, p.u.
pub const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ValidationError {
    #[error("samples have {got} columns, network has {expected} wind farms")]
    Dimension { got: usize, expected: usize },
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("base cost must be positive, got {0}")]
    BaseCost(f64),
    #[error("no runs")]
    NoRuns,
    #[error("runs disagree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRate {
    pub class: ConstraintClass,
    pub element: String,
    pub violations: usize,
    /// Percent of converged samples, after the floor.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRate {
    pub class: ConstraintClass,
    /// Largest per-element rate, percent.
    pub rate: f64,
    pub worst: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub classes: Vec<ClassRate>,
    pub elements: Vec<ElementRate>,
    pub samples: usize,
    pub non_converged: usize,
    /// Whether any non-zero raw rate was floored to zero.
    pub floor_applied: bool,
}

impl ViolationReport {
    pub fn class_rate(&self, class: ConstraintClass) -> f64 {
        self.classes.iter().find(|c| c.class == class).map(|c| c.rate).unwrap_or(0.0)
    }

    pub fn max_rate(&self) -> f64 {
        self.classes.iter().map(|c| c.rate).fold(0.0, f64::max)
    }

    /// `class,element,violations,rate_percent`, one row per element.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,element,violations,rate_percent\n");
        for e in &self.elements {
            out.push_str(&format!("{},{},{},{:.4}\n", e.class.as_str(), e.element, e.violations, e.rate));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "samples: {}  non-converged: {}  floor: {} %{}\n",
            self.samples,
            self.non_converged,
            RATE_FLOOR_PERCENT,
            if self.floor_applied { " (applied)" } else { "" }
        );
        out.push_str(&format!("{:<6} {:>9}  {}\n", "class", "max rate", "worst element"));
        for c in &self.classes {
            out.push_str(&format!("{:<6} {:>8.2}%  {}\n", c.class.as_str(), c.rate, c.worst.as_deref().unwrap_or("-")));
        }
        out
    }
}

/// Limits checked per sample, in report order.
struct Element {
    class: ConstraintClass,
    name: String,
}

fn elements(net: &Network) -> Vec<Element> {
    let mut out = Vec::new();
    for g in &net.generators {
        out.push(Element { class: ConstraintClass::GenP, name: format!("P_G bus {}", g.bus) });
    }
    for g in &net.generators {
        out.push(Element { class: ConstraintClass::GenQ, name: format!("Q_G bus {}", g.bus) });
    }
    for b in &net.buses {
        out.push(Element { class: ConstraintClass::Voltage, name: format!("V bus {}", b.id) });
    }
    for l in &net.ac_lines {
        out.push(Element { class: ConstraintClass::LineP, name: format!("P_L {}-{}", l.from, l.to) });
    }
    for h in &net.hvdc_lines {
        for bus in [h.from, h.to] {
            out.push(Element { class: ConstraintClass::HvdcP, name: format!("P_C {}-{} bus {bus}", h.from, h.to) });
        }
    }
    out
}

/// Violated elements at a solved operating point, aligned with [`elements`].
fn violations(net: &Network, op: &OperatingPoint) -> Vec<bool> {
    let out_of = |v: f64, lo: f64, hi: f64| v > hi + VIOLATION_TOL || v < lo - VIOLATION_TOL;
    let mut v = Vec::new();
    for (k, g) in net.generators.iter().enumerate() {
        v.push(out_of(op.gen_p[k], g.p_min, g.p_max));
    }
    for (k, g) in net.generators.iter().enumerate() {
        v.push(out_of(op.gen_q[k], g.q_min, g.q_max));
    }
    for (i, b) in net.buses.iter().enumerate() {
        v.push(out_of(op.v_mag[i], b.v_min, b.v_max));
    }
    for (f, l) in line_flows(net, op).iter().zip(&net.ac_lines) {
        v.push(out_of(f.p_from, -l.p_max, l.p_max));
    }
    for (c, h) in net.hvdc_lines.iter().enumerate() {
        for t in 0..2 {
            v.push(out_of(op.hvdc_p[c][t], -h.p_limit(), h.p_limit()));
        }
    }
    v
}

fn replay(net: &Network, base: &OperatingPoint, policies: &PolicySet, omega: &[f64]) -> Option<Vec<bool>> {
    let spec = apply_response_policy(base, policies, net, omega).ok()?;
    let op = solve_power_flow(net, &spec, base).ok()?;
    Some(violations(net, &op))
}

/// Replays every sample through the response policies and the AC power flow and
/// counts violations of the physical limits.
pub fn monte_carlo(
    net: &Network,
    base: &OperatingPoint,
    policies: &PolicySet,
    samples: &SampleSet,
) -> Result<ViolationReport, ValidationError> {
    if samples.ids.len() != net.wind_farms.len() {
        return Err(ValidationError::Dimension { got: samples.ids.len(), expected: net.wind_farms.len() });
    }
    policies.validate(net).map_err(|e| ValidationError::Policy(e.to_string()))?;
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Option<Vec<bool>>> = {
        use rayon::prelude::*;
        samples.rows.par_iter().map(|w| replay(net, base, policies, w)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Option<Vec<bool>>> = samples.rows.iter().map(|w| replay(net, base, policies, w)).collect();

    let elems = elements(net);
    let mut counts = vec![0usize; elems.len()];
    let mut converged = 0usize;
    for o in outcomes.iter().flatten() {
        converged += 1;
        for (c, v) in counts.iter_mut().zip(o) {
            *c += usize::from(*v);
        }
    }
    Ok(build_report(&elems, &counts, converged, samples.len()))
}

fn build_report(elems: &[Element], counts: &[usize], converged: usize, samples: usize) -> ViolationReport {
    let mut floor_applied = false;
    let elements: Vec<ElementRate> = elems
        .iter()
        .zip(counts)
        .map(|(e, &n)| {
            let raw = if converged == 0 { 0.0 } else { 100.0 * n as f64 / converged as f64 };
            let rate = floor_rate(raw);
            floor_applied |= raw > 0.0 && rate == 0.0;
            ElementRate { class: e.class, element: e.name.clone(), violations: n, rate }
        })
        .collect();
    let classes = ConstraintClass::ALL
        .iter()
        .map(|&class| {
            let worst = elements.iter().filter(|e| e.class == class && e.rate > 0.0).max_by(|a, b| a.rate.total_cmp(&b.rate));
            ClassRate { class, rate: worst.map(|e| e.rate).unwrap_or(0.0), worst: worst.map(|e| e.element.clone()) }
        })
        .collect();
    ViolationReport { classes, elements, samples, non_converged: samples - converged, floor_applied }
}

/// Rates below [`RATE_FLOOR_PERCENT`] become zero.
pub fn floor_rate(percent: f64) -> f64 {
    if percent < RATE_FLOOR_PERCENT {
        0.0
    } else {
        percent
    }
}

/// `(f_u − f_0) / f_0 · 100`.
pub fn cost_of_uncertainty(f_u: f64, f_0: f64) -> Result<f64, ValidationError> {
    if !(f_0 > 0.0) {
        return Err(ValidationError::BaseCost(f_0));
    }
    Ok((f_u - f_0) / f_0 * 100.0)
}

/// One formulation's outcome for [`compare_runs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub objective: f64,
    pub report: ViolationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    /// `rates[class][run]`, percent.
    pub rates: Vec<Vec<f64>>,
    pub objectives: Vec<f64>,
    /// Relative to the first run whose name starts with `det`, else the cheapest run.
    pub cost_of_uncertainty: Vec<f64>,
}

pub fn compare_runs(runs: &[RunSummary]) -> Result<Comparison, ValidationError> {
    if runs.is_empty() {
        return Err(ValidationError::NoRuns);
    }
    for r in runs {
        let classes: Vec<_> = r.report.classes.iter().map(|c| c.class).collect();
        if classes != ConstraintClass::ALL {
            return Err(ValidationError::Mismatch(format!("run {} has classes {classes:?}", r.name)));
        }
    }
    let base = runs
        .iter()
        .find(|r| r.name.starts_with("det"))
        .map(|r| r.objective)
        .unwrap_or_else(|| runs.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min));
    let cost_of_uncertainty = runs.iter().map(|r| cost_of_uncertainty(r.objective, base)).collect::<Result<_, _>>()?;
    Ok(Comparison {
        names: runs.iter().map(|r| r.name.clone()).collect(),
        rates: ConstraintClass::ALL.iter().map(|&c| runs.iter().map(|r| r.report.class_rate(c)).collect()).collect(),
        objectives: runs.iter().map(|r| r.objective).collect(),
        cost_of_uncertainty,
    })
}

impl Comparison {
    /// `metric,<run>…` with one row per class, then cost and cost of uncertainty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,{}\n", self.names.join(","));
        for (c, row) in ConstraintClass::ALL.iter().zip(&self.rates) {
            out.push_str(&format!("{}_rate_percent,{}\n", c.as_str(), row.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(",")));
        }
        out.push_str(&format!("cost_per_h,{}\n", self.objectives.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(",")));
        out.push_str(&format!(
            "cost_of_uncertainty_percent,{}\n",
            self.cost_of_uncertainty.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(",")
        ));
        out
    }

    pub fn to_text(&self) -> String {
        let w = self.names.iter().map(|n| n.len()).max().unwrap_or(0).max(10);
        let mut out = format!("{:<8}", "");
        for n in &self.names {
            out.push_str(&format!(" {n:>w$}"));
        }
        out.push('\n');
        for (c, row) in ConstraintClass::ALL.iter().zip(&self.rates) {
            out.push_str(&format!("{:<8}", c.as_str()));
            for r in row {
                out.push_str(&format!(" {:>w$}", format!("{r:.2}%")));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<8}", "cost"));
        for o in &self.objectives {
            out.push_str(&format!(" {:>w$}", format!("{o:.1}")));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "CoU"));
        for c in &self.cost_of_uncertainty {
            out.push_str(&format!(" {:>w$}", format!("{c:.2}%")));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{BusKind, WindFarm};
    use crate::uncertainty::Provenance;

    fn windy_two_bus() -> (Network, OperatingPoint) {
        let mut net = two_bus(1.0, 0.2);
        net.buses[1].kind = BusKind::Pq;
        net.wind_farms.push(WindFarm { id: "w".into(), bus: 2, p_forecast: 0.4, p_rated: 1.0, power_factor: 1.0 });
        let start = OperatingPoint::flat(&net);
        let op = solve_power_flow(&net, &start.spec(&net), &start).unwrap();
        (net, op)
    }

    fn samples(rows: Vec<Vec<f64>>) -> SampleSet {
        SampleSet { ids: vec!["w".into()], rows, provenance: Provenance::SyntheticGaussian { seed: 0 } }
    }

    #[test]
    fn zero_samples_have_no_violations() {
        let (net, op) = windy_two_bus();
        let r = monte_carlo(&net, &op, &PolicySet::uniform(&net), &samples(vec![vec![0.0]; 50])).unwrap();
        assert_eq!(r.max_rate(), 0.0);
        assert_eq!(r.non_converged, 0);
        assert!(!r.floor_applied);
    }

    #[test]
    fn floor_boundary() {
        assert_eq!(floor_rate(0.0999), 0.0);
        assert_eq!(floor_rate(0.1), 0.1);
        assert_eq!(floor_rate(3.0), 3.0);
    }

    #[test]
    fn counts_against_a_tight_generator_limit() {
        let (mut net, op) = windy_two_bus();
        // generator output is 1 − 0.4 + losses: limit it just above the base point
        net.generators[0].p_max = op.gen_p[0] + 0.05;
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![if i < 30 { -0.1 } else { 0.1 }]).collect();
        let r = monte_carlo(&net, &op, &PolicySet::uniform(&net), &samples(rows)).unwrap();
        assert!((r.class_rate(ConstraintClass::GenP) - 30.0).abs() < 1e-9);
        assert_eq!(r.classes[0].worst.as_deref(), Some("P_G bus 1"));
    }

    #[test]
    fn wrong_dimension() {
        let (net, op) = windy_two_bus();
        let s = SampleSet { ids: vec!["a".into(), "b".into()], rows: vec![], provenance: Provenance::SyntheticGaussian { seed: 0 } };
        assert!(matches!(monte_carlo(&net, &op, &PolicySet::uniform(&net), &s), Err(ValidationError::Dimension { .. })));
    }

    #[test]
    fn cost_of_uncertainty_arithmetic() {
        assert_eq!(cost_of_uncertainty(5.0, 5.0).unwrap(), 0.0);
        assert!((cost_of_uncertainty(27.69e5, 27.14e5).unwrap() - 2.0265).abs() < 1e-3);
        assert!((cost_of_uncertainty(27.25e5, 27.14e5).unwrap() - 0.405).abs() < 1e-3);
        assert!(cost_of_uncertainty(1.0, 0.0).is_err());
    }

    fn report(rate: f64) -> ViolationReport {
        let elems: Vec<Element> = ConstraintClass::ALL.iter().map(|&c| Element { class: c, name: c.as_str().into() }).collect();
        let n = (rate * 10.0) as usize;
        build_report(&elems, &[n, 0, 0, n, 0], 1000, 1000)
    }

    #[test]
    fn compare_shapes() {
        assert_eq!(compare_runs(&[]), Err(ValidationError::NoRuns));
        let one = compare_runs(&[RunSummary { name: "cc-opt".into(), objective: 10.0, report: report(5.0) }]).unwrap();
        assert_eq!(one.rates.len(), 5);
        assert_eq!(one.rates[0], vec![5.0]);
        assert_eq!(one.cost_of_uncertainty, vec![0.0]);
        let runs = vec![
            RunSummary { name: "det".into(), objective: 100.0, report: report(49.0) },
            RunSummary { name: "cc-fixed".into(), objective: 102.0, report: report(5.0) },
            RunSummary { name: "cc-opt".into(), objective: 101.0, report: report(4.9) },
        ];
        let t = compare_runs(&runs).unwrap();
        assert_eq!(t.rates.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![3; 5]);
        assert!((t.cost_of_uncertainty[1] - 2.0).abs() < 1e-12);
        assert!(t.to_csv().starts_with("metric,det,cc-fixed,cc-opt\nP_G_rate_percent,49.00,5.00,4.90\n"));
    }
}
