//! Files written and read by the CLI.
//!
//! `solution.json` is a [`SolutionFile`]; `report_in.json` / `report_out.json` are
//! [`ReportFile`]s. Report CSVs have columns `class,element,violations,rate_percent`;
//! `margins.csv` has `quantity,class,margin_pu,margin_mw,active` (voltage margins are
//! in p.u. in both columns).

use std::path::Path;

use anyhow::Context;
use ccopf::model::Network;
use ccopf::opf::KktReport;
use ccopf::powerflow::OperatingPoint;
use ccopf::sensitivity::{all_quantities, PolicySet, Quantity};
use ccopf::uncertainty::WindModel;
use ccopf::validation::ViolationReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDispatch {
    pub bus: u32,
    pub p_mw: f64,
    pub q_mvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HvdcDispatch {
    pub from: u32,
    pub to: u32,
    pub p_from_mw: f64,
    pub p_to_mw: f64,
    pub q_from_mvar: f64,
    pub q_to_mvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub case: String,
    pub fingerprint: String,
    pub mode: String,
    pub epsilon: f64,
    pub rho: f64,
    pub converged: bool,
    /// $/h.
    pub objective: f64,
    pub deterministic_objective: f64,
    /// Percent.
    pub cost_of_uncertainty: f64,
    pub outer_iterations: usize,
    pub certificate: Option<f64>,
    pub generated_margins: usize,
    pub wind: WindModel,
    pub policies: PolicySet,
    pub dispatch: Vec<GenDispatch>,
    pub hvdc: Vec<HvdcDispatch>,
    pub binding: Vec<String>,
    pub kkt: KktReport,
    pub note: Option<String>,
    pub operating_point: OperatingPoint,
}

impl SolutionFile {
    pub fn dispatch_of(net: &Network, op: &OperatingPoint) -> (Vec<GenDispatch>, Vec<HvdcDispatch>) {
        let mw = |x: f64| net.to_mw(x);
        let gens = net
            .generators
            .iter()
            .enumerate()
            .map(|(k, g)| GenDispatch { bus: g.bus, p_mw: mw(op.gen_p[k]), q_mvar: mw(op.gen_q[k]) })
            .collect();
        let hvdc = net
            .hvdc_lines
            .iter()
            .enumerate()
            .map(|(c, h)| HvdcDispatch {
                from: h.from,
                to: h.to,
                p_from_mw: mw(op.hvdc_p[c][0]),
                p_to_mw: mw(op.hvdc_p[c][1]),
                q_from_mvar: mw(op.hvdc_q[c][0]),
                q_to_mvar: mw(op.hvdc_q[c][1]),
            })
            .collect();
        (gens, hvdc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    /// Formulation, e.g. `cc-opt`.
    pub name: String,
    pub case: String,
    pub fingerprint: String,
    /// `in-sample` or `out-of-sample`.
    pub kind: String,
    pub source: String,
    pub objective: f64,
    pub deterministic_objective: f64,
    pub report: ViolationReport,
}

pub fn margins_csv(net: &Network, margins: &[f64], active: &[bool]) -> String {
    let mut out = String::from("quantity,class,margin_pu,margin_mw,active\n");
    for (i, q) in all_quantities(net).iter().enumerate() {
        let mw = if matches!(q, Quantity::Voltage(_)) { margins[i] } else { net.to_mw(margins[i]) };
        out.push_str(&format!("{},{},{:.9},{:.6},{}\n", q.label(net), q.class().as_str(), margins[i], mw, active[i]));
    }
    out
}

pub fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(dir, name, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a valid file of this kind", path.display()))
}
