//! Network data model in per-unit.
//!
//! Every electrical quantity stored here is per-unit on [`Network::base_mva`];
//! cost coefficients stay in $/h per MW², $/h per MW and $/h, so objective
//! evaluation converts dispatch back to MW first.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default system base when a case does not declare one.
pub const DEFAULT_BASE_MVA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    Ref,
    Pv,
    Pq,
}

impl BusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Ref => "REF",
            BusKind::Pv => "PV",
            BusKind::Pq => "PQ",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "REF" | "SLACK" => Some(BusKind::Ref),
            "PV" => Some(BusKind::Pv),
            "PQ" => Some(BusKind::Pq),
            _ => None,
        }
    }
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    pub load_p: f64,
    pub load_q: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

/// Pi-model AC branch without off-nominal taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcLine {
    pub from: u32,
    pub to: u32,
    pub series_r: f64,
    pub series_x: f64,
    /// Total line charging susceptance; half is placed at each end.
    pub charging_b: f64,
    /// Limit on the sending-end active flow, applied symmetrically.
    pub p_max: f64,
}

impl AcLine {
    /// Series admittance `(g, b)` of `1 / (r + jx)`.
    pub fn series_admittance(&self) -> (f64, f64) {
        let den = self.series_r * self.series_r + self.series_x * self.series_x;
        (self.series_r / den, -self.series_x / den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost_c2: f64,
    pub cost_c1: f64,
    pub cost_c0: f64,
    pub can_participate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFarm {
    pub id: String,
    pub bus: u32,
    pub p_forecast: f64,
    pub p_rated: f64,
    /// cos φ of the constant power-factor operation.
    pub power_factor: f64,
}

impl WindFarm {
    /// Reactive-to-active power ratio `sqrt((1 - cos²φ) / cos²φ)`.
    pub fn power_ratio(&self) -> f64 {
        let c2 = self.power_factor * self.power_factor;
        ((1.0 - c2).max(0.0) / c2).sqrt()
    }
}

/// How the lower reactive fraction `m_q_lo` of a converter maps to a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QminConvention {
    /// `Q >= -m_q_lo * S`.
    #[default]
    Negated,
    /// `Q >= m_q_lo * S`, taken literally.
    Literal,
}

impl QminConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            QminConvention::Negated => "negated",
            QminConvention::Literal => "literal",
        }
    }
}

/// Point-to-point HVDC line with a converter at each AC terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvdcLine {
    pub from: u32,
    pub to: u32,
    pub s_nom: f64,
    pub m_p: f64,
    pub m_q_lo: f64,
    pub m_q_hi: f64,
    /// Constant loss per converter as a fraction of `s_nom`.
    pub loss_a: f64,
}

impl HvdcLine {
    pub fn p_limit(&self) -> f64 {
        self.m_p * self.s_nom
    }

    pub fn q_bounds(&self, convention: QminConvention) -> (f64, f64) {
        let lo = match convention {
            QminConvention::Negated => -self.m_q_lo * self.s_nom,
            QminConvention::Literal => self.m_q_lo * self.s_nom,
        };
        (lo, self.m_q_hi * self.s_nom)
    }

    /// Total DC-side loss of the pair, `2 a S_nom`.
    pub fn loss(&self) -> f64 {
        2.0 * self.loss_a * self.s_nom
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub hvdc_qmin: QminConvention,
    pub buses: Vec<Bus>,
    pub ac_lines: Vec<AcLine>,
    pub generators: Vec<Generator>,
    pub wind_farms: Vec<WindFarm>,
    pub hvdc_lines: Vec<HvdcLine>,
    #[serde(skip)]
    index: HashMap<u32, usize>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.base_mva == other.base_mva
            && self.hvdc_qmin == other.hvdc_qmin
            && self.buses == other.buses
            && self.ac_lines == other.ac_lines
            && self.generators == other.generators
            && self.wind_farms == other.wind_farms
            && self.hvdc_lines == other.hvdc_lines
    }
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        ac_lines: Vec<AcLine>,
        generators: Vec<Generator>,
        wind_farms: Vec<WindFarm>,
        hvdc_lines: Vec<HvdcLine>,
    ) -> Self {
        let mut net = Network {
            name: name.into(),
            base_mva,
            hvdc_qmin: QminConvention::default(),
            buses,
            ac_lines,
            generators,
            wind_farms,
            hvdc_lines,
            index: HashMap::new(),
        };
        net.reindex();
        net
    }

    /// Rebuilds the id → position map. Needed after editing bus ids in place.
    pub fn reindex(&mut self) {
        self.index = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_pos(&self, id: u32) -> Option<usize> {
        if self.index.len() == self.buses.len() {
            self.index.get(&id).copied()
        } else {
            self.buses.iter().position(|b| b.id == id)
        }
    }

    /// Position of a bus id that is known to exist.
    pub fn pos(&self, id: u32) -> usize {
        self.bus_pos(id).unwrap_or_else(|| panic!("bus {id} is not part of network {}", self.name))
    }

    pub fn ref_bus(&self) -> usize {
        self.buses.iter().position(|b| b.kind == BusKind::Ref).expect("network without reference bus")
    }

    pub fn kinds(&self) -> Vec<BusKind> {
        self.buses.iter().map(|b| b.kind).collect()
    }

    /// Generator hosted at each bus position, if any.
    pub fn gen_at_bus(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_bus()];
        for (k, g) in self.generators.iter().enumerate() {
            if let Some(i) = self.bus_pos(g.bus) {
                out[i].get_or_insert(k);
            }
        }
        out
    }

    pub fn ref_generator(&self) -> Option<usize> {
        let r = self.buses[self.ref_bus()].id;
        self.generators.iter().position(|g| g.bus == r)
    }

    pub fn participating(&self) -> Vec<usize> {
        (0..self.generators.len()).filter(|&k| self.generators[k].can_participate).collect()
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p).sum()
    }

    pub fn to_mw(&self, pu: f64) -> f64 {
        pu * self.base_mva
    }

    pub fn validate(&self) -> ValidationReport {
        validate_network(self)
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub component: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.component, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, component: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding { component: component.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

/// Lists every violated invariant of `net`. Pure; an empty report means the
/// network is well-formed.
pub fn validate_network(net: &Network) -> ValidationReport {
    let mut rep = ValidationReport::default();

    if !(net.base_mva > 0.0) {
        rep.push("system", "base_mva must be positive");
    }

    let mut ids = HashSet::new();
    let mut n_ref = 0;
    for b in &net.buses {
        let c = format!("bus {}", b.id);
        if !ids.insert(b.id) {
            rep.push(&c, "duplicate bus id");
        }
        if b.kind == BusKind::Ref {
            n_ref += 1;
        }
        if !(b.v_min > 0.0) {
            rep.push(&c, "v_min must be positive");
        }
        if !(b.v_min < b.v_max) {
            rep.push(&c, "v_min must be below v_max");
        }
    }
    match n_ref {
        0 => rep.push("system", "missing reference bus"),
        1 => {}
        _ => rep.push("system", "multiple reference buses"),
    }

    let exists = |id: u32| ids.contains(&id);

    for (l, line) in net.ac_lines.iter().enumerate() {
        let c = format!("line {} ({}-{})", l + 1, line.from, line.to);
        if !exists(line.from) || !exists(line.to) {
            rep.push(&c, "references an unknown bus");
        }
        if line.from == line.to {
            rep.push(&c, "from and to bus coincide");
        }
        if line.series_x == 0.0 {
            rep.push(&c, "series_x must be nonzero");
        }
        if !(line.p_max > 0.0) {
            rep.push(&c, "p_max must be positive");
        }
    }

    let mut gen_buses = HashSet::new();
    for (k, g) in net.generators.iter().enumerate() {
        let c = format!("generator {} (bus {})", k + 1, g.bus);
        if !exists(g.bus) {
            rep.push(&c, "references an unknown bus");
            continue;
        }
        if !gen_buses.insert(g.bus) {
            rep.push(&c, "more than one generator on the bus");
        }
        if g.p_min > g.p_max {
            rep.push(&c, "p_min exceeds p_max");
        }
        if g.q_min > g.q_max {
            rep.push(&c, "q_min exceeds q_max");
        }
        if g.cost_c2 < 0.0 {
            rep.push(&c, "cost_c2 must be non-negative");
        }
        if let Some(pos) = net.bus_pos(g.bus) {
            if net.buses[pos].kind == BusKind::Pq {
                rep.push(&c, "generator sits on a PQ bus");
            }
        }
    }
    for b in &net.buses {
        if b.kind != BusKind::Pq && !gen_buses.contains(&b.id) {
            rep.push(format!("bus {}", b.id), format!("{} bus without generator", b.kind));
        }
    }
    if n_ref == 1 {
        let r = net.buses.iter().find(|b| b.kind == BusKind::Ref).map(|b| b.id);
        if let Some(r) = r {
            if !net.generators.iter().any(|g| g.bus == r) {
                rep.push("system", "no generator at the reference bus");
            }
        }
    }

    let mut farm_ids = HashSet::new();
    for w in &net.wind_farms {
        let c = format!("wind {}", w.id);
        if !farm_ids.insert(w.id.clone()) {
            rep.push(&c, "duplicate wind farm id");
        }
        if !exists(w.bus) {
            rep.push(&c, "references an unknown bus");
        }
        if !(0.0 <= w.p_forecast && w.p_forecast <= w.p_rated) {
            rep.push(&c, "p_forecast must lie in [0, p_rated]");
        }
        if !(w.power_factor > 0.0 && w.power_factor <= 1.0) {
            rep.push(&c, "power_factor must lie in (0, 1]");
        }
    }

    for (c, h) in net.hvdc_lines.iter().enumerate() {
        let name = format!("hvdc {} ({}-{})", c + 1, h.from, h.to);
        if !exists(h.from) || !exists(h.to) {
            rep.push(&name, "references an unknown bus");
        }
        if h.from == h.to {
            rep.push(&name, "from and to bus coincide");
        }
        if !(h.s_nom > 0.0) {
            rep.push(&name, "s_nom must be positive");
        }
        if !(h.m_p > 0.0 && h.m_p <= 1.0) {
            rep.push(&name, "m_p must lie in (0, 1]");
        }
        if h.m_q_lo < 0.0 || h.m_q_hi < 0.0 {
            rep.push(&name, "reactive fractions must be non-negative");
        }
        if !(0.0 <= h.loss_a && h.loss_a < 0.1) {
            rep.push(&name, "loss_a must lie in [0, 0.1)");
        }
    }

    rep
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn bus(id: u32, kind: BusKind, load_p: f64, load_q: f64) -> Bus {
        Bus { id, kind, v_min: 0.9, v_max: 1.1, load_p, load_q, shunt_g: 0.0, shunt_b: 0.0 }
    }

    pub fn gen(bus: u32, p_max: f64, c1: f64) -> Generator {
        Generator { bus, p_min: 0.0, p_max, q_min: -p_max, q_max: p_max, cost_c2: 0.01, cost_c1: c1, cost_c0: 0.0, can_participate: true }
    }

    pub fn line(from: u32, to: u32, r: f64, x: f64, b: f64) -> AcLine {
        AcLine { from, to, series_r: r, series_x: x, charging_b: b, p_max: 10.0 }
    }

    /// Slack source feeding one load through z = 0.01 + j0.1.
    pub fn two_bus(load_p: f64, load_q: f64) -> Network {
        Network::new(
            "two-bus",
            100.0,
            vec![bus(1, BusKind::Ref, 0.0, 0.0), bus(2, BusKind::Pq, load_p, load_q)],
            vec![line(1, 2, 0.01, 0.1, 0.0)],
            vec![gen(1, 5.0, 10.0)],
            vec![],
            vec![],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn two_bus_is_valid() {
        assert!(validate_network(&two_bus(1.0, 0.5)).is_empty());
    }

    #[test]
    fn generator_bounds_inverted() {
        let mut net = two_bus(1.0, 0.5);
        net.generators[0].p_min = 6.0;
        let rep = validate_network(&net);
        assert_eq!(rep.findings.len(), 1);
        assert!(rep.findings[0].component.contains("generator 1"));
        assert!(rep.findings[0].message.contains("p_min"));
    }

    #[test]
    fn zero_rated_hvdc() {
        let mut net = two_bus(1.0, 0.5);
        net.hvdc_lines.push(HvdcLine { from: 1, to: 2, s_nom: 0.0, m_p: 0.8, m_q_lo: 0.4, m_q_hi: 0.5, loss_a: 0.01 });
        let rep = validate_network(&net);
        assert_eq!(rep.findings.len(), 1, "{rep}");
        assert!(rep.findings[0].message.contains("s_nom"));
    }

    #[test]
    fn reference_bus_count() {
        let mut net = two_bus(1.0, 0.5);
        net.buses[1].kind = BusKind::Ref;
        net.generators.push(gen(2, 1.0, 1.0));
        let rep = validate_network(&net);
        assert!(rep.findings.iter().any(|f| f.message == "multiple reference buses"));

        let mut net = two_bus(1.0, 0.5);
        net.buses[0].kind = BusKind::Pq;
        let rep = validate_network(&net);
        assert!(rep.findings.iter().any(|f| f.message == "missing reference bus"));
    }

    #[test]
    fn unity_power_factor_has_no_reactive_ratio() {
        let w = WindFarm { id: "W".into(), bus: 1, p_forecast: 1.0, p_rated: 2.0, power_factor: 1.0 };
        assert_eq!(w.power_ratio(), 0.0);
        let w = WindFarm { power_factor: std::f64::consts::FRAC_1_SQRT_2, ..w };
        assert!((w.power_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hvdc_loss_and_boxes() {
        let h = HvdcLine { from: 1, to: 2, s_nom: 5.0, m_p: 0.8, m_q_lo: 0.4, m_q_hi: 0.5, loss_a: 0.01 };
        assert!((h.loss() * 100.0 - 10.0).abs() < 1e-12);
        assert_eq!(h.q_bounds(QminConvention::Negated), (-2.0, 2.5));
        assert_eq!(h.q_bounds(QminConvention::Literal), (2.0, 2.5));
        assert_eq!(h.p_limit(), 4.0);
    }
}
