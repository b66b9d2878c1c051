//! Import of the matrix-table (`mpc.bus`, `mpc.gen`, `mpc.branch`,
//! `mpc.gencost`) case exchange format.
//!
//! Only the fields the model uses are read. Everything else that would change
//! the physics is reported as a warning rather than dropped silently: tap
//! ratios, phase shifts, out-of-service elements, isolated buses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AcLine, Bus, BusKind, Generator, HvdcLine, Network, ValidationReport, WindFarm, DEFAULT_BASE_MVA};

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing table `mpc.{0}`")]
    MissingTable(&'static str),
    #[error("table `mpc.{table}` row {row}: expected at least {expected} columns")]
    ShortRow { table: String, row: usize, expected: usize },
    #[error("options: {0}")]
    Options(String),
    #[error("imported network is invalid: {0}")]
    Invalid(ValidationReport),
}

/// Modifications applied while converting a legacy case.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportOptions {
    pub name: Option<String>,
    /// Active branch limit as a fraction of the apparent rating `rateA`.
    pub line_limit_scale: Option<f64>,
    /// Limit in MW for branches whose `rateA` is zero (unlimited).
    pub unlimited_rating_mw: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    /// Bus ids of generators allowed to participate; all when absent.
    pub participating: Option<Vec<u32>>,
    #[serde(default)]
    pub cost: Vec<CostOverride>,
    #[serde(default)]
    pub wind: Vec<WindSpec>,
    #[serde(default)]
    pub hvdc: Vec<HvdcSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOverride {
    pub bus: u32,
    pub c2: f64,
    pub c1: f64,
    #[serde(default)]
    pub c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindSpec {
    pub id: String,
    pub bus: u32,
    pub p_forecast_mw: f64,
    pub p_rated_mw: f64,
    #[serde(default = "unity")]
    pub power_factor: f64,
}

fn unity() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvdcSpec {
    pub from: u32,
    pub to: u32,
    pub s_nom_mva: f64,
    pub m_p: f64,
    pub m_q_lo: f64,
    pub m_q_hi: f64,
    #[serde(default)]
    pub loss_a: f64,
    /// Remove the AC branch(es) between the same pair of buses.
    #[serde(default)]
    pub replaces_line: bool,
}

#[derive(Debug, Clone)]
pub struct Imported {
    pub network: Network,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
struct LegacyTables {
    base_mva: Option<f64>,
    tables: HashMap<String, Vec<Vec<f64>>>,
    ignored: Vec<String>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(p) => &line[..p],
        None => line,
    }
}

fn parse_tables(text: &str) -> Result<LegacyTables, ImportError> {
    let mut out = LegacyTables::default();
    let mut current: Option<(String, Vec<Vec<f64>>)> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if current.is_none() {
            if line.starts_with("function") {
                continue;
            }
            let Some(rest) = line.strip_prefix("mpc.") else {
                // Non-table statements (e.g. `mpc.version` or helpers) are ignored.
                continue;
            };
            let Some(eq) = rest.find('=') else {
                return Err(ImportError::Syntax { line: line_no, message: "expected assignment".into() });
            };
            let key = rest[..eq].trim().to_string();
            let value = rest[eq + 1..].trim();
            if let Some(body) = value.strip_prefix('[') {
                current = Some((key, Vec::new()));
                line = body;
            } else if key == "baseMVA" {
                let v = value.trim_end_matches(';').trim();
                out.base_mva =
                    Some(v.parse().map_err(|_| ImportError::Syntax { line: line_no, message: format!("invalid baseMVA `{v}`") })?);
                continue;
            } else {
                if key != "version" {
                    out.ignored.push(format!("mpc.{key}"));
                }
                continue;
            }
        }
        let (key, rows) = current.as_mut().unwrap();
        let (body, closes) = match line.find(']') {
            Some(p) => (&line[..p], true),
            None => (line, false),
        };
        if key.contains('{') || body.contains('\'') {
            // cell arrays such as bus names
        } else {
            for chunk in body.split(';') {
                let vals: Result<Vec<f64>, _> =
                    chunk.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).map(|t| t.parse::<f64>()).collect();
                let vals = vals.map_err(|_| ImportError::Syntax { line: line_no, message: format!("non-numeric cell in `mpc.{key}`") })?;
                if !vals.is_empty() {
                    rows.push(vals);
                }
            }
        }
        if closes {
            let (key, rows) = current.take().unwrap();
            if !rows.is_empty() {
                out.tables.insert(key, rows);
            } else {
                out.ignored.push(format!("mpc.{key}"));
            }
        }
    }
    if current.is_some() {
        return Err(ImportError::Syntax { line: text.lines().count(), message: "unterminated matrix".into() });
    }
    Ok(out)
}

fn need<'a>(t: &'a LegacyTables, name: &'static str, cols: usize) -> Result<&'a [Vec<f64>], ImportError> {
    let rows = t.tables.get(name).ok_or(ImportError::MissingTable(name))?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() < cols {
            return Err(ImportError::ShortRow { table: name.into(), row: i + 1, expected: cols });
        }
    }
    Ok(rows)
}

/// Converts a legacy matrix-table case into a validated [`Network`].
pub fn import_legacy(text: &str, opts: &ImportOptions) -> Result<Imported, ImportError> {
    let t = parse_tables(text)?;
    let mut warnings: Vec<String> = t.ignored.iter().map(|k| format!("table {k} ignored")).collect();
    let mut extra: Vec<&String> = t.tables.keys().filter(|k| !matches!(k.as_str(), "bus" | "gen" | "branch" | "gencost")).collect();
    extra.sort();
    warnings.extend(extra.into_iter().map(|k| format!("table mpc.{k} ignored")));
    let base = t.base_mva.unwrap_or(DEFAULT_BASE_MVA);
    let pu = |v: f64| v / base;

    let bus_rows = need(&t, "bus", 13)?;
    let gen_rows = need(&t, "gen", 10)?;
    let branch_rows = need(&t, "branch", 11)?;
    let cost_rows = t.tables.get("gencost");

    let mut buses = Vec::new();
    for r in bus_rows {
        let id = r[0] as u32;
        let kind = match r[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Ref,
            other => {
                warnings.push(format!("bus {id}: type {other} treated as PQ"));
                BusKind::Pq
            }
        };
        buses.push(Bus {
            id,
            kind,
            v_min: opts.v_min.unwrap_or(r[12]),
            v_max: opts.v_max.unwrap_or(r[11]),
            load_p: pu(r[2]),
            load_q: pu(r[3]),
            shunt_g: pu(r[4]),
            shunt_b: pu(r[5]),
        });
    }

    let scale = opts.line_limit_scale.unwrap_or(1.0);
    if !(scale > 0.0) {
        return Err(ImportError::Options("line_limit_scale must be positive".into()));
    }
    let replaced: Vec<(u32, u32)> = opts.hvdc.iter().filter(|h| h.replaces_line).map(|h| (h.from.min(h.to), h.from.max(h.to))).collect();
    let mut lines = Vec::new();
    for (i, r) in branch_rows.iter().enumerate() {
        let (f, to) = (r[0] as u32, r[1] as u32);
        let tag = format!("branch {} ({f}-{to})", i + 1);
        if r[10] == 0.0 {
            warnings.push(format!("{tag}: out of service, skipped"));
            continue;
        }
        if replaced.contains(&(f.min(to), f.max(to))) {
            warnings.push(format!("{tag}: replaced by an HVDC line"));
            continue;
        }
        if r[8] != 0.0 && r[8] != 1.0 {
            warnings.push(format!("{tag}: tap ratio {} ignored", r[8]));
        }
        if r[9] != 0.0 {
            warnings.push(format!("{tag}: phase shift {} ignored", r[9]));
        }
        let rating = if r[5] > 0.0 {
            r[5]
        } else {
            let u = opts.unlimited_rating_mw.unwrap_or(9900.0);
            warnings.push(format!("{tag}: rateA is zero, limit set to {u} MW before scaling"));
            u
        };
        lines.push(AcLine { from: f, to, series_r: r[2], series_x: r[3], charging_b: r[4], p_max: pu(scale * rating) });
    }

    let mut gens = Vec::new();
    for (i, r) in gen_rows.iter().enumerate() {
        let bus = r[0] as u32;
        if r[7] <= 0.0 {
            warnings.push(format!("generator {} (bus {bus}): out of service, skipped", i + 1));
            continue;
        }
        let (c2, c1, c0) = match cost_rows.and_then(|c| c.get(i)) {
            Some(c) if c.first() == Some(&2.0) && c.len() >= 4 => {
                let n = c[3] as usize;
                let coeffs = &c[4..(4 + n).min(c.len())];
                match coeffs.len() {
                    3 => (coeffs[0], coeffs[1], coeffs[2]),
                    2 => (0.0, coeffs[0], coeffs[1]),
                    1 => (0.0, 0.0, coeffs[0]),
                    _ => {
                        warnings.push(format!("generator {}: polynomial cost of degree > 2 ignored", i + 1));
                        (0.0, 0.0, 0.0)
                    }
                }
            }
            Some(_) => {
                warnings.push(format!("generator {}: piecewise-linear cost ignored", i + 1));
                (0.0, 0.0, 0.0)
            }
            None => {
                warnings.push(format!("generator {}: no cost data", i + 1));
                (0.0, 0.0, 0.0)
            }
        };
        gens.push(Generator {
            bus,
            p_min: pu(r[9]),
            p_max: pu(r[8]),
            q_min: pu(r[4]),
            q_max: pu(r[3]),
            cost_c2: c2,
            cost_c1: c1,
            cost_c0: c0,
            can_participate: true,
        });
    }
    for o in &opts.cost {
        match gens.iter_mut().find(|g| g.bus == o.bus) {
            Some(g) => {
                g.cost_c2 = o.c2;
                g.cost_c1 = o.c1;
                g.cost_c0 = o.c0;
            }
            None => return Err(ImportError::Options(format!("cost override for bus {} without generator", o.bus))),
        }
    }
    if let Some(part) = &opts.participating {
        for b in part {
            if !gens.iter().any(|g| g.bus == *b) {
                return Err(ImportError::Options(format!("participating bus {b} has no generator")));
            }
        }
        for g in &mut gens {
            g.can_participate = part.contains(&g.bus);
        }
    }

    // PV buses that lost their generator fall back to PQ.
    for b in &mut buses {
        if b.kind == BusKind::Pv && !gens.iter().any(|g| g.bus == b.id) {
            warnings.push(format!("bus {}: PV bus without in-service generator converted to PQ", b.id));
            b.kind = BusKind::Pq;
        }
    }

    let winds = opts
        .wind
        .iter()
        .map(|w| WindFarm {
            id: w.id.clone(),
            bus: w.bus,
            p_forecast: pu(w.p_forecast_mw),
            p_rated: pu(w.p_rated_mw),
            power_factor: w.power_factor,
        })
        .collect();
    let hvdcs = opts
        .hvdc
        .iter()
        .map(|h| HvdcLine {
            from: h.from,
            to: h.to,
            s_nom: pu(h.s_nom_mva),
            m_p: h.m_p,
            m_q_lo: h.m_q_lo,
            m_q_hi: h.m_q_hi,
            loss_a: h.loss_a,
        })
        .collect();

    let name = opts.name.clone().unwrap_or_else(|| "imported".into());
    let net = Network::new(name, base, buses, lines, gens, winds, hvdcs);
    let report = net.validate();
    if !report.is_empty() {
        return Err(ImportError::Invalid(report));
    }
    Ok(Imported { network: net, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE3: &str = "\
function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	345	1	1.1	0.9;
	2	2	0	0	0	0	1	1	0	345	1	1.1	0.9;
	3	1	90	30	0	0	1	1	0	345	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
	2	163	0	300	-300	1	100	1	300	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	3	0	0.0576	0	250	250	250	0	0	1	-360	360;
	3	2	0.017	0.092	0.158	0	250	250	1.05	0	1	-360	360;
	1	2	0.039	0.17	0.358	150	150	150	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.11	5	150;
	2	0	0	2	1.2	600;
];
mpc.areas = [1 1];
";

    #[test]
    fn imports_tables_and_costs() {
        let opts = ImportOptions { line_limit_scale: Some(0.8), ..Default::default() };
        let imp = import_legacy(CASE3, &opts).unwrap();
        let n = &imp.network;
        assert_eq!(n.n_bus(), 3);
        assert_eq!(n.generators.len(), 2);
        assert_eq!(n.buses[2].load_p, 0.9);
        assert!((n.ac_lines[0].p_max - 2.0).abs() < 1e-12);
        assert_eq!(n.generators[0].cost_c2, 0.11);
        assert_eq!(n.generators[1].cost_c2, 0.0);
        assert_eq!(n.generators[1].cost_c1, 1.2);
        assert!(imp.warnings.iter().any(|w| w.contains("tap ratio 1.05")), "{:?}", imp.warnings);
        assert!(imp.warnings.iter().any(|w| w.contains("rateA is zero")));
        assert!(imp.warnings.iter().any(|w| w.contains("mpc.areas")));
    }

    #[test]
    fn sidecar_adds_hvdc_and_wind() {
        let opts = ImportOptions {
            hvdc: vec![HvdcSpec {
                from: 1,
                to: 2,
                s_nom_mva: 500.0,
                m_p: 0.8,
                m_q_lo: 0.4,
                m_q_hi: 0.5,
                loss_a: 0.01,
                replaces_line: true,
            }],
            wind: vec![WindSpec { id: "W1".into(), bus: 3, p_forecast_mw: 50.0, p_rated_mw: 80.0, power_factor: 1.0 }],
            participating: Some(vec![2]),
            ..Default::default()
        };
        let imp = import_legacy(CASE3, &opts).unwrap();
        assert_eq!(imp.network.ac_lines.len(), 2);
        assert_eq!(imp.network.hvdc_lines.len(), 1);
        assert!((imp.network.hvdc_lines[0].loss() * 100.0 - 10.0).abs() < 1e-12);
        assert!(!imp.network.generators[0].can_participate);
        assert_eq!(imp.network.wind_farms[0].p_forecast, 0.5);
    }

    #[test]
    fn missing_table() {
        let text = CASE3.replace("mpc.gen = [", "mpc.generators = [");
        assert!(matches!(import_legacy(&text, &ImportOptions::default()), Err(ImportError::MissingTable("gen"))));
    }
}
