//! Native case files.
//!
//! A case is UTF-8 text made of sections `[system]`, `[bus]`, `[line]`,
//! `[gen]`, `[wind]` and `[hvdc]`. `[system]` holds `key = value` pairs; the
//! other sections are tables whose first row names the columns. `#` starts a
//! comment. Power quantities are written in MW / MVAr / MVA and converted to
//! per-unit on `base_mva`; impedances are already per-unit.
//!
//! ```text
//! [system]
//! name = two-bus
//! base_mva = 100
//!
//! [bus]
//! id kind v_min v_max load_p load_q
//! 1  REF  0.9   1.1   0      0
//! 2  PQ   0.9   1.1   100    50
//!
//! [line]
//! from to r    x   b p_max
//! 1    2  0.01 0.1 0 500
//!
//! [gen]
//! bus p_min p_max q_min q_max c2   c1 c0 participate
//! 1   0     500   -500  500   0.01 10 0  1
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{AcLine, Bus, BusKind, Generator, HvdcLine, Network, QminConvention, ValidationReport, WindFarm, DEFAULT_BASE_MVA};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid network: {0}")]
    Semantic(ValidationReport),
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> CaseError {
    CaseError::Syntax { line, column, message: message.into() }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Section {
    System,
    Bus,
    Line,
    Gen,
    Wind,
    Hvdc,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "system" => Section::System,
            "bus" => Section::Bus,
            "line" => Section::Line,
            "gen" => Section::Gen,
            "wind" => Section::Wind,
            "hvdc" => Section::Hvdc,
            _ => return None,
        })
    }

    /// Accepted columns and their defaults (`None` marks a required column).
    fn columns(self) -> &'static [(&'static str, Option<&'static str>)] {
        match self {
            Section::System => &[],
            Section::Bus => &[
                ("id", None),
                ("kind", None),
                ("v_min", None),
                ("v_max", None),
                ("load_p", Some("0")),
                ("load_q", Some("0")),
                ("shunt_g", Some("0")),
                ("shunt_b", Some("0")),
            ],
            Section::Line => &[("from", None), ("to", None), ("r", None), ("x", None), ("b", Some("0")), ("p_max", None)],
            Section::Gen => &[
                ("bus", None),
                ("p_min", None),
                ("p_max", None),
                ("q_min", None),
                ("q_max", None),
                ("c2", Some("0")),
                ("c1", Some("0")),
                ("c0", Some("0")),
                ("participate", Some("1")),
            ],
            Section::Wind => &[("id", None), ("bus", None), ("p_forecast", None), ("p_rated", None), ("power_factor", Some("1"))],
            Section::Hvdc => {
                &[("from", None), ("to", None), ("s_nom", None), ("m_p", None), ("m_q_lo", None), ("m_q_hi", None), ("loss_a", Some("0"))]
            }
        }
    }
}

struct Table {
    section: Section,
    header: Vec<String>,
    header_line: usize,
}

/// A tokenized record with source positions for error reporting.
struct Record<'a> {
    line: usize,
    cells: Vec<(usize, &'a str)>,
}

struct Row<'a, 'b> {
    rec: &'b Record<'a>,
    map: &'b HashMap<&'static str, Option<usize>>,
    defaults: &'static [(&'static str, Option<&'static str>)],
}

impl Row<'_, '_> {
    fn raw(&self, col: &'static str) -> Result<(usize, &str), CaseError> {
        match self.map.get(col).copied().flatten() {
            Some(i) => Ok(self.rec.cells[i]),
            None => {
                let d = self.defaults.iter().find(|(c, _)| *c == col).and_then(|(_, d)| *d).expect("required column checked at header");
                Ok((0, d))
            }
        }
    }

    fn f64(&self, col: &'static str) -> Result<f64, CaseError> {
        let (c, s) = self.raw(col)?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| syntax(self.rec.line, c, format!("column `{col}`: expected a number, found `{s}`")))
    }

    fn u32(&self, col: &'static str) -> Result<u32, CaseError> {
        let (c, s) = self.raw(col)?;
        s.parse::<u32>()
            .ok()
            .or_else(|| s.parse::<f64>().ok().filter(|v| v.fract() == 0.0 && *v >= 0.0).map(|v| v as u32))
            .ok_or_else(|| syntax(self.rec.line, c, format!("column `{col}`: expected a bus id, found `{s}`")))
    }

    fn flag(&self, col: &'static str) -> Result<bool, CaseError> {
        let (c, s) = self.raw(col)?;
        match s.to_ascii_lowercase().as_str() {
            "1" | "yes" | "true" | "y" => Ok(true),
            "0" | "no" | "false" | "n" => Ok(false),
            _ => Err(syntax(self.rec.line, c, format!("column `{col}`: expected 0/1, found `{s}`"))),
        }
    }

    fn text(&self, col: &'static str) -> Result<String, CaseError> {
        Ok(self.raw(col)?.1.to_string())
    }
}

fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() || ch == ',' {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

/// Parses a native case document into a validated per-unit [`Network`].
pub fn parse_case(document: &str) -> Result<Network, CaseError> {
    let mut name = String::from("case");
    let mut base_mva = DEFAULT_BASE_MVA;
    let mut qmin = QminConvention::default();
    let mut section: Option<Section> = None;
    let mut table: Option<Table> = None;
    let mut rows: Vec<(Section, Vec<String>, Record)> = Vec::new();
    let mut seen = Vec::new();

    for (ln, raw) in document.lines().enumerate() {
        let line_no = ln + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            let col = content.find('[').unwrap() + 1;
            if !trimmed.ends_with(']') {
                return Err(syntax(line_no, col, "unterminated section header"));
            }
            let sname = trimmed[1..trimmed.len() - 1].trim().to_ascii_lowercase();
            let s = Section::parse(&sname).ok_or_else(|| syntax(line_no, col, format!("unknown section `[{sname}]`")))?;
            if seen.contains(&s) {
                return Err(syntax(line_no, col, format!("section `[{sname}]` appears twice")));
            }
            seen.push(s);
            section = Some(s);
            table = None;
            continue;
        }
        let Some(sec) = section else {
            return Err(syntax(line_no, 1, "content before the first section header"));
        };
        if sec == Section::System {
            let Some(eq) = content.find('=') else {
                return Err(syntax(line_no, 1, "expected `key = value`"));
            };
            let key = content[..eq].trim();
            let value = content[eq + 1..].trim();
            let vcol = eq + 2;
            match key {
                "name" => name = value.to_string(),
                "base_mva" => {
                    base_mva = value
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .ok_or_else(|| syntax(line_no, vcol, "base_mva must be a positive number"))?;
                }
                "hvdc_qmin" => {
                    qmin = match value {
                        "negated" => QminConvention::Negated,
                        "literal" => QminConvention::Literal,
                        _ => return Err(syntax(line_no, vcol, "hvdc_qmin must be `negated` or `literal`")),
                    }
                }
                _ => return Err(syntax(line_no, 1, format!("unknown system key `{key}`"))),
            }
            continue;
        }
        let cells = tokenize(content);
        match &table {
            None => {
                let allowed = sec.columns();
                let mut header = Vec::new();
                for (c, h) in &cells {
                    let h = h.to_ascii_lowercase();
                    if !allowed.iter().any(|(a, _)| *a == h) {
                        return Err(syntax(line_no, *c, format!("unknown column `{h}`")));
                    }
                    if header.contains(&h) {
                        return Err(syntax(line_no, *c, format!("duplicate column `{h}`")));
                    }
                    header.push(h);
                }
                for (a, d) in allowed {
                    if d.is_none() && !header.iter().any(|h| h == a) {
                        return Err(syntax(line_no, 1, format!("missing required column `{a}`")));
                    }
                }
                table = Some(Table { section: sec, header, header_line: line_no });
            }
            Some(t) => {
                if cells.len() != t.header.len() {
                    return Err(syntax(
                        line_no,
                        cells.last().map(|c| c.0).unwrap_or(1),
                        format!("expected {} cells as declared on line {}, found {}", t.header.len(), t.header_line, cells.len()),
                    ));
                }
                rows.push((t.section, t.header.clone(), Record { line: line_no, cells }));
            }
        }
    }

    let pu = |v: f64| v / base_mva;
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut gens = Vec::new();
    let mut winds = Vec::new();
    let mut hvdcs = Vec::new();

    for (sec, header, rec) in &rows {
        let defaults = sec.columns();
        let map: HashMap<&'static str, Option<usize>> = defaults.iter().map(|(c, _)| (*c, header.iter().position(|h| h == c))).collect();
        let row = Row { rec, map: &map, defaults };
        match sec {
            Section::Bus => {
                let (kc, ks) = row.raw("kind")?;
                let kind = BusKind::parse(ks).ok_or_else(|| syntax(rec.line, kc, format!("unknown bus kind `{ks}`")))?;
                buses.push(Bus {
                    id: row.u32("id")?,
                    kind,
                    v_min: row.f64("v_min")?,
                    v_max: row.f64("v_max")?,
                    load_p: pu(row.f64("load_p")?),
                    load_q: pu(row.f64("load_q")?),
                    shunt_g: pu(row.f64("shunt_g")?),
                    shunt_b: pu(row.f64("shunt_b")?),
                });
            }
            Section::Line => lines.push(AcLine {
                from: row.u32("from")?,
                to: row.u32("to")?,
                series_r: row.f64("r")?,
                series_x: row.f64("x")?,
                charging_b: row.f64("b")?,
                p_max: pu(row.f64("p_max")?),
            }),
            Section::Gen => gens.push(Generator {
                bus: row.u32("bus")?,
                p_min: pu(row.f64("p_min")?),
                p_max: pu(row.f64("p_max")?),
                q_min: pu(row.f64("q_min")?),
                q_max: pu(row.f64("q_max")?),
                cost_c2: row.f64("c2")?,
                cost_c1: row.f64("c1")?,
                cost_c0: row.f64("c0")?,
                can_participate: row.flag("participate")?,
            }),
            Section::Wind => winds.push(WindFarm {
                id: row.text("id")?,
                bus: row.u32("bus")?,
                p_forecast: pu(row.f64("p_forecast")?),
                p_rated: pu(row.f64("p_rated")?),
                power_factor: row.f64("power_factor")?,
            }),
            Section::Hvdc => hvdcs.push(HvdcLine {
                from: row.u32("from")?,
                to: row.u32("to")?,
                s_nom: pu(row.f64("s_nom")?),
                m_p: row.f64("m_p")?,
                m_q_lo: row.f64("m_q_lo")?,
                m_q_hi: row.f64("m_q_hi")?,
                loss_a: row.f64("loss_a")?,
            }),
            Section::System => unreachable!(),
        }
    }

    let mut net = Network::new(name, base_mva, buses, lines, gens, winds, hvdcs);
    net.hvdc_qmin = qmin;
    let report = net.validate();
    if report.is_empty() {
        Ok(net)
    } else {
        Err(CaseError::Semantic(report))
    }
}

/// Shortest decimal text for `pu * base` that parses back to exactly `pu`.
fn write_scaled(pu: f64, base: f64) -> String {
    let v = pu * base;
    for digits in 0..=12 {
        let text = format!("{v:.digits$}");
        if text.parse::<f64>().map(|x| x / base == pu).unwrap_or(false) {
            let trimmed = if text.contains('.') { text.trim_end_matches('0').trim_end_matches('.') } else { &text };
            return if trimmed == "-0" { "0".into() } else { trimmed.into() };
        }
    }
    for cand in [v, v.next_up(), v.next_down()] {
        if cand / base == pu {
            return format!("{cand}");
        }
    }
    format!("{v}")
}

/// Writes `net` in the native format. `parse_case(&serialize_case(n))`
/// reproduces `n` exactly.
pub fn serialize_case(net: &Network) -> String {
    let b = net.base_mva;
    let s = |v: f64| write_scaled(v, b);
    let mut out = String::new();
    let _ = writeln!(out, "[system]");
    let _ = writeln!(out, "name = {}", net.name);
    let _ = writeln!(out, "base_mva = {}", net.base_mva);
    let _ = writeln!(out, "hvdc_qmin = {}", net.hvdc_qmin.as_str());

    let _ = writeln!(out, "\n[bus]");
    let _ = writeln!(out, "id kind v_min v_max load_p load_q shunt_g shunt_b");
    for bus in &net.buses {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            bus.id,
            bus.kind,
            bus.v_min,
            bus.v_max,
            s(bus.load_p),
            s(bus.load_q),
            s(bus.shunt_g),
            s(bus.shunt_b)
        );
    }

    let _ = writeln!(out, "\n[line]");
    let _ = writeln!(out, "from to r x b p_max");
    for l in &net.ac_lines {
        let _ = writeln!(out, "{} {} {} {} {} {}", l.from, l.to, l.series_r, l.series_x, l.charging_b, s(l.p_max));
    }

    let _ = writeln!(out, "\n[gen]");
    let _ = writeln!(out, "bus p_min p_max q_min q_max c2 c1 c0 participate");
    for g in &net.generators {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            g.bus,
            s(g.p_min),
            s(g.p_max),
            s(g.q_min),
            s(g.q_max),
            g.cost_c2,
            g.cost_c1,
            g.cost_c0,
            u8::from(g.can_participate)
        );
    }

    if !net.wind_farms.is_empty() {
        let _ = writeln!(out, "\n[wind]");
        let _ = writeln!(out, "id bus p_forecast p_rated power_factor");
        for w in &net.wind_farms {
            let _ = writeln!(out, "{} {} {} {} {}", w.id, w.bus, s(w.p_forecast), s(w.p_rated), w.power_factor);
        }
    }

    if !net.hvdc_lines.is_empty() {
        let _ = writeln!(out, "\n[hvdc]");
        let _ = writeln!(out, "from to s_nom m_p m_q_lo m_q_hi loss_a");
        for h in &net.hvdc_lines {
            let _ = writeln!(out, "{} {} {} {} {} {} {}", h.from, h.to, s(h.s_nom), h.m_p, h.m_q_lo, h.m_q_hi, h.loss_a);
        }
    }
    out
}
