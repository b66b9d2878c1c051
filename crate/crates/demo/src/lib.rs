//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Results cross the boundary as JSON strings.

use ccopf::algorithm::{run_iterative_ccopf, solve_deterministic, CcOptions, PolicyChoice};
use ccopf::model::Network;
use ccopf::parse_case;
use ccopf::powerflow::{apply_response_policy, solve_power_flow, OperatingPoint};
use ccopf::sensitivity::{uncertainty_margin, PolicySet};
use ccopf::uncertainty::{sample_gaussian, WindModel};
use ccopf::validation::{cost_of_uncertainty, monte_carlo};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CASES: [(&str, &str); 3] = [
    ("10bus", include_str!("../../../cases/10bus.case")),
    ("10bus-hvdc", include_str!("../../../cases/10bus-hvdc.case")),
    ("10bus-hvdc-mod", include_str!("../../../cases/10bus-hvdc-mod.case")),
];

#[derive(Serialize)]
struct MarginPoint {
    epsilon: f64,
    margin_mw: f64,
}

/// Margin `z(1-ε)·σ` for ε from 1% to 30%.
pub fn margin_curve_json(sigma_mw: f64, points: usize) -> Result<String, String> {
    if !(sigma_mw >= 0.0 && sigma_mw.is_finite()) {
        return Err(format!("standard deviation must be finite and non-negative, got {sigma_mw}"));
    }
    let sigma = DMatrix::from_element(1, 1, sigma_mw * sigma_mw);
    let points = points.max(2);
    let curve = (0..points)
        .map(|i| {
            let epsilon = 0.01 + 0.29 * i as f64 / (points - 1) as f64;
            uncertainty_margin(&[1.0], &sigma, epsilon).map(|margin_mw| MarginPoint { epsilon, margin_mw }).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Dispatch {
    bus: u32,
    p_mw: f64,
    alpha: f64,
}

#[derive(Serialize)]
struct SolveSummary {
    mode: String,
    objective: f64,
    deterministic_objective: f64,
    cost_of_uncertainty: f64,
    outer_iterations: usize,
    generators: Vec<Dispatch>,
    beta: Vec<f64>,
    hvdc_mw: Vec<f64>,
    binding: Vec<String>,
}

#[derive(Serialize)]
struct Histogram {
    quantity: String,
    limit_mw: f64,
    edges: Vec<f64>,
    counts: Vec<usize>,
    class_rates: Vec<(String, f64)>,
    non_converged: usize,
}

/// One bundled case with the most recent solution.
pub struct Session {
    net: Network,
    wind: WindModel,
    last: Option<(OperatingPoint, PolicySet)>,
}

impl Session {
    pub fn open(case: &str, sigma_frac: f64) -> Result<Self, String> {
        let text = CASES.iter().find(|(n, _)| *n == case).map(|(_, t)| *t).ok_or(format!("unknown case {case}"))?;
        let net = parse_case(text).map_err(|e| e.to_string())?;
        let wind = WindModel::from_forecast(&net, sigma_frac, 0.3).map_err(|e| e.to_string())?;
        Ok(Session { net, wind, last: None })
    }

    /// `mode` is `det`, `cc-fixed` or `cc-opt`.
    pub fn solve_json(&mut self, mode: &str, epsilon: f64) -> Result<String, String> {
        let net = &self.net;
        let det = solve_deterministic(net, Default::default()).map_err(|e| e.to_string())?;
        let (op, policies, objective, iterations, binding) = match mode {
            "det" => (det.op.clone(), PolicySet::uniform(net), det.objective, 0, det.binding.clone()),
            "cc-fixed" | "cc-opt" => {
                let policy = if mode == "cc-fixed" { PolicyChoice::Fixed(PolicySet::uniform(net)) } else { PolicyChoice::optimize_all() };
                let opts = CcOptions { epsilon, policy, ..Default::default() };
                let cc = run_iterative_ccopf(net, &self.wind, &opts).map_err(|e| e.to_string())?;
                let its = cc.trace.outer_iterations();
                (cc.solution.op, cc.policies, cc.solution.objective, its, cc.solution.binding)
            }
            other => return Err(format!("unknown mode {other}")),
        };
        let summary = SolveSummary {
            mode: mode.to_string(),
            objective,
            deterministic_objective: det.objective,
            cost_of_uncertainty: cost_of_uncertainty(objective, det.objective).map_err(|e| e.to_string())?,
            outer_iterations: iterations,
            generators: net
                .generators
                .iter()
                .enumerate()
                .map(|(k, g)| Dispatch { bus: g.bus, p_mw: net.to_mw(op.gen_p[k]), alpha: policies.alpha[k] })
                .collect(),
            beta: policies.beta.clone(),
            hvdc_mw: op.hvdc_p.iter().map(|p| net.to_mw(p[0])).collect(),
            binding,
        };
        self.last = Some((op, policies));
        serde_json::to_string(&summary).map_err(|e| e.to_string())
    }

    /// Monte Carlo replay of the last solution. The histogram shows the first HVDC
    /// converter injection, or the reference generator output when the case has no HVDC line.
    pub fn histogram_json(&self, n: usize, seed: u64, bins: usize) -> Result<String, String> {
        let (op, policies) = self.last.as_ref().ok_or("solve first")?;
        let net = &self.net;
        let samples = sample_gaussian(&self.wind, n, seed);
        let (quantity, limit, pick): (String, f64, Box<dyn Fn(&OperatingPoint) -> f64>) = if let Some(h) = net.hvdc_lines.first() {
            (format!("P_C bus {}", h.from), h.p_limit(), Box::new(|o: &OperatingPoint| o.hvdc_p[0][0].abs()))
        } else {
            let r = net.ref_generator().ok_or("no reference generator")?;
            (format!("P_G bus {}", net.generators[r].bus), net.generators[r].p_max, Box::new(move |o: &OperatingPoint| o.gen_p[r]))
        };
        let values: Vec<f64> = samples
            .rows
            .iter()
            .filter_map(|w| {
                let spec = apply_response_policy(op, policies, net, w).ok()?;
                solve_power_flow(net, &spec, op).ok().map(|o| net.to_mw(pick(&o)))
            })
            .collect();
        let report = monte_carlo(net, op, policies, &samples).map_err(|e| e.to_string())?;
        let limit_mw = net.to_mw(limit);
        let lo = values.iter().cloned().fold(limit_mw, f64::min);
        let hi = values.iter().cloned().fold(limit_mw, f64::max);
        let bins = bins.max(1);
        let width = ((hi - lo) / bins as f64).max(1e-9);
        let mut counts = vec![0usize; bins];
        for v in &values {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        let hist = Histogram {
            quantity,
            limit_mw,
            edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
            counts,
            class_rates: report.classes.iter().map(|c| (c.class.as_str().to_string(), c.rate)).collect(),
            non_converged: report.non_converged,
        };
        serde_json::to_string(&hist).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
pub fn margin_curve(sigma_mw: f64, points: usize) -> Result<String, JsError> {
    margin_curve_json(sigma_mw, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(case: &str, sigma_frac: f64) -> Result<Demo, JsError> {
        Session::open(case, sigma_frac).map(Demo).map_err(|e| JsError::new(&e))
    }

    pub fn solve(&mut self, mode: &str, epsilon: f64) -> Result<String, JsError> {
        self.0.solve_json(mode, epsilon).map_err(|e| JsError::new(&e))
    }

    pub fn histogram(&self, n: usize, seed: u32, bins: usize) -> Result<String, JsError> {
        self.0.histogram_json(n, u64::from(seed), bins).map_err(|e| JsError::new(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_curve_decreases_with_epsilon() {
        let v: Vec<serde_json::Value> = serde_json::from_str(&margin_curve_json(10.0, 5).unwrap()).unwrap();
        assert_eq!(v.len(), 5);
        let m: Vec<f64> = v.iter().map(|p| p["margin_mw"].as_f64().unwrap()).collect();
        assert!(m.windows(2).all(|w| w[1] < w[0]));
        assert!((v[0]["epsilon"].as_f64().unwrap() - 0.01).abs() < 1e-12);
        assert!(margin_curve_json(-1.0, 5).is_err());
    }

    #[test]
    fn solve_then_histogram() {
        let mut s = Session::open("10bus-hvdc", 0.075).unwrap();
        assert!(s.histogram_json(10, 1, 5).is_err());
        let sol: serde_json::Value = serde_json::from_str(&s.solve_json("cc-opt", 0.05).unwrap()).unwrap();
        assert!(sol["cost_of_uncertainty"].as_f64().unwrap() >= 0.0);
        let h: serde_json::Value = serde_json::from_str(&s.histogram_json(200, 1, 12).unwrap()).unwrap();
        let total: u64 = h["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(total + h["non_converged"].as_u64().unwrap(), 200);
        assert_eq!(h["edges"].as_array().unwrap().len(), 13);
    }

    #[test]
    fn unknown_inputs_are_rejected() {
        assert!(Session::open("nowhere", 0.075).is_err());
        let mut s = Session::open("10bus", 0.075).unwrap();
        assert!(s.solve_json("fast", 0.05).is_err());
    }
}
