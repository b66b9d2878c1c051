use std::path::PathBuf;

use ccopf::algorithm::{run_iterative_ccopf, solve_deterministic, CcOptions, PolicyChoice};
use ccopf::model::{BusKind, Generator, Network, WindFarm};
use ccopf::sensitivity::PolicySet;
use ccopf::uncertainty::{Provenance, SampleSet, WindModel};
use ccopf::validation::{floor_rate, monte_carlo};
use ccopf::{parse_case, AcLine, Bus};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn load(name: &str) -> Network {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../cases/{name}.case"));
    parse_case(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn wind_of(net: &Network) -> WindModel {
    WindModel::from_forecast(net, 0.075, 0.3).unwrap()
}

/// Generator at bus 1 feeding a load and a small wind farm at bus 2 over a strong line.
fn interior_case() -> Network {
    let bus = |id, kind, v_max, p, q| Bus { id, kind, v_min: 0.9, v_max, load_p: p, load_q: q, shunt_g: 0.0, shunt_b: 0.0 };
    Network::new(
        "interior",
        100.0,
        vec![bus(1, BusKind::Ref, 1.02, 0.0, 0.0), bus(2, BusKind::Pq, 1.1, 0.5, 0.1)],
        vec![AcLine { from: 1, to: 2, series_r: 0.01, series_x: 0.05, charging_b: 0.0, p_max: 5.0 }],
        vec![Generator {
            bus: 1,
            p_min: 0.0,
            p_max: 3.0,
            q_min: -2.0,
            q_max: 2.0,
            cost_c2: 0.01,
            cost_c1: 10.0,
            cost_c0: 0.0,
            can_participate: true,
        }],
        vec![WindFarm { id: "w2".into(), bus: 2, p_forecast: 0.1, p_rated: 0.2, power_factor: 1.0 }],
        vec![],
    )
}

#[test]
fn zero_covariance_converges_in_two_iterations() {
    let net = load("10bus");
    let wind = WindModel::new(net.wind_farms.iter().map(|w| w.id.clone()).collect(), DMatrix::zeros(2, 2), "zero").unwrap();
    let det = solve_deterministic(&net, Default::default()).unwrap();
    let cc = run_iterative_ccopf(&net, &wind, &CcOptions::default()).unwrap();
    assert!(cc.converged);
    assert!(cc.trace.outer_iterations() <= 2);
    assert!(cc.margins.iter().all(|m| m.abs() < 1e-6));
    assert!((cc.solution.objective - det.objective).abs() <= 1e-6 * det.objective);
}

#[test]
fn fixed_uniform_policy_converges_quickly() {
    let net = load("10bus");
    let opts = CcOptions { policy: PolicyChoice::Fixed(PolicySet::uniform(&net)), ..Default::default() };
    let cc = run_iterative_ccopf(&net, &wind_of(&net), &opts).unwrap();
    assert!(cc.converged);
    assert!(cc.trace.outer_iterations() <= 10);
    assert!(cc.certificate <= 1e-6);
}

#[test]
fn optimized_policies_concentrate_and_stabilize() {
    let net = load("10bus-hvdc");
    let cc = run_iterative_ccopf(&net, &wind_of(&net), &CcOptions::default()).unwrap();
    assert!(cc.converged);
    let alpha_max = cc.policies.alpha.iter().cloned().fold(0.0, f64::max);
    assert!(alpha_max > 0.5, "alpha {:?}", cc.policies.alpha);
    assert!(cc.policies.beta[0].abs() > 1e-3, "beta {:?}", cc.policies.beta);
    let deltas: Vec<f64> = cc.trace.records.iter().map(|r| r.delta).collect();
    assert!(deltas.len() >= 3);
    for w in deltas[2..].windows(2) {
        assert!(w[1] <= w[0], "deltas {deltas:?}");
    }
    assert!(deltas[2] < 0.1 * deltas[1], "deltas {deltas:?}");
}

#[test]
fn interior_case_generates_nothing() {
    let net = interior_case();
    let opts = CcOptions { constraint_generation: true, ..Default::default() };
    let cc = run_iterative_ccopf(&net, &wind_of(&net), &opts).unwrap();
    assert!(cc.converged);
    assert_eq!(cc.generated, 0);
}

#[test]
fn trace_csv_has_no_wall_time() {
    let net = load("10bus-hvdc");
    let cc = run_iterative_ccopf(&net, &wind_of(&net), &CcOptions::default()).unwrap();
    let csv = cc.trace.to_csv(&net);
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("iteration,objective,max_margin_delta"));
    assert!(!header.contains("time"));
    assert_eq!(csv.lines().count(), cc.trace.records.len() + 1);
}

#[test]
fn replay_at_zero_deviation_reproduces_the_dispatch() {
    let net = load("10bus-hvdc");
    let cc = run_iterative_ccopf(&net, &wind_of(&net), &CcOptions::default()).unwrap();
    let zero = SampleSet {
        ids: net.wind_farms.iter().map(|w| w.id.clone()).collect(),
        rows: vec![vec![0.0; 2]; 5],
        provenance: Provenance::SyntheticGaussian { seed: 0 },
    };
    let rep = monte_carlo(&net, &cc.solution.op, &cc.policies, &zero).unwrap();
    assert_eq!(rep.non_converged, 0);
    assert_eq!(rep.max_rate(), 0.0);
    let spec = ccopf::powerflow::apply_response_policy(&cc.solution.op, &cc.policies, &net, &[0.0, 0.0]).unwrap();
    let op = ccopf::powerflow::solve_power_flow(&net, &spec, &cc.solution.op).unwrap();
    let gap = op
        .v_mag
        .iter()
        .zip(&cc.solution.op.v_mag)
        .chain(op.v_ang.iter().zip(&cc.solution.op.v_ang))
        .chain(op.gen_q.iter().zip(&cc.solution.op.gen_q))
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(gap <= 1e-6, "gap {gap}");
}

proptest! {
    #[test]
    fn floored_rates_stay_in_range(p in 0.0f64..100.0) {
        let r = floor_rate(p);
        prop_assert!((0.0..=100.0).contains(&r));
        prop_assert!(r == 0.0 || r == p);
        prop_assert_eq!(r == 0.0, p < 0.1);
    }
}
