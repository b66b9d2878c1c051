//! Acceptance criteria, one pass/fail line each. Runs as a plain binary so the lines are
//! always printed; exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use ccopf::algorithm::{run_iterative_ccopf, solve_deterministic, CcOptions, CcSolution, PolicyChoice};
use ccopf::legacy::{import_legacy, ImportOptions};
use ccopf::model::{BusKind, Generator, HvdcLine, Network};
use ccopf::opf::OpfSolution;
use ccopf::powerflow::{
    apply_response_policy, assemble_jacobian, calc_injections, line_flows, pf_residual, solve_power_flow, solve_power_flow_traced,
    Admittance, OperatingPoint,
};
use ccopf::sensitivity::{margins_for_all_constraints, uncertainty_margin, ConstraintClass, PolicySet};
use ccopf::uncertainty::{load_samples, sample_gaussian, sample_mixture, MixtureSpec, SampleSet, WindModel};
use ccopf::validation::{cost_of_uncertainty, monte_carlo, ViolationReport};
use ccopf::{parse_case, serialize_case, AcLine, Bus};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPSILON: f64 = 0.05;
const RHO: f64 = 1e-5;
const MC_N: usize = 10_000;
const MC_SEED: u64 = 20_240_501;
const IN_SAMPLE_TOL: f64 = 1.5;
const OUT_OF_SAMPLE_TOL: f64 = 2.0;

fn cases_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases")
}

fn load(name: &str) -> Network {
    let path = cases_dir().join(format!("{name}.case"));
    parse_case(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn wind_of(net: &Network) -> WindModel {
    WindModel::from_forecast(net, 0.075, 0.3).unwrap()
}

/// One bundled case with its three formulations solved and validated.
struct Study {
    name: &'static str,
    net: Network,
    det: OpfSolution,
    fixed: CcSolution,
    opt: CcSolution,
    det_in: ViolationReport,
    fixed_in: ViolationReport,
    opt_in: ViolationReport,
    fixed_out: ViolationReport,
    opt_out: ViolationReport,
}

fn study(name: &'static str, samples: &str, fixed_beta: Option<Vec<f64>>, constraint_generation: bool) -> Result<Study, String> {
    let net = load(name);
    let wind = wind_of(&net);
    let det = solve_deterministic(&net, Default::default()).map_err(|e| format!("{name} det: {e}"))?;
    let mut fixed_policy = PolicySet::uniform(&net);
    if let Some(b) = &fixed_beta {
        fixed_policy.beta = b.clone();
    }
    let base = CcOptions { epsilon: EPSILON, rho: RHO, constraint_generation, ..Default::default() };
    let fixed = run_iterative_ccopf(&net, &wind, &CcOptions { policy: PolicyChoice::Fixed(fixed_policy), ..base.clone() })
        .map_err(|e| format!("{name} cc-fixed: {e}"))?;
    let opt = run_iterative_ccopf(
        &net,
        &wind,
        &CcOptions { policy: PolicyChoice::Optimize { alpha: None, beta: fixed_beta, beta_max: 1.0 }, ..base },
    )
    .map_err(|e| format!("{name} cc-opt: {e}"))?;
    let draws = sample_gaussian(&wind, MC_N, MC_SEED);
    let oos = load_samples(&cases_dir().join(samples), &net).map_err(|e| e.to_string())?;
    let mc = |op: &OperatingPoint, p: &PolicySet, s: &SampleSet| monte_carlo(&net, op, p, s).map_err(|e| e.to_string());
    Ok(Study {
        det_in: mc(&det.op, &PolicySet::uniform(&net), &draws)?,
        fixed_in: mc(&fixed.solution.op, &fixed.policies, &draws)?,
        opt_in: mc(&opt.solution.op, &opt.policies, &draws)?,
        fixed_out: mc(&fixed.solution.op, &fixed.policies, &oos)?,
        opt_out: mc(&opt.solution.op, &opt.policies, &oos)?,
        name,
        net,
        det,
        fixed,
        opt,
    })
}

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn studies_ok(studies: &[Result<Study, String>]) -> Result<Vec<&Study>, String> {
    studies.iter().map(|s| s.as_ref().map_err(|e| e.clone())).collect()
}

fn jacobian_fd_error(net: &Network, op: &OperatingPoint) -> f64 {
    let y = Admittance::new(net);
    let n = net.n_bus();
    let j = assemble_jacobian(net, op);
    let h = 1e-6;
    let mut fd = DMatrix::zeros(2 * n, 2 * n);
    for c in 0..2 * n {
        let (mut vp, mut tp) = (op.v_mag.clone(), op.v_ang.clone());
        let (mut vm, mut tm) = (op.v_mag.clone(), op.v_ang.clone());
        if c < n {
            tp[c] += h;
            tm[c] -= h;
        } else {
            vp[c - n] += h;
            vm[c - n] -= h;
        }
        let (pp, qp) = calc_injections(&y, &vp, &tp);
        let (pm, qm) = calc_injections(&y, &vm, &tm);
        for r in 0..n {
            fd[(r, c)] = (pp[r] - pm[r]) / (2.0 * h);
            fd[(n + r, c)] = (qp[r] - qm[r]) / (2.0 * h);
        }
    }
    (fd - &j).amax() / j.amax()
}

fn two_bus() -> Network {
    let bus = |id, kind, p, q| Bus { id, kind, v_min: 0.9, v_max: 1.1, load_p: p, load_q: q, shunt_g: 0.0, shunt_b: 0.0 };
    Network::new(
        "two-bus",
        100.0,
        vec![bus(1, BusKind::Ref, 0.0, 0.0), bus(2, BusKind::Pq, 1.0, 0.5)],
        vec![AcLine { from: 1, to: 2, series_r: 0.01, series_x: 0.1, charging_b: 0.0, p_max: 10.0 }],
        vec![Generator {
            bus: 1,
            p_min: 0.0,
            p_max: 5.0,
            q_min: -5.0,
            q_max: 5.0,
            cost_c2: 0.0,
            cost_c1: 1.0,
            cost_c0: 0.0,
            can_participate: true,
        }],
        vec![],
        vec![],
    )
}

/// Load voltage of the two-bus case: `|V|⁴ + (2(pr + qx) − 1)|V|² + (p² + q²)(r² + x²) = 0`.
fn two_bus_voltage(p: f64, q: f64, r: f64, x: f64) -> f64 {
    let b = 2.0 * (p * r + q * x) - 1.0;
    let c = (p * p + q * q) * (r * r + x * x);
    ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
}

fn c1_power_flow(nets: &[(&str, Network, Option<OperatingPoint>)]) -> Verdict {
    let net = two_bus();
    let start = OperatingPoint::flat(&net);
    let (op, trace) = solve_power_flow_traced(&net, &start.spec(&net), &start).map_err(|e| e.to_string())?;
    let v_err = (op.v_mag[1] - two_bus_voltage(1.0, 0.5, 0.01, 0.1)).abs();
    let mut worst_iter = trace.len() - 1;
    let mut worst_res = *trace.last().unwrap();
    let mut worst_jac = jacobian_fd_error(&net, &op);
    for (name, net, dispatch) in nets {
        let dispatch = dispatch.as_ref().ok_or(format!("{name}: no dispatch"))?;
        let start = OperatingPoint::flat(net);
        let (op, trace) = solve_power_flow_traced(net, &dispatch.spec(net), &start).map_err(|e| format!("{name}: {e}"))?;
        let res = pf_residual(net, &op).map_err(|e| e.to_string())?.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        worst_iter = worst_iter.max(trace.len() - 1);
        worst_res = worst_res.max(res);
        worst_jac = worst_jac.max(jacobian_fd_error(net, &op));
    }
    check(
        v_err < 1e-10 && worst_iter <= 10 && worst_res <= 1e-8 && worst_jac <= 1e-5,
        format!("2-bus |V| error {v_err:.1e}; max Newton iterations {worst_iter} (<= 10); max residual {worst_res:.1e} (<= 1e-8); Jacobian vs FD {worst_jac:.1e} (<= 1e-5)"),
    )
}

fn random_policy(net: &Network, rng: &mut ChaCha8Rng) -> PolicySet {
    let part = net.participating();
    let raw: Vec<f64> = part.iter().map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    let mut alpha = vec![0.0; net.generators.len()];
    for (k, r) in part.iter().zip(&raw) {
        alpha[*k] = r / s;
    }
    let beta = net.hvdc_lines.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    PolicySet::new(net, alpha, beta).unwrap()
}

fn c2_sensitivity(nets: &[(&str, Network, Option<OperatingPoint>)]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for (name, net, op) in nets {
        let op = op.as_ref().ok_or(format!("{name}: no dispatch"))?;
        let n = net.n_bus();
        let wind = wind_of(net);
        let f0: Vec<f64> = line_flows(net, op).iter().map(|f| f.p_from).collect();
        let r = net.ref_generator().ok_or("no REF generator")?;
        for _ in 0..20 {
            let pol = random_policy(net, &mut rng);
            let dir: Vec<f64> = (0..net.wind_farms.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let omega: Vec<f64> = dir.iter().map(|d| 1e-3 * d / norm).collect();
            let b = margins_for_all_constraints(net, op, &pol, &wind, EPSILON).map_err(|e| e.to_string())?;
            let spec = apply_response_policy(op, &pol, net, &omega).map_err(|e| e.to_string())?;
            let pert = solve_power_flow(net, &spec, op).map_err(|e| format!("{name}: {e}"))?;
            let predict = |m: &DMatrix<f64>, i: usize| (0..omega.len()).map(|c| m[(i, c)] * omega[c]).sum::<f64>();
            let mut groups: [(f64, f64); 4] = [(0.0, 0.0); 4];
            let mut push = |g: usize, pred: f64, act: f64| {
                groups[g].0 = groups[g].0.max((pred - act).abs());
                groups[g].1 = groups[g].1.max(act.abs());
            };
            for (a, &x) in b.partition.x_hat.iter().enumerate() {
                if x < n {
                    push(0, predict(&b.gamma_state, a), pert.v_ang[x] - op.v_ang[x]);
                } else {
                    push(1, predict(&b.gamma_state, a), pert.v_mag[x - n] - op.v_mag[x - n]);
                }
            }
            for (l, f) in line_flows(net, &pert).iter().enumerate() {
                push(2, predict(&b.gamma_flow, l), f.p_from - f0[l]);
            }
            push(3, predict(&b.gamma_genp, r), pert.gen_p[r] - op.gen_p[r]);
            for (g, (err, scale)) in groups.iter().enumerate() {
                if *scale > 0.0 {
                    worst[g] = worst[g].max(err / scale);
                }
            }
        }
    }
    check(
        worst.iter().all(|w| *w <= 1e-3),
        format!(
            "max relative error over 4 cases x 20 policies: theta {:.1e}, V {:.1e}, P_L {:.1e}, P_ref {:.1e} (<= 1e-3)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn c3_margin_formula() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for inst in 0..10 {
        let d = 2 + inst % 4;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = WindModel::new((0..d).map(|i| format!("w{i}")).collect(), sigma.clone(), "random").map_err(|e| e.to_string())?;
        let draws = sample_gaussian(&model, 1_000_000, 100 + inst as u64);
        let mut y: Vec<f64> = draws.rows.iter().map(|w| w.iter().zip(&row).map(|(a, b)| a * b).sum()).collect();
        y.sort_by(f64::total_cmp);
        let q = y[(0.95 * y.len() as f64).ceil() as usize - 1];
        let lambda = uncertainty_margin(&row, &sigma, 0.05).map_err(|e| e.to_string())?;
        worst = worst.max((q - lambda).abs() / lambda);
    }
    check(worst <= 0.01, format!("max |q95 - lambda| / lambda over 10 instances, 1e6 draws each: {:.3}% (<= 1%)", 100.0 * worst))
}

fn c4_compliance(studies: &[&Study]) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for s in studies {
        let det = s.det_in.max_rate();
        let cc = s.fixed_in.max_rate().max(s.opt_in.max_rate());
        ok &= det > 20.0 && cc <= 100.0 * EPSILON + IN_SAMPLE_TOL;
        parts.push(format!("{} det {det:.1}% / cc-fixed {:.2}% / cc-opt {:.2}%", s.name, s.fixed_in.max_rate(), s.opt_in.max_rate()));
    }
    check(ok, format!("max class rate, {MC_N} in-sample draws: {} (det > 20%, cc <= 6.5%)", parts.join("; ")))
}

fn c5_out_of_sample(studies: &[&Study]) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for s in studies {
        let (f, o) = (s.fixed_out.max_rate(), s.opt_out.max_rate());
        ok &= f.max(o) <= 100.0 * EPSILON + OUT_OF_SAMPLE_TOL && s.opt_out.non_converged == 0;
        parts.push(format!("{} cc-fixed {f:.2}% / cc-opt {o:.2}%", s.name));
    }
    check(ok, format!("max class rate on the non-Gaussian sample files: {} (<= 7%)", parts.join("; ")))
}

fn c6_cost(studies: &[&Study]) -> Verdict {
    let hv = studies.iter().find(|s| s.name == "10bus-hvdc").ok_or("10bus-hvdc missing")?;
    let (d, o, f) = (hv.det.objective, hv.opt.solution.objective, hv.fixed.solution.objective);
    let cou_o = cost_of_uncertainty(o, d).map_err(|e| e.to_string())?;
    let cou_f = cost_of_uncertainty(f, d).map_err(|e| e.to_string())?;
    let ordered = d <= o * (1.0 + 1e-9) && o <= f;
    let fallback = studies.iter().all(|s| s.opt.solution.objective <= s.fixed.solution.objective * (1.0 + 1e-8));
    let plain = studies.iter().find(|s| s.name == "10bus").ok_or("10bus missing")?;
    let p_f = cost_of_uncertainty(plain.fixed.solution.objective, plain.det.objective).unwrap_or(f64::NAN);
    let p_o = cost_of_uncertainty(plain.opt.solution.objective, plain.det.objective).unwrap_or(f64::NAN);
    check(
        ordered && cou_o < cou_f && cou_o <= 0.5 * cou_f && fallback,
        format!(
            "10bus-hvdc det {d:.0} <= opt {o:.0} <= fixed {f:.0} $/h; CoU cc-fixed {cou_f:.3}% -> cc-opt {cou_o:.3}% (reduction >= 50%); opt <= fixed on all cases: {fallback}; 10bus CoU {p_f:.2}% -> {p_o:.2}%"
        ),
    )
}

fn c7_constraint_generation(studies: &[&Study]) -> Verdict {
    let net = load("10bus");
    let wind = wind_of(&net);
    let opts = CcOptions { epsilon: EPSILON, rho: RHO, ..Default::default() };
    let full = run_iterative_ccopf(&net, &wind, &opts).map_err(|e| e.to_string())?;
    let gen = run_iterative_ccopf(&net, &wind, &CcOptions { constraint_generation: true, ..opts }).map_err(|e| e.to_string())?;
    let rel = (gen.solution.objective - full.solution.objective).abs() / full.solution.objective;
    let s39 = studies.iter().find(|s| s.name == "39bus").ok_or("39bus missing")?;
    let total = s39.opt.margins.len();
    check(
        rel <= 1e-6 && s39.opt.generated <= 30 && s39.opt.certificate <= 1e-6 && gen.certificate <= 1e-6,
        format!(
            "10bus objective full vs generated: relative difference {rel:.1e} (<= 1e-6); 39bus generated {} of {total} margins (<= 30), full-set violation {:.1e} (<= 1e-6)",
            s39.opt.generated, s39.opt.certificate
        ),
    )
}

fn c8_convergence(studies: &[&Study]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in studies {
        let (fi, oi) = (s.fixed.trace.outer_iterations(), s.opt.trace.outer_iterations());
        let last = |c: &CcSolution| c.trace.records.last().map(|r| r.delta).unwrap_or(f64::INFINITY);
        ok &= fi <= 10 && oi <= 20 && last(&s.fixed) <= RHO && last(&s.opt) <= RHO;
        ok &= s.fixed.certificate <= 1e-6 && s.opt.certificate <= 1e-6 && s.fixed.converged && s.opt.converged;
        parts.push(format!("{} fixed {fi} / opt {oi}", s.name));
    }
    check(
        ok,
        format!(
            "outer iterations {} (fixed <= 10, opt <= 20); final delta <= rho and certificate <= 1e-6 p.u. on every run",
            parts.join(", ")
        ),
    )
}

fn c9_hvdc(studies: &[&Study]) -> Verdict {
    let mut worst = 0.0f64;
    for s in studies {
        for op in [&s.det.op, &s.fixed.solution.op, &s.opt.solution.op] {
            for (c, h) in s.net.hvdc_lines.iter().enumerate() {
                worst = worst.max((op.hvdc_p[c][0] + op.hvdc_p[c][1] + h.loss()).abs());
            }
        }
    }
    let line = HvdcLine { from: 1, to: 2, s_nom: 5.0, m_p: 0.8, m_q_lo: 0.4, m_q_hi: 0.5, loss_a: 0.01 };
    let loss_mw = line.loss() * 100.0;
    let m = studies.iter().find(|s| s.name == "10bus-hvdc-mod").ok_or("10bus-hvdc-mod missing")?;
    let (rin, rout) = (m.opt_in.class_rate(ConstraintClass::HvdcP), m.opt_out.class_rate(ConstraintClass::HvdcP));
    let congested = m.opt.solution.binding.iter().any(|b| b.starts_with("P_C"));
    check(
        worst <= 1e-9 && (loss_mw - 10.0).abs() < 1e-12 && rin <= 6.5 && rout <= 6.5 && congested,
        format!("max |P_i + P_j + 2aS| {worst:.1e} p.u.; loss at a = 1%, S = 500 MVA: {loss_mw} MW; mod scenario P_C rate in-sample {rin:.2}% / out-of-sample {rout:.2}% (<= 6.5%), converter limit binding: {congested}"),
    )
}

fn c10_determinism() -> Verdict {
    let run = || -> Result<Vec<String>, String> {
        let net = load("10bus-hvdc");
        let wind = wind_of(&net);
        let sol = run_iterative_ccopf(&net, &wind, &CcOptions::default()).map_err(|e| e.to_string())?;
        let draws = sample_gaussian(&wind, 2000, 5);
        let mix = sample_mixture(&wind, MixtureSpec::default(), 2000, 6).map_err(|e| e.to_string())?;
        let rep = monte_carlo(&net, &sol.solution.op, &sol.policies, &draws).map_err(|e| e.to_string())?;
        let legacy = std::fs::read_to_string(cases_dir().join("case39.m")).map_err(|e| e.to_string())?;
        let side: ImportOptions = ImportOptions { line_limit_scale: Some(0.8), ..Default::default() };
        let imported = import_legacy(&legacy, &side).map_err(|e| e.to_string())?;
        Ok(vec![
            sol.trace.to_csv(&net),
            serde_json::to_string(&sol.solution).map_err(|e| e.to_string())?,
            rep.to_csv(),
            rep.to_text(),
            draws.to_csv(net.base_mva),
            mix.to_csv(net.base_mva),
            serialize_case(&imported.network),
        ])
    };
    let (a, b) = (run()?, run()?);
    let same = a == b;
    check(same, format!("trace, solution, report, sample and imported-case outputs identical across two runs: {same}"))
}

fn main() {
    let clock = Instant::now();
    let studies = vec![
        study("10bus", "10bus-samples.csv", None, false),
        study("10bus-hvdc", "10bus-samples.csv", None, false),
        study("10bus-hvdc-mod", "10bus-samples.csv", Some(vec![0.25]), false),
        study("39bus", "39bus-samples.csv", None, true),
    ];
    let nets: Vec<(&str, Network, Option<OperatingPoint>)> = ["10bus", "10bus-hvdc", "10bus-hvdc-mod", "39bus"]
        .iter()
        .zip(&studies)
        .map(|(n, s)| (*n, load(n), s.as_ref().ok().map(|s| s.det.op.clone())))
        .collect();
    let with = |f: &dyn Fn(&[&Study]) -> Verdict| studies_ok(&studies).and_then(|s| f(&s));

    let results: Vec<(u8, &str, Verdict)> = vec![
        (1, "power-flow correctness", c1_power_flow(&nets)),
        (2, "sensitivity fidelity", c2_sensitivity(&nets)),
        (3, "margin formula", c3_margin_formula()),
        (4, "chance-constraint compliance", with(&c4_compliance)),
        (5, "out-of-sample robustness", with(&c5_out_of_sample)),
        (6, "cost ordering and cost of uncertainty", with(&c6_cost)),
        (7, "constraint generation soundness", with(&c7_constraint_generation)),
        (8, "outer-loop convergence", with(&c8_convergence)),
        (9, "HVDC model", with(&c9_hvdc)),
        (10, "determinism", c10_determinism()),
    ];
    let mut failed = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Ok(d) => println!("PASS criterion {id:>2} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {d}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1} s", results.len() - failed, results.len(), clock.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
