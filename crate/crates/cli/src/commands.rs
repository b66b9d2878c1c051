use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ccopf::algorithm::{
    run_iterative_ccopf, solve_deterministic, CcError, CcOptions, CcSolution, IterationRecord, IterationTrace, PolicyChoice,
};
use ccopf::legacy::{import_legacy, ImportOptions};
use ccopf::model::Network;
use ccopf::opf::OpfError;
use ccopf::sensitivity::{all_quantities, PolicySet};
use ccopf::uncertainty::{fit_gaussian, load_samples, sample_gaussian, sample_mixture, MixtureSpec, WindModel};
use ccopf::validation::{compare_runs, cost_of_uncertainty, monte_carlo, RunSummary};
use ccopf::{parse_case, serialize_case};
use serde::Deserialize;

use crate::artifacts::{self, ReportFile, SolutionFile};
use crate::seed::{derive, fingerprint};
use crate::{CompareArgs, ImportArgs, Mode, SampleKind, SolveArgs, SynthArgs, Toggle, ValidateArgs};

pub enum Failure {
    Input(anyhow::Error),
    Infeasible(String),
    NonConvergence(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::NonConvergence(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Input(e) => format!("{e:#}"),
            Failure::Infeasible(m) | Failure::NonConvergence(m) => m.clone(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn from_opf(e: &OpfError, prefix: &str) -> Failure {
    match e {
        OpfError::Infeasible { .. } => Failure::Infeasible(format!("{prefix}{e}")),
        OpfError::MaxIterations { .. } | OpfError::NumericalFailure { .. } => Failure::NonConvergence(format!("{prefix}{e}")),
        OpfError::Problem(_) => Failure::Input(anyhow!("{prefix}{e}")),
    }
}

fn from_cc(e: &CcError) -> Failure {
    match e {
        CcError::Opf { iteration, source } => from_opf(source, &format!("outer iteration {iteration}: ")),
        CcError::NonConvergence { .. } | CcError::Generation { .. } => Failure::NonConvergence(e.to_string()),
        CcError::Options(_) | CcError::Sensitivity { .. } => Failure::Input(anyhow!("{e}")),
    }
}

/// Verbosity from `CCOPF_LOG`: `0`/`quiet` silences progress messages.
fn info(msg: &str) {
    let quiet = std::env::var("CCOPF_LOG").map(|v| v == "0" || v.eq_ignore_ascii_case("quiet")).unwrap_or(false);
    if !quiet {
        eprintln!("{msg}");
    }
}

fn resolve_case(spec: &str) -> anyhow::Result<PathBuf> {
    let direct = PathBuf::from(spec);
    if direct.is_file() {
        return Ok(direct);
    }
    let dir = std::env::var_os("CCOPF_CASES").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cases"));
    let bundled = dir.join(format!("{spec}.case"));
    if bundled.is_file() {
        return Ok(bundled);
    }
    Err(anyhow!("case file not found: {spec}"))
}

pub struct LoadedCase {
    pub net: Network,
    pub fingerprint: String,
}

pub fn load_case(spec: &str) -> anyhow::Result<LoadedCase> {
    let path = resolve_case(spec)?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let net = parse_case(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(LoadedCase { fingerprint: fingerprint(&serialize_case(&net)), net })
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    alpha: Vec<f64>,
    #[serde(default)]
    beta: Vec<f64>,
}

fn read_policy(path: &Path, net: &Network) -> anyhow::Result<PolicySet> {
    let p: PolicyFile = artifacts::read_json(path)?;
    let beta = if p.beta.is_empty() { vec![0.0; net.hvdc_lines.len()] } else { p.beta };
    PolicySet::new(net, p.alpha, beta).with_context(|| format!("policy file {}", path.display()))
}

fn wind_model(a: &SolveArgs, net: &Network) -> anyhow::Result<WindModel> {
    match &a.samples {
        Some(path) => {
            let s = load_samples(path, net).with_context(|| format!("cannot load samples {}", path.display()))?;
            Ok(fit_gaussian(&s)?)
        }
        None => Ok(WindModel::from_forecast(net, a.wind.wind_sigma, a.wind.wind_corr)?),
    }
}

pub fn solve(a: &SolveArgs) -> Result<(), Failure> {
    let case = load_case(&a.case)?;
    let net = &case.net;
    let wind = wind_model(a, net)?;
    ensure_dir(&a.out)?;
    let nq = all_quantities(net).len();

    let (result, trace_only) = match a.mode {
        Mode::Det => {
            let det = solve_deterministic(net, Default::default()).map_err(|e| from_opf(&e, ""))?;
            let policies = PolicySet::uniform(net);
            let trace = IterationTrace {
                records: vec![IterationRecord {
                    iteration: 0,
                    objective: det.objective,
                    margins: vec![0.0; nq],
                    delta: 0.0,
                    alpha: policies.alpha.clone(),
                    beta: policies.beta.clone(),
                    status: "optimal".into(),
                    active: 0,
                    damped: false,
                    certificate: None,
                    wall_time: 0.0,
                }],
                converged: true,
                diverged: None,
            };
            let sol = CcSolution {
                solution: det.clone(),
                deterministic: det,
                policies,
                margins: vec![0.0; nq],
                trace,
                converged: true,
                certificate: 0.0,
                active: vec![false; nq],
                generated: 0,
            };
            (Ok(sol), None)
        }
        Mode::CcFixed | Mode::CcOpt => {
            let policy = if a.mode == Mode::CcFixed {
                let p = match &a.fixed_policy {
                    Some(path) => read_policy(path, net)?,
                    None => PolicySet::uniform(net),
                };
                PolicyChoice::Fixed(p)
            } else {
                if let Some(b) = &a.fixed_beta {
                    if b.len() != net.hvdc_lines.len() {
                        return Err(anyhow!("--fixed-beta has {} values, case has {} HVDC lines", b.len(), net.hvdc_lines.len()).into());
                    }
                }
                PolicyChoice::Optimize { alpha: None, beta: a.fixed_beta.clone(), beta_max: 1.0 }
            };
            let opts = CcOptions {
                epsilon: a.epsilon,
                rho: a.rho,
                max_outer: a.max_outer,
                policy,
                constraint_generation: a.constraint_gen == Toggle::On,
                ..Default::default()
            };
            match run_iterative_ccopf(net, &wind, &opts) {
                Ok(s) => (Ok(s), None),
                Err(e) => {
                    let trace = match &e {
                        CcError::NonConvergence { trace, .. } => Some((**trace).clone()),
                        _ => None,
                    };
                    (Err(e), trace)
                }
            }
        }
    };
    let sol = match result {
        Ok(s) => s,
        Err(e) => {
            if let Some(t) = trace_only {
                artifacts::write(&a.out, "trace.csv", &t.to_csv(net))?;
            }
            return Err(from_cc(&e));
        }
    };

    let (dispatch, hvdc) = SolutionFile::dispatch_of(net, &sol.solution.op);
    let file = SolutionFile {
        case: net.name.clone(),
        fingerprint: case.fingerprint.clone(),
        mode: a.mode.as_str().into(),
        epsilon: a.epsilon,
        rho: a.rho,
        converged: sol.converged,
        objective: sol.solution.objective,
        deterministic_objective: sol.deterministic.objective,
        cost_of_uncertainty: cost_of_uncertainty(sol.solution.objective, sol.deterministic.objective).unwrap_or(0.0),
        outer_iterations: sol.trace.outer_iterations(),
        certificate: (a.mode != Mode::Det).then_some(sol.certificate),
        generated_margins: sol.generated,
        wind: wind.clone(),
        policies: sol.policies.clone(),
        dispatch,
        hvdc,
        binding: sol.solution.binding.clone(),
        kkt: sol.solution.kkt,
        note: sol.solution.note.clone(),
        operating_point: sol.solution.op.clone(),
    };
    artifacts::write_json(&a.out, "solution.json", &file)?;
    artifacts::write(&a.out, "trace.csv", &sol.trace.to_csv(net))?;
    let active = if a.mode == Mode::Det { vec![false; nq] } else { sol.active.clone() };
    artifacts::write(&a.out, "margins.csv", &artifacts::margins_csv(net, &sol.margins, &active))?;
    info(&format!(
        "{} {}: objective {:.2} $/h, cost of uncertainty {:.3} %, {} outer iterations",
        net.name,
        a.mode.as_str(),
        file.objective,
        file.cost_of_uncertainty,
        file.outer_iterations
    ));
    Ok(())
}

pub fn validate(a: &ValidateArgs) -> Result<(), Failure> {
    let case = load_case(&a.case)?;
    let net = &case.net;
    let sol: SolutionFile = artifacts::read_json(&a.solution)?;
    if sol.fingerprint != case.fingerprint {
        return Err(anyhow!(
            "solution {} was computed on a different case (fingerprint {} vs {})",
            a.solution.display(),
            &sol.fingerprint[..12],
            &case.fingerprint[..12]
        )
        .into());
    }
    ensure_dir(&a.out)?;
    let mut runs = vec![("in", "in-sample", sample_gaussian(&sol.wind, a.mc_n, derive(a.seed, "in-sample")))];
    if let Some(path) = &a.samples {
        let s = load_samples(path, net).with_context(|| format!("cannot load samples {}", path.display())).map_err(Failure::Input)?;
        runs.push(("out", "out-of-sample", s));
    }
    for (tag, kind, samples) in runs {
        let report = monte_carlo(net, &sol.operating_point, &sol.policies, &samples).map_err(|e| Failure::Input(anyhow!(e)))?;
        let source = match &a.samples {
            Some(p) if tag == "out" => p.display().to_string(),
            _ => format!("gaussian, seed {}", a.seed),
        };
        print!("{} {} ({kind}):\n{}", sol.case, sol.mode, report.to_text());
        artifacts::write(&a.out, &format!("report_{tag}.csv"), &report.to_csv())?;
        artifacts::write(&a.out, &format!("report_{tag}.txt"), &report.to_text())?;
        let file = ReportFile {
            name: sol.mode.clone(),
            case: sol.case.clone(),
            fingerprint: sol.fingerprint.clone(),
            kind: kind.into(),
            source,
            objective: sol.objective,
            deterministic_objective: sol.deterministic_objective,
            report,
        };
        artifacts::write_json(&a.out, &format!("report_{tag}.json"), &file)?;
    }
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<(), Failure> {
    let files: Vec<ReportFile> = a.reports.iter().map(|p| artifacts::read_json(p)).collect::<anyhow::Result<_>>()?;
    if let Some(first) = files.first() {
        if let Some(other) = files.iter().find(|f| f.fingerprint != first.fingerprint) {
            return Err(anyhow!("reports belong to different cases ({} and {})", first.case, other.case).into());
        }
    }
    let mixed = files.iter().any(|f| f.kind != files[0].kind);
    let runs: Vec<RunSummary> = files
        .iter()
        .map(|f| RunSummary {
            name: if mixed { format!("{} {}", f.name, f.kind) } else { f.name.clone() },
            objective: f.objective,
            report: f.report.clone(),
        })
        .collect();
    let table = compare_runs(&runs).map_err(|e| Failure::Input(anyhow!(e)))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(&a.out, table.to_csv()).with_context(|| format!("cannot write {}", a.out.display()))?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn import(a: &ImportArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.legacy).with_context(|| format!("cannot read {}", a.legacy.display()))?;
    let mut opts = match &a.sidecar {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            toml::from_str::<ImportOptions>(&s).with_context(|| format!("invalid sidecar {}", p.display()))?
        }
        None => ImportOptions::default(),
    };
    if let Some(s) = a.line_limit_scale {
        opts.line_limit_scale = Some(s);
    }
    let imported = import_legacy(&text, &opts).with_context(|| format!("cannot import {}", a.legacy.display()))?;
    for w in &imported.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::write(&a.out, serialize_case(&imported.network)).with_context(|| format!("cannot write {}", a.out.display()))?;
    info(&format!("wrote {} ({} buses)", a.out.display(), imported.network.n_bus()));
    Ok(())
}

pub fn synth_samples(a: &SynthArgs) -> Result<(), Failure> {
    let case = load_case(&a.case)?;
    let net = &case.net;
    let model = WindModel::from_forecast(net, a.wind.wind_sigma, a.wind.wind_corr).map_err(|e| Failure::Input(anyhow!(e)))?;
    let samples = match a.kind {
        SampleKind::Gaussian => sample_gaussian(&model, a.n, derive(a.seed, "gaussian")),
        SampleKind::Mixture => {
            sample_mixture(&model, MixtureSpec::default(), a.n, derive(a.seed, "mixture")).map_err(|e| Failure::Input(anyhow!(e)))?
        }
    };
    std::fs::write(&a.out, samples.to_csv(net.base_mva)).with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(())
}
