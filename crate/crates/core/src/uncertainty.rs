//! Wind forecast-error models and sample sets.
//!
//! Sampling draws sample `i` from its own ChaCha stream (`seed`, stream `i`), so the
//! result does not depend on how the work is split across threads.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Network;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("covariance is not symmetric positive semidefinite: {0}")]
    NotPsd(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("no samples")]
    NoSamples,
    #[error("unknown wind farm id `{0}`")]
    UnknownFarm(String),
    #[error("wind farm `{0}` missing from sample header")]
    MissingFarm(String),
    #[error("row {row}, column {column}: non-numeric cell `{cell}`")]
    NonNumeric { row: usize, column: usize, cell: String },
    #[error("row {row}: expected {expected} cells, got {got}")]
    RowLength { row: usize, expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(p)`.
///
/// Rational approximation (P. J. Acklam) followed by one Halley step on the CDF, which
/// brings the result to full double precision.
pub fn normal_quantile(p: f64) -> Result<f64, UncertaintyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(UncertaintyError::Probability(p));
    }
    const A: [f64; 6] =
        [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] =
        [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work on the smaller tail probability to avoid cancellation in 1 − p.
    let e = if x < 0.0 { normal_cdf(x) - p } else { (1.0 - p) - normal_cdf(-x) };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    Ok(x)
}

/// Zero-mean Gaussian forecast-error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindModel {
    /// Wind farm ids in network order.
    pub ids: Vec<String>,
    /// Sample mean the model was fitted around (zeros for synthetic models).
    pub mean: Vec<f64>,
    /// Error covariance in per-unit².
    pub covariance: Vec<Vec<f64>>,
    pub source: String,
}

impl WindModel {
    pub fn new(ids: Vec<String>, covariance: DMatrix<f64>, source: impl Into<String>) -> Result<Self, UncertaintyError> {
        let w = ids.len();
        if covariance.nrows() != w || covariance.ncols() != w {
            return Err(UncertaintyError::NotPsd(format!("expected {w}×{w} matrix")));
        }
        let scale = covariance.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
        for i in 0..w {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale {
                    return Err(UncertaintyError::NotPsd(format!("entry ({i}, {j}) differs from ({j}, {i})")));
                }
            }
        }
        if w > 0 {
            let min = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
            if min < -1e-10 * scale {
                return Err(UncertaintyError::NotPsd(format!("smallest eigenvalue {min:.3e}")));
            }
        }
        Ok(WindModel {
            ids,
            mean: vec![0.0; w],
            covariance: (0..w).map(|i| (0..w).map(|j| covariance[(i, j)]).collect()).collect(),
            source: source.into(),
        })
    }

    /// Independent-or-correlated model with per-farm standard deviation `sigma_frac`
    /// times the forecast and a common correlation coefficient.
    pub fn from_forecast(net: &Network, sigma_frac: f64, correlation: f64) -> Result<Self, UncertaintyError> {
        let sd: Vec<f64> = net.wind_farms.iter().map(|w| sigma_frac * w.p_forecast).collect();
        let w = sd.len();
        let cov = DMatrix::from_fn(w, w, |i, j| if i == j { sd[i] * sd[i] } else { correlation * sd[i] * sd[j] });
        WindModel::new(
            net.wind_farms.iter().map(|f| f.id.clone()).collect(),
            cov,
            format!("synthetic gaussian: sigma {sigma_frac} of forecast, correlation {correlation}"),
        )
    }

    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let w = self.dim();
        DMatrix::from_fn(w, w, |i, j| self.covariance[i][j])
    }

    /// Copy with every covariance entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for row in &mut m.covariance {
            for x in row {
                *x *= factor;
            }
        }
        m
    }

    /// Symmetric square root `Σ^{1/2}` after clipping negative eigenvalues.
    pub fn sqrt(&self) -> DMatrix<f64> {
        sym_sqrt(&self.sigma())
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    SyntheticGaussian { seed: u64 },
    SyntheticMixture { seed: u64 },
    ExternalFile { path: String },
}

/// Realizations of the wind forecast error, one row per sample, per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV text in MW with the farm ids as header.
    pub fn to_csv(&self, base_mva: f64) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.ids).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(|x| format!("{}", x * base_mva))).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
    }
}

/// Unbiased covariance of the samples around their mean.
pub fn fit_gaussian(samples: &SampleSet) -> Result<WindModel, UncertaintyError> {
    let n = samples.len();
    if n < 2 {
        return Err(UncertaintyError::TooFewSamples(n));
    }
    let w = samples.ids.len();
    let mut mean = vec![0.0; w];
    for r in &samples.rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(w, w);
    for r in &samples.rows {
        for i in 0..w {
            for j in 0..w {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let cov = if w > 0 {
        let eig = SymmetricEigen::new(cov);
        let d = eig.eigenvalues.map(|l| l.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
    } else {
        cov
    };
    let cov = (&cov + cov.transpose()) * 0.5;
    let mut model = WindModel::new(samples.ids.clone(), cov, format!("fitted to {n} samples"))?;
    model.mean = mean;
    Ok(model)
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate<F>(n: usize, f: F) -> Vec<Vec<f64>>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn correlated_draw(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = l.nrows();
    let z: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
    (0..w).map(|i| (0..w).map(|j| l[(i, j)] * z[j]).sum()).collect()
}

/// `n` draws from `N(0, Σ)`, reproducible for a given seed.
pub fn sample_gaussian(model: &WindModel, n: usize, seed: u64) -> SampleSet {
    let l = add_jitter(&model.sigma());
    let l = sym_sqrt(&l);
    let rows = generate(n, |i| correlated_draw(&l, &mut rng_for(seed, i)));
    SampleSet { ids: model.ids.clone(), rows, provenance: Provenance::SyntheticGaussian { seed } }
}

fn add_jitter(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m.clone();
    let nonzero = m.iter().any(|x| *x != 0.0);
    if nonzero {
        for i in 0..m.nrows() {
            m[(i, i)] += 1e-12;
        }
    }
    m
}

/// Two-component Gaussian mixture with the same mean and covariance as a [`WindModel`].
///
/// With probability `weight` a sample comes from the component centred at
/// `shift · σ` (σ the vector of per-farm standard deviations), otherwise from the
/// component centred at `−weight/(1−weight) · shift · σ`. Both share the inner
/// covariance `Σ − κ σσᵀ`, `κ = shift² · weight/(1−weight)`, so the mixture covariance is
/// exactly `Σ` while the marginals are skewed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weight: f64,
    pub shift: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec { weight: 0.2, shift: 1.2 }
    }
}

pub fn sample_mixture(model: &WindModel, spec: MixtureSpec, n: usize, seed: u64) -> Result<SampleSet, UncertaintyError> {
    if !(spec.weight > 0.0 && spec.weight < 1.0) {
        return Err(UncertaintyError::Probability(spec.weight));
    }
    let sigma = model.sigma();
    let w = model.dim();
    let sd: Vec<f64> = (0..w).map(|i| sigma[(i, i)].sqrt()).collect();
    let ratio = spec.weight / (1.0 - spec.weight);
    let kappa = spec.shift * spec.shift * ratio;
    let inner = DMatrix::from_fn(w, w, |i, j| sigma[(i, j)] - kappa * sd[i] * sd[j]);
    if w > 0 {
        let min = SymmetricEigen::new(inner.clone()).eigenvalues.min();
        let scale = sigma.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if min < -1e-12 * scale {
            return Err(UncertaintyError::NotPsd(format!(
                "mixture shift {} too large for this covariance (inner eigenvalue {min:.3e})",
                spec.shift
            )));
        }
    }
    let l = sym_sqrt(&add_jitter(&inner));
    let hi: Vec<f64> = sd.iter().map(|s| spec.shift * s).collect();
    let lo: Vec<f64> = hi.iter().map(|m| -ratio * m).collect();
    let rows = generate(n, |i| {
        let mut rng = rng_for(seed, i);
        let centre = if rng.random::<f64>() < spec.weight { &hi } else { &lo };
        correlated_draw(&l, &mut rng).iter().zip(centre).map(|(x, m)| x + m).collect()
    });
    Ok(SampleSet { ids: model.ids.clone(), rows, provenance: Provenance::SyntheticMixture { seed } })
}

/// Parses a sample CSV (header of farm ids, values in MW) into network order.
pub fn parse_samples(text: &str, net: &Network, origin: &str) -> Result<SampleSet, UncertaintyError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let farm_ids: Vec<String> = net.wind_farms.iter().map(|w| w.id.clone()).collect();
    for h in &header {
        if !farm_ids.contains(h) {
            return Err(UncertaintyError::UnknownFarm(h.clone()));
        }
    }
    let mut column_of = Vec::with_capacity(farm_ids.len());
    for id in &farm_ids {
        match header.iter().position(|h| h == id) {
            Some(c) => column_of.push(c),
            None => return Err(UncertaintyError::MissingFarm(id.clone())),
        }
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        if record.len() != header.len() {
            return Err(UncertaintyError::RowLength { row, expected: header.len(), got: record.len() });
        }
        let mut vals = Vec::with_capacity(column_of.len());
        for &c in &column_of {
            let cell = &record[c];
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| UncertaintyError::NonNumeric {
                row,
                column: c + 1,
                cell: cell.to_string(),
            })?;
            vals.push(v / net.base_mva);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(UncertaintyError::NoSamples);
    }
    Ok(SampleSet { ids: farm_ids, rows, provenance: Provenance::ExternalFile { path: origin.to_string() } })
}

pub fn load_samples(path: &Path, net: &Network) -> Result<SampleSet, UncertaintyError> {
    let text = std::fs::read_to_string(path)?;
    parse_samples(&text, net, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::WindFarm;
    use proptest::prelude::*;

    /// Quantile by bisection on an independent error-function implementation.
    fn oracle_quantile(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn farms(n: usize) -> Network {
        let mut net = two_bus(1.0, 0.2);
        for k in 0..n {
            net.wind_farms.push(WindFarm { id: format!("W{}", k + 1), bus: 2, p_forecast: 0.5, p_rated: 1.0, power_factor: 1.0 });
        }
        net
    }

    #[test]
    fn quantile_values() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.95).unwrap() - 1.64485).abs() < 1e-5);
        assert!((normal_quantile(0.975).unwrap() - 1.95996).abs() < 1e-5);
        assert!((normal_quantile(0.95).unwrap() - oracle_quantile(0.95)).abs() < 1e-10);
        assert!((normal_quantile(0.975).unwrap() - oracle_quantile(0.975)).abs() < 1e-10);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    proptest! {
        #[test]
        fn quantile_round_trip(p in 1e-4f64..(1.0 - 1e-4)) {
            let x = normal_quantile(p).unwrap();
            prop_assert!((normal_cdf(x) - p).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_samples_have_zero_covariance() {
        let s = SampleSet {
            ids: vec!["A".into(), "B".into()],
            rows: vec![vec![0.3, -0.1]; 5],
            provenance: Provenance::ExternalFile { path: "-".into() },
        };
        let m = fit_gaussian(&s).unwrap();
        assert!(m.covariance.iter().flatten().all(|x| x.abs() < 1e-15));
        assert_eq!(m.mean, vec![0.3, -0.1]);
    }

    #[test]
    fn fit_needs_two_samples() {
        let s = SampleSet { ids: vec!["A".into()], rows: vec![vec![1.0]], provenance: Provenance::SyntheticGaussian { seed: 0 } };
        assert!(matches!(fit_gaussian(&s), Err(UncertaintyError::TooFewSamples(1))));
    }

    #[test]
    fn independent_noise_has_small_cross_covariance() {
        let model = WindModel::new(vec!["A".into(), "B".into()], DMatrix::identity(2, 2), "t").unwrap();
        let fit = fit_gaussian(&sample_gaussian(&model, 100_000, 7)).unwrap();
        assert!(fit.covariance[0][1].abs() <= 0.02);
    }

    #[test]
    fn perfectly_correlated_columns_are_rank_one() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| (i as f64 * 0.37).sin()).map(|x| vec![x, 2.0 * x]).collect();
        let s = SampleSet { ids: vec!["A".into(), "B".into()], rows, provenance: Provenance::ExternalFile { path: "-".into() } };
        let fit = fit_gaussian(&s).unwrap();
        let min = SymmetricEigen::new(fit.sigma()).eigenvalues.min();
        assert!(min.abs() <= 1e-10);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(WindModel::new(vec!["A".into(), "B".into()], bad, "t").is_err());
    }

    #[test]
    fn zero_covariance_gives_zero_samples() {
        let model = WindModel::new(vec!["A".into(), "B".into()], DMatrix::zeros(2, 2), "t").unwrap();
        let s = sample_gaussian(&model, 100, 1);
        assert!(s.rows.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn sample_variances_match() {
        let model = WindModel::new(vec!["A".into(), "B".into()], DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0])), "t")
            .unwrap();
        let fit = fit_gaussian(&sample_gaussian(&model, 100_000, 3)).unwrap();
        assert!((fit.covariance[0][0] - 1.0).abs() < 0.05);
        assert!((fit.covariance[1][1] - 4.0).abs() < 0.2);
    }

    #[test]
    fn sampling_is_deterministic() {
        let net = farms(3);
        let model = WindModel::from_forecast(&net, 0.075, 0.3).unwrap();
        assert_eq!(sample_gaussian(&model, 500, 11), sample_gaussian(&model, 500, 11));
        assert_ne!(sample_gaussian(&model, 5, 11), sample_gaussian(&model, 5, 12));
    }

    #[test]
    fn fit_recovers_covariance() {
        let net = farms(3);
        let model = WindModel::from_forecast(&net, 0.1, 0.3).unwrap();
        let fit = fit_gaussian(&sample_gaussian(&model, 100_000, 5)).unwrap();
        let diff = (fit.sigma() - model.sigma()).norm() / model.sigma().norm();
        assert!(diff < 0.05, "{diff}");
    }

    #[test]
    fn mixture_matches_covariance_and_is_skewed() {
        let net = farms(2);
        let model = WindModel::from_forecast(&net, 0.1, 0.3).unwrap();
        let s = sample_mixture(&model, MixtureSpec::default(), 200_000, 9).unwrap();
        let fit = fit_gaussian(&s).unwrap();
        let diff = (fit.sigma() - model.sigma()).norm() / model.sigma().norm();
        assert!(diff < 0.03, "{diff}");
        assert!(fit.mean.iter().all(|m| m.abs() < 1e-3));
        let sd = model.covariance[0][0].sqrt();
        let skew: f64 = s.rows.iter().map(|r| (r[0] / sd).powi(3)).sum::<f64>() / s.len() as f64;
        assert!(skew > 0.1, "{skew}");
    }

    #[test]
    fn csv_columns_are_remapped_by_id() {
        let net = farms(2);
        let s = parse_samples("W2,W1\n10,20\n-5,7.5\n", &net, "mem").unwrap();
        assert_eq!(s.rows, vec![vec![0.2, 0.1], vec![0.075, -0.05]]);
        assert_eq!(s.ids, vec!["W1", "W2"]);
    }

    #[test]
    fn csv_errors() {
        let net = farms(2);
        assert!(matches!(parse_samples("W1,W2\n", &net, "mem"), Err(UncertaintyError::NoSamples)));
        assert!(matches!(parse_samples("W1,W3\n1,2\n", &net, "mem"), Err(UncertaintyError::UnknownFarm(id)) if id == "W3"));
        assert!(matches!(parse_samples("W1,W2\n1,x\n", &net, "mem"), Err(UncertaintyError::NonNumeric { row: 2, column: 2, .. })));
        assert!(matches!(parse_samples("W1\n1\n", &net, "mem"), Err(UncertaintyError::MissingFarm(_))));
    }

    #[test]
    fn csv_round_trip() {
        let net = farms(2);
        let model = WindModel::from_forecast(&net, 0.1, 0.3).unwrap();
        let s = sample_gaussian(&model, 20, 4);
        let back = parse_samples(&s.to_csv(net.base_mva), &net, "mem").unwrap();
        for (a, b) in s.rows.iter().flatten().zip(back.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
