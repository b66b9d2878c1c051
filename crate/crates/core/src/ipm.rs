//! Primal-dual interior-point method for smooth nonlinear programs
//!
//! ```text
//! min f(x)  s.t.  g(x) = 0,  h(x) ≤ 0
//! ```
//!
//! Slacks `z > 0` turn the inequalities into `h(x) + z = 0`; each iteration takes a
//! Newton step on the perturbed KKT conditions `μ ⊙ z = γ` and shrinks the barrier
//! parameter `γ` towards zero. Step lengths keep `z` and `μ` strictly positive.

use nalgebra::{DMatrix, DVector};

/// Function values and first derivatives at a point.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub f: f64,
    pub df: DVector<f64>,
    pub g: DVector<f64>,
    /// `∂g/∂x`, `n_eq × n`.
    pub dg: DMatrix<f64>,
    pub h: DVector<f64>,
    /// `∂h/∂x`, `n_ineq × n`.
    pub dh: DMatrix<f64>,
}

pub trait Nlp {
    fn n_var(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> NlpEval;
    /// Hessian of `f + λᵀg + μᵀh`.
    fn hessian(&self, x: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    /// Absolute bound on `‖g‖∞` and `max(h)`.
    pub feastol: f64,
    /// Bound on `‖∇L‖∞ / (1 + max(‖λ‖∞, ‖μ‖∞))`.
    pub gradtol: f64,
    /// Bound on `zᵀμ / (1 + ‖x‖∞)`.
    pub comptol: f64,
    /// Bound on the relative objective change between iterates.
    pub costtol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the boundary taken by a step.
    pub xi: f64,
    /// Centering parameter.
    pub sigma: f64,
    pub z0: f64,
    pub alpha_min: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            feastol: 1e-8,
            gradtol: 1e-7,
            comptol: 1e-8,
            costtol: 1e-9,
            max_iter: 200,
            xi: 0.99995,
            sigma: 0.1,
            z0: 1.0,
            alpha_min: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Converged,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmProgress {
    pub feascond: f64,
    pub gradcond: f64,
    pub compcond: f64,
    pub costcond: f64,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: DVector<f64>,
    pub lam: DVector<f64>,
    pub mu: DVector<f64>,
    pub z: DVector<f64>,
    pub f: f64,
    pub status: IpmStatus,
    pub iterations: usize,
    pub history: Vec<IpmProgress>,
    pub eval: NlpEval,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn max_or_zero(v: &DVector<f64>) -> f64 {
    v.iter().fold(f64::NEG_INFINITY, |a, x| a.max(*x)).max(0.0)
}

fn progress(
    e: &NlpEval,
    x: &DVector<f64>,
    z: &DVector<f64>,
    lam: &DVector<f64>,
    mu: &DVector<f64>,
    f_prev: f64,
) -> (IpmProgress, DVector<f64>) {
    let lx = &e.df + e.dg.tr_mul(lam) + e.dh.tr_mul(mu);
    let feascond = inf_norm(&e.g).max(max_or_zero(&e.h));
    let gradcond = inf_norm(&lx) / (1.0 + inf_norm(lam).max(inf_norm(mu)));
    let compcond = z.dot(mu) / (1.0 + inf_norm(x));
    let costcond = (e.f - f_prev).abs() / (1.0 + f_prev.abs());
    (IpmProgress { feascond, gradcond, compcond, costcond }, lx)
}

fn solve_kkt(m: &DMatrix<f64>, dg: &DMatrix<f64>, rhs_x: &DVector<f64>, rhs_g: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, neq) = (m.nrows(), dg.nrows());
    let mut reg = 0.0;
    for _ in 0..6 {
        let mut k = DMatrix::zeros(n + neq, n + neq);
        k.view_mut((0, 0), (n, n)).copy_from(m);
        k.view_mut((n, 0), (neq, n)).copy_from(dg);
        k.view_mut((0, n), (n, neq)).copy_from(&dg.transpose());
        for i in 0..n {
            k[(i, i)] += reg;
        }
        for i in 0..neq {
            k[(n + i, n + i)] -= reg;
        }
        let mut rhs = DVector::zeros(n + neq);
        rhs.rows_mut(0, n).copy_from(rhs_x);
        rhs.rows_mut(n, neq).copy_from(rhs_g);
        if let Some(sol) = k.lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                return Some(sol);
            }
        }
        reg = if reg == 0.0 { 1e-10 } else { reg * 100.0 };
    }
    None
}

pub fn solve<P: Nlp>(nlp: &P, x0: DVector<f64>, opts: &IpmOptions) -> IpmResult {
    let n = nlp.n_var();
    let mut x = x0;
    let mut e = nlp.eval(&x);
    let (neq, niq) = (e.g.len(), e.h.len());

    let mut gamma = 1.0;
    let mut z = DVector::from_element(niq, opts.z0);
    let mut mu = z.clone();
    for i in 0..niq {
        if e.h[i] < -opts.z0 {
            z[i] = -e.h[i];
        }
        if gamma / z[i] > opts.z0 {
            mu[i] = gamma / z[i];
        }
    }
    let mut lam = DVector::zeros(neq);
    let mut history = Vec::new();
    let (p, _) = progress(&e, &x, &z, &lam, &mu, e.f);
    history.push(p);

    let mut status = IpmStatus::MaxIterations;
    let mut iterations = 0;
    let mut f_prev = e.f;
    for it in 1..=opts.max_iter {
        iterations = it;
        let lx = &e.df + e.dg.tr_mul(&lam) + e.dh.tr_mul(&mu);
        let lxx = nlp.hessian(&x, &lam, &mu);
        let zinv = z.map(|v| 1.0 / v);
        // dhᵀ diag(μ/z) dh
        let mut scaled = e.dh.clone();
        for i in 0..niq {
            let w = mu[i] * zinv[i];
            scaled.row_mut(i).scale_mut(w);
        }
        let m = &lxx + e.dh.tr_mul(&scaled);
        let tmp = DVector::from_fn(niq, |i, _| (mu[i] * e.h[i] + gamma) * zinv[i]);
        let nvec = &lx + e.dh.tr_mul(&tmp);
        let Some(sol) = solve_kkt(&m, &e.dg, &(-&nvec), &(-&e.g)) else {
            status = IpmStatus::NumericalFailure;
            break;
        };
        let dx = sol.rows(0, n).into_owned();
        let dlam = sol.rows(n, neq).into_owned();
        let dz = -&e.h - &z - &e.dh * &dx;
        let dmu = DVector::from_fn(niq, |i, _| -mu[i] + zinv[i] * (gamma - mu[i] * dz[i]));

        let mut alphap = 1.0f64;
        let mut alphad = 1.0f64;
        for i in 0..niq {
            if dz[i] < 0.0 {
                alphap = alphap.min(opts.xi * (-z[i] / dz[i]));
            }
            if dmu[i] < 0.0 {
                alphad = alphad.min(opts.xi * (-mu[i] / dmu[i]));
            }
        }
        x += alphap * &dx;
        z += alphap * &dz;
        lam += alphad * &dlam;
        mu += alphad * &dmu;
        if niq > 0 {
            gamma = opts.sigma * z.dot(&mu) / niq as f64;
        }
        e = nlp.eval(&x);
        let (p, _) = progress(&e, &x, &z, &lam, &mu, f_prev);
        f_prev = e.f;
        history.push(p);

        if !x.iter().all(|v| v.is_finite()) || !e.f.is_finite() {
            status = IpmStatus::NumericalFailure;
            break;
        }
        if p.feascond < opts.feastol && p.gradcond < opts.gradtol && p.compcond < opts.comptol && p.costcond < opts.costtol {
            status = IpmStatus::Converged;
            break;
        }
        if alphap < opts.alpha_min || alphad < opts.alpha_min || (niq > 0 && (gamma < f64::EPSILON || gamma > 1.0 / f64::EPSILON)) {
            status = IpmStatus::NumericalFailure;
            break;
        }
    }
    IpmResult { x, lam, mu, z, f: e.f, status, iterations, history, eval: e }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// min (x0 − 2)² + (x1 − 1)²  s.t.  x0 + x1 = 2,  x0² − x1 ≤ 0.
    struct Toy;

    impl Nlp for Toy {
        fn n_var(&self) -> usize {
            2
        }
        fn eval(&self, x: &DVector<f64>) -> NlpEval {
            NlpEval {
                f: (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2),
                df: DVector::from_vec(vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] - 1.0)]),
                g: DVector::from_vec(vec![x[0] + x[1] - 2.0]),
                dg: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                h: DVector::from_vec(vec![x[0] * x[0] - x[1]]),
                dh: DMatrix::from_row_slice(1, 2, &[2.0 * x[0], -1.0]),
            }
        }
        fn hessian(&self, _x: &DVector<f64>, _lam: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[2.0 + 2.0 * mu[0], 0.0, 0.0, 2.0])
        }
    }

    #[test]
    fn solves_toy_problem() {
        let r = solve(&Toy, DVector::from_vec(vec![0.0, 0.0]), &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        // x0 + x1 = 2 and x0² = x1 on the active branch: x0 = 1
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-6);
        // stationarity: 2(x0−2) + λ + 2μ x0 = 0, 2(x1−1) + λ − μ = 0 → μ = 2/3, λ = 2/3
        assert_relative_eq!(r.mu[0], 2.0 / 3.0, epsilon = 1e-5);
        assert_relative_eq!(r.lam[0], 2.0 / 3.0, epsilon = 1e-5);
    }

    /// Box-constrained quadratic whose bound is inactive.
    struct Interior;

    impl Nlp for Interior {
        fn n_var(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> NlpEval {
            NlpEval {
                f: (x[0] - 0.3).powi(2),
                df: DVector::from_vec(vec![2.0 * (x[0] - 0.3)]),
                g: DVector::zeros(0),
                dg: DMatrix::zeros(0, 1),
                h: DVector::from_vec(vec![x[0] - 1.0, -x[0]]),
                dh: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            }
        }
        fn hessian(&self, _x: &DVector<f64>, _lam: &DVector<f64>, _mu: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0)
        }
    }

    #[test]
    fn inactive_bounds_have_vanishing_multipliers() {
        let r = solve(&Interior, DVector::from_vec(vec![0.9]), &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 0.3, epsilon = 1e-7);
        assert!(r.mu.iter().all(|m| *m < 1e-7));
    }
}
