//! Exact derivatives of the fitted coordinates with respect to the error
//! vector, and the second-order Poincare (SOPI) diagnostic moments.
//!
//! With D = diag(psi'(R)) and Dt = diag(psi''(R)) at the fit,
//!   d beta_j / d eps^T   = e_j^T (X^T D X)^{-1} X^T D,
//!   d^2 beta_j / d eps^2 = G^T diag(e_j^T (X^T D X)^{-1} X^T Dt) G,
//! where G = I - X (X^T D X)^{-1} X^T D.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::design::DesignMatrix;
use crate::error::MestError;
use crate::errors::ErrorModel;
use crate::loss::LossSpec;
use crate::solver::{self, FitResult, SolverOptions};

fn fit_hessian(design: &DesignMatrix, fit: &FitResult) -> Result<Cholesky<f64, Dyn>, MestError> {
    Cholesky::new(solver::weighted_gram(design.matrix(), &fit.d_weights))
        .ok_or_else(|| MestError::FactorizationFailure("X^T D X not positive definite".into()))
}

/// Full p x n gradient: row j is `d beta_j / d eps^T`.
pub fn gradient_beta(fit: &FitResult, design: &DesignMatrix) -> Result<DMatrix<f64>, MestError> {
    let chol = fit_hessian(design, fit)?;
    let mut xtd = design.matrix().transpose();
    for (i, mut col) in xtd.column_iter_mut().enumerate() {
        col *= fit.d_weights[i];
    }
    Ok(chol.solve(&xtd))
}

/// Single gradient row, without forming the full matrix.
pub fn gradient_beta_row(
    fit: &FitResult,
    design: &DesignMatrix,
    j: usize,
) -> Result<DVector<f64>, MestError> {
    let chol = fit_hessian(design, fit)?;
    let mut e = DVector::zeros(design.p());
    e[j] = 1.0;
    let w = chol.solve(&e);
    let xw = design.matrix() * w;
    Ok(DVector::from_fn(design.n(), |i, _| xw[i] * fit.d_weights[i]))
}

/// G = I - X (X^T D X)^{-1} X^T D.
pub fn big_g(fit: &FitResult, design: &DesignMatrix) -> Result<DMatrix<f64>, MestError> {
    let grad = gradient_beta(fit, design)?;
    let mut g = -(design.matrix() * grad);
    for i in 0..design.n() {
        g[(i, i)] += 1.0;
    }
    Ok(g)
}

/// The n x n Hessian of beta_j with respect to eps.
pub fn hessian_beta_j(
    fit: &FitResult,
    design: &DesignMatrix,
    j: usize,
) -> Result<DMatrix<f64>, MestError> {
    let chol = fit_hessian(design, fit)?;
    let mut e = DVector::zeros(design.p());
    e[j] = 1.0;
    let w = chol.solve(&e);
    let xw = design.matrix() * w;
    let v = DVector::from_fn(design.n(), |i, _| xw[i] * fit.dtilde_weights[i]);
    let g = big_g(fit, design)?;
    let mut vg = g.clone();
    for (i, mut row) in vg.row_iter_mut().enumerate() {
        row *= v[i];
    }
    Ok(g.transpose() * vg)
}

/// Operator norm of a symmetric matrix by power iteration.
pub fn sym_opnorm(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    // Power iteration on H^2: iterating on H itself oscillates whenever the
    // extreme eigenvalues are close in magnitude with opposite signs, which is
    // the generic situation for these indefinite curvature matrices. The
    // Rayleigh quotient v^T H^2 v = ||Hv||^2 converges monotonically to the
    // squared operator norm.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 % 7.0) * 0.1);
    v /= v.norm();
    let mut lam2 = 0.0f64;
    for _ in 0..1000 {
        let hv = h * &v;
        let next = hv.norm_squared();
        if next == 0.0 {
            return 0.0;
        }
        let w = h * hv;
        let delta = (next - lam2).abs();
        lam2 = next;
        let wn = w.norm();
        if wn == 0.0 || delta <= 1e-12 * lam2.max(1e-300) {
            break;
        }
        v = &w / wn;
    }
    lam2.sqrt()
}

/// Monte Carlo SOPI moments for coordinate `j`.
#[derive(Debug, Clone)]
pub struct SopiEstimate {
    pub j: usize,
    pub kappa0: f64,
    pub kappa0_se: f64,
    pub kappa1: f64,
    pub kappa1_se: f64,
    pub kappa2: f64,
    pub kappa2_se: f64,
    pub mj: f64,
    pub mj_se: f64,
    /// Sample variance of beta_j over the replications.
    pub var_betaj: f64,
    pub reps: usize,
    pub failed: usize,
}

struct RepDraws {
    grad4_sum: f64,  // sum_i grad_i^4
    grad2_sq: f64,   // ||grad||_2^4
    hess_op4: f64,   // ||hess||_op^4
    sup_row: f64,    // || e_j^T (X^T D X)^{-1} X^T D^{1/2} ||_inf
    beta_j: f64,
}

fn sopi_one_rep(
    design: &DesignMatrix,
    loss: &LossSpec,
    error_model: &ErrorModel,
    j: usize,
    seed: u64,
    rep: u64,
    opts: &SolverOptions,
) -> Result<RepDraws, MestError> {
    let eps = DVector::from_vec(error_model.draw(design.n(), seed, &[0x50, j as u64, rep]));
    let fit = solver::fit(design, &eps, loss, opts)?;
    let grad = gradient_beta_row(&fit, design, j)?;
    let grad4_sum = grad.iter().map(|g| g * g * g * g).sum();
    let g2 = grad.norm_squared();
    let hess = hessian_beta_j(&fit, design, j)?;
    let op = sym_opnorm(&hess);
    // the sup row uses D^{1/2}: grad_i / sqrt(d_i) * ... = (x_i w) sqrt(d_i)
    let sup_row = grad
        .iter()
        .zip(fit.d_weights.iter())
        .fold(0.0f64, |a, (&g, &d)| a.max((g / d.sqrt()).abs()));
    Ok(RepDraws {
        grad4_sum,
        grad2_sq: g2 * g2,
        hess_op4: op.powi(4),
        sup_row,
        beta_j: fit.beta[j],
    })
}

/// Estimate kappa0_j, kappa1_j, kappa2_j, M_j by Monte Carlo over fresh
/// error draws. Replications are keyed by (seed, j, rep) and reduced in
/// index order, so results do not depend on the thread count.
pub fn sopi_moments(
    design: &DesignMatrix,
    loss: &LossSpec,
    error_model: &ErrorModel,
    j: usize,
    reps: usize,
    seed: u64,
) -> Result<SopiEstimate, MestError> {
    if reps < 100 {
        return Err(MestError::InvalidArgument(format!(
            "sopi_moments needs reps >= 100, got {reps}"
        )));
    }
    if j >= design.p() {
        return Err(MestError::InvalidArgument(format!("coordinate {j} out of range")));
    }
    let opts = SolverOptions::default();
    let results: Vec<Result<RepDraws, MestError>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| sopi_one_rep(design, loss, error_model, j, seed, rep, &opts))
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > reps {
        return Err(MestError::TooManyFailures {
            failed,
            total: reps,
        });
    }
    let draws: Vec<RepDraws> = results.into_iter().filter_map(Result::ok).collect();
    let m = draws.len() as f64;
    let mean_se = |f: &dyn Fn(&RepDraws) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = draws.iter().map(f).collect();
        let mu = crate::stats::mean(&vals);
        let se = (crate::stats::sample_variance(&vals) / m).sqrt();
        (mu, se)
    };
    let (m0, s0) = mean_se(&|d| d.grad4_sum);
    let (m1, s1) = mean_se(&|d| d.grad2_sq);
    let (m2, s2) = mean_se(&|d| d.hess_op4);
    let (mj, mj_se) = mean_se(&|d| d.sup_row);
    let betas: Vec<f64> = draws.iter().map(|d| d.beta_j).collect();
    // delta method for the fractional powers
    let kappa0 = m0.sqrt();
    let kappa1 = m1.powf(0.25);
    let kappa2 = m2.powf(0.25);
    Ok(SopiEstimate {
        j,
        kappa0,
        kappa0_se: if m0 > 0.0 { s0 / (2.0 * kappa0) } else { 0.0 },
        kappa1,
        kappa1_se: if m1 > 0.0 { s1 / (4.0 * m1.powf(0.75)) } else { 0.0 },
        kappa2,
        kappa2_se: if m2 > 0.0 { s2 / (4.0 * m2.powf(0.75)) } else { 0.0 },
        mj,
        mj_se,
        var_betaj: crate::stats::sample_variance(&betas),
        reps,
        failed,
    })
}

/// The TV-distance surrogate `2 sqrt(5) (c1 c2 kappa0 + c1^3 kappa1 kappa2) / var`.
pub fn sopi_bound(
    kappa0: f64,
    kappa1: f64,
    kappa2: f64,
    c1: f64,
    c2: f64,
    var_betaj: f64,
) -> Result<f64, MestError> {
    if var_betaj <= 0.0 {
        return Err(MestError::InvalidArgument(format!(
            "variance must be positive, got {var_betaj}"
        )));
    }
    Ok(2.0 * 5.0f64.sqrt() * (c1 * c2 * kappa0 + c1.powi(3) * kappa1 * kappa2) / var_betaj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{generate, DesignSpec, EntryDist, Family};
    use crate::loss::make_smoothed_huber;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_design(n: usize, p: usize, seed: u64) -> DesignMatrix {
        generate(&DesignSpec {
            family: Family::Iid {
                dist: EntryDist::Gaussian,
            },
            n,
            p,
            include_intercept: false,
            seed,
        })
        .unwrap()
    }

    fn gaussian_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = substream(seed, &[0xEE]);
        DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn square_loss_gradient_is_pseudoinverse() {
        let d = gaussian_design(30, 6, 1);
        let y = gaussian_vec(30, 1);
        let fit = solver::fit(&d, &y, &LossSpec::square(), &SolverOptions::default()).unwrap();
        let grad = gradient_beta(&fit, &d).unwrap();
        let x = d.matrix();
        let pinv = Cholesky::new(x.transpose() * x).unwrap().solve(&x.transpose());
        assert!((grad - pinv).norm() < 1e-9);
    }

    #[test]
    fn gradient_times_x_is_identity() {
        let d = gaussian_design(40, 8, 2);
        let y = gaussian_vec(40, 2);
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let fit = solver::fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let grad = gradient_beta(&fit, &d).unwrap();
        let gx = grad * d.matrix();
        let id = DMatrix::<f64>::identity(8, 8);
        assert!((gx - id).norm() < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let mut tight = SolverOptions::default();
        tight.tol = 1e-12;
        for seed in 0..20u64 {
            let d = gaussian_design(40, 8, 100 + seed);
            let y = gaussian_vec(40, 100 + seed);
            let fit = solver::fit(&d, &y, &loss, &tight).unwrap();
            let grad = gradient_beta(&fit, &d).unwrap();
            let h = 1e-5;
            // spot-check a handful of (j, i) pairs per instance
            for &(j, i) in &[(0usize, 0usize), (3, 17), (7, 39), (5, 8)] {
                let mut yp = y.clone();
                yp[i] += h;
                let mut ym = y.clone();
                ym[i] -= h;
                let bp = solver::fit(&d, &yp, &loss, &tight).unwrap().beta[j];
                let bm = solver::fit(&d, &ym, &loss, &tight).unwrap().beta[j];
                let fd = (bp - bm) / (2.0 * h);
                let g = grad[(j, i)];
                assert!(
                    (g - fd).abs() <= 1e-5 * (1.0 + g.abs()),
                    "seed {seed} ({j},{i}): analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn hessian_square_loss_zero_and_symmetric() {
        let d = gaussian_design(20, 4, 3);
        let y = gaussian_vec(20, 3);
        let fit = solver::fit(&d, &y, &LossSpec::square(), &SolverOptions::default()).unwrap();
        let h = hessian_beta_j(&fit, &d, 2).unwrap();
        assert!(h.norm() < 1e-12);

        let loss = make_smoothed_huber(1.0, 0.05, 0.3).unwrap();
        let fit = solver::fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let h = hessian_beta_j(&fit, &d, 1).unwrap();
        let asym = (&h - h.transpose()).amax();
        assert!(asym <= 1e-10, "asymmetry {asym}");
    }

    #[test]
    fn hessian_matches_gradient_finite_differences() {
        let loss = make_smoothed_huber(1.0, 0.05, 0.3).unwrap();
        let mut tight = SolverOptions::default();
        tight.tol = 1e-12;
        let d = gaussian_design(20, 4, 4);
        let y = gaussian_vec(20, 4);
        let fit = solver::fit(&d, &y, &loss, &tight).unwrap();
        let j = 2;
        let hess = hessian_beta_j(&fit, &d, j).unwrap();
        let h = 1e-5;
        for i in [0usize, 7, 13, 19] {
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            let gp = gradient_beta_row(&solver::fit(&d, &yp, &loss, &tight).unwrap(), &d, j).unwrap();
            let gm = gradient_beta_row(&solver::fit(&d, &ym, &loss, &tight).unwrap(), &d, j).unwrap();
            let fd = (gp - gm) / (2.0 * h);
            let col = hess.column(i);
            let scale = col.amax().max(1e-3);
            assert!(
                (col - fd).amax() <= 1e-4 * scale,
                "hessian column {i} mismatch"
            );
        }
    }

    #[test]
    fn g_idempotent_in_d_metric() {
        let d = gaussian_design(30, 10, 5);
        let y = gaussian_vec(30, 5);
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let fit = solver::fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let g = big_g(&fit, &d).unwrap();
        let dh = DMatrix::from_diagonal(&fit.d_weights.map(f64::sqrt));
        let dhi = DMatrix::from_diagonal(&fit.d_weights.map(|v| 1.0 / v.sqrt()));
        let m = &dh * &g * &dhi;
        assert!((&m * &m - &m).norm() < 1e-8);
    }

    #[test]
    fn gradient_row_norm_bound() {
        let d = gaussian_design(60, 30, 6);
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        for s in 0..5u64 {
            let y = gaussian_vec(60, 60 + s);
            let fit = solver::fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
            for j in [0usize, 15, 29] {
                let g = gradient_beta_row(&fit, &d, j).unwrap();
                let bound = loss.k1 / (60.0 * loss.k0 * d.lambda_minus());
                assert!(
                    g.norm_squared() <= bound * (1.0 + 1e-10),
                    "||grad||^2 = {} > {}",
                    g.norm_squared(),
                    bound
                );
            }
        }
    }

    #[test]
    fn opnorm_against_eigensolver() {
        let mut rng = substream(17, &[9]);
        let a = DMatrix::from_fn(25, 25, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &a + a.transpose();
        let eigs = s.symmetric_eigenvalues();
        let exact = eigs.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let approx = sym_opnorm(&s);
        assert!((approx - exact).abs() <= 1e-6 * exact);
    }

    #[test]
    fn sopi_bound_examples() {
        assert_eq!(sopi_bound(0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap(), 0.0);
        let v = sopi_bound(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((v - 4.0 * 5.0f64.sqrt()).abs() < 1e-12);
        // gaussian errors (c2 = 0) with square loss (kappa2 = 0): exact zero
        assert_eq!(sopi_bound(3.0, 2.0, 0.0, 1.0, 0.0, 0.5).unwrap(), 0.0);
        assert!(sopi_bound(1.0, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn sopi_moments_square_loss_deterministic_parts() {
        let d = gaussian_design(40, 10, 7);
        let model = ErrorModel::gaussian(1.0).unwrap();
        let est = sopi_moments(&d, &LossSpec::square(), &model, 3, 100, 11).unwrap();
        assert_eq!(est.failed, 0);
        // kappa2 = 0 exactly; kappa1 = || e_j^T (X^T X)^{-1} X^T ||_2
        assert_eq!(est.kappa2, 0.0);
        let x = d.matrix();
        let pinv = Cholesky::new(x.transpose() * x).unwrap().solve(&x.transpose());
        let expect = pinv.row(3).norm();
        assert!((est.kappa1 - expect).abs() < 1e-10);
        // per-lemma bound with empirical Mj
        let n = 40.0;
        let bound1 = (1.0 / (n * d.lambda_minus())).powi(2);
        assert!(est.kappa1.powi(4) <= bound1 * (1.0 + 1e-8));
        let bound0 = est.mj / (n * d.lambda_minus()).powf(1.5);
        assert!(est.kappa0.powi(2) <= bound0 * (1.0 + 1e-8));
    }

    #[test]
    fn mj_scaling_law() {
        // median M_j * n stays bounded as n grows at fixed kappa = 0.5
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let model = ErrorModel::gaussian(1.0).unwrap();
        let mut scaled = Vec::new();
        for &n in &[50usize, 100, 200] {
            let d = gaussian_design(n, n / 2, 31 + n as u64);
            let est = sopi_moments(&d, &loss, &model, 0, 100, 13).unwrap();
            scaled.push(est.mj * n as f64);
        }
        assert!(scaled[2] <= 3.0 * scaled[0], "M_j*n grew: {scaled:?}");
    }
}
