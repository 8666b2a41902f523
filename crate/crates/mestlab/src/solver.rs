//! Newton solver for the M-estimation problem
//! `min_beta (1/n) sum_i rho(y_i - x_i^T beta)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::DesignMatrix;
use crate::error::MestError;
use crate::loss::LossSpec;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative gradient tolerance: stop when
    /// ||grad|| <= tol * (1 + ||X^T psi(y)||_2 / n).
    pub tol: f64,
    pub max_iter: usize,
    /// Reject designs with sigma_min/sigma_max below this.
    pub rank_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 200,
            rank_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// R_i = y_i - x_i^T beta_hat.
    pub residuals: DVector<f64>,
    /// psi'(R_i): diagonal of D.
    pub d_weights: DVector<f64>,
    /// psi''(R_i): diagonal of D-tilde.
    pub dtilde_weights: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    fn at(
        beta: DVector<f64>,
        residuals: DVector<f64>,
        loss: &LossSpec,
        objective: f64,
        grad_norm: f64,
        iterations: usize,
    ) -> Self {
        let d_weights = residuals.map(|r| loss.psi1(r));
        let dtilde_weights = residuals.map(|r| loss.psi2(r));
        FitResult {
            beta,
            residuals,
            d_weights,
            dtilde_weights,
            objective,
            grad_norm,
            iterations,
            converged: true,
        }
    }
}

/// One Newton step from `beta`: the direction solving
/// `(X^T D X) dir = X^T psi(resid)` and the Newton decrement.
pub fn newton_step(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &LossSpec,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, f64), MestError> {
    let nf = x.nrows() as f64;
    let resid = y - x * beta;
    let grad = -(x.transpose() * resid.map(|r| loss.psi(r))) / nf;
    let d = resid.map(|r| loss.psi1(r));
    let h = weighted_gram(x, &d) / nf;
    let chol = Cholesky::new(h)
        .ok_or_else(|| MestError::FactorizationFailure("X^T D X numerically singular".into()))?;
    let dir = -chol.solve(&grad);
    let decrement = (-grad.dot(&dir)).max(0.0).sqrt();
    Ok((dir, decrement))
}

/// (1/n) sum rho(y_i - x_i beta).
pub fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, loss: &LossSpec) -> f64 {
    let r = y - x * beta;
    r.iter().map(|&ri| loss.rho(ri)).sum::<f64>() / x.nrows() as f64
}

/// X^T diag(d) X without materializing the diagonal matrix.
pub fn weighted_gram(x: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (i, mut row) in xs.row_iter_mut().enumerate() {
        row *= d[i];
    }
    x.transpose() * xs
}

/// Fit on a raw matrix (no rank screening; used internally for leave-one-out
/// subproblems where the full design has already been screened).
pub fn fit_raw(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &LossSpec,
    opts: &SolverOptions,
) -> Result<FitResult, MestError> {
    fit_raw_warm(x, y, loss, opts, None)
}

/// As `fit_raw`, optionally starting from `beta0` (e.g. a least-squares
/// warm start inside Monte Carlo loops). The convergence tolerance is
/// anchored at beta = 0 regardless of the start point.
pub fn fit_raw_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &LossSpec,
    opts: &SolverOptions,
    beta0: Option<&DVector<f64>>,
) -> Result<FitResult, MestError> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(MestError::InvalidArgument(format!(
            "y has {} entries but the design has {} rows",
            y.len(),
            n
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MestError::InvalidArgument("y contains non-finite entries".into()));
    }

    let nf = n as f64;
    let mut beta = match beta0 {
        Some(b) if b.len() == p => b.clone(),
        Some(b) => {
            return Err(MestError::InvalidArgument(format!(
                "warm start has {} entries, expected {p}",
                b.len()
            )))
        }
        None => DVector::zeros(p),
    };
    let mut resid = y - x * &beta;
    let mut f = resid.iter().map(|&r| loss.rho(r)).sum::<f64>() / nf;

    // gradient scale anchored at beta = 0
    let psi0 = y.map(|r| loss.psi(r));
    let grad_scale = 1.0 + (x.transpose() * &psi0).norm() / nf;
    let tol = opts.tol * grad_scale;

    let mut grad_norm = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let psi = resid.map(|r| loss.psi(r));
        let grad = -(x.transpose() * &psi) / nf; // gradient of the objective
        grad_norm = grad.norm();
        if grad_norm <= tol {
            return Ok(FitResult::at(beta, resid, loss, f, grad_norm, iter));
        }

        let d = resid.map(|r| loss.psi1(r));
        let mut h = weighted_gram(x, &d) / nf;
        // Levenberg fallback keeps non-strictly-convex losses (exact Huber
        // with many saturated residuals) factorizable
        let mut mu = 0.0;
        let chol = loop {
            match Cholesky::new(h.clone()) {
                Some(c) => break c,
                None => {
                    mu = if mu == 0.0 { 1e-10 } else { mu * 10.0 };
                    if mu > 1.0 {
                        return Err(MestError::FactorizationFailure(
                            "Newton Hessian is numerically singular".into(),
                        ));
                    }
                    for k in 0..p {
                        h[(k, k)] += mu;
                    }
                }
            }
        };
        let dir = -chol.solve(&grad);
        let slope = grad.dot(&dir);
        if slope >= 0.0 {
            return Err(MestError::FactorizationFailure(
                "Newton direction is not a descent direction".into(),
            ));
        }

        // Armijo backtracking
        let mut t = 1.0f64;
        let c1 = 1e-4;
        let (next_beta, next_resid, next_f) = loop {
            let cand = &beta + t * &dir;
            let r = y - x * &cand;
            let fc = r.iter().map(|&ri| loss.rho(ri)).sum::<f64>() / nf;
            if fc <= f + c1 * t * slope {
                break (cand, r, fc);
            }
            t *= 0.5;
            if t < 1e-14 {
                // objective is flat to machine precision along the descent
                // direction; treat the current point as converged below
                break (beta.clone(), resid.clone(), f);
            }
        };
        if next_f >= f && grad_norm > tol {
            // The objective is flat at machine precision but the gradient is
            // not yet at tolerance. Fall back to a pure Newton step judged by
            // gradient-norm decrease, which keeps quadratic convergence going
            // below the resolution of the objective value.
            let cand = &beta + &dir;
            let r = y - x * &cand;
            let g = (x.transpose() * r.map(|ri| loss.psi(ri))).norm() / nf;
            if g < grad_norm {
                let fc = r.iter().map(|&ri| loss.rho(ri)).sum::<f64>() / nf;
                beta = cand;
                resid = r;
                f = fc;
                continue;
            }
            if grad_norm <= 1e3 * tol {
                return Ok(FitResult::at(beta, resid, loss, f, grad_norm, iter));
            }
            return Err(MestError::NoConvergence {
                iterations: iter,
                grad_norm,
            });
        }
        beta = next_beta;
        resid = next_resid;
        f = next_f;
    }

    // final check after the loop
    let psi = resid.map(|r| loss.psi(r));
    let grad_norm_final = (x.transpose() * &psi).norm() / nf;
    if grad_norm_final <= tol {
        Ok(FitResult::at(beta, resid, loss, f, grad_norm_final, opts.max_iter))
    } else {
        Err(MestError::NoConvergence {
            iterations: opts.max_iter,
            grad_norm: grad_norm_final.min(grad_norm),
        })
    }
}

/// Fit the M-estimator on a screened design.
pub fn fit(
    design: &DesignMatrix,
    y: &DVector<f64>,
    loss: &LossSpec,
    opts: &SolverOptions,
) -> Result<FitResult, MestError> {
    design.check_rank(opts.rank_tol)?;
    fit_raw(design.matrix(), y, loss, opts)
}

/// Cholesky of X^T D X at the fitted point, shared by the sensitivity and
/// leave-one-out machinery.
pub fn hessian_cholesky(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    loss: &LossSpec,
) -> Result<Cholesky<f64, Dyn>, MestError> {
    let d = residuals.map(|r| loss.psi1(r));
    Cholesky::new(weighted_gram(x, &d))
        .ok_or_else(|| MestError::FactorizationFailure("X^T D X not positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{generate, DesignSpec, EntryDist, Family};
    use crate::loss::{make_smoothed_huber, LossKind, LossSpec};
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_problem(n: usize, p: usize, seed: u64) -> (DesignMatrix, DVector<f64>) {
        let d = generate(&DesignSpec {
            family: Family::Iid {
                dist: EntryDist::Gaussian,
            },
            n,
            p,
            include_intercept: false,
            seed,
        })
        .unwrap();
        let mut rng = substream(seed, &[77]);
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        (d, y)
    }

    #[test]
    fn square_loss_matches_least_squares() {
        let (d, y) = gaussian_problem(40, 8, 1);
        let loss = LossSpec::square();
        let fit = fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let x = d.matrix();
        let lse = Cholesky::new(x.transpose() * x)
            .unwrap()
            .solve(&(x.transpose() * &y));
        assert!((&fit.beta - lse).norm() < 1e-9);
        // one Newton step suffices for a quadratic
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn first_order_conditions_hold() {
        let (d, y) = gaussian_problem(60, 20, 2);
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let fit = fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let psi = fit.residuals.map(|r| loss.psi(r));
        let grad = d.matrix().transpose() * psi / 60.0;
        assert!(grad.norm() < 1e-9, "grad norm {}", grad.norm());
    }

    #[test]
    fn agrees_with_projected_gradient_oracle() {
        // slow, independent first-order method on a small problem
        let (d, y) = gaussian_problem(25, 4, 3);
        let loss = make_smoothed_huber(1.0, 0.05, 0.2).unwrap();
        let x = d.matrix();
        let nf = 25.0;
        let mut beta = DVector::zeros(4);
        // fixed step below 1/L, L <= K1 * lambda_max(X^T X / n)
        let lmax = d.lambda_plus() * loss.k1;
        let step = 0.9 / lmax;
        for _ in 0..200_000 {
            let r = &y - x * &beta;
            let grad = -(x.transpose() * r.map(|v| loss.psi(v))) / nf;
            beta -= step * grad;
        }
        let newton = fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        assert!(
            (&newton.beta - &beta).norm() < 1e-6,
            "newton vs gradient oracle distance {}",
            (&newton.beta - &beta).norm()
        );
    }

    #[test]
    fn shift_equivariance() {
        let (d, y) = gaussian_problem(50, 10, 4);
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let opts = SolverOptions::default();
        let base = fit(&d, &y, &loss, &opts).unwrap();
        let mut rng = substream(4, &[5]);
        let shift = DVector::from_fn(10, |_, _| StandardNormal.sample(&mut rng));
        let y2 = &y + d.matrix() * &shift;
        let shifted = fit(&d, &y2, &loss, &opts).unwrap();
        assert!((&shifted.beta - &base.beta - shift).norm() < 1e-8);
        assert!((&shifted.residuals - &base.residuals).norm() < 1e-7);
    }

    #[test]
    fn exact_huber_fits() {
        let (d, y) = gaussian_problem(80, 10, 6);
        let loss = LossSpec {
            kind: LossKind::HuberExact,
            k: 1.345,
            delta: 0.0,
            eps: 0.0,
            k0: 0.0,
            k1: 1.0,
            k2: 0.0,
        };
        let fit = fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        let psi = fit.residuals.map(|r| loss.psi(r));
        let grad = d.matrix().transpose() * psi / 80.0;
        assert!(grad.norm() < 1e-8);
    }

    #[test]
    fn newton_step_properties() {
        let (d, y) = gaussian_problem(30, 6, 8);
        let x = d.matrix();
        // square loss from 0: one full step lands on the LSE
        let sq = LossSpec::square();
        let (dir, _) = newton_step(x, &y, &sq, &DVector::zeros(6)).unwrap();
        let lse = Cholesky::new(x.transpose() * x)
            .unwrap()
            .solve(&(x.transpose() * &y));
        assert!((&dir - lse).norm() < 1e-10);
        // at the fitted point the Newton decrement vanishes
        let loss = make_smoothed_huber(1.345, 0.05, 0.1).unwrap();
        let f = fit(&d, &y, &loss, &SolverOptions::default()).unwrap();
        assert!(f.converged);
        assert!(f.d_weights.iter().all(|&w| w >= loss.k0 && w <= loss.k1));
        let (_, dec) = newton_step(x, &y, &loss, &f.beta).unwrap();
        assert!(dec < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (d, _) = gaussian_problem(30, 5, 7);
        let loss = LossSpec::square();
        let opts = SolverOptions::default();
        assert!(matches!(
            fit(&d, &DVector::zeros(29), &loss, &opts),
            Err(MestError::InvalidArgument(_))
        ));
        let mut y = DVector::zeros(30);
        y[3] = f64::NAN;
        assert!(fit(&d, &y, &loss, &opts).is_err());

        // duplicate column: rank deficient
        let mut x = d.matrix().clone();
        let c0 = x.column(0).into_owned();
        x.set_column(1, &c0);
        let dd = crate::design::DesignMatrix::new(x, false, None).unwrap();
        assert!(matches!(
            fit(&dd, &DVector::zeros(30), &loss, &opts),
            Err(MestError::RankDeficient(_))
        ));
    }
}
