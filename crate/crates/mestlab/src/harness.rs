//! Monte Carlo experiment harnesses: confidence-interval coverage (single
//! and multi-coordinate with Bonferroni correction), the small-sample vs
//! asymptotic-regime KS comparison, and the delete-1 jackknife variance.
//!
//! All randomness is keyed by (master_seed, structured path), and parallel
//! results are reduced in index order, so reports are byte-identical across
//! thread counts.

use nalgebra::{Cholesky, DVector};
use rayon::prelude::*;

use crate::design::{generate, DesignMatrix, DesignSpec, Family};
use crate::error::MestError;
use crate::errors::{ErrorKind, ErrorModel};
use crate::loss::{LossKind, LossSpec};
use crate::rng::substream;
use crate::solver::{self, SolverOptions};
use crate::stats;

/// Derive an independent 64-bit seed from a master seed and a path.
pub fn derived_seed(master_seed: u64, path: &[u64]) -> u64 {
    use rand::Rng;
    substream(master_seed, path).gen()
}

pub fn family_label(family: &Family) -> &'static str {
    match family {
        Family::Iid { .. } => "iid",
        Family::Elliptical { .. } => "elliptical",
        Family::MatrixNormal { .. } => "matrix_normal",
        Family::PartialHadamard => "partial_hadamard",
        Family::Anova { .. } => "anova",
        Family::Fixed { .. } => "fixed",
    }
}

pub fn error_label(model: &ErrorModel) -> String {
    match &model.kind {
        ErrorKind::Gaussian { sigma } => format!("gaussian({sigma})"),
        ErrorKind::T { df } => format!("t({df})"),
        ErrorKind::Cauchy => "cauchy".into(),
        ErrorKind::Uniform01ViaPhi => "uniform01".into(),
        ErrorKind::CustomTransform { .. } => "custom".into(),
    }
}

pub fn loss_label(loss: &LossSpec) -> String {
    match loss.kind {
        LossKind::Square => "square".into(),
        LossKind::SmoothedHuber => {
            format!("huber(k={},eps={},delta={})", loss.k, loss.eps, loss.delta)
        }
        LossKind::PseudoL1 => format!("pseudo_l1(delta={},eps={})", loss.delta, loss.eps),
        LossKind::HuberExact => format!("huber_exact(k={})", loss.k),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub family: Family,
    pub include_intercept: bool,
    pub error_model: ErrorModel,
    pub loss: LossSpec,
    pub n_list: Vec<usize>,
    pub kappa: f64,
    /// Designs drawn per cell.
    pub outer_reps: usize,
    /// Error vectors per (design, coordinate block).
    pub inner_reps: usize,
    /// Coordinates of interest (0-based).
    pub coords: Vec<usize>,
    pub alpha: f64,
    pub bonferroni: bool,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), MestError> {
        if !(0.0 < self.kappa && self.kappa < 1.0) {
            return Err(MestError::InvalidArgument(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if self.n_list.is_empty() {
            return Err(MestError::InvalidArgument("n_list is empty".into()));
        }
        for &n in &self.n_list {
            if (self.kappa * n as f64).floor() < 1.0 {
                return Err(MestError::InvalidArgument(format!(
                    "floor(kappa*n) < 1 for n = {n}"
                )));
            }
        }
        if self.inner_reps < 30 {
            return Err(MestError::InvalidArgument(format!(
                "inner_reps must be >= 30, got {}",
                self.inner_reps
            )));
        }
        if self.outer_reps == 0 {
            return Err(MestError::InvalidArgument("outer_reps must be positive".into()));
        }
        if self.coords.is_empty() {
            return Err(MestError::InvalidArgument("coords is empty".into()));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(MestError::InvalidArgument(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn p_for(&self, n: usize) -> usize {
        (self.kappa * n as f64).floor() as usize
    }
}

/// Coverage results for one (n, p) cell.
#[derive(Debug, Clone)]
pub struct CoverageCell {
    pub n: usize,
    pub p: usize,
    /// outer_reps x coords: per-coordinate empirical coverage.
    pub per_design_coverage: Vec<Vec<f64>>,
    /// Per design: minimum coverage over coordinates.
    pub min_coverage: Vec<f64>,
    /// Per design: simultaneous coverage of the Bonferroni-corrected
    /// intervals (level alpha / #coords).
    pub bonferroni_coverage: Vec<f64>,
    pub mean_coverage: f64,
    pub failed_fits: usize,
    pub total_fits: usize,
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
}

struct DesignBlock {
    /// coords x inner_reps coordinate estimates; NaN marks a failed fit.
    betas: Vec<Vec<f64>>,
    failed: usize,
}

fn run_one_design(
    config: &ExperimentConfig,
    n: usize,
    p: usize,
    outer: usize,
) -> Result<DesignBlock, MestError> {
    let spec = DesignSpec {
        family: config.family.clone(),
        n,
        p,
        include_intercept: config.include_intercept,
        seed: derived_seed(config.master_seed, &[0x10, n as u64, outer as u64]),
    };
    let design = generate(&spec)?;
    let opts = SolverOptions::default();
    design.check_rank(opts.rank_tol)?;
    let x = design.matrix();
    // least-squares warm start factor, shared across all fits on this design
    let ls = Cholesky::new(x.transpose() * x)
        .ok_or_else(|| MestError::FactorizationFailure("X^T X not positive definite".into()))?;

    let mut betas = vec![vec![f64::NAN; config.inner_reps]; config.coords.len()];
    let mut failed = 0usize;
    for (block, &coord) in config.coords.iter().enumerate() {
        if coord >= p {
            return Err(MestError::InvalidArgument(format!(
                "coordinate {coord} out of range for p = {p}"
            )));
        }
        for inner in 0..config.inner_reps {
            let eps = DVector::from_vec(config.error_model.draw(
                n,
                config.master_seed,
                &[0x11, n as u64, outer as u64, block as u64, inner as u64],
            ));
            let warm = ls.solve(&(x.transpose() * &eps));
            match solver::fit_raw_warm(x, &eps, &config.loss, &opts, Some(&warm)) {
                Ok(fit) => betas[block][inner] = fit.beta[coord],
                Err(_) => failed += 1,
            }
        }
    }
    Ok(DesignBlock { betas, failed })
}

/// Coverage protocol: per design, each coordinate gets its own independent
/// block of `inner_reps` error vectors; the interval half-width is
/// z * (sample SD of the coordinate over its block), and coverage is the
/// fraction of intervals containing the true value 0.
pub fn run_coverage(config: &ExperimentConfig) -> Result<CoverageReport, MestError> {
    config.validate()?;
    let m = config.coords.len();
    let z = stats::norm_quantile(1.0 - config.alpha / 2.0);
    let z_bonf = stats::norm_quantile(1.0 - config.alpha / (2.0 * m as f64));
    let mut cells = Vec::new();
    for &n in &config.n_list {
        let p = config.p_for(n);
        let blocks: Vec<Result<DesignBlock, MestError>> = (0..config.outer_reps)
            .into_par_iter()
            .map(|outer| run_one_design(config, n, p, outer))
            .collect();

        let mut per_design_coverage = Vec::with_capacity(config.outer_reps);
        let mut min_coverage = Vec::with_capacity(config.outer_reps);
        let mut bonf_coverage = Vec::with_capacity(config.outer_reps);
        let mut failed = 0usize;
        let total = config.outer_reps * m * config.inner_reps;
        for block in blocks {
            let block = block?;
            failed += block.failed;
            let mut covs = Vec::with_capacity(m);
            let mut bonf_hits = vec![true; config.inner_reps];
            for row in &block.betas {
                let ok: Vec<f64> = row.iter().cloned().filter(|v| v.is_finite()).collect();
                let sd = if ok.len() >= 2 { stats::sample_sd(&ok) } else { 0.0 };
                let mut hit = 0usize;
                for (i, &b) in row.iter().enumerate() {
                    let covered = b.is_finite() && b.abs() <= z * sd;
                    if covered {
                        hit += 1;
                    }
                    if !(b.is_finite() && b.abs() <= z_bonf * sd) {
                        bonf_hits[i] = false;
                    }
                }
                covs.push(hit as f64 / row.len() as f64);
            }
            min_coverage.push(covs.iter().cloned().fold(f64::INFINITY, f64::min));
            bonf_coverage
                .push(bonf_hits.iter().filter(|&&h| h).count() as f64 / config.inner_reps as f64);
            per_design_coverage.push(covs);
        }
        if failed * 50 > total {
            return Err(MestError::TooManyFailures { failed, total });
        }
        let all: Vec<f64> = per_design_coverage.iter().flatten().cloned().collect();
        cells.push(CoverageCell {
            n,
            p,
            per_design_coverage,
            min_coverage,
            bonferroni_coverage: bonf_coverage,
            mean_coverage: stats::mean(&all),
            failed_fits: failed,
            total_fits: total,
        });
    }
    Ok(CoverageReport { cells })
}

/// One CSV row per (family, error, n, kappa, design rep, coordinate).
pub fn coverage_csv(report: &CoverageReport, config: &ExperimentConfig) -> String {
    let mut out = String::from("family,error,loss,n,p,kappa,design_rep,coord,coverage,min_coverage,bonferroni_coverage\n");
    let fam = family_label(&config.family);
    let err = error_label(&config.error_model);
    let loss = loss_label(&config.loss);
    for cell in &report.cells {
        for (rep, covs) in cell.per_design_coverage.iter().enumerate() {
            for (ci, cov) in covs.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    fam,
                    err,
                    loss,
                    cell.n,
                    cell.p,
                    config.kappa,
                    rep,
                    config.coords[ci],
                    cov,
                    cell.min_coverage[rep],
                    cell.bonferroni_coverage[rep],
                ));
            }
        }
    }
    out
}

/// Quartile summary per cell.
pub fn coverage_summary_csv(report: &CoverageReport, config: &ExperimentConfig) -> String {
    let mut out = String::from("family,error,loss,n,p,kappa,mean,q1,median,q3,failed,total\n");
    for cell in &report.cells {
        let mut all: Vec<f64> = cell.per_design_coverage.iter().flatten().cloned().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| -> f64 {
            let idx = ((all.len() - 1) as f64 * f).round() as usize;
            all[idx]
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            family_label(&config.family),
            error_label(&config.error_model),
            loss_label(&config.loss),
            cell.n,
            cell.p,
            config.kappa,
            cell.mean_coverage,
            q(0.25),
            q(0.5),
            q(0.75),
            cell.failed_fits,
            cell.total_fits,
        ));
    }
    out
}

/// Two-sample KS: returns `(sqrt(K/2) * sup |F_a - F_b|, sup |F_a - F_b|)`
/// where K is the common sample size (the scaled statistic uses the
/// smaller size when they differ).
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<(f64, f64), MestError> {
    if a.is_empty() || b.is_empty() {
        return Err(MestError::EmptySample);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut sup = 0.0f64;
    while ia < na && ib < nb {
        let t = sa[ia].min(sb[ib]);
        while ia < na && sa[ia] <= t {
            ia += 1;
        }
        while ib < nb && sb[ib] <= t {
            ib += 1;
        }
        sup = sup.max((ia as f64 / na as f64 - ib as f64 / nb as f64).abs());
    }
    let k = na.min(nb) as f64;
    Ok(((k / 2.0).sqrt() * sup, sup))
}

#[derive(Debug, Clone)]
pub struct KsConfig {
    pub family: Family,
    pub loss: LossSpec,
    pub error_model: ErrorModel,
    /// Small-sample size (the target of both approximations).
    pub n0: usize,
    /// Large sample size for the two asymptotic regimes.
    pub n: usize,
    pub kappa: f64,
    /// Replications per design.
    pub k_reps: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone)]
pub struct KsReport {
    /// sqrt(K/2)-scaled distance between the small-sample law and the
    /// p-fixed regime.
    pub ks1: f64,
    /// ... and the p/n-fixed regime.
    pub ks2: f64,
    pub sup1: f64,
    pub sup2: f64,
    /// sqrt(n)-scaled first-coordinate samples for the three designs.
    pub samples: [Vec<f64>; 3],
}

/// The regime-comparison experiment: X(0) is a small n0 x floor(kappa n0)
/// design, X(1) keeps p = floor(kappa n0) fixed at sample size n, X(2)
/// keeps p/n = kappa at sample size n. Each design is drawn once and held
/// fixed; the first coordinate of sqrt(n) beta-hat is collected over
/// `k_reps` error draws and the empirical laws are compared by the
/// two-sample KS statistic.
pub fn run_ks_comparison(config: &KsConfig) -> Result<KsReport, MestError> {
    if !(0.0 < config.kappa && config.kappa < 1.0) {
        return Err(MestError::InvalidArgument(format!(
            "kappa must lie in (0, 1), got {}",
            config.kappa
        )));
    }
    let p0 = (config.kappa * config.n0 as f64).floor() as usize;
    let p2 = (config.kappa * config.n as f64).floor() as usize;
    if p0 < 1 || config.n <= config.n0 {
        return Err(MestError::InvalidArgument(
            "need floor(kappa*n0) >= 1 and n > n0".into(),
        ));
    }
    if config.k_reps < 2 {
        return Err(MestError::InvalidArgument("k_reps must be >= 2".into()));
    }
    let dims = [(config.n0, p0), (config.n, p0), (config.n, p2)];
    let mut samples: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let opts = SolverOptions::default();
    for (r, &(n, p)) in dims.iter().enumerate() {
        let design = generate(&DesignSpec {
            family: config.family.clone(),
            n,
            p,
            include_intercept: false,
            seed: derived_seed(config.master_seed, &[0x20, r as u64]),
        })?;
        design.check_rank(opts.rank_tol)?;
        let x = design.matrix();
        let ls = Cholesky::new(x.transpose() * x)
            .ok_or_else(|| MestError::FactorizationFailure("X^T X not positive definite".into()))?;
        let scale = (n as f64).sqrt();
        let fits: Vec<Result<f64, MestError>> = (0..config.k_reps as u64)
            .into_par_iter()
            .map(|rep| {
                let eps = DVector::from_vec(config.error_model.draw(
                    n,
                    config.master_seed,
                    &[0x21, r as u64, rep],
                ));
                let warm = ls.solve(&(x.transpose() * &eps));
                let fit = solver::fit_raw_warm(x, &eps, &config.loss, &opts, Some(&warm))?;
                Ok(scale * fit.beta[0])
            })
            .collect();
        for f in fits {
            samples[r].push(f?);
        }
    }
    let (ks1, sup1) = two_sample_ks(&samples[0], &samples[1])?;
    let (ks2, sup2) = two_sample_ks(&samples[0], &samples[2])?;
    Ok(KsReport {
        ks1,
        ks2,
        sup1,
        sup2,
        samples,
    })
}

/// Delete-1 jackknife variance of coordinate j.
pub fn jackknife_variance(
    design: &DesignMatrix,
    y: &DVector<f64>,
    loss: &LossSpec,
    j: usize,
    opts: &SolverOptions,
) -> Result<f64, MestError> {
    let n = design.n();
    if n < 3 {
        return Err(MestError::InvalidArgument(format!("jackknife needs n >= 3, got {n}")));
    }
    if j >= design.p() {
        return Err(MestError::InvalidArgument(format!("coordinate {j} out of range")));
    }
    design.check_rank(opts.rank_tol)?;
    let full = solver::fit(design, y, loss, opts)?;
    let leave: Vec<Result<f64, MestError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x_i = design.matrix().clone().remove_row(i);
            let y_i = y.clone().remove_row(i);
            let fit = solver::fit_raw_warm(&x_i, &y_i, loss, opts, Some(&full.beta))?;
            Ok(fit.beta[j])
        })
        .collect();
    let mut vals = Vec::with_capacity(n);
    for v in leave {
        vals.push(v?);
    }
    let mean = stats::mean(&vals);
    let nf = n as f64;
    Ok((nf - 1.0) / nf * vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
}
