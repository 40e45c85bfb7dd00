//! Computable pieces of the stability argument, checked numerically.
//!
//! - [`kernel`]: integer constants `a_{i,j}` and Vandermonde kernel vectors.
//! - [`poly`]: matrix polynomials `S_j` and the derived `α_j`, `β_j`.
//! - [`trajectory`]: the signals `ζ_i`, `Z`, `Z_k` along a stored run.
//! - [`bound`]: the `σ`/`ε` estimate from observed sup-norms.

pub mod bound;
pub mod kernel;
pub mod poly;
pub mod trajectory;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use bound::{eps_from_sigma, eps_sigma_bound, EpsilonBound};
pub use kernel::{a_coeff, a_recurrence_failures, a_recurrence_pairs, moment, ProofConstants};
pub use poly::{s_polynomials, MatrixPolynomial, MatrixPolynomialFamily};
pub use trajectory::{
    z_identity_residual, zeta_eval, zeta_rate_check, zk_reconstruct, NodeTables, Reconstruction,
    ZetaRateCheck, ZetaTraces,
};

use crate::controller::ControllerParams;
use crate::error::AnalysisError;
use crate::integrator::Sample;
use crate::plant::SystemSpec;
use crate::signals::{FunnelSpec, ReferenceSpec};

/// Relative tolerance for the two forms of `ζ_i`.
pub const DUAL_FORM_TOL: f64 = 1e-10;
/// Relative tolerance for the `Z` identity and the `Z_k` reconstructions.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Relative tolerance for moment and coefficient conditions.
pub const COEFFICIENT_TOL: f64 = 1e-10;
/// Interior points used by the `ζ̇_i` spot check.
pub const RATE_CHECK_POINTS: usize = 100;

/// Moment and coefficient conditions of the kernel vectors for one order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientCheck {
    pub r: usize,
    /// Largest `|Σ c_i i^p| / (‖c‖ r^p)` over the annihilated moments of
    /// every kernel vector.
    pub max_moment_residual: f64,
    /// Smallest `|q_k| / ‖c^{(k)}‖` over `k = 1..r-1`.
    pub min_leading_moment: f64,
    /// Largest relative size of `A_j^{(k)}`, `B_j^{(k)}` for `j ≥ k+1`.
    pub max_vanishing_residual: f64,
    /// Largest relative deviation of `A_k^{(k)}`, `B_k^{(k)}` from
    /// `(-1)^{r-1-k} q_k I` and `(-1)^{r-k} q_k`.
    pub max_leading_residual: f64,
    pub passed: bool,
}

fn rel(value: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        value
    } else {
        value / scale
    }
}

/// Checks the kernel vectors of order `r` against the polynomials built
/// from `r_mats` (`R_1, …, R_{r-1}`). `A_j^{(1)}`, `B_j^{(1)}` are `A_j`, `B_j`.
pub fn coefficient_check(
    r: usize,
    r_mats: &[DMatrix<f64>],
) -> Result<CoefficientCheck, AnalysisError> {
    if r_mats.len() + 1 != r {
        return Err(AnalysisError::Input(format!(
            "order {r} needs {} matrices, got {}",
            r - 1,
            r_mats.len()
        )));
    }
    let consts = ProofConstants::new(r)?;
    let family = s_polynomials(r_mats);
    let n = family.n;
    let mut out = CoefficientCheck {
        r,
        max_moment_residual: 0.0,
        min_leading_moment: f64::INFINITY,
        max_vanishing_residual: 0.0,
        max_leading_residual: 0.0,
        passed: false,
    };
    for k in 1..r {
        let c = consts.kernel(k);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for p in 0..r - 1 - k {
            let scaled = moment(c, p).abs() / (norm * (r as f64).powi(p as i32));
            out.max_moment_residual = out.max_moment_residual.max(scaled);
        }
        let qk = consts.q_of(k);
        out.min_leading_moment = out.min_leading_moment.min(qk.abs() / norm);
        for j in k + 1..r {
            let a = rel(family.weighted_alpha(c, j).norm(), family.weighted_alpha_scale(c, j));
            let b = rel(family.weighted_beta(c, j).abs(), family.weighted_beta_scale(c, j));
            out.max_vanishing_residual = out.max_vanishing_residual.max(a).max(b);
        }
        let sign = if (r - 1 - k).is_multiple_of(2) { 1.0 } else { -1.0 };
        let lead_a = DMatrix::<f64>::identity(n, n) * (sign * qk);
        let a = rel(
            (family.weighted_alpha(c, k) - &lead_a).norm(),
            family.weighted_alpha_scale(c, k),
        );
        let b = rel(
            (family.weighted_beta(c, k) + sign * qk).abs(),
            family.weighted_beta_scale(c, k),
        );
        out.max_leading_residual = out.max_leading_residual.max(a).max(b);
    }
    out.passed = out.max_moment_residual < COEFFICIENT_TOL
        && out.min_leading_moment > 1e-6
        && out.max_vanishing_residual < COEFFICIENT_TOL
        && out.max_leading_residual < COEFFICIENT_TOL;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheck {
    pub label: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl ResidualCheck {
    fn new(label: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self {
            label: label.into(),
            residual,
            tolerance,
            passed: residual < tolerance,
        }
    }
}

/// Everything `diagnose` computes for one stored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub r: usize,
    pub n: usize,
    pub samples: usize,
    pub constants: ProofConstants,
    /// `max_t ‖ζ_i(t)‖`, finite on a bounded run.
    pub zeta_max_norm: Vec<f64>,
    pub checks: Vec<ResidualCheck>,
    pub rate_check: Option<ZetaRateCheck>,
    pub bound: EpsilonBound,
    #[serde(skip)]
    pub zeta: ZetaTraces,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
            && self.rate_check.as_ref().is_none_or(|c| c.passed)
            && self.zeta_max_norm.iter().all(|v| v.is_finite())
            && self.bound.holds
    }

    pub fn check(&self, label: &str) -> Option<&ResidualCheck> {
        self.checks.iter().find(|c| c.label == label)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "diagnostics: r = {}, n = {}, {} samples", self.r, self.n, self.samples);
        let _ = writeln!(s, "kernel c = {:?}, q = {:.6e}", self.constants.c, self.constants.q);
        for (i, v) in self.zeta_max_norm.iter().enumerate() {
            let _ = writeln!(s, "  max |zeta_{}| = {:.6e}", i + 1, v);
        }
        for c in &self.checks {
            let _ = writeln!(
                s,
                "  {:<22} residual {:.3e}  tol {:.0e}  {}",
                c.label,
                c.residual,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        match &self.rate_check {
            Some(rc) => {
                let _ = writeln!(
                    s,
                    "  zeta rate spot check   {} points, worst error/tol {:.3e} at t = {:.6}  {}",
                    rc.points,
                    rc.worst_ratio,
                    rc.worst_time,
                    if rc.passed { "ok" } else { "FAIL" }
                );
            }
            None => {
                let _ = writeln!(s, "  zeta rate spot check   skipped (fewer than 3 samples)");
            }
        }
        let b = &self.bound;
        let _ = writeln!(
            s,
            "bound: sigma = {:.6e}, eps_min = {:.6e}, max phi|e| = {:.6e}, margin = {:.6e}",
            b.sigma, b.eps_min, b.max_funnel_ratio, b.margin
        );
        let _ = writeln!(
            s,
            "  funnel bound {}; max phi|e| <= max(eps_min, phi(t0)|e(t0)|): {}",
            if b.holds { "holds" } else { "VIOLATED" },
            b.proof_bound_holds
        );
        let _ = writeln!(s, "  note: {}", b.note);
        let _ = writeln!(
            s,
            "  note: the estimate uses sup-norms of this run and is not an a-priori certificate"
        );
        s
    }
}

/// Runs every trajectory diagnostic on `samples`.
pub fn diagnose(
    samples: &[Sample],
    sys: &SystemSpec,
    params: &ControllerParams,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
) -> Result<DiagnosticsReport, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Input("no samples".into()));
    }
    let r = sys.r;
    let consts = ProofConstants::new(r)?;
    let family = s_polynomials(&sys.r_mats);
    let tables = NodeTables::new(&family, &sys.gamma);
    let traces = zeta_eval(samples, &consts, &tables);

    let mut checks = Vec::new();
    for (i, res) in traces.max_dual_residual.iter().enumerate() {
        checks.push(ResidualCheck::new(format!("zeta_{} dual form", i + 1), *res, DUAL_FORM_TOL));
    }
    let z = z_identity_residual(samples, &traces, &consts, &family, &sys.gamma);
    checks.push(ResidualCheck::new("Z identity", z, IDENTITY_TOL));
    let recon: Vec<Reconstruction> = (2..r)
        .map(|k| zk_reconstruct(samples, &traces, &consts, &family, &sys.gamma, k))
        .collect::<Result<_, _>>()?;
    for rc in &recon {
        checks.push(ResidualCheck::new(
            format!("Z_{} reconstruction", rc.k),
            rc.max_residual,
            IDENTITY_TOL,
        ));
    }
    let rate_check = if samples.len() >= 3 {
        Some(zeta_rate_check(sys, samples, &traces, &tables, RATE_CHECK_POINTS)?)
    } else {
        None
    };
    let bound = eps_sigma_bound(samples, sys, funnel, reference, params)
        .map_err(|e| AnalysisError::Input(e.to_string()))?;
    Ok(DiagnosticsReport {
        r,
        n: sys.n,
        samples: samples.len(),
        constants: consts,
        zeta_max_norm: traces.max_norm.clone(),
        checks,
        rate_check,
        bound,
        zeta: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn coefficients_vanish_for_random_linear_terms() {
        for r in 3..=8 {
            let mats: Vec<_> = (1..r)
                .map(|i| DMatrix::from_fn(2, 2, |a, b| ((i * 7 + a * 3 + b) % 5) as f64 - 2.0))
                .collect();
            let chk = coefficient_check(r, &mats).unwrap();
            assert!(chk.passed, "{chk:?}");
        }
    }

    #[test]
    fn synthetic_point_both_forms() {
        // r = 3, n = 1, R = 0, Γ = 1, y = 1, ẏ = 2, ÿ = 3, ξ = 0
        let fam = s_polynomials(&[DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)]);
        let tables = NodeTables::new(&fam, &DMatrix::identity(1, 1));
        let consts = ProofConstants::new(3).unwrap();
        let sample = Sample {
            t: 0.0,
            h: 0.0,
            x: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            xi: DVector::zeros(2),
            eta: DVector::zeros(0),
            y_ref: DVector::zeros(1),
            phi: 1.0,
            e_norm: 1.0,
            funnel_ratio: 1.0,
            theta_norms: vec![0.0, 0.0],
            u: DVector::zeros(1),
        };
        // i = 1: (ÿ) + (-1)^1·... → ÿ from j=2, then y^(1)·(-1)^1, y·(-1)^2
        let (z1, _) = trajectory::zeta_defining(&sample, 1, &consts, &tables);
        assert_eq!(z1[0], 3.0 - 2.0 + 1.0);
        // i = 2: j=1: -(2·ẏ), j=2: ÿ; then y·(-2)^2
        let (z2, _) = trajectory::zeta_defining(&sample, 2, &consts, &tables);
        assert_eq!(z2[0], 3.0 - 4.0 + 4.0);
        for i in 1..3 {
            let p = trajectory::zeta_polynomial(&sample, i, &tables);
            let (d, _) = trajectory::zeta_defining(&sample, i, &consts, &tables);
            assert!((p - d).norm() < 1e-14);
        }
    }
}
