//! A-posteriori version of the uniform funnel-distance bound.
//!
//! ```text
//! σ     = (‖ẏ_ref‖∞‖φ‖∞ + ‖φ̇/φ‖∞ + ‖φ‖∞(ρ(Γ) θ̂_1 + ‖ẏ - Γξ_1‖∞)) / λ_min((Γ+Γᵀ)/2)
//! ε_min = sqrt(σ / (1 + σ))
//! ```
//!
//! All sup-norms are taken over the simulated horizon, so the result
//! describes the stored run and certifies nothing beyond it.

use serde::{Deserialize, Serialize};

use crate::controller::ControllerParams;
use crate::error::SignalError;
use crate::integrator::Sample;
use crate::plant::{spectral_radius, symmetric_part_min_eig, SystemSpec};
use crate::signals::{FunnelSpec, ReferenceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub sigma: f64,
    pub eps_min: f64,
    pub lambda_min_sym: f64,
    /// Smallest real part among the eigenvalues of `Γ` itself.
    pub lambda_min_gamma: f64,
    pub spectral_radius: f64,
    pub sup_ref_rate: f64,
    pub sup_phi: f64,
    pub sup_log_rate: f64,
    pub sup_dy_minus_gamma_xi: f64,
    /// `max_t φ(t)‖e(t)‖` over the stored samples.
    pub max_funnel_ratio: f64,
    /// `max_t φ‖e‖ < 1`.
    pub holds: bool,
    /// `max_t φ‖e‖ ≤ max(ε_min, φ(t0)‖e(t0)‖)`.
    pub proof_bound_holds: bool,
    /// `1 - max_t φ‖e‖`.
    pub margin: f64,
    pub note: String,
}

/// `ε_min = sqrt(σ/(1+σ))`, the smallest `ε ∈ [0,1)` with `ε²/(1-ε²) ≥ σ`.
pub fn eps_from_sigma(sigma: f64) -> f64 {
    (sigma / (1.0 + sigma)).sqrt()
}

pub fn eps_sigma_bound(
    samples: &[Sample],
    sys: &SystemSpec,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
    params: &ControllerParams,
) -> Result<EpsilonBound, SignalError> {
    let n = sys.n;
    let (t0, t1) = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (sys.t0, sys.t0),
    };
    let fb = funnel.validate(t0, t1)?;
    let lambda_min_sym = symmetric_part_min_eig(&sys.gamma);
    let lambda_min_gamma = sys
        .gamma
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    let rho = spectral_radius(&sys.gamma);
    let sup_ref_rate = reference.max_rate(t0, t1);
    let sup_dy = samples
        .iter()
        .map(|s| (s.derivative(1, n) - &sys.gamma * s.filter(1, n)).norm())
        .fold(0.0, f64::max);
    let sigma = (sup_ref_rate * fb.max_phi
        + fb.max_log_rate
        + fb.max_phi * (rho * params.theta_hat[0] + sup_dy))
        / lambda_min_sym;
    let eps_min = eps_from_sigma(sigma);
    let max_ratio = samples.iter().map(|s| s.funnel_ratio).fold(0.0, f64::max);
    let start = samples.first().map_or(0.0, |s| s.funnel_ratio);
    let note = if (lambda_min_sym - lambda_min_gamma).abs() > 1e-12 * (1.0 + rho) {
        format!(
            "sigma uses lambda_min of the symmetric part ({lambda_min_sym:.6e}); \
             the smallest real eigenvalue part of Gamma is {lambda_min_gamma:.6e}"
        )
    } else {
        "lambda_min of Gamma and of its symmetric part coincide".into()
    };
    Ok(EpsilonBound {
        sigma,
        eps_min,
        lambda_min_sym,
        lambda_min_gamma,
        spectral_radius: rho,
        sup_ref_rate,
        sup_phi: fb.max_phi,
        sup_log_rate: fb.max_log_rate,
        sup_dy_minus_gamma_xi: sup_dy,
        max_funnel_ratio: max_ratio,
        holds: max_ratio < 1.0,
        proof_bound_holds: max_ratio <= eps_min.max(start),
        margin: 1.0 - max_ratio,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn epsilon_from_sigma() {
        assert_eq!(eps_from_sigma(0.0), 0.0);
        assert_relative_eq!(eps_from_sigma(1.0), 0.5f64.sqrt(), epsilon = 1e-15);
        let e = eps_from_sigma(3.7);
        assert_relative_eq!(e * e / (1.0 - e * e), 3.7, max_relative = 1e-12);
    }
}
