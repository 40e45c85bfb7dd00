//! The filter-based funnel controller.
//!
//! ```text
//! e      = y - y_ref
//! ξ̇_i    = -(r-i) ξ_i + ξ_{i+1}          1 ≤ i < r-1
//! ξ̇_{r-1} = -ξ_{r-1} + u
//! θ_1    = ξ_1 + e / (1 - φ²‖e‖²)
//! θ_i    = ξ_i + θ_{i-1} / (θ̂_{i-1}² - ‖θ_{i-1}‖²)
//! u      = -ϑ θ_{r-1} / (θ̂_{r-1}² - ‖θ_{r-1}‖²)
//! ```
//!
//! Only `e(t)`, `φ(t)` and the filter states enter; no output or reference
//! derivative is ever needed.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::DomainExit;
use crate::plant::SystemSpec;
use crate::signals::{FunnelSpec, ReferenceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Final gain `ϑ > 0`.
    pub gain: f64,
    /// Radii `θ̂_1, …, θ̂_{r-1}`.
    pub theta_hat: Vec<f64>,
    /// Filter initial values `ξ^0_1, …, ξ^0_{r-1}`, stacked (length `(r-1)·n`).
    pub xi0: Vec<f64>,
}

impl ControllerParams {
    /// Zero filter initial values.
    pub fn new(gain: f64, theta_hat: Vec<f64>, n: usize) -> Self {
        let xi0 = vec![0.0; theta_hat.len() * n];
        Self {
            gain,
            theta_hat,
            xi0,
        }
    }

    pub fn order(&self) -> usize {
        self.theta_hat.len() + 1
    }

    pub fn validate(&self, sys: &SystemSpec) -> Result<(), String> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(format!("gain must be positive, got {}", self.gain));
        }
        if self.theta_hat.len() != sys.r - 1 {
            return Err(format!(
                "expected {} funnel radii for order {}, got {}",
                sys.r - 1,
                sys.r,
                self.theta_hat.len()
            ));
        }
        if let Some((i, v)) = self
            .theta_hat
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(format!("radius {} must be positive, got {v}", i + 1));
        }
        if self.xi0.len() != (sys.r - 1) * sys.n {
            return Err(format!(
                "filter initial values: expected {} entries, got {}",
                (sys.r - 1) * sys.n,
                self.xi0.len()
            ));
        }
        Ok(())
    }
}

/// Surrogate errors `θ_1..θ_{r-1}` with the denominators
/// `d_0 = 1 - φ²‖e‖²` and `d_i = θ̂_i² - ‖θ_i‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaChain {
    pub theta: Vec<DVector<f64>>,
    pub denominators: Vec<f64>,
    /// Set when a denominator had to be clamped to its guard floor.
    pub tainted: bool,
}

impl ThetaChain {
    /// `d_i` divided by its nominal scale (1 for `d_0`, `θ̂_i²` otherwise).
    pub fn margins(&self, theta_hat: &[f64]) -> Vec<f64> {
        self.denominators
            .iter()
            .enumerate()
            .map(|(i, d)| d / nominal_scale(i, theta_hat))
            .collect()
    }

    pub fn last(&self) -> &DVector<f64> {
        self.theta.last().expect("order ≥ 2 gives at least one θ")
    }
}

fn nominal_scale(level: usize, theta_hat: &[f64]) -> f64 {
    if level == 0 {
        1.0
    } else {
        theta_hat[level - 1].powi(2)
    }
}

/// How a denominator below its floor is treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guard {
    /// Fail with [`DomainExit`] when `d_i < floor · scale_i`.
    Strict(f64),
    /// Replace `d_i` by `floor · scale_i` and mark the chain tainted.
    Clamp(f64),
}

/// Builds the θ-chain, failing as soon as a denominator is non-positive.
pub fn theta_chain(
    e: &DVector<f64>,
    xi: &[f64],
    phi: f64,
    params: &ControllerParams,
) -> Result<ThetaChain, DomainExit> {
    theta_chain_guarded(e, xi, phi, params, Guard::Strict(0.0))
}

pub fn theta_chain_guarded(
    e: &DVector<f64>,
    xi: &[f64],
    phi: f64,
    params: &ControllerParams,
    guard: Guard,
) -> Result<ThetaChain, DomainExit> {
    let n = e.len();
    let levels = params.theta_hat.len();
    let mut theta = Vec::with_capacity(levels);
    let mut denominators = Vec::with_capacity(levels + 1);
    let mut tainted = false;

    let mut admit = |level: usize, d: f64| -> Result<f64, DomainExit> {
        let scale = nominal_scale(level, &params.theta_hat);
        match guard {
            Guard::Strict(floor) => {
                if d <= floor * scale || d.is_nan() {
                    Err(DomainExit {
                        level,
                        margin: d / scale,
                    })
                } else {
                    Ok(d)
                }
            }
            Guard::Clamp(floor) => {
                let lo = (floor * scale).max(f64::MIN_POSITIVE);
                if d < lo || d.is_nan() {
                    tainted = true;
                    Ok(lo)
                } else {
                    Ok(d)
                }
            }
        }
    };

    let d0 = admit(0, 1.0 - phi * phi * e.norm_squared())?;
    denominators.push(d0);
    let mut prev = e / d0;
    for (i, hat) in params.theta_hat.iter().enumerate() {
        let th = DVector::from_column_slice(&xi[i * n..(i + 1) * n]) + &prev;
        let d = admit(i + 1, hat * hat - th.norm_squared())?;
        denominators.push(d);
        prev = &th / d;
        theta.push(th);
    }
    Ok(ThetaChain {
        theta,
        denominators,
        tainted,
    })
}

/// `u = -ϑ θ_{r-1} / (θ̂_{r-1}² - ‖θ_{r-1}‖²)`.
pub fn control_input(
    chain: &ThetaChain,
    params: &ControllerParams,
) -> Result<DVector<f64>, DomainExit> {
    let level = params.theta_hat.len();
    let d = chain.denominators[level];
    if !(d > 0.0) {
        return Err(DomainExit {
            level,
            margin: d / nominal_scale(level, &params.theta_hat),
        });
    }
    Ok(chain.last() * (-params.gain / d))
}

/// Filter cascade derivative for stacked `ξ` (length `(r-1)·n`).
pub fn filter_rhs(xi: &[f64], u: &DVector<f64>, r: usize) -> DVector<f64> {
    let n = u.len();
    debug_assert_eq!(xi.len(), (r - 1) * n);
    let mut out = DVector::zeros(xi.len());
    for i in 1..r {
        let rate = (r - i) as f64;
        for c in 0..n {
            let k = (i - 1) * n + c;
            let next = if i + 1 < r { xi[k + n] } else { u[c] };
            out[k] = -rate * xi[k] + next;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCondition {
    pub label: String,
    /// `φ(t0)‖e(t0)‖` or `‖θ_i^0‖`; absent when an earlier condition failed.
    pub value: Option<f64>,
    pub bound: f64,
    pub satisfied: bool,
}

impl FeasibilityCondition {
    /// `value / bound`, the fraction of the admissible radius in use.
    pub fn ratio(&self) -> Option<f64> {
        self.value.map(|v| v / self.bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub conditions: Vec<FeasibilityCondition>,
}

impl FeasibilityReport {
    /// Failing condition, if any.
    pub fn first_violation(&self) -> Option<&FeasibilityCondition> {
        self.conditions.iter().find(|c| !c.satisfied)
    }

    /// Canonical text form; the `feasible` command prints exactly this.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let verdict = if self.feasible { "feasible" } else { "INFEASIBLE" };
        let _ = writeln!(s, "initial feasibility: {verdict}");
        for c in &self.conditions {
            let (value, ratio) = match (c.value, c.ratio()) {
                (Some(v), Some(q)) => (format!("{v:.6e}"), format!("{q:.6e}")),
                _ => ("n/a".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                "  {:<8} value {:>14}  bound {:.6e}  ratio {:>14}  {}",
                c.label,
                value,
                c.bound,
                ratio,
                if c.satisfied { "ok" } else { "VIOLATED" }
            );
        }
        s
    }
}

/// Checks the three initial-value conditions under which the closed loop is
/// guaranteed to stay in the funnel: `φ(t0)‖e(t0)‖ < 1`, then
/// `‖θ_i^0‖ < θ̂_i` for every level, with `θ_i^0` built from the initial
/// output and the filter initial values.
pub fn initial_feasibility(
    sys: &SystemSpec,
    params: &ControllerParams,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
) -> FeasibilityReport {
    let n = sys.n;
    let t0 = sys.t0;
    let e0 = DVector::from_column_slice(&sys.x0[..n]) - reference.value(t0);
    let phi0 = funnel.value(t0).unwrap_or(f64::NAN);
    let mut conditions = Vec::with_capacity(params.theta_hat.len() + 1);

    let funnel_value = phi0 * e0.norm();
    let mut ok = funnel_value < 1.0;
    conditions.push(FeasibilityCondition {
        label: "funnel".into(),
        value: Some(funnel_value),
        bound: 1.0,
        satisfied: ok,
    });

    let mut prev = if ok {
        Some(&e0 / (1.0 - phi0 * phi0 * e0.norm_squared()))
    } else {
        None
    };
    for (i, &hat) in params.theta_hat.iter().enumerate() {
        let label = format!("theta_{}", i + 1);
        let Some(p) = prev.take() else {
            conditions.push(FeasibilityCondition {
                label,
                value: None,
                bound: hat,
                satisfied: false,
            });
            continue;
        };
        let theta = DVector::from_column_slice(&params.xi0[i * n..(i + 1) * n]) + p;
        let norm = theta.norm();
        ok = norm < hat;
        conditions.push(FeasibilityCondition {
            label,
            value: Some(norm),
            bound: hat,
            satisfied: ok,
        });
        if ok {
            prev = Some(&theta / (hat * hat - norm * norm));
        }
    }
    FeasibilityReport {
        feasible: conditions.iter().all(|c| c.satisfied),
        conditions,
    }
}
