//! Performance funnels and reference trajectories.
//!
//! A funnel is described by a positive function `φ`; the tracking error `e`
//! is inside the funnel at time `t` iff `φ(t)‖e‖ < 1`, so `1/φ(t)` is the
//! admissible error radius. Both funnel and reference expose exact analytic
//! first derivatives. The controller itself only ever reads `φ(t)` and
//! `y_ref(t)`; derivatives are for diagnostics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::SignalError;

/// Number of sample points used when checking funnel/reference bounds on a horizon.
pub const HORIZON_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunnelSpec {
    /// `φ(t) = 1 / (2.1(e^{-3t} + 0.05) + 2e^{-t} + 0.05)`.
    Paper,
    /// `φ(t) = 1 / (a e^{-bt} + c)`.
    Exponential { a: f64, b: f64, c: f64 },
    /// Monotone cubic interpolation through `(t, φ)` samples.
    Table(FunnelTable),
}

impl FunnelSpec {
    /// Returns `(φ(t), φ̇(t))`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64), SignalError> {
        match self {
            FunnelSpec::Paper => {
                let e3 = (-3.0 * t).exp();
                let e1 = (-t).exp();
                let den = 2.1 * (e3 + 0.05) + 2.0 * e1 + 0.05;
                let dden = -6.3 * e3 - 2.0 * e1;
                Ok((1.0 / den, -dden / (den * den)))
            }
            FunnelSpec::Exponential { a, b, c } => {
                let ex = (-b * t).exp();
                let den = a * ex + c;
                let dden = -a * b * ex;
                Ok((1.0 / den, -dden / (den * den)))
            }
            FunnelSpec::Table(table) => table.eval(t),
        }
    }

    /// Value only; panics are impossible for closed-form kinds.
    pub fn value(&self, t: f64) -> Result<f64, SignalError> {
        self.eval(t).map(|(phi, _)| phi)
    }

    /// `lim_{t→∞} φ(t)` for closed-form kinds.
    pub fn limit(&self) -> Option<f64> {
        match self {
            FunnelSpec::Paper => Some(1.0 / 0.155),
            FunnelSpec::Exponential { a, b, c } => {
                if *b > 0.0 {
                    Some(1.0 / c)
                } else if *b == 0.0 {
                    Some(1.0 / (a + c))
                } else {
                    None
                }
            }
            FunnelSpec::Table(_) => None,
        }
    }

    /// Checks `inf φ > 0` and boundedness of `φ, φ̇` on `[t0, t_end]` by dense
    /// sampling, plus the analytic limit for closed-form kinds.
    pub fn validate(&self, t0: f64, t_end: f64) -> Result<FunnelBounds, SignalError> {
        if let FunnelSpec::Exponential { a, b, c } = self {
            if !(a.is_finite() && b.is_finite() && c.is_finite()) {
                return Err(SignalError::Rejected("non-finite parameters".into()));
            }
            if *b < 0.0 {
                return Err(SignalError::Rejected(format!(
                    "decay rate b = {b} must be non-negative"
                )));
            }
            if *c <= 0.0 {
                return Err(SignalError::Rejected(format!(
                    "offset c = {c} must be positive"
                )));
            }
        }
        if let FunnelSpec::Table(table) = self {
            let (lo, hi) = table.range();
            if t0 < lo || t_end > hi {
                return Err(SignalError::Rejected(format!(
                    "table covers [{lo}, {hi}] but the horizon is [{t0}, {t_end}]"
                )));
            }
        }
        let mut bounds = FunnelBounds {
            min_phi: f64::INFINITY,
            max_phi: 0.0,
            max_dphi: 0.0,
            max_log_rate: 0.0,
        };
        for t in horizon_grid(t0, t_end, HORIZON_SAMPLES) {
            let (phi, dphi) = self.eval(t)?;
            if !phi.is_finite() || !dphi.is_finite() {
                return Err(SignalError::Rejected(format!("non-finite value at t = {t}")));
            }
            bounds.absorb(phi, dphi);
        }
        if let Some(lim) = self.limit() {
            if !(lim.is_finite() && lim > 0.0) {
                return Err(SignalError::Rejected(format!(
                    "limit {lim} is not a positive finite number"
                )));
            }
            bounds.min_phi = bounds.min_phi.min(lim);
            bounds.max_phi = bounds.max_phi.max(lim);
        }
        if bounds.min_phi <= 0.0 {
            return Err(SignalError::Rejected(format!(
                "inf φ = {} is not positive",
                bounds.min_phi
            )));
        }
        Ok(bounds)
    }
}

/// Sampled sup/inf information about a funnel on a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelBounds {
    pub min_phi: f64,
    pub max_phi: f64,
    pub max_dphi: f64,
    /// `sup |φ̇/φ|`
    pub max_log_rate: f64,
}

impl FunnelBounds {
    fn absorb(&mut self, phi: f64, dphi: f64) {
        self.min_phi = self.min_phi.min(phi);
        self.max_phi = self.max_phi.max(phi);
        self.max_dphi = self.max_dphi.max(dphi.abs());
        self.max_log_rate = self.max_log_rate.max((dphi / phi).abs());
    }
}

/// `count` equally spaced points covering `[t0, t1]` inclusive.
pub fn horizon_grid(t0: f64, t1: f64, count: usize) -> impl Iterator<Item = f64> {
    let count = count.max(2);
    let step = (t1 - t0) / (count - 1) as f64;
    (0..count).map(move |k| if k + 1 == count { t1 } else { t0 + step * k as f64 })
}

/// Piecewise cubic Hermite interpolant with Fritsch–Carlson style slopes,
/// so monotone data stay monotone and `φ̇` is continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelTable {
    t: Vec<f64>,
    phi: Vec<f64>,
    slopes: Vec<f64>,
}

impl FunnelTable {
    pub fn new(points: &[(f64, f64)]) -> Result<Self, SignalError> {
        if points.len() < 2 {
            return Err(SignalError::BadTable("need at least two points".into()));
        }
        let t: Vec<f64> = points.iter().map(|p| p.0).collect();
        let phi: Vec<f64> = points.iter().map(|p| p.1).collect();
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SignalError::BadTable(
                "sample times must be strictly increasing".into(),
            ));
        }
        if let Some(bad) = phi.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(SignalError::BadTable(format!(
                "values must be positive and finite, found {bad}"
            )));
        }
        let slopes = pchip_slopes(&t, &phi);
        Ok(Self { t, phi, slopes })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.t.iter().copied().zip(self.phi.iter().copied())
    }

    pub fn eval(&self, t: f64) -> Result<(f64, f64), SignalError> {
        let (lo, hi) = self.range();
        if !(t >= lo && t <= hi) {
            return Err(SignalError::OutOfRange { t, lo, hi });
        }
        let k = match self.t.partition_point(|&tk| tk <= t) {
            0 => 0,
            p => (p - 1).min(self.t.len() - 2),
        };
        let h = self.t[k + 1] - self.t[k];
        let s = (t - self.t[k]) / h;
        let (p0, p1) = (self.phi[k], self.phi[k + 1]);
        let (m0, m1) = (self.slopes[k] * h, self.slopes[k + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * p0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * p1
            + (s3 - s2) * m1;
        let deriv = ((6.0 * s2 - 6.0 * s) * p0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * p1
            + (3.0 * s2 - 2.0 * s) * m1)
            / h;
        Ok((value, deriv))
    }
}

fn pchip_slopes(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

// One-sided three-point estimate, limited to preserve shape.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// `y_ref(t) = (e^{-(t-5)^2}, sin t)`.
    Paper,
    /// `A_k sin(ω_k t + p_k)` per channel, `ω` in rad per time unit.
    Sinusoid {
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
    },
    Constant { value: Vec<f64> },
    /// Ascending-power coefficients per channel.
    Polynomial { coeffs: Vec<Vec<f64>> },
}

impl ReferenceSpec {
    pub fn dim(&self) -> usize {
        match self {
            ReferenceSpec::Paper => 2,
            ReferenceSpec::Sinusoid { amplitude, .. } => amplitude.len(),
            ReferenceSpec::Constant { value } => value.len(),
            ReferenceSpec::Polynomial { coeffs } => coeffs.len(),
        }
    }

    /// Returns `(y_ref(t), ẏ_ref(t))`.
    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        match self {
            ReferenceSpec::Paper => {
                let g = (-(t - 5.0).powi(2)).exp();
                (
                    DVector::from_vec(vec![g, t.sin()]),
                    DVector::from_vec(vec![-2.0 * (t - 5.0) * g, t.cos()]),
                )
            }
            ReferenceSpec::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                let n = amplitude.len();
                let y = DVector::from_fn(n, |k, _| {
                    amplitude[k] * (frequency[k] * t + phase[k]).sin()
                });
                let dy = DVector::from_fn(n, |k, _| {
                    amplitude[k] * frequency[k] * (frequency[k] * t + phase[k]).cos()
                });
                (y, dy)
            }
            ReferenceSpec::Constant { value } => (
                DVector::from_column_slice(value),
                DVector::zeros(value.len()),
            ),
            ReferenceSpec::Polynomial { coeffs } => {
                let n = coeffs.len();
                let mut y = DVector::zeros(n);
                let mut dy = DVector::zeros(n);
                for (k, c) in coeffs.iter().enumerate() {
                    // Horner for value and derivative together.
                    let (mut p, mut dp) = (0.0, 0.0);
                    for &a in c.iter().rev() {
                        dp = dp * t + p;
                        p = p * t + a;
                    }
                    y[k] = p;
                    dy[k] = dp;
                }
                (y, dy)
            }
        }
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        self.eval(t).0
    }

    /// Structural checks (matching channel counts, finite parameters).
    pub fn check(&self) -> Result<(), String> {
        match self {
            ReferenceSpec::Paper => Ok(()),
            ReferenceSpec::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                if amplitude.is_empty() {
                    return Err("sinusoid needs at least one channel".into());
                }
                if frequency.len() != amplitude.len() || phase.len() != amplitude.len() {
                    return Err(format!(
                        "amplitude/frequency/phase lengths differ ({}, {}, {})",
                        amplitude.len(),
                        frequency.len(),
                        phase.len()
                    ));
                }
                all_finite(amplitude.iter().chain(frequency).chain(phase))
            }
            ReferenceSpec::Constant { value } => {
                if value.is_empty() {
                    return Err("constant reference needs at least one channel".into());
                }
                all_finite(value.iter())
            }
            ReferenceSpec::Polynomial { coeffs } => {
                if coeffs.is_empty() {
                    return Err("polynomial reference needs at least one channel".into());
                }
                all_finite(coeffs.iter().flatten())
            }
        }
    }

    /// `sup ‖ẏ_ref‖` over a dense sample of `[t0, t1]`.
    pub fn max_rate(&self, t0: f64, t1: f64) -> f64 {
        horizon_grid(t0, t1, HORIZON_SAMPLES)
            .map(|t| self.eval(t).1.norm())
            .fold(0.0, f64::max)
    }
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> Result<(), String> {
    match it.find(|v| !v.is_finite()) {
        Some(v) => Err(format!("non-finite parameter {v}")),
        None => Ok(()),
    }
}
