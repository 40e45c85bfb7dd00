//! Closed-loop integration with funnel-domain step guarding.
//!
//! The combined state `(x, ξ, η)` is advanced with the Dormand–Prince 5(4)
//! pair under PI step-size control. The closed-loop vector field only
//! exists while every controller denominator is positive, so a step is
//! accepted only when
//!
//! * the embedded error estimate passes, and
//! * every denominator at the trial endpoint exceeds `guard_factor` times
//!   its nominal scale.
//!
//! A domain exit at the endpoint halves the step. Intermediate stages that
//! leave the domain are evaluated with clamped denominators; a step built
//! from such stages is retried once at half size before it may be accepted.
//!
//! Near the funnel boundary the high-gain terms make the loop stiff. For
//! such runs [`Method::Rosenbrock`] replaces the explicit pair with the
//! linearly implicit Rosenbrock 2(3) pair of Shampine and Reichelt, using a
//! forward-difference Jacobian so that plants need not supply derivatives.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{
    control_input, filter_rhs, initial_feasibility, theta_chain_guarded, ControllerParams,
    FeasibilityReport, Guard, ThetaChain,
};
use crate::error::{DomainExit, PlantError, SignalError, SimError};
use crate::plant::SystemSpec;
use crate::signals::{FunnelSpec, ReferenceSpec};

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Explicit Dormand–Prince 5(4).
    #[default]
    DormandPrince,
    /// Linearly implicit Rosenbrock 2(3) for stiff runs.
    Rosenbrock,
}

impl Method {
    pub const NAMES: [&'static str; 2] = ["dormand_prince", "rosenbrock"];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dormand_prince" => Some(Self::DormandPrince),
            "rosenbrock" => Some(Self::Rosenbrock),
            _ => None,
        }
    }

    /// Order of the local error estimate.
    fn error_order(self) -> f64 {
        match self {
            Self::DormandPrince => 5.0,
            Self::Rosenbrock => 3.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DormandPrince => "dormand_prince",
            Self::Rosenbrock => "rosenbrock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub t_end: f64,
    /// Denominators below `guard_factor · scale` count as domain exits.
    pub guard_factor: f64,
    /// Upper bound on accepted plus rejected steps; bounds run time and the
    /// size of the stored trajectory.
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::DormandPrince,
            rel_tol: 1e-8,
            abs_tol: 1e-6,
            h_init: 1e-6,
            h_min: 1e-10,
            h_max: 0.1,
            t_end: 10.0,
            guard_factor: 1e-12,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self, t0: f64) -> Result<(), String> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        pos("rel_tol", self.rel_tol)?;
        pos("abs_tol", self.abs_tol)?;
        pos("h_init", self.h_init)?;
        pos("h_min", self.h_min)?;
        pos("h_max", self.h_max)?;
        if !(self.guard_factor >= 0.0 && self.guard_factor < 1.0) {
            return Err(format!(
                "guard_factor must lie in [0, 1), got {}",
                self.guard_factor
            ));
        }
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        if self.h_min >= self.h_max {
            return Err(format!(
                "h_min ({}) must be smaller than h_max ({})",
                self.h_min, self.h_max
            ));
        }
        if !(self.t_end > t0 && self.t_end.is_finite()) {
            return Err(format!(
                "t_end ({}) must be finite and after t0 ({t0})",
                self.t_end
            ));
        }
        Ok(())
    }
}

/// A domain constraint of the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// `φ(t)‖e(t)‖ < 1`
    Funnel,
    /// `‖θ_i(t)‖ < θ̂_i`
    Theta(usize),
}

impl Constraint {
    pub fn from_level(level: usize) -> Self {
        if level == 0 {
            Constraint::Funnel
        } else {
            Constraint::Theta(level)
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Funnel => f.write_str("funnel (phi*|e| < 1)"),
            Constraint::Theta(i) => write!(f, "theta_{i} (|theta_{i}| < theta_hat_{i})"),
        }
    }
}

/// Unpacked closed-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub t: f64,
    /// `(y, ẏ, …, y^(r-1))`, length `r·n`.
    pub x: DVector<f64>,
    /// `(ξ_1, …, ξ_{r-1})`, length `(r-1)·n`.
    pub xi: DVector<f64>,
    /// Operator memory, length `m`.
    pub eta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopDerivative {
    pub dx: DVector<f64>,
    pub dxi: DVector<f64>,
    pub deta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RhsError {
    #[error(transparent)]
    Domain(#[from] DomainExit),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// The closed loop assembled from plant, controller, funnel and reference.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub sys: &'a SystemSpec,
    pub params: &'a ControllerParams,
    pub funnel: &'a FunnelSpec,
    pub reference: &'a ReferenceSpec,
}

/// Everything the controller computes at one instant.
#[derive(Debug, Clone)]
pub struct ControlPoint {
    pub phi: f64,
    pub y_ref: DVector<f64>,
    pub e: DVector<f64>,
    pub chain: ThetaChain,
    pub u: DVector<f64>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        sys: &'a SystemSpec,
        params: &'a ControllerParams,
        funnel: &'a FunnelSpec,
        reference: &'a ReferenceSpec,
    ) -> Self {
        Self {
            sys,
            params,
            funnel,
            reference,
        }
    }

    fn x_len(&self) -> usize {
        self.sys.r * self.sys.n
    }

    fn xi_len(&self) -> usize {
        (self.sys.r - 1) * self.sys.n
    }

    pub fn state_len(&self) -> usize {
        self.x_len() + self.xi_len() + self.sys.m()
    }

    pub fn pack(&self, x: &[f64], xi: &[f64], eta: &[f64]) -> DVector<f64> {
        let mut z = Vec::with_capacity(self.state_len());
        z.extend_from_slice(x);
        z.extend_from_slice(xi);
        z.extend_from_slice(eta);
        DVector::from_vec(z)
    }

    pub fn unpack(&self, t: f64, z: &DVector<f64>) -> ClosedLoopState {
        let (a, b) = (self.x_len(), self.x_len() + self.xi_len());
        ClosedLoopState {
            t,
            x: z.rows(0, a).into_owned(),
            xi: z.rows(a, b - a).into_owned(),
            eta: z.rows(b, z.len() - b).into_owned(),
        }
    }

    /// Controller quantities at `(t, z)`.
    pub fn control(&self, t: f64, z: &[f64], guard: Guard) -> Result<ControlPoint, RhsError> {
        let n = self.sys.n;
        let (phi, _) = self.funnel.eval(t)?;
        let y_ref = self.reference.value(t);
        let e = DVector::from_column_slice(&z[..n]) - &y_ref;
        let xi = &z[self.x_len()..self.x_len() + self.xi_len()];
        let chain = theta_chain_guarded(&e, xi, phi, self.params, guard)?;
        let u = control_input(&chain, self.params)?;
        Ok(ControlPoint {
            phi,
            y_ref,
            e,
            chain,
            u,
        })
    }

    /// Packed derivative of the closed loop, plus the controller snapshot.
    pub fn rhs(
        &self,
        t: f64,
        z: &DVector<f64>,
        guard: Guard,
    ) -> Result<(DVector<f64>, ControlPoint), RhsError> {
        let z = z.as_slice();
        let cp = self.control(t, z, guard)?;
        let (a, b) = (self.x_len(), self.x_len() + self.xi_len());
        let (dx, deta) = self.sys.rhs(t, &z[..a], &cp.u, &z[b..])?;
        let dxi = filter_rhs(&z[a..b], &cp.u, self.sys.r);
        let mut out = Vec::with_capacity(z.len());
        out.extend_from_slice(dx.as_slice());
        out.extend_from_slice(dxi.as_slice());
        out.extend_from_slice(deta.as_slice());
        Ok((DVector::from_vec(out), cp))
    }

    /// Raw normalized denominators at `(t, z)`; entries after the first
    /// non-positive one are `NaN` because the chain cannot be continued.
    pub fn domain_margins(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let levels = self.params.theta_hat.len() + 1;
        let mut margins = vec![f64::NAN; levels];
        let Ok(phi) = self.funnel.value(t) else {
            return margins;
        };
        let n = self.sys.n;
        let e = DVector::from_column_slice(&z[..n]) - self.reference.value(t);
        let d0 = 1.0 - phi * phi * e.norm_squared();
        margins[0] = d0;
        if !(d0 > 0.0) {
            return margins;
        }
        let xi = &z[self.x_len()..];
        let mut prev = e / d0;
        for (i, hat) in self.params.theta_hat.iter().enumerate() {
            let th = DVector::from_column_slice(&xi[i * n..(i + 1) * n]) + &prev;
            let d = hat * hat - th.norm_squared();
            margins[i + 1] = d / (hat * hat);
            if !(d > 0.0) {
                break;
            }
            prev = th / d;
        }
        margins
    }
}

/// Closed-loop vector field at `state`, with all denominators required to
/// be positive.
pub fn closed_loop_rhs(
    state: &ClosedLoopState,
    sys: &SystemSpec,
    params: &ControllerParams,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
) -> Result<ClosedLoopDerivative, RhsError> {
    let cl = ClosedLoop::new(sys, params, funnel, reference);
    let z = cl.pack(state.x.as_slice(), state.xi.as_slice(), state.eta.as_slice());
    let (dz, _) = cl.rhs(state.t, &z, Guard::Strict(0.0))?;
    let d = cl.unpack(state.t, &dz);
    Ok(ClosedLoopDerivative {
        dx: d.x,
        dxi: d.xi,
        deta: d.eta,
    })
}

/// One stored (accepted) step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    /// Step that produced this sample; 0 for the initial point.
    pub h: f64,
    pub x: DVector<f64>,
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
    pub y_ref: DVector<f64>,
    pub phi: f64,
    pub e_norm: f64,
    /// `φ‖e‖`
    pub funnel_ratio: f64,
    pub theta_norms: Vec<f64>,
    pub u: DVector<f64>,
}

impl Sample {
    fn new(cl: &ClosedLoop<'_>, t: f64, h: f64, z: &DVector<f64>, cp: &ControlPoint) -> Self {
        let s = cl.unpack(t, z);
        let e_norm = cp.e.norm();
        Self {
            t,
            h,
            x: s.x,
            xi: s.xi,
            eta: s.eta,
            y_ref: cp.y_ref.clone(),
            phi: cp.phi,
            e_norm,
            funnel_ratio: cp.phi * e_norm,
            theta_norms: cp.chain.theta.iter().map(|v| v.norm()).collect(),
            u: cp.u.clone(),
        }
    }

    /// Rebuilds a sample from a stored packed state, recomputing the
    /// controller quantities.
    pub fn from_state(
        cl: &ClosedLoop<'_>,
        t: f64,
        h: f64,
        z: &DVector<f64>,
    ) -> Result<Self, RhsError> {
        let cp = cl.control(t, z.as_slice(), Guard::Strict(0.0))?;
        Ok(Self::new(cl, t, h, z, &cp))
    }

    /// `y^(j)`
    pub fn derivative(&self, j: usize, n: usize) -> DVector<f64> {
        self.x.rows(j * n, n).into_owned()
    }

    /// `ξ_j` for `1 ≤ j ≤ r-1`.
    pub fn filter(&self, j: usize, n: usize) -> DVector<f64> {
        self.xi.rows((j - 1) * n, n).into_owned()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub accepted: usize,
    pub rejected: usize,
    pub error_rejections: usize,
    pub domain_rejections: usize,
    pub taint_retries: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub max_step: f64,
    pub wall_time_s: f64,
}

/// Maxima of the invariant quantities over the stored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub max_funnel_ratio: f64,
    pub max_theta_ratio: Vec<f64>,
    pub max_theta_norm: Vec<f64>,
    pub max_u_norm: f64,
    pub max_e_norm: f64,
    /// `φ‖e‖ < 1` and `‖θ_i‖ < θ̂_i` at every sample, and `u` finite.
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub r: usize,
    pub n: usize,
    pub theta_hat: Vec<f64>,
    pub samples: Vec<Sample>,
    pub stats: SimStats,
    pub feasibility: FeasibilityReport,
    pub config: IntegratorConfig,
    /// `Some` when the run stopped early; samples cover the accepted part.
    pub failure: Option<SimError>,
}

impl SimResult {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }

    pub fn summary(&self) -> InvariantSummary {
        summarize(&self.samples, &self.theta_hat)
    }
}

pub fn summarize(samples: &[Sample], theta_hat: &[f64]) -> InvariantSummary {
    let levels = theta_hat.len();
    let mut s = InvariantSummary {
        max_funnel_ratio: 0.0,
        max_theta_ratio: vec![0.0; levels],
        max_theta_norm: vec![0.0; levels],
        max_u_norm: 0.0,
        max_e_norm: 0.0,
        holds: true,
    };
    for p in samples {
        s.max_funnel_ratio = s.max_funnel_ratio.max(p.funnel_ratio);
        s.max_e_norm = s.max_e_norm.max(p.e_norm);
        let un = p.u.norm();
        s.max_u_norm = s.max_u_norm.max(un);
        let mut ok = p.funnel_ratio < 1.0 && un.is_finite();
        for (i, th) in p.theta_norms.iter().enumerate() {
            s.max_theta_norm[i] = s.max_theta_norm[i].max(*th);
            s.max_theta_ratio[i] = s.max_theta_ratio[i].max(th / theta_hat[i]);
            ok &= *th < theta_hat[i];
        }
        s.holds &= ok;
    }
    s
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// Proportional-integral step-size controller.
#[derive(Debug, Clone)]
struct PiControl {
    alpha: f64,
    beta: f64,
    err_old: f64,
}

impl PiControl {
    fn new(order: f64) -> Self {
        Self {
            alpha: 0.7 / order,
            beta: 0.4 / order,
            err_old: 1e-4,
        }
    }

    fn accept(&mut self, err: f64, after_reject: bool) -> f64 {
        let err = err.max(1e-10);
        let mut fac = SAFETY * err.powf(-self.alpha) * self.err_old.powf(self.beta);
        fac = fac.clamp(FAC_MIN, FAC_MAX);
        if after_reject {
            fac = fac.min(1.0);
        }
        self.err_old = err.max(1e-4);
        fac
    }

    fn reject(&self, err: f64) -> f64 {
        (SAFETY * err.powf(-self.alpha)).clamp(FAC_MIN, 1.0)
    }
}

struct Trial {
    z: DVector<f64>,
    /// Stage 2..6 derivatives, needed for the error estimate with the FSAL stage.
    stages: Vec<DVector<f64>>,
    tainted: bool,
}

/// Stages 2..6 and the fifth-order solution; the FSAL stage is evaluated by
/// the caller at the endpoint.
fn trial_step<F, E>(f: &mut F, t: f64, z: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Result<Trial, E>
where
    F: FnMut(f64, &DVector<f64>) -> Result<(DVector<f64>, bool), E>,
{
    let mut ks: Vec<DVector<f64>> = Vec::with_capacity(7);
    ks.push(k1.clone());
    let mut tainted = false;
    for s in 1..6 {
        let mut zs = z.clone();
        for (j, a) in A[s].iter().enumerate() {
            if *a != 0.0 {
                zs.axpy(h * a, &ks[j], 1.0);
            }
        }
        let (k, taint) = f(t + C[s] * h, &zs)?;
        tainted |= taint;
        ks.push(k);
    }
    let mut z_new = z.clone();
    for (j, a) in A[6].iter().enumerate() {
        if *a != 0.0 {
            z_new.axpy(h * a, &ks[j], 1.0);
        }
    }
    Ok(Trial {
        z: z_new,
        stages: ks,
        tainted,
    })
}

fn error_norm(
    h: f64,
    stages: &[DVector<f64>],
    k7: &DVector<f64>,
    z: &DVector<f64>,
    z_new: &DVector<f64>,
    rtol: f64,
    atol: f64,
) -> f64 {
    let dim = z.len();
    if dim == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..dim {
        let mut e = E[6] * k7[i];
        for (j, k) in stages.iter().enumerate() {
            e += E[j] * k[i];
        }
        let sc = atol + rtol * z[i].abs().max(z_new[i].abs());
        let q = h * e / sc;
        acc += q * q;
    }
    let err = (acc / dim as f64).sqrt();
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

const ROS_D: f64 = 0.292_893_218_813_452_5; // 1 / (2 + √2)
const ROS_E32: f64 = 7.414_213_562_373_095; // 6 + √2

/// Forward-difference Jacobian `∂f/∂z` and time derivative `∂f/∂t`.
struct Linearization {
    jac: DMatrix<f64>,
    dt: DVector<f64>,
}

fn linearize<F, E>(f: &mut F, t: f64, z: &DVector<f64>, f0: &DVector<f64>) -> Result<Linearization, E>
where
    F: FnMut(f64, &DVector<f64>) -> Result<(DVector<f64>, bool), E>,
{
    let dim = z.len();
    let sq = f64::EPSILON.sqrt();
    let mut jac = DMatrix::zeros(dim, dim);
    let mut zp = z.clone();
    for j in 0..dim {
        let d = sq * z[j].abs().max(1e-5);
        zp[j] = z[j] + d;
        let d = zp[j] - z[j];
        let (fj, _) = f(t, &zp)?;
        jac.set_column(j, &((fj - f0) / d));
        zp[j] = z[j];
    }
    let dt = sq * t.abs().max(1.0);
    let (ft, _) = f(t + dt, z)?;
    Ok(Linearization {
        jac,
        dt: (ft - f0) / dt,
    })
}

struct RosTrial {
    z: DVector<f64>,
    f0: DVector<f64>,
    f1: DVector<f64>,
    k1: DVector<f64>,
    k2: DVector<f64>,
    hdt: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    tainted: bool,
}

/// Two-stage Rosenbrock step; `None` when the iteration matrix is singular.
fn ros_trial<F, E>(
    f: &mut F,
    t: f64,
    z: &DVector<f64>,
    f0: &DVector<f64>,
    lin: &Linearization,
    h: f64,
) -> Result<Option<RosTrial>, E>
where
    F: FnMut(f64, &DVector<f64>) -> Result<(DVector<f64>, bool), E>,
{
    let dim = z.len();
    let w = DMatrix::identity(dim, dim) - &lin.jac * (h * ROS_D);
    let lu = w.lu();
    let hdt = &lin.dt * (h * ROS_D);
    let Some(k1) = lu.solve(&(f0 + &hdt)) else {
        return Ok(None);
    };
    let mut zs = z.clone();
    zs.axpy(0.5 * h, &k1, 1.0);
    let (f1, tainted) = f(t + 0.5 * h, &zs)?;
    let Some(k2) = lu.solve(&(&f1 - &k1)).map(|v| v + &k1) else {
        return Ok(None);
    };
    let mut z_new = z.clone();
    z_new.axpy(h, &k2, 1.0);
    Ok(Some(RosTrial {
        z: z_new,
        f0: f0.clone(),
        f1,
        k1,
        k2,
        hdt,
        lu,
        tainted,
    }))
}

impl RosTrial {
    fn error(&self, h: f64, f2: &DVector<f64>, z: &DVector<f64>, rtol: f64, atol: f64) -> f64 {
        let rhs = f2 - (&self.k2 - &self.f1) * ROS_E32 - (&self.k1 - &self.f0) * 2.0 + &self.hdt;
        let Some(k3) = self.lu.solve(&rhs) else {
            return f64::INFINITY;
        };
        let dim = z.len();
        if dim == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..dim {
            let e = h / 6.0 * (self.k1[i] - 2.0 * self.k2[i] + k3[i]);
            let sc = atol + rtol * z[i].abs().max(self.z[i].abs());
            acc += (e / sc).powi(2);
        }
        let err = (acc / dim as f64).sqrt();
        if err.is_nan() {
            f64::INFINITY
        } else {
            err
        }
    }
}

enum Proposal {
    Explicit(Trial),
    Rosenbrock(RosTrial),
}

impl Proposal {
    fn z(&self) -> &DVector<f64> {
        match self {
            Proposal::Explicit(tr) => &tr.z,
            Proposal::Rosenbrock(tr) => &tr.z,
        }
    }

    fn tainted(&self) -> bool {
        match self {
            Proposal::Explicit(tr) => tr.tainted,
            Proposal::Rosenbrock(tr) => tr.tainted,
        }
    }
}

/// Adaptive integration of an auxiliary ODE without domain guard (used to
/// seed operator memory from an initial history).
pub fn integrate_unguarded<F>(
    mut f: F,
    t0: f64,
    t1: f64,
    z0: DVector<f64>,
) -> Result<DVector<f64>, PlantError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, PlantError>,
{
    let (rtol, atol) = (1e-10, 1e-12);
    let mut g = |t: f64, z: &DVector<f64>| f(t, z).map(|k| (k, false));
    let mut t = t0;
    let mut z = z0;
    let mut k1 = g(t, &z)?.0;
    let mut h = ((t1 - t0) * 1e-3).max(1e-12);
    let mut pi = PiControl::new(5.0);
    let mut rejected = false;
    let mut steps = 0usize;
    while t < t1 {
        h = h.min(t1 - t);
        let trial = trial_step(&mut g, t, &z, &k1, h)?;
        let (k7, _) = g(t + h, &trial.z)?;
        let err = error_norm(h, &trial.stages, &k7, &z, &trial.z, rtol, atol);
        steps += 1;
        if steps > 10_000_000 || h < 1e-14 * (1.0 + t.abs()) {
            return Err(PlantError::Invalid(
                "initial history integration did not converge".into(),
            ));
        }
        if err <= 1.0 {
            t = if t + h >= t1 { t1 } else { t + h };
            z = trial.z;
            k1 = k7;
            h *= pi.accept(err, rejected);
            rejected = false;
        } else {
            h *= pi.reject(err);
            rejected = true;
        }
    }
    Ok(z)
}

/// Integrates the closed loop over `[t0, cfg.t_end]`.
///
/// Refuses to start when the initial data are infeasible. On step-size
/// underflow the returned error names the domain constraint that was
/// closest to violation at the last rejected trial; use [`simulate_partial`]
/// to keep the samples accepted before the failure.
pub fn simulate(
    sys: &SystemSpec,
    params: &ControllerParams,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
    cfg: &IntegratorConfig,
) -> Result<SimResult, SimError> {
    let res = simulate_partial(sys, params, funnel, reference, cfg)?;
    match res.failure {
        Some(err) => Err(err),
        None => Ok(res),
    }
}

/// Like [`simulate`], but a mid-run failure is stored in
/// [`SimResult::failure`] together with the trajectory accepted so far.
/// Configuration errors and infeasible starts are still returned as `Err`.
pub fn simulate_partial(
    sys: &SystemSpec,
    params: &ControllerParams,
    funnel: &FunnelSpec,
    reference: &ReferenceSpec,
    cfg: &IntegratorConfig,
) -> Result<SimResult, SimError> {
    let started = Instant::now();
    sys.validate()?;
    params.validate(sys).map_err(SimError::Config)?;
    cfg.validate(sys.t0).map_err(SimError::Config)?;
    if reference.dim() != sys.n {
        return Err(SimError::Config(format!(
            "reference has {} channels, plant has {}",
            reference.dim(),
            sys.n
        )));
    }
    let feasibility = initial_feasibility(sys, params, funnel, reference);
    if !feasibility.feasible {
        return Err(SimError::InfeasibleStart(Box::new(feasibility)));
    }

    let cl = ClosedLoop::new(sys, params, funnel, reference);
    let eta0 = sys.initial_operator_state()?;
    let mut z = cl.pack(&sys.x0, &params.xi0, &eta0);
    let mut t = sys.t0;
    let mut stats = SimStats {
        min_step: f64::INFINITY,
        ..SimStats::default()
    };
    let mut result = SimResult {
        r: sys.r,
        n: sys.n,
        theta_hat: params.theta_hat.clone(),
        samples: Vec::new(),
        stats: SimStats::default(),
        feasibility,
        config: cfg.clone(),
        failure: None,
    };

    let (mut k1, cp) = cl.rhs(t, &z, Guard::Strict(0.0)).map_err(rhs_to_sim)?;
    stats.rhs_evals += 1;
    result.samples.push(Sample::new(&cl, t, 0.0, &z, &cp));

    let guard = cfg.guard_factor;
    let mut stage_rhs = |s: f64, zs: &DVector<f64>| -> Result<(DVector<f64>, bool), RhsError> {
        let (k, cp) = cl.rhs(s, zs, Guard::Clamp(guard))?;
        Ok((k, cp.chain.tainted))
    };

    let mut h = cfg.h_init.min(cfg.h_max);
    let mut pi = PiControl::new(cfg.method.error_order());
    let mut after_reject = false;
    let mut taint_retry = false;
    let mut lin: Option<Linearization> = None;

    while t < cfg.t_end {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            result.failure = Some(SimError::StepLimit {
                t,
                steps: cfg.max_steps,
            });
            break;
        }
        let remaining = cfg.t_end - t;
        let last = h >= remaining;
        let step = if last { remaining } else { h };

        let proposal = match cfg.method {
            Method::DormandPrince => {
                stats.rhs_evals += 5;
                trial_step(&mut stage_rhs, t, &z, &k1, step).map(|tr| Some(Proposal::Explicit(tr)))
            }
            Method::Rosenbrock => {
                if lin.is_none() {
                    match linearize(&mut stage_rhs, t, &z, &k1) {
                        Ok(l) => lin = Some(l),
                        Err(err) => {
                            result.failure = Some(rhs_to_sim(err));
                            break;
                        }
                    }
                    stats.rhs_evals += z.len() + 1;
                }
                stats.rhs_evals += 1;
                ros_trial(&mut stage_rhs, t, &z, &k1, lin.as_ref().unwrap(), step)
                    .map(|tr| tr.map(Proposal::Rosenbrock))
            }
        };
        let trial = match proposal {
            Ok(Some(tr)) => tr,
            Ok(None) => {
                stats.rejected += 1;
                stats.error_rejections += 1;
                after_reject = true;
                h = step * FAC_MIN;
                if h < cfg.h_min {
                    let (level, margin) = nearest_constraint(&cl.domain_margins(t, z.as_slice()));
                    result.failure = Some(SimError::StepUnderflow {
                        t,
                        h,
                        constraint: Constraint::from_level(level),
                        margin,
                    });
                    break;
                }
                continue;
            }
            Err(RhsError::Domain(_)) => unreachable!("clamped stages never exit"),
            Err(err) => {
                result.failure = Some(rhs_to_sim(err));
                break;
            }
        };

        let end = cl.rhs(t + step, trial.z(), Guard::Strict(guard));
        stats.rhs_evals += 1;
        let (reject_factor, reason_margins) = match end {
            Err(RhsError::Domain(_)) => {
                stats.domain_rejections += 1;
                (0.5, Some(cl.domain_margins(t + step, trial.z().as_slice())))
            }
            Err(err) => {
                result.failure = Some(rhs_to_sim(err));
                break;
            }
            Ok((k7, cp)) => {
                let err = match &trial {
                    Proposal::Explicit(tr) => {
                        error_norm(step, &tr.stages, &k7, &z, &tr.z, cfg.rel_tol, cfg.abs_tol)
                    }
                    Proposal::Rosenbrock(tr) => tr.error(step, &k7, &z, cfg.rel_tol, cfg.abs_tol),
                };
                if err > 1.0 {
                    stats.error_rejections += 1;
                    (
                        pi.reject(err),
                        Some(cl.domain_margins(t + step, trial.z().as_slice())),
                    )
                } else if trial.tainted() && !taint_retry {
                    stats.taint_retries += 1;
                    taint_retry = true;
                    (0.5, Some(cl.domain_margins(t + step, trial.z().as_slice())))
                } else {
                    t = if last { cfg.t_end } else { t + step };
                    z = match trial {
                        Proposal::Explicit(tr) => tr.z,
                        Proposal::Rosenbrock(tr) => tr.z,
                    };
                    lin = None;
                    k1 = k7;
                    stats.accepted += 1;
                    stats.min_step = stats.min_step.min(step);
                    stats.max_step = stats.max_step.max(step);
                    result.samples.push(Sample::new(&cl, t, step, &z, &cp));
                    let fac = pi.accept(err, after_reject);
                    after_reject = false;
                    taint_retry = false;
                    h = (step * fac).min(cfg.h_max);
                    if !last && h < cfg.h_min {
                        h = cfg.h_min;
                    }
                    (1.0, None)
                }
            }
        };

        if let Some(margins) = reason_margins {
            stats.rejected += 1;
            after_reject = true;
            let nearest = nearest_constraint(&margins);
            h = step * reject_factor;
            if h < cfg.h_min {
                result.failure = Some(SimError::StepUnderflow {
                    t,
                    h,
                    constraint: Constraint::from_level(nearest.0),
                    margin: nearest.1,
                });
                break;
            }
        }
    }

    if stats.accepted == 0 {
        stats.min_step = 0.0;
    }
    stats.wall_time_s = started.elapsed().as_secs_f64();
    result.stats = stats;
    Ok(result)
}

/// First non-positive level if any, otherwise the smallest margin.
fn nearest_constraint(margins: &[f64]) -> (usize, f64) {
    if let Some((i, m)) = margins
        .iter()
        .enumerate()
        .find(|(_, m)| !(**m > 0.0) && !m.is_nan())
    {
        return (i, *m);
    }
    margins
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_nan())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, m)| (i, *m))
        .unwrap_or((0, f64::NAN))
}

fn rhs_to_sim(err: RhsError) -> SimError {
    match err {
        RhsError::Plant(e) => SimError::Plant(e),
        RhsError::Signal(e) => SimError::Signal(e),
        RhsError::Domain(d) => SimError::StepUnderflow {
            t: f64::NAN,
            h: 0.0,
            constraint: Constraint::from_level(d.level),
            margin: d.margin,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{chain_integrator, paper_nonlinear, IntegralArg};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn unguarded_integration_matches_exponential() {
        let z = integrate_unguarded(
            |_t, z: &DVector<f64>| Ok(-z),
            0.0,
            3.0,
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_relative_eq!(z[0], (-3.0f64).exp(), max_relative = 1e-8);
        assert_relative_eq!(z[1], 2.0 * (-3.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn chain_equilibrium_has_zero_derivative() {
        let sys = chain_integrator(2, DMatrix::identity(1, 1)).unwrap();
        let p = ControllerParams::new(1.0, vec![0.5], 1);
        let state = ClosedLoopState {
            t: 0.0,
            x: DVector::zeros(2),
            xi: DVector::zeros(1),
            eta: DVector::zeros(0),
        };
        let d = closed_loop_rhs(
            &state,
            &sys,
            &p,
            &FunnelSpec::Paper,
            &ReferenceSpec::Constant { value: vec![0.0] },
        )
        .unwrap();
        assert!(d.dx.iter().chain(d.dxi.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn paper_derivative_at_start() {
        let sys = paper_nonlinear(IntegralArg::S);
        let p = ControllerParams::new(1.0, vec![0.25, 0.01], 2);
        let state = ClosedLoopState {
            t: 0.0,
            x: DVector::zeros(6),
            xi: DVector::zeros(4),
            eta: DVector::zeros(1),
        };
        let d = closed_loop_rhs(&state, &sys, &p, &FunnelSpec::Paper, &ReferenceSpec::Paper)
            .unwrap();
        let cl = ClosedLoop::new(&sys, &p, &FunnelSpec::Paper, &ReferenceSpec::Paper);
        let cp = cl
            .control(0.0, cl.pack(&[0.0; 6], &[0.0; 4], &[0.0]).as_slice(), Guard::Strict(0.0))
            .unwrap();
        assert!(cp.u.norm() < 1e-3);
        let gu = &sys.gamma * &cp.u;
        assert_relative_eq!(d.dx[4], 1.2 + gu[0], epsilon = 1e-15);
        assert_relative_eq!(d.dx[5], 0.2 + gu[1], epsilon = 1e-15);
        assert_eq!(d.dx.rows(0, 4).norm(), 0.0);
    }

    #[test]
    fn outside_funnel_is_a_level_zero_exit() {
        let sys = chain_integrator(2, DMatrix::identity(1, 1)).unwrap();
        let p = ControllerParams::new(1.0, vec![0.5], 1);
        let state = ClosedLoopState {
            t: 0.0,
            x: DVector::from_vec(vec![3.0, 0.0]),
            xi: DVector::zeros(1),
            eta: DVector::zeros(0),
        };
        let err = closed_loop_rhs(
            &state,
            &sys,
            &p,
            &FunnelSpec::Exponential { a: 0.0, b: 1.0, c: 2.0 },
            &ReferenceSpec::Constant { value: vec![0.0] },
        )
        .unwrap_err();
        assert!(matches!(err, RhsError::Domain(DomainExit { level: 0, .. })));
    }

    #[test]
    fn equilibrium_is_preserved_exactly() {
        let sys = chain_integrator(3, DMatrix::identity(1, 1)).unwrap();
        let p = ControllerParams::new(1.0, vec![0.5, 0.5], 1);
        let cfg = IntegratorConfig {
            t_end: 10.0,
            h_max: 0.01,
            ..IntegratorConfig::default()
        };
        let res = simulate(
            &sys,
            &p,
            &FunnelSpec::Exponential { a: 1.0, b: 1.0, c: 0.5 },
            &ReferenceSpec::Constant { value: vec![0.0] },
            &cfg,
        )
        .unwrap();
        assert!(res.stats.accepted >= 1000);
        for s in &res.samples {
            assert_eq!(s.x.norm() + s.xi.norm() + s.u.norm() + s.e_norm, 0.0);
        }
    }

    #[test]
    fn infeasible_radius_is_refused() {
        let sys = paper_nonlinear(IntegralArg::S);
        let p = ControllerParams::new(1.0, vec![0.25, 1e-12], 2);
        let err = simulate(
            &sys,
            &p,
            &FunnelSpec::Paper,
            &ReferenceSpec::Paper,
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = IntegratorConfig::default();
        assert!(cfg.validate(0.0).is_ok());
        cfg.h_min = 1.0;
        assert!(cfg.validate(0.0).is_err());
        let cfg = IntegratorConfig {
            t_end: -1.0,
            ..IntegratorConfig::default()
        };
        assert!(cfg.validate(0.0).is_err());
    }

    #[test]
    fn difference_jacobian_of_linear_field() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.5, -3.0]);
        let mut f = |t: f64, z: &DVector<f64>| Ok::<_, ()>((&a * z + DVector::from_element(2, t), false));
        let z = DVector::from_vec(vec![0.3, -1.2]);
        let f0 = f(2.0, &z).unwrap().0;
        let lin = linearize(&mut f, 2.0, &z, &f0).unwrap();
        assert!((lin.jac - &a).abs().max() < 1e-6);
        assert!((lin.dt - DVector::from_element(2, 1.0)).abs().max() < 1e-6);
    }

    #[test]
    fn rosenbrock_agrees_with_explicit_pair() {
        let sys = chain_integrator(2, DMatrix::identity(1, 1)).unwrap();
        let p = ControllerParams::new(1.0, vec![0.5], 1);
        let f = FunnelSpec::Exponential { a: 2.0, b: 1.0, c: 0.2 };
        let rf = ReferenceSpec::Sinusoid {
            amplitude: vec![1.0],
            frequency: vec![1.0],
            phase: vec![0.0],
        };
        let run = |method| {
            let cfg = IntegratorConfig {
                method,
                t_end: 5.0,
                ..IntegratorConfig::default()
            };
            simulate(&sys, &p, &f, &rf, &cfg).unwrap()
        };
        let (a, b) = (run(Method::DormandPrince), run(Method::Rosenbrock));
        let (ya, yb) = (a.samples.last().unwrap(), b.samples.last().unwrap());
        assert!((&ya.x - &yb.x).norm() < 1e-4);
        assert!(b.summary().holds);
    }

    #[test]
    fn method_names_round_trip() {
        for name in Method::NAMES {
            assert_eq!(Method::parse(name).unwrap().to_string(), name);
        }
        assert!(Method::parse("euler").is_none());
    }

    #[test]
    fn nearest_constraint_prefers_first_violation() {
        assert_eq!(nearest_constraint(&[0.5, -0.1, f64::NAN]), (1, -0.1));
        assert_eq!(nearest_constraint(&[0.5, 0.2, 0.7]), (1, 0.2));
    }
}
