//! Trajectory identities. Every derivative `y^(j)` comes from the stored
//! plant state, never from numerical differentiation, so the algebraic
//! identities below hold up to rounding along any stored trajectory.
//!
//! Residuals are reported as `‖lhs - rhs‖ / (1 + ‖lhs‖)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::ProofConstants;
use super::poly::MatrixPolynomialFamily;
use crate::error::{AnalysisError, PlantError};
use crate::integrator::Sample;
use crate::plant::SystemSpec;

/// Tabulated `S_j(i)`, `α_j(i)`, `β_j(i)` at the nodes `i = 1..=r-1`.
#[derive(Debug, Clone)]
pub struct NodeTables {
    pub r: usize,
    pub n: usize,
    /// `s[i-1][j] = S_j(i)`, `0 ≤ j ≤ r-1`.
    pub s: Vec<Vec<DMatrix<f64>>>,
    /// `alpha[i-1][j] = α_j(i)`, `0 ≤ j ≤ r-1`.
    pub alpha: Vec<Vec<DMatrix<f64>>>,
    /// `beta[i-1][j-1] = β_j(i)`, `1 ≤ j ≤ r-1`.
    pub beta: Vec<Vec<f64>>,
    pub gamma: DMatrix<f64>,
}

impl NodeTables {
    pub fn new(family: &MatrixPolynomialFamily, gamma: &DMatrix<f64>) -> Self {
        let r = family.r;
        let nodes = 1..r;
        Self {
            r,
            n: family.n,
            s: nodes
                .clone()
                .map(|i| (0..r).map(|j| family.get(j).eval(i as f64)).collect())
                .collect(),
            alpha: nodes
                .clone()
                .map(|i| (0..r).map(|j| family.alpha(j, i as f64)).collect())
                .collect(),
            beta: nodes
                .map(|i| (1..r).map(|j| family.beta(j, i as f64)).collect())
                .collect(),
            gamma: gamma.clone(),
        }
    }
}

/// View of one stored point as derivatives and filters.
struct Point<'a> {
    s: &'a Sample,
    n: usize,
}

impl Point<'_> {
    fn y(&self, j: usize) -> DVector<f64> {
        self.s.derivative(j, self.n)
    }

    fn xi(&self, j: usize) -> DVector<f64> {
        self.s.filter(j, self.n)
    }
}

fn ipow(base: f64, e: usize) -> f64 {
    base.powi(e as i32)
}

/// `ζ_i` from its defining sum, with the magnitude scale of its terms.
///
/// ```text
/// ζ_i = Σ_{j=r-i}^{r-1} (-1)^{r-1-j} (i^{r-1-j} y^(j) - a_{i,j} Γ ξ_j)
///     + Σ_{j=0}^{r-2} S_j(i) y^(j)
///     + Σ_{j=i+1}^{r} (-i)^{j-1} y^(r-j)
/// ```
pub fn zeta_defining(
    sample: &Sample,
    i: usize,
    consts: &ProofConstants,
    tables: &NodeTables,
) -> (DVector<f64>, f64) {
    let (r, n) = (tables.r, tables.n);
    let p = Point { s: sample, n };
    let fi = i as f64;
    let mut acc = DVector::zeros(n);
    let mut scale = 0.0;
    let mut add = |v: DVector<f64>| {
        scale += v.norm();
        acc += v;
    };
    for j in r - i..r {
        let sign = if (r - 1 - j) % 2 == 0 { 1.0 } else { -1.0 };
        add(p.y(j) * (sign * ipow(fi, r - 1 - j)));
        add(&tables.gamma * p.xi(j) * (-sign * consts.a(i, j) as f64));
    }
    for j in 0..r - 1 {
        add(&tables.s[i - 1][j] * p.y(j));
    }
    for j in i + 1..=r {
        add(p.y(r - j) * ipow(-fi, j - 1));
    }
    (acc, scale)
}

/// `ζ_i = Σ_{j=0}^{r-1} α_j(i) y^(j) + Σ_{j=1}^{r-1} β_j(i) Γ ξ_j`.
pub fn zeta_polynomial(sample: &Sample, i: usize, tables: &NodeTables) -> DVector<f64> {
    let (r, n) = (tables.r, tables.n);
    let p = Point { s: sample, n };
    let mut acc = DVector::zeros(n);
    for j in 0..r {
        acc += &tables.alpha[i - 1][j] * p.y(j);
    }
    for j in 1..r {
        acc += &tables.gamma * p.xi(j) * tables.beta[i - 1][j - 1];
    }
    acc
}

/// `ζ̇_i = f(T(y, …)) + i S_0(i) y - i ζ_i - (-i)^r y`.
pub fn zeta_rate(
    sys: &SystemSpec,
    sample: &Sample,
    i: usize,
    zeta_i: &DVector<f64>,
    tables: &NodeTables,
) -> Result<DVector<f64>, PlantError> {
    let (r, n) = (tables.r, tables.n);
    let (fw, _) = sys.drift(sample.t, sample.x.as_slice(), sample.eta.as_slice())?;
    let fi = i as f64;
    let y = sample.derivative(0, n);
    Ok(fw + &tables.s[i - 1][0] * &y * fi - zeta_i * fi - y * ipow(-fi, r))
}

fn relative(diff: f64, scale: f64) -> f64 {
    diff / (1.0 + scale)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZetaTraces {
    pub t: Vec<f64>,
    /// `zeta[k][i-1]`: `ζ_i` at sample `k` (defining form).
    #[serde(skip)]
    pub zeta: Vec<Vec<DVector<f64>>>,
    /// Per `i`: largest relative gap between defining and polynomial form.
    pub max_dual_residual: Vec<f64>,
    /// Per `i`: `max_t ‖ζ_i(t)‖`.
    pub max_norm: Vec<f64>,
}

pub fn zeta_eval(samples: &[Sample], consts: &ProofConstants, tables: &NodeTables) -> ZetaTraces {
    let r = tables.r;
    let per_sample: Vec<(Vec<DVector<f64>>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            (1..r)
                .map(|i| {
                    let (def, _) = zeta_defining(s, i, consts, tables);
                    let poly = zeta_polynomial(s, i, tables);
                    let res = relative((&def - &poly).norm(), def.norm());
                    (def, res)
                })
                .unzip()
        })
        .collect();
    let mut max_dual = vec![0.0; r - 1];
    let mut max_norm = vec![0.0f64; r - 1];
    for (zs, res) in &per_sample {
        for i in 0..r - 1 {
            max_dual[i] = f64::max(max_dual[i], res[i]);
            max_norm[i] = max_norm[i].max(zs[i].norm());
        }
    }
    ZetaTraces {
        t: samples.iter().map(|s| s.t).collect(),
        zeta: per_sample.into_iter().map(|(z, _)| z).collect(),
        max_dual_residual: max_dual,
        max_norm,
    }
}

/// Kernel-weighted coefficient matrices of `Z_k` (`Z_1 = Z`).
#[derive(Debug, Clone)]
pub struct ZCoefficients {
    pub k: usize,
    /// `A_j^{(k)}` for `0 ≤ j ≤ r-1`.
    pub a: Vec<DMatrix<f64>>,
    /// `B_j^{(k)}` for `1 ≤ j ≤ r-1` (index `j-1`).
    pub b: Vec<f64>,
    pub a_scale: Vec<f64>,
    pub b_scale: Vec<f64>,
}

pub fn z_coefficients(
    k: usize,
    consts: &ProofConstants,
    family: &MatrixPolynomialFamily,
) -> ZCoefficients {
    let c = consts.kernel(k);
    let r = family.r;
    ZCoefficients {
        k,
        a: (0..r).map(|j| family.weighted_alpha(c, j)).collect(),
        b: (1..r).map(|j| family.weighted_beta(c, j)).collect(),
        a_scale: (0..r).map(|j| family.weighted_alpha_scale(c, j)).collect(),
        b_scale: (1..r).map(|j| family.weighted_beta_scale(c, j)).collect(),
    }
}

fn weighted_zeta(c: &[f64], zetas: &[DVector<f64>]) -> DVector<f64> {
    c.iter()
        .zip(zetas)
        .fold(DVector::zeros(zetas[0].len()), |acc, (ci, z)| acc + z * *ci)
}

/// Largest relative residual of `Z - q(ẏ - Γξ_1) - A_0 y` over the samples.
pub fn z_identity_residual(
    samples: &[Sample],
    traces: &ZetaTraces,
    consts: &ProofConstants,
    family: &MatrixPolynomialFamily,
    gamma: &DMatrix<f64>,
) -> f64 {
    let n = family.n;
    let coeff = z_coefficients(1, consts, family);
    let a0 = &coeff.a[0];
    let q = consts.q;
    samples
        .par_iter()
        .zip(traces.zeta.par_iter())
        .map(|(s, zetas)| {
            let z = weighted_zeta(&consts.c, zetas);
            let rhs = (s.derivative(1, n) - gamma * s.filter(1, n)) * q + a0 * s.derivative(0, n);
            relative((&z - &rhs).norm(), z.norm())
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub k: usize,
    #[serde(skip)]
    pub trace: Vec<DVector<f64>>,
    pub max_residual: f64,
}

/// Recovers `y^(k)` from `Z_k`, the filters and the lower derivatives:
///
/// ```text
/// y^(k) = ((-1)^{r-1-k} q_k)^{-1} (Z_k - Σ_{j=1}^{k} B_j^{(k)} Γ ξ_j - Σ_{j=0}^{k-1} A_j^{(k)} y^(j))
/// ```
///
/// and compares it with the stored `y^(k)`.
pub fn zk_reconstruct(
    samples: &[Sample],
    traces: &ZetaTraces,
    consts: &ProofConstants,
    family: &MatrixPolynomialFamily,
    gamma: &DMatrix<f64>,
    k: usize,
) -> Result<Reconstruction, AnalysisError> {
    let r = family.r;
    if k < 2 || k + 1 > r {
        return Err(AnalysisError::Order { k, max: r - 1 });
    }
    let n = family.n;
    let coeff = z_coefficients(k, consts, family);
    let c = consts.kernel(k);
    let sign = if (r - 1 - k).is_multiple_of(2) { 1.0 } else { -1.0 };
    let lead = sign * consts.q_of(k);
    let rows: Vec<(DVector<f64>, f64)> = samples
        .par_iter()
        .zip(traces.zeta.par_iter())
        .map(|(s, zetas)| {
            let mut acc = weighted_zeta(c, zetas);
            for j in 1..=k {
                acc -= gamma * s.filter(j, n) * coeff.b[j - 1];
            }
            for j in 0..k {
                acc -= &coeff.a[j] * s.derivative(j, n);
            }
            let rec = acc / lead;
            let stored = s.derivative(k, n);
            let res = relative((&rec - &stored).norm(), stored.norm());
            (rec, res)
        })
        .collect();
    let max_residual = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(Reconstruction {
        k,
        trace: rows.into_iter().map(|r| r.0).collect(),
        max_residual,
    })
}

/// Finite-difference spot check of the `ζ_i` differential equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaRateCheck {
    pub points: usize,
    /// Largest `error / tolerance` over all points and all `i`.
    pub worst_ratio: f64,
    pub worst_time: f64,
    pub passed: bool,
}

/// At `count` interior samples, compares the central difference
/// `(ζ_i(t_{k+1}) - ζ_i(t_{k-1})) / (t_{k+1} - t_{k-1})` with the closed-form
/// `ζ̇_i(t_k)`. The tolerance is `10·h·L` with `h` the larger neighbouring
/// step and `L` the local slope of `ζ̇_i` estimated from the neighbours,
/// plus a rounding allowance for differencing the stored values.
pub fn zeta_rate_check(
    sys: &SystemSpec,
    samples: &[Sample],
    traces: &ZetaTraces,
    tables: &NodeTables,
    count: usize,
) -> Result<ZetaRateCheck, AnalysisError> {
    if samples.len() < 3 {
        return Err(AnalysisError::Input(
            "need at least three samples for central differences".into(),
        ));
    }
    let r = tables.r;
    let interior = samples.len() - 2;
    let picks: Vec<usize> = (0..count.min(interior))
        .map(|p| 1 + p * interior / count.min(interior))
        .collect();
    let rate = |k: usize, i: usize| {
        zeta_rate(sys, &samples[k], i, &traces.zeta[k][i - 1], tables)
            .map_err(|e| AnalysisError::Input(e.to_string()))
    };
    let mut worst = (0.0f64, f64::NAN);
    for &k in &picks {
        let (tm, t0, tp) = (samples[k - 1].t, samples[k].t, samples[k + 1].t);
        let span = tp - tm;
        let h = (tp - t0).max(t0 - tm);
        for i in 1..r {
            let (zm, zp) = (&traces.zeta[k - 1][i - 1], &traces.zeta[k + 1][i - 1]);
            let fd = (zp - zm) / span;
            let exact = rate(k, i)?;
            let slope = (rate(k + 1, i)? - rate(k - 1, i)?).norm() / span;
            let rounding = 1e3 * f64::EPSILON * (1.0 + zp.norm() + zm.norm()) / span;
            let tol = 10.0 * h * slope + rounding;
            let ratio = (fd - exact).norm() / tol;
            if ratio > worst.0 || ratio.is_nan() {
                worst = (ratio, t0);
            }
        }
    }
    Ok(ZetaRateCheck {
        points: picks.len(),
        worst_ratio: worst.0,
        worst_time: worst.1,
        passed: worst.0 <= 1.0,
    })
}
