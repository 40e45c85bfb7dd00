//! Integer coefficients `a_{i,j}` and the Vandermonde kernel vectors that
//! isolate `ẏ - Γξ_1` (and higher derivatives) from bounded combinations
//! of the `ζ_i`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;

/// `a_{i,j} = (i-1)! / (i-(r-j))! = ∏_{k=1}^{r-1-j} (i-k)`.
///
/// Defined for `1 ≤ i ≤ r-1` and `r-i ≤ j ≤ r-1`; the lower end `j = r-i`
/// gives `(i-1)!` and is the coefficient of the oldest filter in `ζ_i`.
pub fn a_coeff(i: usize, j: usize, r: usize) -> Result<u128, AnalysisError> {
    if r < 2 || i < 1 || i > r - 1 || j + i < r || j > r - 1 {
        return Err(AnalysisError::IndexRange { i, j, r });
    }
    (1..r - j).try_fold(1u128, |acc, k| acc.checked_mul((i - k) as u128))
        .ok_or(AnalysisError::IndexRange { i, j, r })
}

/// Exact check of `a_{i,j-1} + a_{i,j}(r-j) = i·a_{i,j}` for every pair with
/// both sides defined. Returns the failing `(i, j)` pairs.
pub fn a_recurrence_failures(r: usize) -> Vec<(usize, usize)> {
    let mut bad = Vec::new();
    for i in 1..r {
        for j in (r - i + 1)..r {
            let lhs = a_coeff(i, j - 1, r).unwrap() + a_coeff(i, j, r).unwrap() * (r - j) as u128;
            let rhs = i as u128 * a_coeff(i, j, r).unwrap();
            if lhs != rhs {
                bad.push((i, j));
            }
        }
    }
    bad
}

/// Number of `(i, j)` pairs the recurrence is checked on for order `r`.
pub fn a_recurrence_pairs(r: usize) -> usize {
    (1..r).map(|i| i - 1).sum()
}

/// Proof constants for one order `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofConstants {
    pub r: usize,
    /// `a[i-1][j-(r-i)] = a_{i,j}` for `r-i ≤ j ≤ r-1`.
    pub a: Vec<Vec<u128>>,
    /// Unit kernel vector of the moment matrix, first nonzero entry positive.
    pub c: Vec<f64>,
    /// `q` with `Σ c_i β_1(i) = -q`.
    pub q: f64,
    /// `c^{(k)}` for `k = 2..=r-1` (index `k-2`).
    pub c_k: Vec<Vec<f64>>,
    /// `q_k = Σ c^{(k)}_i i^{r-1-k}`.
    pub q_k: Vec<f64>,
}

impl ProofConstants {
    pub fn new(r: usize) -> Result<Self, AnalysisError> {
        if r < 2 {
            return Err(AnalysisError::Input(format!("order must be ≥ 2, got {r}")));
        }
        let a = (1..r)
            .map(|i| (r - i..r).map(|j| a_coeff(i, j, r)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let (c, q) = if r == 2 {
            (vec![1.0], 1.0)
        } else {
            let c = moment_kernel(r - 1, r - 2)?;
            let top = moment(&c, r - 2);
            let q = if r.is_multiple_of(2) { top } else { -top };
            (c, q)
        };
        let mut c_k = Vec::new();
        let mut q_k = Vec::new();
        for k in 2..r {
            let v = moment_kernel(r - 1, r - 1 - k)?;
            q_k.push(moment(&v, r - 1 - k));
            c_k.push(v);
        }
        Ok(Self { r, a, c, q, c_k, q_k })
    }

    pub fn a(&self, i: usize, j: usize) -> u128 {
        self.a[i - 1][j + i - self.r]
    }

    /// `c^{(k)}` for `1 ≤ k ≤ r-1`, with `c^{(1)} = c`.
    pub fn kernel(&self, k: usize) -> &[f64] {
        if k == 1 {
            &self.c
        } else {
            &self.c_k[k - 2]
        }
    }

    /// `q_k = Σ c^{(k)}_i i^{r-1-k}`; for `k = 1` this is `(-1)^r q`.
    pub fn q_of(&self, k: usize) -> f64 {
        if k == 1 {
            moment(&self.c, self.r - 2)
        } else {
            self.q_k[k - 2]
        }
    }
}

/// `Σ_i c_i i^p` over nodes `1..=len`.
pub fn moment(c: &[f64], p: usize) -> f64 {
    c.iter()
        .enumerate()
        .map(|(idx, ci)| ci * ((idx + 1) as f64).powi(p as i32))
        .sum()
}

/// A unit vector in `R^len` annihilating the power moments `0..rows` of the
/// nodes `1..=len` and with a nonzero moment of order `rows`.
///
/// The vector is supported on a window of `rows + 1` consecutive nodes.
/// Fixing the last entry of the window to 1 leaves a square Vandermonde
/// system for the others, solved in exact rational arithmetic. The moment of
/// order `rows` cannot vanish (that would make the enlarged square
/// Vandermonde matrix singular); the window is nonetheless shifted if it
/// ever does.
pub fn moment_kernel(len: usize, rows: usize) -> Result<Vec<f64>, AnalysisError> {
    if rows + 1 > len {
        return Err(AnalysisError::Input(format!(
            "{rows} moment conditions leave no kernel in dimension {len}"
        )));
    }
    for start in 0..len - rows {
        let nodes: Vec<i64> = (start + 1..=start + rows + 1).map(|v| v as i64).collect();
        let window = vandermonde_kernel(&nodes);
        let top: BigRational = window
            .iter()
            .zip(&nodes)
            .map(|(c, &x)| c * BigRational::from_integer(BigInt::from(x).pow(rows as u32)))
            .fold(BigRational::zero(), |acc, v| acc + v);
        if top.is_zero() {
            continue;
        }
        let mut v = vec![0.0; len];
        for (k, c) in window.iter().enumerate() {
            v[start + k] = c.to_f64().unwrap_or(f64::NAN);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = v.iter().find(|x| **x != 0.0).map(|x| x.signum()).unwrap_or(1.0);
        v.iter_mut().for_each(|x| *x *= sign / norm);
        return Ok(v);
    }
    Err(AnalysisError::Input(format!(
        "no kernel vector with nonzero moment for len {len}, rows {rows}"
    )))
}

/// Solves `Σ_k c_k x_k^p = 0` for `p < nodes.len()-1` with `c_last = 1`.
fn vandermonde_kernel(nodes: &[i64]) -> Vec<BigRational> {
    let m = nodes.len() - 1;
    let pow = |x: i64, p: usize| BigRational::from_integer(BigInt::from(x).pow(p as u32));
    // rows p = 0..m, columns = first m nodes, rhs = -x_last^p
    let mut a: Vec<Vec<BigRational>> = (0..m)
        .map(|p| {
            let mut row: Vec<BigRational> = nodes[..m].iter().map(|&x| pow(x, p)).collect();
            row.push(-pow(nodes[m], p));
            row
        })
        .collect();
    for col in 0..m {
        let piv = (col..m)
            .find(|&r| !a[r][col].is_zero())
            .expect("distinct nodes give an invertible Vandermonde matrix");
        a.swap(col, piv);
        let p = a[col][col].clone();
        for v in a[col].iter_mut() {
            *v = &*v / &p;
        }
        for r in 0..m {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for k in col..=m {
                    let sub = &f * &a[col][k];
                    a[r][k] = &a[r][k] - sub;
                }
            }
        }
    }
    let mut c: Vec<BigRational> = a.into_iter().map(|row| row[m].clone()).collect();
    c.push(BigRational::one());
    debug_assert!(c.iter().any(|v| v.is_positive() || v.is_negative()));
    c
}
