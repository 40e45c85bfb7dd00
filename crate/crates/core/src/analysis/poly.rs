//! Matrix polynomials `S_j(s)` built from the plant's linear terms, and the
//! derived `α_j`, `β_j` and their kernel-weighted sums `A_j`, `B_j`.

use nalgebra::DMatrix;

/// Polynomial with `n×n` coefficients, ascending powers.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPolynomial {
    pub n: usize,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl MatrixPolynomial {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            coeffs: Vec::new(),
        }
    }

    /// Degree, or `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn eval(&self, s: f64) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.n, self.n);
        for c in self.coeffs.iter().rev() {
            acc = acc * s + c;
        }
        acc
    }
}

/// `S_0, …, S_{r-1}` with `S_{r-2} = -R_{r-1}`,
/// `S_{j-1}(s) = -R_j - s S_j(s)` and `S_{r-1} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPolynomialFamily {
    pub r: usize,
    pub n: usize,
    pub s: Vec<MatrixPolynomial>,
}

impl MatrixPolynomialFamily {
    pub fn get(&self, j: usize) -> &MatrixPolynomial {
        &self.s[j]
    }

    /// `α_j(s) = (-s)^{r-1-j} I + S_j(s)` for `0 ≤ j ≤ r-1`.
    pub fn alpha(&self, j: usize, s: f64) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n) * (-s).powi((self.r - 1 - j) as i32) + self.s[j].eval(s)
    }

    /// `β_j(s) = (-1)^{r-j} ∏_{k=1}^{r-1-j} (s-k)` for `1 ≤ j ≤ r-1`.
    pub fn beta(&self, j: usize, s: f64) -> f64 {
        beta(self.r, j, s)
    }

    /// `Σ_i c_i α_j(i)` over nodes `i = 1..=r-1`.
    pub fn weighted_alpha(&self, c: &[f64], j: usize) -> DMatrix<f64> {
        c.iter()
            .enumerate()
            .fold(DMatrix::zeros(self.n, self.n), |acc, (idx, ci)| {
                acc + self.alpha(j, (idx + 1) as f64) * *ci
            })
    }

    /// `Σ_i |c_i| ‖α_j(i)‖`, the magnitude scale of [`Self::weighted_alpha`].
    pub fn weighted_alpha_scale(&self, c: &[f64], j: usize) -> f64 {
        c.iter()
            .enumerate()
            .map(|(idx, ci)| ci.abs() * self.alpha(j, (idx + 1) as f64).norm())
            .sum()
    }

    /// `Σ_i c_i β_j(i)`.
    pub fn weighted_beta(&self, c: &[f64], j: usize) -> f64 {
        c.iter()
            .enumerate()
            .map(|(idx, ci)| ci * self.beta(j, (idx + 1) as f64))
            .sum()
    }

    pub fn weighted_beta_scale(&self, c: &[f64], j: usize) -> f64 {
        c.iter()
            .enumerate()
            .map(|(idx, ci)| (ci * self.beta(j, (idx + 1) as f64)).abs())
            .sum()
    }
}

pub fn beta(r: usize, j: usize, s: f64) -> f64 {
    let sign = if (r - j).is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * (1..r - j).map(|k| s - k as f64).product::<f64>()
}

/// Unrolls the recurrence for `S_j` from `R_1, …, R_{r-1}`.
pub fn s_polynomials(r_mats: &[DMatrix<f64>]) -> MatrixPolynomialFamily {
    let r = r_mats.len() + 1;
    let n = r_mats.first().map_or(0, |m| m.nrows());
    let mut s = vec![MatrixPolynomial::zero(n); r];
    if r >= 2 {
        s[r - 2] = MatrixPolynomial {
            n,
            coeffs: vec![-&r_mats[r - 2]],
        };
        for j in (1..r - 1).rev() {
            // S_{j-1} = -R_j - s·S_j
            let mut coeffs = vec![-&r_mats[j - 1]];
            coeffs.extend(s[j].coeffs.iter().map(|c| -c));
            s[j - 1] = MatrixPolynomial { n, coeffs };
        }
    }
    MatrixPolynomialFamily { r, n, s }
}
