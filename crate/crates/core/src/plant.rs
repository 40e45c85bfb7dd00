//! The plant class
//!
//! ```text
//! y^(r)(t) = Σ_{i=1}^{r-1} R_i y^(i)(t) + f(T(y, ẏ, …, y^(r-1))(t)) + Γ u(t)
//! ```
//!
//! The state is the stacked derivative vector `x = (y, ẏ, …, y^(r-1))`.
//! Causal operators with memory carry their own internal state `η`, which
//! is integrated together with the plant; memoryless operators have `m = 0`.
//!
//! Custom plants are built by implementing [`OperatorDynamics`] (or wrapping
//! closures with [`ClosureOperator`]) and pairing it with a [`Nonlinearity`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::PlantError;

/// Borrowed view of the derivative stack `(y, ẏ, …, y^(r-1))`.
#[derive(Clone, Copy, Debug)]
pub struct YStack<'a> {
    data: &'a [f64],
    n: usize,
}

impl<'a> YStack<'a> {
    pub fn new(data: &'a [f64], n: usize) -> Self {
        debug_assert!(n > 0 && data.len().is_multiple_of(n));
        Self { data, n }
    }

    /// `y^(j)`
    pub fn derivative(&self, j: usize) -> &'a [f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn order(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

/// Internal dynamics and readout of a causal operator.
///
/// Causality holds by construction: the readout sees only the current
/// internal state and the current derivative stack, and the internal state
/// is driven by the past. Implementations are expected (not checked) to be
/// locally Lipschitz and bounded-input bounded-output in the sense that a
/// bounded `y` alone keeps the readout bounded.
pub trait OperatorDynamics: Send + Sync {
    fn readout(&self, t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64>;

    fn state_rhs(&self, t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64>;
}

/// Adapter turning a pair of closures into an operator.
pub struct ClosureOperator<R, S> {
    pub readout: R,
    pub state_rhs: S,
}

impl<R, S> OperatorDynamics for ClosureOperator<R, S>
where
    R: Fn(f64, &[f64], YStack<'_>) -> Vec<f64> + Send + Sync,
    S: Fn(f64, &[f64], YStack<'_>) -> Vec<f64> + Send + Sync,
{
    fn readout(&self, t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64> {
        (self.readout)(t, eta, stack)
    }

    fn state_rhs(&self, t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64> {
        (self.state_rhs)(t, eta, stack)
    }
}

#[derive(Clone)]
pub struct OperatorSpec {
    pub name: String,
    /// Readout dimension `q`.
    pub q: usize,
    /// Initial internal state; its length is the internal dimension `m`.
    pub eta0: Vec<f64>,
    pub dynamics: Arc<dyn OperatorDynamics>,
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSpec")
            .field("name", &self.name)
            .field("q", &self.q)
            .field("eta0", &self.eta0)
            .finish_non_exhaustive()
    }
}

impl OperatorSpec {
    pub fn new(
        name: impl Into<String>,
        q: usize,
        eta0: Vec<f64>,
        dynamics: impl OperatorDynamics + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            q,
            eta0,
            dynamics: Arc::new(dynamics),
        }
    }

    pub fn m(&self) -> usize {
        self.eta0.len()
    }

    /// Memoryless operator reading out `y` itself (`q = n`).
    pub fn identity(n: usize) -> Self {
        Self::new(
            "identity",
            n,
            Vec::new(),
            ClosureOperator {
                readout: |_t: f64, _eta: &[f64], s: YStack<'_>| s.derivative(0).to_vec(),
                state_rhs: |_t: f64, _eta: &[f64], _s: YStack<'_>| Vec::new(),
            },
        )
    }

    /// Single channel `w = η` with `η̇ = -η + ‖y‖² tanh(‖ÿ‖²)`, i.e. the
    /// convolution of the memoryless term with the kernel `e^{-(t-s)}`.
    pub fn exponential_kernel(eta0: f64) -> Self {
        Self::new("exponential_kernel", 1, vec![eta0], ExponentialKernel)
    }

    /// Evaluates the readout `w` and the internal-state derivative `η̇`.
    pub fn eval(
        &self,
        t: f64,
        eta: &[f64],
        stack: YStack<'_>,
    ) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        let w = self.dynamics.readout(t, eta, stack);
        let deta = self.dynamics.state_rhs(t, eta, stack);
        if w.len() != self.q {
            return Err(PlantError::Dimension {
                what: format!("readout of operator `{}`", self.name),
                expected: self.q,
                got: w.len(),
            });
        }
        if deta.len() != self.m() {
            return Err(PlantError::Dimension {
                what: format!("internal state of operator `{}`", self.name),
                expected: self.m(),
                got: deta.len(),
            });
        }
        if w.iter().chain(&deta).any(|v| !v.is_finite()) {
            return Err(PlantError::NonFiniteOperator {
                name: self.name.clone(),
                t,
            });
        }
        Ok((DVector::from_vec(w), DVector::from_vec(deta)))
    }
}

struct ExponentialKernel;

fn kernel_drive(stack: YStack<'_>) -> f64 {
    let y2: f64 = stack.derivative(0).iter().map(|v| v * v).sum();
    let acc2: f64 = if stack.order() > 2 {
        stack.derivative(2).iter().map(|v| v * v).sum()
    } else {
        0.0
    };
    y2 * acc2.tanh()
}

impl OperatorDynamics for ExponentialKernel {
    fn readout(&self, _t: f64, eta: &[f64], _stack: YStack<'_>) -> Vec<f64> {
        vec![eta[0]]
    }

    fn state_rhs(&self, _t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64> {
        vec![-eta[0] + kernel_drive(stack)]
    }
}

/// Static nonlinearity `f: R^q → R^n`.
#[derive(Clone)]
pub struct Nonlinearity {
    pub name: String,
    pub q: usize,
    pub n: usize,
    pub map: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("name", &self.name)
            .field("q", &self.q)
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

impl Nonlinearity {
    pub fn new(
        name: impl Into<String>,
        q: usize,
        n: usize,
        map: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            q,
            n,
            map: Arc::new(map),
        }
    }

    pub fn zero(q: usize, n: usize) -> Self {
        Self::new("zero", q, n, move |_| vec![0.0; n])
    }

    pub fn linear(name: impl Into<String>, gain: DMatrix<f64>) -> Self {
        let (n, q) = gain.shape();
        Self::new(name, q, n, move |w| {
            (&gain * DVector::from_column_slice(w)).as_slice().to_vec()
        })
    }

    pub fn eval(&self, t: f64, w: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        let out = (self.map)(w.as_slice());
        if out.len() != self.n {
            return Err(PlantError::Dimension {
                what: format!("output of nonlinearity `{}`", self.name),
                expected: self.n,
                got: out.len(),
            });
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::NonFiniteNonlinearity {
                name: self.name.clone(),
                t,
            });
        }
        Ok(DVector::from_vec(out))
    }
}

/// How the integral channel of the built-in nonlinear example is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntegralArg {
    /// Integrand evaluated at the integration variable: genuine memory
    /// `η̇ = -η + ‖y‖² tanh(‖ÿ‖²)`.
    #[default]
    S,
    /// Integrand evaluated at the upper limit, which collapses the integral
    /// to `(1 - e^{-t}) ‖y(t)‖² tanh(‖ÿ(t)‖²)`.
    T,
}

impl fmt::Display for IntegralArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegralArg::S => "s",
            IntegralArg::T => "t",
        })
    }
}

/// History of the output derivatives on `[0, t0]`, used to seed operator
/// memory when `t0 > 0`. Returns the stacked vector `(y, …, y^(r-1))(s)`.
pub type History = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub r: usize,
    pub n: usize,
    pub t0: f64,
    /// `R_1, …, R_{r-1}`.
    pub r_mats: Vec<DMatrix<f64>>,
    pub gamma: DMatrix<f64>,
    pub f: Nonlinearity,
    pub operator: OperatorSpec,
    /// `(y^0, ẏ^0, …)(t0)` stacked, length `r·n`.
    pub x0: Vec<f64>,
    pub history: Option<History>,
    pub integral_arg: Option<IntegralArg>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("r", &self.r)
            .field("n", &self.n)
            .field("t0", &self.t0)
            .field("r_mats", &self.r_mats)
            .field("gamma", &self.gamma)
            .field("f", &self.f)
            .field("operator", &self.operator)
            .field("x0", &self.x0)
            .field("integral_arg", &self.integral_arg)
            .finish_non_exhaustive()
    }
}

/// Smallest eigenvalue of `(Γ + Γᵀ)/2`; errors unless it is positive.
pub fn check_gain(gamma: &DMatrix<f64>) -> Result<f64, PlantError> {
    if !gamma.is_square() {
        return Err(PlantError::Dimension {
            what: "input gain (rows vs columns)".into(),
            expected: gamma.nrows(),
            got: gamma.ncols(),
        });
    }
    let lambda_min = symmetric_part_min_eig(gamma);
    let floor = 64.0 * f64::EPSILON * gamma.norm().max(1.0);
    if !(lambda_min > floor) {
        return Err(PlantError::GainNotPositive { lambda_min });
    }
    Ok(lambda_min)
}

pub fn symmetric_part_min_eig(gamma: &DMatrix<f64>) -> f64 {
    let sym = (gamma + gamma.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// `max |λ|` over the (possibly complex) eigenvalues of `Γ`.
pub fn spectral_radius(gamma: &DMatrix<f64>) -> f64 {
    gamma
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl SystemSpec {
    /// Assembles and validates a plant. `x0` is the stacked initial
    /// derivative vector at `t0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        t0: f64,
        r_mats: Vec<DMatrix<f64>>,
        gamma: DMatrix<f64>,
        f: Nonlinearity,
        operator: OperatorSpec,
        x0: Vec<f64>,
    ) -> Result<Self, PlantError> {
        let n = gamma.nrows();
        let r = r_mats.len() + 1;
        let sys = Self {
            name: name.into(),
            r,
            n,
            t0,
            r_mats,
            gamma,
            f,
            operator,
            x0,
            history: None,
            integral_arg: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_history(mut self, history: History) -> Self {
        self.history = Some(history);
        self
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if self.r < 2 {
            return Err(PlantError::Order(self.r));
        }
        if self.n == 0 {
            return Err(PlantError::Invalid("output dimension must be positive".into()));
        }
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return Err(PlantError::Invalid(format!(
                "start time t0 = {} must be finite and non-negative",
                self.t0
            )));
        }
        check_gain(&self.gamma)?;
        for (k, m) in self.r_mats.iter().enumerate() {
            if m.shape() != (self.n, self.n) {
                return Err(PlantError::Dimension {
                    what: format!("R_{} (rows*cols)", k + 1),
                    expected: self.n * self.n,
                    got: m.nrows() * m.ncols(),
                });
            }
        }
        if self.f.n != self.n {
            return Err(PlantError::Dimension {
                what: format!("output of nonlinearity `{}`", self.f.name),
                expected: self.n,
                got: self.f.n,
            });
        }
        if self.f.q != self.operator.q {
            return Err(PlantError::Dimension {
                what: format!(
                    "input of nonlinearity `{}` vs readout of operator `{}`",
                    self.f.name, self.operator.name
                ),
                expected: self.operator.q,
                got: self.f.q,
            });
        }
        if self.x0.len() != self.r * self.n {
            return Err(PlantError::Dimension {
                what: "initial derivative stack".into(),
                expected: self.r * self.n,
                got: self.x0.len(),
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::Invalid("initial values must be finite".into()));
        }
        if self.t0 > 0.0 && self.operator.m() > 0 && self.history.is_none() {
            return Err(PlantError::Invalid(
                "t0 > 0 with an operator that has memory requires an initial history".into(),
            ));
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.operator.q
    }

    pub fn m(&self) -> usize {
        self.operator.m()
    }

    /// `f(T(·)(t))` together with `η̇`.
    pub fn drift(
        &self,
        t: f64,
        x: &[f64],
        eta: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        let stack = YStack::new(x, self.n);
        let (w, deta) = self.operator.eval(t, eta, stack)?;
        Ok((self.f.eval(t, &w)?, deta))
    }

    /// Right-hand side of the plant: returns `(ẋ, η̇)`.
    pub fn rhs(
        &self,
        t: f64,
        x: &[f64],
        u: &DVector<f64>,
        eta: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        let (n, r) = (self.n, self.r);
        if x.len() != r * n || u.len() != n || eta.len() != self.m() {
            return Err(PlantError::Dimension {
                what: "plant state (x, u, η)".into(),
                expected: r * n + n + self.m(),
                got: x.len() + u.len() + eta.len(),
            });
        }
        let (fw, deta) = self.drift(t, x, eta)?;
        let mut dx = DVector::zeros(r * n);
        dx.as_mut_slice()[..(r - 1) * n].copy_from_slice(&x[n..]);
        let mut top = fw + &self.gamma * u;
        for (i, rm) in self.r_mats.iter().enumerate() {
            // R_{i+1} y^(i+1)
            let xi = DVector::from_column_slice(&x[(i + 1) * n..(i + 2) * n]);
            top += rm * xi;
        }
        dx.rows_mut((r - 1) * n, n).copy_from(&top);
        Ok((dx, deta))
    }

    /// Operator memory at `t0`: `eta0` when `t0 = 0`, otherwise the internal
    /// state integrated over `[0, t0]` along the supplied history.
    pub fn initial_operator_state(&self) -> Result<Vec<f64>, PlantError> {
        if self.t0 == 0.0 || self.m() == 0 {
            return Ok(self.operator.eta0.clone());
        }
        let history = self
            .history
            .as_ref()
            .ok_or_else(|| PlantError::Invalid("missing initial history".into()))?;
        crate::integrator::integrate_unguarded(
            |s, eta: &DVector<f64>| {
                let stack = history(s);
                let (_, deta) =
                    self.operator
                        .eval(s, eta.as_slice(), YStack::new(&stack, self.n))?;
                Ok(deta)
            },
            0.0,
            self.t0,
            DVector::from_column_slice(&self.operator.eta0),
        )
        .map(|v| v.as_slice().to_vec())
    }
}

/// The two-channel, third-order nonlinear example with a bounded
/// disturbance, a memoryless nonlinear channel and an integral channel.
pub fn paper_nonlinear(integral_arg: IntegralArg) -> SystemSpec {
    let r1 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
    let r2 = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
    let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.2, 2.0]);
    paper_nonlinear_with(integral_arg, vec![r1, r2], gamma, vec![0.0; 6])
        .expect("built-in plant is valid")
}

/// The nonlinear example with user-supplied linear part and initial stack.
pub fn paper_nonlinear_with(
    integral_arg: IntegralArg,
    r_mats: Vec<DMatrix<f64>>,
    gamma: DMatrix<f64>,
    x0: Vec<f64>,
) -> Result<SystemSpec, PlantError> {
    if r_mats.len() != 2 {
        return Err(PlantError::Dimension {
            what: "number of R matrices for the third-order example".into(),
            expected: 2,
            got: r_mats.len(),
        });
    }
    let operator = paper_operator(integral_arg);
    let f = Nonlinearity::new("paper_f", 5, 2, |z| {
        vec![z[0] + z[2] + z[4].powi(3), z[1] + z[3] - z[4]]
    });
    let mut sys = SystemSpec::new("paper_nonlinear", 0.0, r_mats, gamma, f, operator, x0)?;
    sys.integral_arg = Some(integral_arg);
    Ok(sys)
}

/// Disturbance `d(t)` of the nonlinear example.
pub fn paper_disturbance(t: f64) -> [f64; 2] {
    [
        0.2 * (5.0 * t).sin() + 0.2 * (7.0 * t).cos(),
        0.25 * (9.0 * t).sin() + 0.2 * (3.0 * t).cos(),
    ]
}

struct PaperOperator {
    integral_arg: IntegralArg,
}

impl OperatorDynamics for PaperOperator {
    fn readout(&self, t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64> {
        let d = paper_disturbance(t);
        let y = stack.derivative(0);
        let dy = stack.derivative(1);
        let integral = match self.integral_arg {
            IntegralArg::S => eta[0],
            IntegralArg::T => (1.0 - (-t).exp()) * kernel_drive(stack),
        };
        vec![
            d[0],
            d[1],
            y[0] * y[0] + (y[0] - dy[0].abs()).exp(),
            y[1].powi(3) - dy[1].sin(),
            integral,
        ]
    }

    fn state_rhs(&self, _t: f64, eta: &[f64], stack: YStack<'_>) -> Vec<f64> {
        match self.integral_arg {
            IntegralArg::S => vec![-eta[0] + kernel_drive(stack)],
            IntegralArg::T => Vec::new(),
        }
    }
}

pub fn paper_operator(integral_arg: IntegralArg) -> OperatorSpec {
    let eta0 = match integral_arg {
        IntegralArg::S => vec![0.0],
        IntegralArg::T => Vec::new(),
    };
    OperatorSpec::new(
        format!("paper_operator[integral_arg={integral_arg}]"),
        5,
        eta0,
        PaperOperator { integral_arg },
    )
}

/// `y^(r) = Γu`: no linear terms, `f ≡ 0`.
pub fn chain_integrator(r: usize, gamma: DMatrix<f64>) -> Result<SystemSpec, PlantError> {
    if r < 2 {
        return Err(PlantError::Order(r));
    }
    let n = gamma.nrows();
    SystemSpec::new(
        "chain_integrator",
        0.0,
        vec![DMatrix::zeros(n, n); r - 1],
        gamma,
        Nonlinearity::zero(n, n),
        OperatorSpec::identity(n),
        vec![0.0; r * n],
    )
}

/// Linear plant with randomly perturbed, stable coefficients:
/// `R_i = -C(r, i) I + P_i`, `f(w) = (-I + P_0) w` with `T` the identity
/// on `y`. The perturbations `P_i` have entries in `[-0.05, 0.05]`, drawn
/// from a seeded generator.
pub fn linear_test(
    r: usize,
    gamma: DMatrix<f64>,
    seed: u64,
) -> Result<SystemSpec, PlantError> {
    if r < 2 {
        return Err(PlantError::Order(r));
    }
    let n = gamma.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturb = || DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.05..=0.05));
    let f_gain = -DMatrix::identity(n, n) + perturb();
    let r_mats = (1..r)
        .map(|i| -(binomial(r, i) as f64) * DMatrix::identity(n, n) + perturb())
        .collect();
    SystemSpec::new(
        "linear_test",
        0.0,
        r_mats,
        gamma,
        Nonlinearity::linear("linear_feedback", f_gain),
        OperatorSpec::identity(n),
        vec![0.0; r * n],
    )
}

fn binomial(n: usize, k: usize) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}
