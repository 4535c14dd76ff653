//! Linear equality constrained convex problems and their saddle points.
//!
//! The problem solved throughout the crate is
//!
//! ```text
//!     minimize    f(x)
//!     subject to  A x = b,          A ∈ R^{m×n}, b ∈ R^m,
//! ```
//!
//! with f convex and continuously differentiable. Two merit functions drive
//! every diagnostic:
//!
//! ```text
//!     L(x, λ)  = f(x) + <λ, Ax − b>                  (Lagrangian)
//!     Lσ(x, λ) = L(x, λ) + (σ/2) ||Ax − b||²         (augmented Lagrangian)
//! ```
//!
//! A pair (x*, λ*) is a saddle point of L exactly when it solves the KKT
//! system ∇f(x*) + Aᵀλ* = 0, Ax* = b. For quadratic objectives the KKT
//! system is linear and [`ConstrainedProblem::solve_saddle`] produces the
//! exact reference pair used by the energy and rate diagnostics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// Default tolerance on KKT residuals of a reference saddle point.
pub const TOL_KKT: f64 = 1e-8;
/// Tolerance on the smallest Hessian eigenvalue when checking convexity.
pub const TOL_PSD: f64 = 1e-10;

/// Smooth objective oracle: value and gradient.
pub trait ObjectiveOracle: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Convex quadratic f(x) = ½ <x, Qx> + <c, x> with Q symmetric PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
}

impl QuadraticObjective {
    /// Validates symmetry (to machine precision) and positive
    /// semidefiniteness (smallest eigenvalue ≥ −[`TOL_PSD`]).
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(FlowError::Dimension {
                what: "quadratic hessian",
                expected: n,
                found: hessian.nrows().max(hessian.ncols()),
            });
        }
        let scale = hessian.amax().max(1.0);
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(FlowError::InvalidArgument(format!(
                "hessian is not symmetric: max |Q - Q^T| = {asym:.3e}"
            )));
        }
        let min_eig = hessian
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -TOL_PSD {
            return Err(FlowError::InvalidArgument(format!(
                "hessian is not positive semidefinite: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { hessian, linear })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }
}

impl ObjectiveOracle for QuadraticObjective {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x + &self.linear
    }
}

/// Objective of a [`ConstrainedProblem`]: the quadratic test family (exact
/// saddle oracle available) or an arbitrary smooth convex oracle.
#[derive(Clone)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Custom(Arc<dyn ObjectiveOracle>),
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Quadratic(q) => f.debug_tuple("Quadratic").field(q).finish(),
            Objective::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Objective {
    fn oracle(&self) -> &dyn ObjectiveOracle {
        match self {
            Objective::Quadratic(q) => q,
            Objective::Custom(o) => o.as_ref(),
        }
    }
}

/// A linear equality constrained convex problem with augmented-Lagrangian
/// penalty σ > 0. Immutable after construction; all evaluations are pure.
#[derive(Debug, Clone)]
pub struct ConstrainedProblem {
    objective: Objective,
    constraint_matrix: DMatrix<f64>,
    constraint_rhs: DVector<f64>,
    penalty: f64,
}

impl ConstrainedProblem {
    pub fn new(
        objective: Objective,
        constraint_matrix: DMatrix<f64>,
        constraint_rhs: DVector<f64>,
        penalty: f64,
    ) -> Result<Self> {
        if !(penalty > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "penalty must be strictly positive, got {penalty}"
            )));
        }
        if constraint_matrix.nrows() != constraint_rhs.len() {
            return Err(FlowError::Dimension {
                what: "constraint rhs",
                expected: constraint_matrix.nrows(),
                found: constraint_rhs.len(),
            });
        }
        if let Objective::Quadratic(q) = &objective {
            if q.linear.len() != constraint_matrix.ncols() {
                return Err(FlowError::Dimension {
                    what: "objective dimension",
                    expected: constraint_matrix.ncols(),
                    found: q.linear.len(),
                });
            }
        }
        Ok(Self {
            objective,
            constraint_matrix,
            constraint_rhs,
            penalty,
        })
    }

    /// Convenience constructor for the quadratic test family.
    pub fn quadratic(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraint_matrix: DMatrix<f64>,
        constraint_rhs: DVector<f64>,
        penalty: f64,
    ) -> Result<Self> {
        let q = QuadraticObjective::new(hessian, linear)?;
        Self::new(
            Objective::Quadratic(q),
            constraint_matrix,
            constraint_rhs,
            penalty,
        )
    }

    pub fn dim_primal(&self) -> usize {
        self.constraint_matrix.ncols()
    }

    pub fn dim_dual(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.constraint_matrix
    }

    pub fn constraint_rhs(&self) -> &DVector<f64> {
        &self.constraint_rhs
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// Returns the quadratic objective data, or an error for custom oracles.
    pub fn quadratic_objective(&self) -> Result<&QuadraticObjective> {
        match &self.objective {
            Objective::Quadratic(q) => Ok(q),
            Objective::Custom(_) => Err(FlowError::InvalidArgument(
                "operation requires a quadratic objective".into(),
            )),
        }
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_primal(x)?;
        Ok(self.objective.oracle().value(x))
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_primal(x)?;
        Ok(self.objective.oracle().gradient(x))
    }

    /// Writes ∇f(x) into `out`; allocation-free for the quadratic family.
    pub(crate) fn gradient_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        self.check_primal(x)?;
        match &self.objective {
            Objective::Quadratic(q) => {
                out.copy_from(&q.linear);
                out.gemv(1.0, &q.hessian, x, 1.0);
            }
            Objective::Custom(o) => out.copy_from(&o.gradient(x)),
        }
        Ok(())
    }

    /// f(x) computed as <x, ½Qx + c> through `scratch` for the quadratic
    /// family; custom oracles are called directly.
    pub(crate) fn objective_value_scratch(
        &self,
        x: &DVector<f64>,
        scratch: &mut DVector<f64>,
    ) -> f64 {
        match &self.objective {
            Objective::Quadratic(q) => {
                scratch.copy_from(&q.linear);
                scratch.gemv(0.5, &q.hessian, x, 1.0);
                scratch.dot(x)
            }
            Objective::Custom(o) => o.value(x),
        }
    }

    /// Constraint residual Ax − b.
    pub fn constraint_residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_primal(x)?;
        Ok(&self.constraint_matrix * x - &self.constraint_rhs)
    }

    /// L(x, λ) = f(x) + <λ, Ax − b>.
    pub fn lagrangian(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
        self.check_dual(lambda)?;
        let r = self.constraint_residual(x)?;
        Ok(self.objective.oracle().value(x) + lambda.dot(&r))
    }

    /// Lσ(x, λ) = L(x, λ) + (σ/2) ||Ax − b||².
    pub fn aug_lagrangian(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
        self.check_dual(lambda)?;
        let r = self.constraint_residual(x)?;
        Ok(self.objective.oracle().value(x)
            + lambda.dot(&r)
            + 0.5 * self.penalty * r.norm_squared())
    }

    /// KKT residual pair (||∇f(x) + Aᵀλ||, ||Ax − b||); both vanish exactly
    /// at a saddle point.
    pub fn kkt_residual(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<(f64, f64)> {
        self.check_dual(lambda)?;
        let grad = self.gradient(x)?;
        let stationarity = (grad + self.constraint_matrix.transpose() * lambda).norm();
        let feasibility = self.constraint_residual(x)?.norm();
        Ok((stationarity, feasibility))
    }

    /// Solves the KKT system
    ///
    /// ```text
    ///     [ Q  Aᵀ ] [x*]   [−c]
    ///     [ A  0  ] [λ*] = [ b]
    /// ```
    ///
    /// by dense LU with full pivoting. Requires a quadratic objective and a
    /// nonsingular KKT matrix (sufficient: A full row rank and Q positive
    /// definite on ker A); reports the numerical rank otherwise.
    pub fn solve_saddle(&self) -> Result<SaddlePoint> {
        let quad = self.quadratic_objective()?;
        let n = self.dim_primal();
        let m = self.dim_dual();
        let size = n + m;

        let mut kkt = DMatrix::<f64>::zeros(size, size);
        kkt.view_mut((0, 0), (n, n)).copy_from(&quad.hessian);
        kkt.view_mut((0, n), (n, m))
            .copy_from(&self.constraint_matrix.transpose());
        kkt.view_mut((n, 0), (m, n))
            .copy_from(&self.constraint_matrix);

        let mut rhs = DVector::<f64>::zeros(size);
        rhs.rows_mut(0, n).copy_from(&(-&quad.linear));
        rhs.rows_mut(n, m).copy_from(&self.constraint_rhs);

        let scale = kkt.amax().max(1.0);
        let lu = kkt.clone().full_piv_lu();
        let solution = match lu.solve(&rhs).filter(|_| lu.is_invertible()) {
            Some(solution) => solution,
            None => {
                let rank = kkt.rank(1e-12 * scale);
                return Err(FlowError::SingularKkt { rank, size });
            }
        };

        let saddle = SaddlePoint {
            primal_star: solution.rows(0, n).into_owned(),
            dual_star: solution.rows(n, m).into_owned(),
        };
        saddle.validate(self, TOL_KKT)?;
        Ok(saddle)
    }

    fn check_primal(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim_primal() {
            return Err(FlowError::Dimension {
                what: "primal vector",
                expected: self.dim_primal(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn check_dual(&self, lambda: &DVector<f64>) -> Result<()> {
        if lambda.len() != self.dim_dual() {
            return Err(FlowError::Dimension {
                what: "dual vector",
                expected: self.dim_dual(),
                found: lambda.len(),
            });
        }
        Ok(())
    }
}

/// Reference saddle point (x*, λ*) of the Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub primal_star: DVector<f64>,
    pub dual_star: DVector<f64>,
}

impl SaddlePoint {
    /// Checks the KKT residuals against `tol`.
    pub fn validate(&self, problem: &ConstrainedProblem, tol: f64) -> Result<()> {
        let (stationarity, feasibility) =
            problem.kkt_residual(&self.primal_star, &self.dual_star)?;
        if stationarity > tol || feasibility > tol {
            return Err(FlowError::InvalidArgument(format!(
                "saddle point residuals exceed tolerance {tol:.1e}: stationarity {stationarity:.3e}, feasibility {feasibility:.3e}"
            )));
        }
        Ok(())
    }
}

/// The 1-dimensional builtin: f(x) = ½x², A = [1], b = [1], so x* = 1 and
/// λ* = −1.
pub fn quad1d(penalty: f64) -> Result<ConstrainedProblem> {
    ConstrainedProblem::quadratic(
        DMatrix::from_element(1, 1, 1.0),
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
        penalty,
    )
}

/// Seeded random quadratic instance: Q = BBᵀ/n + ½I (positive definite),
/// c and A standard normal, b = A x_feas for a random feasible point. For
/// m ≤ n the constraint matrix has full row rank almost surely; the KKT
/// solver reports the degenerate cases.
pub fn random_quad(n: usize, m: usize, seed: u64, penalty: f64) -> Result<ConstrainedProblem> {
    if n == 0 || m == 0 || m > n {
        return Err(FlowError::InvalidArgument(format!(
            "random_quad requires 1 <= m <= n, got n = {n}, m = {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |rows: usize, cols: usize| {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    };
    let b_factor = normal(n, n);
    let hessian = (&b_factor * b_factor.transpose()) / n as f64 + DMatrix::identity(n, n) * 0.5;
    let linear = normal(n, 1).column(0).into_owned();
    let constraint_matrix = normal(m, n);
    let x_feas = normal(n, 1).column(0).into_owned();
    let constraint_rhs = &constraint_matrix * x_feas;
    ConstrainedProblem::quadratic(hessian, linear, constraint_matrix, constraint_rhs, penalty)
}

/// Flat text-document form of a quadratic problem instance: Q and A stored
/// row-major, matching the config file schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemDocument {
    pub dim_primal: usize,
    pub dim_dual: usize,
    /// Hessian Q, row-major, length dim_primal².
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    /// Constraint matrix A, row-major, length dim_dual · dim_primal.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: f64,
}

impl ProblemDocument {
    pub fn to_problem(&self) -> Result<ConstrainedProblem> {
        let n = self.dim_primal;
        let m = self.dim_dual;
        if self.q.len() != n * n {
            return Err(FlowError::Dimension {
                what: "document field q",
                expected: n * n,
                found: self.q.len(),
            });
        }
        if self.c.len() != n {
            return Err(FlowError::Dimension {
                what: "document field c",
                expected: n,
                found: self.c.len(),
            });
        }
        if self.a.len() != m * n {
            return Err(FlowError::Dimension {
                what: "document field a",
                expected: m * n,
                found: self.a.len(),
            });
        }
        if self.b.len() != m {
            return Err(FlowError::Dimension {
                what: "document field b",
                expected: m,
                found: self.b.len(),
            });
        }
        ConstrainedProblem::quadratic(
            DMatrix::from_row_slice(n, n, &self.q),
            DVector::from_column_slice(&self.c),
            DMatrix::from_row_slice(m, n, &self.a),
            DVector::from_column_slice(&self.b),
            self.sigma,
        )
    }

    pub fn from_problem(problem: &ConstrainedProblem) -> Result<Self> {
        let quad = problem.quadratic_objective()?;
        Ok(Self {
            dim_primal: problem.dim_primal(),
            dim_dual: problem.dim_dual(),
            q: quad
                .hessian
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
            c: quad.linear.iter().copied().collect(),
            a: problem
                .constraint_matrix
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
            b: problem.constraint_rhs.iter().copied().collect(),
            sigma: problem.penalty,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlowError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlowError::Config(e.to_string()))
    }
}
