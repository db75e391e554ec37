//! The testing problem and its derived linear-algebra objects.
//!
//! [`TestingProblem`] packages the design matrix `X` (n x k, full column
//! rank), the restriction `(R, r)` with `R` of full row rank `q`, and every
//! quantity the rest of the crate needs: orthonormal bases and projectors
//! for `span(X)` and the restricted mean space, leverages, a null-mean
//! point `mu0`, and the index sets `I0`/`I1` of standard basis vectors
//! lying inside / outside the restricted mean space. Everything is computed
//! once at construction and immutable afterwards, so a problem can be
//! shared freely across worker threads.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, RANK_TOL};

/// Derived geometry of a testing problem.
///
/// All projectors are built from orthonormal bases obtained by QR-type
/// factorizations; no explicit inverse of `X'X` is ever formed. Leverages
/// close to one are exactly the regime this crate cares about, so
/// conditioning matters here.
#[derive(Debug, Clone)]
pub struct DerivedGeometry {
    /// Diagonal of the hat matrix `X (X'X)^{-1} X'`.
    pub hat_diag: DVector<f64>,
    /// Orthogonal projector onto the orthogonal complement of `span(X)`.
    pub proj_resid: DMatrix<f64>,
    /// Orthonormal basis of the restricted mean space
    /// `M0lin = {X b : R b = 0}` (n x (k-q); zero columns when k = q).
    pub m0lin_basis: DMatrix<f64>,
    /// Orthogonal projector onto the orthogonal complement of `M0lin`.
    pub proj_m0lin_perp: DMatrix<f64>,
    /// Diagonal of the projector onto `M0lin` (restricted leverages).
    pub restricted_hat_diag: DVector<f64>,
    /// One point of the null mean set: `X b0` with `b0` the minimum-norm
    /// solution of `R b0 = r`. Downstream quantities are invariant to this
    /// choice.
    pub mu0: DVector<f64>,
    /// `X (X'X)^{-1} R'` as a vector; present only when q = 1.
    pub v: Option<DVector<f64>>,
    /// `X (X'X)^{-1} R'` (n x q).
    pub v_mat: DMatrix<f64>,
    /// Orthonormal basis of `span(X)` (n x k).
    pub x_basis: DMatrix<f64>,
    /// Upper-triangular factor of the thin QR of `X` (k x k), kept for
    /// least-squares solves.
    pub x_r_factor: DMatrix<f64>,
}

/// Indices of standard basis vectors inside (`i0`) and outside (`i1`) the
/// restricted mean space `M0lin`.
#[derive(Debug, Clone)]
pub struct IndexSets {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
}

/// An immutable testing problem: design, restriction, and caches.
#[derive(Debug, Clone)]
pub struct TestingProblem {
    x: DMatrix<f64>,
    r_mat: DMatrix<f64>,
    r_vec: DVector<f64>,
    n: usize,
    k: usize,
    q: usize,
    geometry: DerivedGeometry,
    index_sets: IndexSets,
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    m.clone().qr().q()
}

/// Orthonormal basis of the null space of `R` (k x (k-q)), via the
/// eigenvectors of `R'R` attached to (numerically) zero eigenvalues.
fn null_space_basis(r: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let k = r.ncols();
    if k == q {
        return DMatrix::zeros(k, 0);
    }
    let gram = r.transpose() * r;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let thresh = RANK_TOL * RANK_TOL * max_ev.max(f64::MIN_POSITIVE);
    let mut cols = Vec::new();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= thresh {
            cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    // Kernel dimension is exactly k - q once rank(R) = q has been verified.
    let basis = DMatrix::from_columns(&cols);
    orthonormal_basis(&basis)
}

impl TestingProblem {
    /// Build a testing problem from `X` (n x k), `R` (q x k), and `r`.
    ///
    /// Requires `1 <= q <= k < n`, `rank(X) = k`, and `rank(R) = q` (ranks
    /// judged at the crate-wide relative tolerance).
    pub fn build(x: DMatrix<f64>, r_mat: DMatrix<f64>, r_vec: DVector<f64>) -> Result<Self> {
        let (n, k) = (x.nrows(), x.ncols());
        let q = r_mat.nrows();
        if r_mat.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "R has {} columns but X has {} columns",
                r_mat.ncols(),
                k
            )));
        }
        if r_vec.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "r has length {} but R has {} rows",
                r_vec.len(),
                q
            )));
        }
        if k == 0 || q == 0 {
            return Err(Error::InvalidInput("k and q must be positive".into()));
        }
        if !(k < n) {
            return Err(Error::InvalidInput(format!(
                "need k < n, got k = {k}, n = {n}"
            )));
        }
        if q > k {
            return Err(Error::InvalidInput(format!(
                "need q <= k, got q = {q}, k = {k}"
            )));
        }
        if x.iter().any(|v| !v.is_finite())
            || r_mat.iter().any(|v| !v.is_finite())
            || r_vec.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite entries in inputs".into()));
        }
        let rank_x = numerical_rank(&x);
        if rank_x < k {
            return Err(Error::RankDeficient {
                what: "design matrix X",
                rank: rank_x,
                expected: k,
            });
        }
        let rank_r = numerical_rank(&r_mat);
        if rank_r < q {
            return Err(Error::RankDeficient {
                what: "restriction matrix R",
                rank: rank_r,
                expected: q,
            });
        }

        let x_basis = orthonormal_basis(&x); // n x k
        let hat_diag = DVector::from_iterator(n, x_basis.row_iter().map(|row| row.norm_squared()));
        let proj_resid = DMatrix::identity(n, n) - &x_basis * x_basis.transpose();

        // M0lin = X * null(R), orthonormalized.
        let null_r = null_space_basis(&r_mat, q); // k x (k-q)
        let m0lin_basis = if null_r.ncols() == 0 {
            DMatrix::zeros(n, 0)
        } else {
            orthonormal_basis(&(&x * &null_r))
        };
        let proj_m0lin_perp = if m0lin_basis.ncols() == 0 {
            DMatrix::identity(n, n)
        } else {
            DMatrix::identity(n, n) - &m0lin_basis * m0lin_basis.transpose()
        };
        let restricted_hat_diag = DVector::from_iterator(
            n,
            m0lin_basis.row_iter().map(|row| row.norm_squared()),
        );

        // Minimum-norm solution of R b0 = r, mapped through X.
        let rrt = &r_mat * r_mat.transpose(); // q x q, positive definite
        let chol = rrt
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("R R' not positive definite".into()))?;
        let beta0 = r_mat.transpose() * chol.solve(&r_vec);
        let mu0 = &x * beta0;

        // v = X (X'X)^{-1} R' via the QR factors of X: solve R_x' t = R',
        // then v = Q t.
        let qr = x.clone().qr();
        let r_x = qr.r(); // k x k upper triangular
        let t = r_x
            .transpose()
            .solve_lower_triangular(&r_mat.transpose())
            .ok_or_else(|| Error::InvalidInput("triangular solve failed".into()))?;
        let t = r_x
            .solve_upper_triangular(&t)
            .ok_or_else(|| Error::InvalidInput("triangular solve failed".into()))?;
        let v_mat = &x * t; // n x q
        let v = if q == 1 {
            Some(v_mat.column(0).into_owned())
        } else {
            None
        };

        // Index sets by the rank-increase test against the M0lin basis:
        // e_i fails to increase rank exactly when its component off M0lin
        // vanishes.
        let mut i0 = Vec::new();
        let mut i1 = Vec::new();
        for i in 0..n {
            let off = proj_m0lin_perp.column(i).norm();
            if off <= RANK_TOL {
                i0.push(i);
            } else {
                i1.push(i);
            }
        }

        let geometry = DerivedGeometry {
            hat_diag,
            proj_resid,
            m0lin_basis,
            proj_m0lin_perp,
            restricted_hat_diag,
            mu0,
            v,
            v_mat,
            x_basis,
            x_r_factor: r_x,
        };
        let problem = TestingProblem {
            x,
            r_mat,
            r_vec,
            n,
            k,
            q,
            geometry,
            index_sets: IndexSets { i0, i1 },
        };
        problem.validate_geometry()?;
        Ok(problem)
    }

    /// Cheap internal consistency checks on the derived projectors.
    fn validate_geometry(&self) -> Result<()> {
        let g = &self.geometry;
        let tol = 1e-8 * (self.n as f64);
        let hat = DMatrix::identity(self.n, self.n) - &g.proj_resid;
        let idem = (&hat * &hat - &hat).norm();
        let trace_err = (hat.trace() - self.k as f64).abs();
        if idem > tol || trace_err > tol {
            return Err(Error::InvalidInput(
                "hat matrix failed idempotency/trace validation".into(),
            ));
        }
        if g.m0lin_basis.ncols() != self.k - self.q {
            return Err(Error::InvalidInput(format!(
                "restricted mean space has dimension {}, expected {}",
                g.m0lin_basis.ncols(),
                self.k - self.q
            )));
        }
        // Residual of R beta0 = r, relative to |r|.
        let resid = (&self.r_mat * self.ols_coefficients(&g.mu0)? - &self.r_vec).norm();
        if resid > 1e-6 * (1.0 + self.r_vec.norm()) {
            return Err(Error::InvalidInput(
                "mu0 does not satisfy the restriction".into(),
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r_mat
    }
    pub fn r_vector(&self) -> &DVector<f64> {
        &self.r_vec
    }
    pub fn geometry(&self) -> &DerivedGeometry {
        &self.geometry
    }
    pub fn index_sets(&self) -> &IndexSets {
        &self.index_sets
    }
    pub fn mu0(&self) -> &DVector<f64> {
        &self.geometry.mu0
    }

    /// OLS and restricted residuals `(u_hat, u_tilde)` of `y`.
    ///
    /// `u_hat = P_{span(X)^perp} y` and `u_tilde = P_{M0lin^perp} (y - mu0)`;
    /// the latter does not depend on the choice of `mu0` in the null mean
    /// set.
    pub fn residuals(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "y has length {}, expected {}",
                y.len(),
                self.n
            )));
        }
        let u_hat = &self.geometry.proj_resid * y;
        let u_tilde = &self.geometry.proj_m0lin_perp * (y - &self.geometry.mu0);
        Ok((u_hat, u_tilde))
    }

    /// `R beta_hat(y) - r`, the estimated restriction discrepancy.
    pub fn restriction_discrepancy(&self, y: &DVector<f64>) -> DVector<f64> {
        self.geometry.v_mat.transpose() * y - &self.r_vec
    }

    /// Least-squares coefficients of `y` on `X`, via the stored thin QR.
    pub fn ols_coefficients(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "y has length {}, expected {}",
                y.len(),
                self.n
            )));
        }
        let rhs = self.geometry.x_basis.transpose() * y;
        self.geometry
            .x_r_factor
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::InvalidInput("triangular solve failed".into()))
    }

    /// Whether `y` lies in `span(X)` (at the crate tolerance).
    pub fn in_span_x(&self, y: &DVector<f64>) -> bool {
        let u_hat = &self.geometry.proj_resid * y;
        u_hat.norm() <= RANK_TOL * y.norm()
    }

    /// Whether `y` lies in the null mean set `M0` (at the crate tolerance).
    pub fn in_m0(&self, y: &DVector<f64>) -> bool {
        let d = y - &self.geometry.mu0;
        let u_tilde = &self.geometry.proj_m0lin_perp * &d;
        u_tilde.norm() <= RANK_TOL * d.norm()
    }
}

/// Convenience constructor for the problems used throughout: intercept-only
/// location model testing the mean.
pub fn location_problem(n: usize, r: f64) -> Result<TestingProblem> {
    let x = DMatrix::from_element(n, 1, 1.0);
    TestingProblem::build(x, DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, r))
}

/// Two-group mean-comparison design: `n1` ones then `n - n1` zeros as the
/// first indicator, the complement as the second, restriction `b1 = b2`.
pub fn two_group_problem(n: usize, n1: usize) -> Result<TestingProblem> {
    if n1 == 0 || n1 >= n {
        return Err(Error::InvalidInput("need 0 < n1 < n".into()));
    }
    let x = DMatrix::from_fn(n, 2, |i, j| {
        let g1 = i < n1;
        match j {
            0 => {
                if g1 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                if g1 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    });
    let r_mat = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    TestingProblem::build(x, r_mat, DVector::zeros(1))
}

/// Intercept plus one regressor, testing the slope (`R = (0, 1)`, `r = 0`).
pub fn intercept_slope_problem(x2: &DVector<f64>) -> Result<TestingProblem> {
    let n = x2.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x2[i] });
    let r_mat = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    TestingProblem::build(x, r_mat, DVector::zeros(1))
}
