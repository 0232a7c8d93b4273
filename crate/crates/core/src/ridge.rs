//! Ridge primitives shared by both estimation stages.
//!
//! Every penalized solve in this crate uses the same normalization: for a
//! design `G` with `n` rows the penalty enters as `G'G + n·η·I`. This is the
//! `(G'G/n + η I)` form scaled by `n`, so `η` does not drift with sample size.
//! The hat operator of `G` at `η` is `A = G (G'G + n·η·I)⁻¹ G'`.
//!
//! The `n×n` hat matrix is never formed. When `p ≤ n` the `p×p` Gram matrix is
//! factorized; when `p > n` (only allowed for `η > 0`) the push-through
//! identity `(G'G + cI)⁻¹G' = G'(GG' + cI)⁻¹` moves the factorization to the
//! `n×n` kernel `GG'`, which is algebraically identical and far cheaper.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot size below which a Gram matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Resolved penalty values used by an estimation, together with the tuning
/// constants that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeSpec {
    /// Control residualizer penalty (second stage).
    pub eta_x: f64,
    /// First-stage penalty.
    pub eta_z: f64,
    /// Penalty of the error-variance hat operator.
    pub eta_s: f64,
    pub c_x: f64,
    pub c_z: f64,
    pub c_s: f64,
}

impl RidgeSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_x", self.eta_x),
            ("eta_z", self.eta_z),
            ("eta_s", self.eta_s),
            ("c_x", self.c_x),
            ("c_z", self.c_z),
            ("c_s", self.c_s),
        ] {
            check_penalty(name, v)?;
        }
        Ok(())
    }
}

pub(crate) fn check_penalty(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Factor {
    /// No columns: the hat operator is zero.
    Empty,
    /// Cholesky of `G'G + cI` (p×p).
    Primal(Cholesky<f64, Dyn>),
    /// Cholesky of `GG' + cI` (n×n), `c > 0`.
    Dual(Cholesky<f64, Dyn>),
}

/// A factorized ridge fit of one design at one penalty, reusable across
/// right-hand sides.
#[derive(Debug, Clone)]
pub struct RidgeOperator<'a> {
    g: &'a DMatrix<f64>,
    shift: f64,
    factor: Factor,
}

impl<'a> RidgeOperator<'a> {
    /// Operator for `(G'G + n·η·I)`.
    pub fn new(g: &'a DMatrix<f64>, eta: f64) -> Result<Self> {
        check_penalty("eta", eta)?;
        Self::with_shift(g, g.nrows() as f64 * eta)
    }

    /// Operator for `(G'G + shift·I)` with an unnormalized shift.
    pub fn with_shift(g: &'a DMatrix<f64>, shift: f64) -> Result<Self> {
        check_penalty("shift", shift)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("design contains non-finite entries".into()));
        }
        let (n, p) = g.shape();
        if p == 0 {
            return Ok(RidgeOperator {
                g,
                shift,
                factor: Factor::Empty,
            });
        }
        let factor = if p <= n || shift == 0.0 {
            let mut gram = g.tr_mul(g);
            shift_diagonal(&mut gram, shift);
            Factor::Primal(factorize(gram)?)
        } else {
            let mut gram = g * g.transpose();
            shift_diagonal(&mut gram, shift);
            Factor::Dual(factorize(gram)?)
        };
        Ok(RidgeOperator { g, shift, factor })
    }

    pub fn nrows(&self) -> usize {
        self.g.nrows()
    }

    fn check_len(&self, t: &DVector<f64>) -> Result<()> {
        if t.len() != self.g.nrows() {
            return Err(Error::Dimension(format!(
                "design has {} rows, vector has {}",
                self.g.nrows(),
                t.len()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("vector contains non-finite entries".into()));
        }
        Ok(())
    }

    /// Coefficients `b = (G'G + n·η·I)⁻¹ G't`.
    pub fn solve(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(t)?;
        Ok(match &self.factor {
            Factor::Empty => DVector::zeros(0),
            Factor::Primal(ch) => ch.solve(&self.g.tr_mul(t)),
            Factor::Dual(ch) => self.g.tr_mul(&ch.solve(t)),
        })
    }

    /// `(I − A) t`.
    pub fn residual(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(t)?;
        Ok(match &self.factor {
            Factor::Empty => t.clone(),
            Factor::Primal(ch) => t - self.g * ch.solve(&self.g.tr_mul(t)),
            // (I − K(K + cI)⁻¹) t = c (K + cI)⁻¹ t
            Factor::Dual(ch) => ch.solve(t) * self.shift,
        })
    }

    /// `A t`.
    pub fn fitted(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(t - self.residual(t)?)
    }

    /// Diagonal of the hat operator (the leverages).
    pub fn hat_diagonal(&self) -> DVector<f64> {
        let n = self.g.nrows();
        match &self.factor {
            Factor::Empty => DVector::zeros(n),
            Factor::Primal(ch) => {
                // h_i = ‖L⁻¹ g_i‖²
                let mut w = self.g.transpose();
                ch.l_dirty().solve_lower_triangular_mut(&mut w);
                DVector::from_iterator(n, w.column_iter().map(|c| c.norm_squared()))
            }
            Factor::Dual(ch) => {
                // A = I − c (K + cI)⁻¹
                let inv_diag = ch.inverse().diagonal();
                inv_diag.map(|v| 1.0 - self.shift * v)
            }
        }
    }

    /// `(I − A) B`, column by column.
    pub fn residual_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.g.nrows() {
            return Err(Error::Dimension(format!(
                "design has {} rows, matrix has {}",
                self.g.nrows(),
                b.nrows()
            )));
        }
        Ok(match &self.factor {
            Factor::Empty => b.clone(),
            Factor::Primal(ch) => b - self.g * ch.solve(&self.g.tr_mul(b)),
            Factor::Dual(ch) => ch.solve(b) * self.shift,
        })
    }

    /// `tr(A)`, using `tr(A) = m − c·tr((M + cI)⁻¹)` for the factorized
    /// `m×m` Gram matrix `M`.
    pub fn trace(&self) -> f64 {
        match &self.factor {
            Factor::Empty => 0.0,
            Factor::Primal(ch) | Factor::Dual(ch) => {
                let m = ch.l_dirty().nrows() as f64;
                if self.shift == 0.0 {
                    return m;
                }
                m - self.shift * trace_of_inverse(ch)
            }
        }
    }
}

fn shift_diagonal(m: &mut DMatrix<f64>, shift: f64) {
    for j in 0..m.nrows() {
        m[(j, j)] += shift;
    }
}

fn factorize(gram: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = gram.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let diag = gram.diagonal();
    let ch = Cholesky::new(gram).ok_or_else(|| Error::Singular("Gram matrix is not positive definite".into()))?;
    let l = ch.l_dirty();
    for j in 0..l.nrows() {
        let pivot = l[(j, j)] * l[(j, j)];
        if !(pivot > PIVOT_TOL * scale.max(diag[j])) {
            return Err(Error::Singular(format!("Gram matrix is numerically singular at pivot {j}")));
        }
    }
    Ok(ch)
}

/// `tr(M⁻¹) = ‖L⁻¹‖²_F` for `M = LL'`.
fn trace_of_inverse(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l();
    let m = l.nrows();
    let mut inv = DMatrix::<f64>::identity(m, m);
    l.solve_lower_triangular_mut(&mut inv);
    inv.norm_squared()
}

/// Ridge coefficients `b` solving `(G'G + n·η·I) b = G't`.
pub fn ridge_solve(g: &DMatrix<f64>, t: &DVector<f64>, eta: f64) -> Result<DVector<f64>> {
    RidgeOperator::new(g, eta)?.solve(t)
}

/// `(I − A) w`, the ridge-partialled residual of `w` on `x`.
pub fn residualize(x: &DMatrix<f64>, eta: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
    RidgeOperator::new(x, eta)?.residual(w)
}

/// `tr(A) = Σ s_j² / (s_j² + n·η)` over the singular values of `x`.
pub fn trace_hat(x: &DMatrix<f64>, eta: f64) -> Result<f64> {
    Ok(RidgeOperator::new(x, eta)?.trace())
}

/// Data-driven penalty `c · max_j |m_j' target| / (n·p)`.
pub fn tune_eta(m: &DMatrix<f64>, target: &DVector<f64>, c: f64) -> Result<f64> {
    check_penalty("c", c)?;
    let (n, p) = m.shape();
    if p == 0 {
        return Err(Error::InvalidArgument(
            "cannot tune a penalty for an empty design; supply it explicitly".into(),
        ));
    }
    if target.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, target has {}", target.len())));
    }
    let max = m
        .column_iter()
        .map(|col| col.dot(target).abs())
        .fold(0.0f64, f64::max);
    Ok(c * max / (n as f64 * p as f64))
}
