//! Ridge-regularized jackknife IV, the comparator for [`crate::two_step`].
//!
//! The leave-one-out fitted instrument
//! `d̂_i = Z_i'(Z₋ᵢ'Z₋ᵢ + λI)⁻¹ Z₋ᵢ'd₋ᵢ` is obtained from a single full-sample
//! fit via the leverage identity `d̂_i = (f_i − h_i d_i) / (1 − h_i)`, where
//! `f = Z(Z'Z + λI)⁻¹Z'd` and `h_i` is the i-th leverage.
//!
//! No variance formula accompanies this estimator in the literature it is
//! taken from. Reported variances reuse the two-step sandwich with `d̂` as
//! the instrument and the same ridge error-variance estimate; this is a
//! convention of this crate and is labelled as such in every result.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{build_instrument_block, Dataset};
use crate::error::{Error, Result, Stage, StageExt};
use crate::inference::{confidence_interval, wald};
use crate::ridge::{check_penalty, tune_eta, RidgeOperator, RidgeSpec};
use crate::two_step::{ridge_error_variance, EstimateResult, Estimator, SATURATION_TOL, WEAK_ID_TOL};

/// Smallest admissible `1 − h_i`.
pub const LEVERAGE_TOL: f64 = 1e-10;

pub const RJIVE_VARIANCE_METHOD: &str = "two-step sandwich with jackknife instrument (crate convention)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RjiveConfig {
    /// Jackknife penalty; defaults to the instrument count `p_z`.
    pub lambda: Option<f64>,
    /// Control residualizer penalty; tuned with `c_x` when unset.
    pub eta_x: Option<f64>,
    pub partial_controls: bool,
    pub c_x: f64,
    /// Error-variance penalty constant; defaults to `c_x`.
    pub c_s: Option<f64>,
    pub eta_s: Option<f64>,
}

impl Default for RjiveConfig {
    fn default() -> Self {
        RjiveConfig {
            lambda: None,
            eta_x: None,
            partial_controls: true,
            c_x: 0.1,
            c_s: None,
            eta_s: None,
        }
    }
}

/// Leave-one-out ridge fitted values of `d` on `z`.
pub fn jackknife_fitted(z: &DMatrix<f64>, d: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_jackknife(z.nrows(), lambda)?;
    let op = RidgeOperator::with_shift(z, lambda)?;
    leave_one_out(&op, d)
}

fn check_jackknife(n: usize, lambda: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("jackknife needs n >= 3, got {n}")));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

fn leave_one_out(op: &RidgeOperator<'_>, d: &DVector<f64>) -> Result<DVector<f64>> {
    let n = op.nrows();
    let fitted = op.fitted(d)?;
    let h = op.hat_diagonal();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let slack = 1.0 - h[i];
        if !(slack >= LEVERAGE_TOL) {
            return Err(Error::LeverageSaturation { index: i, slack });
        }
        out[i] = (fitted[i] - h[i] * d[i]) / slack;
    }
    Ok(out)
}

/// RJIVE point estimate and inference on the full sample.
pub fn rjive(dataset: &Dataset, config: &RjiveConfig, r: f64, level: f64) -> Result<EstimateResult> {
    if dataset.p_z1() == 0 {
        return Err(Error::InvalidArgument("no excluded instruments".into()));
    }
    let n = dataset.n();
    let z = build_instrument_block(dataset).into_matrix();
    let lambda = config.lambda.unwrap_or(z.ncols() as f64);
    let c_s = config.c_s.unwrap_or(config.c_x);
    check_penalty("c_x", config.c_x)?;
    check_penalty("c_s", c_s)?;

    let x = dataset.x();
    let partial = config.partial_controls && x.ncols() > 0;
    let eta_x = match (partial, config.eta_x) {
        (_, Some(e)) => e,
        (true, None) => tune_eta(x, dataset.y(), config.c_x).stage(Stage::Tuning)?,
        (false, None) => 0.0,
    };
    let op_x = if partial {
        Some(RidgeOperator::new(x, eta_x).stage(Stage::Partialling)?)
    } else {
        None
    };
    let partialled = |w: &DVector<f64>| match &op_x {
        Some(op) => op.residual(w),
        None => Ok(w.clone()),
    };
    let y_t = partialled(dataset.y()).stage(Stage::Partialling)?;
    let d_t = partialled(dataset.d()).stage(Stage::Partialling)?;

    check_jackknife(n, lambda)?;
    let op_z = RidgeOperator::with_shift(&z, lambda).stage(Stage::Jackknife)?;
    let d_hat = leave_one_out(&op_z, &d_t).stage(Stage::Jackknife)?;
    let den = d_hat.dot(&d_t);
    let tol = WEAK_ID_TOL * d_hat.norm() * d_t.norm();
    if !(den.abs() > tol) {
        return Err(Error::WeakIdentification(format!("|d_hat'd| = {:e} is below {tol:e}", den.abs()))
            .at(Stage::SecondStage));
    }
    let alpha_hat = d_hat.dot(&y_t) / den;

    let mut s = DMatrix::zeros(n, x.ncols() + 1);
    s.set_column(0, dataset.d());
    s.columns_mut(1, x.ncols()).copy_from(x);
    let eta_s = match config.eta_s {
        Some(e) => e,
        None => tune_eta(&s, dataset.y(), c_s).stage(Stage::Tuning)?,
    };
    let sigma_eps2 = ridge_error_variance(&s, dataset.y(), eta_s).stage(Stage::ErrorVariance)?;
    let middle = partialled(&d_hat).stage(Stage::Variance)?.norm_squared();
    let sigma_alpha2 = n as f64 * middle / (den * den) * sigma_eps2;

    let (ci_low, ci_high) = confidence_interval(alpha_hat, sigma_alpha2, n, level).stage(Stage::Inference)?;
    let (wald, p_value) = if sigma_alpha2 > 0.0 {
        wald(alpha_hat, sigma_alpha2, n, r).stage(Stage::Inference)?
    } else {
        (if alpha_hat == r { 0.0 } else { f64::INFINITY }, if alpha_hat == r { 1.0 } else { 0.0 })
    };

    let gamma = op_z.solve(&d_t).stage(Stage::Jackknife)?;
    let dof = 1.0 - op_z.trace() / n as f64;
    let sigma_v2 = if dof > SATURATION_TOL {
        (d_t.dot(&op_z.residual(&d_t).stage(Stage::Jackknife)?) / n as f64 / dof).max(0.0)
    } else {
        f64::NAN
    };

    Ok(EstimateResult {
        estimator: Estimator::Rjive,
        alpha_hat,
        sigma_alpha2,
        sigma_eps2,
        ci_low,
        ci_high,
        level,
        null_value: r,
        wald,
        p_value,
        n1: 0,
        n2: n,
        eta_used: RidgeSpec {
            eta_x,
            eta_z: lambda / n as f64,
            eta_s,
            c_x: config.c_x,
            c_z: 0.0,
            c_s,
        },
        first_stage_norm: gamma.norm(),
        sigma_v2,
        variance_method: RJIVE_VARIANCE_METHOD.into(),
    })
}
