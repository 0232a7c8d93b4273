//! Two-step ridge IV estimation with sample splitting.
//!
//! The first part of the split fits a ridge first stage of `d` on the full
//! instrument block `Z = [Z1 | X]`. The fitted coefficients produce an
//! instrument `d̂` on the second part, where `α` is estimated after
//! ridge-partialling the controls:
//!
//! ```text
//! α̂ = [d̂'(I − A) d]⁻¹ d̂'(I − A) y,   A = X (X'X + n₂ η_x I)⁻¹ X'
//! ```
//!
//! Inference uses the sandwich `D⁻¹ d̂'(I − A)² d̂ D⁻¹ σ̂²_ε` with
//! `D = d̂'(I − A) d` and a degrees-of-freedom corrected ridge estimate of
//! `σ²_ε` on `S = [d | X]`. Replacing `(I − A)²` by `I − A` is only harmless
//! when `A` is close to a projector; with more controls than observations
//! and a small `η_x` every eigenvalue of `I − A` is small and the shortcut
//! inflates the variance by roughly the inverse of that eigenvalue. The
//! shortcut remains available as [`SandwichForm::Idempotent`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{build_instrument_block, select_entries, Dataset, SplitIndex};
use crate::error::{Error, Result, Stage, StageExt};
use crate::inference::{confidence_interval, wald};
use crate::ridge::{check_penalty, tune_eta, RidgeOperator, RidgeSpec};

/// Relative size of `D = d̂'(I − A) d` below which `α` is not identified.
pub const WEAK_ID_TOL: f64 = 1e-12;
/// Smallest admissible `1 − tr(P)/n` in the error-variance estimate.
pub const SATURATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Tsrr,
    Rjive,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Tsrr => "TSRR",
            Estimator::Rjive => "RJIVE",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsrr" => Ok(Estimator::Tsrr),
            "rjive" => Ok(Estimator::Rjive),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}

/// How the sandwich middle term is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichForm {
    /// `d̂'(I − A) d̂`, treating `I − A` as idempotent.
    Idempotent,
    /// `d̂'(I − A)² d̂ = ‖(I − A) d̂‖²`.
    #[default]
    Squared,
}

/// Penalty selection for [`tsrr`]. Unset penalties are tuned from the data;
/// with `coupled` the first stage and the control residualizer share
/// `η = min(η_x, η_z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPlan {
    pub c_x: f64,
    pub c_z: f64,
    /// Defaults to `c_x`.
    pub c_s: Option<f64>,
    pub eta_x: Option<f64>,
    pub eta_z: Option<f64>,
    pub eta_s: Option<f64>,
    pub coupled: bool,
    #[serde(default)]
    pub sandwich: SandwichForm,
}

impl Default for PenaltyPlan {
    fn default() -> Self {
        PenaltyPlan {
            c_x: 0.1,
            c_z: 0.1,
            c_s: None,
            eta_x: None,
            eta_z: None,
            eta_s: None,
            coupled: true,
            sandwich: SandwichForm::default(),
        }
    }
}

impl PenaltyPlan {
    pub fn tuned(c_x: f64, c_z: f64) -> Self {
        PenaltyPlan {
            c_x,
            c_z,
            ..Default::default()
        }
    }

    /// All three penalties held fixed.
    pub fn fixed(eta_x: f64, eta_z: f64, eta_s: f64) -> Self {
        PenaltyPlan {
            eta_x: Some(eta_x),
            eta_z: Some(eta_z),
            eta_s: Some(eta_s),
            coupled: false,
            ..Default::default()
        }
    }

    pub fn c_s(&self) -> f64 {
        self.c_s.unwrap_or(self.c_x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator: Estimator,
    pub alpha_hat: f64,
    /// Asymptotic variance of `√n₂ (α̂ − α)`.
    pub sigma_alpha2: f64,
    pub sigma_eps2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// Null value `r` of the Wald test.
    pub null_value: f64,
    pub wald: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub eta_used: RidgeSpec,
    /// `‖γ̂_z‖₂`.
    pub first_stage_norm: f64,
    pub sigma_v2: f64,
    pub variance_method: String,
}

impl EstimateResult {
    /// `σ̂²_α / n₂`, the estimated variance of `α̂` itself.
    pub fn var_alpha(&self) -> f64 {
        self.sigma_alpha2 / self.n2 as f64
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// First-stage ridge coefficients of `d` on the instrument block.
pub fn first_stage(z: &DMatrix<f64>, d: &DVector<f64>, eta_z: f64) -> Result<DVector<f64>> {
    RidgeOperator::new(z, eta_z)?.solve(d)
}

/// `d̂ = Z γ`.
pub fn predict_optimal_instrument(z: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    if z.ncols() != gamma.len() {
        return Err(Error::Dimension(format!(
            "instrument block has {} columns, coefficients have {}",
            z.ncols(),
            gamma.len()
        )));
    }
    Ok(z * gamma)
}

/// Partialled moments of the second stage, shared by the estimate and its
/// variance.
struct Partialled {
    /// `D = d̂'(I − A) d`
    den: f64,
    /// `d̂'(I − A) y`, if `y` was supplied
    num: Option<f64>,
    /// `d̂'(I − A) d̂` or `‖(I − A) d̂‖²`
    middle: f64,
}

fn partial_moments(
    d_hat: &DVector<f64>,
    d2: &DVector<f64>,
    y2: Option<&DVector<f64>>,
    x2: &DMatrix<f64>,
    eta_x: f64,
    form: SandwichForm,
) -> Result<Partialled> {
    let n2 = d2.len();
    if d_hat.len() != n2 || x2.nrows() != n2 || y2.is_some_and(|y| y.len() != n2) {
        return Err(Error::Dimension("second-stage inputs disagree in length".into()));
    }
    let op = RidgeOperator::new(x2, eta_x)?;
    let rdh = op.residual(d_hat)?;
    let den = rdh.dot(d2);
    let tol = WEAK_ID_TOL * d_hat.norm() * d2.norm();
    if !(den.abs() > tol) {
        return Err(Error::WeakIdentification(format!(
            "|d_hat'(I-A)d| = {:e} is below {tol:e}",
            den.abs()
        )));
    }
    // (I − A) is symmetric, so d̂'(I − A)y = ((I − A)d̂)'y
    let num = y2.map(|y| rdh.dot(y));
    let middle = match form {
        SandwichForm::Idempotent => d_hat.dot(&rdh),
        SandwichForm::Squared => rdh.norm_squared(),
    };
    Ok(Partialled { den, num, middle })
}

/// `α̂ = [d̂'(I − A) d]⁻¹ d̂'(I − A) y` on the inference part.
pub fn second_stage(
    d_hat: &DVector<f64>,
    d2: &DVector<f64>,
    y2: &DVector<f64>,
    x2: &DMatrix<f64>,
    eta_x: f64,
) -> Result<f64> {
    let m = partial_moments(d_hat, d2, Some(y2), x2, eta_x, SandwichForm::Idempotent)?;
    Ok(m.num.expect("outcome supplied") / m.den)
}

/// Ridge residual variance `[y'(I − P)y / n] / [1 − tr(P)/n]` for the hat
/// operator `P` of `s` at `eta_s`.
pub fn ridge_error_variance(s: &DMatrix<f64>, y: &DVector<f64>, eta_s: f64) -> Result<f64> {
    let n = y.len() as f64;
    let op = RidgeOperator::new(s, eta_s)?;
    let r = op.residual(y)?;
    let dof = 1.0 - op.trace() / n;
    if !(dof > SATURATION_TOL) {
        return Err(Error::SaturatedFit(format!("1 - tr(P)/n = {dof:e}")));
    }
    Ok((y.dot(&r) / n / dof).max(0.0))
}

/// `σ̂²_ε` from the ridge fit of `y` on `S = [d | X]`.
pub fn estimate_sigma_eps(y2: &DVector<f64>, d2: &DVector<f64>, x2: &DMatrix<f64>, eta_s: f64) -> Result<f64> {
    let s = augmented_design(d2, x2)?;
    ridge_error_variance(&s, y2, eta_s)
}

fn augmented_design(d: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != d.len() {
        return Err(Error::Dimension(format!("d has {} rows, X has {}", d.len(), x.nrows())));
    }
    let mut s = DMatrix::zeros(d.len(), x.ncols() + 1);
    s.set_column(0, d);
    s.columns_mut(1, x.ncols()).copy_from(x);
    Ok(s)
}

/// Finite-sample variance of `α̂`: `D⁻¹ ‖(I − A) d̂‖² D⁻¹ σ̂²_ε`.
pub fn estimate_sigma_alpha(
    d_hat: &DVector<f64>,
    d2: &DVector<f64>,
    x2: &DMatrix<f64>,
    eta_x: f64,
    sigma_eps2: f64,
) -> Result<f64> {
    check_penalty("sigma_eps2", sigma_eps2)?;
    let m = partial_moments(d_hat, d2, None, x2, eta_x, SandwichForm::default())?;
    Ok(m.middle / (m.den * m.den) * sigma_eps2)
}

/// The full two-step procedure on one dataset and one split.
pub fn tsrr(dataset: &Dataset, plan: &PenaltyPlan, split: &SplitIndex, r: f64, level: f64) -> Result<EstimateResult> {
    check_split(dataset.n(), split)?;
    if dataset.p_z1() == 0 {
        return Err(Error::InvalidArgument("no excluded instruments".into()));
    }
    let z = build_instrument_block(dataset).into_matrix();
    let z1 = z.select_rows(&split.part1);
    let d1 = select_entries(dataset.d(), &split.part1);
    let z2 = z.select_rows(&split.part2);
    let d2 = select_entries(dataset.d(), &split.part2);
    let y2 = select_entries(dataset.y(), &split.part2);
    let x2 = dataset.x().select_rows(&split.part2);
    let n1 = split.n1();
    let n2 = split.n2();

    let s2 = augmented_design(&d2, &x2)?;
    let eta = resolve_penalties(plan, &z1, &d1, &x2, &y2, &s2).stage(Stage::Tuning)?;

    let op_z = RidgeOperator::new(&z1, eta.eta_z).stage(Stage::FirstStage)?;
    let gamma = op_z.solve(&d1).stage(Stage::FirstStage)?;
    let sigma_v2 = first_stage_residual_variance(&op_z, &d1)?;
    let d_hat = predict_optimal_instrument(&z2, &gamma).stage(Stage::FirstStage)?;

    let m = partial_moments(&d_hat, &d2, Some(&y2), &x2, eta.eta_x, plan.sandwich).stage(Stage::SecondStage)?;
    let alpha_hat = m.num.expect("outcome supplied") / m.den;

    let sigma_eps2 = ridge_error_variance(&s2, &y2, eta.eta_s).stage(Stage::ErrorVariance)?;
    let sigma_alpha2 = n2 as f64 * m.middle / (m.den * m.den) * sigma_eps2;

    let (ci_low, ci_high) = confidence_interval(alpha_hat, sigma_alpha2, n2, level).stage(Stage::Inference)?;
    let (wald, p_value) = if sigma_alpha2 > 0.0 {
        wald(alpha_hat, sigma_alpha2, n2, r).stage(Stage::Inference)?
    } else {
        (if alpha_hat == r { 0.0 } else { f64::INFINITY }, if alpha_hat == r { 1.0 } else { 0.0 })
    };

    Ok(EstimateResult {
        estimator: Estimator::Tsrr,
        alpha_hat,
        sigma_alpha2,
        sigma_eps2,
        ci_low,
        ci_high,
        level,
        null_value: r,
        wald,
        p_value,
        n1,
        n2,
        eta_used: eta,
        first_stage_norm: gamma.norm(),
        sigma_v2,
        variance_method: match plan.sandwich {
            SandwichForm::Idempotent => "sandwich with idempotent (I-A)".into(),
            SandwichForm::Squared => "sandwich with (I-A)^2".into(),
        },
    })
}

fn first_stage_residual_variance(op: &RidgeOperator<'_>, d1: &DVector<f64>) -> Result<f64> {
    let n = d1.len() as f64;
    let r = op.residual(d1).stage(Stage::FirstStage)?;
    let dof = 1.0 - op.trace() / n;
    let rss = d1.dot(&r) / n;
    // an interpolating first stage leaves no residual degrees of freedom
    Ok(if dof > SATURATION_TOL { (rss / dof).max(0.0) } else { f64::NAN })
}

pub(crate) fn check_split(n: usize, split: &SplitIndex) -> Result<()> {
    if split.n() != n {
        return Err(Error::Dimension(format!("split covers {} observations, dataset has {n}", split.n())));
    }
    if split.n1() < 1 || split.n2() < 2 {
        return Err(Error::InvalidArgument("degenerate split".into()));
    }
    let mut seen = vec![false; n];
    for &i in split.part1.iter().chain(&split.part2) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("split index {i} is out of range or repeated")));
        }
    }
    Ok(())
}

fn resolve_penalties(
    plan: &PenaltyPlan,
    z1: &DMatrix<f64>,
    d1: &DVector<f64>,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<RidgeSpec> {
    let c_s = plan.c_s();
    for (name, v) in [("c_x", plan.c_x), ("c_z", plan.c_z), ("c_s", c_s)] {
        check_penalty(name, v)?;
    }
    let needs_tuning = plan.coupled || plan.eta_z.is_none() || plan.eta_x.is_none();
    let (mut eta_x, mut eta_z) = (0.0, 0.0);
    if needs_tuning {
        let tuned_z = tune_eta(z1, d1, plan.c_z)?;
        // with no controls there is nothing to residualize; η_x is inert
        let tuned_x = if x2.ncols() > 0 { Some(tune_eta(x2, y2, plan.c_x)?) } else { None };
        if plan.coupled {
            let eta = tuned_x.map_or(tuned_z, |ex| ex.min(tuned_z));
            eta_x = eta;
            eta_z = eta;
        } else {
            eta_z = tuned_z;
            eta_x = tuned_x.unwrap_or(tuned_z);
        }
    }
    let eta_x = plan.eta_x.unwrap_or(eta_x);
    let eta_z = plan.eta_z.unwrap_or(eta_z);
    let eta_s = match plan.eta_s {
        Some(e) => e,
        None => tune_eta(s2, y2, c_s)?,
    };
    let spec = RidgeSpec {
        eta_x,
        eta_z,
        eta_s,
        c_x: plan.c_x,
        c_z: plan.c_z,
        c_s,
    };
    spec.validate()?;
    Ok(spec)
}

/// Ratio `[tr(QQ'QQ') − tr(QQ'∘QQ')] / [tr(QQ') − tr(Q∘Q)]` with
/// `Q = Z (Z'Z/n + η_z I)⁻¹ Z' (I − A)`, where `tr(M∘M)` sums the squared
/// diagonal of `M`. Materializes `n×n` matrices, so `n` is capped.
pub fn q_diagnostic(z: &DMatrix<f64>, x: &DMatrix<f64>, eta_z: f64, eta_x: f64, max_n: usize) -> Result<f64> {
    let n = z.nrows();
    if n > max_n {
        return Err(Error::InvalidArgument(format!("n = {n} exceeds the diagnostic cap of {max_n}")));
    }
    if x.nrows() != n {
        return Err(Error::Dimension(format!("Z has {n} rows, X has {}", x.nrows())));
    }
    let resid_x = RidgeOperator::new(x, eta_x)?.residual_matrix(&DMatrix::identity(n, n))?;
    // (Z'Z/n + ηI)⁻¹ = n (Z'Z + nηI)⁻¹, so Q = n · H_z (I − A) with H_z the
    // ridge hat of Z; H_z B = B − (I − H_z) B.
    let op_z = RidgeOperator::new(z, eta_z)?;
    let q = (&resid_x - op_z.residual_matrix(&resid_x)?) * n as f64;
    let qqt = &q * q.transpose();
    let off_diag_sq = |m: &DMatrix<f64>| m.norm_squared() - m.diagonal().norm_squared();
    let num = off_diag_sq(&qqt);
    let den = off_diag_sq(&q);
    if !(den > 1e-12) {
        return Err(Error::Degenerate(format!("tr(QQ') - tr(Q∘Q) = {den:e}")));
    }
    Ok(num / den)
}
