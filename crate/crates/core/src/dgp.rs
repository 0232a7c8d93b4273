//! Synthetic designs for Monte Carlo studies: correlated Gaussian
//! instruments and controls, patterned first-stage and outcome coefficients
//! calibrated to a target signal strength, and correlated structural errors.
//!
//! Outcome equation `y = α d + X γ_x + ε`, first stage `d = Z1 γ_z + v`, with
//! `(ε, v)` bivariate normal, unit variances and correlation `sigma_ev`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

/// Number of leading strong control coefficients.
pub const STRONG_SIGNALS: usize = 5;
/// Magnitude of the strong control coefficients in the sparse pattern.
pub const SPARSE_STRONG_MAGNITUDE: f64 = 2.0;
/// Active share of instruments under the cutoff pattern.
pub const CUTOFF_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrKind {
    /// Equicorrelation: unit diagonal, constant `rho` elsewhere.
    #[serde(rename = "EC")]
    Ec,
    /// `rho^|i-j|`.
    #[serde(rename = "AR1")]
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPattern {
    /// Five strong entries of magnitude `m`, then a calibrated random share.
    NonsparseDense,
    /// Five strong entries of magnitude 2, then a calibrated random share.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentPattern {
    /// A `density_z` share of calibrated `N(0,1)` draws.
    AllWeak,
    /// The first 70% equal, rescaled to the target strength.
    Cutoff,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    /// One correlated block over `[Z1, X]`.
    #[default]
    Joint,
    /// `Z1` and `X` drawn independently, each with the configured structure.
    Independent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPlacement {
    #[default]
    Leading,
    Random,
}

/// Full description of one simulation panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p_x: usize,
    pub p_z1: usize,
    pub corr: CorrKind,
    pub rho: f64,
    pub gamma_x_pattern: ControlPattern,
    pub gamma_z_pattern: InstrumentPattern,
    pub m: f64,
    pub density_x: f64,
    pub density_z: f64,
    pub mu_x2: f64,
    pub mu_z2: f64,
    pub sigma_ev: f64,
    pub alpha_true: f64,
    pub c_x: f64,
    pub c_z: f64,
    pub split_fraction: f64,
    pub n_reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub block_layout: BlockLayout,
    #[serde(default)]
    pub support_placement: SupportPlacement,
    /// Multiplies both structural errors; 0 gives noiseless data.
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// RJIVE penalty; `p_z` when unset.
    #[serde(default)]
    pub rjive_lambda: Option<f64>,
    #[serde(default = "yes")]
    pub rjive_partial_controls: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

pub const PRESET_NAMES: [&str; 6] = ["nonsparse-A", "nonsparse-B", "nonsparse-C", "sparse-A", "sparse-B", "sparse-C"];

impl SimConfig {
    pub fn preset(name: &str) -> Result<SimConfig> {
        let text = match name {
            "nonsparse-A" => include_str!("../presets/nonsparse-A.toml"),
            "nonsparse-B" => include_str!("../presets/nonsparse-B.toml"),
            "nonsparse-C" => include_str!("../presets/nonsparse-C.toml"),
            "sparse-A" => include_str!("../presets/sparse-A.toml"),
            "sparse-B" => include_str!("../presets/sparse-B.toml"),
            "sparse-C" => include_str!("../presets/sparse-C.toml"),
            other => {
                return Err(Error::Config(format!(
                    "unknown panel {other:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        SimConfig::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML or JSON, chosen by extension (`.json` is JSON).
    pub fn from_path(path: &std::path::Path) -> Result<SimConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            SimConfig::from_json(&text)
        } else {
            SimConfig::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("SimConfig serializes")
    }

    pub fn p_z(&self) -> usize {
        self.p_x + self.p_z1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 3 {
            return bad(format!("n must be >= 3, got {}", self.n));
        }
        if self.p_z1 < 2 {
            return bad(format!("p_z1 must be >= 2, got {}", self.p_z1));
        }
        if self.p_x < STRONG_SIGNALS {
            return bad(format!("p_x must be >= {STRONG_SIGNALS} for the control patterns, got {}", self.p_x));
        }
        for (name, v) in [("density_x", self.density_x), ("density_z", self.density_z)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_reps < 1 {
            return bad("n_reps must be >= 1".into());
        }
        if !(self.sigma_ev > -1.0 && self.sigma_ev < 1.0) {
            return bad(format!("sigma_ev must lie in (-1, 1), got {}", self.sigma_ev));
        }
        if !(self.mu_x2 > 0.0 && self.mu_z2 > 0.0) || !self.mu_x2.is_finite() || !self.mu_z2.is_finite() {
            return bad("mu_x2 and mu_z2 must be positive".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        for (name, v) in [("c_x", self.c_x), ("c_z", self.c_z), ("noise_scale", self.noise_scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.m.is_finite() || !self.alpha_true.is_finite() {
            return bad("m and alpha_true must be finite".into());
        }
        if let Some(l) = self.rjive_lambda {
            if !(l > 0.0) {
                return bad(format!("rjive_lambda must be positive, got {l}"));
            }
        }
        let dims: &[usize] = match self.block_layout {
            BlockLayout::Joint => &[self.p_z()],
            BlockLayout::Independent => &[self.p_z1, self.p_x],
        };
        for &p in dims {
            CorrStructure::new(self.corr, self.rho, p)?;
        }
        Ok(())
    }
}

/// A correlation structure of a given dimension, with its PD conditions
/// checked on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrStructure {
    pub kind: CorrKind,
    pub rho: f64,
    pub dim: usize,
}

impl CorrStructure {
    pub fn new(kind: CorrKind, rho: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("correlation dimension must be positive".into()));
        }
        let ok = match kind {
            CorrKind::Ec => rho < 1.0 && (dim == 1 || rho > -1.0 / (dim as f64 - 1.0)),
            CorrKind::Ar1 => rho.abs() < 1.0,
        };
        if !ok || !rho.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("{kind:?} with rho = {rho} in dimension {dim}")));
        }
        Ok(CorrStructure { kind, rho, dim })
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            _ if i == j => 1.0,
            CorrKind::Ec => self.rho,
            CorrKind::Ar1 => self.rho.powi(i.abs_diff(j) as i32),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j))
    }

    /// `ξ'Σξ`, summing only over the support of `ξ`.
    pub fn quad_form(&self, xi: &DVector<f64>) -> f64 {
        let support: Vec<usize> = (0..xi.len()).filter(|&i| xi[i] != 0.0).collect();
        let mut q = 0.0;
        for &i in &support {
            for &j in &support {
                q += xi[i] * xi[j] * self.entry(i, j);
            }
        }
        q
    }

    /// Closed-form Cholesky factor; applying it costs `O(dim)` per row.
    pub fn factor(&self) -> Result<StructuredFactor> {
        match self.kind {
            CorrKind::Ar1 => Ok(StructuredFactor::Ar1 {
                rho: self.rho,
                innovation: (1.0 - self.rho * self.rho).sqrt(),
            }),
            CorrKind::Ec => {
                // L has constant sub-diagonal column entries a_j and diagonal d_j:
                // d_j² = 1 − S_j, a_j = (ρ − S_j) / d_j, S_j = Σ_{k<j} a_k².
                let mut diag = Vec::with_capacity(self.dim);
                let mut below = Vec::with_capacity(self.dim);
                let mut s = 0.0f64;
                for j in 0..self.dim {
                    let d2 = 1.0 - s;
                    if !(d2 > 0.0) {
                        return Err(Error::NotPositiveDefinite(format!("EC pivot {j} is {d2:e}")));
                    }
                    let d = d2.sqrt();
                    let a = (self.rho - s) / d;
                    diag.push(d);
                    below.push(a);
                    s += a * a;
                }
                Ok(StructuredFactor::Ec { diag, below })
            }
        }
    }
}

/// Exact Cholesky factor `L` of an EC or AR(1) matrix in compact form.
#[derive(Debug, Clone, PartialEq)]
pub enum StructuredFactor {
    Ec { diag: Vec<f64>, below: Vec<f64> },
    Ar1 { rho: f64, innovation: f64 },
}

impl StructuredFactor {
    /// Replaces each row `z` of `block` by `L z`.
    pub fn apply_rows(&self, block: &mut DMatrix<f64>) {
        let (n, p) = block.shape();
        match self {
            StructuredFactor::Ar1 { rho, innovation } => {
                for j in 1..p {
                    let (prev, mut cur) = block.columns_range_pair_mut(j - 1, j);
                    for i in 0..n {
                        cur[i] = rho * prev[i] + innovation * cur[i];
                    }
                }
            }
            StructuredFactor::Ec { diag, below } => {
                let mut acc = vec![0.0; n];
                for j in 0..p {
                    let mut col = block.column_mut(j);
                    for i in 0..n {
                        let z = col[i];
                        col[i] = acc[i] + diag[j] * z;
                        acc[i] += below[j] * z;
                    }
                }
            }
        }
    }

    /// The dense lower-triangular factor, for checks.
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        // row k of I is e_k', which maps to (L e_k)', so the result is L'
        let mut l = DMatrix::identity(dim, dim);
        self.apply_rows(&mut l);
        l.transpose()
    }
}

/// `Σ` for the given structure, with its PD condition enforced.
pub fn corr_matrix(p: usize, kind: CorrKind, rho: f64) -> Result<DMatrix<f64>> {
    Ok(CorrStructure::new(kind, rho, p)?.matrix())
}

fn standard_normal_block<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    // row-major draw order: one observation at a time
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            out[(i, j)] = rng.sample(StandardNormal);
        }
    }
    out
}

/// `n` i.i.d. rows from `N(0, Σ)` via the Cholesky factor of `Σ`.
pub fn sample_gaussian_block<R: Rng + ?Sized>(sigma: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let l = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("covariance has no Cholesky factor".into()))?
        .unpack();
    let z = standard_normal_block(n, p, rng);
    Ok(z * l.transpose())
}

/// Structured counterpart of [`sample_gaussian_block`]; consumes the stream
/// identically and applies the same factor.
pub fn sample_structured_block<R: Rng + ?Sized>(structure: &CorrStructure, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let factor = structure.factor()?;
    let mut z = standard_normal_block(n, structure.dim, rng);
    factor.apply_rows(&mut z);
    Ok(z)
}

/// `c = sqrt(μ² / (n ξ'Σξ + μ² ξ'Σξ))`.
pub fn scaling_constant(mu2: f64, n: usize, xi: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != xi.len() || sigma.ncols() != xi.len() {
        return Err(Error::Dimension("xi and Sigma disagree".into()));
    }
    scaling_from_quad(mu2, n, xi.dot(&(sigma * xi)))
}

pub(crate) fn scaling_from_quad(mu2: f64, n: usize, quad: f64) -> Result<f64> {
    if !(quad > 0.0) {
        return Err(Error::Degenerate(format!("xi'Sigma xi = {quad:e}")));
    }
    if !(mu2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu2 must be >= 0, got {mu2}")));
    }
    Ok((mu2 / (n as f64 * quad + mu2 * quad)).sqrt())
}

/// Signal strength implied by coefficients `c·ξ`: inverts the scaling formula.
pub fn implied_mu2(c: f64, n: usize, quad: f64) -> f64 {
    let k = c * c * quad;
    n as f64 * k / (1.0 - k)
}

/// Drawn coefficients for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefDraw {
    pub gamma_x: DVector<f64>,
    pub gamma_z: DVector<f64>,
    pub c_applied_x: f64,
    pub c_applied_z: f64,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Positions of `count` nonzeros among `candidates`.
fn place_support<R: Rng + ?Sized>(
    candidates: std::ops::Range<usize>,
    count: usize,
    placement: SupportPlacement,
    rng: &mut R,
) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    if placement == SupportPlacement::Random {
        idx.shuffle(rng);
        idx.truncate(count);
        idx.sort_unstable();
    } else {
        idx.truncate(count);
    }
    idx
}

/// Control coefficients: strong leading entries, a calibrated share of
/// `c·ξ_j`, zeros elsewhere. Returns the vector and the applied `c`.
pub fn make_gamma_x<R: Rng + ?Sized>(
    config: &SimConfig,
    sigma_x: &CorrStructure,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let p = config.p_x;
    if p < STRONG_SIGNALS || sigma_x.dim != p {
        return Err(Error::InvalidArgument(format!("control pattern needs p_x >= {STRONG_SIGNALS}, got {p}")));
    }
    let strong = match config.gamma_x_pattern {
        ControlPattern::NonsparseDense => config.m,
        ControlPattern::Sparse => SPARSE_STRONG_MAGNITUDE,
    };
    let count = round_half_up(config.density_x * (p - STRONG_SIGNALS) as f64);
    let support = place_support(STRONG_SIGNALS..p, count, config.support_placement, rng);
    let mut xi = DVector::zeros(p);
    for &j in &support {
        xi[j] = rng.sample(StandardNormal);
    }
    let c = if count == 0 {
        0.0
    } else {
        scaling_from_quad(config.mu_x2, config.n, sigma_x.quad_form(&xi))?
    };
    let mut gamma = xi * c;
    for j in 0..STRONG_SIGNALS {
        gamma[j] = strong;
    }
    Ok((gamma, c))
}

/// Instrument coefficients under the all-weak or cutoff pattern, calibrated
/// to `mu_z2`. Returns the vector and the applied `c`.
pub fn make_gamma_z<R: Rng + ?Sized>(
    config: &SimConfig,
    sigma_z1: &CorrStructure,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let p = config.p_z1;
    if p < 2 || sigma_z1.dim != p {
        return Err(Error::InvalidArgument(format!("instrument pattern needs p_z1 >= 2, got {p}")));
    }
    let share = match config.gamma_z_pattern {
        InstrumentPattern::AllWeak => config.density_z,
        InstrumentPattern::Cutoff => CUTOFF_FRACTION,
    };
    let count = round_half_up(share * p as f64);
    let support = place_support(0..p, count, config.support_placement, rng);
    let mut xi = DVector::zeros(p);
    for &j in &support {
        xi[j] = match config.gamma_z_pattern {
            InstrumentPattern::AllWeak => rng.sample(StandardNormal),
            InstrumentPattern::Cutoff => 1.0,
        };
    }
    if count == 0 {
        return Ok((xi, 0.0));
    }
    let c = scaling_from_quad(config.mu_z2, config.n, sigma_z1.quad_form(&xi))?;
    Ok((xi * c, c))
}

/// Replication `rep` of the design: a pure function of `(config, rep)`.
pub fn generate(config: &SimConfig, rep: usize) -> Result<(Dataset, CoefDraw)> {
    config.validate()?;
    let (n, p_x, p_z1) = (config.n, config.p_x, config.p_z1);
    let rep = rep as u64;

    let mut rng = substream(config.seed, rep, Purpose::Regressors);
    let (z1, x) = match config.block_layout {
        BlockLayout::Joint => {
            let w = sample_structured_block(&CorrStructure::new(config.corr, config.rho, p_z1 + p_x)?, n, &mut rng)?;
            (w.columns(0, p_z1).into_owned(), w.columns(p_z1, p_x).into_owned())
        }
        BlockLayout::Independent => {
            let z1 = sample_structured_block(&CorrStructure::new(config.corr, config.rho, p_z1)?, n, &mut rng)?;
            let x = sample_structured_block(&CorrStructure::new(config.corr, config.rho, p_x)?, n, &mut rng)?;
            (z1, x)
        }
    };

    // EC and AR(1) sub-blocks of the joint matrix keep the same structure
    let sigma_x = CorrStructure::new(config.corr, config.rho, p_x)?;
    let sigma_z1 = CorrStructure::new(config.corr, config.rho, p_z1)?;
    let (gamma_x, c_x) = make_gamma_x(config, &sigma_x, &mut substream(config.seed, rep, Purpose::ControlCoefficients))?;
    let (gamma_z, c_z) =
        make_gamma_z(config, &sigma_z1, &mut substream(config.seed, rep, Purpose::InstrumentCoefficients))?;

    let mut rng = substream(config.seed, rep, Purpose::Errors);
    let s = config.sigma_ev;
    let tail = (1.0 - s * s).sqrt();
    let mut eps = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    for i in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        eps[i] = config.noise_scale * e1;
        v[i] = config.noise_scale * (s * e1 + tail * e2);
    }

    let d = &z1 * &gamma_z + v;
    let y = &d * config.alpha_true + &x * &gamma_x + eps;
    let dataset = Dataset::new(y, d, x, z1)?;
    Ok((
        dataset,
        CoefDraw {
            gamma_x,
            gamma_z,
            c_applied_x: c_x,
            c_applied_z: c_z,
        },
    ))
}
