//! Monte Carlo harness: replications of DGP → estimator → inference and
//! the summary statistics reported per estimator.
//!
//! Replications are independent and may run on any number of workers.
//! Results land in a slot per replication index and are reduced in index
//! order, so every statistic except timing is independent of scheduling.

use std::fmt::Write as _;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::dgp::{generate, SimConfig};
use crate::error::{Error, Result};
use crate::rjive::{rjive, RjiveConfig};
use crate::rng::{substream, Purpose};
use crate::two_step::{tsrr, EstimateResult, Estimator, PenaltyPlan};

/// Nominal level of the reported intervals.
pub const MC_LEVEL: f64 = 0.95;
/// A panel fails when more than this share of replications fail.
pub const MAX_FAILED_SHARE: f64 = 0.2;

/// Text placed next to every emitted table.
pub const BIAS_VAR_NOTE: &str =
    "Bias (Var.) = mean over replications of the estimated Var(alpha_hat) (sigma_alpha^2 / n2) minus the across-replication variance of alpha_hat (divisor R).";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub estimator: Estimator,
    pub alpha_hat: f64,
    pub sigma_alpha2: f64,
    /// Observations behind the variance, so that `sigma_alpha2 / n_eff`
    /// estimates `Var(α̂)`.
    pub n_eff: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub elapsed_s: f64,
    pub failure: Option<String>,
}

impl RepRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    fn from_result(rep: usize, estimator: Estimator, alpha_true: f64, elapsed_s: f64, res: Result<EstimateResult>) -> Self {
        match res {
            Ok(r) => RepRecord {
                rep,
                estimator,
                alpha_hat: r.alpha_hat,
                sigma_alpha2: r.sigma_alpha2,
                n_eff: r.n2,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                covered: r.covers(alpha_true),
                elapsed_s,
                failure: None,
            },
            Err(e) => RepRecord {
                rep,
                estimator,
                alpha_hat: f64::NAN,
                sigma_alpha2: f64::NAN,
                n_eff: 0,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
                covered: false,
                elapsed_s,
                failure: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub bias: f64,
    pub bias_var: f64,
    pub mse: f64,
    pub p_cover: f64,
    pub length: f64,
    pub time_s: f64,
    pub n_reps_used: usize,
    pub n_failed: usize,
}

/// Runs `estimator` on an already generated replication, with the split and
/// penalties the Monte Carlo harness uses.
pub fn run_estimator(config: &SimConfig, estimator: Estimator, dataset: &Dataset, rep: usize) -> Result<EstimateResult> {
    let r = config.alpha_true;
    match estimator {
        Estimator::Tsrr => {
            let mut split_rng = substream(config.seed, rep as u64, Purpose::Split);
            let split = split_indices(dataset.n(), config.split_fraction, split_rng.next_u64())?;
            tsrr(dataset, &PenaltyPlan::tuned(config.c_x, config.c_z), &split, r, MC_LEVEL)
        }
        Estimator::Rjive => {
            let rj = RjiveConfig {
                lambda: config.rjive_lambda,
                partial_controls: config.rjive_partial_controls,
                c_x: config.c_x,
                ..Default::default()
            };
            rjive(dataset, &rj, r, MC_LEVEL)
        }
    }
}

fn check_rep(config: &SimConfig, rep: usize) -> Result<()> {
    if rep >= config.n_reps {
        return Err(Error::InvalidArgument(format!(
            "replication {rep} outside [0, {})",
            config.n_reps
        )));
    }
    Ok(())
}

fn replicate_all(config: &SimConfig, estimators: &[Estimator], rep: usize) -> Result<Vec<RepRecord>> {
    check_rep(config, rep)?;
    let (dataset, _) = generate(config, rep)?;
    Ok(estimators
        .iter()
        .map(|&est| {
            let start = Instant::now();
            let res = run_estimator(config, est, &dataset, rep);
            RepRecord::from_result(rep, est, config.alpha_true, start.elapsed().as_secs_f64(), res)
        })
        .collect())
}

/// One replication of one estimator. Estimator failures are returned as
/// failed records; only an out-of-range `rep` or an invalid config is an
/// error.
pub fn run_replication(config: &SimConfig, estimator: Estimator, rep: usize) -> Result<RepRecord> {
    Ok(replicate_all(config, &[estimator], rep)?.remove(0))
}

/// Summary statistics over the successful records.
pub fn summarize(records: &[RepRecord], alpha_true: f64) -> Result<McSummary> {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let n_failed = records.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::InvalidArgument("no successful replications to summarize".into()));
    }
    let r = ok.len() as f64;
    let mean = |f: &dyn Fn(&RepRecord) -> f64| ok.iter().map(|rec| f(rec)).sum::<f64>() / r;
    let mean_alpha = mean(&|rec| rec.alpha_hat);
    let var_alpha = mean(&|rec| (rec.alpha_hat - mean_alpha).powi(2));
    let covered = ok.iter().filter(|rec| rec.covered).count();
    Ok(McSummary {
        bias: mean_alpha - alpha_true,
        bias_var: mean(&|rec| rec.sigma_alpha2 / rec.n_eff as f64) - var_alpha,
        mse: mean(&|rec| (rec.alpha_hat - alpha_true).powi(2)),
        p_cover: covered as f64 / r,
        length: mean(&|rec| rec.ci_high - rec.ci_low),
        time_s: mean(&|rec| rec.elapsed_s),
        n_reps_used: ok.len(),
        n_failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub estimator: Estimator,
    pub summary: McSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelResult {
    pub rows: Vec<PanelRow>,
    /// Every record, ordered by estimator then replication.
    pub records: Vec<RepRecord>,
}

impl PanelResult {
    pub fn summary(&self, estimator: Estimator) -> Option<&McSummary> {
        self.rows.iter().find(|r| r.estimator == estimator).map(|r| &r.summary)
    }

    pub fn records_for(&self, estimator: Estimator) -> impl Iterator<Item = &RepRecord> {
        self.records.iter().filter(move |r| r.estimator == estimator)
    }

    /// `estimator,bias,bias_var,mse,p_cover,length,time_s,n_failed`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,bias,bias_var,mse,p_cover,length,time_s,n_failed\n");
        for row in &self.rows {
            let s = &row.summary;
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                row.estimator, s.bias, s.bias_var, s.mse, s.p_cover, s.length, s.time_s, s.n_failed
            )
            .expect("write to String");
        }
        out
    }

    /// One line per record; floats in shortest round-trip form.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("estimator,rep,alpha_hat,sigma_alpha2,n_eff,ci_low,ci_high,covered,elapsed_s,failure\n");
        for r in &self.records {
            let failure = r.failure.as_deref().unwrap_or("").replace(['"', ','], ";");
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.estimator, r.rep, r.alpha_hat, r.sigma_alpha2, r.n_eff, r.ci_low, r.ci_high, r.covered, r.elapsed_s, failure
            )
            .expect("write to String");
        }
        out
    }

    /// Aligned text table in the `Bias / Bias (Var.) / MSE / P-Cover /
    /// Length / Time` layout.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        writeln!(out, "{title}").unwrap();
        let rule = "-".repeat(78);
        writeln!(out, "{rule}").unwrap();
        writeln!(
            out,
            "{:<8}{:>10}{:>13}{:>10}{:>10}{:>10}{:>10}{:>7}",
            "", "Bias", "Bias (Var.)", "MSE", "P-Cover", "Length", "Time", "Fail"
        )
        .unwrap();
        writeln!(out, "{rule}").unwrap();
        for row in &self.rows {
            let s = &row.summary;
            writeln!(
                out,
                "{:<8}{:>10.4}{:>13.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>7}",
                row.estimator.to_string(),
                s.bias,
                s.bias_var,
                s.mse,
                s.p_cover,
                s.length,
                s.time_s,
                s.n_failed
            )
            .unwrap();
        }
        writeln!(out, "{rule}").unwrap();
        writeln!(out, "{BIAS_VAR_NOTE}").unwrap();
        out
    }
}

/// Runs every replication of `config` for each estimator on `threads`
/// workers. All estimators see the same generated datasets.
pub fn run_panel(config: &SimConfig, estimators: &[Estimator], threads: usize) -> Result<PanelResult> {
    config.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<RepRecord>> = pool.install(|| {
        (0..config.n_reps)
            .into_par_iter()
            .map(|rep| replicate_all(config, estimators, rep))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::with_capacity(estimators.len());
    let mut records = Vec::with_capacity(estimators.len() * config.n_reps);
    for (k, &est) in estimators.iter().enumerate() {
        let recs: Vec<RepRecord> = per_rep.iter().map(|r| r[k].clone()).collect();
        let failed = recs.iter().filter(|r| !r.succeeded()).count();
        if failed as f64 > MAX_FAILED_SHARE * recs.len() as f64 {
            return Err(Error::PanelFailed {
                failed,
                total: recs.len(),
            });
        }
        rows.push(PanelRow {
            estimator: est,
            summary: summarize(&recs, config.alpha_true)?,
        });
        records.extend(recs);
    }
    Ok(PanelResult { rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{CorrKind, InstrumentPattern};

    fn record(rep: usize, alpha_hat: f64, ci: (f64, f64), sigma_alpha2: f64, n_eff: usize) -> RepRecord {
        RepRecord {
            rep,
            estimator: Estimator::Tsrr,
            alpha_hat,
            sigma_alpha2,
            n_eff,
            ci_low: ci.0,
            ci_high: ci.1,
            covered: ci.0 <= 1.0 && 1.0 <= ci.1,
            elapsed_s: 0.5,
            failure: None,
        }
    }

    fn tiny() -> SimConfig {
        let mut cfg = SimConfig::preset("sparse-A").unwrap();
        cfg.n = 80;
        cfg.p_x = 12;
        cfg.p_z1 = 10;
        cfg.n_reps = 12;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn summary_arithmetic() {
        let recs = [record(0, 1.1, (0.5, 1.5), 0.0, 10), record(1, 0.9, (1.2, 1.4), 0.0, 10)];
        let s = summarize(&recs, 1.0).unwrap();
        assert!(s.bias.abs() < 1e-15);
        assert!((s.mse - 0.01).abs() < 1e-15);
        assert_eq!(s.p_cover, 0.5);
        assert!((s.length - 0.6).abs() < 1e-15);
        assert_eq!(s.time_s, 0.5);
        assert_eq!((s.n_reps_used, s.n_failed), (2, 0));
    }

    #[test]
    fn bias_var_vanishes_for_calibrated_variances() {
        // across-rep variance of {1.1, 0.9} is 0.01; σ̂²/n = 0.01 in every rep
        let recs = [record(0, 1.1, (0.0, 2.0), 1.0, 100), record(1, 0.9, (0.0, 2.0), 1.0, 100)];
        assert!(summarize(&recs, 1.0).unwrap().bias_var.abs() < 1e-15);
    }

    #[test]
    fn failed_records_are_excluded() {
        let mut bad = record(2, f64::NAN, (f64::NAN, f64::NAN), f64::NAN, 0);
        bad.failure = Some("weak identification".into());
        bad.covered = false;
        let recs = [record(0, 1.2, (0.0, 2.0), 1.0, 10), bad.clone()];
        let s = summarize(&recs, 1.0).unwrap();
        assert_eq!((s.n_reps_used, s.n_failed), (1, 1));
        assert!((s.bias - 0.2).abs() < 1e-12);
        assert!(summarize(&[bad], 1.0).is_err());
        assert!(summarize(&[], 1.0).is_err());
    }

    #[test]
    fn mse_decomposes() {
        let recs: Vec<RepRecord> = (0..40)
            .map(|i| {
                let a = 1.0 + ((i * 37 % 11) as f64 - 4.0) / 7.0;
                record(i, a, (a - 0.3, a + 0.3), 2.0, 50)
            })
            .collect();
        let s = summarize(&recs, 1.0).unwrap();
        let mean = recs.iter().map(|r| r.alpha_hat).sum::<f64>() / 40.0;
        let var = recs.iter().map(|r| (r.alpha_hat - mean).powi(2)).sum::<f64>() / 40.0;
        assert!((s.mse - (var + s.bias * s.bias)).abs() <= 1e-12 * s.mse);
        assert!(s.mse >= s.bias * s.bias * (1.0 - 1.0 / 40.0));
    }

    #[test]
    fn replication_is_deterministic() {
        let cfg = tiny();
        for est in [Estimator::Tsrr, Estimator::Rjive] {
            let mut a = run_replication(&cfg, est, 3).unwrap();
            let mut b = run_replication(&cfg, est, 3).unwrap();
            a.elapsed_s = 0.0;
            b.elapsed_s = 0.0;
            assert_eq!(a, b);
            assert!(a.succeeded());
            assert_eq!(a.covered, a.ci_low <= cfg.alpha_true && cfg.alpha_true <= a.ci_high);
        }
    }

    #[test]
    fn replication_index_is_bounded() {
        let cfg = tiny();
        assert!(run_replication(&cfg, Estimator::Tsrr, cfg.n_reps).is_err());
        assert!(run_replication(&cfg, Estimator::Tsrr, cfg.n_reps - 1).is_ok());
    }

    #[test]
    fn noiseless_design_is_recovered() {
        let mut cfg = tiny();
        cfg.noise_scale = 0.0;
        cfg.m = 0.0;
        cfg.gamma_x_pattern = crate::dgp::ControlPattern::NonsparseDense;
        cfg.density_x = 0.0;
        cfg.alpha_true = 1.3;
        for est in [Estimator::Tsrr, Estimator::Rjive] {
            let rec = run_replication(&cfg, est, 0).unwrap();
            assert!((rec.alpha_hat - 1.3).abs() <= 1e-6 * 1.3, "{est}: {}", rec.alpha_hat);
        }
    }

    #[test]
    fn panel_is_independent_of_worker_count() {
        let mut cfg = tiny();
        cfg.corr = CorrKind::Ec;
        cfg.rho = 0.1;
        cfg.gamma_z_pattern = InstrumentPattern::Cutoff;
        let one = run_panel(&cfg, &[Estimator::Tsrr, Estimator::Rjive], 1).unwrap();
        let four = run_panel(&cfg, &[Estimator::Tsrr, Estimator::Rjive], 4).unwrap();
        let strip = |p: &PanelResult| {
            let mut p = p.clone();
            p.records.iter_mut().for_each(|r| r.elapsed_s = 0.0);
            p.rows.iter_mut().for_each(|r| r.summary.time_s = 0.0);
            p
        };
        assert_eq!(strip(&one), strip(&four));
        assert_eq!(one.records.len(), 2 * cfg.n_reps);
    }

    #[test]
    fn coverage_recomputes_from_endpoints() {
        let cfg = tiny();
        let panel = run_panel(&cfg, &[Estimator::Tsrr], 1).unwrap();
        let s = panel.summary(Estimator::Tsrr).unwrap();
        let recs: Vec<&RepRecord> = panel.records_for(Estimator::Tsrr).filter(|r| r.succeeded()).collect();
        let covered = recs.iter().filter(|r| r.ci_low <= cfg.alpha_true && cfg.alpha_true <= r.ci_high).count();
        assert_eq!(s.p_cover, covered as f64 / recs.len() as f64);
    }

    #[test]
    fn tables_render() {
        let cfg = tiny();
        let panel = run_panel(&cfg, &[Estimator::Tsrr, Estimator::Rjive], 1).unwrap();
        let csv = panel.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "estimator,bias,bias_var,mse,p_cover,length,time_s,n_failed");
        assert!(lines[1].starts_with("TSRR,") && lines[2].starts_with("RJIVE,"));
        assert_eq!(lines[1].split(',').count(), 8);
        let table = panel.to_table("sparse");
        assert!(table.contains("P-Cover") && table.contains(BIAS_VAR_NOTE));
        assert!(run_panel(&cfg, &[], 1).is_err());
    }
}
