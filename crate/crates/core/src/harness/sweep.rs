use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{run_experiment, ResultRecord};
use super::output::fmt17;
use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::math::spearman;
use crate::meta::LearnerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub gamma: f64,
    #[serde(flatten)]
    pub record: ResultRecord,
}

/// Mean RMSE per (gamma, learner), the plot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub learner: LearnerKind,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Mean RMSE of `learner` at each gamma, in grid order.
    pub fn curve(&self, learner: LearnerKind) -> (Vec<f64>, Vec<f64>) {
        self.points
            .iter()
            .filter(|p| p.learner == learner)
            .map(|p| (p.gamma, p.mean_rmse))
            .unzip()
    }

    /// Spearman correlation between gamma and the mean RMSE of `learner`.
    pub fn trend(&self, learner: LearnerKind) -> f64 {
        let (g, r) = self.curve(learner);
        spearman(&g, &r)
    }

    /// Seeds at `gamma` where `better` has RMSE at most that of `worse`.
    pub fn wins_at(&self, gamma: f64, better: LearnerKind, worse: LearnerKind) -> (usize, usize) {
        let at = |k: LearnerKind| -> Vec<(u64, f64)> {
            self.records
                .iter()
                .filter(|r| r.gamma == gamma && r.record.learner == k)
                .map(|r| (r.record.seed, r.record.rmse))
                .collect()
        };
        let (b, w) = (at(better), at(worse));
        let wins = b
            .iter()
            .filter(|(s, rb)| w.iter().any(|(s2, rw)| s2 == s && rb <= rw))
            .count();
        (wins, b.len())
    }
}

/// `base` with its DGP replaced by the overlap DGP at `gamma`, keeping any
/// other DGP parameters.
pub fn with_gamma(base: &ExperimentConfig, gamma: f64) -> Result<ExperimentConfig> {
    let spec = DgpSpec::parse(&base.dgp)?;
    if spec.base != "d3" {
        return Err(Error::InvalidArgument(format!(
            "overlap sweeps need the d3 family, got {}",
            base.dgp
        )));
    }
    let mut params = vec![format!("gamma={gamma}")];
    params.extend(
        spec.params
            .iter()
            .filter(|(k, _)| k != "gamma")
            .map(|(k, v)| format!("{k}={v}")),
    );
    Ok(ExperimentConfig {
        dgp: format!("d3:{}", params.join(",")),
        taus: vec![1],
        pairs: Vec::new(),
        ..base.clone()
    })
}

/// One experiment per gamma at `tau = 1` with the benchmark pair.
pub fn overlap_sweep(base: &ExperimentConfig, gammas: &[f64]) -> Result<SweepResult> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("gamma grid is empty".into()));
    }
    if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::InvalidArgument(
            "gamma must be finite and >= 0".into(),
        ));
    }
    let configs: Vec<ExperimentConfig> = gammas
        .iter()
        .map(|&g| with_gamma(base, g))
        .collect::<Result<_>>()?;
    let runs: Vec<_> = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut points = Vec::new();
    for (&gamma, run) in gammas.iter().zip(runs) {
        records.extend(
            run.records
                .into_iter()
                .map(|record| SweepRecord { gamma, record }),
        );
        points.extend(run.summary.into_iter().map(|s| SweepPoint {
            gamma,
            learner: s.learner,
            mean_rmse: s.mean_rmse,
            sd_rmse: s.sd_rmse,
        }));
    }
    Ok(SweepResult { records, points })
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: Vec<[String; N]>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Per-seed sweep CSV.
pub fn sweep_csv(result: &SweepResult) -> Result<Vec<u8>> {
    csv_bytes(
        [
            "gamma",
            "learner",
            "tau",
            "seed",
            "rmse",
            "walltime_s",
            "clip_fraction",
        ],
        result
            .records
            .iter()
            .map(|r| {
                [
                    fmt17(r.gamma),
                    r.record.learner.key().to_string(),
                    r.record.tau.to_string(),
                    r.record.seed.to_string(),
                    fmt17(r.record.rmse),
                    fmt17(r.record.walltime_s),
                    fmt17(r.record.clip_fraction),
                ]
            })
            .collect(),
    )
}

/// Plot data: one row per (gamma, learner).
pub fn plot_csv(result: &SweepResult) -> Result<Vec<u8>> {
    csv_bytes(
        ["gamma", "learner", "mean_rmse", "sd_rmse"],
        result
            .points
            .iter()
            .map(|p| {
                [
                    fmt17(p.gamma),
                    p.learner.key().to_string(),
                    fmt17(p.mean_rmse),
                    fmt17(p.sd_rmse),
                ]
            })
            .collect(),
    )
}

/// Write `sweep.csv` and `sweep_plot.csv` into `dir`.
pub fn emit_sweep(result: &SweepResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(result)?)?;
    fs::write(dir.join("sweep_plot.csv"), plot_csv(result)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_substitution_keeps_other_params() {
        let base = ExperimentConfig::for_dgp("d3:gamma=1,noise=variance");
        let cfg = with_gamma(&base, 6.0).unwrap();
        assert_eq!(cfg.dgp, "d3:gamma=6,noise=variance");
        assert_eq!(cfg.taus, vec![1]);
        assert!(with_gamma(&ExperimentConfig::for_dgp("d1"), 1.0).is_err());
        assert!(overlap_sweep(&base, &[]).is_err());
        assert!(overlap_sweep(&base, &[-1.0]).is_err());
    }

    #[test]
    fn trend_and_wins() {
        let rec = |gamma, learner, seed, rmse| SweepRecord {
            gamma,
            record: ResultRecord {
                learner,
                tau: 1,
                seed,
                rmse,
                walltime_s: 0.0,
                clip_fraction: 0.0,
                weight_spread: 0.0,
            },
        };
        let pt = |gamma, learner, mean_rmse| SweepPoint {
            gamma,
            learner,
            mean_rmse,
            sd_rmse: 0.0,
        };
        let res = SweepResult {
            records: vec![
                rec(8.0, LearnerKind::Dr, 0, 1.0),
                rec(8.0, LearnerKind::IvwDr, 0, 0.5),
                rec(8.0, LearnerKind::Dr, 1, 1.0),
                rec(8.0, LearnerKind::IvwDr, 1, 1.5),
            ],
            points: vec![
                pt(0.0, LearnerKind::Dr, 0.1),
                pt(4.0, LearnerKind::Dr, 0.3),
                pt(8.0, LearnerKind::Dr, 0.9),
            ],
        };
        assert!((res.trend(LearnerKind::Dr) - 1.0).abs() < 1e-12);
        assert_eq!(
            res.wins_at(8.0, LearnerKind::IvwDr, LearnerKind::Dr),
            (1, 2)
        );
        let text = String::from_utf8(plot_csv(&res).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
}
