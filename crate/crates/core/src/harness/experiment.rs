use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::codec::FeatureCodec;
use crate::dgp::{
    dgp_from_name, oracle_cate_with, oracle_response_auto, simulate_panel, Dgp, OracleOptions,
};
use crate::error::{Error, Result};
use crate::meta::{fit_meta, predict_cate, Estimand, LearnerKind};
use crate::nuisance::{fit_nuisances, make_split, NuisanceNeeds, NuisanceSpec};
use crate::panel::{HistoryView, InterventionPair, Panel};
use crate::rng::{derive_seed, label};

/// One (learner, horizon, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub learner: LearnerKind,
    pub tau: usize,
    pub seed: u64,
    pub rmse: f64,
    pub walltime_s: f64,
    pub clip_fraction: f64,
    /// Standard deviation of the second-stage weights.
    pub weight_spread: f64,
}

/// Mean and sample standard deviation of the RMSE over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub learner: LearnerKind,
    pub tau: usize,
    pub n_seeds: usize,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Root-mean-square difference.
pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    crate::math::rmse(pred, truth)
}

/// Ground truth at `h`: closed form or enumeration when available, Monte
/// Carlo with common random numbers otherwise.
pub fn true_effect(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    pair: &InterventionPair,
    estimand: Estimand,
    opts: &OracleOptions,
) -> Result<f64> {
    match estimand {
        Estimand::Capo => Ok(oracle_response_auto(dgp, h, &pair.a, opts)?.mean),
        Estimand::Cate => match (
            dgp.exact_response(h, &pair.a),
            dgp.exact_response(h, &pair.b),
        ) {
            (Some(a), Some(b)) => Ok(a - b),
            _ => Ok(oracle_cate_with(dgp, h, pair, opts)?.mean),
        },
    }
}

/// Test histories: every anchor with room for the horizon, or only `eval_t`.
pub fn evaluation_histories(
    panel: &Panel,
    tau: usize,
    eval_t: Option<usize>,
) -> Vec<HistoryView<'_>> {
    panel
        .trajectories()
        .iter()
        .flat_map(|tr| {
            let ts: Vec<usize> = match eval_t {
                Some(t) => vec![t],
                None => (1..=tr.len().saturating_sub(tau)).collect(),
            };
            ts.into_iter()
                .filter(move |&t| t >= 1 && t + tau <= tr.len())
                .map(move |t| tr.history(t).expect("anchor within trajectory"))
        })
        .collect()
}

fn truths(
    dgp: &dyn Dgp,
    hs: &[HistoryView<'_>],
    pair: &InterventionPair,
    estimand: Estimand,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    hs.par_iter()
        .enumerate()
        .map(|(i, h)| {
            let opts = OracleOptions::new(n_mc, derive_seed(seed, &[i as u64]));
            true_effect(dgp, h, pair, estimand, &opts)
        })
        .collect()
}

fn needs_for(learners: &[LearnerKind]) -> NuisanceNeeds {
    NuisanceNeeds {
        responses: learners.iter().any(|k| k.needs_responses()),
        propensity: learners.iter().any(|k| k.needs_propensity()),
        history: learners.iter().any(|k| k.needs_history()),
    }
}

fn run_seed(cfg: &ExperimentConfig, dgp: &Arc<dyn Dgp>, seed: u64) -> Result<Vec<ResultRecord>> {
    let train = simulate_panel(
        dgp.as_ref(),
        cfg.n_train(),
        derive_seed(seed, &[label("train")]),
    )?;
    let test = simulate_panel(
        dgp.as_ref(),
        cfg.n_test,
        derive_seed(seed, &[label("test")]),
    )?;
    let codec = FeatureCodec::for_panel(&train, cfg.encoding, cfg.include_time_index)?;
    let mut out = Vec::new();
    for pair in cfg.resolved_pairs() {
        let tau = pair.tau();
        let pair_seed = derive_seed(
            seed,
            &[label("pair"), tau as u64, label(&format!("{pair:?}"))],
        );
        let split = make_split(
            &train,
            tau,
            cfg.split,
            derive_seed(pair_seed, &[label("split")]),
        )?;
        let spec = NuisanceSpec {
            seed: derive_seed(pair_seed, &[label("nuisance")]),
            ..cfg.nuisance.clone()
        };
        let started = Instant::now();
        let needs = needs_for(&cfg.learners);
        let ctx = |e: Error| e.context(format!("nuisances (tau = {tau}, seed = {seed})"));
        let nuisances = match fit_nuisances(&train, &codec, &pair, &spec, &split, needs) {
            Err(e) if needs.history && matches!(e.root(), Error::PathUnobserved { .. }) => {
                // the plug-in history learner cannot run; the others still can
                log::warn!("seed {seed} tau {tau}: {e}; skipping {}", LearnerKind::PiHa);
                let needs = NuisanceNeeds {
                    history: false,
                    ..needs
                };
                fit_nuisances(&train, &codec, &pair, &spec, &split, needs).map_err(ctx)?
            }
            r => r.map_err(ctx)?,
        };
        let nuisance_time = started.elapsed().as_secs_f64();
        let hs = evaluation_histories(&test, tau, cfg.eval_t);
        let truth = truths(
            dgp.as_ref(),
            &hs,
            &pair,
            cfg.meta.estimand,
            cfg.oracle_budget(),
            derive_seed(pair_seed, &[label("oracle")]),
        )?;
        for &kind in &cfg.learners {
            if kind.needs_history() && !nuisances.has_history() {
                continue;
            }
            let ctx = |e: Error| e.context(format!("learner {kind}, tau = {tau}, seed = {seed}"));
            let started = Instant::now();
            let meta = crate::meta::MetaSpec {
                seed: derive_seed(pair_seed, &[label(kind.key())]),
                ..cfg.meta.clone()
            };
            let model = fit_meta(kind, &train, &nuisances, &meta).map_err(ctx)?;
            let elapsed = started.elapsed().as_secs_f64() + nuisance_time;
            let pred = predict_cate(&model, &hs).map_err(ctx)?;
            let value = rmse(&pred, &truth);
            if !value.is_finite() {
                return Err(ctx(Error::InvalidArgument("non-finite RMSE".into())));
            }
            log::info!("seed {seed} tau {tau} {kind}: rmse {value:.4}");
            out.push(ResultRecord {
                learner: kind,
                tau,
                seed,
                rmse: value,
                walltime_s: if cfg.record_timing { elapsed } else { 0.0 },
                clip_fraction: model.diagnostics.clip_fraction,
                weight_spread: model.diagnostics.weight_sd,
            });
        }
    }
    Ok(out)
}

/// Mean and standard deviation of the RMSE per (learner, tau), in first-seen order.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(LearnerKind, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.learner, r.tau)) {
            keys.push((r.learner, r.tau));
        }
    }
    keys.into_iter()
        .map(|(learner, tau)| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.learner == learner && r.tau == tau)
                .map(|r| r.rmse)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                learner,
                tau,
                n_seeds: v.len(),
                mean_rmse: mean,
                sd_rmse: sd,
            }
        })
        .collect()
}

/// Simulate, fit and evaluate every learner for every pair and seed.
///
/// Seeds run as independent jobs; each derives all of its randomness from
/// its own seed, so the records do not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dgp = dgp_from_name(&cfg.dgp)?;
    let per_seed: Vec<Vec<ResultRecord>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &dgp, seed))
        .collect::<Result<_>>()?;
    let mut records: Vec<ResultRecord> = per_seed.into_iter().flatten().collect();
    // seed-major order from the jobs; present learner-major within tau
    records.sort_by_key(|r| {
        (
            r.tau,
            cfg.learners
                .iter()
                .position(|k| *k == r.learner)
                .unwrap_or(usize::MAX),
            cfg.seeds
                .iter()
                .position(|s| *s == r.seed)
                .unwrap_or(usize::MAX),
        )
    });
    let summary = summarize(&records);
    Ok(ExperimentResult { records, summary })
}
