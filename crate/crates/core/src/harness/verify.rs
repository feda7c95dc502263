//! Monte-Carlo verification suites for the estimator identities.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::evaluation_histories;
use crate::codec::{EncodingScheme, FeatureCodec, RowWeighting};
use crate::dgp::{
    continue_observational, make_d1, make_d2, make_linear, simulate_panel, BinaryChainDgp, Dgp,
    OracleOptions,
};
use crate::error::{Error, Result};
use crate::learners::RegressorSpec;
use crate::math::{mean_se, rmse, sample_var};
use crate::meta::{
    fit_meta, fit_v_model, ivw_realized, predict_cate, pseudo_dr, pseudo_table, pseudo_value,
    row_inputs, Estimand, InputNeeds, LearnerKind, MetaSpec,
};
use crate::nuisance::{
    fit_response_iterative, make_split, split_ids, NuisanceSet, PropensitySource, ResponseSource,
};
use crate::panel::{HistoryView, InterventionPair, Panel, Trajectory};
use crate::rng::{derive_seed, label, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    IvwVariance,
    EifMean,
    DoubleRobust,
    IpwUnbiased,
    GcompBruteforce,
    StaticReduction,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::IvwVariance,
        Suite::EifMean,
        Suite::DoubleRobust,
        Suite::IpwUnbiased,
        Suite::GcompBruteforce,
        Suite::StaticReduction,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Suite::IvwVariance => "ivw-variance",
            Suite::EifMean => "eif-mean",
            Suite::DoubleRobust => "double-robust",
            Suite::IpwUnbiased => "ipw-unbiased",
            Suite::GcompBruteforce => "gcomp-bruteforce",
            Suite::StaticReduction => "static-reduction",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.key() == s.trim())
            .ok_or_else(|| Error::Unknown {
                what: "verification suite",
                name: s.to_string(),
            })
    }
}

/// Monte-Carlo budget: `scale` multiplies every sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub scale: f64,
    pub seed: u64,
}

impl Budget {
    pub fn full(seed: u64) -> Self {
        Self { scale: 1.0, seed }
    }

    /// One tenth of the full budget.
    pub fn fast(seed: u64) -> Self {
        Self { scale: 0.1, seed }
    }

    pub fn n(&self, full: usize) -> usize {
        ((full as f64 * self.scale).round() as usize).max(100)
    }
}

/// One measured statistic against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `statistic <= tolerance`.
    pub fn at_most(
        name: impl Into<String>,
        statistic: f64,
        tolerance: f64,
        detail: String,
    ) -> Self {
        Self {
            name: name.into(),
            statistic,
            tolerance,
            passed: statistic <= tolerance,
            detail,
        }
    }

    /// Passes when `statistic > tolerance`.
    pub fn above(name: impl Into<String>, statistic: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            statistic,
            tolerance,
            passed: statistic > tolerance,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: statistic {:.5} vs tolerance {:.5} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.statistic,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub elapsed_s: f64,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} ({:.1}s)",
            self.suite,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed_s
        )?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

/// Run a suite at the given budget.
pub fn verify(suite: Suite, budget: &Budget) -> Result<VerifyReport> {
    let started = Instant::now();
    let seed = budget.seed;
    let checks = match suite {
        Suite::IvwVariance => (0..=2)
            .map(|tau| ivw_variance_check(0.5, tau, budget.n(1_000_000), seed))
            .collect::<Result<_>>()?,
        Suite::EifMean => {
            let mut out = Vec::new();
            for tau in 0..=1 {
                out.push(eif_mean_check(tau, budget.n(200_000), seed)?);
                out.push(eif_second_stage_check(tau, budget.n(50_000), seed)?);
            }
            out
        }
        Suite::DoubleRobust => double_robust_checks(budget.n(100_000), seed)?,
        Suite::IpwUnbiased => (0..=1)
            .map(|tau| ipw_unbiased_check(tau, budget.n(100_000), seed))
            .collect::<Result<_>>()?,
        Suite::GcompBruteforce => (0..=2)
            .map(|tau| gcomp_bruteforce_check(tau, budget.n(50_000), seed))
            .collect::<Result<_>>()?,
        Suite::StaticReduction => static_reduction_checks(budget.n(100_000), seed)?,
    };
    let passed = checks.iter().all(|c: &Check| c.passed);
    Ok(VerifyReport {
        suite,
        checks,
        passed,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

fn oracle_set(
    dgp: Arc<dyn Dgp>,
    pair: &InterventionPair,
    n: usize,
    seed: u64,
) -> Result<NuisanceSet> {
    let codec = FeatureCodec::new(
        dgp.horizon(),
        EncodingScheme::Windowed(1),
        true,
        1,
        dgp.treatment_arity(),
    )?;
    let split = split_ids(n, pair.tau(), false, 0)?;
    Ok(NuisanceSet::oracle(
        dgp,
        codec,
        pair.clone(),
        0.01,
        OracleOptions::new(2000, seed),
    )?
    .with_split(split))
}

/// Mean over trajectories of the per-trajectory average pseudo-outcome,
/// with its standard error (anchors within a trajectory are dependent).
pub fn pooled_pseudo_mean(
    kind: LearnerKind,
    estimand: Estimand,
    panel: &Panel,
    nuisances: &NuisanceSet,
) -> Result<(f64, f64)> {
    let pair = &nuisances.pair;
    let tau = pair.tau();
    let needs = InputNeeds::of(kind);
    let per_traj: Vec<f64> = panel
        .trajectories()
        .par_iter()
        .map(|tr| -> Result<f64> {
            let n = tr.len() - tau;
            let mut s = 0.0;
            for t in 1..=n {
                let row = row_inputs(nuisances, tr, t, needs)?;
                s += pseudo_value(kind, estimand, &row, pair)?;
            }
            Ok(s / n as f64)
        })
        .collect::<Result<_>>()?;
    Ok(mean_se(&per_traj))
}

fn within_se(name: String, mean: f64, se: f64, truth: f64) -> Check {
    let z = (mean - truth).abs() / se;
    Check::at_most(
        name,
        z,
        3.0,
        format!("mean {mean:.5}, se {se:.5}, truth {truth}"),
    )
}

/// Variance identity at a pinned history of the linear DGP: the sample
/// variance of the doubly robust pseudo-outcome for arm `a` over `n`
/// observational rollouts, relative to `sigma^2` times the mean realized `V^a`.
pub fn ivw_variance_check(sigma: f64, tau: usize, n: usize, seed: u64) -> Result<Check> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_linear(sigma)?);
    let pair = InterventionPair::benchmark(tau);
    // exact oracle propensities, unclipped
    let set = oracle_set(dgp.clone(), &pair, 0, seed)?.with_clipping(false);
    let (x0, a0, y0) = (vec![0.3, -0.2], vec![1usize], vec![0.4]);
    let t = x0.len();
    const BLOCK: usize = 4096;
    let blocks = n.div_ceil(BLOCK);
    let seed = derive_seed(seed, &[label("ivw-variance"), tau as u64]);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = stream_rng(seed, b as u64);
            let m = BLOCK.min(n - b * BLOCK);
            let (mut dr, mut v) = (Vec::with_capacity(m), Vec::with_capacity(m));
            for _ in 0..m {
                let (mut xs, mut a_seq, mut ys) = (x0.clone(), a0.clone(), y0.clone());
                continue_observational(
                    dgp.as_ref(),
                    &mut xs,
                    &mut a_seq,
                    &mut ys,
                    t + tau,
                    &mut rng,
                );
                let traj = Trajectory::scalar(xs, a_seq, ys);
                let row = row_inputs(
                    &set,
                    &traj,
                    t,
                    InputNeeds {
                        propensity: true,
                        responses: true,
                        arm_propensity: false,
                    },
                )?;
                dr.push(pseudo_dr(&row, &pair).0);
                v.push(ivw_realized(&row, &pair).0);
            }
            Ok((dr, v))
        })
        .collect::<Result<_>>()?;
    let (dr, v): (Vec<f64>, Vec<f64>) =
        parts.into_iter().fold((vec![], vec![]), |mut acc, (d, w)| {
            acc.0.extend(d);
            acc.1.extend(w);
            acc
        });
    let var = sample_var(&dr);
    let predicted = sigma * sigma * v.iter().sum::<f64>() / v.len() as f64;
    let rel = (var / predicted - 1.0).abs();
    Ok(Check::at_most(
        format!("ivw-variance tau={tau}"),
        rel,
        0.05,
        format!("MC variance {var:.5} vs sigma^2 E[V] {predicted:.5} over {n} rollouts"),
    ))
}

/// Unconditional mean of the doubly robust CATE pseudo-outcome with oracle
/// nuisances on D1 against the closed-form effect 0.5.
pub fn eif_mean_check(tau: usize, n: usize, seed: u64) -> Result<Check> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d1());
    let panel = simulate_panel(
        dgp.as_ref(),
        n,
        derive_seed(seed, &[label("eif"), tau as u64]),
    )?;
    let set = oracle_set(dgp, &InterventionPair::benchmark(tau), n, seed)?;
    let (mean, se) = pooled_pseudo_mean(LearnerKind::Dr, Estimand::Cate, &panel, &set)?;
    Ok(within_se(
        format!("eif-mean tau={tau} (n={n})"),
        mean,
        se,
        0.5,
    ))
}

/// Second-stage DR regression on oracle pseudo-outcomes; RMSE against the
/// constant effect over pooled test histories.
pub fn eif_second_stage_check(tau: usize, n: usize, seed: u64) -> Result<Check> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d1());
    let train = simulate_panel(
        dgp.as_ref(),
        n,
        derive_seed(seed, &[label("eif-fit"), tau as u64]),
    )?;
    let test = simulate_panel(
        dgp.as_ref(),
        1000,
        derive_seed(seed, &[label("eif-test"), tau as u64]),
    )?;
    let set = oracle_set(dgp, &InterventionPair::benchmark(tau), n, seed)?;
    let model = fit_meta(
        LearnerKind::Dr,
        &train,
        &set,
        &MetaSpec {
            seed,
            ..MetaSpec::default()
        },
    )?;
    let hs = evaluation_histories(&test, tau, None);
    let pred = predict_cate(&model, &hs)?;
    let err = rmse(&pred, &vec![0.5; pred.len()]);
    Ok(Check::at_most(
        format!("eif-second-stage tau={tau} (n={n})"),
        err,
        0.05,
        format!("RMSE of the DR fit against 0.5 over {} histories", hs.len()),
    ))
}

/// Bias of the DR pseudo-outcome on D2 at `tau = 1` when one nuisance
/// family is corrupted (unbiased), and when both are (biased).
pub fn double_robust_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let pair = InterventionPair::benchmark(1);
    let panel = simulate_panel(
        dgp.as_ref(),
        n,
        derive_seed(seed, &[label("double-robust")]),
    )?;
    let oracle = oracle_set(dgp, &pair, n, seed)?;
    let bad_pi = PropensitySource::Constant { value: 0.5 };
    let bad_mu = ResponseSource::Constant { value: 0.0 };
    let mut out = Vec::new();
    let set = oracle.clone().with_propensity(bad_pi.clone());
    let (m, se) = pooled_pseudo_mean(LearnerKind::Dr, Estimand::Cate, &panel, &set)?;
    out.push(within_se(
        "double-robust oracle mu, pi = 0.5".into(),
        m,
        se,
        0.5,
    ));
    let set = oracle.clone().with_responses(bad_mu.clone());
    let (m, se) = pooled_pseudo_mean(LearnerKind::Dr, Estimand::Cate, &panel, &set)?;
    out.push(within_se(
        "double-robust oracle pi, mu = 0".into(),
        m,
        se,
        0.5,
    ));
    let set = oracle.with_propensity(bad_pi).with_responses(bad_mu);
    let (m, se) = pooled_pseudo_mean(LearnerKind::Dr, Estimand::Cate, &panel, &set)?;
    out.push(Check::above(
        "double-robust negative control (both corrupted)",
        (m - 0.5).abs(),
        0.05,
        format!("|bias| must exceed the tolerance: mean {m:.5}, se {se:.5}"),
    ));
    Ok(out)
}

/// IPW pseudo-outcome mean with oracle propensities on D2.
pub fn ipw_unbiased_check(tau: usize, n: usize, seed: u64) -> Result<Check> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(
        dgp.as_ref(),
        n,
        derive_seed(seed, &[label("ipw"), tau as u64]),
    )?;
    let set = oracle_set(dgp, &InterventionPair::benchmark(tau), n, seed)?;
    let (mean, se) = pooled_pseudo_mean(LearnerKind::Ipw, Estimand::Cate, &panel, &set)?;
    Ok(within_se(
        format!("ipw-unbiased tau={tau} (n={n})"),
        mean,
        se,
        0.5,
    ))
}

/// Lookup-table iterated regressions on the binary-chain DGP against
/// exhaustive enumeration; the statistic is the largest error over every
/// level and every history reached on the path in a test panel.
pub fn gcomp_bruteforce_check(tau: usize, n: usize, seed: u64) -> Result<Check> {
    let dgp = BinaryChainDgp::default();
    let panel = simulate_panel(&dgp, n, derive_seed(seed, &[label("gcomp"), tau as u64]))?;
    let test = simulate_panel(
        &dgp,
        5000,
        derive_seed(seed, &[label("gcomp-test"), tau as u64]),
    )?;
    let codec = FeatureCodec::for_panel(&panel, EncodingScheme::Windowed(1), false)?;
    let pair = InterventionPair::benchmark(tau);
    let split = make_split(&panel, tau, false, 0)?;
    let mut worst: f64 = 0.0;
    let mut evaluated = 0usize;
    for path in [&pair.a, &pair.b] {
        let models = fit_response_iterative(
            &panel,
            &codec,
            path,
            &RegressorSpec::lookup(),
            &split,
            RowWeighting::Uniform,
        )?;
        for (j, m) in models.iter().enumerate() {
            for tr in test.trajectories() {
                for t in 1..=tr.len() - tau {
                    if !tr.follows(t, &path[..j]) {
                        continue;
                    }
                    let h = tr.history(t + j)?;
                    let exact = dgp.exact_response(&h, &path[j..]).expect("enumerable");
                    worst = worst.max((m.predict(&codec.encode(&h)?)? - exact).abs());
                    evaluated += 1;
                }
            }
        }
    }
    Ok(Check::at_most(
        format!("gcomp-bruteforce tau={tau} (n={n})"),
        worst,
        0.02,
        format!("max |fit - enumeration| over {evaluated} level histories"),
    ))
}

/// At `tau = 0` with oracle propensities on D2: the closed form
/// `1 / E[V | h] = pi (1 - pi)` and the fitted variance model's inverse
/// against it (sup relative error over pooled test histories).
pub fn static_reduction_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let pair = InterventionPair::benchmark(0);
    let panel = simulate_panel(dgp.as_ref(), n, derive_seed(seed, &[label("static")]))?;
    let test = simulate_panel(
        dgp.as_ref(),
        1000,
        derive_seed(seed, &[label("static-test")]),
    )?;
    let set = oracle_set(dgp.clone(), &pair, n, seed)?;
    let hs = evaluation_histories(&test, 0, None);
    let closed = |h: &HistoryView<'_>| {
        let p = dgp.propensity(h, 1);
        (p, 1.0 / (1.0 / p + 1.0 / (1.0 - p)))
    };
    let identity = hs
        .iter()
        .map(|h| {
            let (p, inv) = closed(h);
            (inv - p * (1.0 - p)).abs() / (p * (1.0 - p))
        })
        .fold(0.0f64, f64::max);
    let ids: Vec<usize> = (0..panel.n()).collect();
    let table = pseudo_table(LearnerKind::IvwDr, Estimand::Cate, &panel, &set, &ids)?;
    let rows = table.rows.with_targets(table.v);
    let spec = MetaSpec::default().variance.with_seed(seed);
    let vm = fit_v_model(&rows, &spec, 1.0)?;
    let mut sup: f64 = 0.0;
    for h in &hs {
        let (p, _) = closed(h);
        let w = 1.0 / vm.predict(&set.codec.encode(h)?)?;
        sup = sup.max((w - p * (1.0 - p)).abs() / (p * (1.0 - p)));
    }
    Ok(vec![
        Check::at_most(
            "static-reduction closed form",
            identity,
            1e-12,
            "1/(1/pi + 1/(1-pi)) vs pi(1-pi)".into(),
        ),
        Check::at_most(
            format!("static-reduction fitted (n={n})"),
            sup,
            0.05,
            format!(
                "sup relative error of 1/V-hat over {} test histories",
                hs.len()
            ),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_keys_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.key().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn budget_scaling() {
        assert_eq!(Budget::full(0).n(1_000_000), 1_000_000);
        assert_eq!(Budget::fast(0).n(1_000_000), 100_000);
        assert_eq!(Budget::fast(0).n(50), 100);
    }
}
