//! Ground-truth oracles: exact propensities and Monte-Carlo response
//! surfaces, history adjustments and treatment effects.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::Dgp;
use crate::error::{Error, Result};
use crate::panel::{HistoryView, InterventionPair};
use crate::rng::stream_rng;

const BLOCK: usize = 1024;

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Independent units averaged (antithetic pairs count once).
    pub n: usize,
}

impl McEstimate {
    fn exact(v: f64) -> Self {
        Self {
            mean: v,
            std_error: 0.0,
            n: 0,
        }
    }

    fn from_values(values: &[f64]) -> Self {
        let (mean, se) = crate::math::mean_se(values);
        Self {
            mean,
            std_error: if values.len() < 2 { 0.0 } else { se },
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Rollouts per intervention arm.
    pub n_mc: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub common_random_numbers: bool,
}

impl OracleOptions {
    pub fn new(n_mc: usize, seed: u64) -> Self {
        Self {
            n_mc,
            seed,
            antithetic: true,
            common_random_numbers: true,
        }
    }
}

/// Exact `P(A_t = a | H_t = h)`.
pub fn oracle_propensity(dgp: &dyn Dgp, h: &HistoryView<'_>, a: usize) -> f64 {
    dgp.propensity(h, a)
}

fn check_suffix(dgp: &dyn Dgp, h: &HistoryView<'_>, suffix: &[usize], n_mc: usize) -> Result<()> {
    if n_mc < 1 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    if suffix.is_empty() {
        return Err(Error::InvalidArgument("treatment suffix is empty".into()));
    }
    if h.t() + suffix.len() - 1 > dgp.horizon() {
        return Err(Error::InvalidArgument(format!(
            "suffix of length {} from t = {} exceeds horizon {}",
            suffix.len(),
            h.t(),
            dgp.horizon()
        )));
    }
    if suffix.iter().any(|&a| a >= dgp.treatment_arity()) {
        return Err(Error::InvalidArgument("treatment outside DGP arity".into()));
    }
    Ok(())
}

/// Reusable rollout buffers seeded from a history.
struct Rollout {
    xs: Vec<f64>,
    a_seq: Vec<usize>,
    ys: Vec<f64>,
    base: usize,
}

impl Rollout {
    fn new(h: &HistoryView<'_>) -> Self {
        Self {
            xs: h.covariates().to_vec(),
            a_seq: h.treatments().to_vec(),
            ys: h.outcomes().to_vec(),
            base: h.t(),
        }
    }

    fn reset(&mut self) {
        self.xs.truncate(self.base);
        self.a_seq.truncate(self.base - 1);
        self.ys.truncate(self.base - 1);
    }

    /// Run the intervened system; `shocks[2j]` drives `Y` at step `j`,
    /// `shocks[2j+1]` drives the next covariate. `visit` sees every
    /// intermediate history `H_{l+j}` for `j >= 1`. Returns the final outcome.
    fn run(
        &mut self,
        dgp: &dyn Dgp,
        suffix: &[usize],
        shocks: &[f64],
        sign: f64,
        mut visit: impl FnMut(usize, &HistoryView<'_>),
    ) -> f64 {
        self.reset();
        let m = suffix.len();
        let mut last = 0.0;
        for (j, &a) in suffix.iter().enumerate() {
            let h = HistoryView::from_parts(&self.xs, 1, &self.a_seq, &self.ys)
                .expect("rollout history");
            if j > 0 {
                visit(j, &h);
            }
            let y = dgp.outcome(a, &h, sign * shocks[2 * j]);
            last = y;
            if j + 1 < m {
                let x = dgp.next_covariate(&h, a, y, sign * shocks[2 * j + 1]);
                self.a_seq.push(a);
                self.ys.push(y);
                self.xs.push(x);
            }
        }
        last
    }
}

/// Evaluate `f` on `n_units` independent shock vectors of length
/// `n_shocks`, in blocks with their own streams; output order is fixed.
fn mc_map<T, F>(n_units: usize, seed: u64, n_shocks: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    let n_blocks = n_units.div_ceil(BLOCK);
    let blocks: Vec<Vec<T>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let count = BLOCK.min(n_units - b * BLOCK);
            let mut shocks = vec![0.0; n_shocks];
            (0..count)
                .map(|_| {
                    for s in shocks.iter_mut() {
                        *s = rng.sample(StandardNormal);
                    }
                    f(&shocks)
                })
                .collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

fn units(opts: &OracleOptions) -> usize {
    if opts.antithetic {
        opts.n_mc.div_ceil(2)
    } else {
        opts.n_mc
    }
}

/// Monte-Carlo estimate of `mu_l^a(h_l)`: roll the system forward from `h`
/// with treatments fixed to `a_suffix`, averaging the final outcome.
/// A suffix of length one returns the outcome mean exactly.
pub fn oracle_response(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    a_suffix: &[usize],
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    oracle_response_with(dgp, h, a_suffix, &OracleOptions::new(n_mc, seed))
}

pub fn oracle_response_with(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    a_suffix: &[usize],
    opts: &OracleOptions,
) -> Result<McEstimate> {
    check_suffix(dgp, h, a_suffix, opts.n_mc)?;
    if a_suffix.len() == 1 {
        return Ok(McEstimate::exact(dgp.outcome_mean(a_suffix[0], h)));
    }
    let n_shocks = 2 * a_suffix.len();
    let antithetic = opts.antithetic;
    let values = mc_map(units(opts), opts.seed, n_shocks, |z| {
        let mut r = Rollout::new(h);
        let v = r.run(dgp, a_suffix, z, 1.0, |_, _| {});
        if antithetic {
            0.5 * (v + r.run(dgp, a_suffix, z, -1.0, |_, _| {}))
        } else {
            v
        }
    });
    Ok(McEstimate::from_values(&values))
}

/// Exact response when the DGP has one, Monte Carlo otherwise.
pub fn oracle_response_auto(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    a_suffix: &[usize],
    opts: &OracleOptions,
) -> Result<McEstimate> {
    check_suffix(dgp, h, a_suffix, opts.n_mc)?;
    match dgp.exact_response(h, a_suffix) {
        Some(v) => Ok(McEstimate::exact(v)),
        None => oracle_response_with(dgp, h, a_suffix, opts),
    }
}

/// `CATE(h) = mu^a(h) - mu^b(h)` with common random numbers.
pub fn oracle_cate(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    pair: &InterventionPair,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    oracle_cate_with(dgp, h, pair, &OracleOptions::new(n_mc, seed))
}

pub fn oracle_cate_with(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    pair: &InterventionPair,
    opts: &OracleOptions,
) -> Result<McEstimate> {
    check_suffix(dgp, h, &pair.a, opts.n_mc)?;
    check_suffix(dgp, h, &pair.b, opts.n_mc)?;
    let m = pair.a.len();
    let n_shocks = if opts.common_random_numbers {
        2 * m
    } else {
        4 * m
    };
    let crn = opts.common_random_numbers;
    let antithetic = opts.antithetic;
    let values = mc_map(units(opts), opts.seed, n_shocks, |z| {
        let mut r = Rollout::new(h);
        let (za, zb) = if crn { (z, z) } else { z.split_at(2 * m) };
        let mut diff = |sign: f64| {
            r.run(dgp, &pair.a, za, sign, |_, _| {}) - r.run(dgp, &pair.b, zb, sign, |_, _| {})
        };
        if antithetic {
            0.5 * (diff(1.0) + diff(-1.0))
        } else {
            diff(1.0)
        }
    });
    Ok(McEstimate::from_values(&values))
}

/// `delta^a(h_t) = E[Y_{t+tau} | H_t = h, A_{t:t+tau} = a]`.
///
/// Rollouts fix the treatments to `path` and weight each by the likelihood
/// of that path under the observational policy after `t`; the estimate is
/// the self-normalized weighted mean, with a delta-method standard error.
pub fn oracle_history_adjustment(
    dgp: &dyn Dgp,
    h: &HistoryView<'_>,
    path: &[usize],
    opts: &OracleOptions,
) -> Result<McEstimate> {
    check_suffix(dgp, h, path, opts.n_mc)?;
    if path.len() == 1 {
        return Ok(McEstimate::exact(dgp.outcome_mean(path[0], h)));
    }
    let antithetic = opts.antithetic;
    let pairs: Vec<(f64, f64)> = mc_map(units(opts), opts.seed, 2 * path.len(), |z| {
        let mut r = Rollout::new(h);
        let mut one = |sign: f64| {
            let mut w = 1.0;
            let y = r.run(dgp, path, z, sign, |j, hj| w *= dgp.propensity(hj, path[j]));
            (w * y, w)
        };
        if antithetic {
            let (a1, b1) = one(1.0);
            let (a2, b2) = one(-1.0);
            (0.5 * (a1 + a2), 0.5 * (b1 + b2))
        } else {
            one(1.0)
        }
    });
    let n = pairs.len() as f64;
    let mwy = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mw = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ratio = mwy / mw;
    let var = pairs
        .iter()
        .map(|(wy, w)| (wy - ratio * w).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    Ok(McEstimate {
        mean: ratio,
        std_error: (var / n).sqrt() / mw,
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{make_d1, make_d2, make_d3, simulate_panel, BinaryChainDgp};

    fn hist<'a>(x: &'a [f64], a: &'a [usize], y: &'a [f64]) -> HistoryView<'a> {
        HistoryView::from_parts(x, 1, a, y).unwrap()
    }

    #[test]
    fn propensities_are_normalized_and_bounded() {
        let d1 = make_d1();
        let h = hist(&[0.0], &[], &[]);
        let p = oracle_propensity(&d1, &h, 1);
        assert!((p - 0.9797).abs() < 1e-3);
        assert!((p + oracle_propensity(&d1, &h, 0) - 1.0).abs() < 1e-15);
        let d3 = make_d3(0.0).unwrap();
        assert_eq!(
            oracle_propensity(&d3, &hist(&[3.0, -7.0], &[1], &[0.0]), 1),
            0.5
        );
        let d3 = make_d3(1e6).unwrap();
        for x in [-5.0, -0.1, 0.0, 0.1, 5.0] {
            let p = oracle_propensity(&d3, &hist(&[x], &[], &[]), 1);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn single_step_response_is_exact() {
        let d1 = make_d1();
        let est = oracle_response(&d1, &hist(&[0.0], &[], &[]), &[1], 10, 0).unwrap();
        assert_eq!(est.mean, 1.25);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mc_response_matches_closed_form() {
        let d1 = make_d1();
        let h = hist(&[0.4, -0.2], &[1], &[0.7]);
        for suffix in [&[0usize, 1][..], &[1, 0, 1], &[0, 0, 0, 1]] {
            let est = oracle_response(&d1, &h, suffix, 20_000, 3).unwrap();
            let exact = d1.exact_response(&h, suffix).unwrap();
            assert!(
                (est.mean - exact).abs() <= 4.0 * est.std_error + 1e-12,
                "{suffix:?}: {est:?} vs {exact}"
            );
        }
    }

    #[test]
    fn mc_response_matches_enumeration_on_binary_chain() {
        let dgp = BinaryChainDgp::default();
        let h = hist(&[1.0, 0.0], &[1], &[0.3]);
        for suffix in [&[0usize, 1][..], &[1, 1, 0], &[0, 1, 0, 1]] {
            let est = oracle_response(&dgp, &h, suffix, 100_000, 5).unwrap();
            let exact = dgp.exact_response(&h, suffix).unwrap();
            assert!(
                (est.mean - exact).abs() < 0.01,
                "{suffix:?}: {} vs {exact}",
                est.mean
            );
        }
    }

    #[test]
    fn response_argument_errors() {
        let d1 = make_d1();
        let h = hist(&[0.0, 0.0, 0.0, 0.0], &[0, 0, 0], &[0.0, 0.0, 0.0]);
        assert!(oracle_response(&d1, &h, &[0, 1, 1], 10, 0).is_err());
        assert!(oracle_response(&d1, &h, &[0, 1], 0, 0).is_err());
        assert!(oracle_response(&d1, &h, &[0, 1], 10, 0).is_ok());
    }

    #[test]
    fn cate_on_paper_dgps_is_half() {
        let d1 = make_d1();
        let d2 = make_d2();
        let h = hist(&[0.3], &[], &[]);
        for tau in 0..3 {
            let pair = InterventionPair::benchmark(tau);
            let est = oracle_cate(&d1, &h, &pair, 64, 1).unwrap();
            assert!((est.mean - 0.5).abs() < 1e-12, "tau {tau}: {est:?}");
        }
        let est = oracle_cate(&d2, &h, &InterventionPair::benchmark(1), 64, 1).unwrap();
        assert!((est.mean - 0.5).abs() < 1e-12);
        let same = InterventionPair::new(vec![0, 1], vec![0, 1]).unwrap();
        assert_eq!(oracle_cate(&d1, &h, &same, 64, 1).unwrap().mean, 0.0);
    }

    #[test]
    fn common_random_numbers_reduce_variance() {
        let d1 = make_d1();
        let h = hist(&[0.3], &[], &[]);
        let pair = InterventionPair::benchmark(2);
        let mut opts = OracleOptions::new(2000, 9);
        let crn = oracle_cate_with(&d1, &h, &pair, &opts).unwrap();
        opts.common_random_numbers = false;
        let indep = oracle_cate_with(&d1, &h, &pair, &opts).unwrap();
        assert!(crn.std_error < indep.std_error);
        assert!((indep.mean - 0.5).abs() < 4.0 * indep.std_error);
    }

    #[test]
    fn cate_is_constant_across_histories() {
        let d1 = make_d1();
        let panel = simulate_panel(&d1, 20, 77).unwrap();
        let pair = InterventionPair::benchmark(2);
        let mut opts = OracleOptions::new(200, 4);
        opts.common_random_numbers = false;
        for traj in panel.trajectories() {
            let h = traj.history(2).unwrap();
            let est = oracle_cate_with(&d1, &h, &pair, &opts).unwrap();
            assert!((est.mean - 0.5).abs() <= 3.0 * est.std_error.max(1e-9) + 0.05);
        }
    }

    #[test]
    fn history_adjustment_is_biased_for_d1() {
        let d1 = make_d1();
        let h = hist(&[0.0], &[], &[]);
        let opts = OracleOptions::new(40_000, 2);
        let a = oracle_history_adjustment(&d1, &h, &[0, 0, 1], &opts).unwrap();
        let b = oracle_history_adjustment(&d1, &h, &[1, 0, 0], &opts).unwrap();
        // selection on later treatments shifts the path-conditioned contrast away from the causal 0.5
        assert!(((a.mean - b.mean) - 0.5).abs() > 5.0 * (a.std_error + b.std_error));
        // randomized assignment: history adjustment equals the response surface
        let d3 = make_d3(0.0).unwrap();
        let ha = oracle_history_adjustment(&d3, &h, &[0, 1], &opts).unwrap();
        let mu = d3.exact_response(&h, &[0, 1]).unwrap();
        assert!((ha.mean - mu).abs() < 4.0 * ha.std_error);
    }
}
