//! Structural data-generating processes with known ground truth.
//!
//! A DGP produces scalar covariates, categorical treatments and continuous
//! outcomes step by step:
//!
//! ```text
//! X_1 ~ initial,  X_t = f_x(Y_{t-1}, A_{t-1}, H_{t-1}) + e_x
//! A_t ~ Categorical(pi_t(. | H_t)),  Y_t = f_y(A_t, H_t) + e_y
//! ```
//!
//! All randomness enters through standard-normal shocks (and a uniform for
//! the treatment draw), which lets the oracles use antithetic pairs and
//! common random numbers.

mod oracle;
mod registry;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{normal_cdf, sigmoid};
use crate::panel::{HistoryView, Panel, Trajectory};
use crate::rng::stream_rng;

pub use oracle::{
    oracle_cate, oracle_cate_with, oracle_history_adjustment, oracle_propensity, oracle_response,
    oracle_response_auto, oracle_response_with, McEstimate, OracleOptions,
};
pub use registry::{dgp_from_name, DgpSpec};

/// A simulator with oracle access to its structural equations.
pub trait Dgp: Send + Sync + fmt::Debug {
    /// Registry name that reconstructs this DGP.
    fn name(&self) -> String;

    /// Trajectory length `T`.
    fn horizon(&self) -> usize;

    fn treatment_arity(&self) -> usize {
        2
    }

    /// `X_1` from a standard-normal shock.
    fn initial_covariate(&self, shock: f64) -> f64;

    /// `X_t` given `H_{t-1}`, `A_{t-1}`, `Y_{t-1}` and a standard-normal shock.
    fn next_covariate(&self, past: &HistoryView<'_>, a_prev: usize, y_prev: f64, shock: f64)
        -> f64;

    /// `P(A_t = a | H_t)`.
    fn propensity(&self, h: &HistoryView<'_>, a: usize) -> f64;

    /// `E[Y_t | A_t = a, H_t]`.
    fn outcome_mean(&self, a: usize, h: &HistoryView<'_>) -> f64;

    /// `Y_t` from a standard-normal shock; noise has mean zero.
    fn outcome(&self, a: usize, h: &HistoryView<'_>, shock: f64) -> f64;

    /// Exact `mu_l^a(h_l)` for the treatment suffix `a_suffix` (applied from
    /// time `h.t()` on), when the DGP admits one.
    fn exact_response(&self, _h: &HistoryView<'_>, _a_suffix: &[usize]) -> Option<f64> {
        None
    }

    /// Draw a treatment from `pi_t(. | H_t)` with a uniform variate.
    fn draw_treatment(&self, h: &HistoryView<'_>, u: f64) -> usize {
        let k = self.treatment_arity();
        let mut acc = 0.0;
        for a in 0..k - 1 {
            acc += self.propensity(h, a);
            if u < acc {
                return a;
            }
        }
        k - 1
    }
}

pub type CovariateFn = Arc<dyn Fn(&HistoryView<'_>, usize, f64) -> f64 + Send + Sync>;
pub type LogitFn = Arc<dyn Fn(&HistoryView<'_>, usize) -> f64 + Send + Sync>;
pub type OutcomeFn = Arc<dyn Fn(usize, &HistoryView<'_>) -> f64 + Send + Sync>;

/// How `N(0, s)` in a noise specification is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseConvention {
    /// `s` is a standard deviation.
    #[default]
    StdDev,
    /// `s` is a variance.
    Variance,
}

impl NoiseConvention {
    pub fn std_dev(self, s: f64) -> f64 {
        match self {
            NoiseConvention::StdDev => s,
            NoiseConvention::Variance => s.sqrt(),
        }
    }
}

/// Closed-form structure shared by the shipped DGPs: `f_x = rho * X_{t-1}`
/// and `f_y = g(X_t) + effect * (A_t - 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticForm {
    pub rho: f64,
    pub shape: OutcomeShape,
    pub effect: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeShape {
    /// `g(x) = cos(freq * x)`
    Cosine { freq: f64 },
    /// `g(x) = slope * x`
    Linear { slope: f64 },
}

/// Binary-treatment DGP with Gaussian additive noise.
#[derive(Clone)]
pub struct StructuralDgp {
    pub name: String,
    pub f_x: CovariateFn,
    pub f_a: LogitFn,
    pub f_y: OutcomeFn,
    pub x_noise_std: f64,
    pub y_noise_std: f64,
    pub x1_std: f64,
    pub horizon: usize,
    /// Treatment value assumed for `A_0` when evaluating `f_a` at `t = 1`.
    pub a0: usize,
    pub analytic: Option<AnalyticForm>,
}

impl fmt::Debug for StructuralDgp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StructuralDgp")
            .field("name", &self.name)
            .field("x_noise_std", &self.x_noise_std)
            .field("y_noise_std", &self.y_noise_std)
            .field("x1_std", &self.x1_std)
            .field("horizon", &self.horizon)
            .field("a0", &self.a0)
            .field("analytic", &self.analytic)
            .finish()
    }
}

impl StructuralDgp {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_noise_std > 0.0 && self.y_noise_std > 0.0 && self.x1_std > 0.0) {
            return Err(Error::InvalidArgument(
                "noise scales must be strictly positive".into(),
            ));
        }
        if self.horizon == 0 || self.a0 > 1 {
            return Err(Error::InvalidArgument(
                "horizon must be >= 1 and a0 binary".into(),
            ));
        }
        Ok(())
    }

    /// Treatment logit `f_a(H_t)`.
    pub fn logit(&self, h: &HistoryView<'_>) -> f64 {
        let a_prev = h.last_treatment().unwrap_or(self.a0);
        (self.f_a)(h, a_prev)
    }
}

impl Dgp for StructuralDgp {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_covariate(&self, shock: f64) -> f64 {
        self.x1_std * shock
    }

    fn next_covariate(
        &self,
        past: &HistoryView<'_>,
        a_prev: usize,
        y_prev: f64,
        shock: f64,
    ) -> f64 {
        (self.f_x)(past, a_prev, y_prev) + self.x_noise_std * shock
    }

    fn propensity(&self, h: &HistoryView<'_>, a: usize) -> f64 {
        let z = self.logit(h);
        if a == 1 {
            sigmoid(z)
        } else {
            sigmoid(-z)
        }
    }

    fn outcome_mean(&self, a: usize, h: &HistoryView<'_>) -> f64 {
        (self.f_y)(a, h)
    }

    fn outcome(&self, a: usize, h: &HistoryView<'_>, shock: f64) -> f64 {
        (self.f_y)(a, h) + self.y_noise_std * shock
    }

    fn exact_response(&self, h: &HistoryView<'_>, a_suffix: &[usize]) -> Option<f64> {
        let form = self.analytic?;
        let steps = a_suffix.len().checked_sub(1)? as i32;
        let x = h.x_now()[0];
        let last = *a_suffix.last()? as f64;
        // X_{l+m} | X_l ~ N(rho^m X_l, s^2), s^2 = sigma_x^2 * sum_{j<m} rho^{2j}
        let mean = form.rho.powi(steps) * x;
        let var: f64 =
            (0..steps).map(|j| form.rho.powi(2 * j)).sum::<f64>() * self.x_noise_std.powi(2);
        let g = match form.shape {
            OutcomeShape::Cosine { freq } => (freq * mean).cos() * (-0.5 * freq * freq * var).exp(),
            OutcomeShape::Linear { slope } => slope * mean,
        };
        Some(g + form.effect * (last - 0.5))
    }
}

fn paper_dgp(
    name: String,
    f_a: LogitFn,
    freq: f64,
    convention: NoiseConvention,
    a0: usize,
) -> StructuralDgp {
    StructuralDgp {
        name,
        f_x: Arc::new(|past: &HistoryView<'_>, _a, _y| 0.5 * past.x_now()[0]),
        f_a,
        f_y: Arc::new(move |a, h: &HistoryView<'_>| {
            (freq * h.x_now()[0]).cos() + 0.5 * (a as f64 - 0.5)
        }),
        x_noise_std: convention.std_dev(0.5),
        y_noise_std: convention.std_dev(0.3),
        x1_std: 1.0,
        horizon: 5,
        a0,
        analytic: Some(AnalyticForm {
            rho: 0.5,
            shape: OutcomeShape::Cosine { freq },
            effect: 0.5,
        }),
    }
}

fn suffix(convention: NoiseConvention, a0: usize) -> String {
    let mut s = String::new();
    if convention == NoiseConvention::Variance {
        s.push_str(",noise=variance");
    }
    if a0 != 0 {
        s.push_str(&format!(",a0={a0}"));
    }
    s
}

/// Dataset with a complex (cosine) treatment assignment and smooth outcome.
pub fn make_d1() -> StructuralDgp {
    make_d1_with(NoiseConvention::StdDev, 0)
}

pub fn make_d1_with(convention: NoiseConvention, a0: usize) -> StructuralDgp {
    let name = format!("d1{}", suffix(convention, a0).replacen(',', ":", 1));
    paper_dgp(
        name,
        Arc::new(|h: &HistoryView<'_>, a_prev| {
            4.0 * (0.5 * h.x_now()[0] - 0.5 * (a_prev as f64 - 0.5)).cos()
        }),
        1.0,
        convention,
        a0,
    )
}

/// Dataset with a linear treatment assignment and an oscillating outcome.
pub fn make_d2() -> StructuralDgp {
    make_d2_with(NoiseConvention::StdDev, 0)
}

pub fn make_d2_with(convention: NoiseConvention, a0: usize) -> StructuralDgp {
    let name = format!("d2{}", suffix(convention, a0).replacen(',', ":", 1));
    paper_dgp(
        name,
        Arc::new(|h: &HistoryView<'_>, a_prev| 0.5 * h.x_now()[0] - 0.5 * (a_prev as f64 - 0.5)),
        5.0,
        convention,
        a0,
    )
}

/// Dataset whose overlap shrinks as `gamma` grows.
pub fn make_d3(gamma: f64) -> Result<StructuralDgp> {
    make_d3_with(gamma, NoiseConvention::StdDev, 0)
}

pub fn make_d3_with(gamma: f64, convention: NoiseConvention, a0: usize) -> Result<StructuralDgp> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "overlap gamma must be finite and >= 0, got {gamma}"
        )));
    }
    let name = format!("d3:gamma={gamma}{}", suffix(convention, a0));
    Ok(paper_dgp(
        name,
        Arc::new(move |h: &HistoryView<'_>, a_prev| {
            gamma * (0.5 * h.x_now()[0] - 0.5 * (a_prev as f64 - 0.5))
        }),
        1.0,
        convention,
        a0,
    ))
}

/// Random-walk covariate with linear outcome and equal covariate/outcome
/// noise `sigma`, so that `Var(mu_{k+1}(H_{k+1}) | H_k, A_k) = sigma^2` at
/// every level.
pub fn make_linear(sigma: f64) -> Result<StructuralDgp> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    Ok(StructuralDgp {
        name: format!("linear:sigma={sigma}"),
        f_x: Arc::new(|past: &HistoryView<'_>, _a, _y| past.x_now()[0]),
        f_a: Arc::new(|h: &HistoryView<'_>, a_prev| {
            0.5 * h.x_now()[0] - 0.5 * (a_prev as f64 - 0.5)
        }),
        f_y: Arc::new(|a, h: &HistoryView<'_>| h.x_now()[0] + 0.5 * (a as f64 - 0.5)),
        x_noise_std: sigma,
        y_noise_std: sigma,
        x1_std: 1.0,
        horizon: 5,
        a0: 0,
        analytic: Some(AnalyticForm {
            rho: 1.0,
            shape: OutcomeShape::Linear { slope: 1.0 },
            effect: 0.5,
        }),
    })
}

/// Tiny DGP with binary covariates, used for brute-force checks.
///
/// `X_1 ~ Bern(p1)`, `X_t ~ Bern(sigmoid(c0 + c1 X_{t-1} + c2 A_{t-1}))`,
/// `A_t ~ Bern(sigmoid(b0 + b1 X_t + b2 A_{t-1}))`,
/// `Y_t = y0 + y1 X_t + y2 A_t + y3 X_t A_t + s * sign(e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryChainDgp {
    pub p1: f64,
    pub transition: [f64; 3],
    pub assignment: [f64; 3],
    pub outcome_coef: [f64; 4],
    pub outcome_noise: f64,
    pub horizon: usize,
}

impl Default for BinaryChainDgp {
    fn default() -> Self {
        Self {
            p1: 0.4,
            transition: [-0.5, 1.2, 0.8],
            assignment: [-0.3, 1.0, 0.7],
            outcome_coef: [0.2, 0.5, 0.3, -0.2],
            outcome_noise: 0.1,
            horizon: 5,
        }
    }
}

impl BinaryChainDgp {
    fn p_next(&self, x_prev: f64, a_prev: usize) -> f64 {
        let c = self.transition;
        sigmoid(c[0] + c[1] * x_prev + c[2] * a_prev as f64)
    }

    fn mean_y(&self, a: usize, x: f64) -> f64 {
        let c = self.outcome_coef;
        let a = a as f64;
        c[0] + c[1] * x + c[2] * a + c[3] * x * a
    }
}

impl Dgp for BinaryChainDgp {
    fn name(&self) -> String {
        if self.outcome_noise == BinaryChainDgp::default().outcome_noise {
            "binary-chain".into()
        } else {
            format!("binary-chain:noise={}", self.outcome_noise)
        }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_covariate(&self, shock: f64) -> f64 {
        f64::from(u8::from(normal_cdf(shock) < self.p1))
    }

    fn next_covariate(
        &self,
        past: &HistoryView<'_>,
        a_prev: usize,
        _y_prev: f64,
        shock: f64,
    ) -> f64 {
        f64::from(u8::from(
            normal_cdf(shock) < self.p_next(past.x_now()[0], a_prev),
        ))
    }

    fn propensity(&self, h: &HistoryView<'_>, a: usize) -> f64 {
        let b = self.assignment;
        let a_prev = h.last_treatment().unwrap_or(0) as f64;
        let z = b[0] + b[1] * h.x_now()[0] + b[2] * a_prev;
        if a == 1 {
            sigmoid(z)
        } else {
            sigmoid(-z)
        }
    }

    fn outcome_mean(&self, a: usize, h: &HistoryView<'_>) -> f64 {
        self.mean_y(a, h.x_now()[0])
    }

    fn outcome(&self, a: usize, h: &HistoryView<'_>, shock: f64) -> f64 {
        let noise = if shock >= 0.0 {
            self.outcome_noise
        } else {
            -self.outcome_noise
        };
        self.mean_y(a, h.x_now()[0]) + noise
    }

    /// Exhaustive enumeration over every covariate path.
    fn exact_response(&self, h: &HistoryView<'_>, a_suffix: &[usize]) -> Option<f64> {
        fn walk(dgp: &BinaryChainDgp, x: f64, suffix: &[usize], prob: f64) -> f64 {
            let (&a, rest) = suffix.split_first().expect("non-empty suffix");
            if rest.is_empty() {
                return prob * dgp.mean_y(a, x);
            }
            let p = dgp.p_next(x, a);
            walk(dgp, 1.0, rest, prob * p) + walk(dgp, 0.0, rest, prob * (1.0 - p))
        }
        if a_suffix.is_empty() {
            return None;
        }
        Some(walk(self, h.x_now()[0], a_suffix, 1.0))
    }
}

/// Simulate `n` trajectories of length `dgp.horizon()`; trajectory `i` draws
/// from stream `i` of `seed`, so output is independent of thread count.
pub fn simulate_panel(dgp: &dyn Dgp, n: usize, seed: u64) -> Result<Panel> {
    if n == 0 {
        return Err(Error::InvalidArgument("simulate_panel needs n >= 1".into()));
    }
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| simulate_trajectory(dgp, &mut stream_rng(seed, i as u64)))
        .collect();
    Panel::new(trajectories, 1, dgp.treatment_arity())
}

/// One observational trajectory.
pub fn simulate_trajectory<R: Rng + ?Sized>(dgp: &dyn Dgp, rng: &mut R) -> Trajectory {
    let horizon = dgp.horizon();
    let mut xs = Vec::with_capacity(horizon);
    let mut a_seq = Vec::with_capacity(horizon);
    let mut ys = Vec::with_capacity(horizon);
    xs.push(dgp.initial_covariate(rng.sample(StandardNormal)));
    continue_observational(dgp, &mut xs, &mut a_seq, &mut ys, horizon, rng);
    Trajectory::scalar(xs, a_seq, ys)
}

/// Extend a history (`xs` one longer than `a_seq`/`ys`) under the observational
/// treatment policy until it holds `until` complete steps.
pub fn continue_observational<R: Rng + ?Sized>(
    dgp: &dyn Dgp,
    xs: &mut Vec<f64>,
    a_seq: &mut Vec<usize>,
    ys: &mut Vec<f64>,
    until: usize,
    rng: &mut R,
) {
    loop {
        let h = HistoryView::from_parts(xs, 1, a_seq, ys).expect("consistent history");
        let u: f64 = rng.random();
        let a = dgp.draw_treatment(&h, u);
        let y = dgp.outcome(a, &h, rng.sample(StandardNormal));
        a_seq.push(a);
        ys.push(y);
        if a_seq.len() >= until {
            break;
        }
        let past =
            HistoryView::from_parts(&xs[..], 1, &a_seq[..a_seq.len() - 1], &ys[..ys.len() - 1])
                .expect("consistent history");
        let x = dgp.next_covariate(&past, a, y, rng.sample(StandardNormal));
        xs.push(x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist<'a>(x: &'a [f64], a: &'a [usize], y: &'a [f64]) -> HistoryView<'a> {
        HistoryView::from_parts(x, 1, a, y).unwrap()
    }

    #[test]
    fn d1_logit_at_origin() {
        let d1 = make_d1();
        let h = hist(&[0.3, 0.0], &[0], &[0.1]);
        let z = d1.logit(&h);
        assert!((z - 4.0 * 0.25f64.cos()).abs() < 1e-15);
        assert!((z - 3.875_649_6).abs() < 1e-6);
        assert!((d1.propensity(&h, 1) - 0.979_67).abs() < 1e-4);
    }

    #[test]
    fn d2_logit_with_previous_treatment() {
        let d2 = make_d2();
        let h = hist(&[0.3, 0.0], &[1], &[0.1]);
        assert!((d2.logit(&h) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn d3_gamma_zero_is_randomized() {
        let d3 = make_d3(0.0).unwrap();
        let h = hist(&[2.0, -1.0], &[1], &[0.1]);
        assert_eq!(d3.propensity(&h, 1), 0.5);
        assert!(make_d3(-1.0).is_err());
    }

    #[test]
    fn a0_convention_applies_at_first_step() {
        let h = hist(&[0.0], &[], &[]);
        let z0 = make_d2().logit(&h);
        let z1 = make_d2_with(NoiseConvention::StdDev, 1).logit(&h);
        assert!((z0 - 0.25).abs() < 1e-15);
        assert!((z1 + 0.25).abs() < 1e-15);
    }

    #[test]
    fn noise_convention_toggles_scale() {
        assert_eq!(make_d1().x_noise_std, 0.5);
        assert!(
            (make_d1_with(NoiseConvention::Variance, 0).x_noise_std - 0.5f64.sqrt()).abs() < 1e-15
        );
    }

    #[test]
    fn simulation_is_deterministic_and_shaped() {
        let d1 = make_d1();
        let a = simulate_panel(&d1, 50, 11).unwrap();
        let b = simulate_panel(&d1, 50, 11).unwrap();
        let c = simulate_panel(&d1, 50, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n(), 50);
        assert!(a.trajectories().iter().all(|t| t.len() == 5));
    }

    #[test]
    fn binary_chain_enumeration_base_case() {
        let dgp = BinaryChainDgp::default();
        let h = hist(&[1.0], &[], &[]);
        let v = dgp.exact_response(&h, &[1]).unwrap();
        assert!((v - (0.2 + 0.5 + 0.3 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn exact_response_base_case_is_outcome_mean() {
        let d1 = make_d1();
        let h = hist(&[0.0], &[], &[]);
        assert!((d1.exact_response(&h, &[1]).unwrap() - 1.25).abs() < 1e-15);
    }
}
