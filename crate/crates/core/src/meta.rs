//! Pseudo-outcomes, inverse-variance weights and the six meta-learners.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{FeatureCodec, RowSet};
use crate::error::{Error, Result};
use crate::learners::{fit_regressor, FittedRegressor, RegressorSpec};
use crate::nuisance::{Arm, NuisanceSet};
use crate::panel::{HistoryView, InterventionPair, Panel, Trajectory};
use crate::rng::{derive_seed, label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    PiHa,
    PiRa,
    Ra,
    Ipw,
    Dr,
    IvwDr,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 6] = [
        LearnerKind::PiHa,
        LearnerKind::PiRa,
        LearnerKind::Ra,
        LearnerKind::Ipw,
        LearnerKind::Dr,
        LearnerKind::IvwDr,
    ];

    /// Config/CLI key.
    pub fn key(self) -> &'static str {
        match self {
            LearnerKind::PiHa => "pi-ha",
            LearnerKind::PiRa => "pi-ra",
            LearnerKind::Ra => "ra",
            LearnerKind::Ipw => "ipw",
            LearnerKind::Dr => "dr",
            LearnerKind::IvwDr => "ivw-dr",
        }
    }

    pub fn is_plug_in(self) -> bool {
        matches!(self, LearnerKind::PiHa | LearnerKind::PiRa)
    }

    pub fn needs_responses(self) -> bool {
        matches!(
            self,
            LearnerKind::PiRa | LearnerKind::Ra | LearnerKind::Dr | LearnerKind::IvwDr
        )
    }

    pub fn needs_propensity(self) -> bool {
        matches!(
            self,
            LearnerKind::Ipw | LearnerKind::Dr | LearnerKind::IvwDr
        )
    }

    pub fn needs_history(self) -> bool {
        self == LearnerKind::PiHa
    }

    pub fn supports(self, estimand: Estimand) -> bool {
        !(self == LearnerKind::Ra && estimand == Estimand::Capo)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.key() == norm)
            .ok_or_else(|| Error::Unknown {
                what: "learner",
                name: s.to_string(),
            })
    }
}

/// `Capo` targets intervention `a` alone; `Cate` targets `a` minus `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    Capo,
    #[default]
    Cate,
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "capo" => Ok(Estimand::Capo),
            "cate" => Ok(Estimand::Cate),
            _ => Err(Error::Unknown {
                what: "estimand",
                name: s.to_string(),
            }),
        }
    }
}

/// Source of `V` in the inverse-variance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsMode {
    /// Regression estimate of `E[V | H_t]`.
    #[default]
    Regression,
    /// Per-row realized `V`, floored.
    Realized,
}

impl FromStr for WeightsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regression" => Ok(WeightsMode::Regression),
            "realized" => Ok(WeightsMode::Realized),
            _ => Err(Error::Unknown {
                what: "weights mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Nuisance values along one anchor `(i, t)`: observed `A_{t..t+tau}`,
/// clipped propensities of the observed treatments and the response
/// surfaces of both arms at `H_{t..t+tau}`.
///
/// Entries that cannot affect any pseudo-outcome (after the observed path
/// has left both arms) are left as NaN and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct RowInputs {
    pub treatments: Vec<usize>,
    /// `Y_{t+tau}`.
    pub outcome: f64,
    /// `Y_t`, which stands in for `mu_{t+1}` when `tau = 0`.
    pub outcome_now: f64,
    pub propensities: Vec<f64>,
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    /// `pi(a_k | H_{t+k})` and `pi(b_k | H_{t+k})` while the observed
    /// prefix follows the arm; filled only when arm propensities are requested.
    pub pi_a: Vec<f64>,
    pub pi_b: Vec<f64>,
    /// Propensity evaluations, and how many of them were clipped.
    pub evaluated: usize,
    pub clipped: usize,
}

/// What [`row_inputs`] has to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputNeeds {
    pub propensity: bool,
    pub responses: bool,
    /// Propensities of both arms' treatments, for the variance target.
    pub arm_propensity: bool,
}

impl InputNeeds {
    pub fn of(kind: LearnerKind) -> Self {
        Self {
            propensity: kind.needs_propensity(),
            responses: kind.needs_responses(),
            arm_propensity: kind == LearnerKind::IvwDr,
        }
    }
}

fn prefix_matches(treatments: &[usize], path: &[usize], k: usize) -> bool {
    treatments[..k] == path[..k]
}

/// Gather the nuisance values for anchor `t` of `traj`.
pub fn row_inputs(
    nuisances: &NuisanceSet,
    traj: &Trajectory,
    t: usize,
    needs: InputNeeds,
) -> Result<RowInputs> {
    let pair = &nuisances.pair;
    let tau = pair.tau();
    if t == 0 || t + tau > traj.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor t = {t} needs {tau} future steps in a trajectory of length {}",
            traj.len()
        )));
    }
    let treatments = traj.treatments()[t - 1..t + tau].to_vec();
    let mut row = RowInputs {
        outcome: traj.y(t + tau),
        outcome_now: traj.y(t),
        propensities: vec![f64::NAN; tau + 1],
        mu_a: vec![f64::NAN; tau + 1],
        mu_b: vec![f64::NAN; tau + 1],
        pi_a: vec![f64::NAN; tau + 1],
        pi_b: vec![f64::NAN; tau + 1],
        evaluated: 0,
        clipped: 0,
        treatments,
    };
    for k in 0..=tau {
        let on_a = prefix_matches(&row.treatments, &pair.a, k);
        let on_b = prefix_matches(&row.treatments, &pair.b, k);
        if !(on_a || on_b) {
            break;
        }
        let h = traj.history(t + k)?;
        let obs = row.treatments[k];
        if needs.propensity && ((on_a && obs == pair.a[k]) || (on_b && obs == pair.b[k])) {
            let (p, was_clipped) = nuisances.propensity(&h, obs)?;
            row.propensities[k] = p;
            row.evaluated += 1;
            row.clipped += usize::from(was_clipped);
        }
        if needs.arm_propensity {
            for (on, arm, out) in [
                (on_a, pair.a[k], &mut row.pi_a),
                (on_b, pair.b[k], &mut row.pi_b),
            ] {
                if on {
                    out[k] = if needs.propensity && arm == obs {
                        row.propensities[k]
                    } else {
                        nuisances.propensity(&h, arm)?.0
                    };
                }
            }
        }
        if needs.responses {
            if on_a {
                row.mu_a[k] = nuisances.response(Arm::A, k, &h)?;
            }
            if on_b {
                row.mu_b[k] = nuisances.response(Arm::B, k, &h)?;
            }
        }
    }
    Ok(row)
}

/// `1{A = a} / pi` per step along `path`; zero once the path is left.
fn ratios<'a>(row: &'a RowInputs, path: &'a [usize]) -> impl Iterator<Item = f64> + 'a {
    path.iter().enumerate().map(move |(k, &a)| {
        if row.treatments[k] == a {
            1.0 / row.propensities[k]
        } else {
            0.0
        }
    })
}

fn ipw_one(row: &RowInputs, path: &[usize]) -> f64 {
    let mut w = 1.0;
    for r in ratios(row, path) {
        w *= r;
        if w == 0.0 {
            return 0.0;
        }
    }
    w * row.outcome
}

fn dr_one(row: &RowInputs, path: &[usize], mu: &[f64]) -> f64 {
    let mut w = 1.0;
    let mut val = 0.0;
    for (k, r) in ratios(row, path).enumerate() {
        if w == 0.0 {
            return val;
        }
        val += w * mu[k] * (1.0 - r);
        w *= r;
    }
    if w == 0.0 {
        val
    } else {
        val + w * row.outcome
    }
}

fn v_one(row: &RowInputs, path: &[usize]) -> f64 {
    let mut w = 1.0;
    let mut v = 0.0;
    for r in ratios(row, path) {
        w *= r * r;
        if w == 0.0 {
            break;
        }
        v += w;
    }
    v
}

/// `V` with the last indicator of every term replaced by its conditional
/// mean, `sum_k prod_{l<k} (1{A_l = a_l} / pi_l^2) / pi_k`. Same conditional
/// mean given `H_t` as the realized `V`, far less noise (none at `tau = 0`).
fn v_smoothed_one(row: &RowInputs, path: &[usize], pi: &[f64]) -> f64 {
    let mut w = 1.0;
    let mut v = 0.0;
    for (k, &a) in path.iter().enumerate() {
        v += w / pi[k];
        if row.treatments[k] != a {
            break;
        }
        w /= pi[k] * pi[k];
    }
    v
}

/// Inverse-propensity-weighted pseudo-outcomes `(a, b, a - b)`.
pub fn pseudo_ipw(row: &RowInputs, pair: &InterventionPair) -> (f64, f64, f64) {
    let (a, b) = (ipw_one(row, &pair.a), ipw_one(row, &pair.b));
    (a, b, a - b)
}

/// Doubly robust pseudo-outcomes `(a, b, a - b)`.
pub fn pseudo_dr(row: &RowInputs, pair: &InterventionPair) -> (f64, f64, f64) {
    let (a, b) = (
        dr_one(row, &pair.a, &row.mu_a),
        dr_one(row, &pair.b, &row.mu_b),
    );
    (a, b, a - b)
}

/// Regression-adjusted pseudo-outcome for the CATE.
pub fn pseudo_ra(row: &RowInputs, pair: &InterventionPair) -> Result<f64> {
    let tau = pair.tau();
    let (a0, b0) = (pair.a[0], pair.b[0]);
    if tau >= 1 && a0 == b0 {
        return Err(Error::ArmsCoincide);
    }
    let next = |mu: &[f64]| if tau == 0 { row.outcome_now } else { mu[1] };
    let obs = row.treatments[0];
    Ok(if obs == a0 && obs == b0 {
        // tau = 0 with identical arms: both indicators fire
        (next(&row.mu_a) - row.mu_b[0]) + (row.mu_a[0] - next(&row.mu_b))
    } else if obs == a0 {
        next(&row.mu_a) - row.mu_b[0]
    } else if obs == b0 {
        row.mu_a[0] - next(&row.mu_b)
    } else {
        row.mu_a[0] - row.mu_b[0]
    })
}

/// Realized `(V^a, V^a + V^b)`.
pub fn ivw_realized(row: &RowInputs, pair: &InterventionPair) -> (f64, f64) {
    let va = v_one(row, &pair.a);
    (va, va + v_one(row, &pair.b))
}

/// Smoothed `(V^a, V^a + V^b)`, the regression target for the variance
/// model; needs arm propensities in `row`.
pub fn ivw_target(row: &RowInputs, pair: &InterventionPair) -> (f64, f64) {
    let va = v_smoothed_one(row, &pair.a, &row.pi_a);
    (va, va + v_smoothed_one(row, &pair.b, &row.pi_b))
}

/// Regression model for `E[V | H_t]` with predictions floored at `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub regressor: FittedRegressor,
    pub floor: f64,
}

impl VarianceModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.regressor.predict(x)?.max(self.floor))
    }

    pub fn predict_rows(&self, rows: &RowSet) -> Result<Vec<f64>> {
        Ok(self
            .regressor
            .predict_rows(rows)?
            .into_iter()
            .map(|v| v.max(self.floor))
            .collect())
    }
}

/// Fit `E[V | H_t]` on rows whose targets are realized `V`.
pub fn fit_v_model(rows: &RowSet, spec: &RegressorSpec, floor: f64) -> Result<VarianceModel> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "v_floor must be positive, got {floor}"
        )));
    }
    Ok(VarianceModel {
        regressor: fit_regressor(spec, rows)?,
        floor,
    })
}

/// Second-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSpec {
    pub estimand: Estimand,
    pub second_stage: RegressorSpec,
    pub variance: RegressorSpec,
    pub weights_mode: WeightsMode,
    pub v_floor: f64,
    pub seed: u64,
}

impl Default for MetaSpec {
    fn default() -> Self {
        Self {
            estimand: Estimand::Cate,
            second_stage: RegressorSpec {
                lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
                ..RegressorSpec::tuned()
            },
            variance: RegressorSpec::tuned(),
            weights_mode: WeightsMode::Regression,
            v_floor: 1.0,
            seed: 0,
        }
    }
}

/// Pseudo-outcomes over pooled anchors, ready for the second stage.
#[derive(Debug, Clone)]
pub struct PseudoTable {
    /// Features encode `H_t`; targets are the pseudo-outcomes.
    pub rows: RowSet,
    /// Smoothed `V` per row (`V^a` for the CAPO, `V^a + V^b` for the CATE).
    pub v: Vec<f64>,
    pub evaluated: usize,
    pub clipped: usize,
}

impl PseudoTable {
    pub fn clip_fraction(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.clipped as f64 / self.evaluated as f64
        }
    }
}

/// Pseudo-outcome of `kind` for one row.
pub fn pseudo_value(
    kind: LearnerKind,
    estimand: Estimand,
    row: &RowInputs,
    pair: &InterventionPair,
) -> Result<f64> {
    let pick = |(a, _, d): (f64, f64, f64)| match estimand {
        Estimand::Capo => a,
        Estimand::Cate => d,
    };
    match kind {
        LearnerKind::Ipw => Ok(pick(pseudo_ipw(row, pair))),
        LearnerKind::Dr | LearnerKind::IvwDr => Ok(pick(pseudo_dr(row, pair))),
        LearnerKind::Ra if estimand == Estimand::Cate => pseudo_ra(row, pair),
        _ => Err(Error::InvalidArgument(format!(
            "{kind} has no pseudo-outcome for the {estimand:?}"
        ))),
    }
}

/// Build the pseudo-outcome table over every anchor of the trajectories in `ids`.
pub fn pseudo_table(
    kind: LearnerKind,
    estimand: Estimand,
    panel: &Panel,
    nuisances: &NuisanceSet,
    ids: &[usize],
) -> Result<PseudoTable> {
    check_nuisances(kind, estimand, nuisances)?;
    let codec = &nuisances.codec;
    let pair = &nuisances.pair;
    let tau = pair.tau();
    let needs = InputNeeds::of(kind);
    let with_v = kind == LearnerKind::IvwDr;
    type Part = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>, usize, usize);
    let parts: Vec<Part> = ids
        .par_iter()
        .map(|&id| -> Result<Part> {
            let traj = panel.get(id);
            let mut feats = Vec::new();
            let mut values = Vec::new();
            let mut vs = Vec::new();
            let mut times = Vec::new();
            let (mut ev, mut cl) = (0, 0);
            let mut buf = vec![0.0; codec.width()];
            for t in 1..=traj.len().saturating_sub(tau) {
                let row = row_inputs(nuisances, traj, t, needs)?;
                codec.encode_into(&traj.history(t)?, &mut buf)?;
                feats.extend_from_slice(&buf);
                values.push(pseudo_value(kind, estimand, &row, pair)?);
                if with_v {
                    let (va, vab) = ivw_target(&row, pair);
                    vs.push(if estimand == Estimand::Capo { va } else { vab });
                }
                times.push(t);
                ev += row.evaluated;
                cl += row.clipped;
            }
            Ok((feats, values, vs, times, ev, cl))
        })
        .collect::<Result<_>>()?;
    let mut rows = RowSet::new(codec.width());
    let mut v = Vec::new();
    let (mut evaluated, mut clipped) = (0, 0);
    for (&id, (feats, values, vs, times, ev, cl)) in ids.iter().zip(parts) {
        for (i, (&y, &t)) in values.iter().zip(&times).enumerate() {
            rows.push(
                &feats[i * codec.width()..(i + 1) * codec.width()],
                y,
                1.0,
                id,
                t,
            );
        }
        v.extend(vs);
        evaluated += ev;
        clipped += cl;
    }
    if values_non_finite(&rows.targets) {
        return Err(Error::InvalidArgument(
            "non-finite pseudo-outcome; check propensity clipping".into(),
        ));
    }
    Ok(PseudoTable {
        rows,
        v,
        evaluated,
        clipped,
    })
}

fn values_non_finite(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite())
}

fn check_nuisances(kind: LearnerKind, estimand: Estimand, set: &NuisanceSet) -> Result<()> {
    if !kind.supports(estimand) {
        return Err(Error::InvalidArgument(format!(
            "the {kind} learner targets the CATE only"
        )));
    }
    let missing = |what: &str| Err(Error::MissingNuisance(format!("{kind} needs {what}")));
    if kind.needs_history() && !set.has_history() {
        return missing("history adjustments");
    }
    if kind.needs_responses() && !set.has_responses() {
        return missing("response surfaces");
    }
    if kind.needs_propensity() && !set.has_propensity() {
        return missing("propensities");
    }
    Ok(())
}

/// Summary of a fitted learner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_rows: usize,
    pub clip_fraction: f64,
    pub pseudo_mean: f64,
    pub pseudo_sd: f64,
    /// Stabilized weights (IVW-DR only; all ones otherwise).
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub weight_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CateBody {
    /// Difference of nuisance predictions.
    PlugIn {
        nuisances: Box<NuisanceSet>,
    },
    SecondStage {
        model: FittedRegressor,
    },
}

/// A fitted CAPO/CATE learner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CateModel {
    pub kind: LearnerKind,
    pub estimand: Estimand,
    pub pair: InterventionPair,
    pub codec: FeatureCodec,
    pub weights_mode: WeightsMode,
    pub body: CateBody,
    pub v_model: Option<VarianceModel>,
    pub diagnostics: Diagnostics,
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Stabilized inverse-variance weights `(1/V_i) / mean_j(1/V_j)`.
pub fn stabilized_weights(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument(
            "inverse-variance weights need positive finite V".into(),
        ));
    }
    let inv: Vec<f64> = v.iter().map(|x| 1.0 / x).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Fit a learner. Two-stage kinds regress their pseudo-outcome on `H_t`
/// over the pseudo-outcome fold of the nuisance split.
pub fn fit_meta(
    kind: LearnerKind,
    panel: &Panel,
    nuisances: &NuisanceSet,
    spec: &MetaSpec,
) -> Result<CateModel> {
    let estimand = spec.estimand;
    check_nuisances(kind, estimand, nuisances)?;
    let base = CateModel {
        kind,
        estimand,
        pair: nuisances.pair.clone(),
        codec: nuisances.codec.clone(),
        weights_mode: spec.weights_mode,
        body: CateBody::PlugIn {
            nuisances: Box::new(nuisances.clone()),
        },
        v_model: None,
        diagnostics: Diagnostics::default(),
    };
    if kind.is_plug_in() {
        let mut trimmed = nuisances.clone();
        trimmed.propensity = None;
        if kind == LearnerKind::PiHa {
            trimmed.responses = None;
        } else {
            trimmed.history = None;
        }
        return Ok(CateModel {
            body: CateBody::PlugIn {
                nuisances: Box::new(trimmed),
            },
            diagnostics: Diagnostics {
                weight_mean: 1.0,
                weight_min: 1.0,
                weight_max: 1.0,
                ..Diagnostics::default()
            },
            ..base
        });
    }
    let ids = &nuisances.split.pseudo;
    let table = pseudo_table(kind, estimand, panel, nuisances, ids)?;
    if table.rows.is_empty() {
        return Err(Error::InvalidArgument(
            "no pseudo-outcome rows in the second-stage fold".into(),
        ));
    }
    let mut rows = table.rows.clone();
    let mut v_model = None;
    if kind == LearnerKind::IvwDr {
        let v_hat = match spec.weights_mode {
            WeightsMode::Regression => {
                let v_rows = table.rows.clone().with_targets(table.v.clone());
                let vspec = spec
                    .variance
                    .clone()
                    .with_seed(derive_seed(spec.seed, &[label("variance")]));
                let m = fit_v_model(&v_rows, &vspec, spec.v_floor)?;
                let pred = m.predict_rows(&rows)?;
                v_model = Some(m);
                pred
            }
            WeightsMode::Realized => table.v.iter().map(|v| v.max(spec.v_floor)).collect(),
        };
        rows.weights = stabilized_weights(&v_hat)?;
    }
    let (pseudo_mean, pseudo_sd) = moments(&rows.targets);
    let (weight_mean, weight_sd) = moments(&rows.weights);
    let diagnostics = Diagnostics {
        n_rows: rows.len(),
        clip_fraction: table.clip_fraction(),
        pseudo_mean,
        pseudo_sd,
        weight_mean,
        weight_min: rows.weights.iter().copied().fold(f64::INFINITY, f64::min),
        weight_max: rows
            .weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        weight_sd,
    };
    let sspec = spec
        .second_stage
        .clone()
        .with_seed(derive_seed(spec.seed, &[label("second-stage")]));
    let model =
        fit_regressor(&sspec, &rows).map_err(|e| e.context(format!("{kind} second stage")))?;
    Ok(CateModel {
        body: CateBody::SecondStage { model },
        v_model,
        diagnostics,
        ..base
    })
}

impl CateModel {
    /// Prediction at one history.
    pub fn predict_one(&self, h: &HistoryView<'_>) -> Result<f64> {
        match &self.body {
            CateBody::SecondStage { model } => model.predict(&self.codec.encode(h)?),
            CateBody::PlugIn { nuisances } => {
                let eval = |arm| match self.kind {
                    LearnerKind::PiHa => nuisances.history_adjustment(arm, h),
                    _ => nuisances.response(arm, 0, h),
                };
                let a = eval(Arm::A)?;
                match self.estimand {
                    Estimand::Capo => Ok(a),
                    Estimand::Cate => Ok(a - eval(Arm::B)?),
                }
            }
        }
    }

    pub fn export<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn import<R: Read>(r: R) -> Result<Self> {
        let mut model: CateModel = serde_json::from_reader(r)?;
        if let CateBody::PlugIn { nuisances } = &mut model.body {
            let mut buf = Vec::new();
            nuisances.export(&mut buf)?;
            **nuisances = NuisanceSet::import(buf.as_slice())?;
        }
        Ok(model)
    }
}

/// Predictions for every history, in order.
pub fn predict_cate(model: &CateModel, histories: &[HistoryView<'_>]) -> Result<Vec<f64>> {
    histories
        .par_iter()
        .map(|h| {
            let v = model.predict_one(h)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} produced a non-finite prediction at t = {}",
                    model.kind,
                    h.t()
                )))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(treatments: &[usize], props: &[f64], y: f64, mu_a: &[f64], mu_b: &[f64]) -> RowInputs {
        RowInputs {
            treatments: treatments.to_vec(),
            outcome: y,
            outcome_now: y,
            propensities: props.to_vec(),
            mu_a: mu_a.to_vec(),
            mu_b: mu_b.to_vec(),
            pi_a: vec![f64::NAN; treatments.len()],
            pi_b: vec![f64::NAN; treatments.len()],
            evaluated: 0,
            clipped: 0,
        }
    }

    #[test]
    fn smoothed_v_hand_example() {
        let mut r = row(&[1, 1], &[0.5, 0.25], 0.0, &[0.0; 2], &[0.0; 2]);
        r.pi_a = vec![0.5, 0.25];
        r.pi_b = vec![0.5, f64::NAN];
        // a: 1/0.5 + (1/0.5^2)/0.25 = 18; b leaves after the first step: 1/0.5
        assert_eq!(ivw_target(&r, &pair(&[1, 1], &[0, 1])), (18.0, 20.0));
        r.pi_a = vec![0.2];
        r.pi_b = vec![0.8];
        r.treatments = vec![0];
        // static case: 1/pi + 1/(1 - pi), whatever was observed
        let (_, v) = ivw_target(&r, &pair(&[1], &[0]));
        assert!((v - 1.0 / (0.2 * 0.8)).abs() < 1e-12);
    }

    fn pair(a: &[usize], b: &[usize]) -> InterventionPair {
        InterventionPair::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn ipw_hand_examples() {
        let r = row(&[1], &[0.5], 2.0, &[0.0], &[0.0]);
        assert_eq!(pseudo_ipw(&r, &pair(&[1], &[0])), (4.0, 0.0, 4.0));
        let r = row(&[1, 1], &[0.5, 0.5], 2.0, &[0.0; 2], &[0.0; 2]);
        assert_eq!(pseudo_ipw(&r, &pair(&[0, 1], &[1, 0])), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dr_hand_examples() {
        let r = row(&[1], &[0.5], 2.0, &[1.0], &[0.5]);
        assert_eq!(pseudo_dr(&r, &pair(&[1], &[0])), (3.0, 0.5, 2.5));
        let r = row(&[1], &[1.0], 2.0, &[7.0], &[0.5]);
        assert_eq!(pseudo_dr(&r, &pair(&[1], &[0])).0, 2.0);
    }

    #[test]
    fn ra_hand_example() {
        let r = row(&[0, 1], &[0.5; 2], 2.0, &[0.4, 1.2], &[0.9, 0.0]);
        let v = pseudo_ra(&r, &pair(&[0, 1], &[1, 0])).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert!(matches!(
            pseudo_ra(&r, &pair(&[0, 1], &[0, 0])),
            Err(Error::ArmsCoincide)
        ));
    }

    #[test]
    fn ivw_hand_examples() {
        let r = row(&[1], &[0.5], 2.0, &[0.0], &[0.0]);
        assert_eq!(ivw_realized(&r, &pair(&[1], &[0])), (4.0, 4.0));
        let r = row(&[1, 1], &[0.5, 0.5], 2.0, &[0.0; 2], &[0.0; 2]);
        assert_eq!(ivw_realized(&r, &pair(&[1, 1], &[0, 1])).0, 20.0);
        assert_eq!(ivw_realized(&r, &pair(&[0, 1], &[0, 0])).1, 0.0);
    }

    #[test]
    fn stabilized_weights_average_one() {
        let w = stabilized_weights(&[1.0, 2.0, 4.0, 8.0]).unwrap();
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-15);
        assert!(stabilized_weights(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn learner_keys_round_trip() {
        for k in LearnerKind::ALL {
            assert_eq!(k.key().parse::<LearnerKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.key()));
        }
        assert!("r-learner".parse::<LearnerKind>().is_err());
        assert!(!LearnerKind::Ra.supports(Estimand::Capo));
    }
}
