//! Nuisance functions: history adjustments, iterated response surfaces and
//! propensities, with optional sample splitting and propensity clipping.
//!
//! Levels are indexed relative to the prediction time: level `j` of an
//! intervention `a` is `mu_{t+j}^a`, a function of `H_{t+j}`. All models are
//! pooled over the anchor time `t`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{pooled_rows_filtered, FeatureCodec, RowSet, RowWeighting};
use crate::dgp::{
    dgp_from_name, oracle_history_adjustment, oracle_response_auto, Dgp, OracleOptions,
};
use crate::error::{Error, Result};
use crate::learners::{
    fit_classifier, fit_regressor, ClassifierSpec, FittedClassifier, FittedRegressor, RegressorSpec,
};
use crate::panel::{HistoryView, InterventionPair, Panel};
use crate::rng::{derive_seed, label, stream_rng};

/// Rows below this count trigger a low-overlap warning.
pub const SMALL_LEVEL: usize = 30;

/// Partition of trajectory ids into `D^mu_t, .., D^mu_{t+tau}, D^pi, D^PO`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub enabled: bool,
    pub n: usize,
    /// `response[j]` trains level `j`; `response[0]` also trains the history adjustment.
    pub response: Vec<Vec<usize>>,
    pub propensity: Vec<usize>,
    pub pseudo: Vec<usize>,
}

impl SplitPlan {
    pub fn tau(&self) -> usize {
        self.response.len() - 1
    }

    pub fn folds(&self) -> Vec<&[usize]> {
        let mut out: Vec<&[usize]> = self.response.iter().map(|f| f.as_slice()).collect();
        out.push(&self.propensity);
        out.push(&self.pseudo);
        out
    }

    /// Fold for response level `j`; levels past the plan reuse the last fold.
    pub fn response_fold(&self, j: usize) -> &[usize] {
        &self.response[j.min(self.response.len() - 1)]
    }

    /// Ids for the history adjustments: every fold. They feed only the
    /// plug-in learner, so no later stage depends on their data.
    pub fn history_fold(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.folds().into_iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Split `n` trajectory ids into `tau + 3` folds (uniformly at random, sizes
/// differing by at most one), or give every fold all ids when disabled.
pub fn make_split(panel: &Panel, tau: usize, enabled: bool, seed: u64) -> Result<SplitPlan> {
    split_ids(panel.n(), tau, enabled, seed)
}

pub fn split_ids(n: usize, tau: usize, enabled: bool, seed: u64) -> Result<SplitPlan> {
    let k = tau + 3;
    let all: Vec<usize> = (0..n).collect();
    if !enabled {
        return Ok(SplitPlan {
            enabled,
            n,
            response: vec![all.clone(); tau + 1],
            propensity: all.clone(),
            pseudo: all,
        });
    }
    if n < k {
        return Err(Error::TooFewTrajectories { n, needed: k });
    }
    let mut ids = all;
    ids.shuffle(&mut stream_rng(seed, label("split")));
    let mut folds = vec![Vec::new(); k];
    for (pos, id) in ids.into_iter().enumerate() {
        folds[pos % k].push(id);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    let pseudo = folds.pop().expect("k >= 3");
    let propensity = folds.pop().expect("k >= 3");
    Ok(SplitPlan {
        enabled,
        n,
        response: folds,
        propensity,
        pseudo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    A,
    B,
}

impl Arm {
    pub fn path(self, pair: &InterventionPair) -> &[usize] {
        match self {
            Arm::A => &pair.a,
            Arm::B => &pair.b,
        }
    }

    fn index(self) -> u64 {
        match self {
            Arm::A => 0,
            Arm::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMode {
    /// One classifier over all times (time index among the features).
    #[default]
    Pooled,
    /// One classifier per time step.
    PerTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum ResponseSource {
    Fitted {
        a: Vec<FittedRegressor>,
        b: Vec<FittedRegressor>,
    },
    Oracle,
    /// `mu == value` at every level (a deliberately wrong model).
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum PropensitySource {
    Pooled {
        model: FittedClassifier,
    },
    PerTime {
        models: Vec<FittedClassifier>,
    },
    Oracle,
    /// `pi(a | h) == value` for every treatment.
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum HistorySource {
    Fitted {
        a: FittedRegressor,
        b: FittedRegressor,
    },
    Oracle,
}

/// Ground-truth access for oracle-mode nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub dgp: String,
    pub n_mc: usize,
    pub seed: u64,
}

/// Immutable collection of nuisance estimates for one intervention pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub name: String,
    pub codec: FeatureCodec,
    pub pair: InterventionPair,
    pub clip_eps: f64,
    /// Clamp propensities into `[clip_eps, 1 - clip_eps]`.
    pub clip: bool,
    pub responses: Option<ResponseSource>,
    pub propensity: Option<PropensitySource>,
    pub history: Option<HistorySource>,
    pub split: SplitPlan,
    pub oracle: Option<OracleSpec>,
    #[serde(skip)]
    dgp: Option<Arc<dyn Dgp>>,
}

/// Clamp a raw propensity into `[clip_eps, 1 - clip_eps]`.
pub fn clipped_propensity(raw: f64, clip_eps: f64) -> f64 {
    raw.clamp(clip_eps, 1.0 - clip_eps)
}

fn check_clip(clip_eps: f64) -> Result<()> {
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "clip_eps must lie in (0, 0.5), got {clip_eps}"
        )));
    }
    Ok(())
}

impl NuisanceSet {
    /// Empty set; attach sources with the `with_*` builders.
    pub fn new(
        codec: FeatureCodec,
        pair: InterventionPair,
        clip_eps: f64,
        split: SplitPlan,
    ) -> Result<Self> {
        check_clip(clip_eps)?;
        pair.check_arity(codec.treatment_arity)?;
        Ok(Self {
            name: "nuisances".into(),
            codec,
            pair,
            clip_eps,
            clip: true,
            responses: None,
            propensity: None,
            history: None,
            split,
            oracle: None,
            dgp: None,
        })
    }

    /// Every source delegates to the DGP's oracles.
    pub fn oracle(
        dgp: Arc<dyn Dgp>,
        codec: FeatureCodec,
        pair: InterventionPair,
        clip_eps: f64,
        opts: OracleOptions,
    ) -> Result<Self> {
        let n = 0;
        let split = split_ids(n, pair.tau(), false, 0)?;
        let mut set = Self::new(codec, pair, clip_eps, split)?;
        set.oracle = Some(OracleSpec {
            dgp: dgp.name(),
            n_mc: opts.n_mc,
            seed: opts.seed,
        });
        set.dgp = Some(dgp);
        set.responses = Some(ResponseSource::Oracle);
        set.propensity = Some(PropensitySource::Oracle);
        set.history = Some(HistorySource::Oracle);
        set.name = "oracle".into();
        Ok(set)
    }

    pub fn with_dgp(mut self, dgp: Arc<dyn Dgp>, opts: OracleOptions) -> Self {
        self.oracle = Some(OracleSpec {
            dgp: dgp.name(),
            n_mc: opts.n_mc,
            seed: opts.seed,
        });
        self.dgp = Some(dgp);
        self
    }

    pub fn with_responses(mut self, src: ResponseSource) -> Self {
        self.responses = Some(src);
        self
    }

    pub fn with_propensity(mut self, src: PropensitySource) -> Self {
        self.propensity = Some(src);
        self
    }

    pub fn with_history(mut self, src: HistorySource) -> Self {
        self.history = Some(src);
        self
    }

    pub fn with_split(mut self, split: SplitPlan) -> Self {
        self.split = split;
        self
    }

    pub fn with_clipping(mut self, clip: bool) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn tau(&self) -> usize {
        self.pair.tau()
    }

    /// True when every present source is an oracle.
    pub fn is_oracle(&self) -> bool {
        matches!(self.responses, None | Some(ResponseSource::Oracle))
            && matches!(self.propensity, None | Some(PropensitySource::Oracle))
            && matches!(self.history, None | Some(HistorySource::Oracle))
    }

    fn dgp(&self) -> Result<&dyn Dgp> {
        self.dgp
            .as_deref()
            .ok_or_else(|| Error::MissingNuisance("oracle source without a DGP".into()))
    }

    fn oracle_opts(&self) -> OracleOptions {
        let spec = self.oracle.as_ref();
        OracleOptions::new(spec.map_or(1000, |s| s.n_mc), spec.map_or(0, |s| s.seed))
    }

    /// Oracle options whose seed depends on the history, so repeated
    /// queries are reproducible and distinct histories use distinct streams.
    fn oracle_opts_for(&self, h: &HistoryView<'_>, tag: u64) -> OracleOptions {
        let mut opts = self.oracle_opts();
        let mut path = vec![tag, h.t() as u64];
        path.extend(h.covariates().iter().map(|x| x.to_bits()));
        path.extend(h.treatments().iter().map(|&a| a as u64));
        path.extend(h.outcomes().iter().map(|y| y.to_bits()));
        opts.seed = derive_seed(opts.seed, &path);
        opts
    }

    /// `mu_{t+j}^{arm}(h)`, with `h` the history at time `t + j`.
    pub fn response(&self, arm: Arm, j: usize, h: &HistoryView<'_>) -> Result<f64> {
        match self.responses.as_ref() {
            None => Err(Error::MissingNuisance("response surfaces".into())),
            Some(ResponseSource::Constant { value }) => Ok(*value),
            Some(ResponseSource::Fitted { a, b }) => {
                let models = if arm == Arm::A { a } else { b };
                let model = models
                    .get(j)
                    .ok_or_else(|| Error::MissingNuisance(format!("response level t+{j}")))?;
                model.predict(&self.codec.encode(h)?)
            }
            Some(ResponseSource::Oracle) => {
                let path = arm.path(&self.pair);
                if j >= path.len() {
                    return Err(Error::MissingNuisance(format!("response level t+{j}")));
                }
                let opts = self.oracle_opts_for(h, 1 + arm.index());
                Ok(oracle_response_auto(self.dgp()?, h, &path[j..], &opts)?.mean)
            }
        }
    }

    /// `delta^{arm}(h_t)`.
    pub fn history_adjustment(&self, arm: Arm, h: &HistoryView<'_>) -> Result<f64> {
        match self.history.as_ref() {
            None => Err(Error::MissingNuisance("history adjustment".into())),
            Some(HistorySource::Fitted { a, b }) => {
                let m = if arm == Arm::A { a } else { b };
                m.predict(&self.codec.encode(h)?)
            }
            Some(HistorySource::Oracle) => {
                let opts = self.oracle_opts_for(h, 3 + arm.index());
                Ok(oracle_history_adjustment(self.dgp()?, h, arm.path(&self.pair), &opts)?.mean)
            }
        }
    }

    /// Unclipped `pi(a | h)`.
    pub fn propensity_raw(&self, h: &HistoryView<'_>, a: usize) -> Result<f64> {
        match self.propensity.as_ref() {
            None => Err(Error::MissingNuisance("propensity model".into())),
            Some(PropensitySource::Constant { value }) => Ok(*value),
            Some(PropensitySource::Oracle) => Ok(self.dgp()?.propensity(h, a)),
            Some(PropensitySource::Pooled { model }) => model.prob(&self.codec.encode(h)?, a),
            Some(PropensitySource::PerTime { models }) => {
                let m = &models[(h.t() - 1).min(models.len() - 1)];
                m.prob(&self.codec.encode(h)?, a)
            }
        }
    }

    /// Propensity used by the pseudo-outcomes, and whether clipping moved it.
    pub fn propensity(&self, h: &HistoryView<'_>, a: usize) -> Result<(f64, bool)> {
        let raw = self.propensity_raw(h, a)?;
        if !self.clip {
            return Ok((raw, false));
        }
        let c = clipped_propensity(raw, self.clip_eps);
        Ok((c, c != raw))
    }

    pub fn has_responses(&self) -> bool {
        self.responses.is_some()
    }

    pub fn has_propensity(&self) -> bool {
        self.propensity.is_some()
    }

    pub fn has_history(&self) -> bool {
        self.history.is_some()
    }

    /// Write as a JSON bundle.
    pub fn export<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    /// Read a bundle, reattaching the DGP for oracle sources.
    pub fn import<R: Read>(r: R) -> Result<Self> {
        let mut set: NuisanceSet = serde_json::from_reader(r)?;
        if let Some(spec) = &set.oracle {
            set.dgp = Some(dgp_from_name(&spec.dgp)?);
        }
        check_clip(set.clip_eps)?;
        Ok(set)
    }
}

/// Hyperparameters for fitting a full nuisance set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceSpec {
    pub regressor: RegressorSpec,
    pub classifier: ClassifierSpec,
    pub propensity_mode: PropensityMode,
    pub clip_eps: f64,
    pub clip: bool,
    pub row_weighting: RowWeighting,
    pub seed: u64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            regressor: RegressorSpec::default(),
            classifier: ClassifierSpec::tuned(),
            propensity_mode: PropensityMode::Pooled,
            clip_eps: 0.01,
            clip: true,
            row_weighting: RowWeighting::Uniform,
            seed: 0,
        }
    }
}

/// Which nuisance families to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NuisanceNeeds {
    pub responses: bool,
    pub propensity: bool,
    pub history: bool,
}

impl NuisanceNeeds {
    pub const ALL: Self = Self {
        responses: true,
        propensity: true,
        history: true,
    };
}

fn warn_small(rows: &RowSet, what: &str) {
    if rows.len() < SMALL_LEVEL {
        log::warn!("only {} training rows for {what}; low overlap", rows.len());
    }
}

/// Training rows for `delta^path`: anchors `t` in `ids` whose observed
/// treatments `A_{t..t+tau}` equal `path`, target `Y_{t+tau}`.
pub fn history_rows(
    panel: &Panel,
    codec: &FeatureCodec,
    path: &[usize],
    ids: &[usize],
    weighting: RowWeighting,
) -> Result<RowSet> {
    let tau = path.len() - 1;
    pooled_rows_filtered(panel, codec, tau, ids, 0, weighting, &|_, traj, t| {
        traj.follows(t, path).then(|| traj.y(t + tau))
    })
}

/// Fit the history adjustment `delta^path` on the history fold.
pub fn fit_history_adjustment(
    panel: &Panel,
    codec: &FeatureCodec,
    path: &[usize],
    spec: &RegressorSpec,
    split: &SplitPlan,
    weighting: RowWeighting,
) -> Result<FittedRegressor> {
    let rows = history_rows(panel, codec, path, &split.history_fold(), weighting)?;
    if rows.is_empty() {
        return Err(Error::PathUnobserved {
            path: path.to_vec(),
        });
    }
    warn_small(&rows, &format!("history adjustment {path:?}"));
    fit_regressor(spec, &rows)
}

/// Training rows for response level `j` of `path`: anchors in `ids` with
/// `A_{t+j} = path[j]`, features `H_{t+j}`; the target is `Y_{t+tau}` at the
/// last level and the level-`j+1` prediction at `H_{t+j+1}` otherwise.
pub fn response_level_rows(
    panel: &Panel,
    codec: &FeatureCodec,
    path: &[usize],
    j: usize,
    next: Option<&FittedRegressor>,
    ids: &[usize],
    weighting: RowWeighting,
) -> Result<RowSet> {
    let tau = path.len() - 1;
    if (j < tau) != next.is_some() {
        return Err(Error::InvalidArgument(
            "next-level model required below the top level".into(),
        ));
    }
    // the builder is sequential; the mutex only satisfies its `Sync` bound
    let state = std::sync::Mutex::new((vec![0.0; codec.width()], None::<Error>));
    let rows = pooled_rows_filtered(panel, codec, tau, ids, j, weighting, &|_, traj, t| {
        if traj.a(t + j) != path[j] {
            return None;
        }
        let Some(model) = next else {
            return Some(traj.y(t + tau));
        };
        let mut guard = state.lock().expect("unpoisoned");
        let (buf, failure) = &mut *guard;
        let value = codec
            .encode_into(&traj.history_unchecked(t + j + 1), buf)
            .and_then(|_| model.predict(buf));
        match value {
            Ok(v) => Some(v),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        }
    })?;
    if let (_, Some(e)) = state.into_inner().expect("unpoisoned") {
        return Err(e);
    }
    Ok(rows)
}

/// Backward iterated regressions for `mu_{t+j}^path`, `j = tau..0`;
/// returns the models indexed by `j`.
pub fn fit_response_iterative(
    panel: &Panel,
    codec: &FeatureCodec,
    path: &[usize],
    spec: &RegressorSpec,
    split: &SplitPlan,
    weighting: RowWeighting,
) -> Result<Vec<FittedRegressor>> {
    let tau = path.len() - 1;
    if split.tau() < tau {
        return Err(Error::InvalidArgument(
            "split plan has fewer levels than the path".into(),
        ));
    }
    let mut models: Vec<FittedRegressor> = Vec::with_capacity(tau + 1);
    for j in (0..=tau).rev() {
        let next = models.last();
        let rows = response_level_rows(
            panel,
            codec,
            path,
            j,
            next,
            split.response_fold(j),
            weighting,
        )?;
        if rows.is_empty() {
            return Err(Error::EmptyLevel {
                level: j,
                treatment: path[j],
            });
        }
        warn_small(&rows, &format!("response level t+{j} of {path:?}"));
        let level_spec = spec
            .clone()
            .with_seed(derive_seed(spec.seed, &[label("response"), j as u64]));
        models.push(
            fit_regressor(&level_spec, &rows)
                .map_err(|e| e.context(format!("response level t+{j}")))?,
        );
    }
    models.reverse();
    Ok(models)
}

/// Propensity training rows: every time step of every trajectory in `ids`.
pub fn propensity_rows(
    panel: &Panel,
    codec: &FeatureCodec,
    ids: &[usize],
) -> Result<(RowSet, Vec<usize>)> {
    let mut rows = RowSet::new(codec.width());
    let mut labels = Vec::new();
    let mut buf = vec![0.0; codec.width()];
    for &id in ids {
        let traj = panel.get(id);
        for t in 1..=traj.len() {
            codec.encode_into(&traj.history_unchecked(t), &mut buf)?;
            rows.push(&buf, 0.0, 1.0, id, t);
            labels.push(traj.a(t));
        }
    }
    Ok((rows, labels))
}

/// Fit the propensity model on the propensity fold.
pub fn fit_propensities(
    panel: &Panel,
    codec: &FeatureCodec,
    spec: &ClassifierSpec,
    split: &SplitPlan,
    mode: PropensityMode,
) -> Result<PropensitySource> {
    let (rows, labels) = propensity_rows(panel, codec, &split.propensity)?;
    let k = panel.treatment_arity();
    match mode {
        PropensityMode::Pooled => Ok(PropensitySource::Pooled {
            model: fit_classifier(spec, &rows, &labels, k)?,
        }),
        PropensityMode::PerTime => {
            let models = (1..=panel.max_len())
                .map(|t| {
                    let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows.times[i] == t).collect();
                    let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let spec = spec.clone().with_seed(derive_seed(spec.seed, &[t as u64]));
                    fit_classifier(&spec, &rows.subset(&idx), &lab, k)
                        .map_err(|e| e.context(format!("propensity at t = {t}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PropensitySource::PerTime { models })
        }
    }
}

/// Fit the requested nuisance families; the two arms and the propensity
/// model are fitted concurrently.
pub fn fit_nuisances(
    panel: &Panel,
    codec: &FeatureCodec,
    pair: &InterventionPair,
    spec: &NuisanceSpec,
    split: &SplitPlan,
    needs: NuisanceNeeds,
) -> Result<NuisanceSet> {
    pair.check_arity(panel.treatment_arity())?;
    // seeds follow the path, so identical arms get identical fits
    let seeded = |tag: &str, arm: Arm| {
        let path = label(&format!("{:?}", arm.path(pair)));
        spec.regressor
            .clone()
            .with_seed(derive_seed(spec.seed, &[label(tag), path]))
    };
    let fit_arm = |arm: Arm| -> Result<(Option<Vec<FittedRegressor>>, Option<FittedRegressor>)> {
        let path = arm.path(pair);
        let responses = needs
            .responses
            .then(|| {
                fit_response_iterative(
                    panel,
                    codec,
                    path,
                    &seeded("response", arm),
                    split,
                    spec.row_weighting,
                )
            })
            .transpose()?;
        let history = needs
            .history
            .then(|| {
                fit_history_adjustment(
                    panel,
                    codec,
                    path,
                    &seeded("history", arm),
                    split,
                    spec.row_weighting,
                )
            })
            .transpose()?;
        Ok((responses, history))
    };
    let ((arm_a, arm_b), propensity) = rayon::join(
        || rayon::join(|| fit_arm(Arm::A), || fit_arm(Arm::B)),
        || {
            needs
                .propensity
                .then(|| {
                    let cls = spec
                        .classifier
                        .clone()
                        .with_seed(derive_seed(spec.seed, &[label("propensity")]));
                    fit_propensities(panel, codec, &cls, split, spec.propensity_mode)
                })
                .transpose()
        },
    );
    let (resp_a, hist_a) = arm_a.map_err(|e| e.context("arm a"))?;
    let (resp_b, hist_b) = arm_b.map_err(|e| e.context("arm b"))?;
    let mut set = NuisanceSet::new(codec.clone(), pair.clone(), spec.clip_eps, split.clone())?
        .with_clipping(spec.clip);
    if let (Some(a), Some(b)) = (resp_a, resp_b) {
        set.responses = Some(ResponseSource::Fitted { a, b });
    }
    if let (Some(a), Some(b)) = (hist_a, hist_b) {
        set.history = Some(HistorySource::Fitted { a, b });
    }
    set.propensity = propensity.map_err(|e| e.context("propensity"))?;
    Ok(set.with_name("fitted"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EncodingScheme;
    use crate::dgp::{make_d1, simulate_panel};

    #[test]
    fn split_counts_and_coverage() {
        let plan = split_ids(10, 1, true, 3).unwrap();
        let folds = plan.folds();
        assert_eq!(folds.len(), 4);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| !f.is_empty()));
        assert_eq!(plan, split_ids(10, 1, true, 3).unwrap());
        assert_ne!(plan, split_ids(10, 1, true, 4).unwrap());
        let off = split_ids(10, 1, false, 3).unwrap();
        assert!(off
            .folds()
            .iter()
            .all(|f| *f == (0..10).collect::<Vec<_>>().as_slice()));
        assert!(matches!(
            split_ids(3, 1, true, 0),
            Err(Error::TooFewTrajectories { n: 3, needed: 4 })
        ));
    }

    #[test]
    fn clipping() {
        assert_eq!(clipped_propensity(0.001, 0.01), 0.01);
        assert_eq!(clipped_propensity(0.4, 0.01), 0.4);
        assert_eq!(clipped_propensity(0.9999, 0.01), 0.99);
    }

    #[test]
    fn unobserved_path_is_an_error() {
        let panel = Panel::new(
            vec![crate::panel::Trajectory::scalar(vec![0.0; 3], vec![0; 3], vec![1.0; 3]); 4],
            1,
            2,
        )
        .unwrap();
        let codec = FeatureCodec::for_panel(&panel, EncodingScheme::FlatPadded, true).unwrap();
        let split = make_split(&panel, 1, false, 0).unwrap();
        let err = fit_history_adjustment(
            &panel,
            &codec,
            &[0, 1],
            &RegressorSpec::default(),
            &split,
            RowWeighting::Uniform,
        )
        .unwrap_err();
        assert!(err.to_string().contains("intervention path unobserved"));
        let err = fit_response_iterative(
            &panel,
            &codec,
            &[1, 0],
            &RegressorSpec::default(),
            &split,
            RowWeighting::Uniform,
        )
        .unwrap_err();
        assert!(err.to_string().contains("response level t+0"), "{err}");
    }

    #[test]
    fn fitted_set_round_trips_through_bundle() {
        let dgp = make_d1();
        let panel = simulate_panel(&dgp, 200, 1).unwrap();
        let codec = FeatureCodec::for_panel(&panel, EncodingScheme::Windowed(1), true).unwrap();
        let pair = InterventionPair::benchmark(1);
        let split = make_split(&panel, 1, true, 2).unwrap();
        let spec = NuisanceSpec {
            regressor: RegressorSpec::ridge(32, 2.0, 1e-2),
            classifier: ClassifierSpec::default(),
            ..NuisanceSpec::default()
        };
        let set = fit_nuisances(&panel, &codec, &pair, &spec, &split, NuisanceNeeds::ALL).unwrap();
        let mut buf = Vec::new();
        set.export(&mut buf).unwrap();
        let back = NuisanceSet::import(buf.as_slice()).unwrap();
        let h = panel.get(0).history(2).unwrap();
        for arm in [Arm::A, Arm::B] {
            assert_eq!(
                back.response(arm, 0, &h).unwrap(),
                set.response(arm, 0, &h).unwrap()
            );
            assert_eq!(
                back.history_adjustment(arm, &h).unwrap(),
                set.history_adjustment(arm, &h).unwrap()
            );
        }
        assert_eq!(
            back.propensity(&h, 1).unwrap(),
            set.propensity(&h, 1).unwrap()
        );
    }
}
