use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureMap, Standardizer};
use crate::codec::RowSet;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    RidgeRandomFeatures,
    KNearestNeighbor,
    LookupTable,
}

/// Hyperparameters of a weighted regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSpec {
    pub kind: RegressorKind,
    /// Random cosine features (ridge only).
    pub feature_count: usize,
    pub bandwidth: f64,
    pub ridge_lambda: f64,
    /// Also regress on the standardized inputs (ridge only).
    pub include_linear: bool,
    pub k: usize,
    pub seed: u64,
    /// When non-empty, `bandwidth` is chosen from this grid by cross-validation.
    pub bandwidth_grid: Vec<f64>,
    /// When non-empty, `ridge_lambda` is chosen from this grid by cross-validation.
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    /// Cross-validate on whole trajectories drawn down to about this many
    /// rows (0 keeps all); the chosen candidate is refit on every row.
    pub cv_max_rows: usize,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self {
            kind: RegressorKind::RidgeRandomFeatures,
            feature_count: 256,
            bandwidth: 1.0,
            ridge_lambda: 1e-3,
            include_linear: true,
            k: 25,
            seed: 0,
            bandwidth_grid: Vec::new(),
            lambda_grid: Vec::new(),
            cv_folds: 3,
            cv_max_rows: 20_000,
        }
    }
}

impl RegressorSpec {
    pub fn ridge(feature_count: usize, bandwidth: f64, ridge_lambda: f64) -> Self {
        Self {
            feature_count,
            bandwidth,
            ridge_lambda,
            ..Self::default()
        }
    }

    pub fn knn(k: usize) -> Self {
        Self {
            kind: RegressorKind::KNearestNeighbor,
            k,
            ..Self::default()
        }
    }

    /// Ridge with bandwidth and lambda chosen by cross-validation.
    pub fn tuned() -> Self {
        Self {
            bandwidth_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            lambda_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            ..Self::default()
        }
    }

    pub fn lookup() -> Self {
        Self {
            kind: RegressorKind::LookupTable,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::InvalidArgument("ridge_lambda must be >= 0".into()));
        }
        if self.kind == RegressorKind::RidgeRandomFeatures
            && self.feature_count == 0
            && !self.include_linear
        {
            return Err(Error::InvalidArgument("feature_count must be >= 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument("bandwidth must be > 0".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self
            .bandwidth_grid
            .iter()
            .any(|b| !(*b > 0.0 && b.is_finite()))
            || self
                .lambda_grid
                .iter()
                .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "tuning grids need bandwidth > 0 and lambda >= 0".into(),
            ));
        }
        if self.is_tuned() && self.cv_folds < 2 {
            return Err(Error::InvalidArgument("cv_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn is_tuned(&self) -> bool {
        self.kind == RegressorKind::RidgeRandomFeatures
            && !(self.bandwidth_grid.is_empty() && self.lambda_grid.is_empty())
    }

    /// The untuned candidates spanned by the grids.
    pub fn candidates(&self) -> Vec<RegressorSpec> {
        let bws = if self.bandwidth_grid.is_empty() {
            vec![self.bandwidth]
        } else {
            self.bandwidth_grid.clone()
        };
        let lams = if self.lambda_grid.is_empty() {
            vec![self.ridge_lambda]
        } else {
            self.lambda_grid.clone()
        };
        let mut out = Vec::new();
        for &bandwidth in &bws {
            for &ridge_lambda in &lams {
                out.push(RegressorSpec {
                    bandwidth,
                    ridge_lambda,
                    bandwidth_grid: Vec::new(),
                    lambda_grid: Vec::new(),
                    ..self.clone()
                });
            }
        }
        out
    }
}

/// Intercept plus linear model on a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub map: FeatureMap,
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl RidgeModel {
    /// `[1, phi(x)]`.
    pub fn design(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 1 + self.map.output_width()];
        let mut scratch = vec![0.0; self.map.input_width()];
        out[0] = 1.0;
        self.map.map_into(x, &mut scratch, &mut out[1..]);
        out
    }

    fn predict_with(&self, x: &[f64], scratch: &mut [f64], phi: &mut [f64]) -> f64 {
        self.map.map_into(x, scratch, phi);
        self.intercept + phi.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub standardizer: Standardizer,
    pub k: usize,
    pub points: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KnnModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let width = self.standardizer.width();
        let mut z = vec![0.0; width];
        self.standardizer.apply(x, &mut z);
        let mut dist: Vec<(f64, usize)> = self
            .points
            .chunks_exact(width)
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let k = self.k.min(dist.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let near = &dist[..k];
        let (mut num, mut den) = (0.0, 0.0);
        for &(_, i) in near {
            num += self.weights[i] * self.targets[i];
            den += self.weights[i];
        }
        if den > 0.0 {
            num / den
        } else {
            near.iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / k as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub key: Vec<f64>,
    pub mean: f64,
    pub weight: f64,
}

/// Weighted mean of the targets sharing an exact feature vector; unseen
/// vectors fall back to the global weighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupModel {
    pub entries: Vec<LookupEntry>,
    pub fallback: f64,
}

fn cmp_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl LookupModel {
    fn fit(rows: &RowSet) -> Self {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| cmp_keys(rows.row(a), rows.row(b)).then(a.cmp(&b)));
        let mut entries: Vec<LookupEntry> = Vec::new();
        let (mut gnum, mut gden) = (0.0, 0.0);
        for i in idx {
            let (y, w) = (rows.targets[i], rows.weights[i]);
            gnum += w * y;
            gden += w;
            match entries.last_mut() {
                Some(e) if cmp_keys(&e.key, rows.row(i)).is_eq() => {
                    e.mean += w * y;
                    e.weight += w;
                }
                _ => entries.push(LookupEntry {
                    key: rows.row(i).to_vec(),
                    mean: w * y,
                    weight: w,
                }),
            }
        }
        entries.retain(|e| e.weight > 0.0);
        entries.iter_mut().for_each(|e| e.mean /= e.weight);
        Self {
            entries,
            fallback: gnum / gden,
        }
    }

    fn predict(&self, x: &[f64]) -> f64 {
        match self.entries.binary_search_by(|e| cmp_keys(&e.key, x)) {
            Ok(i) => self.entries[i].mean,
            Err(_) => self.fallback,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.entries
            .binary_search_by(|e| cmp_keys(&e.key, x))
            .is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RegressorModel {
    Ridge(RidgeModel),
    Knn(KnnModel),
    Lookup(LookupModel),
}

/// Immutable fitted regressor over fixed-width feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRegressor {
    pub spec: RegressorSpec,
    pub width: usize,
    pub n_train: usize,
    pub model: RegressorModel,
}

impl FittedRegressor {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: x.len(),
            });
        }
        Ok(match &self.model {
            RegressorModel::Ridge(m) => {
                let mut scratch = vec![0.0; m.map.input_width()];
                let mut phi = vec![0.0; m.map.output_width()];
                m.predict_with(x, &mut scratch, &mut phi)
            }
            RegressorModel::Knn(m) => m.predict(x),
            RegressorModel::Lookup(m) => m.predict(x),
        })
    }

    /// Predictions for every row, in row order.
    pub fn predict_rows(&self, rows: &RowSet) -> Result<Vec<f64>> {
        if rows.width() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: rows.width(),
            });
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        Ok(rows
            .features()
            .par_chunks(self.width * 256)
            .flat_map_iter(|chunk| {
                let mut out = Vec::with_capacity(chunk.len() / self.width);
                match &self.model {
                    RegressorModel::Ridge(m) => {
                        let mut scratch = vec![0.0; m.map.input_width()];
                        let mut phi = vec![0.0; m.map.output_width()];
                        for x in chunk.chunks_exact(self.width) {
                            out.push(m.predict_with(x, &mut scratch, &mut phi));
                        }
                    }
                    RegressorModel::Knn(m) => {
                        out.extend(chunk.chunks_exact(self.width).map(|x| m.predict(x)))
                    }
                    RegressorModel::Lookup(m) => {
                        out.extend(chunk.chunks_exact(self.width).map(|x| m.predict(x)))
                    }
                }
                out
            })
            .collect())
    }

    pub fn ridge(&self) -> Option<&RidgeModel> {
        match &self.model {
            RegressorModel::Ridge(m) => Some(m),
            _ => None,
        }
    }
}

pub(crate) fn check_rows(rows: &RowSet) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cannot fit on zero rows".into()));
    }
    if rows.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "weights must be finite and >= 0".into(),
        ));
    }
    let total: f64 = rows.weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights are all zero".into()));
    }
    if rows.features().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature".into()));
    }
    Ok(total)
}

/// Fit a regressor minimizing the weighted squared loss. Weights are
/// normalized to sum to one, so `ridge_lambda` is relative to the average
/// loss and rescaling all weights leaves the fit unchanged.
///
/// Specs with tuning grids first pick the candidate with the smallest
/// weighted held-out squared error, then refit on all rows.
pub fn fit_regressor(spec: &RegressorSpec, rows: &RowSet) -> Result<FittedRegressor> {
    spec.validate()?;
    check_rows(rows)?;
    if spec.is_tuned() {
        let candidates = spec.candidates();
        let scores = ridge_cv_scores(spec, &cv_subsample(rows, spec.cv_max_rows, spec.seed));
        let best = argmin(&scores).ok_or(Error::Singular)?;
        log::debug!("regressor cv scores {scores:?}, picked {best}");
        return fit_regressor(&candidates[best], rows);
    }
    let total = check_rows(rows)?;
    if rows.targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite regression target".into(),
        ));
    }
    let width = rows.width();
    let model = match spec.kind {
        RegressorKind::RidgeRandomFeatures => RegressorModel::Ridge(fit_ridge(spec, rows, total)?),
        RegressorKind::KNearestNeighbor => {
            let standardizer = Standardizer::fit(rows.features(), width, &rows.weights);
            let mut points = vec![0.0; rows.features().len()];
            for (i, p) in points.chunks_exact_mut(width).enumerate() {
                standardizer.apply(rows.row(i), p);
            }
            RegressorModel::Knn(KnnModel {
                standardizer,
                k: spec.k,
                points,
                targets: rows.targets.clone(),
                weights: rows.weights.clone(),
            })
        }
        RegressorKind::LookupTable => RegressorModel::Lookup(LookupModel::fit(rows)),
    };
    Ok(FittedRegressor {
        spec: spec.clone(),
        width,
        n_train: rows.len(),
        model,
    })
}

/// Fold label per row: grouped by trajectory id when ids vary, by row
/// index otherwise.
/// Rows of a seeded selection of trajectories, about `max_rows` in total.
pub(crate) fn cv_subsample(
    rows: &RowSet,
    max_rows: usize,
    seed: u64,
) -> std::borrow::Cow<'_, RowSet> {
    if max_rows == 0 || rows.len() <= max_rows {
        return std::borrow::Cow::Borrowed(rows);
    }
    let keep_one_in = rows.len().div_ceil(max_rows) as u64;
    let salt = derive_seed(seed, &[label("cv-subsample")]);
    let distinct = rows.traj_ids.windows(2).any(|w| w[0] != w[1]);
    let idx: Vec<usize> = (0..rows.len())
        .filter(|&i| {
            let unit = if distinct { rows.traj_ids[i] } else { i };
            derive_seed(salt, &[unit as u64]) % keep_one_in == 0
        })
        .collect();
    std::borrow::Cow::Owned(rows.subset(&idx))
}

pub(crate) fn cv_folds(rows: &RowSet, k: usize) -> Vec<usize> {
    let distinct = rows.traj_ids.windows(2).any(|w| w[0] != w[1]);
    (0..rows.len())
        .map(|i| {
            if distinct {
                rows.traj_ids[i] % k
            } else {
                i % k
            }
        })
        .collect()
}

/// Sum of held-out losses over folds divided by the held-out weight;
/// infinite when any fold fails to fit.
pub(crate) fn cv_score<F>(rows: &RowSet, folds: &[usize], k: usize, loss: F) -> f64
where
    F: Fn(&RowSet, &RowSet) -> Result<f64>,
{
    let mut total = 0.0;
    let mut weight = 0.0;
    for f in 0..k {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..rows.len()).partition(|&i| folds[i] == f);
        if test_idx.is_empty() || train_idx.is_empty() {
            continue;
        }
        let (train, test) = (rows.subset(&train_idx), rows.subset(&test_idx));
        match loss(&train, &test) {
            Ok(v) if v.is_finite() => {
                total += v;
                weight += test.weights.iter().sum::<f64>();
            }
            _ => return f64::INFINITY,
        }
    }
    if weight > 0.0 {
        total / weight
    } else {
        f64::INFINITY
    }
}

pub(crate) fn argmin(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

const CHUNK: usize = 512;

/// Accumulate `sum_i w_i d_i d_i^T` and `sum_i w_i y_i d_i` over design rows
/// `d_i = design(x_i)`; the sum order depends only on the row count.
pub(crate) fn weighted_normal_equations<F>(
    rows: &RowSet,
    scale: f64,
    p: usize,
    design: F,
) -> (DMatrix<f64>, DVector<f64>)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = rows.len();
    let groups = n.div_ceil(4 * CHUNK).clamp(1, 16);
    let per = n.div_ceil(groups);
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let mut gram = DMatrix::<f64>::zeros(p, p);
            let mut rhs = DVector::<f64>::zeros(p);
            let (lo, hi) = (g * per, ((g + 1) * per).min(n));
            let mut start = lo;
            while start < hi {
                let end = (start + CHUNK).min(hi);
                // one design row per column, so each is a contiguous slice
                let mut mt = DMatrix::<f64>::zeros(p, end - start);
                let mut yv = DVector::<f64>::zeros(end - start);
                for (r, i) in (start..end).enumerate() {
                    let sw = (rows.weights[i] / scale).sqrt();
                    let mut col = mt.column_mut(r);
                    let d = col.as_mut_slice();
                    design(rows.row(i), d);
                    d.iter_mut().for_each(|v| *v *= sw);
                    yv[r] = sw * rows.targets[i];
                }
                gram.gemm(1.0, &mt, &mt.transpose(), 1.0);
                rhs.gemv(1.0, &mt, &yv, 1.0);
                start = end;
            }
            (gram, rhs)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut gram, mut rhs) = iter.next().expect("at least one group");
    for (g, r) in iter {
        gram += g;
        rhs += r;
    }
    (gram, rhs)
}

/// Solve the SPD system `a x = b`, failing on (numerical) singularity.
pub(crate) fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let chol: Cholesky<f64, Dyn> = Cholesky::new(a.clone()).ok_or(Error::Singular)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v * v));
    if !(min_pivot > 64.0 * f64::EPSILON * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular);
    }
    let mut x = chol.solve(b);
    // one step of iterative refinement
    let r = b - &a * &x;
    x += chol.solve(&r);
    Ok(x)
}

fn fit_ridge(spec: &RegressorSpec, rows: &RowSet, total: f64) -> Result<RidgeModel> {
    fit_ridge_path(spec, rows, total, &[spec.ridge_lambda])
        .pop()
        .expect("one lambda")
}

/// Ridge fits sharing one feature map and Gram matrix across `lambdas`.
fn fit_ridge_path(
    spec: &RegressorSpec,
    rows: &RowSet,
    total: f64,
    lambdas: &[f64],
) -> Vec<Result<RidgeModel>> {
    let width = rows.width();
    let map = FeatureMap::fit(
        rows.features(),
        width,
        &rows.weights,
        spec.feature_count,
        spec.bandwidth,
        spec.include_linear,
        spec.seed,
    );
    let p = 1 + map.output_width();
    let (gram, rhs) = weighted_normal_equations(rows, total, p, |x, d| {
        let mut scratch = vec![0.0; width];
        d[0] = 1.0;
        map.map_into(x, &mut scratch, &mut d[1..]);
    });
    lambdas
        .iter()
        .map(|&lambda| {
            let mut g = gram.clone();
            for j in 1..p {
                g[(j, j)] += lambda;
            }
            let theta = spd_solve(g, &rhs)?;
            Ok(RidgeModel {
                map: map.clone(),
                intercept: theta[0],
                coef: theta.iter().skip(1).copied().collect(),
            })
        })
        .collect()
}

/// Held-out scores for every candidate of a tuned ridge spec, in
/// [`RegressorSpec::candidates`] order; one Gram matrix per bandwidth and fold.
fn ridge_cv_scores(spec: &RegressorSpec, rows: &RowSet) -> Vec<f64> {
    let candidates = spec.candidates();
    let lams = if spec.lambda_grid.is_empty() {
        vec![spec.ridge_lambda]
    } else {
        spec.lambda_grid.clone()
    };
    let folds = cv_folds(rows, spec.cv_folds);
    let mut scores = Vec::with_capacity(candidates.len());
    for group in candidates.chunks(lams.len()) {
        let mut loss = vec![0.0; lams.len()];
        let mut failed = vec![false; lams.len()];
        let mut held = 0.0;
        for f in 0..spec.cv_folds {
            let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
                (0..rows.len()).partition(|&i| folds[i] == f);
            if test_idx.is_empty() || train_idx.is_empty() {
                continue;
            }
            let (train, test) = (rows.subset(&train_idx), rows.subset(&test_idx));
            let train_total: f64 = train.weights.iter().sum();
            if train_total <= 0.0 {
                failed.iter_mut().for_each(|x| *x = true);
                continue;
            }
            held += test.weights.iter().sum::<f64>();
            let models = fit_ridge_path(&group[0], &train, train_total, &lams);
            // every model on the path shares one feature map; featurize once
            let Some(map) = models.iter().find_map(|m| m.as_ref().ok().map(|m| &m.map)) else {
                failed.iter_mut().for_each(|x| *x = true);
                continue;
            };
            let q = map.output_width();
            let mut phi = vec![0.0; test.len() * q];
            let mut scratch = vec![0.0; map.input_width()];
            for (i, out) in phi.chunks_exact_mut(q.max(1)).enumerate().take(test.len()) {
                map.map_into(test.row(i), &mut scratch, out);
            }
            for (l, m) in models.iter().enumerate() {
                let Ok(model) = m else {
                    failed[l] = true;
                    continue;
                };
                loss[l] += (0..test.len())
                    .map(|i| {
                        let f = &phi[i * q..(i + 1) * q];
                        let p = model.intercept
                            + f.iter().zip(&model.coef).map(|(a, b)| a * b).sum::<f64>();
                        test.weights[i] * (p - test.targets[i]).powi(2)
                    })
                    .sum::<f64>();
            }
        }
        for l in 0..lams.len() {
            scores.push(if failed[l] || held <= 0.0 || !loss[l].is_finite() {
                f64::INFINITY
            } else {
                loss[l] / held
            });
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_1d(xs: &[f64], ys: &[f64], ws: &[f64]) -> RowSet {
        RowSet::from_parts(1, xs.to_vec(), ys.to_vec(), ws.to_vec()).unwrap()
    }

    #[test]
    fn constant_targets_are_interpolated() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let rows = rows_1d(&xs, &[2.5; 50], &[1.0; 50]);
        let spec = RegressorSpec::ridge(4, 0.5, 0.0);
        let m = fit_regressor(&spec, &rows).unwrap();
        for &x in &xs {
            assert!((m.predict(&[x]).unwrap() - 2.5).abs() < 1e-8);
        }
    }

    #[test]
    fn doubling_weights_keeps_fit() {
        let xs: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let ws: Vec<f64> = (0..40).map(|i| 1.0 + (i % 3) as f64).collect();
        let spec = RegressorSpec::ridge(16, 1.0, 1e-3);
        let a = fit_regressor(&spec, &rows_1d(&xs, &ys, &ws)).unwrap();
        let ws2: Vec<f64> = ws.iter().map(|w| 2.0 * w).collect();
        let b = fit_regressor(&spec, &rows_1d(&xs, &ys, &ws2)).unwrap();
        for x in [-0.5, 0.0, 0.7] {
            let (pa, pb) = (a.predict(&[x]).unwrap(), b.predict(&[x]).unwrap());
            assert!((pa - pb).abs() < 1e-9 * (1.0 + pa.abs()));
        }
    }

    #[test]
    fn singular_system_without_penalty() {
        // duplicated column and no cosine features: rank deficient
        let feats = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let rows = RowSet::from_parts(2, feats, vec![1.0, 2.0, 3.0], vec![1.0; 3]).unwrap();
        let spec = RegressorSpec::ridge(0, 1.0, 0.0);
        let err = fit_regressor(&spec, &rows).unwrap_err();
        assert!(err
            .to_string()
            .contains("regularize or drop collinear features"));
        let spec = RegressorSpec::ridge(0, 1.0, 1e-3);
        assert!(fit_regressor(&spec, &rows).is_ok());
    }

    #[test]
    fn lookup_hand_example() {
        // two rows share key [1, 0]: weighted mean (1*2 + 3*4) / (1 + 3) = 3.5
        let feats = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let rows = RowSet::from_parts(2, feats, vec![2.0, 7.0, 4.0], vec![1.0, 2.0, 3.0]).unwrap();
        let m = fit_regressor(&RegressorSpec::lookup(), &rows).unwrap();
        assert_eq!(m.predict(&[1.0, 0.0]).unwrap(), 3.5);
        assert_eq!(m.predict(&[0.0, 1.0]).unwrap(), 7.0);
        // unseen key: global weighted mean (2 + 14 + 12) / 6
        assert!((m.predict(&[1.0, 1.0]).unwrap() - 28.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn knn_averages_nearest_targets() {
        let xs = [0.0, 0.1, 0.2, 5.0, 5.1];
        let ys = [1.0, 1.0, 1.0, 9.0, 9.0];
        let m = fit_regressor(&RegressorSpec::knn(2), &rows_1d(&xs, &ys, &[1.0; 5])).unwrap();
        assert_eq!(m.predict(&[0.05]).unwrap(), 1.0);
        assert_eq!(m.predict(&[5.2]).unwrap(), 9.0);
    }

    #[test]
    fn width_mismatch_and_bad_rows() {
        let rows = rows_1d(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 1.0]);
        let m = fit_regressor(&RegressorSpec::default(), &rows).unwrap();
        assert!(matches!(
            m.predict(&[0.0, 1.0]),
            Err(Error::WidthMismatch { .. })
        ));
        assert!(
            fit_regressor(&RegressorSpec::default(), &rows_1d(&[0.0], &[1.0], &[0.0])).is_err()
        );
        assert!(fit_regressor(&RegressorSpec::default(), &RowSet::new(1)).is_err());
    }

    #[test]
    fn grid_search_prefers_flexible_fit() {
        let xs: Vec<f64> = (0..300).map(|i| -3.0 + 6.0 * i as f64 / 300.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
        let spec = RegressorSpec {
            bandwidth_grid: vec![0.3, 50.0],
            lambda_grid: vec![1e-6, 10.0],
            feature_count: 64,
            include_linear: false,
            ..RegressorSpec::default()
        };
        let m = fit_regressor(&spec, &rows_1d(&xs, &ys, &[1.0; 300])).unwrap();
        assert_eq!((m.spec.bandwidth, m.spec.ridge_lambda), (0.3, 1e-6));
        assert!(m.spec.bandwidth_grid.is_empty());
    }

    #[test]
    fn serde_round_trip_preserves_predictions() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.cos()).collect();
        let m = fit_regressor(
            &RegressorSpec::ridge(32, 1.0, 1e-4),
            &rows_1d(&xs, &ys, &[1.0; 30]),
        )
        .unwrap();
        let back: FittedRegressor =
            serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&[0.33]).unwrap(), m.predict(&[0.33]).unwrap());
    }
}
