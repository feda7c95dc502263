use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use super::regressor::{argmin, check_rows, cv_folds, cv_score, spd_solve};
use crate::codec::RowSet;
use crate::error::{Error, Result};

/// Numerical floor applied to predicted probabilities at evaluation.
pub const PROB_EPS: f64 = 1e-10;

/// Multinomial logistic regression over (optionally cosine-featurized)
/// standardized inputs, fitted by damped Newton iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Random cosine features; 0 gives a plain linear-logistic model.
    pub feature_count: usize,
    pub bandwidth: f64,
    pub include_linear: bool,
    /// L2 penalty on non-intercept coefficients (per unit total weight).
    pub l2: f64,
    /// Stop when the sup-norm of the gradient falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// When non-empty, `l2` is chosen from this grid by cross-validated log-loss.
    pub l2_grid: Vec<f64>,
    /// When non-empty, `bandwidth` is chosen from this grid by cross-validated log-loss.
    pub bandwidth_grid: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            feature_count: 32,
            bandwidth: 3.0,
            include_linear: true,
            l2: 1e-3,
            tolerance: 1e-8,
            max_iterations: 100,
            seed: 0,
            l2_grid: Vec::new(),
            bandwidth_grid: Vec::new(),
            cv_folds: 3,
        }
    }
}

impl ClassifierSpec {
    pub fn linear() -> Self {
        Self {
            feature_count: 0,
            ..Self::default()
        }
    }

    /// Default model with the penalty picked by cross-validation.
    pub fn tuned() -> Self {
        Self {
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_count == 0 && !self.include_linear {
            return Err(Error::InvalidArgument(
                "classifier needs features or linear terms".into(),
            ));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument("bandwidth must be > 0".into()));
        }
        if !(self.l2 >= 0.0 && self.tolerance > 0.0 && self.max_iterations > 0) {
            return Err(Error::InvalidArgument(
                "need l2 >= 0, tolerance > 0, max_iterations > 0".into(),
            ));
        }
        if self.l2_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite()))
            || self
                .bandwidth_grid
                .iter()
                .any(|b| !(*b > 0.0 && b.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "tuning grids need l2 >= 0 and bandwidth > 0".into(),
            ));
        }
        if self.is_tuned() && self.cv_folds < 2 {
            return Err(Error::InvalidArgument("cv_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn is_tuned(&self) -> bool {
        !(self.l2_grid.is_empty() && self.bandwidth_grid.is_empty())
    }

    pub fn candidates(&self) -> Vec<ClassifierSpec> {
        let l2s = if self.l2_grid.is_empty() {
            vec![self.l2]
        } else {
            self.l2_grid.clone()
        };
        let bws = if self.bandwidth_grid.is_empty() {
            vec![self.bandwidth]
        } else {
            self.bandwidth_grid.clone()
        };
        let mut out = Vec::new();
        for &bandwidth in &bws {
            for &l2 in &l2s {
                out.push(ClassifierSpec {
                    l2,
                    bandwidth,
                    l2_grid: Vec::new(),
                    bandwidth_grid: Vec::new(),
                    ..self.clone()
                });
            }
        }
        out
    }
}

/// Penalized weighted cross-entropy on a fixed design matrix.
///
/// Parameters are `(K-1)` blocks of length `p` (class 0 is the reference);
/// column 0 of the design is the intercept and is not penalized.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    pub p: usize,
    pub n_classes: usize,
    pub design: Vec<f64>,
    pub labels: Vec<usize>,
    /// Normalized to sum to one.
    pub weights: Vec<f64>,
    pub l2: f64,
}

const GROUPS: usize = 16;
const BLOCK: usize = 256;

impl LogisticProblem {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        (self.n_classes - 1) * self.p
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.p..(i + 1) * self.p]
    }

    /// Class probabilities at design row `d`.
    pub fn probs(&self, theta: &[f64], d: &[f64], out: &mut [f64]) {
        softmax(theta, self.p, d, out);
    }

    fn ranges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let per = n.div_ceil(GROUPS).max(1);
        (0..n.div_ceil(per))
            .map(|g| (g * per, ((g + 1) * per).min(n)))
            .collect()
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        theta
            .chunks_exact(self.p)
            .map(|blk| blk[1..].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * 0.5
            * self.l2
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let parts: Vec<f64> = self
            .ranges()
            .into_par_iter()
            .map(|(lo, hi)| {
                (lo..hi)
                    .filter(|&i| self.weights[i] > 0.0)
                    .map(|i| {
                        -self.weights[i] * log_prob(theta, self.p, self.row(i), self.labels[i])
                    })
                    .sum::<f64>()
            })
            .collect();
        parts.iter().sum::<f64>() + self.penalty(theta)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.gradient_hessian(theta, false).0
    }

    fn gradient_hessian(&self, theta: &[f64], hessian: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let (p, km1) = (self.p, self.n_classes - 1);
        let dim = self.dim();
        let parts: Vec<(Vec<f64>, Option<DMatrix<f64>>)> = self
            .ranges()
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut g = vec![0.0; dim];
                let mut h = hessian.then(|| DMatrix::<f64>::zeros(dim, dim));
                let mut pr = vec![0.0; self.n_classes];
                // binary case: Hessian via blocked products of sqrt-weighted rows
                let mut block = (hessian && km1 == 1).then(|| DMatrix::<f64>::zeros(BLOCK, p));
                let mut filled = 0;
                for i in lo..hi {
                    let d = self.row(i);
                    let w = self.weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    self.probs(theta, d, &mut pr);
                    for k in 0..km1 {
                        let r = pr[k + 1] - f64::from(u8::from(self.labels[i] == k + 1));
                        for (gj, &dj) in g[k * p..(k + 1) * p].iter_mut().zip(d) {
                            *gj += w * r * dj;
                        }
                    }
                    if let Some(m) = block.as_mut() {
                        let s = (w * pr[1] * pr[0]).sqrt();
                        for (c, &v) in d.iter().enumerate() {
                            m[(filled, c)] = s * v;
                        }
                        filled += 1;
                        if filled == BLOCK {
                            h.as_mut().expect("hessian").gemm_tr(1.0, m, m, 1.0);
                            filled = 0;
                        }
                    } else if let Some(h) = h.as_mut() {
                        for k in 0..km1 {
                            for j in 0..km1 {
                                let s = w * pr[k + 1] * (f64::from(u8::from(k == j)) - pr[j + 1]);
                                for a in 0..p {
                                    let sa = s * d[a];
                                    for b in 0..p {
                                        h[(k * p + a, j * p + b)] += sa * d[b];
                                    }
                                }
                            }
                        }
                    }
                }
                if let (Some(m), Some(h)) = (block.as_ref(), h.as_mut()) {
                    if filled > 0 {
                        let part = m.rows(0, filled);
                        h.gemm_tr(1.0, &part, &part, 1.0);
                    }
                }
                (g, h)
            })
            .collect();
        let mut g = vec![0.0; dim];
        let mut h = hessian.then(|| DMatrix::<f64>::zeros(dim, dim));
        for (pg, ph) in parts {
            g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
            if let (Some(h), Some(ph)) = (h.as_mut(), ph) {
                *h += ph;
            }
        }
        for k in 0..km1 {
            for a in 1..p {
                g[k * p + a] += self.l2 * theta[k * p + a];
                if let Some(h) = h.as_mut() {
                    h[(k * p + a, k * p + a)] += self.l2;
                }
            }
        }
        (g, h)
    }

    /// Damped Newton with backtracking; returns parameters and iterations.
    pub fn solve(&self, tolerance: f64, max_iterations: usize) -> Result<(Vec<f64>, usize)> {
        let mut theta = vec![0.0; self.dim()];
        let mut loss = self.loss(&theta);
        let mut grad_norm = f64::INFINITY;
        for iter in 0..max_iterations {
            let (g, h) = self.gradient_hessian(&theta, true);
            grad_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if grad_norm <= tolerance {
                return Ok((theta, iter));
            }
            let h = h.expect("hessian requested");
            let rhs = DVector::from_iterator(g.len(), g.iter().map(|v| -v));
            let step = newton_step(h, &rhs)?;
            let slope: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = theta
                    .iter()
                    .zip(step.iter())
                    .map(|(a, s)| a + t * s)
                    .collect();
                let trial_loss = self.loss(&trial);
                if trial_loss <= loss + 1e-4 * t * slope {
                    theta = trial;
                    loss = trial_loss;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let g = self.gradient(&theta);
        let final_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if final_norm <= tolerance {
            return Ok((theta, max_iterations));
        }
        Err(Error::NonConvergence {
            iterations: max_iterations,
            grad_norm: final_norm.min(grad_norm),
        })
    }
}

fn newton_step(h: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Ok(x) = spd_solve(h.clone(), rhs) {
        return Ok(x);
    }
    let scale = h
        .diagonal()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1e-300);
    let mut damping = 1e-10 * scale;
    for _ in 0..12 {
        let mut hd = h.clone();
        for i in 0..hd.nrows() {
            hd[(i, i)] += damping;
        }
        if let Ok(x) = spd_solve(hd, rhs) {
            return Ok(x);
        }
        damping *= 10.0;
    }
    Err(Error::Singular)
}

fn logits(theta: &[f64], p: usize, d: &[f64], out: &mut [f64]) {
    out[0] = 0.0;
    for (o, blk) in out[1..].iter_mut().zip(theta.chunks_exact(p)) {
        *o = blk.iter().zip(d).map(|(a, b)| a * b).sum();
    }
}

fn softmax(theta: &[f64], p: usize, d: &[f64], out: &mut [f64]) {
    logits(theta, p, d, out);
    let m = out.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for v in out.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    out.iter_mut().for_each(|v| *v /= s);
}

fn log_prob(theta: &[f64], p: usize, d: &[f64], label: usize) -> f64 {
    let k = theta.len() / p + 1;
    let mut z = vec![0.0; k];
    logits(theta, p, d, &mut z);
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[label] - lse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedClassifier {
    pub spec: ClassifierSpec,
    pub width: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub iterations: usize,
    pub map: FeatureMap,
    pub coef: Vec<f64>,
}

impl FittedClassifier {
    fn p(&self) -> usize {
        1 + self.map.output_width()
    }

    fn design(&self, x: &[f64], scratch: &mut [f64], d: &mut [f64]) {
        d[0] = 1.0;
        self.map.map_into(x, scratch, &mut d[1..]);
    }

    /// Class probabilities, floored at [`PROB_EPS`] and summing to one.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: x.len(),
            });
        }
        let mut scratch = vec![0.0; self.map.input_width()];
        let mut d = vec![0.0; self.p()];
        let mut out = vec![0.0; self.n_classes];
        self.proba_with(x, &mut scratch, &mut d, &mut out);
        Ok(out)
    }

    fn proba_with(&self, x: &[f64], scratch: &mut [f64], d: &mut [f64], out: &mut [f64]) {
        self.design(x, scratch, d);
        softmax(&self.coef, self.p(), d, out);
        if self.n_classes == 2 {
            out[1] = out[1].clamp(PROB_EPS, 1.0 - PROB_EPS);
            out[0] = 1.0 - out[1];
        } else {
            out.iter_mut()
                .for_each(|v| *v = v.clamp(PROB_EPS, 1.0 - PROB_EPS));
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|v| *v /= s);
        }
    }

    pub fn prob(&self, x: &[f64], class: usize) -> Result<f64> {
        if class >= self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range"
            )));
        }
        Ok(self.predict_proba(x)?[class])
    }

    /// Row-major `rows.len() x n_classes` probabilities.
    pub fn predict_proba_rows(&self, rows: &RowSet) -> Result<Vec<f64>> {
        if rows.width() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: rows.width(),
            });
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.n_classes;
        Ok(rows
            .features()
            .par_chunks(self.width * 256)
            .flat_map_iter(|chunk| {
                let mut scratch = vec![0.0; self.map.input_width()];
                let mut d = vec![0.0; self.p()];
                let mut out = vec![0.0; chunk.len() / self.width * k];
                for (x, o) in chunk.chunks_exact(self.width).zip(out.chunks_exact_mut(k)) {
                    self.proba_with(x, &mut scratch, &mut d, o);
                }
                out
            })
            .collect())
    }
}

/// Build the penalized problem for `rows` with integer `labels`.
pub fn logistic_problem(
    map: &FeatureMap,
    rows: &RowSet,
    labels: &[usize],
    n_classes: usize,
    l2: f64,
) -> LogisticProblem {
    let total: f64 = rows.weights.iter().sum();
    let p = 1 + map.output_width();
    let mut design = vec![0.0; rows.len() * p];
    design.par_chunks_mut(p).enumerate().for_each_init(
        || vec![0.0; map.input_width()],
        |scratch, (i, d)| {
            d[0] = 1.0;
            map.map_into(rows.row(i), scratch, &mut d[1..]);
        },
    );
    LogisticProblem {
        p,
        n_classes,
        design,
        labels: labels.to_vec(),
        weights: rows.weights.iter().map(|w| w / total).collect(),
        l2,
    }
}

pub fn fit_classifier(
    spec: &ClassifierSpec,
    rows: &RowSet,
    labels: &[usize],
    n_classes: usize,
) -> Result<FittedClassifier> {
    spec.validate()?;
    check_rows(rows)?;
    if labels.len() != rows.len() {
        return Err(Error::InvalidArgument(
            "labels and rows differ in length".into(),
        ));
    }
    if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::InvalidArgument("labels outside 0..n_classes".into()));
    }
    let mut present = vec![false; n_classes];
    for (&l, &w) in labels.iter().zip(&rows.weights) {
        if w > 0.0 {
            present[l] = true;
        }
    }
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::SingleClass);
    }
    if spec.is_tuned() {
        let candidates = spec.candidates();
        // held-out labels travel in the target column
        let labeled = rows
            .clone()
            .with_targets(labels.iter().map(|&l| l as f64).collect());
        let folds = cv_folds(rows, spec.cv_folds);
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| {
                cv_score(&labeled, &folds, spec.cv_folds, |train, test| {
                    let train_labels: Vec<usize> =
                        train.targets.iter().map(|&y| y as usize).collect();
                    let m = fit_classifier(c, train, &train_labels, n_classes)?;
                    let p = m.predict_proba_rows(test)?;
                    Ok(test
                        .targets
                        .iter()
                        .zip(&test.weights)
                        .enumerate()
                        .map(|(i, (&y, w))| -w * p[i * n_classes + y as usize].ln())
                        .sum())
                })
            })
            .collect();
        let best = argmin(&scores).ok_or(Error::NonConvergence {
            iterations: spec.max_iterations,
            grad_norm: f64::NAN,
        })?;
        log::debug!("classifier cv scores {scores:?}, picked {best}");
        return fit_classifier(&candidates[best], rows, labels, n_classes);
    }
    let map = FeatureMap::fit(
        rows.features(),
        rows.width(),
        &rows.weights,
        spec.feature_count,
        spec.bandwidth,
        spec.include_linear,
        spec.seed,
    );
    let problem = logistic_problem(&map, rows, labels, n_classes, spec.l2);
    let (coef, iterations) = problem.solve(spec.tolerance, spec.max_iterations)?;
    Ok(FittedClassifier {
        spec: spec.clone(),
        width: rows.width(),
        n_classes,
        n_train: rows.len(),
        iterations,
        map,
        coef,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_data_with_penalty_is_monotone() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 4.0 - 5.0).collect();
        let labels: Vec<usize> = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
        let rows = RowSet::from_parts(1, xs.clone(), vec![0.0; 40], vec![1.0; 40]).unwrap();
        let spec = ClassifierSpec {
            l2: 1e-2,
            ..ClassifierSpec::linear()
        };
        let m = fit_classifier(&spec, &rows, &labels, 2).unwrap();
        assert!(m.coef[1] > 0.0);
        let probs: Vec<f64> = xs.iter().map(|&x| m.prob(&[x], 1).unwrap()).collect();
        assert!(probs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn separated_data_without_penalty_fails_to_converge() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let labels: Vec<usize> = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
        let rows = RowSet::from_parts(1, xs, vec![0.0; 20], vec![1.0; 20]).unwrap();
        let spec = ClassifierSpec {
            l2: 0.0,
            tolerance: 1e-14,
            max_iterations: 15,
            ..ClassifierSpec::linear()
        };
        match fit_classifier(&spec, &rows, &labels, 2) {
            Err(Error::NonConvergence { grad_norm, .. }) => assert!(grad_norm > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = RowSet::from_parts(1, vec![0.0, 1.0], vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(matches!(
            fit_classifier(&ClassifierSpec::linear(), &rows, &[1, 1], 2),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn three_classes_normalize() {
        let xs: Vec<f64> = (0..90).map(|i| (i % 30) as f64 / 10.0).collect();
        let labels: Vec<usize> = (0..90).map(|i| (i * 7 + i / 30) % 3).collect();
        let rows = RowSet::from_parts(1, xs, vec![0.0; 90], vec![1.0; 90]).unwrap();
        let m = fit_classifier(&ClassifierSpec::default(), &rows, &labels, 3).unwrap();
        for x in [-1.0, 0.4, 2.9, 50.0] {
            let p = m.predict_proba(&[x]).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
