//! Fixed-width encoding of histories and pooled training rows.
//!
//! Flat-padded layout for `max_len = L`, covariate dim `d`, arity `K`:
//!
//! ```text
//! [ X_1..X_L (L*d) | A_1..A_{L-1} dummy-coded ((L-1)*(K-1)) | Y_1..Y_{L-1} (L-1) | mask (L) | t ]
//! ```
//!
//! Treatment category 0 is the reference level (all zeros). Slots past the
//! history are zero and flagged 0 in the mask. The windowed(k) layout keeps
//! only the last `k` steps, most recent last, with a mask over lags `k..0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{HistoryView, Panel, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "k")]
pub enum EncodingScheme {
    FlatPadded,
    Windowed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub max_len: usize,
    pub scheme: EncodingScheme,
    pub include_time_index: bool,
    pub covariate_dim: usize,
    pub treatment_arity: usize,
}

impl FeatureCodec {
    pub fn new(
        max_len: usize,
        scheme: EncodingScheme,
        include_time_index: bool,
        covariate_dim: usize,
        treatment_arity: usize,
    ) -> Result<Self> {
        if max_len == 0 || covariate_dim == 0 || treatment_arity < 2 {
            return Err(Error::InvalidArgument(
                "codec needs max_len >= 1, covariate_dim >= 1, arity >= 2".into(),
            ));
        }
        if let EncodingScheme::Windowed(0) = scheme {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        Ok(Self {
            max_len,
            scheme,
            include_time_index,
            covariate_dim,
            treatment_arity,
        })
    }

    /// Codec sized for the longest trajectory of `panel`.
    pub fn for_panel(
        panel: &Panel,
        scheme: EncodingScheme,
        include_time_index: bool,
    ) -> Result<Self> {
        Self::new(
            panel.max_len(),
            scheme,
            include_time_index,
            panel.covariate_dim(),
            panel.treatment_arity(),
        )
    }

    fn slots(&self) -> (usize, usize, usize) {
        // (covariate slots, treatment/outcome slots, mask entries)
        match self.scheme {
            EncodingScheme::FlatPadded => (self.max_len, self.max_len - 1, self.max_len),
            EncodingScheme::Windowed(k) => (k, k, k + 1),
        }
    }

    pub fn width(&self) -> usize {
        let (cs, ps, ms) = self.slots();
        cs * self.covariate_dim
            + ps * (self.treatment_arity - 1)
            + ps
            + ms
            + usize::from(self.include_time_index)
    }

    /// Encode `h` into a freshly allocated vector.
    pub fn encode(&self, h: &HistoryView<'_>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.width()];
        self.encode_into(h, &mut out)?;
        Ok(out)
    }

    /// Encode into `out`, which must have length [`FeatureCodec::width`].
    pub fn encode_into(&self, h: &HistoryView<'_>, out: &mut [f64]) -> Result<()> {
        let t = h.t();
        if t > self.max_len {
            return Err(Error::HistoryTooLong {
                t,
                max_len: self.max_len,
            });
        }
        if h.dim() != self.covariate_dim {
            return Err(Error::CodecMismatch(format!(
                "history has covariate dim {}, codec expects {}",
                h.dim(),
                self.covariate_dim
            )));
        }
        if out.len() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                got: out.len(),
            });
        }
        if h.treatments().iter().any(|&a| a >= self.treatment_arity) {
            return Err(Error::CodecMismatch("treatment outside codec arity".into()));
        }
        out.fill(0.0);
        let d = self.covariate_dim;
        let k1 = self.treatment_arity - 1;
        let (cs, ps, ms) = self.slots();
        let a_off = cs * d;
        let y_off = a_off + ps * k1;
        let m_off = y_off + ps;
        match self.scheme {
            EncodingScheme::FlatPadded => {
                out[..t * d].copy_from_slice(h.covariates());
                for (s, &a) in h.treatments().iter().enumerate() {
                    if a > 0 {
                        out[a_off + s * k1 + a - 1] = 1.0;
                    }
                }
                out[y_off..y_off + t - 1].copy_from_slice(h.outcomes());
                out[m_off..m_off + t].fill(1.0);
            }
            EncodingScheme::Windowed(k) => {
                // covariate slot i holds lag k-1-i; treatment/outcome slot i holds lag k-i
                for i in 0..k {
                    let lag = k - 1 - i;
                    if lag < t {
                        let s = t - lag;
                        out[i * d..(i + 1) * d].copy_from_slice(h.x(s));
                    }
                    let lag = k - i;
                    if lag < t {
                        let s = t - lag;
                        let a = h.treatments()[s - 1];
                        if a > 0 {
                            out[a_off + i * k1 + a - 1] = 1.0;
                        }
                        out[y_off + i] = h.outcomes()[s - 1];
                    }
                }
                // mask entry i covers lag k-i
                for i in 0..ms {
                    if k - i < t {
                        out[m_off + i] = 1.0;
                    }
                }
            }
        }
        if self.include_time_index {
            out[m_off + ms] = t as f64;
        }
        Ok(())
    }

    /// Recover `(t, covariates, treatments, outcomes)` from a flat-padded
    /// encoding.
    pub fn decode_flat(&self, v: &[f64]) -> Result<(usize, Vec<f64>, Vec<usize>, Vec<f64>)> {
        if self.scheme != EncodingScheme::FlatPadded {
            return Err(Error::CodecMismatch(
                "decode only defined for flat-padded".into(),
            ));
        }
        if v.len() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                got: v.len(),
            });
        }
        let d = self.covariate_dim;
        let k1 = self.treatment_arity - 1;
        let (cs, ps, _) = self.slots();
        let a_off = cs * d;
        let y_off = a_off + ps * k1;
        let m_off = y_off + ps;
        let t = (0..self.max_len)
            .take_while(|&s| v[m_off + s] == 1.0)
            .count();
        let xs = v[..t * d].to_vec();
        let treatments = (0..t.saturating_sub(1))
            .map(|s| {
                let block = &v[a_off + s * k1..a_off + (s + 1) * k1];
                block.iter().position(|&b| b == 1.0).map_or(0, |p| p + 1)
            })
            .collect();
        let ys = v[y_off..y_off + t.saturating_sub(1)].to_vec();
        Ok((t, xs, treatments, ys))
    }
}

/// Struct-of-arrays training rows: one row per `(trajectory, t)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowSet {
    width: usize,
    features: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub traj_ids: Vec<usize>,
    pub times: Vec<usize>,
}

impl RowSet {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ..Default::default()
        }
    }

    pub fn from_parts(
        width: usize,
        features: Vec<f64>,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = targets.len();
        if features.len() != n * width || weights.len() != n {
            return Err(Error::InvalidArgument(
                "row set parts have inconsistent lengths".into(),
            ));
        }
        Ok(Self {
            width,
            features,
            targets,
            weights,
            traj_ids: vec![0; n],
            times: vec![0; n],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, features: &[f64], target: f64, weight: f64, traj: usize, t: usize) {
        debug_assert_eq!(features.len(), self.width);
        self.features.extend_from_slice(features);
        self.targets.push(target);
        self.weights.push(weight);
        self.traj_ids.push(traj);
        self.times.push(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64, f64, usize, usize)> + '_ {
        (0..self.len()).map(move |i| {
            (
                self.row(i),
                self.targets[i],
                self.weights[i],
                self.traj_ids[i],
                self.times[i],
            )
        })
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> RowSet {
        let mut out = RowSet::new(self.width);
        for &i in idx {
            out.push(
                self.row(i),
                self.targets[i],
                self.weights[i],
                self.traj_ids[i],
                self.times[i],
            );
        }
        out
    }

    /// Replace targets (same row order).
    pub fn with_targets(mut self, targets: Vec<f64>) -> Self {
        assert_eq!(targets.len(), self.len());
        self.targets = targets;
        self
    }
}

/// Per-row weights of the pooled loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowWeighting {
    /// `1 / (number of rows)`.
    #[default]
    Uniform,
    /// `1 / (n * (T_i - tau))`: every trajectory carries equal total weight.
    PerTrajectory,
}

/// What the pooled rows regress on.
pub enum PooledTarget<'f> {
    /// `Y_{t+tau}`.
    Outcome,
    /// Caller-supplied value per `(trajectory id, t)`.
    Supplied(&'f (dyn Fn(usize, &Trajectory, usize) -> f64 + Sync)),
}

fn check_horizon(panel: &Panel, tau: usize) -> Result<()> {
    let min_len = panel.min_len();
    if tau >= min_len {
        return Err(Error::HorizonTooLong { tau, min_len });
    }
    Ok(())
}

/// One row per `(i, t)` with `1 <= t <= T_i - tau`, features encoding `H_t`.
pub fn pooled_rows(
    panel: &Panel,
    codec: &FeatureCodec,
    tau: usize,
    target: PooledTarget<'_>,
    weighting: RowWeighting,
) -> Result<RowSet> {
    let ids: Vec<usize> = (0..panel.n()).collect();
    pooled_rows_filtered(panel, codec, tau, &ids, 0, weighting, &|id, traj, t| {
        Some(match &target {
            PooledTarget::Outcome => traj.y(t + tau),
            PooledTarget::Supplied(f) => f(id, traj, t),
        })
    })
}

/// General pooled-row builder.
///
/// For every trajectory in `ids` and every anchor time `t` in
/// `1..=T_i - tau`, the row is placed at time `t + offset` (its features
/// encode `H_{t+offset}`) and kept when `target(id, traj, t)` returns a
/// value. Weights follow `weighting` over the kept rows.
pub fn pooled_rows_filtered(
    panel: &Panel,
    codec: &FeatureCodec,
    tau: usize,
    ids: &[usize],
    offset: usize,
    weighting: RowWeighting,
    target: &(dyn Fn(usize, &Trajectory, usize) -> Option<f64> + Sync),
) -> Result<RowSet> {
    check_horizon(panel, tau)?;
    if offset > tau {
        return Err(Error::InvalidArgument(format!(
            "row offset {offset} beyond horizon {tau}"
        )));
    }
    let width = codec.width();
    let mut rows = RowSet::new(width);
    let mut buf = vec![0.0; width];
    let mut per_traj_counts = Vec::new();
    for &id in ids {
        let traj = panel.get(id);
        let before = rows.len();
        for t in 1..=traj.len() - tau {
            if let Some(y) = target(id, traj, t) {
                codec.encode_into(&traj.history_unchecked(t + offset), &mut buf)?;
                rows.push(&buf, y, 0.0, id, t);
            }
        }
        per_traj_counts.push((before, rows.len(), traj.len() - tau));
    }
    match weighting {
        RowWeighting::Uniform => {
            let w = 1.0 / rows.len().max(1) as f64;
            rows.weights.iter_mut().for_each(|x| *x = w);
        }
        RowWeighting::PerTrajectory => {
            let n = ids.len().max(1) as f64;
            for (start, end, count) in per_traj_counts {
                let w = 1.0 / (n * count as f64);
                rows.weights[start..end].iter_mut().for_each(|x| *x = w);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(x: &[f64], a: &[usize], y: &[f64]) -> Trajectory {
        Trajectory::scalar(x.to_vec(), a.to_vec(), y.to_vec())
    }

    fn flat(max_len: usize) -> FeatureCodec {
        FeatureCodec::new(max_len, EncodingScheme::FlatPadded, true, 1, 2).unwrap()
    }

    #[test]
    fn single_step_flat_layout() {
        let tr = traj(&[0.7, 0.1, 0.2], &[1, 0, 0], &[0.3, 0.4, 0.5]);
        let v = flat(3).encode(&tr.history(1).unwrap()).unwrap();
        assert_eq!(
            v,
            vec![0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn flat_layout_full_history() {
        let tr = traj(&[0.7, 0.1, 0.2], &[1, 0, 0], &[0.3, 0.4, 0.5]);
        let v = flat(3).encode(&tr.history(3).unwrap()).unwrap();
        assert_eq!(
            v,
            vec![0.7, 0.1, 0.2, 1.0, 0.0, 0.3, 0.4, 1.0, 1.0, 1.0, 3.0]
        );
    }

    #[test]
    fn differing_first_treatment_gives_distinct_vectors() {
        let a = traj(&[0.7, 0.1], &[0, 1], &[0.3, 0.4]);
        let b = traj(&[0.7, 0.1], &[1, 1], &[0.3, 0.4]);
        let c = flat(3);
        let va = c.encode(&a.history(2).unwrap()).unwrap();
        let vb = c.encode(&b.history(2).unwrap()).unwrap();
        assert_ne!(va, vb);
        assert_eq!(va, c.encode(&a.history(2).unwrap()).unwrap());
    }

    #[test]
    fn too_long_history_is_rejected() {
        let tr = traj(&[0.0; 4], &[0; 4], &[0.0; 4]);
        let err = flat(3).encode(&tr.history(4).unwrap()).unwrap_err();
        assert!(err.to_string().contains("history exceeds codec capacity"));
    }

    #[test]
    fn windowed_layout() {
        let tr = traj(&[1.0, 2.0, 3.0], &[1, 0, 1], &[10.0, 20.0, 30.0]);
        let c = FeatureCodec::new(5, EncodingScheme::Windowed(2), true, 1, 2).unwrap();
        // covariates lags 1,0 | treatments lags 2,1 | outcomes lags 2,1 | mask lags 2,1,0 | t
        assert_eq!(c.width(), 2 + 2 + 2 + 3 + 1);
        let v1 = c.encode(&tr.history(1).unwrap()).unwrap();
        assert_eq!(v1, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let v3 = c.encode(&tr.history(3).unwrap()).unwrap();
        assert_eq!(v3, vec![2.0, 3.0, 1.0, 0.0, 10.0, 20.0, 1.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn multi_category_treatments_use_dummy_blocks() {
        let tr = Trajectory::scalar(vec![0.0, 0.0, 0.0], vec![2, 1, 0], vec![0.0; 3]);
        let c = FeatureCodec::new(3, EncodingScheme::FlatPadded, false, 1, 3).unwrap();
        let v = c.encode(&tr.history(3).unwrap()).unwrap();
        // treatment block: slot 0 -> category 2 -> [0,1]; slot 1 -> category 1 -> [1,0]
        assert_eq!(&v[3..7], &[0.0, 1.0, 1.0, 0.0]);
        let (t, _, a, _) = c.decode_flat(&v).unwrap();
        assert_eq!((t, a), (3, vec![2, 1]));
    }

    fn panel_of(lengths: &[usize]) -> Panel {
        Panel::new(
            lengths
                .iter()
                .map(|&n| {
                    traj(
                        &vec![0.5; n],
                        &vec![1; n],
                        &(0..n).map(|i| i as f64).collect::<Vec<_>>(),
                    )
                })
                .collect(),
            1,
            2,
        )
        .unwrap()
    }

    #[test]
    fn pooled_row_counts() {
        let p = panel_of(&[5, 5]);
        let c = FeatureCodec::for_panel(&p, EncodingScheme::FlatPadded, true).unwrap();
        let rows = pooled_rows(&p, &c, 1, PooledTarget::Outcome, RowWeighting::Uniform).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.weights.iter().all(|&w| w == 1.0 / 8.0));
        assert_eq!(rows.targets[0], 1.0); // Y_2 for t = 1
        let rows = pooled_rows(&p, &c, 4, PooledTarget::Outcome, RowWeighting::Uniform).unwrap();
        assert_eq!(rows.len(), 2);
        let err = pooled_rows(&p, &c, 5, PooledTarget::Outcome, RowWeighting::Uniform).unwrap_err();
        assert!(err.to_string().contains("horizon too long"));
    }

    #[test]
    fn per_trajectory_normalization() {
        let p = panel_of(&[5, 3]);
        let c = FeatureCodec::for_panel(&p, EncodingScheme::FlatPadded, true).unwrap();
        let rows = pooled_rows(
            &p,
            &c,
            1,
            PooledTarget::Outcome,
            RowWeighting::PerTrajectory,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        // global scaling is 1/n with n = 2
        for (i, w) in rows.weights.iter().enumerate() {
            let expected = if i < 4 { 0.25 } else { 0.5 };
            assert_eq!(w * 2.0, expected);
        }
    }

    #[test]
    fn supplied_targets() {
        let p = panel_of(&[3]);
        let c = FeatureCodec::for_panel(&p, EncodingScheme::FlatPadded, true).unwrap();
        let f = |_id: usize, _tr: &Trajectory, t: usize| 10.0 * t as f64;
        let rows =
            pooled_rows(&p, &c, 0, PooledTarget::Supplied(&f), RowWeighting::Uniform).unwrap();
        assert_eq!(rows.targets, vec![10.0, 20.0, 30.0]);
        assert_eq!(rows.times, vec![1, 2, 3]);
    }

    fn arb_traj(max_len: usize) -> impl Strategy<Value = Trajectory> {
        (1..=max_len).prop_flat_map(|n| {
            (
                prop::collection::vec(-1e6f64..1e6, n),
                prop::collection::vec(0usize..3, n),
                prop::collection::vec(-1e6f64..1e6, n),
            )
                .prop_map(|(x, a, y)| Trajectory::scalar(x, a, y))
        })
    }

    proptest! {
        #[test]
        fn flat_encoding_round_trips(tr in arb_traj(6), frac in 0.0f64..1.0) {
            let c = FeatureCodec::new(6, EncodingScheme::FlatPadded, true, 1, 3).unwrap();
            let t = 1 + ((tr.len() - 1) as f64 * frac) as usize;
            let h = tr.history(t).unwrap();
            let v = c.encode(&h).unwrap();
            let (dt, xs, a, ys) = c.decode_flat(&v).unwrap();
            prop_assert_eq!(dt, t);
            prop_assert_eq!(&xs[..], h.covariates());
            prop_assert_eq!(&a[..], h.treatments());
            prop_assert_eq!(&ys[..], h.outcomes());
            // mask is 1 exactly on real slots
            let m_off = 6 + 5 * 2 + 5;
            for s in 0..6 {
                prop_assert_eq!(v[m_off + s] == 1.0, s < t);
            }
        }

        #[test]
        fn pooled_rows_count_matches_formula(lengths in prop::collection::vec(3usize..7, 1..6), tau in 0usize..3) {
            let p = panel_of(&lengths);
            let c = FeatureCodec::for_panel(&p, EncodingScheme::FlatPadded, true).unwrap();
            let rows = pooled_rows(&p, &c, tau, PooledTarget::Outcome, RowWeighting::Uniform).unwrap();
            let expected: usize = lengths.iter().map(|&l| l.saturating_sub(tau)).sum();
            prop_assert_eq!(rows.len(), expected);
        }
    }
}
