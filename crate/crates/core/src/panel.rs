//! Observational trajectories, history views and intervention sequences.
//!
//! Time indices are 1-based throughout: a trajectory of length `T` carries
//! `X_1..X_T`, `A_1..A_T`, `Y_1..Y_T`, and the history at time `t` holds
//! `X_1..X_t`, `A_1..A_{t-1}` and `Y_1..Y_{t-1}`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed sequence `(X_t, A_t, Y_t)`, `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Row-major `T x dim` covariate block.
    covariates: Vec<f64>,
    dim: usize,
    treatments: Vec<usize>,
    outcomes: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        covariates: Vec<f64>,
        dim: usize,
        treatments: Vec<usize>,
        outcomes: Vec<f64>,
    ) -> Self {
        Self {
            covariates,
            dim,
            treatments,
            outcomes,
        }
    }

    /// Convenience constructor for scalar covariates.
    pub fn scalar(covariates: Vec<f64>, treatments: Vec<usize>, outcomes: Vec<f64>) -> Self {
        Self::new(covariates, 1, treatments, outcomes)
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Covariate vector `X_t` (1-based).
    pub fn x(&self, t: usize) -> &[f64] {
        &self.covariates[(t - 1) * self.dim..t * self.dim]
    }

    /// Treatment `A_t` (1-based).
    pub fn a(&self, t: usize) -> usize {
        self.treatments[t - 1]
    }

    /// Outcome `Y_t` (1-based).
    pub fn y(&self, t: usize) -> f64 {
        self.outcomes[t - 1]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// History `H_t`; fails if `t` is zero or beyond the trajectory.
    pub fn history(&self, t: usize) -> Result<HistoryView<'_>> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "history time {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(self.history_unchecked(t))
    }

    pub(crate) fn history_unchecked(&self, t: usize) -> HistoryView<'_> {
        HistoryView {
            covariates: &self.covariates[..t * self.dim],
            treatments: &self.treatments[..t - 1],
            outcomes: &self.outcomes[..t - 1],
            dim: self.dim,
        }
    }

    /// Whether the observed treatments `A_t..A_{t+len-1}` equal `path`.
    pub fn follows(&self, t: usize, path: &[usize]) -> bool {
        t + path.len() - 1 <= self.len() && self.treatments[t - 1..t - 1 + path.len()] == *path
    }
}

/// Borrowed history `H_t = {X_1..X_t, A_1..A_{t-1}, Y_1..Y_{t-1}}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryView<'a> {
    covariates: &'a [f64],
    treatments: &'a [usize],
    outcomes: &'a [f64],
    dim: usize,
}

impl<'a> HistoryView<'a> {
    /// Build a history from raw prefixes. Requires `covariates.len() == t * dim`
    /// and `treatments.len() == outcomes.len() == t - 1` for some `t >= 1`.
    pub fn from_parts(
        covariates: &'a [f64],
        dim: usize,
        treatments: &'a [usize],
        outcomes: &'a [f64],
    ) -> Result<Self> {
        if dim == 0 || covariates.len() % dim != 0 || covariates.is_empty() {
            return Err(Error::InvalidArgument(
                "covariate prefix not a multiple of dim".into(),
            ));
        }
        let t = covariates.len() / dim;
        if treatments.len() + 1 != t || outcomes.len() + 1 != t {
            return Err(Error::InvalidArgument(format!(
                "history prefixes inconsistent: {t} covariates, {} treatments, {} outcomes",
                treatments.len(),
                outcomes.len()
            )));
        }
        Ok(Self {
            covariates,
            treatments,
            outcomes,
            dim,
        })
    }

    pub fn t(&self) -> usize {
        self.covariates.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariates(&self) -> &'a [f64] {
        self.covariates
    }

    pub fn treatments(&self) -> &'a [usize] {
        self.treatments
    }

    pub fn outcomes(&self) -> &'a [f64] {
        self.outcomes
    }

    /// `X_s` for `s <= t`.
    pub fn x(&self, s: usize) -> &'a [f64] {
        &self.covariates[(s - 1) * self.dim..s * self.dim]
    }

    /// Current covariate vector `X_t`.
    pub fn x_now(&self) -> &'a [f64] {
        self.x(self.t())
    }

    /// `A_{t-1}`, or `None` at `t = 1`.
    pub fn last_treatment(&self) -> Option<usize> {
        self.treatments.last().copied()
    }

    /// `Y_{t-1}`, or `None` at `t = 1`.
    pub fn last_outcome(&self) -> Option<f64> {
        self.outcomes.last().copied()
    }
}

/// A pair of treatment sequences `(a_{t:t+tau}, b_{t:t+tau})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl InterventionPair {
    pub fn new(a: Vec<usize>, b: Vec<usize>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "intervention sequences must be non-empty and of equal length ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn tau(&self) -> usize {
        self.a.len() - 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.a == self.b
    }

    pub fn check_arity(&self, arity: usize) -> Result<()> {
        if self.a.iter().chain(&self.b).any(|&v| v >= arity) {
            return Err(Error::InvalidArgument(format!(
                "intervention {:?}/{:?} has a treatment outside 0..{arity}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Intervention pairs used in the benchmark: `a` intervenes at the last
    /// step, `b` at the first.
    ///
    /// `tau = 0`: `a = (1)`, `b = (0)`; otherwise `a = (0, .., 0, 1)`,
    /// `b = (1, 0, .., 0)`.
    pub fn benchmark(tau: usize) -> Self {
        if tau == 0 {
            return Self {
                a: vec![1],
                b: vec![0],
            };
        }
        let mut a = vec![0; tau + 1];
        a[tau] = 1;
        let mut b = vec![0; tau + 1];
        b[0] = 1;
        Self { a, b }
    }
}

/// A problem found by [`validate_panel`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyTrajectory {
        traj: usize,
    },
    LengthMismatch {
        traj: usize,
        covariates: usize,
        treatments: usize,
        outcomes: usize,
    },
    DimensionMismatch {
        traj: usize,
        dim: usize,
    },
    TreatmentOutOfRange {
        traj: usize,
        t: usize,
        value: usize,
    },
    NonFiniteCovariate {
        traj: usize,
        t: usize,
    },
    NonFiniteOutcome {
        traj: usize,
        t: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTrajectory { traj } => write!(f, "trajectory {traj}: empty trajectory"),
            Violation::LengthMismatch {
                traj,
                covariates,
                treatments,
                outcomes,
            } => write!(
                f,
                "trajectory {traj}: length mismatch ({covariates} covariate rows, {treatments} treatments, {outcomes} outcomes)"
            ),
            Violation::DimensionMismatch { traj, dim } => {
                write!(f, "trajectory {traj}: covariate dimension mismatch (dim {dim})")
            }
            Violation::TreatmentOutOfRange { traj, t, value } => {
                write!(f, "trajectory {traj}, t = {t}: treatment out of range ({value})")
            }
            Violation::NonFiniteCovariate { traj, t } => {
                write!(f, "trajectory {traj}, t = {t}: non-finite covariate")
            }
            Violation::NonFiniteOutcome { traj, t } => {
                write!(f, "trajectory {traj}, t = {t}: non-finite outcome")
            }
        }
    }
}

/// The observational dataset: `n` trajectories sharing covariate dimension
/// and treatment arity. Trajectory ids are positions in the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    trajectories: Vec<Trajectory>,
    treatment_arity: usize,
    covariate_dim: usize,
}

impl Panel {
    /// Checked constructor; fails with the first violation found.
    pub fn new(
        trajectories: Vec<Trajectory>,
        covariate_dim: usize,
        treatment_arity: usize,
    ) -> Result<Self> {
        let panel = Self::new_unchecked(trajectories, covariate_dim, treatment_arity);
        let report = validate_panel(&panel);
        if let Some(v) = report.first() {
            return Err(Error::InvalidPanel(format!(
                "{v} ({} violations)",
                report.len()
            )));
        }
        if panel.trajectories.is_empty() {
            return Err(Error::InvalidPanel("no trajectories".into()));
        }
        Ok(panel)
    }

    pub fn new_unchecked(
        trajectories: Vec<Trajectory>,
        covariate_dim: usize,
        treatment_arity: usize,
    ) -> Self {
        Self {
            trajectories,
            treatment_arity,
            covariate_dim,
        }
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn treatment_arity(&self) -> usize {
        self.treatment_arity
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn get(&self, id: usize) -> &Trajectory {
        &self.trajectories[id]
    }

    pub fn min_len(&self) -> usize {
        self.trajectories
            .iter()
            .map(Trajectory::len)
            .min()
            .unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.trajectories
            .iter()
            .map(Trajectory::len)
            .max()
            .unwrap_or(0)
    }

    /// Sub-panel made of the given trajectory ids, in the given order.
    pub fn select(&self, ids: &[usize]) -> Panel {
        Panel::new_unchecked(
            ids.iter().map(|&i| self.trajectories[i].clone()).collect(),
            self.covariate_dim,
            self.treatment_arity,
        )
    }

    /// Write `traj_id,t,x_1..x_d,a,y` rows; reals carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("traj_id,t");
        for j in 1..=self.covariate_dim {
            header.push_str(&format!(",x_{j}"));
        }
        header.push_str(",a,y");
        writeln!(w, "{header}")?;
        for (id, traj) in self.trajectories.iter().enumerate() {
            for t in 1..=traj.len() {
                let mut line = format!("{id},{t}");
                for v in traj.x(t) {
                    line.push(',');
                    line.push_str(&fmt_real(*v));
                }
                line.push_str(&format!(",{},{}", traj.a(t), fmt_real(traj.y(t))));
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    /// Read the CSV layout written by [`Panel::write_csv`]. Rows of one
    /// trajectory must be contiguous and ordered by `t`. When `arity` is
    /// `None` it is inferred as `max(a) + 1` (at least 2).
    pub fn read_csv<R: BufRead>(r: R, arity: Option<usize>) -> Result<Panel> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty panel file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 5
            || cols[0] != "traj_id"
            || cols[1] != "t"
            || cols[cols.len() - 2] != "a"
            || cols[cols.len() - 1] != "y"
        {
            return Err(Error::Parse(format!("unexpected panel header {header:?}")));
        }
        let dim = cols.len() - 4;
        let mut trajectories = Vec::new();
        let mut current: Option<(String, Vec<f64>, Vec<usize>, Vec<f64>)> = None;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields",
                    lineno + 2,
                    cols.len()
                )));
            }
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", lineno + 2));
            let id = fields[0].to_string();
            let t: usize = fields[1].parse().map_err(|_| bad("t"))?;
            let xs = fields[2..2 + dim]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad("covariate")))
                .collect::<Result<Vec<_>>>()?;
            let a: usize = fields[2 + dim].parse().map_err(|_| bad("treatment"))?;
            let y: f64 = fields[3 + dim].parse().map_err(|_| bad("outcome"))?;
            let fresh = !matches!(&current, Some((cur, ..)) if *cur == id);
            if fresh {
                if let Some((_, x, a, y)) = current.take() {
                    trajectories.push(Trajectory::new(x, dim, a, y));
                }
                current = Some((id, Vec::new(), Vec::new(), Vec::new()));
            }
            let (_, cx, ca, cy) = current.as_mut().expect("current trajectory");
            if t != ca.len() + 1 {
                return Err(Error::Parse(format!(
                    "line {}: time index {t} out of order",
                    lineno + 2
                )));
            }
            cx.extend(xs);
            ca.push(a);
            cy.push(y);
        }
        if let Some((_, x, a, y)) = current.take() {
            trajectories.push(Trajectory::new(x, dim, a, y));
        }
        let arity = arity.unwrap_or_else(|| {
            trajectories
                .iter()
                .flat_map(|t| t.treatments().iter().copied())
                .max()
                .map_or(2, |m| (m + 1).max(2))
        });
        Panel::new(trajectories, dim, arity)
    }

    /// Newline-delimited JSON, one trajectory per line.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for traj in &self.trajectories {
            serde_json::to_writer(&mut w, traj)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R, covariate_dim: usize, arity: usize) -> Result<Panel> {
        let mut trajectories = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str::<Trajectory>(&line)?);
        }
        Panel::new(trajectories, covariate_dim, arity)
    }
}

/// Decimal formatting with 17 significant digits (bit-exact round trip).
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Check every trajectory and panel invariant; an empty report means the
/// panel is well-formed.
pub fn validate_panel(panel: &Panel) -> Vec<Violation> {
    let mut report = Vec::new();
    for (i, traj) in panel.trajectories.iter().enumerate() {
        if traj.dim != panel.covariate_dim || traj.dim == 0 {
            report.push(Violation::DimensionMismatch {
                traj: i,
                dim: traj.dim,
            });
            continue;
        }
        let rows = traj.covariates.len() / traj.dim;
        if traj.covariates.len() % traj.dim != 0
            || rows != traj.treatments.len()
            || rows != traj.outcomes.len()
        {
            report.push(Violation::LengthMismatch {
                traj: i,
                covariates: rows,
                treatments: traj.treatments.len(),
                outcomes: traj.outcomes.len(),
            });
            continue;
        }
        if rows == 0 {
            report.push(Violation::EmptyTrajectory { traj: i });
            continue;
        }
        for t in 1..=rows {
            if traj.x(t).iter().any(|v| !v.is_finite()) {
                report.push(Violation::NonFiniteCovariate { traj: i, t });
            }
            if traj.a(t) >= panel.treatment_arity {
                report.push(Violation::TreatmentOutOfRange {
                    traj: i,
                    t,
                    value: traj.a(t),
                });
            }
            if !traj.y(t).is_finite() {
                report.push(Violation::NonFiniteOutcome { traj: i, t });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(x: &[f64], a: &[usize], y: &[f64]) -> Trajectory {
        Trajectory::scalar(x.to_vec(), a.to_vec(), y.to_vec())
    }

    fn small_panel() -> Panel {
        Panel::new_unchecked(
            vec![
                traj(&[0.1, 0.2, 0.3], &[0, 1, 1], &[1.0, 2.0, 3.0]),
                traj(&[-0.1, 0.5, 0.7], &[1, 1, 0], &[0.5, -1.0, 0.25]),
                traj(&[1.5, -2.0, 0.0], &[0, 0, 0], &[0.0, 0.0, 1.0]),
            ],
            1,
            2,
        )
    }

    #[test]
    fn well_formed_panel_has_empty_report() {
        assert!(validate_panel(&small_panel()).is_empty());
    }

    #[test]
    fn out_of_range_treatment_is_reported() {
        let p = Panel::new_unchecked(vec![traj(&[0.0, 0.0], &[0, 2], &[0.0, 0.0])], 1, 2);
        let report = validate_panel(&p);
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("treatment out of range"));
    }

    #[test]
    fn nan_outcome_is_reported() {
        let p = Panel::new_unchecked(vec![traj(&[0.0, 0.0], &[0, 1], &[f64::NAN, 0.0])], 1, 2);
        let report = validate_panel(&p);
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("non-finite outcome"));
        assert!(Panel::new(p.trajectories().to_vec(), 1, 2).is_err());
    }

    #[test]
    fn length_mismatch_is_reported() {
        let p = Panel::new_unchecked(vec![traj(&[0.0, 0.0, 1.0], &[0, 1], &[0.0, 0.0])], 1, 2);
        assert!(matches!(
            validate_panel(&p)[0],
            Violation::LengthMismatch { .. }
        ));
    }

    #[test]
    fn history_prefixes_are_one_shorter() {
        let p = small_panel();
        let h = p.get(0).history(2).unwrap();
        assert_eq!(h.t(), 2);
        assert_eq!(h.covariates(), &[0.1, 0.2]);
        assert_eq!(h.treatments(), &[0]);
        assert_eq!(h.outcomes(), &[1.0]);
        assert_eq!(h.last_treatment(), Some(0));
        assert!(p.get(0).history(4).is_err());
        assert!(p.get(0).history(0).is_err());
    }

    #[test]
    fn follows_checks_observed_path() {
        let p = small_panel();
        assert!(p.get(0).follows(2, &[1, 1]));
        assert!(!p.get(0).follows(1, &[1, 1]));
        assert!(!p.get(0).follows(3, &[1, 1]));
    }

    #[test]
    fn benchmark_pairs() {
        assert_eq!(InterventionPair::benchmark(0).a, vec![1]);
        assert_eq!(InterventionPair::benchmark(1).a, vec![0, 1]);
        assert_eq!(InterventionPair::benchmark(1).b, vec![1, 0]);
        assert_eq!(InterventionPair::benchmark(2).a, vec![0, 0, 1]);
        assert_eq!(InterventionPair::benchmark(2).b, vec![1, 0, 0]);
        assert!(InterventionPair::new(vec![0], vec![0, 1]).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let p = Panel::new(
            vec![traj(
                &[0.1, 1.0 / 3.0],
                &[0, 1],
                &[std::f64::consts::PI, -1e-300],
            )],
            1,
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("traj_id,t,x_1,a,y\n"));
        let back = Panel::read_csv(&buf[..], Some(2)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn ndjson_round_trip() {
        let p = Panel::new(small_panel().trajectories().to_vec(), 1, 2).unwrap();
        let mut buf = Vec::new();
        p.write_ndjson(&mut buf).unwrap();
        assert_eq!(Panel::read_ndjson(&buf[..], 1, 2).unwrap(), p);
    }
}
